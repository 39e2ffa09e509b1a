#pragma once

// OpenAI-compatible chat-completions client. Requires OpenSSL; include only
// where the binary links it.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif

#include <cstdlib>
#include <memory>
#include <string>

#include "duovid/client.hpp"
#include "httplib.h"
#include "json.hpp"

namespace duovid {

inline constexpr const char* api_key_env = "DUOVID_API_KEY";
inline constexpr const char* api_base_env = "DUOVID_API_BASE";
inline constexpr const char* default_api_base = "https://api.openai.com/v1";

class LiveClient final : public TextGenClient {
 public:
  LiveClient(std::string api_key, std::string base_url = default_api_base, int timeout_seconds = 120)
      : key_(std::move(api_key)), timeout_(timeout_seconds) {
    const auto scheme_end = base_url.find("://");
    require(scheme_end != std::string::npos, ErrorKind::config_error, "API base must be a URL: " + base_url);
    const auto path_start = base_url.find('/', scheme_end + 3);
    host_ = base_url.substr(0, path_start);
    prefix_ = path_start == std::string::npos ? "" : base_url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  std::string generate(const GenRequest& r) override {
    nlohmann::json content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", r.prompt}});
    for (const auto& img : r.images)
      content.push_back({{"type", "image_url"},
                         {"image_url", {{"url", "data:image/png;base64," + httplib::detail::base64_encode(img)}}}});
    nlohmann::json body = {{"model", r.model},
                           {"messages", {{{"role", "user"}, {"content", content}}}},
                           {"temperature", 0},
                           {"seed", static_cast<std::int64_t>(r.seed & 0x7fffffffffffffffULL)}};

    httplib::Client http(host_);
    http.set_connection_timeout(timeout_);
    http.set_read_timeout(timeout_);
    http.set_bearer_token_auth(key_);
    auto res = http.Post(prefix_ + "/chat/completions", body.dump(), "application/json");
    if (!res) throw ClientFailure("request failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500)
      throw ClientFailure("HTTP " + std::to_string(res->status) + ": " + res->body);
    require(res->status == 200, ErrorKind::pipeline_error, "HTTP " + std::to_string(res->status) + ": " + res->body);
    try {
      auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ClientFailure(std::string("unexpected response body: ") + e.what());
    }
  }

  std::string name() const override { return "live:" + host_; }

 private:
  std::string key_;
  std::string host_;
  std::string prefix_;
  int timeout_;
};

// The live client when the credential variable is set, the mock otherwise.
inline std::unique_ptr<TextGenClient> client_from_env() {
  const char* key = std::getenv(api_key_env);
  if (!key || !*key) return std::make_unique<MockClient>();
  const char* base = std::getenv(api_base_env);
  return std::make_unique<LiveClient>(key, base && *base ? base : default_api_base);
}

}  // namespace duovid
