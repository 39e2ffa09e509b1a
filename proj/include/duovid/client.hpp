#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "duovid/error.hpp"
#include "duovid/io.hpp"
#include "json.hpp"

namespace duovid {

#ifndef DUOVID_TEMPLATE_DIR
#define DUOVID_TEMPLATE_DIR "templates"
#endif

// One text-in/text-out call. `vars` are the values the prompt was rendered
// from; `images` are encoded PNG attachments.
struct GenRequest {
  std::string template_id;
  std::string template_version;
  std::string prompt;
  std::uint64_t seed = 0;
  std::string model;
  std::map<std::string, std::string> vars;
  std::vector<std::string> images;
};

// Thrown by clients for failures worth retrying.
class ClientFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TextGenClient {
 public:
  virtual ~TextGenClient() = default;
  virtual std::string generate(const GenRequest& request) = 0;
  virtual std::string name() const = 0;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::string_view> parts) {
  std::uint64_t h = io::fnv1a64(std::to_string(seed));
  for (auto p : parts) h = io::fnv1a64(p, io::fnv1a64("\x1f", h));
  return h;
}

// Prompt templates are text files with {{name}} placeholders. A template's
// version is the hash of its bytes.
class TemplateStore {
 public:
  explicit TemplateStore(std::filesystem::path dir = default_dir()) : dir_(std::move(dir)) {
    require(std::filesystem::is_directory(dir_), ErrorKind::config_error,
            "template directory " + dir_.string() + " not found");
    for (const auto& entry : std::filesystem::directory_iterator(dir_))
      if (entry.path().extension() == ".txt") texts_[entry.path().stem().string()] = io::read_file(entry.path());
  }

  static std::filesystem::path default_dir() {
    if (const char* env = std::getenv("DUOVID_TEMPLATE_DIR"); env && *env) return env;
    return DUOVID_TEMPLATE_DIR;
  }

  const std::filesystem::path& dir() const noexcept { return dir_; }
  bool contains(const std::string& id) const { return texts_.contains(id); }

  const std::string& text(const std::string& id) const {
    auto it = texts_.find(id);
    require(it != texts_.end(), ErrorKind::config_error, "no prompt template '" + id + "' in " + dir_.string());
    return it->second;
  }

  std::string version(const std::string& id) const { return "fnv1a:" + io::hex64(io::fnv1a64(text(id))); }

  std::map<std::string, std::string> versions() const {
    std::map<std::string, std::string> out;
    for (const auto& [id, _] : texts_) out[id] = version(id);
    return out;
  }

  // Every placeholder must be bound and every binding used.
  std::string render(const std::string& id, const std::map<std::string, std::string>& vars) const {
    const std::string& src = text(id);
    std::string out;
    std::set<std::string> used;
    std::size_t pos = 0;
    while (true) {
      const std::size_t open = src.find("{{", pos);
      if (open == std::string::npos) break;
      const std::size_t close = src.find("}}", open);
      require(close != std::string::npos, ErrorKind::config_error, "template '" + id + "': unterminated placeholder");
      const std::string name = src.substr(open + 2, close - open - 2);
      auto it = vars.find(name);
      require(it != vars.end(), ErrorKind::config_error, "template '" + id + "': no value for {{" + name + "}}");
      out.append(src, pos, open - pos);
      out += it->second;
      used.insert(name);
      pos = close + 2;
    }
    out.append(src, pos);
    for (const auto& [name, _] : vars)
      require(used.contains(name), ErrorKind::config_error, "template '" + id + "' has no {{" + name + "}}");
    return out;
  }

  GenRequest request(const std::string& id, std::map<std::string, std::string> vars, std::uint64_t seed,
                     std::string model) const {
    GenRequest r;
    r.template_id = id;
    r.template_version = version(id);
    r.prompt = render(id, vars);
    r.seed = seed;
    r.model = std::move(model);
    r.vars = std::move(vars);
    return r;
  }

 private:
  std::filesystem::path dir_;
  std::map<std::string, std::string> texts_;
};

// Append-only JSONL record of every request and response.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(std::filesystem::path path) : path_(std::move(path)) {}

  void record(const GenRequest& r, std::size_t attempt, const std::string& outcome, bool ok) {
    nlohmann::json j = {{"seq", 0},
                        {"template_id", r.template_id},
                        {"template_version", r.template_version},
                        {"model", r.model},
                        {"seed", r.seed},
                        {"attempt", attempt},
                        {"prompt", r.prompt},
                        {"images", r.images.size()},
                        {ok ? "response" : "error", outcome}};
    std::lock_guard lock(mutex_);
    j["seq"] = seq_++;
    if (!path_.empty()) io::append_line(path_, j.dump());
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return seq_;
  }

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::size_t seq_ = 0;
};

struct RetryPolicy {
  std::size_t attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
};

// Retries ClientFailure with exponential backoff; the last failure surfaces
// as a pipeline error.
class RetryingClient final : public TextGenClient {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  RetryingClient(TextGenClient& inner, AuditLog* audit = nullptr, RetryPolicy policy = {}, Sleeper sleeper = {})
      : inner_(inner), audit_(audit), policy_(policy),
        sleep_(sleeper ? std::move(sleeper) : Sleeper([](auto d) { std::this_thread::sleep_for(d); })) {}

  std::string generate(const GenRequest& request) override {
    auto delay = policy_.initial_backoff;
    std::string last;
    for (std::size_t attempt = 1; attempt <= policy_.attempts; ++attempt) {
      try {
        std::string out = inner_.generate(request);
        if (audit_) audit_->record(request, attempt, out, true);
        return out;
      } catch (const ClientFailure& e) {
        last = e.what();
        if (audit_) audit_->record(request, attempt, last, false);
      }
      if (attempt < policy_.attempts) {
        sleep_(delay);
        delay = std::chrono::milliseconds(static_cast<long>(static_cast<double>(delay.count()) * policy_.multiplier));
      }
    }
    fail(ErrorKind::pipeline_error, inner_.name() + " failed " + std::to_string(policy_.attempts) + " times on '" +
                                        request.template_id + "': " + last);
  }

  std::string name() const override { return inner_.name(); }

 private:
  TextGenClient& inner_;
  AuditLog* audit_;
  RetryPolicy policy_;
  Sleeper sleep_;
};

// Response cache keyed by everything that determines a response. With a
// path, entries persist as JSONL and are reloaded on construction.
class CachedClient final : public TextGenClient {
 public:
  explicit CachedClient(TextGenClient& inner, std::filesystem::path path = {}) : inner_(inner), path_(std::move(path)) {
    if (path_.empty() || !std::filesystem::exists(path_)) return;
    for (const auto& line : io::read_lines(path_)) {
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        entries_[j.at("key").get<std::string>()] = j.at("response").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse_error, path_.string() + ": corrupt cache entry: " + e.what());
      }
    }
  }

  static std::string key(const GenRequest& r) {
    std::uint64_t h = io::fnv1a64(r.template_id);
    for (const std::string* part : {&r.template_version, &r.model, &r.prompt}) h = io::fnv1a64(*part, io::fnv1a64("\x1f", h));
    h = io::fnv1a64(std::to_string(r.seed), h);
    for (const auto& img : r.images) h = io::fnv1a64(img, h);
    return io::hex64(h);
  }

  std::string generate(const GenRequest& request) override {
    const std::string k = key(request);
    {
      std::lock_guard lock(mutex_);
      if (auto it = entries_.find(k); it != entries_.end()) {
        ++hits_;
        return it->second;
      }
    }
    std::string out = inner_.generate(request);
    std::lock_guard lock(mutex_);
    if (entries_.emplace(k, out).second && !path_.empty())
      io::append_line(path_, nlohmann::json{{"key", k}, {"template_id", request.template_id}, {"response", out}}.dump());
    return out;
  }

  std::string name() const override { return inner_.name(); }
  std::size_t hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
  }

 private:
  TextGenClient& inner_;
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::map<std::string, std::string> entries_;
  std::size_t hits_ = 0;
};

namespace detail {

inline std::string normalize_answer(std::string s) {
  std::string out;
  for (unsigned char c : s)
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
    else if (!out.empty() && out.back() != ' ') out.push_back(' ');
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

inline std::string first_sentence(const std::string& text) {
  const std::size_t end = text.find_first_of(".!?");
  return end == std::string::npos ? text : text.substr(0, end + 1);
}

inline std::string var(const GenRequest& r, const std::string& name) {
  auto it = r.vars.find(name);
  return it == r.vars.end() ? std::string{} : it->second;
}

}  // namespace detail

// Offline stand-in for the hosted models. Responses depend only on the
// request, so identical requests give identical text.
class MockClient final : public TextGenClient {
 public:
  struct Faults {
    std::size_t fail_first = 0;               // transient failures before the first success
    std::set<std::string> always_fail;        // template ids that never succeed
    std::set<std::string> malformed;          // template ids that answer with non-JSON text
  };

  MockClient() = default;
  explicit MockClient(Faults faults) : faults_(std::move(faults)) {}

  std::string generate(const GenRequest& r) override {
    const std::size_t n = calls_.fetch_add(1);
    if (n < faults_.fail_first) throw ClientFailure("mock transient failure");
    if (faults_.always_fail.contains(r.template_id)) throw ClientFailure("mock failure for " + r.template_id);
    if (faults_.malformed.contains(r.template_id)) return "I cannot answer in JSON today.";
    const std::string& id = r.template_id;
    if (id == "frame_caption") return frame_caption(r);
    if (id == "dense_description") return dense_description(r);
    if (id == "qa_generation") return qa_generation(r);
    if (id == "judge_qa") return judge_qa(r);
    if (id.rfind("judge_", 0) == 0) return nlohmann::json{{"score", judge_score(r)}}.dump();
    return "mock response " + io::hex64(fingerprint(r));
  }

  std::string name() const override { return "mock"; }
  std::size_t calls() const noexcept { return calls_.load(); }

 private:
  static std::uint64_t fingerprint(const GenRequest& r) {
    std::uint64_t h = io::fnv1a64(r.template_id);
    h = io::fnv1a64(r.prompt, h);
    h = io::fnv1a64(std::to_string(r.seed), h);
    for (const auto& img : r.images) h = io::fnv1a64(img, h);
    return h;
  }

  static std::string frame_caption(const GenRequest& r) {
    std::uint64_t h = io::fnv1a64(std::to_string(r.seed));
    for (const auto& img : r.images) h = io::fnv1a64(img, h);
    return "Frame " + detail::var(r, "frame_index") + " (" + io::hex64(h) +
           ") shows a simple scene with a single moving object on a plain background.";
  }

  static std::string dense_description(const GenRequest& r) {
    return detail::var(r, "gt_caption") + " In order, the keyframes show the following. " +
           detail::var(r, "frame_descriptions");
  }

  static std::string qa_generation(const GenRequest& r) {
    static const std::map<std::string, std::string> questions = {
        {"dense_caption", "Describe the video in detail."},
        {"detailed_temporal", "Describe the sequence of events in the video and how they depend on each other."},
        {"generic_qa", "What is happening in the video and what are its consequences?"},
        {"spatial", "What does the scene look like?"},
        {"reasoning", "Why does the scene change during the video?"},
        {"short_temporal", "What happens at the beginning of the video?"},
    };
    const std::string category = detail::var(r, "category");
    const std::string style = detail::var(r, "style");
    auto q = questions.find(category);
    const std::string base = q == questions.end() ? "What happens in the video?" : q->second;
    const std::string answer = style == "concise" ? detail::first_sentence(detail::var(r, "gt_caption"))
                                                  : detail::var(r, "dense_description");
    std::size_t count = 1;
    try {
      count = std::max<std::size_t>(1, std::stoul(detail::var(r, "count")));
    } catch (const std::exception&) {
    }
    nlohmann::json pairs = nlohmann::json::array();
    for (std::size_t i = 0; i < count; ++i)
      pairs.push_back({{"question", i ? base + " (" + std::to_string(i + 1) + ")" : base}, {"answer", answer}});
    return nlohmann::json{{"pairs", pairs}}.dump();
  }

  // A prediction that matches the reference scores 5; anything else gets a
  // hash-derived score in [0, 4].
  static int judge_score(const GenRequest& r) {
    const std::string pred = detail::normalize_answer(detail::var(r, "prediction"));
    if (!pred.empty() && pred == detail::normalize_answer(detail::var(r, "answer"))) return 5;
    return static_cast<int>(fingerprint(r) % 5);
  }

  static std::string judge_qa(const GenRequest& r) {
    const int score = judge_score(r);
    return nlohmann::json{{"pred", score >= 3 ? "yes" : "no"}, {"score", score}}.dump();
  }

  Faults faults_;
  std::atomic<std::size_t> calls_{0};
};

// Extracts the outermost JSON object or array embedded in free text.
inline nlohmann::json extract_json(const std::string& text) {
  const std::size_t begin = text.find_first_of("{[");
  require(begin != std::string::npos, ErrorKind::parse_error, "no JSON in response");
  const char close = text[begin] == '{' ? '}' : ']';
  const std::size_t end = text.rfind(close);
  require(end != std::string::npos && end > begin, ErrorKind::parse_error, "unterminated JSON in response");
  try {
    return nlohmann::json::parse(text.substr(begin, end - begin + 1));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, std::string("malformed JSON in response: ") + e.what());
  }
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception is
// rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w)
    workers.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace duovid
