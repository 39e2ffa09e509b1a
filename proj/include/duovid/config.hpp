#pragma once

#include <filesystem>
#include <string>

#include "duovid/model.hpp"
#include "json.hpp"

namespace duovid {

// Every setting the CLI understands, with its default. Config files and
// flags may only override keys that appear here.
inline nlohmann::json default_run_config() {
  return {
      {"seed", 0},
      {"output_dir", "duovid-out"},
      {"templates", ""},
      {"model", ModelConfig{}},
      {"sample", {{"video", ""}, {"total", 32}, {"frames", 16}, {"segments", 4}}},
      {"encode", {{"video", ""}, {"checkpoint", ""}}},
      {"budget",
       {{"frames", 16}, {"segments", 4}, {"image_grid", 24}, {"video_grid", 16}, {"pool", 2}, {"time_pool", false},
        {"context", 4096}, {"reserved", 512}}},
      {"train",
       {{"stage", "pretrain-image"},
        {"dataset", ""},
        {"videos", ""},
        {"init", ""},
        {"lr", nullptr},
        {"epochs", 1},
        {"batch_size", 1},
        {"max_steps", 0},
        {"warmup", 0},
        {"min_lr", 0.0},
        {"weight_decay", 0.0},
        {"grad_clip", 1.0},
        {"shuffle", true},
        {"require_prior_stages", true}}},
      {"annotate",
       {{"captions", ""},
        {"videos", ""},
        {"pairs_per_category", 1},
        {"scene_threshold", 0.3},
        {"fps", 25.0},
        {"jobs", 1},
        {"captioner", "llava-v1.6"},
        {"integrator", "gpt-4"},
        {"qa_model", "gpt-3.5-turbo"}}},
      {"eval",
       {{"bench", "vcg"},
        {"predictions", ""},
        {"references", ""},
        {"allow_missing", false},
        {"concurrency", 1},
        {"judge_model", ""}}},
      {"report", {{"results", nlohmann::json::array()}}},
  };
}

namespace detail {

inline bool compatible(const nlohmann::json& base, const nlohmann::json& value) {
  if (base.is_null() || value.is_null()) return true;
  if (base.is_number() && value.is_number()) return !(base.is_number_integer() && value.is_number_float());
  return base.type() == value.type();
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  require(patch.is_object(), ErrorKind::config_error, where + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where + "/" + key;
    require(base.contains(key), ErrorKind::config_error, "unknown config key " + path);
    auto& slot = base[key];
    if (slot.is_object() && value.is_object()) {
      merge_into(slot, value, path);
    } else {
      require(compatible(slot, value), ErrorKind::config_error,
              "config key " + path + " expects " + std::string(slot.type_name()) + ", got " + value.type_name());
      slot = value;
    }
  }
}

}  // namespace detail

// Settings resolved as flags > config file > defaults.
class RunConfig {
 public:
  RunConfig() : values_(default_run_config()) {}

  static RunConfig resolve(const nlohmann::json& file, const nlohmann::json& flags) {
    RunConfig c;
    if (!file.is_null()) detail::merge_into(c.values_, file, "");
    if (!flags.is_null()) detail::merge_into(c.values_, flags, "");
    c.model();
    return c;
  }

  // Accepts a plain config document or a run manifest, whose "config" is
  // the resolved configuration of an earlier run.
  static nlohmann::json read_file(const std::filesystem::path& path) {
    require(std::filesystem::is_regular_file(path), ErrorKind::config_error, "config file " + path.string() + " not found");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::config_error, path.string() + ": " + e.what());
    }
    if (j.is_object() && j.contains("format") && j["format"] == "duovid-run-v1") return j.at("config");
    return j;
  }

  const nlohmann::json& json() const noexcept { return values_; }

  template <class T>
  T get(const std::string& pointer) const {
    try {
      return values_.at(nlohmann::json::json_pointer(pointer)).get<T>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::config_error, "config " + pointer + ": " + e.what());
    }
  }

  bool is_null(const std::string& pointer) const { return values_.at(nlohmann::json::json_pointer(pointer)).is_null(); }

  ModelConfig model() const {
    ModelConfig m;
    try {
      m = values_.at("model").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::config_error, std::string("model config: ") + e.what());
    }
    m.validate();
    return m;
  }

  std::filesystem::path output_dir() const { return get<std::string>("/output_dir"); }
  std::uint64_t seed() const { return get<std::uint64_t>("/seed"); }

 private:
  nlohmann::json values_;
};

}  // namespace duovid
