#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "duovid/model.hpp"
#include "duovid/optim.hpp"
#include "json.hpp"

namespace duovid {

struct InstructionSample {
  std::string video_id;
  std::string question;
  std::string answer;
  std::string category;
};

inline void to_json(nlohmann::json& j, const InstructionSample& s) {
  j = {{"video_id", s.video_id}, {"category", s.category}, {"question", s.question}, {"answer", s.answer}};
}

// One JSON object per line; blank lines are skipped.
inline std::vector<InstructionSample> load_samples(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::io_error, "dataset " + path.string() + " not found");
  std::vector<InstructionSample> out;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse_error, where + ": " + e.what());
    }
    for (const char* key : {"video_id", "question", "answer"})
      require(j.contains(key) && j[key].is_string() && !j[key].get<std::string>().empty(), ErrorKind::schema_error,
              where + ": missing or empty '" + key + "'");
    out.push_back({j["video_id"], j["question"], j["answer"], j.value("category", "")});
  }
  require(!out.empty(), ErrorKind::io_error, "dataset " + path.string() + " has no samples");
  return out;
}

// <root>/<id>.dvt raw tensor, else <root>/<id>/ image directory.
inline std::filesystem::path find_video(const std::filesystem::path& root, const std::string& id) {
  const auto raw = root / (id + ".dvt");
  if (std::filesystem::is_regular_file(raw)) return raw;
  const auto dir = root / id;
  if (std::filesystem::is_directory(dir)) return dir;
  fail(ErrorKind::io_error, "no video for '" + id + "' under " + root.string());
}

template <class T>
using FeatureCache = std::map<std::string, VisualFeatures<T>>;

// Encoders are frozen, so each clip is encoded once per run.
template <class T>
FeatureCache<T> encode_videos(const VideoLM<T>& model, const std::vector<InstructionSample>& samples,
                              const std::filesystem::path& video_root) {
  FeatureCache<T> cache;
  for (const auto& s : samples) {
    if (cache.contains(s.video_id)) continue;
    auto source = open_frame_source(find_video(video_root, s.video_id), s.video_id);
    cache.emplace(s.video_id, model.encode_source(*source));
  }
  return cache;
}

inline double default_lr(Stage stage) { return stage == Stage::instruct ? 2e-4 : 1e-3; }

struct StageConfig {
  Stage stage = Stage::pretrain_image;
  double lr = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 1;
  std::size_t max_steps = 0;  // 0: run every epoch to completion
  std::size_t warmup = 0;
  double min_lr = 0.0;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  bool shuffle = true;
  bool require_prior_stages = true;
  std::filesystem::path dataset;
  std::filesystem::path video_root;
  std::filesystem::path output_dir;

  static StageConfig for_stage(Stage stage) {
    StageConfig c;
    c.stage = stage;
    c.lr = default_lr(stage);
    return c;
  }

  std::vector<std::string> trainable() const { return stage_trainable_groups(stage); }
};

inline void to_json(nlohmann::json& j, const StageConfig& c) {
  j = {{"stage", to_string(c.stage)},
       {"lr", c.lr},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"max_steps", c.max_steps},
       {"warmup", c.warmup},
       {"min_lr", c.min_lr},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"seed", c.seed},
       {"shuffle", c.shuffle},
       {"trainable", c.trainable()},
       {"dataset", c.dataset.string()},
       {"video_root", c.video_root.string()}};
}

struct GroupReport {
  std::string group;
  std::size_t tensors = 0;
  std::size_t count = 0;
  bool trainable = false;
  bool mutated = false;
};

inline void to_json(nlohmann::json& j, const GroupReport& g) {
  j = {{"group", g.group}, {"tensors", g.tensors}, {"count", g.count}, {"frozen", !g.trainable}, {"mutated", g.mutated}};
}

struct TrainableReport {
  std::vector<GroupReport> groups;
  std::size_t total = 0;

  std::set<std::string> trainable_groups() const {
    std::set<std::string> out;
    for (const auto& g : groups)
      if (g.trainable) out.insert(g.group);
    return out;
  }
  std::set<std::string> mutated_groups() const {
    std::set<std::string> out;
    for (const auto& g : groups)
      if (g.mutated) out.insert(g.group);
    return out;
  }
};

inline void to_json(nlohmann::json& j, const TrainableReport& r) { j = {{"groups", r.groups}, {"total", r.total}}; }

template <class T>
std::set<std::string> changed_groups(const ParamSet<T>& params, const std::map<std::string, Tensor<T>>& before) {
  std::set<std::string> out;
  for (const auto& p : params.all()) {
    auto it = before.find(p.name);
    if (it == before.end() || !(it->second == p.var.value())) out.insert(p.group);
  }
  return out;
}

// Every parameter lands in exactly one group row. `before`, when given, marks
// which groups changed since that snapshot.
template <class T>
TrainableReport trainable_report(const ParamSet<T>& params, const std::map<std::string, Tensor<T>>* before = nullptr) {
  const std::set<std::string> mutated = before ? changed_groups(params, *before) : std::set<std::string>{};
  TrainableReport report;
  std::map<std::string, std::size_t> row;
  for (const auto& p : params.all()) {
    auto [it, fresh] = row.emplace(p.group, report.groups.size());
    if (fresh) report.groups.push_back({p.group, 0, 0, false, mutated.contains(p.group)});
    auto& g = report.groups[it->second];
    ++g.tensors;
    g.count += p.var.size();
    g.trainable = g.trainable || p.var.requires_grad();
    report.total += p.var.size();
  }
  return report;
}

template <class T>
std::map<std::string, double> group_grad_norms(const ParamSet<T>& params) {
  std::map<std::string, long double> sq;
  for (const auto& p : params.all()) {
    auto& acc = sq[p.group];
    if (p.var.has_grad())
      for (T g : p.var.grad().data()) acc += static_cast<long double>(g) * g;
  }
  std::map<std::string, double> out;
  for (const auto& [g, v] : sq) out[g] = static_cast<double>(std::sqrt(v));
  return out;
}

// Commit id of the working tree, or "unknown" outside a git checkout.
inline std::string git_revision() {
  if (const char* pinned = std::getenv("DUOVID_GIT_REVISION")) return pinned;
  std::string out;
  if (FILE* pipe = popen("git rev-parse HEAD 2>/dev/null", "r")) {
    char buf[128];
    while (std::fgets(buf, sizeof buf, pipe)) out += buf;
    pclose(pipe);
  }
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

struct StageResult {
  Stage stage = Stage::pretrain_image;
  std::vector<double> losses;
  std::vector<double> lrs;
  std::map<std::string, double> first_step_grad_norms;
  TrainableReport report;
  nlohmann::json manifest;
  std::filesystem::path checkpoint;
};

template <class T>
double dataset_loss(const VideoLM<T>& model, const std::vector<InstructionSample>& samples, const FeatureCache<T>& cache,
                    Stage stage) {
  NoGradGuard no_grad;
  double total = 0;
  for (const auto& s : samples)
    total += static_cast<double>(model.loss(cache.at(s.video_id), tokenize_turn(model.config().chat, s.question, s.answer), stage).item());
  return total / static_cast<double>(samples.size());
}

// Trains the stage's parameter groups on pre-encoded samples. When
// cfg.output_dir is set, writes loss.jsonl, manifest.json and a checkpoint.
template <class T>
StageResult run_stage(VideoLM<T>& model, const StageConfig& cfg, const std::vector<InstructionSample>& samples,
                      const FeatureCache<T>& cache) {
  require(!samples.empty(), ErrorKind::invalid_argument, "no training samples");
  require(cfg.epochs >= 1 && cfg.batch_size >= 1, ErrorKind::config_error, "epochs and batch size must be >= 1");
  require(cfg.lr > 0, ErrorKind::config_error, "learning rate must be positive");
  if (cfg.stage == Stage::instruct && cfg.require_prior_stages) {
    const auto& h = model.history();
    for (const char* prior : {"pretrain_image", "pretrain_video"})
      require(std::find(h.begin(), h.end(), prior) != h.end(), ErrorKind::config_error,
              std::string("instruct stage needs a checkpoint that completed ") + prior);
  }
  for (const auto& s : samples)
    require(cache.contains(s.video_id), ErrorKind::invalid_argument, "no encoded features for " + s.video_id);

  model.configure_stage(cfg.stage);
  const auto before = model.params().snapshot();
  const std::size_t per_epoch = (samples.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total_steps = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  AdamW<T> opt = AdamW<T>::over_trainable(model.params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.grad_clip});
  CosineSchedule schedule{cfg.lr, cfg.min_lr, cfg.warmup, total_steps};

  std::ofstream trace;
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    trace.open(cfg.output_dir / "loss.jsonl", std::ios::trunc);
    require(trace.good(), ErrorKind::io_error, "cannot write " + (cfg.output_dir / "loss.jsonl").string());
  }

  StageResult result;
  result.stage = cfg.stage;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch && step < total_steps; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(samples.size(), lo + cfg.batch_size);
      const T weight = T{1} / static_cast<T>(hi - lo);
      double batch_loss = 0;
      opt.zero_grad();
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& s = samples[order[i]];
        Var<T> loss = model.loss(cache.at(s.video_id), tokenize_turn(model.config().chat, s.question, s.answer), cfg.stage);
        batch_loss += static_cast<double>(loss.item());
        backward(ops::scale(loss, weight));
      }
      batch_loss /= static_cast<double>(hi - lo);
      require(std::isfinite(batch_loss), ErrorKind::pipeline_error, "non-finite loss at step " + std::to_string(step + 1));
      if (step == 0) result.first_step_grad_norms = group_grad_norms(model.params());
      const double lr = schedule.at(step);
      opt.step(lr);
      ++step;
      result.losses.push_back(batch_loss);
      result.lrs.push_back(lr);
      if (trace.is_open()) trace << nlohmann::json{{"step", step}, {"loss", batch_loss}, {"lr", lr}}.dump() << "\n";
    }
  }
  opt.zero_grad();

  result.report = trainable_report(model.params(), &before);
  const auto allowed = cfg.trainable();
  for (const auto& g : result.report.mutated_groups())
    require(std::find(allowed.begin(), allowed.end(), g) != allowed.end(), ErrorKind::config_error,
            "stage " + std::string(to_string(cfg.stage)) + " modified frozen group " + g);
  model.history().push_back(std::string(to_string(cfg.stage)));

  result.manifest = {{"stage_config", cfg},
                     {"model", model.config()},
                     {"samples", samples.size()},
                     {"steps", step},
                     {"initial_loss", result.losses.empty() ? 0.0 : result.losses.front()},
                     {"final_loss", result.losses.empty() ? 0.0 : result.losses.back()},
                     {"trainable_report", result.report},
                     {"history", model.history()},
                     {"seeds", {{"model", model.config().seed}, {"shuffle", cfg.seed}}},
                     {"git_revision", git_revision()}};
  if (!cfg.output_dir.empty()) {
    trace.close();
    result.checkpoint = cfg.output_dir / "checkpoint.dvar";
    model.save(result.checkpoint);
    io::atomic_write(cfg.output_dir / "manifest.json", result.manifest.dump(2) + "\n");
  }
  return result;
}

// Loads cfg.dataset, encodes its clips from cfg.video_root and trains.
template <class T>
StageResult run_stage(VideoLM<T>& model, const StageConfig& cfg) {
  const auto samples = load_samples(cfg.dataset);
  const auto cache = encode_videos(model, samples, cfg.video_root);
  return run_stage(model, cfg, samples, cache);
}

}  // namespace duovid
