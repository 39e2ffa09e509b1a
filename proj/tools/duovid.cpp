#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "duovid/annotate.hpp"
#include "duovid/config.hpp"
#include "duovid/evalharness.hpp"
#include "duovid/live_client.hpp"
#include "duovid/synthetic.hpp"
#include "duovid/training.hpp"
#include "json.hpp"

using namespace duovid;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Records only the flags given on the command line, as a patch over the
// resolved config.
class FlagPatch {
 public:
  template <class T>
  CLI::Option* option(CLI::App* app, const std::string& name, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(name, *value, help);
    commits_.push_back([this, opt, value, pointer] {
      if (opt->count()) patch_[json::json_pointer(pointer)] = *value;
    });
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& name, const std::string& pointer, bool set_to,
                    const std::string& help) {
    CLI::Option* opt = app->add_flag(name, help);
    commits_.push_back([this, opt, pointer, set_to] {
      if (opt->count()) patch_[json::json_pointer(pointer)] = set_to;
    });
    return opt;
  }

  json collect() {
    patch_ = json::object();
    for (auto& c : commits_) c();
    return patch_;
  }

 private:
  json patch_ = json::object();
  std::vector<std::function<void()>> commits_;
};

struct Run {
  std::string command;
  std::vector<std::string> argv;
  RunConfig config;
  json extra = json::object();
};

void write_manifest(const Run& run) {
  const fs::path dir = run.config.output_dir();
  fs::create_directories(dir);
  json m = {{"format", "duovid-run-v1"},
            {"command", run.command},
            {"argv", run.argv},
            {"config", run.config.json()},
            {"git_revision", git_revision()}};
  m.update(run.extra);
  io::atomic_write(dir / ("run_" + run.command + ".json"), m.dump(2) + "\n");
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

TemplateStore open_templates(const RunConfig& c) {
  const auto dir = c.get<std::string>("/templates");
  return dir.empty() ? TemplateStore() : TemplateStore(dir);
}

fs::path required_path(const RunConfig& c, const std::string& pointer, const std::string& flag) {
  const auto p = c.get<std::string>(pointer);
  require(!p.empty(), ErrorKind::config_error, flag + " is required");
  return p;
}

int cmd_sample(Run& run) {
  const auto& c = run.config;
  VideoClipMeta meta;
  if (const auto video = c.get<std::string>("/sample/video"); !video.empty())
    meta = open_frame_source(video)->meta();
  else
    meta = {"synthetic", c.get<std::size_t>("/sample/total"), 25.0, ""};
  const auto indices = sample_frames(meta, c.get<std::size_t>("/sample/frames"), c.get<std::size_t>("/sample/segments"));
  print({{"total", meta.total_frames},
         {"frames", c.get<std::size_t>("/sample/frames")},
         {"segments", c.get<std::size_t>("/sample/segments")},
         {"indices", indices}});
  write_manifest(run);
  return 0;
}

int cmd_budget(Run& run) {
  const auto& c = run.config;
  const auto pool = c.get<std::size_t>("/budget/pool");
  const auto ig = c.get<std::size_t>("/budget/image_grid"), vg = c.get<std::size_t>("/budget/video_grid");
  require(pool >= 1 && ig % pool == 0 && vg % pool == 0, ErrorKind::config_error,
          "--pool must divide both grid sizes");
  json report = token_budget(c.get<std::size_t>("/budget/frames"), c.get<std::size_t>("/budget/segments"), ig / pool,
                             vg / pool, c.get<std::size_t>("/budget/context"), c.get<std::size_t>("/budget/reserved"),
                             c.get<bool>("/budget/time_pool"));
  report["pool"] = pool;
  print(report);
  write_manifest(run);
  return 0;
}

std::unique_ptr<VideoLM<float>> build_model(const RunConfig& c, const std::string& checkpoint) {
  if (!checkpoint.empty()) return load_model<float>(checkpoint);
  return std::make_unique<VideoLM<float>>(c.model());
}

int cmd_encode(Run& run) {
  const auto& c = run.config;
  auto model = build_model(c, c.get<std::string>("/encode/checkpoint"));
  auto source = open_frame_source(required_path(c, "/encode/video", "--video"));
  const auto features = model->encode_source(*source);
  NoGradGuard no_grad;
  std::map<std::string, Tensor<float>> out{{"image_tokens", model->image_tokens(features).value()}};
  const auto video = model->video_tokens(features);
  json shapes = {{"image_tokens", out["image_tokens"].shape()}, {"video_segments", json::array()}};
  for (std::size_t s = 0; s < video.size(); ++s) {
    out["video_tokens_" + std::to_string(s)] = video[s].value();
    shapes["video_segments"].push_back(video[s].value().shape());
  }
  const fs::path dir = c.output_dir();
  fs::create_directories(dir);
  io::write_archive(dir / "features.dvar", out);
  shapes["output"] = (dir / "features.dvar").string();
  print(shapes);
  write_manifest(run);
  return 0;
}

int cmd_train(Run& run) {
  const auto& c = run.config;
  const Stage stage = parse_stage(c.get<std::string>("/train/stage"));
  auto cfg = StageConfig::for_stage(stage);
  if (!c.is_null("/train/lr")) cfg.lr = c.get<double>("/train/lr");
  cfg.epochs = c.get<std::size_t>("/train/epochs");
  cfg.batch_size = c.get<std::size_t>("/train/batch_size");
  cfg.max_steps = c.get<std::size_t>("/train/max_steps");
  cfg.warmup = c.get<std::size_t>("/train/warmup");
  cfg.min_lr = c.get<double>("/train/min_lr");
  cfg.weight_decay = c.get<double>("/train/weight_decay");
  cfg.grad_clip = c.get<double>("/train/grad_clip");
  cfg.shuffle = c.get<bool>("/train/shuffle");
  cfg.require_prior_stages = c.get<bool>("/train/require_prior_stages");
  cfg.seed = c.seed();
  cfg.dataset = required_path(c, "/train/dataset", "--dataset");
  cfg.video_root = required_path(c, "/train/videos", "--videos");
  cfg.output_dir = c.output_dir();
  auto model = build_model(c, c.get<std::string>("/train/init"));
  auto result = run_stage(*model, cfg);
  print({{"stage", to_string(stage)},
         {"steps", result.losses.size()},
         {"first_loss", result.losses.front()},
         {"final_loss", result.losses.back()},
         {"trainable", result.report.trainable_groups()},
         {"checkpoint", result.checkpoint.string()}});
  write_manifest(run);
  return 0;
}

struct ClientStack {
  std::unique_ptr<TextGenClient> base;
  std::unique_ptr<AuditLog> audit;
  std::unique_ptr<RetryingClient> retrying;
};

ClientStack make_clients(const fs::path& output_dir) {
  ClientStack s;
  s.base = client_from_env();
  s.audit = std::make_unique<AuditLog>(output_dir / "audit.jsonl");
  s.retrying = std::make_unique<RetryingClient>(*s.base, s.audit.get());
  return s;
}

int cmd_annotate(Run& run) {
  const auto& c = run.config;
  const auto templates = open_templates(c);
  AnnotateOptions opts;
  opts.seed = c.seed();
  opts.pairs_per_category = c.get<std::size_t>("/annotate/pairs_per_category");
  opts.scene_threshold = c.get<double>("/annotate/scene_threshold");
  opts.fps = c.get<double>("/annotate/fps");
  opts.jobs = c.get<std::size_t>("/annotate/jobs");
  opts.models = {c.get<std::string>("/annotate/captioner"), c.get<std::string>("/annotate/integrator"),
                 c.get<std::string>("/annotate/qa_model")};
  const fs::path dir = c.output_dir();
  fs::create_directories(dir);
  auto clients = make_clients(dir);
  auto report = annotate_dataset(required_path(c, "/annotate/captions", "--captions"),
                                 required_path(c, "/annotate/videos", "--videos"), dir, *clients.retrying, templates, opts);
  run.extra = {{"client", clients.base->name()}, {"templates", templates.versions()}};
  print(report);
  write_manifest(run);
  return report.failures.empty() ? 0 : 1;
}

int cmd_eval(Run& run) {
  const auto& c = run.config;
  const Bench bench = parse_bench(c.get<std::string>("/eval/bench"));
  const auto templates = open_templates(c);
  const fs::path dir = c.output_dir();
  fs::create_directories(dir);
  EvalOptions opts;
  opts.allow_missing = c.get<bool>("/eval/allow_missing");
  opts.concurrency = c.get<std::size_t>("/eval/concurrency");
  opts.judge_model = c.get<std::string>("/eval/judge_model");
  opts.seed = c.seed();
  opts.quarantine = dir / "quarantine.jsonl";
  fs::remove(opts.quarantine);
  auto clients = make_clients(dir);
  CachedClient cached(*clients.retrying, dir / "judge_cache.jsonl");
  const auto predictions = load_predictions(required_path(c, "/eval/predictions", "--predictions"));
  const auto references = load_references(required_path(c, "/eval/references", "--references"));
  auto result = score_bench(bench, predictions, references, cached, templates, opts);
  write_eval_artifacts(result, dir);
  run.extra = {{"client", clients.base->name()}, {"templates", templates.versions()}};
  print(result.score);
  write_manifest(run);
  return 0;
}

int cmd_report(Run& run) {
  const auto& c = run.config;
  const auto files = c.get<std::vector<std::string>>("/report/results");
  require(!files.empty(), ErrorKind::config_error, "--results needs at least one results.json");
  std::vector<json> results;
  for (const auto& f : files) {
    require(fs::is_regular_file(f), ErrorKind::io_error, "cannot read " + f);
    try {
      results.push_back(json::parse(io::read_file(f)));
    } catch (const json::exception& e) {
      fail(ErrorKind::parse_error, f + ": " + e.what());
    }
  }
  const std::string md = render_report(results);
  const fs::path dir = c.output_dir();
  fs::create_directories(dir);
  io::atomic_write(dir / "report.md", md);
  std::cout << md;
  write_manifest(run);
  return 0;
}

int cmd_validate(const std::string& path) {
  const auto report = validate_dataset(path);
  print(report);
  return report.ok() ? 0 : 1;
}

int cmd_fixtures(const std::string& kind, const fs::path& dir, const std::string& table, const std::string& row) {
  if (kind == "overfit") {
    write_overfit_fixture(dir);
  } else if (kind == "annotate") {
    write_annotate_fixture(dir);
  } else if (kind == "mvbench") {
    require(!table.empty(), ErrorKind::config_error, "--table is required for mvbench fixtures");
    const json t = RunConfig::read_file(table);
    for (const auto& r : t.at("rows")) {
      if (r.at(0) != row) continue;
      std::vector<std::pair<std::string, double>> acc;
      for (std::size_t i = 0; i < mvbench_tasks.size(); ++i) acc.emplace_back(mvbench_tasks[i], r.at(i + 1).get<double>());
      write_mvbench_fixture(dir, acc);
      std::cout << dir.string() << "\n";
      return 0;
    }
    fail(ErrorKind::config_error, "no row '" + row + "' in " + table);
  } else {
    fail(ErrorKind::config_error, "unknown fixture kind '" + kind + "'");
  }
  std::cout << dir.string() << "\n";
  return 0;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config_error:
    case ErrorKind::invalid_argument: return 2;
    case ErrorKind::coverage_gap: return 3;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-encoder video-language pipeline: sampling, encoding, training, annotation and evaluation.",
               "duovid"};
  app.require_subcommand(1);
  app.fallthrough();

  FlagPatch flags;
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file or an earlier run manifest");
  flags.option<std::string>(&app, "--output-dir", "/output_dir", "Directory for all artifacts");
  flags.option<std::uint64_t>(&app, "--seed", "/seed", "Seed for models and client requests");
  flags.option<std::string>(&app, "--templates", "/templates", "Prompt template directory");

  auto* sample = app.add_subcommand("sample", "Print segment-wise sampled frame indices");
  flags.option<std::string>(sample, "--video", "/sample/video", "Video (.dvt file or frame directory)");
  flags.option<std::size_t>(sample, "--total", "/sample/total", "Source frame count when no video is given");
  flags.option<std::size_t>(sample, "--frames", "/sample/frames", "Frames to sample (T)");
  flags.option<std::size_t>(sample, "--segments", "/sample/segments", "Segments (K)");

  auto* encode = app.add_subcommand("encode", "Encode a video into adapted image and video tokens");
  flags.option<std::string>(encode, "--video", "/encode/video", "Video (.dvt file or frame directory)");
  flags.option<std::string>(encode, "--checkpoint", "/encode/checkpoint", "Model checkpoint (.dvar)");

  auto* budget = app.add_subcommand("budget", "Report the visual token budget as JSON");
  flags.option<std::size_t>(budget, "--frames", "/budget/frames", "Frames (T)");
  flags.option<std::size_t>(budget, "--segments", "/budget/segments", "Segments (K)");
  flags.option<std::size_t>(budget, "--image-grid", "/budget/image_grid", "Image encoder patch grid side");
  flags.option<std::size_t>(budget, "--video-grid", "/budget/video_grid", "Video encoder patch grid side");
  flags.option<std::size_t>(budget, "--pool", "/budget/pool", "Spatial pooling factor");
  flags.flag(budget, "--time-pool", "/budget/time_pool", true, "Pool each video segment over time");
  flags.option<std::size_t>(budget, "--context", "/budget/context", "LM context window");
  flags.option<std::size_t>(budget, "--reserved", "/budget/reserved", "Tokens reserved for text");

  auto* train = app.add_subcommand("train", "Run one training stage");
  flags.option<std::string>(train, "--stage", "/train/stage", "pretrain-image, pretrain-video or instruct")
      ->check(CLI::IsMember({"pretrain-image", "pretrain-video", "instruct", "pretrain_image", "pretrain_video"}));
  flags.option<std::string>(train, "--dataset", "/train/dataset", "Instruction JSONL");
  flags.option<std::string>(train, "--videos", "/train/videos", "Video directory");
  flags.option<std::string>(train, "--init", "/train/init", "Checkpoint to start from");
  flags.option<double>(train, "--lr", "/train/lr", "Peak learning rate (default per stage)");
  flags.option<std::size_t>(train, "--epochs", "/train/epochs", "Epochs");
  flags.option<std::size_t>(train, "--batch-size", "/train/batch_size", "Samples per step");
  flags.option<std::size_t>(train, "--max-steps", "/train/max_steps", "Stop after this many steps (0: no limit)");
  flags.option<std::size_t>(train, "--warmup", "/train/warmup", "Linear warmup steps");
  flags.option<double>(train, "--weight-decay", "/train/weight_decay", "AdamW weight decay");
  flags.flag(train, "--no-shuffle", "/train/shuffle", false, "Keep dataset order");
  flags.flag(train, "--skip-prior-check", "/train/require_prior_stages", false,
             "Allow instruct without completed pretraining stages");

  auto* annotate = app.add_subcommand("annotate", "Generate instruction QA pairs from videos and captions");
  flags.option<std::string>(annotate, "--captions", "/annotate/captions", "Captions JSONL {video_id, caption}");
  flags.option<std::string>(annotate, "--videos", "/annotate/videos", "Video directory");
  flags.option<std::size_t>(annotate, "--pairs-per-category", "/annotate/pairs_per_category", "QA pairs per category");
  flags.option<double>(annotate, "--scene-threshold", "/annotate/scene_threshold", "Scene cut threshold");
  flags.option<std::size_t>(annotate, "--jobs", "/annotate/jobs", "Videos processed concurrently");

  auto* eval = app.add_subcommand("eval", "Score predictions on a benchmark");
  flags.option<std::string>(eval, "--bench", "/eval/bench", "vcg, diverse, mvbench or zeroshot")
      ->check(CLI::IsMember({"vcg", "diverse", "mvbench", "zeroshot"}));
  flags.option<std::string>(eval, "--predictions", "/eval/predictions", "Predictions JSONL");
  flags.option<std::string>(eval, "--references", "/eval/references", "References or answer key JSONL");
  flags.flag(eval, "--allow-missing", "/eval/allow_missing", true, "Score despite references without predictions");
  flags.option<std::size_t>(eval, "--concurrency", "/eval/concurrency", "Concurrent judge calls");
  flags.option<std::string>(eval, "--judge-model", "/eval/judge_model", "Judge model name");

  auto* report = app.add_subcommand("report", "Render results.json files as tables");
  flags.option<std::vector<std::string>>(report, "--results", "/report/results", "results.json files");

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check an instruction JSONL file against the schema");
  validate->add_option("--dataset", validate_path, "Instruction JSONL")->required();

  std::string fixture_kind, fixture_dir, fixture_table, fixture_row = "Random";
  auto* fixtures = app.add_subcommand("fixtures", "Write synthetic fixture data");
  fixtures->add_option("--kind", fixture_kind, "overfit, annotate or mvbench")
      ->required()
      ->check(CLI::IsMember({"overfit", "annotate", "mvbench"}));
  fixtures->add_option("--dir", fixture_dir, "Destination directory")->required();
  fixtures->add_option("--table", fixture_table, "MVBench table JSON (mvbench only)");
  fixtures->add_option("--row", fixture_row, "Table row to reproduce (mvbench only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (validate->parsed()) return cmd_validate(validate_path);
    if (fixtures->parsed()) return cmd_fixtures(fixture_kind, fixture_dir, fixture_table, fixture_row);

    Run run;
    run.command = app.get_subcommands().front()->get_name();
    for (int i = 1; i < argc; ++i) run.argv.emplace_back(argv[i]);
    run.config = RunConfig::resolve(config_path.empty() ? json() : RunConfig::read_file(config_path), flags.collect());

    if (sample->parsed()) return cmd_sample(run);
    if (encode->parsed()) return cmd_encode(run);
    if (budget->parsed()) return cmd_budget(run);
    if (train->parsed()) return cmd_train(run);
    if (annotate->parsed()) return cmd_annotate(run);
    if (eval->parsed()) return cmd_eval(run);
    if (report->parsed()) return cmd_report(run);
  } catch (const Error& e) {
    std::cerr << "duovid: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "duovid: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
