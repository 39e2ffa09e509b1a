#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "duovid/synthetic.hpp"
#include "duovid/training.hpp"

using namespace duovid;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("duovid_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.lm.embed_dim = 32;
  cfg.lm.context_window = 160;
  cfg.image_adapter.out_dim = 32;
  cfg.video_adapter.out_dim = 32;
  cfg.lora.rank = 4;
  cfg.lora.alpha = 4;
  return cfg;
}

struct Fixture {
  fs::path dir;
  std::vector<InstructionSample> samples;
};

Fixture overfit_fixture() {
  static const Fixture f = [] {
    Fixture out{scratch("fixture"), {}};
    write_overfit_fixture(out.dir);
    out.samples = load_samples(out.dir / "train.jsonl");
    return out;
  }();
  return f;
}

}  // namespace

TEST_CASE("stage defaults follow the recipe") {
  CHECK(StageConfig::for_stage(Stage::pretrain_image).lr == 1e-3);
  CHECK(StageConfig::for_stage(Stage::pretrain_video).lr == 1e-3);
  CHECK(StageConfig::for_stage(Stage::instruct).lr == 2e-4);
  CHECK(StageConfig::for_stage(Stage::instruct).epochs == 1);
  CHECK(parse_stage("pretrain-video") == Stage::pretrain_video);
}

TEST_CASE("trainable report per stage") {
  VideoLM<float> model(small_config());
  const std::size_t total = model.params().count();
  model.configure_stage(Stage::pretrain_image);
  auto r = trainable_report(model.params());
  CHECK(r.trainable_groups() == std::set<std::string>{group::image_adapter});
  CHECK(r.total == total);
  std::size_t sum = 0, tensors = 0;
  for (const auto& g : r.groups) sum += g.count, tensors += g.tensors;
  CHECK(sum == total);
  CHECK(tensors == model.params().all().size());

  model.configure_stage(Stage::instruct);
  r = trainable_report(model.params());
  CHECK(r.trainable_groups() == std::set<std::string>{group::image_adapter, group::video_adapter, group::lora});
  CHECK(r.total == model.params().count());
}

TEST_CASE("optimizer refuses to step a frozen group") {
  VideoLM<float> model(small_config());
  model.configure_stage(Stage::pretrain_video);
  auto opt = AdamW<float>::over_trainable(model.params(), {});
  model.params().set_trainable(group::video_adapter, false);
  try {
    opt.step(1e-3);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config_error);
  }
}

TEST_CASE("cosine schedule") {
  CosineSchedule s{1.0, 0.0, 0, 10};
  CHECK(s.at(0) == Catch::Approx(1.0));
  CHECK(s.at(5) == Catch::Approx(0.5));
  CHECK(s.at(10) == Catch::Approx(0.0).margin(1e-12));
  CosineSchedule warm{1.0, 0.0, 4, 12};
  CHECK(warm.at(0) == Catch::Approx(0.25));
  CHECK(warm.at(4) == Catch::Approx(1.0));
}

TEST_CASE("pretraining stages touch only their adapter") {
  const auto fx = overfit_fixture();
  for (Stage stage : {Stage::pretrain_image, Stage::pretrain_video}) {
    VideoLM<float> model(small_config());
    auto cache = encode_videos(model, fx.samples, fx.dir / "videos");
    auto cfg = StageConfig::for_stage(stage);
    cfg.max_steps = 3;
    auto result = run_stage(model, cfg, fx.samples, cache);
    const std::string own = stage == Stage::pretrain_image ? group::image_adapter : group::video_adapter;
    CHECK(result.report.mutated_groups() == std::set<std::string>{own});
    for (const auto& [g, norm] : result.first_step_grad_norms) {
      INFO(g);
      if (g == own) CHECK(norm > 0);
      else CHECK(norm == 0);
    }
    for (double l : result.losses) CHECK(std::isfinite(l));
  }
}

TEST_CASE("instruct needs the pretraining stages unless told otherwise") {
  const auto fx = overfit_fixture();
  VideoLM<float> model(small_config());
  auto cache = encode_videos(model, fx.samples, fx.dir / "videos");
  auto cfg = StageConfig::for_stage(Stage::instruct);
  try {
    run_stage(model, cfg, fx.samples, cache);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config_error);
  }
}

TEST_CASE("three stages write artifacts and checkpoints round-trip") {
  const auto fx = overfit_fixture();
  const auto out = scratch("stages");
  VideoLM<float> model(small_config());
  for (Stage stage : {Stage::pretrain_image, Stage::pretrain_video, Stage::instruct}) {
    auto cfg = StageConfig::for_stage(stage);
    cfg.dataset = fx.dir / "train.jsonl";
    cfg.video_root = fx.dir / "videos";
    cfg.output_dir = out / std::string(to_string(stage));
    cfg.max_steps = 2;
    auto result = run_stage(model, cfg);
    CHECK(fs::exists(cfg.output_dir / "loss.jsonl"));
    CHECK(fs::exists(cfg.output_dir / "manifest.json"));
    CHECK(fs::exists(cfg.output_dir / "checkpoint.json"));
    CHECK(io::read_lines(cfg.output_dir / "loss.jsonl").size() == 2);
    if (stage == Stage::instruct) {
      CHECK(result.manifest["stage_config"]["lr"] == 2e-4);
      CHECK(result.report.mutated_groups() ==
            std::set<std::string>{group::image_adapter, group::video_adapter, group::lora});
    }
  }

  auto loaded = load_model<float>(out / "instruct" / "checkpoint.dvar");
  CHECK(loaded->has_lora());
  CHECK(loaded->history().size() == 3);
  auto features = model.encode_source(*open_frame_source(fx.dir / "videos" / "clip0.dvt"));
  auto turn = tokenize_turn(model.config().chat, "q", "a");
  CHECK(model.loss(features, turn, Stage::instruct).item() == loaded->loss(features, turn, Stage::instruct).item());
}

TEST_CASE("missing dataset is an io error") {
  VideoLM<float> model(small_config());
  auto cfg = StageConfig::for_stage(Stage::pretrain_image);
  cfg.dataset = "/nonexistent/train.jsonl";
  try {
    run_stage(model, cfg);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io_error);
  }
}

TEST_CASE("instruct training lowers the loss on the overfit fixture") {
  const auto fx = overfit_fixture();
  ModelConfig mc = small_config();
  mc.lora.targets = {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2", "lm.head"};
  VideoLM<float> model(mc);
  auto cache = encode_videos(model, fx.samples, fx.dir / "videos");
  model.configure_stage(Stage::instruct);
  const double initial = dataset_loss(model, fx.samples, cache, Stage::instruct);
  auto cfg = StageConfig::for_stage(Stage::instruct);
  cfg.require_prior_stages = false;
  cfg.lr = 3e-3;
  cfg.batch_size = 4;
  cfg.epochs = 100;
  cfg.max_steps = 120;
  run_stage(model, cfg, fx.samples, cache);
  CHECK(dataset_loss(model, fx.samples, cache, Stage::instruct) < 0.5 * initial);
}
