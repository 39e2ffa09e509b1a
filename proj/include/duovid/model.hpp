#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "duovid/adapter.hpp"
#include "duovid/encoders.hpp"
#include "duovid/fusion.hpp"
#include "duovid/io.hpp"
#include "duovid/lm.hpp"
#include "duovid/media.hpp"
#include "duovid/tokenizer.hpp"
#include "json.hpp"

namespace duovid {

enum class Stage { pretrain_image, pretrain_video, instruct };

inline std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::pretrain_image: return "pretrain_image";
    case Stage::pretrain_video: return "pretrain_video";
    case Stage::instruct: return "instruct";
  }
  return "instruct";
}

// Accepts both pretrain_image and pretrain-image spellings.
inline Stage parse_stage(std::string_view text) {
  std::string s(text);
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "pretrain_image") return Stage::pretrain_image;
  if (s == "pretrain_video") return Stage::pretrain_video;
  if (s == "instruct") return Stage::instruct;
  fail(ErrorKind::config_error, "unknown stage '" + std::string(text) + "'");
}

inline std::vector<std::string> stage_trainable_groups(Stage stage) {
  switch (stage) {
    case Stage::pretrain_image: return {group::image_adapter};
    case Stage::pretrain_video: return {group::video_adapter};
    case Stage::instruct: return {group::image_adapter, group::video_adapter, group::lora};
  }
  return {};
}

struct ModelConfig {
  std::size_t frames = 8;    // T
  std::size_t segments = 4;  // K
  ImageEncoderSpec image{28, 7, 32, 2, 2, 3};
  VideoEncoderSpec video{14, 7, 32, 2, 2, 2, 3};
  AdapterConfig image_adapter{32, 64, 0, PoolMode::spatial_avg, 2, Activation::gelu};
  AdapterConfig video_adapter{32, 64, 0, PoolMode::spatial_avg, 2, Activation::gelu};
  LMConfig lm;
  LoraConfig lora;
  FusionOrder order = FusionOrder::sequential;
  ChatTemplate chat;
  std::uint64_t seed = 0;

  std::size_t frames_per_segment() const { return frames / segments; }

  void validate() const {
    require(segments >= 1 && frames >= segments, ErrorKind::config_error, "need frames >= segments >= 1");
    require(frames % segments == 0, ErrorKind::config_error, "frames must be a multiple of segments");
    require(video.frames_per_segment == frames_per_segment(), ErrorKind::config_error,
            "video encoder frames_per_segment must equal frames / segments");
    require(image_adapter.in_dim == image.feature_dim && video_adapter.in_dim == video.feature_dim,
            ErrorKind::config_error, "adapter input widths must match encoder widths");
    require(image_adapter.out_dim == lm.embed_dim && video_adapter.out_dim == lm.embed_dim, ErrorKind::config_error,
            "adapter output widths must match the LM width");
    require(image.channels == video.channels, ErrorKind::config_error, "encoders disagree on channel count");
    image.validate();
    video.validate();
    image_adapter.validate();
    video_adapter.validate();
    lm.validate();
  }
};

inline void to_json(nlohmann::json& j, const ImageEncoderSpec& s) {
  j = {{"input_size", s.input_size}, {"patch_size", s.patch_size}, {"feature_dim", s.feature_dim},
       {"num_blocks", s.num_blocks}, {"num_heads", s.num_heads},   {"channels", s.channels}};
}
inline void from_json(const nlohmann::json& j, ImageEncoderSpec& s) {
  s.input_size = j.value("input_size", s.input_size);
  s.patch_size = j.value("patch_size", s.patch_size);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.num_blocks = j.value("num_blocks", s.num_blocks);
  s.num_heads = j.value("num_heads", s.num_heads);
  s.channels = j.value("channels", s.channels);
}

inline void to_json(nlohmann::json& j, const VideoEncoderSpec& s) {
  j = {{"input_size", s.input_size}, {"patch_size", s.patch_size}, {"feature_dim", s.feature_dim},
       {"frames_per_segment", s.frames_per_segment}, {"num_blocks", s.num_blocks}, {"num_heads", s.num_heads},
       {"channels", s.channels}};
}
inline void from_json(const nlohmann::json& j, VideoEncoderSpec& s) {
  s.input_size = j.value("input_size", s.input_size);
  s.patch_size = j.value("patch_size", s.patch_size);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.frames_per_segment = j.value("frames_per_segment", s.frames_per_segment);
  s.num_blocks = j.value("num_blocks", s.num_blocks);
  s.num_heads = j.value("num_heads", s.num_heads);
  s.channels = j.value("channels", s.channels);
}

inline void to_json(nlohmann::json& j, const AdapterConfig& c) {
  j = {{"in_dim", c.in_dim},
       {"out_dim", c.out_dim},
       {"hidden_dim", c.hidden()},
       {"pool_mode", to_string(c.pool_mode)},
       {"pool_kernel", c.pool_kernel},
       {"activation", c.activation == Activation::gelu ? "gelu" : "identity"}};
}
inline void from_json(const nlohmann::json& j, AdapterConfig& c) {
  c.in_dim = j.value("in_dim", c.in_dim);
  c.out_dim = j.value("out_dim", c.out_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  if (j.contains("pool_mode")) c.pool_mode = parse_pool_mode(j.at("pool_mode").get<std::string>());
  c.pool_kernel = j.value("pool_kernel", c.pool_kernel);
  if (j.contains("activation")) {
    const auto a = j.at("activation").get<std::string>();
    require(a == "gelu" || a == "identity", ErrorKind::config_error, "unknown activation '" + a + "'");
    c.activation = a == "gelu" ? Activation::gelu : Activation::identity;
  }
}

inline void to_json(nlohmann::json& j, const LMConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},           {"num_layers", c.num_layers},
       {"num_heads", c.num_heads},   {"context_window", c.context_window}, {"mlp_dim", c.mlp_dim}};
}
inline void from_json(const nlohmann::json& j, LMConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.context_window = j.value("context_window", c.context_window);
  c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
}

inline void to_json(nlohmann::json& j, const LoraConfig& c) {
  j = {{"rank", c.rank}, {"alpha", c.alpha}, {"targets", c.targets}};
}
inline void from_json(const nlohmann::json& j, LoraConfig& c) {
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
  c.targets = j.value("targets", c.targets);
}

inline void to_json(nlohmann::json& j, const ChatTemplate& c) {
  j = {{"version", c.version}, {"system", c.system}, {"user_prefix", c.user_prefix}, {"assistant_prefix", c.assistant_prefix}};
}
inline void from_json(const nlohmann::json& j, ChatTemplate& c) {
  c.version = j.value("version", c.version);
  c.system = j.value("system", c.system);
  c.user_prefix = j.value("user_prefix", c.user_prefix);
  c.assistant_prefix = j.value("assistant_prefix", c.assistant_prefix);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"frames", c.frames},
       {"segments", c.segments},
       {"image_encoder", c.image},
       {"video_encoder", c.video},
       {"image_adapter", c.image_adapter},
       {"video_adapter", c.video_adapter},
       {"lm", c.lm},
       {"lora", c.lora},
       {"fusion_order", to_string(c.order)},
       {"chat_template", c.chat},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.frames = j.value("frames", c.frames);
  c.segments = j.value("segments", c.segments);
  if (j.contains("image_encoder")) j.at("image_encoder").get_to(c.image);
  if (j.contains("video_encoder")) j.at("video_encoder").get_to(c.video);
  if (j.contains("image_adapter")) j.at("image_adapter").get_to(c.image_adapter);
  if (j.contains("video_adapter")) j.at("video_adapter").get_to(c.video_adapter);
  if (j.contains("lm")) j.at("lm").get_to(c.lm);
  if (j.contains("lora")) j.at("lora").get_to(c.lora);
  if (j.contains("fusion_order")) c.order = parse_fusion_order(j.at("fusion_order").get<std::string>());
  if (j.contains("chat_template")) j.at("chat_template").get_to(c.chat);
  c.seed = j.value("seed", c.seed);
}

// Frozen encoder outputs for one sampled clip.
template <class T>
struct VisualFeatures {
  Tensor<T> image;               // [T, G, G, D_g]
  std::vector<Tensor<T>> video;  // K x [n, G, G, D_h]
};

// The full dual-encoder video LM: frozen image and video encoders, one
// adapter per encoder, and a decoder LM that reads the fused sequence.
template <class T>
class VideoLM {
 public:
  explicit VideoLM(const ModelConfig& config) : config_(config) {
    config.validate();
    Rng rng(config.seed);
    image_encoder_ = ImageEncoder<T>(params_, config.image, rng);
    video_encoder_ = VideoEncoder<T>(params_, config.video, rng);
    image_adapter_ = Adapter<T>(params_, "image_adapter", group::image_adapter, config.image_adapter, rng);
    video_adapter_ = Adapter<T>(params_, "video_adapter", group::video_adapter, config.video_adapter, rng);
    lm_ = LanguageModel<T>(params_, config.lm, rng);
    lora_rng_ = Rng(config.seed ^ 0x9E3779B97F4A7C15ull);
  }

  VideoLM(const VideoLM&) = delete;
  VideoLM& operator=(const VideoLM&) = delete;

  const ModelConfig& config() const noexcept { return config_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }
  const LanguageModel<T>& lm() const noexcept { return lm_; }
  const ImageEncoder<T>& image_encoder() const noexcept { return image_encoder_; }
  const VideoEncoder<T>& video_encoder() const noexcept { return video_encoder_; }
  Adapter<T>& image_adapter() noexcept { return image_adapter_; }
  Adapter<T>& video_adapter() noexcept { return video_adapter_; }

  std::vector<std::string>& history() noexcept { return history_; }
  const std::vector<std::string>& history() const noexcept { return history_; }

  void ensure_lora() {
    if (!lm_.has_lora()) lm_.apply_lora(params_, config_.lora, lora_rng_);
  }
  bool has_lora() const noexcept { return lm_.has_lora(); }

  // Makes exactly the stage's groups trainable.
  void configure_stage(Stage stage) {
    if (stage == Stage::instruct) ensure_lora();
    params_.freeze_all();
    for (const auto& g : stage_trainable_groups(stage)) params_.set_trainable(g, true);
  }

  // Sample T frames in K segments from a source and run both encoders.
  VisualFeatures<T> encode_source(const FrameSource& source) const {
    const auto indices = sample_frames(source.meta(), config_.frames, config_.segments);
    return encode(source.read(indices));
  }

  // frames: the T sampled frames, segment-major.
  VisualFeatures<T> encode(const FrameArray& frames) const {
    require(frames.frames() == config_.frames, ErrorKind::invalid_argument,
            "expected " + std::to_string(config_.frames) + " sampled frames, got " + std::to_string(frames.frames()));
    NoGradGuard no_grad;
    VisualFeatures<T> out;
    out.image = image_encoder_.encode(downsample_for_video_encoder(frames, config_.image.input_size)).data;
    const FrameArray small = downsample_for_video_encoder(frames, config_.video.input_size);
    const auto plan = plan_segments(config_.frames, config_.segments);
    for (const auto& seg : plan.segments)
      out.video.push_back(video_encoder_.encode_segment(small.range(seg.front(), seg.size())).data);
    return out;
  }

  Var<T> image_tokens(const VisualFeatures<T>& f) const { return image_adapter_(Var<T>::constant(f.image)); }

  std::vector<Var<T>> video_tokens(const VisualFeatures<T>& f) const {
    std::vector<Var<T>> out;
    for (const auto& seg : f.video) out.push_back(video_adapter_(Var<T>::constant(seg)));
    return out;
  }

  // Visual prefix for a stage: one encoder while pretraining, both after.
  TokenSequence<T> assemble(const VisualFeatures<T>& f, Stage stage, const Var<T>& text) const {
    Var<T> system;
    if (!config_.chat.system.empty()) {
      const auto ids = ByteTokenizer::encode(config_.chat.system);
      system = lm_.embed(std::span<const int>(ids));
    }
    switch (stage) {
      case Stage::pretrain_image: return assemble_image_only(image_tokens(f), text, system);
      case Stage::pretrain_video: return assemble_video_only(video_tokens(f), text, system);
      case Stage::instruct: return assemble_tokens(image_tokens(f), video_tokens(f), text, config_.order, system);
    }
    fail(ErrorKind::invalid_argument, "unknown stage");
  }

  Var<T> loss(const VisualFeatures<T>& f, const TokenizedTurn& turn, Stage stage) const {
    const Var<T> text = lm_.embed(std::span<const int>(turn.input_ids));
    const TokenSequence<T> seq = assemble(f, stage, text);
    const Var<T> logits = lm_.forward(seq.flatten());
    const std::size_t n = turn.size();
    return nll_loss(ops::slice_rows(logits, logits.dim(0) - n, n), turn);
  }

  std::string answer(const VisualFeatures<T>& f, std::string_view question, Stage stage = Stage::instruct,
                     GenerateOptions opts = {}) const {
    const auto ids = ByteTokenizer::encode(config_.chat.prompt(question));
    NoGradGuard no_grad;
    const TokenSequence<T> seq = assemble(f, stage, lm_.embed(std::span<const int>(ids)));
    return ByteTokenizer::decode(generate(lm_, seq.flatten(), opts));
  }

  nlohmann::json sidecar() const {
    return {{"format", "duovid-checkpoint-v1"}, {"model", config_}, {"lora_applied", has_lora()}, {"history", history_}};
  }

  // Weights archive plus a JSON sidecar next to it (same stem, .json).
  void save(const std::filesystem::path& archive) const {
    std::map<std::string, Tensor<T>> tensors;
    for (const auto& p : params_.all()) tensors.emplace(p.name, p.var.value());
    io::write_archive(archive, tensors);
    auto side = archive;
    side.replace_extension(".json");
    io::atomic_write(side, sidecar().dump(2) + "\n");
  }

  // Copies weights by name; every model parameter must be present.
  void load_weights(const std::filesystem::path& archive) {
    const auto tensors = io::read_archive<T>(archive);
    for (auto& p : params_.all()) {
      auto it = tensors.find(p.name);
      require(it != tensors.end(), ErrorKind::io_error, archive.string() + " lacks parameter " + p.name);
      require(it->second.shape() == p.var.shape(), ErrorKind::shape_mismatch, "checkpoint shape differs for " + p.name);
      p.var.mutable_value() = it->second;
    }
  }

 private:
  ModelConfig config_;
  ParamSet<T> params_;
  ImageEncoder<T> image_encoder_;
  VideoEncoder<T> video_encoder_;
  Adapter<T> image_adapter_, video_adapter_;
  LanguageModel<T> lm_;
  Rng lora_rng_;
  std::vector<std::string> history_;
};

inline nlohmann::json read_sidecar(const std::filesystem::path& archive) {
  auto side = archive;
  side.replace_extension(".json");
  try {
    return nlohmann::json::parse(io::read_file(side));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, side.string() + ": " + e.what());
  }
}

// Rebuilds a model from a checkpoint written by VideoLM::save.
template <class T>
std::unique_ptr<VideoLM<T>> load_model(const std::filesystem::path& archive) {
  const nlohmann::json side = read_sidecar(archive);
  require(side.value("format", "") == "duovid-checkpoint-v1", ErrorKind::io_error, "unrecognized checkpoint sidecar");
  auto model = std::make_unique<VideoLM<T>>(side.at("model").get<ModelConfig>());
  if (side.value("lora_applied", false)) model->ensure_lora();
  model->load_weights(archive);
  model->history() = side.value("history", std::vector<std::string>{});
  return model;
}

}  // namespace duovid
