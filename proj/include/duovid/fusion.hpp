#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "duovid/autograd.hpp"
#include "json.hpp"

namespace duovid {

enum class BlockKind { system, image, video_segment, text };
enum class FusionOrder { sequential, interleaved };

inline std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::system: return "system";
    case BlockKind::image: return "image";
    case BlockKind::video_segment: return "video_segment";
    case BlockKind::text: return "text";
  }
  return "text";
}

inline std::string_view to_string(FusionOrder order) {
  return order == FusionOrder::sequential ? "sequential" : "interleaved";
}

inline FusionOrder parse_fusion_order(std::string_view text) {
  if (text == "sequential") return FusionOrder::sequential;
  if (text == "interleaved") return FusionOrder::interleaved;
  fail(ErrorKind::config_error, "unknown fusion order '" + std::string(text) + "'");
}

template <class T>
struct TokenBlock {
  BlockKind kind = BlockKind::text;
  std::optional<std::size_t> segment_index;
  Var<T> embeddings;  // [L, D]

  std::size_t length() const { return embeddings.dim(0); }
};

template <class T>
struct TokenSequence {
  std::vector<TokenBlock<T>> blocks;
  std::size_t total_len = 0;

  std::size_t width() const { return blocks.empty() ? 0 : blocks.front().embeddings.dim(1); }

  // Blocks concatenated into one [total_len, D] matrix.
  Var<T> flatten() const {
    std::vector<Var<T>> parts;
    for (const auto& b : blocks) parts.push_back(b.embeddings);
    return ops::concat_rows(parts);
  }

  void push(BlockKind kind, std::optional<std::size_t> segment, Var<T> embeddings) {
    if (embeddings.dim(0) == 0) return;
    require(blocks.empty() || embeddings.dim(1) == width(), ErrorKind::shape_mismatch,
            "token block width " + std::to_string(embeddings.dim(1)) + " differs from " + std::to_string(width()));
    total_len += embeddings.dim(0);
    blocks.push_back({kind, segment, std::move(embeddings)});
  }
};

namespace detail {

// [F,g,g,D] pooled grid -> [F*g*g, D] tokens.
template <class T>
Var<T> grid_tokens(const Var<T>& grid) {
  require(grid.shape().size() == 4, ErrorKind::shape_mismatch, "pooled tokens must be [F,g,g,D], got " + shape_str(grid.shape()));
  return ops::reshape(grid, {grid.size() / grid.dim(3), grid.dim(3)});
}

}  // namespace detail

// Image tokens, K video-segment blocks, then text. Interleaved order groups
// the image frames by owning segment: [img_1][vid_1]...[img_K][vid_K][text].
// An optional system block precedes all visual tokens.
template <class T>
TokenSequence<T> assemble_tokens(const Var<T>& image, const std::vector<Var<T>>& video, const Var<T>& text,
                                 FusionOrder order, const Var<T>& system = {}) {
  require(!video.empty(), ErrorKind::invalid_argument, "need at least one video segment");
  require(image.defined() && image.shape().size() == 4, ErrorKind::shape_mismatch, "image tokens must be [T,g,g,D]");
  const std::size_t D = image.dim(3);
  for (const auto& v : video)
    require(v.shape().size() == 4 && v.dim(3) == D, ErrorKind::shape_mismatch, "video segment width differs from image width");
  require(!text.defined() || text.dim(1) == D, ErrorKind::shape_mismatch, "text width differs from visual width");

  TokenSequence<T> seq;
  if (system.defined()) seq.push(BlockKind::system, std::nullopt, system);
  const std::size_t K = video.size();
  if (order == FusionOrder::sequential || K == 1) {
    seq.push(BlockKind::image, std::nullopt, detail::grid_tokens(image));
    for (std::size_t s = 0; s < K; ++s) seq.push(BlockKind::video_segment, s, detail::grid_tokens(video[s]));
  } else {
    const std::size_t frames = image.dim(0);
    require(frames % K == 0, ErrorKind::invalid_argument, "image frames do not split evenly across segments");
    const std::size_t per = frames / K;
    for (std::size_t s = 0; s < K; ++s) {
      seq.push(BlockKind::image, s, detail::grid_tokens(ops::slice_rows(image, s * per, per)));
      seq.push(BlockKind::video_segment, s, detail::grid_tokens(video[s]));
    }
  }
  if (text.defined()) seq.push(BlockKind::text, std::nullopt, text);
  return seq;
}

// Single-encoder layouts used while pretraining one adapter at a time.
template <class T>
TokenSequence<T> assemble_image_only(const Var<T>& image, const Var<T>& text, const Var<T>& system = {}) {
  TokenSequence<T> seq;
  if (system.defined()) seq.push(BlockKind::system, std::nullopt, system);
  seq.push(BlockKind::image, std::nullopt, detail::grid_tokens(image));
  if (text.defined()) seq.push(BlockKind::text, std::nullopt, text);
  return seq;
}

template <class T>
TokenSequence<T> assemble_video_only(const std::vector<Var<T>>& video, const Var<T>& text, const Var<T>& system = {}) {
  require(!video.empty(), ErrorKind::invalid_argument, "need at least one video segment");
  TokenSequence<T> seq;
  if (system.defined()) seq.push(BlockKind::system, std::nullopt, system);
  for (std::size_t s = 0; s < video.size(); ++s) seq.push(BlockKind::video_segment, s, detail::grid_tokens(video[s]));
  if (text.defined()) seq.push(BlockKind::text, std::nullopt, text);
  return seq;
}

struct BudgetReport {
  std::size_t frames = 0;
  std::size_t segments = 0;
  std::size_t image_grid = 0;
  std::size_t video_grid = 0;
  bool video_time_pooled = false;
  std::size_t image_tokens = 0;
  std::size_t video_tokens = 0;
  std::size_t visual_tokens = 0;
  std::size_t context_window = 0;
  std::size_t reserved_text = 0;
  std::size_t available = 0;
  bool fits = false;
};

inline void to_json(nlohmann::json& j, const BudgetReport& r) {
  j = nlohmann::json{{"frames", r.frames},
                     {"segments", r.segments},
                     {"image_grid", r.image_grid},
                     {"video_grid", r.video_grid},
                     {"video_time_pooled", r.video_time_pooled},
                     {"image_tokens", r.image_tokens},
                     {"video_tokens", r.video_tokens},
                     {"visual", r.visual_tokens},
                     {"context_window", r.context_window},
                     {"reserved_text", r.reserved_text},
                     {"available", r.available},
                     {"fits", r.fits}};
}

// Visual token count for T frames in K segments against the context budget.
// With time pooling each video segment collapses to a single frame.
inline BudgetReport token_budget(std::size_t frames, std::size_t segments, std::size_t image_grid, std::size_t video_grid,
                                 std::size_t context_window, std::size_t reserved_text, bool video_time_pooled = false) {
  require(frames >= 1 && segments >= 1 && image_grid >= 1 && video_grid >= 1 && context_window >= 1 && reserved_text >= 1,
          ErrorKind::invalid_argument, "budget counts must be >= 1");
  BudgetReport r;
  r.frames = frames;
  r.segments = segments;
  r.image_grid = image_grid;
  r.video_grid = video_grid;
  r.video_time_pooled = video_time_pooled;
  r.image_tokens = frames * image_grid * image_grid;
  r.video_tokens = (video_time_pooled ? segments : frames) * video_grid * video_grid;
  r.visual_tokens = r.image_tokens + r.video_tokens;
  r.context_window = context_window;
  r.reserved_text = reserved_text;
  r.available = context_window > reserved_text ? context_window - reserved_text : 0;
  r.fits = r.visual_tokens <= r.available;
  return r;
}

}  // namespace duovid
