#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "duovid/autograd.hpp"
#include "duovid/media.hpp"
#include "duovid/nn.hpp"

namespace duovid {

struct ImageEncoderSpec {
  std::size_t input_size = 28;
  std::size_t patch_size = 14;
  std::size_t feature_dim = 64;
  std::size_t num_blocks = 3;
  std::size_t num_heads = 4;
  std::size_t channels = 3;

  std::size_t grid() const { return input_size / patch_size; }

  void validate() const {
    require(patch_size >= 1 && input_size % patch_size == 0, ErrorKind::config_error,
            "image encoder patch size must divide input size");
    require(num_blocks >= 2, ErrorKind::config_error, "image encoder needs >= 2 blocks for a penultimate tap");
    require(feature_dim % num_heads == 0, ErrorKind::config_error, "image encoder width not divisible by heads");
  }
};

struct VideoEncoderSpec {
  std::size_t input_size = 28;
  std::size_t patch_size = 14;
  std::size_t feature_dim = 64;
  std::size_t frames_per_segment = 4;
  std::size_t num_blocks = 3;
  std::size_t num_heads = 4;
  std::size_t channels = 3;

  std::size_t grid() const { return input_size / patch_size; }

  void validate() const {
    require(patch_size >= 1 && input_size % patch_size == 0, ErrorKind::config_error,
            "video encoder patch size must divide input size");
    require(num_blocks >= 2, ErrorKind::config_error, "video encoder needs >= 2 blocks for a penultimate tap");
    require(frames_per_segment >= 1, ErrorKind::config_error, "video encoder needs >= 1 frame per segment");
    require(feature_dim % num_heads == 0, ErrorKind::config_error, "video encoder width not divisible by heads");
  }
};

// Encoder output [frames, G, G, D] and the block it was read from.
template <class T>
struct FeatureGrid {
  Tensor<T> data;
  std::string tap;

  std::size_t frames() const { return data.dim(0); }
  std::size_t grid() const { return data.dim(1); }
  std::size_t dim() const { return data.dim(3); }
};

namespace detail {

// [H, W, C] frame -> [G*G, p*p*C] patch rows, row-major over the patch grid.
template <class T>
Tensor<T> patchify(const Tensor<float>& frames, std::size_t frame, std::size_t patch) {
  const std::size_t H = frames.dim(1), W = frames.dim(2), C = frames.dim(3);
  const std::size_t gh = H / patch, gw = W / patch, row = patch * patch * C;
  Tensor<T> out({gh * gw, row});
  const float* src = frames.data().data() + frame * H * W * C;
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* dst = out.data().data() + (gy * gw + gx) * row;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (std::size_t c = 0; c < C; ++c)
            *dst++ = static_cast<T>(src[((gy * patch + py) * W + gx * patch + px) * C + c]);
    }
  return out;
}

template <class T>
std::vector<TransformerBlock<T>> make_blocks(ParamSet<T>& params, const std::string& prefix, const std::string& grp,
                                             std::size_t count, std::size_t dim, std::size_t heads, Rng& rng) {
  std::vector<TransformerBlock<T>> blocks;
  for (std::size_t b = 0; b < count; ++b)
    blocks.emplace_back(params, prefix + ".blocks." + std::to_string(b), grp, dim, heads, 2 * dim, false, rng);
  return blocks;
}

inline void check_frames(const FrameArray& frames, std::size_t size, std::size_t channels, const char* who) {
  require(frames.height() == size && frames.width() == size, ErrorKind::shape_mismatch,
          std::string(who) + " expects " + std::to_string(size) + "x" + std::to_string(size) + " frames, got " +
              std::to_string(frames.height()) + "x" + std::to_string(frames.width()));
  require(frames.channels() == channels, ErrorKind::shape_mismatch, std::string(who) + " channel count mismatch");
}

}  // namespace detail

// Per-frame ViT. Frames never attend to each other.
template <class T>
class ImageEncoder {
 public:
  ImageEncoder() = default;

  ImageEncoder(ParamSet<T>& params, const ImageEncoderSpec& spec, Rng& rng) : spec_(spec) {
    spec.validate();
    const std::size_t G = spec.grid(), D = spec.feature_dim;
    const std::string grp = group::image_encoder;
    patch_embed_ = Linear<T>(params, "image_encoder.patch_embed", grp, spec.patch_size * spec.patch_size * spec.channels, D, rng);
    pos_embed_ = params.add("image_encoder.pos_embed", grp, random_normal<T>({G * G, D}, T(0.02), rng));
    blocks_ = detail::make_blocks(params, "image_encoder", grp, spec.num_blocks, D, spec.num_heads, rng);
    params.set_trainable(grp, false);
  }

  const ImageEncoderSpec& spec() const noexcept { return spec_; }

  // Stream after the second-to-last block.
  FeatureGrid<T> encode(const FrameArray& frames) const {
    return {run_blocks(frames, spec_.num_blocks - 1), "block " + std::to_string(spec_.num_blocks - 1) + " of " +
                                                          std::to_string(spec_.num_blocks)};
  }

  Tensor<T> run_blocks(const FrameArray& frames, std::size_t count) const {
    detail::check_frames(frames, spec_.input_size, spec_.channels, "image encoder");
    require(count <= blocks_.size(), ErrorKind::invalid_argument, "block count beyond encoder depth");
    const std::size_t G = spec_.grid(), D = spec_.feature_dim;
    Tensor<T> out({frames.frames(), G, G, D});
    for (std::size_t f = 0; f < frames.frames(); ++f) {
      Var<T> x = Var<T>::constant(detail::patchify<T>(frames.tensor(), f, spec_.patch_size));
      x = ops::add(patch_embed_(x), pos_embed_);
      for (std::size_t b = 0; b < count; ++b) x = blocks_[b](x);
      std::copy(x.value().data().begin(), x.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(f * G * G * D));
    }
    return out;
  }

 private:
  ImageEncoderSpec spec_;
  Linear<T> patch_embed_;
  Var<T> pos_embed_;
  std::vector<TransformerBlock<T>> blocks_;
};

// Segment ViT with joint space-time attention over all n * G * G tokens.
template <class T>
class VideoEncoder {
 public:
  VideoEncoder() = default;

  VideoEncoder(ParamSet<T>& params, const VideoEncoderSpec& spec, Rng& rng) : spec_(spec) {
    spec.validate();
    const std::size_t G = spec.grid(), D = spec.feature_dim;
    const std::string grp = group::video_encoder;
    patch_embed_ = Linear<T>(params, "video_encoder.patch_embed", grp, spec.patch_size * spec.patch_size * spec.channels, D, rng);
    pos_embed_ = params.add("video_encoder.pos_embed", grp, random_normal<T>({G * G, D}, T(0.02), rng));
    time_embed_ = params.add("video_encoder.time_embed", grp, random_normal<T>({spec.frames_per_segment, D}, T(0.02), rng));
    blocks_ = detail::make_blocks(params, "video_encoder", grp, spec.num_blocks, D, spec.num_heads, rng);
    params.set_trainable(grp, false);
  }

  const VideoEncoderSpec& spec() const noexcept { return spec_; }

  FeatureGrid<T> encode_segment(const FrameArray& segment) const {
    return {run_blocks(segment, spec_.num_blocks - 1), "block " + std::to_string(spec_.num_blocks - 1) + " of " +
                                                           std::to_string(spec_.num_blocks)};
  }

  Tensor<T> run_blocks(const FrameArray& segment, std::size_t count) const {
    require(segment.frames() == spec_.frames_per_segment, ErrorKind::segment_length_mismatch,
            "video encoder expects " + std::to_string(spec_.frames_per_segment) + " frames per segment, got " +
                std::to_string(segment.frames()));
    detail::check_frames(segment, spec_.input_size, spec_.channels, "video encoder");
    require(count <= blocks_.size(), ErrorKind::invalid_argument, "block count beyond encoder depth");
    const std::size_t n = segment.frames(), G = spec_.grid(), D = spec_.feature_dim;
    std::vector<Var<T>> per_frame;
    for (std::size_t f = 0; f < n; ++f) {
      Var<T> x = Var<T>::constant(detail::patchify<T>(segment.tensor(), f, spec_.patch_size));
      x = ops::add_row(ops::add(patch_embed_(x), pos_embed_), ops::reshape(ops::slice_rows(time_embed_, f, 1), {D}));
      per_frame.push_back(x);
    }
    Var<T> x = ops::concat_rows(per_frame);
    for (std::size_t b = 0; b < count; ++b) x = blocks_[b](x);
    return x.value().reshaped({n, G, G, D});
  }

 private:
  VideoEncoderSpec spec_;
  Linear<T> patch_embed_;
  Var<T> pos_embed_, time_embed_;
  std::vector<TransformerBlock<T>> blocks_;
};

// Bilinear resize to target x target with half-pixel centers.
inline FrameArray downsample_for_video_encoder(const FrameArray& frames, std::size_t target) {
  require(target >= 1, ErrorKind::invalid_argument, "target size must be >= 1");
  require(target <= frames.height() && target <= frames.width(), ErrorKind::invalid_argument,
          "downsample target " + std::to_string(target) + " exceeds source size");
  const std::size_t T = frames.frames(), H = frames.height(), W = frames.width(), C = frames.channels();
  if (target == H && target == W) return frames;
  Tensor<float> out({T, target, target, C});
  const double sy = static_cast<double>(H) / static_cast<double>(target);
  const double sx = static_cast<double>(W) / static_cast<double>(target);
  auto axis = [](std::size_t i, double s, std::size_t limit) {
    double src = (static_cast<double>(i) + 0.5) * s - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(limit - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, limit - 1);
    return std::tuple{lo, hi, src - static_cast<double>(lo)};
  };
  const float* in = frames.tensor().data().data();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t y = 0; y < target; ++y) {
      auto [y0, y1, wy] = axis(y, sy, H);
      for (std::size_t x = 0; x < target; ++x) {
        auto [x0, x1, wx] = axis(x, sx, W);
        for (std::size_t c = 0; c < C; ++c) {
          auto px = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(in[((t * H + yy) * W + xx) * C + c]); };
          const double top = px(y0, x0) * (1 - wx) + px(y0, x1) * wx;
          const double bottom = px(y1, x0) * (1 - wx) + px(y1, x1) * wx;
          out.at({t, y, x, c}) = static_cast<float>(std::clamp(top * (1 - wy) + bottom * wy, 0.0, 1.0));
        }
      }
    }
  return FrameArray(std::move(out));
}

}  // namespace duovid
