#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <regex>
#include <string>
#include <utility>
#include <vector>

#include "duovid/error.hpp"
#include "duovid/io.hpp"
#include "duovid/tensor.hpp"

namespace duovid {

struct VideoClipMeta {
  std::string id;
  std::size_t total_frames = 0;
  double fps = 1.0;
  std::string source_path;

  void validate() const {
    require(total_frames >= 1, ErrorKind::invalid_argument, "clip " + id + " has no frames");
    require(fps > 0.0, ErrorKind::invalid_argument, "clip " + id + " has non-positive fps");
  }
};

// Frames as [T, H, W, C] floats in [0, 1].
class FrameArray {
 public:
  FrameArray() = default;

  explicit FrameArray(Tensor<float> data) : data_(std::move(data)) {
    require(data_.rank() == 4, ErrorKind::shape_mismatch, "frames must be [T,H,W,C], got " + shape_str(data_.shape()));
    require(data_.dim(0) >= 1, ErrorKind::invalid_argument, "frame array is empty");
    require(data_.dim(3) == 1 || data_.dim(3) == 3, ErrorKind::shape_mismatch, "channel count must be 1 or 3");
    for (float v : data_.data())
      require(v >= 0.0f && v <= 1.0f, ErrorKind::invalid_argument, "frame values must lie in [0,1]");
  }

  std::size_t frames() const { return data_.dim(0); }
  std::size_t height() const { return data_.dim(1); }
  std::size_t width() const { return data_.dim(2); }
  std::size_t channels() const { return data_.dim(3); }
  const Tensor<float>& tensor() const noexcept { return data_; }

  FrameArray select(std::span<const std::size_t> indices) const { return FrameArray(gather_front(data_, indices)); }
  FrameArray range(std::size_t begin, std::size_t count) const { return FrameArray(slice_front(data_, begin, count)); }
  Tensor<float> frame(std::size_t t) const {
    return slice_front(data_, t, 1).reshaped({height(), width(), channels()});
  }

 private:
  Tensor<float> data_;
};

struct SegmentPlan {
  std::size_t k = 0;
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> segments;
};

// K contiguous equal segments over {0..T'-1}, T' = K * floor(T / K).
inline SegmentPlan plan_segments(std::size_t total, std::size_t k) {
  require(k >= 1, ErrorKind::invalid_argument, "segment count must be >= 1");
  require(k <= total, ErrorKind::invalid_argument,
          "segment count " + std::to_string(k) + " exceeds frame count " + std::to_string(total));
  SegmentPlan plan;
  plan.k = k;
  plan.n = total / k;
  plan.segments.resize(k);
  for (std::size_t s = 0; s < k; ++s)
    for (std::size_t j = 0; j < plan.n; ++j) plan.segments[s].push_back(s * plan.n + j);
  return plan;
}

// Source-frame indices for segment-wise sampling. Segment s takes n indices
// spaced uniformly over the s-th of K equal spans of the source, i.e. index
// floor(start_s + j * span / n), computed exactly in integers.
inline std::vector<std::size_t> sample_frames(const VideoClipMeta& meta, std::size_t frames, std::size_t k) {
  meta.validate();
  const SegmentPlan plan = plan_segments(frames, k);
  require(meta.total_frames >= frames, ErrorKind::insufficient_frames,
          meta.id + " has " + std::to_string(meta.total_frames) + " frames, need " + std::to_string(frames));
  const std::size_t used = plan.k * plan.n;
  std::vector<std::size_t> out;
  out.reserve(used);
  for (std::size_t s = 0; s < plan.k; ++s)
    for (std::size_t j = 0; j < plan.n; ++j) out.push_back((s * plan.n + j) * meta.total_frames / used);
  return out;
}

struct SceneList {
  std::size_t num_frames = 0;
  std::vector<std::size_t> boundaries;
  std::vector<std::size_t> keyframes;

  std::size_t size() const noexcept { return boundaries.size(); }
  std::pair<std::size_t, std::size_t> span(std::size_t scene) const {
    const std::size_t end = scene + 1 < boundaries.size() ? boundaries[scene + 1] : num_frames;
    return {boundaries[scene], end};
  }
};

inline constexpr double default_scene_threshold = 0.3;

// Median index of each scene's [begin, end) span.
inline std::vector<std::size_t> select_keyframes(const SceneList& scenes) {
  std::vector<std::size_t> out;
  out.reserve(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    auto [begin, end] = scenes.span(s);
    out.push_back(begin + (end - begin) / 2);
  }
  return out;
}

inline double mean_abs_frame_diff(const FrameArray& frames, std::size_t a, std::size_t b) {
  const std::size_t stride = frames.height() * frames.width() * frames.channels();
  const float* pa = frames.tensor().data().data() + a * stride;
  const float* pb = frames.tensor().data().data() + b * stride;
  double acc = 0.0;
  for (std::size_t i = 0; i < stride; ++i) acc += std::abs(static_cast<double>(pa[i]) - pb[i]);
  return acc / static_cast<double>(stride);
}

// A new scene starts at t whenever the mean absolute pixel difference to
// frame t-1 exceeds the threshold.
inline SceneList detect_scenes(const FrameArray& frames, double threshold = default_scene_threshold) {
  require(threshold > 0.0, ErrorKind::invalid_argument, "scene threshold must be positive");
  SceneList scenes;
  scenes.num_frames = frames.frames();
  scenes.boundaries.push_back(0);
  for (std::size_t t = 1; t < frames.frames(); ++t)
    if (mean_abs_frame_diff(frames, t, t - 1) > threshold) scenes.boundaries.push_back(t);
  scenes.keyframes = select_keyframes(scenes);
  return scenes;
}

// Where frames come from. Codec decoding is deliberately absent; sources are
// raw tensor files or directories of numbered PGM/PPM images.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual VideoClipMeta meta() const = 0;
  virtual FrameArray read(std::span<const std::size_t> indices) const = 0;

  FrameArray read_all() const {
    std::vector<std::size_t> all(meta().total_frames);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return read(all);
  }
};

class RawTensorSource final : public FrameSource {
 public:
  explicit RawTensorSource(const std::filesystem::path& path, std::string id = {}, double fps = 25.0)
      : frames_(io::read_raw_tensor(path)), fps_(fps), path_(path.string()),
        id_(id.empty() ? path.stem().string() : std::move(id)) {}

  VideoClipMeta meta() const override { return {id_, frames_.frames(), fps_, path_}; }
  FrameArray read(std::span<const std::size_t> indices) const override { return frames_.select(indices); }

 private:
  FrameArray frames_;
  double fps_;
  std::string path_;
  std::string id_;
};

class ImageDirSource final : public FrameSource {
 public:
  explicit ImageDirSource(const std::filesystem::path& dir, std::string id = {}, double fps = 25.0)
      : fps_(fps), path_(dir.string()), id_(id.empty() ? dir.filename().string() : std::move(id)) {
    require(std::filesystem::is_directory(dir), ErrorKind::io_error, dir.string() + " is not a directory");
    static const std::regex numbered(R"((\d+)\.(pgm|ppm))");
    std::vector<std::pair<long, std::filesystem::path>> found;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      std::smatch m;
      const std::string name = entry.path().filename().string();
      if (std::regex_search(name, m, numbered)) found.emplace_back(std::stol(m[1].str()), entry.path());
    }
    require(!found.empty(), ErrorKind::io_error, dir.string() + " holds no numbered .pgm/.ppm frames");
    std::sort(found.begin(), found.end());
    for (auto& f : found) files_.push_back(std::move(f.second));
  }

  VideoClipMeta meta() const override { return {id_, files_.size(), fps_, path_}; }

  FrameArray read(std::span<const std::size_t> indices) const override {
    std::vector<float> data;
    Shape frame_shape;
    for (std::size_t i : indices) {
      require(i < files_.size(), ErrorKind::invalid_argument, "frame index out of range");
      Tensor<float> img = io::read_pnm(files_[i]);
      if (frame_shape.empty()) frame_shape = img.shape();
      require(img.shape() == frame_shape, ErrorKind::shape_mismatch, files_[i].string() + " differs in size");
      data.insert(data.end(), img.data().begin(), img.data().end());
    }
    Shape shape{indices.size()};
    shape.insert(shape.end(), frame_shape.begin(), frame_shape.end());
    return FrameArray(Tensor<float>(std::move(shape), std::move(data)));
  }

 private:
  double fps_;
  std::string path_;
  std::string id_;
  std::vector<std::filesystem::path> files_;
};

// A raw tensor file when the path is a regular file, otherwise an image directory.
inline std::unique_ptr<FrameSource> open_frame_source(const std::filesystem::path& path, std::string id = {}) {
  if (std::filesystem::is_directory(path)) return std::make_unique<ImageDirSource>(path, std::move(id));
  return std::make_unique<RawTensorSource>(path, std::move(id));
}

}  // namespace duovid
