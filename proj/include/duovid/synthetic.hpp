#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "duovid/io.hpp"
#include "duovid/media.hpp"
#include "json.hpp"

namespace duovid {

// A square sliding over a flat background. Each scene flips the background
// between a dark and a bright shade, which gives a full-contrast cut.
struct SyntheticClipSpec {
  std::size_t frames = 32;
  std::size_t size = 28;
  std::size_t square = 8;
  std::array<float, 3> color{1.0f, 0.0f, 0.0f};
  int dx = 1;
  int dy = 0;
  std::size_t scenes = 1;
};

inline Tensor<float> synthesize_clip(const SyntheticClipSpec& spec) {
  require(spec.frames >= 1 && spec.size >= spec.square && spec.scenes >= 1 && spec.scenes <= spec.frames,
          ErrorKind::invalid_argument, "bad synthetic clip spec");
  const std::size_t S = spec.size, travel = S - spec.square;
  Tensor<float> out({spec.frames, S, S, 3});
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const std::size_t scene = t * spec.scenes / spec.frames;
    const float bg = scene % 2 ? 0.9f : 0.1f;
    auto wrap = [&](int step) {
      const long span = static_cast<long>(travel) + 1;
      long p = (static_cast<long>(t) * step) % span;
      return static_cast<std::size_t>(p < 0 ? p + span : p);
    };
    const std::size_t x0 = wrap(spec.dx), y0 = wrap(spec.dy);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const bool inside = x >= x0 && x < x0 + spec.square && y >= y0 && y < y0 + spec.square;
        for (std::size_t c = 0; c < 3; ++c) out.at({t, y, x, c}) = inside ? spec.color[c] : bg;
      }
  }
  return out;
}

struct FixtureClip {
  std::string id;
  SyntheticClipSpec spec;
  std::string caption;
};

// Eight clips that differ in colour and motion, each paired with a short
// answer to the same question.
inline std::vector<FixtureClip> overfit_clips() {
  const std::array<std::pair<const char*, std::array<float, 3>>, 4> colors{
      {{"red", {1, 0, 0}}, {"green", {0, 1, 0}}, {"blue", {0, 0, 1}}, {"yellow", {1, 1, 0}}}};
  std::vector<FixtureClip> clips;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& [name, rgb] = colors[i % 4];
    const bool horizontal = i < 4;
    SyntheticClipSpec spec;
    spec.frames = 16;
    spec.color = rgb;
    spec.dx = horizontal ? 2 : 0;
    spec.dy = horizontal ? 0 : 2;
    clips.push_back({"clip" + std::to_string(i), spec,
                     std::string(name) + (horizontal ? " square slides right" : " square falls down")});
  }
  return clips;
}

inline constexpr const char* overfit_question = "What happens in the video?";

// Writes <dir>/videos/<id>.dvt and <dir>/train.jsonl.
inline void write_overfit_fixture(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "videos");
  std::string lines;
  for (const auto& clip : overfit_clips()) {
    io::write_raw_tensor(dir / "videos" / (clip.id + ".dvt"), synthesize_clip(clip.spec));
    lines += nlohmann::json{{"video_id", clip.id}, {"question", overfit_question}, {"answer", clip.caption},
                            {"category", "dense_caption"}}
                 .dump() +
             "\n";
  }
  io::atomic_write(dir / "train.jsonl", lines);
}

// Five clips with one to five scenes and a ground-truth caption each.
inline std::vector<FixtureClip> annotate_clips() {
  const std::array<std::pair<const char*, std::array<float, 3>>, 5> colors{
      {{"red", {1, 0, 0}}, {"green", {0, 1, 0}}, {"blue", {0, 0, 1}}, {"white", {1, 1, 1}}, {"purple", {0.6f, 0, 0.8f}}}};
  std::vector<FixtureClip> clips;
  for (std::size_t i = 0; i < 5; ++i) {
    SyntheticClipSpec spec;
    spec.frames = 30;
    spec.color = colors[i].second;
    spec.dx = static_cast<int>(i % 3) - 1;
    spec.dy = i % 2 ? 1 : 0;
    spec.scenes = i + 1;
    clips.push_back({"video" + std::to_string(i), spec,
                     std::string("A ") + colors[i].first + " square moves across " + std::to_string(i + 1) +
                         (i ? " scenes." : " scene.")});
  }
  return clips;
}

// Writes <dir>/videos/<id>.dvt and <dir>/captions.jsonl.
inline void write_annotate_fixture(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "videos");
  std::string lines;
  for (const auto& clip : annotate_clips()) {
    io::write_raw_tensor(dir / "videos" / (clip.id + ".dvt"), synthesize_clip(clip.spec));
    lines += nlohmann::json{{"video_id", clip.id}, {"caption", clip.caption}}.dump() + "\n";
  }
  io::atomic_write(dir / "captions.jsonl", lines);
}

// An MVBench-style answer key and predictions whose per-task accuracy
// matches `accuracy` (percent) to within 0.05. Each task gets the smallest
// question count that allows it; answers cycle through A-D and wrong
// predictions pick the next letter.
inline void write_mvbench_fixture(const std::filesystem::path& dir,
                                  const std::vector<std::pair<std::string, double>>& accuracy) {
  std::filesystem::create_directories(dir);
  std::string key, preds;
  for (const auto& [task, pct] : accuracy) {
    std::size_t n = 1, right = 0;
    for (; n <= 1000; ++n) {
      right = static_cast<std::size_t>(std::llround(pct * static_cast<double>(n) / 100.0));
      if (std::abs(100.0 * static_cast<double>(right) / static_cast<double>(n) - pct) < 0.05) break;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::string id = task + "_" + std::to_string(i);
      const char answer = static_cast<char>('A' + i % 4);
      const char guess = i < right ? answer : static_cast<char>('A' + (i + 1) % 4);
      key += nlohmann::json{{"id", id}, {"task", task}, {"answer", std::string(1, answer)}}.dump() + "\n";
      preds += nlohmann::json{{"id", id}, {"dataset", "mvbench"}, {"question", "Which option is correct?"},
                              {"prediction", "(" + std::string(1, guess) + ") option"}}
                   .dump() +
               "\n";
    }
  }
  io::atomic_write(dir / "answers.jsonl", key);
  io::atomic_write(dir / "predictions.jsonl", preds);
}

}  // namespace duovid
