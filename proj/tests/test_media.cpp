#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "duovid/media.hpp"

using namespace duovid;

namespace {

// Largest x with x <= start + j * len / n where start = s*total/K and
// len = total/K, found by scanning instead of by closed form.
std::size_t spacing_oracle(std::size_t total, std::size_t k, std::size_t n, std::size_t s, std::size_t j) {
  std::size_t x = 0;
  while ((x + 1) * k * n <= s * total * n + j * total) ++x;
  return x;
}

FrameArray flat_frames(const std::vector<float>& levels, std::size_t h = 4, std::size_t w = 4) {
  Tensor<float> t({levels.size(), h, w, 1});
  for (std::size_t f = 0; f < levels.size(); ++f)
    for (std::size_t i = 0; i < h * w; ++i) t[f * h * w + i] = levels[f];
  return FrameArray(std::move(t));
}

VideoClipMeta clip(std::size_t total) { return {"clip", total, 25.0, ""}; }

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::invalid_argument;
}

}  // namespace

TEST_CASE("plan_segments examples") {
  auto p = plan_segments(16, 4);
  CHECK(p.n == 4);
  CHECK(p.segments == std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}, {4, 5, 6, 7}, {8, 9, 10, 11}, {12, 13, 14, 15}});
  auto eight = plan_segments(8, 4);
  CHECK(eight.n == 2);
  CHECK(eight.segments.size() == 4);
  auto five = plan_segments(5, 5);
  for (std::size_t s = 0; s < 5; ++s) CHECK(five.segments[s] == std::vector<std::size_t>{s});
}

TEST_CASE("plan_segments rejects K of zero or above T") {
  CHECK(kind_of([] { plan_segments(4, 0); }) == ErrorKind::invalid_argument);
  CHECK(kind_of([] { plan_segments(4, 5); }) == ErrorKind::invalid_argument);
}

TEST_CASE("plan_segments truncates a non-divisible frame count") {
  auto p = plan_segments(10, 4);
  CHECK(p.n == 2);
  CHECK(p.segments.back() == std::vector<std::size_t>{6, 7});
}

TEST_CASE("plan_segments partitions randomized inputs") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
    const auto p = plan_segments(k * n, k);
    REQUIRE(p.segments.size() == k);
    std::size_t expected = 0;
    for (const auto& seg : p.segments) {
      REQUIRE(seg.size() == n);
      for (std::size_t idx : seg) REQUIRE(idx == expected++);
    }
    REQUIRE(expected == k * n);
  }
}

TEST_CASE("sample_frames examples") {
  auto a = sample_frames(clip(32), 16, 4);
  CHECK(std::vector<std::size_t>(a.begin(), a.begin() + 4) == std::vector<std::size_t>{0, 2, 4, 6});
  std::vector<std::size_t> identity(16);
  std::iota(identity.begin(), identity.end(), 0);
  CHECK(sample_frames(clip(16), 16, 4) == identity);
  CHECK(sample_frames(clip(100), 4, 2) == std::vector<std::size_t>{0, 25, 50, 75});
}

TEST_CASE("sample_frames needs enough source frames") {
  CHECK(kind_of([] { sample_frames(clip(7), 8, 4); }) == ErrorKind::insufficient_frames);
}

TEST_CASE("sample_frames agrees with the brute-force spacing oracle") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t total = k * n + std::uniform_int_distribution<std::size_t>(0, 300)(rng);
    const auto got = sample_frames(clip(total), k * n, k);
    REQUIRE(got.size() == k * n);
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t lo = s * total / k, hi = (s + 1) * total / k;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = got[s * n + j];
        REQUIRE(idx == spacing_oracle(total, k, n, s, j));
        REQUIRE(idx >= lo);
        REQUIRE(idx < hi);
      }
    }
    for (std::size_t i = 1; i < got.size(); ++i) REQUIRE(got[i] > got[i - 1]);
  }
}

TEST_CASE("detect_scenes examples") {
  auto constant = detect_scenes(flat_frames({0.4f, 0.4f, 0.4f}), 0.01);
  CHECK(constant.boundaries == std::vector<std::size_t>{0});
  CHECK(constant.keyframes == std::vector<std::size_t>{1});
  CHECK(detect_scenes(flat_frames({0.4f}), 0.01).keyframes == std::vector<std::size_t>{0});
  CHECK(detect_scenes(flat_frames({0, 0, 1, 1}), 0.5).boundaries == std::vector<std::size_t>{0, 2});
  CHECK(detect_scenes(flat_frames({0.7f})).boundaries == std::vector<std::size_t>{0});
  CHECK(kind_of([] { detect_scenes(flat_frames({0, 1}), 0.0); }) == ErrorKind::invalid_argument);
}

TEST_CASE("select_keyframes takes the median index of each span") {
  SceneList two{8, {0, 4}, {}};
  CHECK(select_keyframes(two) == std::vector<std::size_t>{2, 6});
  SceneList one{1, {0}, {}};
  CHECK(select_keyframes(one) == std::vector<std::size_t>{0});
  SceneList uneven{4, {0, 3}, {}};
  CHECK(select_keyframes(uneven) == std::vector<std::size_t>{1, 3});
}

TEST_CASE("a full-contrast junction produces a boundary") {
  auto scenes = detect_scenes(flat_frames({0.1f, 0.1f, 0.1f, 1.0f, 1.0f}));
  CHECK(scenes.boundaries.front() == 0);
  CHECK(std::find(scenes.boundaries.begin(), scenes.boundaries.end(), 3) != scenes.boundaries.end());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    auto [b, e] = scenes.span(i);
    CHECK(scenes.keyframes[i] >= b);
    CHECK(scenes.keyframes[i] < e);
  }
}

TEST_CASE("more alternations yield at least as many scenes") {
  for (std::size_t m = 1; m <= 12; ++m) {
    std::vector<float> levels;
    for (std::size_t i = 0; i <= m; ++i) levels.insert(levels.end(), 3, i % 2 ? 1.0f : 0.0f);
    CHECK(detect_scenes(flat_frames(levels)).size() >= m);
  }
}

TEST_CASE("FrameArray validates its contents") {
  CHECK(kind_of([] { FrameArray(Tensor<float>({1, 2, 2, 2})); }) == ErrorKind::shape_mismatch);
  CHECK(kind_of([] { flat_frames({1.5f}); }) == ErrorKind::invalid_argument);
}

TEST_CASE("frame sources read raw tensors and image directories") {
  const auto dir = std::filesystem::temp_directory_path() / "duovid_media_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "frames");
  auto frames = flat_frames({0.0f, 0.2f, 0.6f, 1.0f});
  io::write_raw_tensor(dir / "clip.dvt", frames.tensor());
  for (std::size_t i = 0; i < 4; ++i)
    io::write_pnm(dir / "frames" / (std::to_string(i + 1) + ".pgm"), slice_front(frames.tensor(), i, 1).reshaped({4, 4, 1}));

  auto raw = open_frame_source(dir / "clip.dvt");
  CHECK(raw->meta().total_frames == 4);
  CHECK(raw->read_all().tensor() == frames.tensor());

  auto images = open_frame_source(dir / "frames", "frames");
  CHECK(images->meta().total_frames == 4);
  std::vector<std::size_t> pick{1, 3};
  auto got = images->read(pick);
  CHECK(max_abs_diff(got.tensor(), frames.select(pick).tensor()) < 1.0 / 255 + 1e-6);
  std::filesystem::remove_all(dir);
}
