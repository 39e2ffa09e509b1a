#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "duovid/encoders.hpp"

using namespace duovid;

namespace {

FrameArray noise_frames(std::size_t t, std::size_t size, std::uint64_t seed, std::size_t channels = 3) {
  Rng rng(seed);
  return FrameArray(random_uniform<float>({t, size, size, channels}, 0.0f, 1.0f, rng));
}

FrameArray with_frame_replaced(const FrameArray& frames, std::size_t index, std::uint64_t seed) {
  Tensor<float> data = frames.tensor();
  const std::size_t stride = data.size() / data.dim(0);
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < stride; ++i) data[index * stride + i] = u(rng);
  return FrameArray(std::move(data));
}

template <class T>
Tensor<T> frame_slice(const Tensor<T>& grid, std::size_t f) {
  return slice_front(grid, f, 1);
}

}  // namespace

TEST_CASE("image encoder geometry") {
  ParamSet<float> params;
  Rng rng(1);
  ImageEncoder<float> toy(params, {}, rng);
  auto out = toy.encode(noise_frames(1, 28, 2));
  CHECK(out.data.shape() == Shape{1, 2, 2, 64});
  CHECK(all_finite(out.data));

  ParamSet<float> big_params;
  ImageEncoderSpec spec{336, 14, 16, 2, 2, 3};
  ImageEncoder<float> big(big_params, spec, rng);
  CHECK(big.encode(noise_frames(16, 336, 3)).data.shape() == Shape{16, 24, 24, 16});
}

TEST_CASE("image encoder rejects frames of the wrong size") {
  ParamSet<float> params;
  Rng rng(1);
  ImageEncoder<float> enc(params, {}, rng);
  try {
    enc.encode(noise_frames(1, 42, 2));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::shape_mismatch);
  }
}

TEST_CASE("image encoder treats frames independently") {
  ParamSet<float> params;
  Rng rng(4);
  ImageEncoder<float> enc(params, {}, rng);
  Tensor<float> one = noise_frames(1, 28, 5).tensor();
  Tensor<float> two({2, 28, 28, 3});
  std::copy(one.data().begin(), one.data().end(), two.data().begin());
  std::copy(one.data().begin(), one.data().end(), two.data().begin() + static_cast<std::ptrdiff_t>(one.size()));
  auto out = enc.encode(FrameArray(two));
  CHECK(frame_slice(out.data, 0) == frame_slice(out.data, 1));

  auto base = enc.encode(noise_frames(3, 28, 6));
  auto perturbed = enc.encode(with_frame_replaced(noise_frames(3, 28, 6), 1, 7));
  CHECK(frame_slice(base.data, 0) == frame_slice(perturbed.data, 0));
  CHECK(frame_slice(base.data, 2) == frame_slice(perturbed.data, 2));
  CHECK_FALSE(frame_slice(base.data, 1) == frame_slice(perturbed.data, 1));
}

TEST_CASE("video encoder geometry and segment length") {
  ParamSet<float> params;
  Rng rng(8);
  VideoEncoderSpec toy_spec;
  toy_spec.frames_per_segment = 2;
  VideoEncoder<float> toy(params, toy_spec, rng);
  CHECK(toy.encode_segment(noise_frames(2, 28, 9)).data.shape() == Shape{2, 2, 2, 64});
  try {
    toy.encode_segment(noise_frames(3, 28, 9));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::segment_length_mismatch);
  }

  ParamSet<float> big_params;
  VideoEncoderSpec spec{224, 14, 16, 4, 2, 2, 3};
  VideoEncoder<float> big(big_params, spec, rng);
  CHECK(big.encode_segment(noise_frames(4, 224, 10)).data.shape() == Shape{4, 16, 16, 16});
}

TEST_CASE("video encoder mixes information across frames") {
  ParamSet<float> params;
  Rng rng(11);
  VideoEncoder<float> enc(params, {}, rng);
  auto frames = noise_frames(4, 28, 12);
  auto base = enc.encode_segment(frames);
  auto perturbed = enc.encode_segment(with_frame_replaced(frames, 2, 13));
  for (std::size_t f = 0; f < 4; ++f) CHECK_FALSE(frame_slice(base.data, f) == frame_slice(perturbed.data, f));

  std::vector<std::size_t> reversed{3, 2, 1, 0};
  auto swapped = enc.encode_segment(frames.select(reversed));
  CHECK(max_abs_diff(base.data, swapped.data) > 1e-4f);
}

TEST_CASE("encoders read the second-to-last block") {
  ParamSet<double> params;
  Rng rng(14);
  ImageEncoderSpec ispec;
  ispec.num_blocks = 4;
  ImageEncoder<double> img(params, ispec, rng);
  auto frames = noise_frames(2, 28, 15);
  CHECK(img.encode(frames).data == img.run_blocks(frames, 3));
  CHECK_FALSE(img.encode(frames).data == img.run_blocks(frames, 4));

  VideoEncoder<double> vid(params, {}, rng);
  auto seg = noise_frames(4, 28, 16);
  CHECK(vid.encode_segment(seg).data == vid.run_blocks(seg, 2));
}

TEST_CASE("encoders are frozen at construction") {
  ParamSet<float> params;
  Rng rng(17);
  ImageEncoder<float> img(params, {}, rng);
  VideoEncoder<float> vid(params, {}, rng);
  for (const auto& p : params.all()) CHECK_FALSE(p.var.requires_grad());
}

TEST_CASE("grid equals input over patch for random specs") {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t patch = std::uniform_int_distribution<std::size_t>(2, 7)(rng);
    const std::size_t grid = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
    ImageEncoderSpec ispec{grid * patch, patch, 8, 2, 2, 1};
    VideoEncoderSpec vspec{grid * patch, patch, 8, 2, 2, 2, 1};
    ParamSet<float> params;
    Rng init(static_cast<std::uint64_t>(trial));
    ImageEncoder<float> img(params, ispec, init);
    VideoEncoder<float> vid(params, vspec, init);
    CHECK(img.encode(noise_frames(1, grid * patch, 1, 1)).data.shape() == Shape{1, grid, grid, 8});
    CHECK(vid.encode_segment(noise_frames(2, grid * patch, 2, 1)).data.shape() == Shape{2, grid, grid, 8});
  }
}

TEST_CASE("bilinear downsampling") {
  Tensor<float> constant({1, 336, 336, 3}, 0.37f);
  auto small = downsample_for_video_encoder(FrameArray(constant), 224);
  CHECK(small.tensor().shape() == Shape{1, 224, 224, 3});
  for (float v : small.tensor().data()) CHECK(v == Catch::Approx(0.37f).margin(1e-6));

  Tensor<float> checker({1, 2, 2, 1}, {1.0f, 0.0f, 0.0f, 1.0f});
  auto one = downsample_for_video_encoder(FrameArray(checker), 1);
  CHECK(one.tensor()[0] == Catch::Approx(0.5f));

  auto frames = noise_frames(2, 8, 19);
  CHECK(downsample_for_video_encoder(frames, 8).tensor() == frames.tensor());
  try {
    downsample_for_video_encoder(frames, 9);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
  }
}
