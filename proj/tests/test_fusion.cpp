#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "duovid/fusion.hpp"
#include "duovid/nn.hpp"

using namespace duovid;

namespace {

Var<float> tokens(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return Var<float>::constant(random_normal<float>(std::move(shape), 1.0f, rng));
}

std::vector<std::vector<float>> rows_of(const Var<float>& flat) {
  std::vector<std::vector<float>> rows;
  const std::size_t D = flat.dim(1);
  for (std::size_t i = 0; i < flat.dim(0); ++i)
    rows.emplace_back(flat.value().data().begin() + static_cast<std::ptrdiff_t>(i * D),
                      flat.value().data().begin() + static_cast<std::ptrdiff_t>((i + 1) * D));
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

TEST_CASE("sequential layout follows image, video segments, text") {
  auto image = tokens({16, 12, 12, 8}, 1);
  std::vector<Var<float>> video;
  for (std::size_t s = 0; s < 4; ++s) video.push_back(tokens({4, 8, 8, 8}, 10 + s));
  auto text = tokens({7, 8}, 2);
  auto seq = assemble_tokens(image, video, text, FusionOrder::sequential);
  std::vector<std::size_t> lengths;
  for (const auto& b : seq.blocks) lengths.push_back(b.length());
  CHECK(lengths == std::vector<std::size_t>{2304, 256, 256, 256, 256, 7});
  CHECK(seq.total_len == 2304 + 1024 + 7);
  CHECK(seq.blocks.front().kind == BlockKind::image);
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(seq.blocks[1 + s].kind == BlockKind::video_segment);
    CHECK(seq.blocks[1 + s].segment_index == s);
  }
  CHECK(seq.blocks.back().kind == BlockKind::text);
}

TEST_CASE("interleaved layout pairs image and video tokens by segment") {
  auto image = tokens({8, 2, 2, 4}, 3);
  std::vector<Var<float>> video{tokens({2, 1, 1, 4}, 4), tokens({2, 1, 1, 4}, 5)};
  auto text = tokens({3, 4}, 6);
  auto inter = assemble_tokens(image, video, text, FusionOrder::interleaved);
  REQUIRE(inter.blocks.size() == 5);
  std::vector<BlockKind> kinds;
  for (const auto& b : inter.blocks) kinds.push_back(b.kind);
  CHECK(kinds == std::vector<BlockKind>{BlockKind::image, BlockKind::video_segment, BlockKind::image,
                                        BlockKind::video_segment, BlockKind::text});
  CHECK(inter.blocks[0].length() == 16);
  CHECK(inter.blocks[2].segment_index == 1u);
  CHECK(max_abs_diff(inter.blocks[2].embeddings.value(),
                     slice_front(image.value(), 4, 4).reshaped({16, 4})) == 0.0f);

  auto seq = assemble_tokens(image, video, text, FusionOrder::sequential);
  CHECK(inter.total_len == seq.total_len);
  CHECK(inter.total_len == 32 + 4 + 3);
  CHECK(rows_of(inter.flatten()) == rows_of(seq.flatten()));
}

TEST_CASE("a single segment makes both orders identical") {
  auto image = tokens({4, 2, 2, 4}, 7);
  std::vector<Var<float>> video{tokens({4, 1, 1, 4}, 8)};
  auto text = tokens({2, 4}, 9);
  auto a = assemble_tokens(image, video, text, FusionOrder::sequential).flatten();
  auto b = assemble_tokens(image, video, text, FusionOrder::interleaved).flatten();
  CHECK(a.value() == b.value());
}

TEST_CASE("assembly errors") {
  auto image = tokens({4, 2, 2, 4}, 10);
  auto text = tokens({2, 4}, 11);
  try {
    assemble_tokens(image, {}, text, FusionOrder::sequential);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
  }
  try {
    assemble_tokens(image, {tokens({4, 1, 1, 5}, 12)}, text, FusionOrder::sequential);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::shape_mismatch);
  }
  try {
    assemble_tokens(image, {tokens({4, 1, 1, 4}, 12)}, tokens({2, 3}, 13), FusionOrder::sequential);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::shape_mismatch);
  }
}

TEST_CASE("system prompt precedes the visual tokens") {
  auto seq = assemble_tokens(tokens({2, 1, 1, 4}, 14), {tokens({2, 1, 1, 4}, 15)}, tokens({2, 4}, 16),
                             FusionOrder::sequential, tokens({3, 4}, 17));
  CHECK(seq.blocks.front().kind == BlockKind::system);
  CHECK(seq.total_len == 3 + 2 + 2 + 2);
}

TEST_CASE("token budget examples") {
  auto pooled = token_budget(16, 4, 12, 8, 4096, 512);
  CHECK(pooled.image_tokens == 2304);
  CHECK(pooled.video_tokens == 1024);
  CHECK(pooled.visual_tokens == 3328);
  CHECK(pooled.fits);

  auto raw = token_budget(16, 4, 24, 16, 4096, 512);
  CHECK(raw.visual_tokens == 16 * 576 + 16 * 256);
  CHECK_FALSE(raw.fits);

  CHECK(token_budget(1, 1, 1, 1, 8, 1).visual_tokens == 2);
  CHECK(token_budget(16, 4, 24, 16, 4096, 512, true).video_tokens == 4 * 256);

  nlohmann::json j = pooled;
  CHECK(j["visual"] == 3328);
  CHECK(j["fits"] == true);
}

TEST_CASE("larger pool kernels never raise the visual total") {
  for (std::size_t g : {8u, 16u, 24u, 7u}) {
    std::size_t previous = SIZE_MAX;
    for (std::size_t k : {1u, 2u, 4u}) {
      const std::size_t ig = std::max<std::size_t>(1, g / k);
      const std::size_t total = token_budget(16, 4, ig, ig, 4096, 512).visual_tokens;
      CHECK(total <= previous);
      previous = total;
    }
  }
}
