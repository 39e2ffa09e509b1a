#include <catch2/catch_amalgamated.hpp>

#include "duovid/adapter.hpp"
#include "duovid/autograd.hpp"
#include "duovid/lm.hpp"
#include "duovid/nn.hpp"
#include "support/gradcheck.hpp"

using namespace duovid;
using duovid::testing::grad_check;

namespace {

Var<double> param(Shape shape, Rng& rng, double stddev = 1.0) {
  return Var<double>::leaf(random_normal<double>(std::move(shape), stddev, rng), true);
}

Tensor<double> probe(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return random_normal<double>(shape, 1.0, rng);
}

}  // namespace

TEST_CASE("matmul variants match finite differences") {
  Rng rng(1);
  auto a = param({3, 4}, rng), b = param({4, 5}, rng), c = param({5, 4}, rng);
  auto w = probe({3, 5}, 2);
  auto r1 = grad_check({a, b}, [&] { return ops::dot_const(ops::matmul(a, b), w); }, 40);
  auto r2 = grad_check({a, c}, [&] { return ops::dot_const(ops::matmul_nt(a, c), w); }, 40);
  CHECK(r1.worst_rel_error < 1e-6);
  CHECK(r2.worst_rel_error < 1e-6);
}

TEST_CASE("elementwise, normalization and softmax gradients") {
  Rng rng(3);
  auto x = param({4, 6}, rng), y = param({4, 6}, rng), row = param({6}, rng);
  auto gamma = param({6}, rng), beta = param({6}, rng);
  auto w = probe({4, 6}, 4);
  auto loss = [&] {
    Var<double> h = ops::add_row(ops::add(ops::mul(x, y), ops::scale(x, 0.5)), row);
    h = ops::gelu(ops::layer_norm(h, gamma, beta));
    return ops::dot_const(ops::softmax_rows(h, true), w);
  };
  auto r = grad_check({x, y, row, gamma, beta}, loss, 80);
  CHECK(r.worst_rel_error < 1e-5);
}

TEST_CASE("slicing and concatenation route gradients back to their sources") {
  Rng rng(5);
  auto a = param({3, 4}, rng), b = param({2, 4}, rng), c = param({3, 2}, rng);
  auto loss = [&] {
    Var<double> rows = ops::concat_rows<double>({a, b});
    Var<double> cols = ops::concat_cols<double>({ops::slice_cols(a, 1, 2), c});
    return ops::add(ops::dot_const(ops::slice_rows(rows, 1, 3), probe({3, 4}, 6)), ops::dot_const(cols, probe({3, 4}, 7)));
  };
  auto r = grad_check({a, b, c}, loss, 60);
  CHECK(r.worst_rel_error < 1e-6);
}

TEST_CASE("embedding and masked nll gradients") {
  Rng rng(8);
  auto table = param({7, 5}, rng), head = param({5, 7}, rng);
  TokenizedTurn turn{{1, 3, 3, 6}, {3, 3, 6, 2}, {0, 1, 1, 1}};
  auto loss = [&] {
    std::vector<int> ids = turn.input_ids;
    return nll_loss(ops::matmul(ops::embedding(table, ids), head), turn);
  };
  auto r = grad_check({table, head}, loss, 70);
  CHECK(r.worst_rel_error < 1e-5);
}

TEST_CASE("pooling and depthwise convolution gradients") {
  Rng rng(9);
  auto x = param({2, 6, 6, 3}, rng), w = param({3, 3, 3}, rng), b = param({3}, rng);
  auto loss = [&] {
    Var<double> pooled = ops::adaptive_avg_pool(x, 4, 4);  // uneven bins
    Var<double> conv = ops::depthwise_conv3x3_s2(x, w, b);
    return ops::add(ops::add(ops::dot_const(pooled, probe(pooled.shape(), 10)), ops::dot_const(conv, probe(conv.shape(), 11))),
                    ops::dot_const(ops::temporal_mean(x), probe({1, 6, 6, 3}, 12)));
  };
  auto r = grad_check({x, w, b}, loss, 80);
  CHECK(r.worst_rel_error < 1e-6);
}

TEST_CASE("causal softmax assigns zero probability above the diagonal") {
  auto x = Var<double>::constant(probe({4, 4}, 13));
  auto p = ops::softmax_rows(x, true);
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      if (j > i) CHECK(p.value().at({i, j}) == 0.0);
      total += p.value().at({i, j});
    }
    CHECK(total == Catch::Approx(1.0));
  }
}

TEST_CASE("no-grad mode records no graph") {
  Rng rng(14);
  auto a = param({2, 2}, rng);
  NoGradGuard guard;
  auto y = ops::scale(a, 2.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors carry the shape-mismatch kind") {
  auto a = Var<float>::constant(Tensor<float>({2, 3}));
  auto b = Var<float>::constant(Tensor<float>({2, 3}));
  try {
    ops::matmul(a, b);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::shape_mismatch);
  }
}
