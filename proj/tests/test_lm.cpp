#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "duovid/lm.hpp"
#include "support/gradcheck.hpp"

using namespace duovid;

namespace {

LMConfig toy_config() {
  LMConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.context_window = 32;
  return cfg;
}

template <class T>
Var<T> embed_text(const LanguageModel<T>& lm, const std::vector<int>& ids) {
  return lm.embed(std::span<const int>(ids));
}

}  // namespace

TEST_CASE("tokenizer round trip and turn masking") {
  CHECK(ByteTokenizer::decode(ByteTokenizer::encode("hi\xff")) == "hi\xff");
  ChatTemplate chat;
  auto turn = tokenize_turn(chat, "q", "ab");
  const std::string prompt = chat.prompt("q");
  REQUIRE(turn.size() == prompt.size() + 2);
  CHECK(turn.target_ids.back() == ByteTokenizer::eos);
  std::size_t active = 0;
  for (auto m : turn.loss_mask) active += m;
  CHECK(active == 3);  // 'a', 'b', EOS
  CHECK(turn.target_ids[prompt.size() - 1] == 'a');
  CHECK(turn.loss_mask[prompt.size() - 2] == 0);
}

TEST_CASE("forward is causal, deterministic and handles a single token") {
  ParamSet<double> params;
  Rng rng(1);
  LanguageModel<double> lm(params, toy_config(), rng);
  std::vector<int> ids{5, 9, 13, 77, 2, 100};
  auto base = lm.forward(embed_text(lm, ids)).value();
  CHECK(base.shape() == Shape{6, 260});
  CHECK(lm.forward(embed_text(lm, ids)).value() == base);

  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    auto changed = ids;
    changed[t + 1] = 200;
    auto out = lm.forward(embed_text(lm, changed)).value();
    for (std::size_t i = 0; i <= t; ++i)
      for (std::size_t v = 0; v < 260; ++v) REQUIRE(out.at({i, v}) == base.at({i, v}));
    double moved = 0;
    for (std::size_t v = 0; v < 260; ++v) moved += std::abs(out.at({t + 1, v}) - base.at({t + 1, v}));
    CHECK(moved > 0);
  }

  std::vector<int> one{42};
  CHECK(lm.forward(embed_text(lm, one)).shape() == Shape{1, 260});
}

TEST_CASE("sequences longer than the context window are rejected") {
  ParamSet<float> params;
  Rng rng(2);
  LanguageModel<float> lm(params, toy_config(), rng);
  std::vector<int> ids(33, 1);
  try {
    lm.forward(embed_text(lm, ids));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::context_overflow);
  }
}

TEST_CASE("nll loss examples") {
  TokenizedTurn turn{{1, 2, 3}, {2, 3, 4}, {0, 1, 1}};
  auto uniform = Var<double>::constant(Tensor<double>({3, 260}, 0.0));
  CHECK(nll_loss(uniform, turn).item() == Catch::Approx(std::log(260.0)).epsilon(1e-12));

  Tensor<double> z({2, 3}, {0.5, -1.0, 2.0, 1.5, 0.0, -0.5});
  TokenizedTurn two{{0, 0}, {2, 0}, {1, 1}};
  const double l0 = -std::log(std::exp(2.0) / (std::exp(0.5) + std::exp(-1.0) + std::exp(2.0)));
  const double l1 = -std::log(std::exp(1.5) / (std::exp(1.5) + std::exp(0.0) + std::exp(-0.5)));
  CHECK(nll_loss(Var<double>::constant(z), two).item() == Catch::Approx((l0 + l1) / 2).epsilon(1e-12));

  TokenizedTurn none{{1}, {2}, {0}};
  try {
    nll_loss(Var<double>::constant(Tensor<double>({1, 260})), none);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::empty_loss);
  }
}

TEST_CASE("targets under a zero mask do not affect the loss") {
  Rng rng(3);
  auto logits = Var<double>::constant(random_normal<double>({4, 260}, 1.0, rng));
  TokenizedTurn turn{{1, 2, 3, 4}, {10, 20, 30, 40}, {0, 1, 0, 1}};
  const double base = nll_loss(logits, turn).item();
  for (int replacement : {0, 99, 257}) {
    auto changed = turn;
    changed.target_ids[0] = replacement;
    changed.target_ids[2] = replacement;
    CHECK(nll_loss(logits, changed).item() == base);
  }
}

TEST_CASE("LoRA leaves logits unchanged at init and freezes the base") {
  ParamSet<float> params;
  Rng rng(4);
  LanguageModel<float> lm(params, toy_config(), rng);
  std::vector<int> ids{3, 1, 4, 1, 5};
  auto before = lm.forward(embed_text(lm, ids)).value();
  LoraConfig lora;
  lora.rank = 4;
  lora.alpha = 4;
  lm.apply_lora(params, lora, rng);
  CHECK(max_abs_diff(before, lm.forward(embed_text(lm, ids)).value()) == 0.0f);
  for (const auto& p : params.all()) CHECK(p.var.requires_grad() == (p.group == group::lora));
  CHECK(lm.has_lora());
}

TEST_CASE("LoRA parameter count") {
  LMConfig cfg = toy_config();
  cfg.embed_dim = 128;
  cfg.num_layers = 1;
  cfg.num_heads = 4;
  ParamSet<float> params;
  Rng rng(5);
  LanguageModel<float> lm(params, cfg, rng);
  const std::size_t before = params.count();
  LoraConfig lora;
  lora.rank = 64;
  lora.alpha = 64;
  lora.targets = {"attn.q"};
  lm.apply_lora(params, lora, rng);
  CHECK(params.count() - before == 2 * 64 * 128);
}

TEST_CASE("unknown LoRA targets are configuration errors") {
  ParamSet<float> params;
  Rng rng(6);
  LanguageModel<float> lm(params, toy_config(), rng);
  LoraConfig lora;
  lora.targets = {"attn.z"};
  try {
    lm.apply_lora(params, lora, rng);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config_error);
  }
}

TEST_CASE("an update after LoRA moves only the adapter matrices") {
  ParamSet<float> params;
  Rng rng(7);
  LanguageModel<float> lm(params, toy_config(), rng);
  LoraConfig lora;
  lora.rank = 4;
  lm.apply_lora(params, lora, rng);
  auto before = params.snapshot();
  auto turn = tokenize_turn(ChatTemplate{}, "x", "y");
  auto loss = nll_loss(lm.forward(embed_text(lm, turn.input_ids)), turn);
  backward(loss);
  for (auto& p : params.all()) {
    if (!p.var.requires_grad()) continue;
    auto& value = p.var.mutable_value();
    for (std::size_t i = 0; i < value.size(); ++i) value[i] -= 0.1f * p.var.grad()[i];
  }
  bool b_moved = false;
  for (const auto& p : params.all()) {
    const bool same = p.var.value() == before.at(p.name);
    if (p.group != group::lora) CHECK(same);
    if (p.name.ends_with("lora_b") && !same) b_moved = true;
  }
  CHECK(b_moved);
}

TEST_CASE("LM gradients match finite differences") {
  ParamSet<double> params;
  Rng rng(8);
  LMConfig cfg = toy_config();
  cfg.embed_dim = 8;
  cfg.mlp_dim = 16;
  LanguageModel<double> lm(params, cfg, rng);
  LoraConfig lora;
  lora.rank = 2;
  lora.targets = {"attn.q", "attn.v", "lm.head"};
  lm.apply_lora(params, lora, rng);
  for (auto& p : params.all())
    if (p.name.ends_with("lora_b")) p.var.mutable_value() = random_normal<double>(p.var.shape(), 0.1, rng);
  params.set_trainable(group::lm_base, true);
  auto turn = tokenize_turn(ChatTemplate{"v", "", "Q", "A"}, "ab", "cd");
  std::vector<Var<double>> leaves;
  for (auto& p : params.all()) leaves.push_back(p.var);
  auto r = duovid::testing::grad_check(leaves, [&] { return nll_loss(lm.forward(embed_text(lm, turn.input_ids)), turn); },
                                       150);
  CHECK(r.worst_rel_error < 1e-4);
}

TEST_CASE("generation") {
  ParamSet<float> params;
  Rng rng(9);
  LanguageModel<float> lm(params, toy_config(), rng);
  std::vector<int> prompt{1, 2, 3};
  auto prefix = embed_text(lm, prompt);
  GenerateOptions none;
  none.max_new = 0;
  CHECK(generate(lm, prefix, none).empty());

  GenerateOptions opts;
  opts.max_new = 10;
  auto a = generate(lm, prefix, opts);
  CHECK(a == generate(lm, prefix, opts));
  CHECK(a.size() <= 10);

  GenerateOptions sampled = opts;
  sampled.greedy = false;
  sampled.seed = 3;
  CHECK(generate(lm, prefix, sampled) == generate(lm, prefix, sampled));

  opts.max_new = 30;
  try {
    generate(lm, prefix, opts);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::context_overflow);
  }
}
