#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "duovid/autograd.hpp"
#include "duovid/nn.hpp"
#include "duovid/tokenizer.hpp"

namespace duovid {

struct LMConfig {
  std::size_t vocab_size = ByteTokenizer::vocab_size;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t context_window = 512;
  std::size_t mlp_dim = 0;  // 0 means 4 * embed_dim

  void validate() const {
    require(embed_dim % num_heads == 0, ErrorKind::config_error, "LM width not divisible by head count");
    require(vocab_size >= ByteTokenizer::vocab_size, ErrorKind::config_error, "vocabulary smaller than the byte tokenizer");
    require(num_layers >= 1 && context_window >= 1, ErrorKind::config_error, "LM needs layers and a context window");
  }
};

struct LoraConfig {
  std::size_t rank = 64;
  double alpha = 64.0;
  std::vector<std::string> targets{"attn.q", "attn.v"};
};

// Decoder-only causal transformer over embedding sequences.
template <class T>
class LanguageModel {
 public:
  LanguageModel() = default;

  LanguageModel(ParamSet<T>& params, const LMConfig& config, Rng& rng) : config_(config) {
    config.validate();
    const std::size_t D = config.embed_dim;
    const std::string grp = group::lm_base;
    tok_embed_ = params.add("lm.tok_embed", grp, random_normal<T>({config.vocab_size, D}, T(0.02), rng));
    pos_embed_ = params.add("lm.pos_embed", grp, random_normal<T>({config.context_window, D}, T(0.02), rng));
    const std::size_t mlp = config.mlp_dim ? config.mlp_dim : 4 * D;
    for (std::size_t l = 0; l < config.num_layers; ++l)
      blocks_.emplace_back(params, "lm.blocks." + std::to_string(l), grp, D, config.num_heads, mlp, true, rng);
    ln_f_ = LayerNorm<T>(params, "lm.ln_f", grp, D);
    head_ = Linear<T>(params, "lm.head", grp, D, config.vocab_size, rng, false);
  }

  const LMConfig& config() const noexcept { return config_; }

  Var<T> embed(std::span<const int> ids) const { return ops::embedding(tok_embed_, ids); }

  // embeddings [L, D] -> logits [L, vocab]
  Var<T> forward(const Var<T>& embeddings) const {
    const std::size_t L = embeddings.dim(0);
    require(L <= config_.context_window, ErrorKind::context_overflow,
            "sequence of " + std::to_string(L) + " tokens exceeds context window " + std::to_string(config_.context_window));
    require(embeddings.dim(1) == config_.embed_dim, ErrorKind::shape_mismatch, "embedding width differs from LM width");
    Var<T> x = ops::add(embeddings, ops::slice_rows(pos_embed_, 0, L));
    for (const auto& block : blocks_) x = block(x);
    return head_(ln_f_(x));
  }

  // Names that apply_lora accepts: per-block suffixes plus "lm.head".
  std::set<std::string> lora_targets() {
    std::set<std::string> names{"lm.head"};
    for (auto& [suffix, linear] : blocks_.front().linears()) names.insert(suffix);
    return names;
  }

  // Adds frozen-base low-rank adapters to every target. Base LM weights become
  // non-trainable; the new A/B matrices land in group::lora.
  void apply_lora(ParamSet<T>& params, const LoraConfig& cfg, Rng& rng) {
    require(cfg.rank >= 1, ErrorKind::config_error, "LoRA rank must be >= 1");
    const auto known = lora_targets();
    for (const auto& t : cfg.targets) require(known.contains(t), ErrorKind::config_error, "unknown LoRA target '" + t + "'");
    for (auto& block : blocks_)
      for (auto& [suffix, linear] : block.linears())
        if (std::find(cfg.targets.begin(), cfg.targets.end(), suffix) != cfg.targets.end())
          linear->attach_lora(params, cfg.rank, static_cast<T>(cfg.alpha), rng);
    if (std::find(cfg.targets.begin(), cfg.targets.end(), "lm.head") != cfg.targets.end())
      head_.attach_lora(params, cfg.rank, static_cast<T>(cfg.alpha), rng);
    params.set_trainable(group::lm_base, false);
    lora_ = cfg;
  }

  bool has_lora() const noexcept { return lora_.has_value(); }
  const std::optional<LoraConfig>& lora() const noexcept { return lora_; }

 private:
  LMConfig config_;
  Var<T> tok_embed_, pos_embed_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head_;
  std::optional<LoraConfig> lora_;
};

// Mean next-token negative log-likelihood over positions with loss_mask = 1.
// logits[L, V] rows align with the turn's positions.
template <class T>
Var<T> nll_loss(const Var<T>& logits, const TokenizedTurn& turn) {
  require(logits.shape().size() == 2 && logits.dim(0) == turn.size() && turn.target_ids.size() == turn.size() &&
              turn.loss_mask.size() == turn.size(),
          ErrorKind::shape_mismatch, "logits rows and turn arrays must align");
  const std::size_t L = logits.dim(0), V = logits.dim(1);
  std::size_t active = 0;
  for (auto m : turn.loss_mask) active += m ? 1 : 0;
  require(active > 0, ErrorKind::empty_loss, "loss mask selects no positions");
  const T* z = logits.value().data().data();
  std::vector<T> probs(L * V);
  long double total = 0;
  for (std::size_t i = 0; i < L; ++i) {
    if (!turn.loss_mask[i]) continue;
    const int target = turn.target_ids[i];
    require(target >= 0 && static_cast<std::size_t>(target) < V, ErrorKind::invalid_argument, "target id outside vocabulary");
    const T mx = *std::max_element(z + i * V, z + (i + 1) * V);
    T sum{};
    for (std::size_t j = 0; j < V; ++j) sum += (probs[i * V + j] = std::exp(z[i * V + j] - mx));
    for (std::size_t j = 0; j < V; ++j) probs[i * V + j] /= sum;
    total += static_cast<long double>(mx + std::log(sum) - z[i * V + static_cast<std::size_t>(target)]);
  }
  const T inv = T{1} / static_cast<T>(active);
  Tensor<T> out({1}, {static_cast<T>(total) * inv});
  return make_op(std::move(out), {logits},
                 [L, V, inv, probs = std::move(probs), targets = turn.target_ids, mask = turn.loss_mask](Node<T>& self) {
                   T* dz = self.sink(0);
                   if (!dz) return;
                   const T g = self.grad[0] * inv;
                   for (std::size_t i = 0; i < L; ++i) {
                     if (!mask[i]) continue;
                     for (std::size_t j = 0; j < V; ++j) dz[i * V + j] += g * probs[i * V + j];
                     dz[i * V + static_cast<std::size_t>(targets[i])] -= g;
                   }
                 });
}

struct GenerateOptions {
  std::size_t max_new = 32;
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int eos_id = ByteTokenizer::eos;
};

// Autoregressive continuation of a [L, D] embedding prefix. The stop token is
// not included in the result.
template <class T>
std::vector<int> generate(const LanguageModel<T>& lm, const Var<T>& prefix, const GenerateOptions& opts) {
  require(prefix.dim(0) + opts.max_new <= lm.config().context_window, ErrorKind::context_overflow,
          "prefix of " + std::to_string(prefix.dim(0)) + " plus " + std::to_string(opts.max_new) +
              " new tokens exceeds context window");
  require(opts.greedy || opts.temperature > 0.0, ErrorKind::invalid_argument, "sampling temperature must be positive");
  NoGradGuard no_grad;
  Rng rng(opts.seed);
  std::vector<int> out;
  Var<T> context = Var<T>::constant(prefix.value());
  for (std::size_t step = 0; step < opts.max_new; ++step) {
    Var<T> logits = lm.forward(context);
    const std::size_t V = logits.dim(1);
    const T* last = logits.value().data().data() + (logits.dim(0) - 1) * V;
    int next = 0;
    if (opts.greedy) {
      next = static_cast<int>(std::max_element(last, last + V) - last);
    } else {
      std::vector<double> weights(V);
      const double mx = static_cast<double>(*std::max_element(last, last + V));
      for (std::size_t j = 0; j < V; ++j) weights[j] = std::exp((static_cast<double>(last[j]) - mx) / opts.temperature);
      next = std::discrete_distribution<int>(weights.begin(), weights.end())(rng);
    }
    if (next == opts.eos_id) break;
    out.push_back(next);
    const int id = next;
    context = ops::concat_rows<T>({context, lm.embed(std::span<const int>(&id, 1))});
  }
  return out;
}

}  // namespace duovid
