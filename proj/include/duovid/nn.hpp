#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "duovid/autograd.hpp"

namespace duovid {

using Rng = std::mt19937_64;

template <class T>
Tensor<T> random_normal(Shape shape, T stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> random_uniform(Shape shape, T lo, T hi, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Parameter groups used for freezing and reporting.
namespace group {
inline constexpr const char* image_encoder = "image_encoder";
inline constexpr const char* video_encoder = "video_encoder";
inline constexpr const char* image_adapter = "image_adapter";
inline constexpr const char* video_adapter = "video_adapter";
inline constexpr const char* lm_base = "lm_base";
inline constexpr const char* lora = "lora";
}  // namespace group

template <class T>
struct Parameter {
  std::string name;
  std::string group;
  Var<T> var;
};

// Flat, ordered registry of every parameter a model owns. Modules register
// into it at construction and keep Var handles to the shared leaf nodes.
template <class T>
class ParamSet {
 public:
  Var<T> add(std::string name, std::string group, Tensor<T> init) {
    require(!index_.contains(name), ErrorKind::config_error, "duplicate parameter name " + name);
    Var<T> var = Var<T>::leaf(std::move(init), true);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(group), var});
    return var;
  }

  const std::vector<Parameter<T>>& all() const noexcept { return params_; }
  std::vector<Parameter<T>>& all() noexcept { return params_; }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Parameter<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::config_error, "unknown parameter " + name);
    return params_[it->second];
  }

  void set_trainable(const std::string& grp, bool trainable) {
    for (auto& p : params_)
      if (p.group == grp) p.var.set_requires_grad(trainable);
  }

  void freeze_all() {
    for (auto& p : params_) p.var.set_requires_grad(false);
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.size();
    return n;
  }

  std::map<std::string, Tensor<T>> snapshot() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& p : params_) out.emplace(p.name, p.var.value());
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// y = x W + b, W stored [in, out]. An attached low-rank adapter adds
// (alpha / r) * x A^T B^T with B starting at zero.
template <class T>
class Linear {
 public:
  Linear() = default;

  Linear(ParamSet<T>& params, const std::string& name, const std::string& grp, std::size_t in, std::size_t out,
         Rng& rng, bool bias = true)
      : name_(name), in_(in), out_(out) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    weight_ = params.add(name + ".weight", grp, random_uniform<T>({in, out}, -bound, bound, rng));
    if (bias) bias_ = params.add(name + ".bias", grp, Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> y = ops::matmul(x, weight_);
    if (bias_.defined()) y = ops::add_row(y, bias_);
    if (lora_a_.defined()) {
      Var<T> low = ops::matmul_nt(ops::matmul_nt(x, lora_a_), lora_b_);
      y = ops::add(y, ops::scale(low, lora_scale_));
    }
    return y;
  }

  void attach_lora(ParamSet<T>& params, std::size_t rank, T alpha, Rng& rng) {
    require(rank >= 1, ErrorKind::config_error, "LoRA rank must be >= 1");
    require(!lora_a_.defined(), ErrorKind::config_error, "LoRA already attached to " + name_);
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in_)));
    lora_a_ = params.add(name_ + ".lora_a", group::lora, random_uniform<T>({rank, in_}, -bound, bound, rng));
    lora_b_ = params.add(name_ + ".lora_b", group::lora, Tensor<T>({out_, rank}));
    lora_scale_ = alpha / static_cast<T>(rank);
  }

  const std::string& name() const noexcept { return name_; }
  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }
  bool has_lora() const noexcept { return lora_a_.defined(); }
  Var<T>& weight() noexcept { return weight_; }
  Var<T>& bias() noexcept { return bias_; }

 private:
  std::string name_;
  std::size_t in_ = 0, out_ = 0;
  Var<T> weight_, bias_, lora_a_, lora_b_;
  T lora_scale_{};
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamSet<T>& params, const std::string& name, const std::string& grp, std::size_t dim) {
    gamma_ = params.add(name + ".gamma", grp, Tensor<T>({dim}, T{1}));
    beta_ = params.add(name + ".beta", grp, Tensor<T>({dim}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma_, beta_); }

 private:
  Var<T> gamma_, beta_;
};

// Pre-norm transformer block over a token matrix x[L, D].
template <class T>
class TransformerBlock {
 public:
  TransformerBlock() = default;

  TransformerBlock(ParamSet<T>& params, const std::string& name, const std::string& grp, std::size_t dim,
                   std::size_t heads, std::size_t mlp_dim, bool causal, Rng& rng)
      : heads_(heads), causal_(causal) {
    require(heads >= 1 && dim % heads == 0, ErrorKind::config_error,
            "width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
    ln1_ = LayerNorm<T>(params, name + ".ln1", grp, dim);
    q_ = Linear<T>(params, name + ".attn.q", grp, dim, dim, rng);
    k_ = Linear<T>(params, name + ".attn.k", grp, dim, dim, rng);
    v_ = Linear<T>(params, name + ".attn.v", grp, dim, dim, rng);
    o_ = Linear<T>(params, name + ".attn.o", grp, dim, dim, rng);
    ln2_ = LayerNorm<T>(params, name + ".ln2", grp, dim);
    fc1_ = Linear<T>(params, name + ".mlp.fc1", grp, dim, mlp_dim, rng);
    fc2_ = Linear<T>(params, name + ".mlp.fc2", grp, mlp_dim, dim, rng);
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = ops::add(x, attention(ln1_(x)));
    return ops::add(h, fc2_(ops::gelu(fc1_(ln2_(h)))));
  }

  // Linear sublayers addressable by suffix, e.g. "attn.q".
  std::vector<std::pair<std::string, Linear<T>*>> linears() {
    return {{"attn.q", &q_}, {"attn.k", &k_}, {"attn.v", &v_}, {"attn.o", &o_}, {"mlp.fc1", &fc1_}, {"mlp.fc2", &fc2_}};
  }

 private:
  Var<T> attention(const Var<T>& x) const {
    const std::size_t dim = x.dim(1);
    const std::size_t head_dim = dim / heads_;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
    Var<T> q = q_(x), k = k_(x), v = v_(x);
    std::vector<Var<T>> outs;
    outs.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      Var<T> qh = ops::slice_cols(q, h * head_dim, head_dim);
      Var<T> kh = ops::slice_cols(k, h * head_dim, head_dim);
      Var<T> vh = ops::slice_cols(v, h * head_dim, head_dim);
      Var<T> probs = ops::softmax_rows(ops::scale(ops::matmul_nt(qh, kh), inv_sqrt), causal_);
      outs.push_back(ops::matmul(probs, vh));
    }
    return o_(heads_ == 1 ? outs[0] : ops::concat_cols(outs));
  }

  std::size_t heads_ = 1;
  bool causal_ = false;
  LayerNorm<T> ln1_, ln2_;
  Linear<T> q_, k_, v_, o_, fc1_, fc2_;
};

}  // namespace duovid
