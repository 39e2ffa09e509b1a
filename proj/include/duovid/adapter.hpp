#pragma once

#include <algorithm>
#include <string>
#include <string_view>

#include "duovid/autograd.hpp"
#include "duovid/encoders.hpp"
#include "duovid/nn.hpp"

namespace duovid {

enum class PoolMode { spatial_avg, time_avg, cnn };
enum class Activation { gelu, identity };

inline std::string_view to_string(PoolMode mode) {
  switch (mode) {
    case PoolMode::spatial_avg: return "spatial_avg";
    case PoolMode::time_avg: return "time_avg";
    case PoolMode::cnn: return "cnn";
  }
  return "spatial_avg";
}

inline PoolMode parse_pool_mode(std::string_view text) {
  if (text == "spatial_avg") return PoolMode::spatial_avg;
  if (text == "time_avg") return PoolMode::time_avg;
  if (text == "cnn") return PoolMode::cnn;
  fail(ErrorKind::config_error, "unknown pool mode '" + std::string(text) + "'");
}

struct AdapterConfig {
  std::size_t in_dim = 64;
  std::size_t out_dim = 64;
  std::size_t hidden_dim = 0;  // 0 means out_dim
  PoolMode pool_mode = PoolMode::spatial_avg;
  std::size_t pool_kernel = 2;
  Activation activation = Activation::gelu;

  std::size_t hidden() const { return hidden_dim ? hidden_dim : out_dim; }

  void validate() const {
    require(pool_kernel == 2 || pool_kernel == 4, ErrorKind::config_error, "pool kernel must be 2 or 4");
    require(in_dim >= 1 && out_dim >= 1, ErrorKind::config_error, "adapter widths must be positive");
  }
};

// Output side of an adaptive pool: G' = max(1, G / k).
inline std::size_t pooled_grid(std::size_t grid, std::size_t kernel) { return std::max<std::size_t>(1, grid / kernel); }

namespace ops {

// Adaptive average pooling of x[F,H,W,D] over the spatial axes to
// [F, oh, ow, D]. Bin i spans [floor(i*H/oh), ceil((i+1)*H/oh)).
template <class T>
Var<T> adaptive_avg_pool(const Var<T>& x, std::size_t oh, std::size_t ow) {
  detail::expect_rank(x.shape(), 4, "adaptive_avg_pool");
  const std::size_t F = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
  require(oh >= 1 && ow >= 1 && oh <= H && ow <= W, ErrorKind::invalid_argument, "adaptive pool output larger than input");
  auto bins = [](std::size_t in, std::size_t out) {
    std::vector<std::pair<std::size_t, std::size_t>> b(out);
    for (std::size_t i = 0; i < out; ++i) b[i] = {i * in / out, ((i + 1) * in + out - 1) / out};
    return b;
  };
  auto ybins = bins(H, oh), xbins = bins(W, ow);
  Tensor<T> out({F, oh, ow, D});
  const T* in = x.value().data().data();
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        auto [y0, y1] = ybins[i];
        auto [x0, x1] = xbins[j];
        const T inv = T{1} / static_cast<T>((y1 - y0) * (x1 - x0));
        T* o = out.data().data() + ((f * oh + i) * ow + j) * D;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) {
            const T* p = in + ((f * H + y) * W + xx) * D;
            for (std::size_t d = 0; d < D; ++d) o[d] += p[d];
          }
        for (std::size_t d = 0; d < D; ++d) o[d] *= inv;
      }
  return make_op(std::move(out), {x}, [F, H, W, D, oh, ow, ybins, xbins](Node<T>& self) {
    T* dx = self.sink(0);
    if (!dx) return;
    const T* g = self.out_grad();
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          auto [y0, y1] = ybins[i];
          auto [x0, x1] = xbins[j];
          const T inv = T{1} / static_cast<T>((y1 - y0) * (x1 - x0));
          const T* go = g + ((f * oh + i) * ow + j) * D;
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t xx = x0; xx < x1; ++xx) {
              T* p = dx + ((f * H + y) * W + xx) * D;
              for (std::size_t d = 0; d < D; ++d) p[d] += go[d] * inv;
            }
        }
  });
}

// Mean over the frame axis: [F,H,W,D] -> [1,H,W,D].
template <class T>
Var<T> temporal_mean(const Var<T>& x) {
  detail::expect_rank(x.shape(), 4, "temporal_mean");
  const std::size_t F = x.dim(0), rest = x.size() / F;
  Tensor<T> out({1, x.dim(1), x.dim(2), x.dim(3)});
  const T inv = T{1} / static_cast<T>(F);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t i = 0; i < rest; ++i) out[i] += x.value()[f * rest + i];
  for (auto& v : out.data()) v *= inv;
  return make_op(std::move(out), {x}, [F, rest, inv](Node<T>& self) {
    T* dx = self.sink(0);
    if (!dx) return;
    const T* g = self.out_grad();
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < rest; ++i) dx[f * rest + i] += g[i] * inv;
  });
}

// Depthwise 3x3 convolution, stride 2, zero padding 1, on x[F,H,W,D] with
// weight[3,3,D] and bias[D]. Output is [F, H/2, W/2, D]; H and W must be even.
template <class T>
Var<T> depthwise_conv3x3_s2(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  detail::expect_rank(x.shape(), 4, "depthwise_conv3x3_s2");
  const std::size_t F = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, ErrorKind::invalid_argument, "stride-2 convolution needs an even grid");
  require(weight.shape() == Shape{3, 3, D} && bias.shape() == Shape{D}, ErrorKind::shape_mismatch, "depthwise kernel shape");
  const std::size_t oh = H / 2, ow = W / 2;
  Tensor<T> out({F, oh, ow, D});
  const T* in = x.value().data().data();
  const T* w = weight.value().data().data();
  auto for_taps = [H, W](std::size_t i, std::size_t j, auto&& fn) {
    for (std::size_t u = 0; u < 3; ++u) {
      const long y = static_cast<long>(2 * i + u) - 1;
      if (y < 0 || y >= static_cast<long>(H)) continue;
      for (std::size_t v = 0; v < 3; ++v) {
        const long xx = static_cast<long>(2 * j + v) - 1;
        if (xx < 0 || xx >= static_cast<long>(W)) continue;
        fn(u, v, static_cast<std::size_t>(y), static_cast<std::size_t>(xx));
      }
    }
  };
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T* o = out.data().data() + ((f * oh + i) * ow + j) * D;
        for (std::size_t d = 0; d < D; ++d) o[d] = bias.value()[d];
        for_taps(i, j, [&](std::size_t u, std::size_t v, std::size_t y, std::size_t xx) {
          const T* p = in + ((f * H + y) * W + xx) * D;
          const T* k = w + (u * 3 + v) * D;
          for (std::size_t d = 0; d < D; ++d) o[d] += k[d] * p[d];
        });
      }
  return make_op(std::move(out), {x, weight, bias}, [F, H, W, D, oh, ow, for_taps](Node<T>& self) {
    const T* g = self.out_grad();
    T* dx = self.sink(0);
    T* dw = self.sink(1);
    T* db = self.sink(2);
    const T* in = self.in_value(0);
    const T* w = self.in_value(1);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const T* go = g + ((f * oh + i) * ow + j) * D;
          if (db)
            for (std::size_t d = 0; d < D; ++d) db[d] += go[d];
          for_taps(i, j, [&](std::size_t u, std::size_t v, std::size_t y, std::size_t xx) {
            const std::size_t base = ((f * H + y) * W + xx) * D;
            for (std::size_t d = 0; d < D; ++d) {
              if (dx) dx[base + d] += go[d] * w[(u * 3 + v) * D + d];
              if (dw) dw[(u * 3 + v) * D + d] += go[d] * in[base + d];
            }
          });
        }
  });
}

}  // namespace ops

template <class T>
Var<T> pool_spatial(const Var<T>& grid, std::size_t kernel) {
  require(kernel >= 1, ErrorKind::invalid_argument, "pool kernel must be >= 1");
  return ops::adaptive_avg_pool(grid, pooled_grid(grid.dim(1), kernel), pooled_grid(grid.dim(2), kernel));
}

template <class T>
Var<T> pool_temporal(const Var<T>& grid) {
  require(grid.dim(0) >= 1, ErrorKind::invalid_argument, "temporal pooling needs >= 1 frame");
  return ops::temporal_mean(grid);
}

// Vision-language adapter: a tokenwise two-layer MLP into the language width
// followed by token pooling on the grid.
template <class T>
class Adapter {
 public:
  Adapter() = default;

  Adapter(ParamSet<T>& params, const std::string& name, const std::string& grp, const AdapterConfig& config, Rng& rng)
      : config_(config) {
    config.validate();
    fc1_ = Linear<T>(params, name + ".fc1", grp, config.in_dim, config.hidden(), rng);
    fc2_ = Linear<T>(params, name + ".fc2", grp, config.hidden(), config.out_dim, rng);
    if (config.pool_mode == PoolMode::cnn) {
      // Starts out as 2x2 averaging with an inert pointwise branch.
      Tensor<T> taps({3, 3, config.out_dim});
      for (std::size_t u = 1; u < 3; ++u)
        for (std::size_t v = 1; v < 3; ++v)
          for (std::size_t d = 0; d < config.out_dim; ++d) taps.at({u, v, d}) = T(0.25);
      dw_weight_ = params.add(name + ".ldp.dw_weight", grp, std::move(taps));
      dw_bias_ = params.add(name + ".ldp.dw_bias", grp, Tensor<T>({config.out_dim}));
      pointwise_ = Linear<T>(params, name + ".ldp.pw", grp, config.out_dim, config.out_dim, rng);
      pointwise_.weight().mutable_value().fill(T{});
    }
  }

  const AdapterConfig& config() const noexcept { return config_; }

  // [F,G,G,in_dim] -> [F,G,G,out_dim]
  Var<T> project(const Var<T>& grid) const {
    require(grid.shape().size() == 4 && grid.dim(3) == config_.in_dim, ErrorKind::shape_mismatch,
            "adapter expects [F,G,G," + std::to_string(config_.in_dim) + "], got " + shape_str(grid.shape()));
    const std::size_t F = grid.dim(0), H = grid.dim(1), W = grid.dim(2);
    Var<T> x = ops::reshape(grid, {F * H * W, config_.in_dim});
    x = fc1_(x);
    if (config_.activation == Activation::gelu) x = ops::gelu(x);
    x = fc2_(x);
    return ops::reshape(x, {F, H, W, config_.out_dim});
  }

  Var<T> pool(const Var<T>& grid) const {
    switch (config_.pool_mode) {
      case PoolMode::spatial_avg: return pool_spatial(grid, config_.pool_kernel);
      case PoolMode::time_avg: return pool_temporal(grid);
      case PoolMode::cnn: return pool_cnn(grid);
    }
    return grid;
  }

  Var<T> operator()(const Var<T>& grid) const { return pool(project(grid)); }
  Var<T> operator()(const FeatureGrid<T>& features) const { return (*this)(Var<T>::constant(features.data)); }

  // Depthwise stride-2 conv, then a residual pointwise layer.
  Var<T> pool_cnn(const Var<T>& grid) const {
    require(dw_weight_.defined(), ErrorKind::config_error, "adapter was not built with pool_mode=cnn");
    require(grid.dim(1) % 2 == 0 && grid.dim(2) % 2 == 0, ErrorKind::invalid_argument, "cnn pooling needs an even grid");
    Var<T> y = ops::depthwise_conv3x3_s2(grid, dw_weight_, dw_bias_);
    const Shape shape = y.shape();
    Var<T> flat = ops::reshape(y, {shape[0] * shape[1] * shape[2], shape[3]});
    return ops::add(y, ops::reshape(pointwise_(flat), shape));
  }

  Linear<T>& fc1() noexcept { return fc1_; }
  Linear<T>& fc2() noexcept { return fc2_; }
  Var<T>& dw_weight() noexcept { return dw_weight_; }
  Var<T>& dw_bias() noexcept { return dw_bias_; }
  Linear<T>& pointwise() noexcept { return pointwise_; }

 private:
  AdapterConfig config_;
  Linear<T> fc1_, fc2_;
  Var<T> dw_weight_, dw_bias_;
  Linear<T> pointwise_;
};

}  // namespace duovid
