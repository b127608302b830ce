#pragma once

// Parameter-holding building blocks shared by the upsamplers and encoder.

#include <cmath>
#include <string>
#include <vector>

#include "flowup/ops.hpp"

namespace flowup {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
std::int64_t count_params(const ParamList<T>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto p : params) p.tensor.zero_grad();
}

// Uniform init with bound 1/sqrt(fan_in), the usual default for conv layers.
template <typename T>
Tensor<T> init_param(Shape shape, Rng& rng, std::int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  auto t = Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
  t.requires_grad_();
  return t;
}

template <typename T>
Tensor<T> const_param(Shape shape, T value) {
  auto t = Tensor<T>::full(std::move(shape), value);
  t.requires_grad_();
  return t;
}

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  // Without a bias when a normalization follows: it would cancel it exactly.
  Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride_, Rng& rng,
         bool with_bias = true)
      : weight(init_param<T>({out, in, kernel, kernel}, rng, in * kernel * kernel)),
        stride(stride_),
        pad(kernel / 2) {
    if (with_bias) bias = init_param<T>({out}, rng, in * kernel * kernel);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({join_name(prefix, "weight"), weight});
    if (bias.defined()) out.push_back({join_name(prefix, "bias"), bias});
  }
};

template <typename T>
struct Linear1x1 {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear1x1() = default;
  Linear1x1(std::int64_t in, std::int64_t out, Rng& rng)
      : weight(init_param<T>({out, in}, rng, in)), bias(init_param<T>({out}, rng, in)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear_1x1(x, weight, bias); }

  void zero() {
    for (auto& v : weight.data()) v = T(0);
    for (auto& v : bias.data()) v = T(0);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({join_name(prefix, "weight"), weight});
    out.push_back({join_name(prefix, "bias"), bias});
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim)
      : gamma(const_param<T>({dim}, T(1))), beta(const_param<T>({dim}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({join_name(prefix, "gamma"), gamma});
    out.push_back({join_name(prefix, "beta"), beta});
  }
};

}  // namespace flowup
