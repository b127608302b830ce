#pragma once

// Central-difference gradient checks in double precision. The scalar probed
// is <f(x), R> for a fixed random R, so every output element contributes.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "flowup/pipeline.hpp"
#include "flowup/training.hpp"

namespace flowup {

struct GradcheckOptions {
  double eps = 1e-5;
  double floor = 1e-3;  // denominator floor of the relative error
  std::int64_t max_coords = 24;  // per tensor; larger tensors are sampled
  std::uint64_t seed = 7;
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  std::int64_t skipped_kinks = 0;

  bool passed(double tol) const { return checked > 0 && max_rel_error <= tol; }
};

inline constexpr double kGradTolerance = 1e-5;

/// `fn` recomputes the output from the tensors in `wrt` (which it captures).
/// Coordinates whose stencil changes the sign pattern of a relu/abs input
/// are skipped: the derivative is undefined across a kink.
inline GradcheckResult gradcheck(const std::string& name, const std::vector<Tensor<double>>& wrt,
                                 const std::function<Tensor<double>()>& fn,
                                 const GradcheckOptions& opt = {}) {
  GradcheckResult res{name};
  Rng rng(opt.seed);
  for (const auto& t : wrt) {
    if (!t.requires_grad()) throw ConfigError("gradcheck " + name + ": input does not require grad");
    t.impl()->grad.clear();
  }
  const auto out = fn();
  const auto proj = Tensor<double>::randn(out.shape(), rng);
  backward(sum(mul(out, proj)));

  auto probe = [&](std::uint64_t& signature) {
    NoGradGuard guard;
    detail::KinkProbe kp;
    detail::kink_probe = &kp;
    const auto y = fn();
    detail::kink_probe = nullptr;
    signature = kp.signature;
    double acc = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) acc += y[i] * proj[i];
    return acc;
  };

  for (const auto& t : wrt) {
    const auto n = t.numel();
    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (n > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opt.max_coords));
    }
    const auto analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(static_cast<std::size_t>(n), 0.0);
    auto data = const_cast<Tensor<double>&>(t).data();
    for (auto c : coords) {
      const double v = data[static_cast<std::size_t>(c)];
      std::uint64_t sp = 0, sm = 0;
      data[static_cast<std::size_t>(c)] = v + opt.eps;
      const double fp = probe(sp);
      data[static_cast<std::size_t>(c)] = v - opt.eps;
      const double fm = probe(sm);
      data[static_cast<std::size_t>(c)] = v;
      if (sp != sm) {
        ++res.skipped_kinks;
        continue;
      }
      const double num = (fp - fm) / (2 * opt.eps);
      const double a = analytic[static_cast<std::size_t>(c)];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), opt.floor});
      res.max_rel_error = std::max(res.max_rel_error, rel);
      ++res.checked;
    }
  }
  for (const auto& t : wrt) t.impl()->grad.clear();
  return res;
}

struct GradcheckCase {
  std::string name;
  std::function<GradcheckResult(const GradcheckOptions&)> run;
};

namespace detail {

inline Tensor<double> leaf(Shape shape, Rng& rng, double stddev = 1.0) {
  auto t = Tensor<double>::randn(std::move(shape), rng, stddev);
  t.requires_grad_();
  return t;
}

// Random values at least `margin` away from zero.
inline Tensor<double> leaf_off_zero(Shape shape, Rng& rng, double margin = 0.05) {
  auto t = Tensor<double>::randn(std::move(shape), rng);
  for (auto& v : t.data()) {
    if (std::abs(v) < margin) v = v < 0 ? v - 2 * margin : v + 2 * margin;
  }
  t.requires_grad_();
  return t;
}

template <typename Module>
std::vector<Tensor<double>> params_of(const Module& m) {
  ParamList<double> p;
  m.collect(p, "");
  std::vector<Tensor<double>> out;
  for (auto& x : p) out.push_back(x.tensor);
  return out;
}

// Nonzero values so bias and norm-affine gradients are exercised away from
// their initial constants.
inline void jitter(const std::vector<Tensor<double>>& params, Rng& rng, double stddev = 0.1) {
  std::normal_distribution<double> n(0.0, stddev);
  for (const auto& p : params) {
    for (auto& v : const_cast<Tensor<double>&>(p).data()) v += n(rng);
  }
}

inline Tensor<double> flat(const Tensor<double>& t) { return reshape(t, {t.numel()}); }

inline std::vector<Tensor<double>> cat(std::vector<Tensor<double>> a,
                                       const std::vector<Tensor<double>>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace detail

/// Every differentiable op plus reduced-width modules.
inline std::vector<GradcheckCase> gradcheck_suite() {
  using detail::leaf;
  using TD = Tensor<double>;
  std::vector<GradcheckCase> cases;
  auto add_case = [&](std::string name, auto build) {
    cases.push_back({name, [name, build](const GradcheckOptions& opt) {
                       Rng rng(opt.seed);
                       return build(name, rng, opt);
                     }});
  };

  add_case("add", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng), b = leaf({2, 3, 4}, rng);
    return gradcheck(n, {a, b}, [=] { return add(a, b); }, o);
  });
  add_case("sub", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng), b = leaf({2, 3, 4}, rng);
    return gradcheck(n, {a, b}, [=] { return sub(a, b); }, o);
  });
  add_case("mul", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng), b = leaf({2, 3, 4}, rng);
    return gradcheck(n, {a, b}, [=] { return mul(a, b); }, o);
  });
  add_case("scale", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng);
    return gradcheck(n, {a}, [=] { return scale(a, -1.7); }, o);
  });
  add_case("relu", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = detail::leaf_off_zero({2, 3, 4}, rng);
    return gradcheck(n, {a}, [=] { return relu(a); }, o);
  });
  add_case("gelu", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng, 2.0);
    return gradcheck(n, {a}, [=] { return gelu(a); }, o);
  });
  add_case("tanh", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng, 1.5);
    return gradcheck(n, {a}, [=] { return tanh(a); }, o);
  });
  add_case("abs", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = detail::leaf_off_zero({2, 3, 4}, rng);
    return gradcheck(n, {a}, [=] { return abs(a); }, o);
  });
  add_case("sum", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng);
    return gradcheck(n, {a}, [=] { return sum(a); }, o);
  });
  add_case("mean", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng);
    return gradcheck(n, {a}, [=] { return mean(a); }, o);
  });
  add_case("reshape", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng);
    return gradcheck(n, {a}, [=] { return reshape(a, {6, 4}); }, o);
  });
  add_case("concat", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng), b = leaf({1, 3, 4}, rng), c = leaf({3, 2, 4}, rng);
    return gradcheck(n, {a, b, c}, [=] {
      return concat<double>({concat<double>({a, b}, 0), c}, 1);
    }, o);
  });
  add_case("repeat", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({2, 3, 4}, rng);
    return gradcheck(n, {a}, [=] { return repeat(a, 3); }, o);
  });
  add_case("pixel_shuffle", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({4, 2, 3, 3}, rng);
    return gradcheck(n, {a}, [=] { return pixel_shuffle(a, 2); }, o);
  });
  add_case("softmax", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto a = leaf({4, 3, 5}, rng, 2.0);
    return gradcheck(n, {a}, [=] { return add(softmax(a, 0), softmax(a, 2)); }, o);
  });
  add_case("layer_norm", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto x = leaf({5, 3, 4}, rng), g = leaf({5}, rng), b = leaf({5}, rng);
    return gradcheck(n, {x, g, b}, [=] { return layer_norm(x, g, b); }, o);
  });
  add_case("instance_norm", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto x = leaf({3, 4, 5}, rng);
    return gradcheck(n, {x}, [=] { return instance_norm(x); }, o);
  });
  add_case("conv2d", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto x = leaf({3, 6, 7}, rng), w = leaf({4, 3, 3, 3}, rng), b = leaf({4}, rng);
    auto w1 = leaf({2, 4, 1, 1}, rng);
    return gradcheck(n, {x, w, b, w1}, [=] {
      const auto y = conv2d(x, w, b, 1, 1);
      return concat<double>({detail::flat(conv2d(y, w1, TD{}, 1, 0)),
                             detail::flat(conv2d(x, w, b, 2, 1))},
                            0);
    }, o);
  });
  add_case("linear_1x1", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto x = leaf({3, 4, 5}, rng), w = leaf({6, 3}, rng), b = leaf({6}, rng);
    return gradcheck(n, {x, w, b}, [=] { return linear_1x1(x, w, b); }, o);
  });
  add_case("bilinear_resize", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto x = leaf({2, 5, 6}, rng);
    return gradcheck(n, {x}, [=] { return bilinear_resize(x, 7, 9, true); }, o);
  });
  add_case("avg_downsample", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto x = leaf({2, 8, 8}, rng);
    return gradcheck(n, {x}, [=] { return avg_downsample(x, 4); }, o);
  });
  add_case("convex_aggregate", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto logits = leaf({4 * 9, 4, 5}, rng), field = leaf({2, 4, 5}, rng);
    return gradcheck(n, {logits, field}, [=] {
      const auto z = convex_aggregate(maps_from_logits(logits, 4, 3, Padding::zero), field);
      const auto c = convex_aggregate(maps_from_logits(logits, 4, 3, Padding::clamp), field);
      return concat<double>({z, c}, 0);
    }, o);
  });
  add_case("na_logits", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto q = leaf({2, 3, 5, 6}, rng), k = leaf({2, 3, 5, 6}, rng), b = leaf({2, 5, 5}, rng);
    return gradcheck(n, {q, k, b}, [=] { return na_logits(3, q, k, b, 0.7); }, o);
  });
  add_case("na_logits_wide_bias", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    // Bias table of a 5-wide window used by a 3-wide one.
    auto q = leaf({2, 3, 4, 5}, rng), k = leaf({2, 3, 4, 5}, rng), b = leaf({2, 9, 9}, rng);
    return gradcheck(n, {q, k, b}, [=] { return na_logits(3, q, k, b, 0.7); }, o);
  });
  add_case("na_aggregate", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto q = leaf({2, 3, 5, 6}, rng), k = leaf({2, 3, 5, 6}, rng), v = leaf({2, 4, 5, 6}, rng);
    auto b = leaf({2, 5, 5}, rng);
    return gradcheck(n, {q, k, v, b}, [=] { return na_aggregate(na_maps(3, q, k, b), v); }, o);
  });
  add_case("sequence_loss", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    auto gt = Tensor<double>::randn({2, 4, 5}, rng);
    std::vector<TD> preds;
    for (int i = 0; i < 3; ++i) {
      auto p = detail::leaf_off_zero({2, 4, 5}, rng);
      for (std::int64_t j = 0; j < p.numel(); ++j) p.data()[static_cast<std::size_t>(j)] += gt[j];
      preds.push_back(p);
    }
    return gradcheck(n, preds, [=] { return sequence_loss(preds, gt, 0.8); }, o);
  });

  add_case("mask_predictor", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    ConvexUpsampler<double> up(6, 2, 3, Padding::zero, rng);
    up.predictor = MaskPredictor<double>(6, 2, 3, rng, 16);
    auto h = leaf({6, 4, 4}, rng), flow = leaf({2, 4, 4}, rng);
    auto params = detail::params_of(up);
    detail::jitter(params, rng);
    return gradcheck(n, detail::cat({h, flow}, params), [=] { return up.upsample(h, flow); }, o);
  });
  add_case("hidden_net", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    HiddenNet<double> net(5, 8, rng);
    auto ctx = leaf({5, 4, 4}, rng), flow = leaf({2, 4, 4}, rng);
    auto params = detail::params_of(net);
    return gradcheck(n, detail::cat({ctx, flow}, params), [=] { return net.forward(ctx, flow); }, o);
  });
  add_case("nat_block", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    NATBlock<double> block(8, 4, 3, true, rng);
    auto params = detail::params_of(block);
    detail::jitter(params, rng);
    auto x = leaf({8, 5, 5}, rng);
    return gradcheck(n, detail::cat({x}, params), [=] { return block.forward(x); }, o);
  });
  add_case("tcu_step", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    // Reduced width: 6 feature + 4 image + 2 flow channels, embedding 16.
    TCUStep<double> step(12, 16, 3, 8, 1, true, rng);
    auto params = detail::params_of(step);
    detail::jitter(params, rng);
    auto flow = leaf({2, 4, 4}, rng), feat = leaf({6, 4, 4}, rng), img = leaf({4, 4, 4}, rng);
    return gradcheck(n, detail::cat({flow, feat, img}, params), [=] {
      const auto out = step.forward(flow, feat, img);
      return concat<double>({out.flow, out.features}, 0);
    }, o);
  });
  add_case("tcu", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    UpsamplerConfig cfg;
    cfg.mask_sizes = {3, 3, 3};
    cfg.dims = {16, 8, 4};
    cfg.head_dim = 4;
    cfg.nat_blocks = 1;
    cfg.hidden_channels = 6;
    cfg.context_channels = {3, 4, 5};
    TCU<double> tcu(cfg, rng);
    auto params = detail::params_of(tcu);
    detail::jitter(params, rng);
    auto flow = leaf({2, 3, 3}, rng), h = leaf({6, 3, 3}, rng);
    ContextFeatures<double> feats{leaf({3, 12, 12}, rng), leaf({4, 6, 6}, rng), leaf({5, 3, 3}, rng)};
    return gradcheck(n, detail::cat({flow, h, feats.half, feats.quarter, feats.eighth}, params),
                     [=] { return tcu.upsample(flow, h, feats); }, o);
  });
  add_case("context_encoder", [](const std::string& n, Rng& rng, const GradcheckOptions& o) {
    ContextEncoder<double> enc({64, 96, 128}, rng);
    auto params = detail::params_of(enc);
    auto image = Tensor<double>::uniform({3, 16, 16}, rng, 0.0, 1.0);
    image.requires_grad_();
    auto opt = o;
    opt.max_coords = std::min<std::int64_t>(o.max_coords, 12);
    return gradcheck(n, detail::cat({image}, params), [=] {
      const auto f = enc.encode(image);
      return concat<double>({detail::flat(f.half), detail::flat(f.quarter),
                             detail::flat(f.eighth)},
                            0);
    }, opt);
  });
  return cases;
}

inline std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (const auto& c : gradcheck_suite()) names.push_back(c.name);
  return names;
}

/// Runs all cases, or only `only` when non-empty (ConfigError if unknown).
inline std::vector<GradcheckResult> run_gradchecks(const std::string& only = {},
                                                   const GradcheckOptions& opt = {}) {
  std::vector<GradcheckResult> results;
  for (const auto& c : gradcheck_suite()) {
    if (!only.empty() && c.name != only) continue;
    results.push_back(c.run(opt));
  }
  if (!only.empty() && results.empty()) throw ConfigError("gradcheck: unknown op '" + only + "'");
  return results;
}

}  // namespace flowup
