#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "viscop/model.hpp"
#include "viscop/ops.hpp"
#include "viscop/tensor.hpp"

namespace viscop::testing {

/// Relative error with a floor on the denominator so near-zero gradients are
/// compared in absolute terms.
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Max relative error between tape gradients of f() and central differences
/// with step h, over every entry of every input.
inline double gradient_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  for (auto t : inputs) {
    t.clear_grad();
    t.set_requires_grad(true);
  }
  {
    GradTape tape;
    TapeScope scope(tape);
    tape.backward(f());
  }
  double worst = 0.0;
  for (auto t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = f().item();
      w[i] = orig - h;
      const double down = f().item();
      w[i] = orig;
      worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * h)));
    }
    t.clear_grad();
  }
  return worst;
}

/// Weighted sum that turns a matrix output into a scalar with a generic gradient.
inline Tensor probe_sum(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, randn(rng, y.shape(), 1.0)));
}

/// 2-layer toy configuration used by gradient and gating checks.
inline VlmConfig toy_config(std::size_t vocab = 12) {
  VlmConfig c;
  c.encoder.image_side = 8;
  c.encoder.patch_side = 4;
  c.encoder.d_v = 8;
  c.encoder.layers = 2;
  c.encoder.heads = 2;
  c.encoder.mlp_ratio = 2;
  c.connector.d_v = 8;
  c.connector.d_lm = 8;
  c.connector.hidden = 8;
  c.connector.downsample = 1;
  c.decoder.vocab = vocab;
  c.decoder.d_lm = 8;
  c.decoder.layers = 2;
  c.decoder.heads = 2;
  c.decoder.mlp_ratio = 2;
  c.decoder.context = 32;
  c.decoder.max_visual = 16;
  c.decoder.max_text = 12;
  return c;
}

inline Video random_video(Rng& rng, std::size_t frames, std::size_t side, std::size_t channels = 3) {
  Video v(frames, channels, side, side);
  for (auto& p : v.pixels) p = rng.uniform();
  return v;
}

}  // namespace viscop::testing
