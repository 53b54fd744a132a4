#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "viscop/layers.hpp"

namespace viscop {

struct ConnectorConfig {
  std::size_t d_v = 32;
  std::size_t d_lm = 64;
  std::size_t downsample = 2;
  std::size_t hidden = 64;

  void validate(std::size_t tokens_per_frame) const;
};

/// Two-layer GELU MLP applied row-wise: gelu(x W1 + b1) W2 + b2.
struct MlpConnector {
  Tensor w1, b1, w2, b2;

  static MlpConnector create(Rng& rng, const ConnectorConfig& cfg);
  [[nodiscard]] Tensor forward(const Tensor& x) const;
  [[nodiscard]] MlpConnector clone() const;
  void collect(std::vector<NamedParameter>& out, const std::string& prefix, ParamGroup group) const;
};

/// Non-overlapping s x s mean pooling over each frame's sqrt(N) x sqrt(N) grid.
/// Output stays frame-major, raster order within a frame.
Tensor spatial_downsample(const Tensor& tokens, std::size_t frames, std::size_t s);

/// E = C(pooled X^L)
Tensor project_visual(const Tensor& pooled, const MlpConnector& c);
/// Z = C_probe(P^L)
Tensor project_probes(const Tensor& probes, const MlpConnector& c_probe);

}  // namespace viscop
