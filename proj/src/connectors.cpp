#include "viscop/connectors.hpp"

#include <cmath>

#include "viscop/errors.hpp"

namespace viscop {

namespace {
std::size_t exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}
}  // namespace

void ConnectorConfig::validate(std::size_t tokens_per_frame) const {
  const std::size_t side = exact_sqrt(tokens_per_frame);
  if (side == 0) throw ConfigError("connector: " + std::to_string(tokens_per_frame) + " tokens are not a square grid");
  if (downsample == 0 || side % downsample != 0) {
    throw ConfigError("connector: grid side " + std::to_string(side) + " not divisible by downsample factor " +
                      std::to_string(downsample));
  }
  if (d_v == 0 || d_lm == 0 || hidden == 0) throw ConfigError("connector: dimensions must be positive");
}

MlpConnector MlpConnector::create(Rng& rng, const ConnectorConfig& cfg) {
  MlpConnector c;
  c.w1 = randn(rng, {cfg.d_v, cfg.hidden}, 1.0 / std::sqrt(static_cast<double>(cfg.d_v)));
  c.b1 = Tensor::zeros({cfg.hidden});
  c.w2 = randn(rng, {cfg.hidden, cfg.d_lm}, 1.0 / std::sqrt(static_cast<double>(cfg.hidden)));
  c.b2 = Tensor::zeros({cfg.d_lm});
  return c;
}

Tensor MlpConnector::forward(const Tensor& x) const {
  if (x.cols() != w1.shape()[0]) {
    throw DimensionError("connector: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w1.shape()));
  }
  return linear(gelu(linear(x, w1, b1)), w2, b2);
}

MlpConnector MlpConnector::clone() const { return {w1.clone(), b1.clone(), w2.clone(), b2.clone()}; }

void MlpConnector::collect(std::vector<NamedParameter>& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + "w1", w1, group, 0});
  out.push_back({prefix + "b1", b1, group, 0});
  out.push_back({prefix + "w2", w2, group, 0});
  out.push_back({prefix + "b2", b2, group, 0});
}

Tensor spatial_downsample(const Tensor& tokens, std::size_t frames, std::size_t s) {
  if (frames == 0 || tokens.rows() % frames != 0) {
    throw DimensionError("spatial_downsample: " + std::to_string(tokens.rows()) + " rows do not split into " +
                         std::to_string(frames) + " frames");
  }
  const std::size_t n = tokens.rows() / frames;
  const std::size_t side = exact_sqrt(n);
  if (side == 0 || s == 0 || side % s != 0) {
    throw ConfigError("spatial_downsample: grid of " + std::to_string(n) + " tokens cannot be pooled by " +
                      std::to_string(s));
  }
  if (s == 1) return tokens;
  const std::size_t out_side = side / s, n_out = out_side * out_side;
  // Pooling as a constant [T*N~ x T*N] averaging matrix keeps the gradient rule that of matmul.
  std::vector<double> pool(frames * n_out * frames * n, 0.0);
  const double w = 1.0 / static_cast<double>(s * s);
  const std::size_t total_in = frames * n;
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t oy = 0; oy < out_side; ++oy)
      for (std::size_t ox = 0; ox < out_side; ++ox) {
        const std::size_t row = t * n_out + oy * out_side + ox;
        for (std::size_t dy = 0; dy < s; ++dy)
          for (std::size_t dx = 0; dx < s; ++dx) {
            const std::size_t col = t * n + (oy * s + dy) * side + ox * s + dx;
            pool[row * total_in + col] = w;
          }
      }
  return matmul(Tensor({frames * n_out, total_in}, std::move(pool)), tokens);
}

Tensor project_visual(const Tensor& pooled, const MlpConnector& c) { return c.forward(pooled); }

Tensor project_probes(const Tensor& probes, const MlpConnector& c_probe) { return c_probe.forward(probes); }

}  // namespace viscop
