#include "viscop/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "viscop/errors.hpp"

namespace viscop {

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!GradTape::active()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor finish(Shape shape, std::vector<double> data, bool track, GradTape::BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data), track);
  if (track) GradTape::active()->record(out, std::move(fn));
  return out;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      const double* bt = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T, via an explicit transpose so the inner
// loop is an axpy rather than a reduction.
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::vector<double> bt(n * k);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + t] = b[t * n + j];
  gemm_nn(g, bt.data(), c, m, n, k);
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      double* ct = c + t * n;
      for (std::size_t j = 0; j < n; ++j) ct[j] += av * gi[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  const bool track = tracking({&a, &b});
  return finish({m, n}, std::move(out), track, [a, b, m, k, n](std::span<const double> g) {
    if (a.requires_grad()) {
      std::vector<double> ga(m * k, 0.0);
      gemm_nt(g.data(), b.data().data(), ga.data(), m, k, n);
      a.accumulate_grad(ga);
    }
    if (b.requires_grad()) {
      std::vector<double> gb(k * n, 0.0);
      gemm_tn(a.data().data(), g.data(), gb.data(), m, k, n);
      b.accumulate_grad(gb);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  return finish({n, m}, std::move(out), tracking({&a}), [a, m, n](std::span<const double> g) {
    std::vector<double> ga(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
    a.accumulate_grad(ga);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return finish(a.shape(), std::move(out), tracking({&a, &b}), [a, b](std::span<const double> g) {
    a.accumulate_grad(g);
    b.accumulate_grad(g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return finish(a.shape(), std::move(out), tracking({&a, &b}), [a, b](std::span<const double> g) {
    a.accumulate_grad(g);
    if (b.requires_grad()) {
      std::vector<double> gb(g.begin(), g.end());
      for (auto& v : gb) v = -v;
      b.accumulate_grad(gb);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return finish(a.shape(), std::move(out), tracking({&a, &b}), [a, b](std::span<const double> g) {
    auto ad = a.data(), bd = b.data();
    if (a.requires_grad()) {
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bd[i];
      a.accumulate_grad(ga);
    }
    if (b.requires_grad()) {
      std::vector<double> gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * ad[i];
      b.accumulate_grad(gb);
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return finish(a.shape(), std::move(out), tracking({&a}), [a, factor](std::span<const double> g) {
    std::vector<double> ga(g.begin(), g.end());
    for (auto& v : ga) v *= factor;
    a.accumulate_grad(ga);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.numel() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
  }
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bd[j];
  return finish(x.shape(), std::move(out), tracking({&x, &bias}),
                [x, bias, r, c](std::span<const double> g) {
                  x.accumulate_grad(g);
                  if (bias.requires_grad()) {
                    std::vector<double> gb(c, 0.0);
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                    bias.accumulate_grad(gb);
                  }
                });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
  }
  return finish(x.shape(), std::move(out), tracking({&x}), [x](std::span<const double> g) {
    auto xd = x.data();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xd[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      gx[i] = g[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
    }
    x.accumulate_grad(gx);
  });
}

Tensor softmax_rows(const Tensor& x, AttentionMask mask) {
  require_matrix(x, "softmax_rows");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (mask.kind == AttentionMask::Kind::block_diagonal && mask.block == 0) {
    throw DimensionError("softmax_rows: block mask needs a positive block size");
  }
  auto xd = x.data();
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      const double v = xd[i * c + j];
      if (std::isnan(v)) throw NumericError("softmax_rows: NaN input at row " + std::to_string(i));
      if (mask.allows(i, j)) mx = std::max(mx, v);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw NumericError("softmax_rows: row " + std::to_string(i) + " has no admissible entry");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!mask.allows(i, j)) continue;
      const double e = std::exp(xd[i * c + j] - mx);
      out[i * c + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= total;
  }
  const bool track = tracking({&x});
  Tensor y(Shape{r, c}, std::move(out), track);
  if (track) {
    // Capture y's values, not y itself, to avoid a self-referencing handle.
    std::vector<double> yv(y.data().begin(), y.data().end());
    GradTape::active()->record(y, [x, yv = std::move(yv), r, c](std::span<const double> g) {
      std::vector<double> gx(r * c);
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += yv[i * c + j] * g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = yv[i * c + j] * (g[i * c + j] - dot);
      }
      x.accumulate_grad(gx);
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t d = x.cols();
  if (gain.rank() != 1 || gain.numel() != d || bias.rank() != 1 || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t r = x.rows();
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  std::vector<double> xhat(r * d), inv_std(r), out(r * d);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xd[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xd[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xd[i * d + j] - mu) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gd[j] + bd[j];
    }
  }
  const bool track = tracking({&x, &gain, &bias});
  return finish(x.shape(), std::move(out), track,
                [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), r,
                 d](std::span<const double> g) {
                  auto gd = gain.data();
                  if (x.requires_grad()) {
                    std::vector<double> gx(r * d);
                    for (std::size_t i = 0; i < r; ++i) {
                      double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * gd[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[i * d + j];
                      }
                      mean_dxh /= static_cast<double>(d);
                      mean_dxh_xh /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * gd[j];
                        gx[i * d + j] = inv_std[i] * (dxh - mean_dxh - xhat[i * d + j] * mean_dxh_xh);
                      }
                    }
                    x.accumulate_grad(gx);
                  }
                  if (gain.requires_grad() || bias.requires_grad()) {
                    std::vector<double> gg(d, 0.0), gb(d, 0.0);
                    for (std::size_t i = 0; i < r; ++i) {
                      for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += g[i * d + j] * xhat[i * d + j];
                        gb[j] += g[i * d + j];
                      }
                    }
                    gain.accumulate_grad(gg);
                    bias.accumulate_grad(gb);
                  }
                });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                     const std::vector<bool>& ignore) {
  require_matrix(logits, "cross_entropy");
  const std::size_t len = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != len || ignore.size() != len) {
    throw DimensionError("cross_entropy: " + std::to_string(len) + " logit rows but " +
                         std::to_string(targets.size()) + " targets / " + std::to_string(ignore.size()) +
                         " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < len; ++i) {
    if (ignore[i]) continue;
    if (targets[i] >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " outside vocabulary of " +
                           std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw DegenerateBatchError("cross_entropy: every position is masked");

  auto ld = logits.data();
  std::vector<double> probs(len * vocab, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    if (ignore[i]) continue;
    const double* row = ld.data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[i]];
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(row[j] - lse);
  }
  const double n = static_cast<double>(count);
  return finish({1}, {total / n}, tracking({&logits}),
                [logits, probs = std::move(probs), targets, ignore, len, vocab, n](std::span<const double> g) {
                  std::vector<double> gl(len * vocab, 0.0);
                  const double s = g[0] / n;
                  for (std::size_t i = 0; i < len; ++i) {
                    if (ignore[i]) continue;
                    for (std::size_t j = 0; j < vocab; ++j) gl[i * vocab + j] = s * probs[i * vocab + j];
                    gl[i * vocab + targets[i]] -= s;
                  }
                  logits.accumulate_grad(gl);
                });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  const std::size_t n = x.numel();
  return finish({1}, {total}, tracking({&x}), [x, n](std::span<const double> g) {
    x.accumulate_grad(std::vector<double>(n, g[0]));
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  auto xd = x.data();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += xd[i * c + j];
  const double inv = 1.0 / static_cast<double>(r);
  for (auto& v : out) v *= inv;
  return finish({1, c}, std::move(out), tracking({&x}), [x, r, c, inv](std::span<const double> g) {
    std::vector<double> gx(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = g[j] * inv;
    x.accumulate_grad(gx);
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (count == 0 || begin + count > r) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + shape_str(x.shape()));
  }
  auto xd = x.data();
  std::vector<double> out(xd.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          xd.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return finish({count, c}, std::move(out), tracking({&x}), [x, begin, count, r, c](std::span<const double> g) {
    std::vector<double> gx(r * c, 0.0);
    std::copy(g.begin(), g.end(), gx.begin() + static_cast<std::ptrdiff_t>(begin * c));
    (void)count;
    x.accumulate_grad(gx);
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (count == 0 || begin + count > c) {
    throw DimensionError("slice_cols: cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + shape_str(x.shape()));
  }
  auto xd = x.data();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = xd[i * c + begin + j];
  return finish({r, count}, std::move(out), tracking({&x}), [x, begin, count, r, c](std::span<const double> g) {
    std::vector<double> gx(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * c + begin + j] = g[i * count + j];
    x.accumulate_grad(gx);
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    r += p.rows();
    track = track || (GradTape::active() && p.requires_grad());
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return finish({r, c}, std::move(out), track, [parts](std::span<const double> g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.numel();
      p.accumulate_grad(g.subspan(offset, n));
      offset += n;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != r) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    c += p.cols();
    track = track || (GradTape::active() && p.requires_grad());
  }
  std::vector<double> out(r * c);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    auto pd = p.data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * c + offset + j] = pd[i * pc + j];
    offset += pc;
  }
  return finish({r, c}, std::move(out), track, [parts, r, c](std::span<const double> g) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t pc = p.cols();
      if (p.requires_grad()) {
        std::vector<double> gp(r * pc);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] = g[i * c + offset + j];
        p.accumulate_grad(gp);
      }
      offset += pc;
    }
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  require_matrix(table, "gather_rows");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  auto td = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           shape_str(table.shape()));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return finish({ids.size(), d}, std::move(out), tracking({&table}), [table, ids, v, d](std::span<const double> g) {
    std::vector<double> gt(v * d, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
    table.accumulate_grad(gt);
  });
}

}  // namespace viscop
