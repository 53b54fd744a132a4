#include "viscop/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "viscop/errors.hpp"

namespace viscop {

double mean_of(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("mean_of: empty list");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

AdaptationReport delta_metrics(const std::map<std::string, double>& base, const std::map<std::string, double>& expert,
                               const std::vector<std::string>& target, const std::vector<std::string>& source) {
  for (const auto& [k, v] : base) {
    if (!expert.count(k)) throw ContractError("delta_metrics: benchmark '" + k + "' missing from expert results");
  }
  for (const auto& [k, v] : expert) {
    if (!base.count(k)) throw ContractError("delta_metrics: benchmark '" + k + "' missing from base results");
  }
  if (target.empty() || source.empty()) throw ContractError("delta_metrics: target and source sets must be non-empty");

  AdaptationReport r;
  std::vector<double> tb, te, sb, se;
  auto add = [&](const std::string& name, const char* split, std::vector<double>& b, std::vector<double>& e) {
    auto bi = base.find(name);
    if (bi == base.end()) throw ContractError("delta_metrics: unknown benchmark '" + name + "'");
    const double be = bi->second, ex = expert.at(name);
    r.benchmarks.push_back({name, split, be, ex});
    b.push_back(be);
    e.push_back(ex);
  };
  for (const auto& n : target) add(n, "target", tb, te);
  for (const auto& n : source) add(n, "source", sb, se);
  r.acc_target_base = mean_of(tb);
  r.acc_target_expert = mean_of(te);
  r.acc_source_base = mean_of(sb);
  r.acc_source_expert = mean_of(se);
  r.delta_target = r.acc_target_expert - r.acc_target_base;
  r.delta_source = r.acc_source_expert - r.acc_source_base;
  return r;
}

Tensor attention_rollout(const std::vector<Tensor>& layers) {
  if (layers.empty()) throw ContractError("attention_rollout: no layers");
  const std::size_t n = layers.front().rank() == 2 ? layers.front().shape()[0] : 0;
  std::vector<double> roll(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) roll[i * n + i] = 1.0;
  for (const auto& a : layers) {
    if (a.rank() != 2 || a.shape()[0] != a.shape()[1]) {
      throw DimensionError("attention_rollout: attention matrix " + shape_str(a.shape()) + " is not square");
    }
    if (a.shape()[0] != n) throw DimensionError("attention_rollout: layers disagree on token count");
    const auto d = a.data();
    std::vector<double> step(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        step[i * n + j] = d[i * n + j] + (i == j ? 1.0 : 0.0);
        s += step[i * n + j];
      }
      for (std::size_t j = 0; j < n; ++j) step[i * n + j] /= s;
    }
    std::vector<double> next(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        const double v = step[i * n + k];
        for (std::size_t j = 0; j < n; ++j) next[i * n + j] += v * roll[k * n + j];
      }
    roll.swap(next);
  }
  return Tensor({n, n}, std::move(roll));
}

std::vector<Tensor> encoder_rollout(const VisionEncoder& encoder, const Video& video) {
  std::vector<std::vector<Tensor>> attn;
  const auto acts = encoder.encode(video, &attn);
  const std::size_t T = acts.frames, N = acts.tokens_per_frame, TN = T * N;
  std::vector<Tensor> out;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<Tensor> per_layer;
    for (const auto& heads : attn) {
      std::vector<double> m(N * N, 0.0);
      for (const auto& h : heads) {
        const auto d = h.data();
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < N; ++j) m[i * N + j] += d[(t * N + i) * TN + t * N + j];
      }
      for (auto& v : m) v /= static_cast<double>(heads.size());
      per_layer.emplace_back(Shape{N, N}, std::move(m));
    }
    out.push_back(attention_rollout(per_layer));
  }
  return out;
}

std::vector<ProbeAttentionMap> probe_attention_maps(const ProbeTrace& trace, std::size_t frames,
                                                    std::size_t tokens_per_frame) {
  const std::size_t TN = frames * tokens_per_frame;
  std::size_t side = 0;
  while ((side + 1) * (side + 1) <= tokens_per_frame) ++side;
  std::vector<ProbeAttentionMap> out;
  for (std::size_t li = 0; li < trace.layers.size(); ++li) {
    const auto& heads = trace.attention.at(li);
    if (heads.empty()) throw ContractError("probe_attention_maps: layer without attention heads");
    const std::size_t M = heads.front().rows();
    if (M == 0) throw ContractError("probe_attention_maps: no probes");
    std::vector<double> w(TN, 0.0);
    for (const auto& h : heads) {
      if (h.cols() != TN) throw DimensionError("probe_attention_maps: attention width does not match T*N");
      const auto d = h.data();
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t j = 0; j < TN; ++j) w[j] += d[m * TN + j];
    }
    const double norm = static_cast<double>(M * heads.size());
    for (auto& v : w) v /= norm;
    out.push_back({trace.layers[li], frames, side, Tensor({frames, tokens_per_frame}, std::move(w))});
  }
  return out;
}

std::vector<ProbeAttentionMap> probe_attention_maps(const VlmModel& model, const Video& video) {
  if (!model.viscop()) throw ContractError("probe_attention_maps: model has no visual probes");
  if (model.viscop()->bank.count() == 0) throw ContractError("probe_attention_maps: no probes");
  const auto acts = model.encode(video);
  ProbeTrace trace;
  (void)model.probe_outputs(acts, &trace);
  return probe_attention_maps(trace, acts.frames, acts.tokens_per_frame);
}

GaussianSummary fit_gaussian(const Tensor& x) {
  if (x.rank() != 2 || x.shape()[0] < 2) throw DegenerateBatchError("fit_gaussian: need at least 2 rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  const auto v = x.data();
  GaussianSummary g;
  g.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) g.mean[j] += v[i * d + j];
  for (auto& m : g.mean) m /= static_cast<double>(n);
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double da = v[i * d + a] - g.mean[a];
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += da * (v[i * d + b] - g.mean[b]);
    }
  for (auto& c : cov) c /= static_cast<double>(n - 1);
  g.cov = Tensor({d, d}, std::move(cov));
  return g;
}

namespace {

/// Lower Cholesky factor, or nothing when the matrix is not positive definite.
std::optional<std::vector<double>> cholesky(const std::vector<double>& a, std::size_t d) {
  std::vector<double> l(d * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double s = a[j * d + j];
    for (std::size_t k = 0; k < j; ++k) s -= l[j * d + k] * l[j * d + k];
    if (!(s > 0.0) || !std::isfinite(s)) return std::nullopt;
    l[j * d + j] = std::sqrt(s);
    for (std::size_t i = j + 1; i < d; ++i) {
      double t = a[i * d + j];
      for (std::size_t k = 0; k < j; ++k) t -= l[i * d + k] * l[j * d + k];
      l[i * d + j] = t / l[j * d + j];
    }
  }
  return l;
}

std::vector<double> factor(std::vector<double> a, std::size_t d, const char* what) {
  if (auto l = cholesky(a, d)) return *l;
  double tr = 0.0;
  for (std::size_t i = 0; i < d; ++i) tr += a[i * d + i];
  const double eps = 1e-6 * tr / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) a[i * d + i] += eps;
  if (auto l = cholesky(a, d)) return *l;
  throw NumericError(std::string("bhattacharyya: ") + what + " covariance is singular after regularization");
}

double log_det(const std::vector<double>& l, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += std::log(l[i * d + i]);
  return 2.0 * s;
}

}  // namespace

double bhattacharyya(const GaussianSummary& a, const GaussianSummary& b) {
  const std::size_t d = a.dim();
  if (d == 0 || b.dim() != d || a.cov.numel() != d * d || b.cov.numel() != d * d) {
    throw DimensionError("bhattacharyya: summaries disagree on dimension");
  }
  const auto ca = a.cov.data(), cb = b.cov.data();
  std::vector<double> sa(ca.begin(), ca.end()), sb(cb.begin(), cb.end()), avg(d * d);
  for (std::size_t i = 0; i < d * d; ++i) avg[i] = 0.5 * (sa[i] + sb[i]);
  const auto la = factor(sa, d, "first");
  const auto lb = factor(sb, d, "second");
  const auto lm = factor(avg, d, "pooled");

  // Mahalanobis term via forward substitution: |L^-1 (mu_a - mu_b)|^2.
  std::vector<double> z(d);
  for (std::size_t i = 0; i < d; ++i) {
    double t = a.mean[i] - b.mean[i];
    for (std::size_t k = 0; k < i; ++k) t -= lm[i * d + k] * z[k];
    z[i] = t / lm[i * d + i];
  }
  double maha = 0.0;
  for (double v : z) maha += v * v;
  const double bd = 0.125 * maha + 0.5 * (log_det(lm, d) - 0.5 * (log_det(la, d) + log_det(lb, d)));
  if (!std::isfinite(bd)) throw NumericError("bhattacharyya: non-finite result");
  return std::max(0.0, bd);
}

PairedStats paired_embedding_stats(const Tensor& source, const Tensor& target,
                                   const std::vector<std::size_t>& source_ids,
                                   const std::vector<std::size_t>& target_ids) {
  if (source.rank() != 2 || target.rank() != 2 || source.shape() != target.shape()) {
    throw DimensionError("paired_embedding_stats: source " + shape_str(source.shape()) + " and target " +
                         shape_str(target.shape()) + " must be equal-shape matrices");
  }
  const std::size_t n = source.shape()[0], d = source.shape()[1];
  if (n < 3) throw DegenerateBatchError("paired_embedding_stats: need at least 3 pairs");
  if (source_ids.size() != n || target_ids.size() != n) {
    throw ContractError("paired_embedding_stats: one pair id per row required");
  }
  std::map<std::size_t, std::size_t> where;
  for (std::size_t i = 0; i < n; ++i) {
    if (!where.emplace(target_ids[i], i).second) throw ContractError("paired_embedding_stats: repeated target pair id");
  }
  std::set<std::size_t> seen;
  const auto s = source.data(), t = target.data();
  std::vector<double> aligned(n * d);
  double dist = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!seen.insert(source_ids[i]).second) throw ContractError("paired_embedding_stats: repeated source pair id");
    auto it = where.find(source_ids[i]);
    if (it == where.end()) {
      throw ContractError("paired_embedding_stats: pair id " + std::to_string(source_ids[i]) + " has no target twin");
    }
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      aligned[i * d + j] = t[it->second * d + j];
      const double diff = s[i * d + j] - t[it->second * d + j];
      sq += diff * diff;
    }
    dist += std::sqrt(sq);
  }
  PairedStats r;
  r.pairs = n;
  r.psd = dist / static_cast<double>(n);
  r.bd = bhattacharyya(fit_gaussian(source), fit_gaussian(Tensor({n, d}, std::move(aligned))));
  return r;
}

const char* to_string(EmbeddingSource s) { return s == EmbeddingSource::visual ? "visual" : "probes"; }

EmbeddingSource embedding_source_from_string(const std::string& s) {
  if (s == "visual") return EmbeddingSource::visual;
  if (s == "probes") return EmbeddingSource::probes;
  throw ConfigError("unknown embedding source '" + s + "' (expected visual or probes)");
}

std::vector<double> pooled_embedding(const VlmModel& model, const Video& video, EmbeddingSource source) {
  const auto acts = model.encode(video);
  Tensor rows;
  if (source == EmbeddingSource::visual) {
    rows = acts.last();
  } else {
    if (!model.viscop()) throw ContractError("pooled_embedding: probe embeddings need a model with visual probes");
    rows = model.probe_outputs(acts);
  }
  const auto m = mean_rows(rows).data();
  return {m.begin(), m.end()};
}

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows) {
  if (rows.empty()) throw ContractError("write_embeddings_csv: no rows");
  const std::size_t d = rows.front().values.size();
  std::ostringstream os;
  os << "pair_id,domain";
  for (std::size_t j = 0; j < d; ++j) os << ",dim_" << j;
  os << "\n";
  char buf[40];
  for (const auto& r : rows) {
    if (r.values.size() != d) throw DimensionError("write_embeddings_csv: ragged rows");
    if (r.domain.find_first_of(",\n\"") != std::string::npos) {
      throw ContractError("write_embeddings_csv: domain '" + r.domain + "' needs quoting");
    }
    os << r.pair_id << "," << r.domain;
    for (double v : r.values) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << "," << buf;
    }
    os << "\n";
  }
  write_text_file(path, os.str());
}

std::vector<EmbeddingRow> read_embeddings_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind("pair_id,domain", 0) != 0) {
    throw ConfigError(path.string() + ":1: expected header starting with pair_id,domain");
  }
  std::size_t d = 0;
  for (char c : line) d += c == ',';
  d -= 1;
  std::vector<EmbeddingRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != d + 2) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(d + 2) +
                        " fields, got " + std::to_string(cells.size()));
    }
    EmbeddingRow r;
    try {
      r.pair_id = std::stoull(cells[0]);
      r.domain = cells[1];
      for (std::size_t j = 0; j < d; ++j) r.values.push_back(std::stod(cells[j + 2]));
    } catch (const std::logic_error&) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

PairedStats paired_stats_from_rows(const std::vector<EmbeddingRow>& rows, const std::string& source_domain,
                                   const std::string& target_domain) {
  std::vector<double> s, t;
  std::vector<std::size_t> sid, tid;
  std::size_t d = 0;
  for (const auto& r : rows) {
    d = r.values.size();
    if (r.domain == source_domain) {
      s.insert(s.end(), r.values.begin(), r.values.end());
      sid.push_back(r.pair_id);
    } else if (r.domain == target_domain) {
      t.insert(t.end(), r.values.begin(), r.values.end());
      tid.push_back(r.pair_id);
    }
  }
  if (sid.size() != tid.size()) throw ContractError("paired_stats_from_rows: domains have different row counts");
  return paired_embedding_stats(Tensor({sid.size(), d}, std::move(s)), Tensor({tid.size(), d}, std::move(t)), sid,
                                tid);
}

}  // namespace viscop
