#pragma once

// Adaptation metrics (target/source deltas) and the analysis toolkit:
// attention rollout, probe attention maps, paired-embedding statistics.

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "viscop/model.hpp"
#include "viscop/tensor.hpp"

namespace viscop {

struct BenchmarkScore {
  std::string name;
  std::string split;  // "target" or "source"
  double base_acc = 0.0;    // percentage points
  double expert_acc = 0.0;  // percentage points
};

struct AdaptationReport {
  std::vector<BenchmarkScore> benchmarks;
  double acc_target_base = 0.0;
  double acc_target_expert = 0.0;
  double acc_source_base = 0.0;
  double acc_source_expert = 0.0;
  double delta_target = 0.0;
  double delta_source = 0.0;
};

/// Accuracies are in percentage points. Domain accuracy is the plain mean over
/// that domain's benchmarks. Base and expert must carry the same keys, and every
/// target/source name must be among them; otherwise ContractError.
AdaptationReport delta_metrics(const std::map<std::string, double>& base, const std::map<std::string, double>& expert,
                               const std::vector<std::string>& target, const std::vector<std::string>& source);

double mean_of(const std::vector<double>& values);

/// prod_l normalize(A_l + I), later layers on the left. Each A_l must be square
/// and of the same size.
Tensor attention_rollout(const std::vector<Tensor>& layers);

/// Per-frame rollout of the encoder's self-attention (heads averaged) for one video.
std::vector<Tensor> encoder_rollout(const VisionEncoder& encoder, const Video& video);

struct ProbeAttentionMap {
  std::size_t layer = 0;
  std::size_t frames = 0;
  std::size_t grid_side = 0;
  /// [T x N]: mean over probes and heads; all entries sum to 1.
  Tensor weights;
};

/// Maps from a recorded probe trace (per layer, per head [M x T*N]).
std::vector<ProbeAttentionMap> probe_attention_maps(const ProbeTrace& trace, std::size_t frames,
                                                    std::size_t tokens_per_frame);
/// Runs the probe pathway on one video. Throws ContractError when the model has no probes.
std::vector<ProbeAttentionMap> probe_attention_maps(const VlmModel& model, const Video& video);

struct GaussianSummary {
  std::vector<double> mean;
  Tensor cov;  // [d x d], unbiased

  [[nodiscard]] std::size_t dim() const { return mean.size(); }
};

/// Mean and unbiased covariance of the rows of x. Needs at least 2 rows.
GaussianSummary fit_gaussian(const Tensor& x);

/// Bhattacharyya distance between two Gaussians. A covariance that is not
/// positive definite is regularized by eps*I with eps = 1e-6 * trace / d;
/// if that still fails, NumericError.
double bhattacharyya(const GaussianSummary& a, const GaussianSummary& b);

struct PairedStats {
  double bd = 0.0;   // Bhattacharyya distance of the fitted Gaussians
  double psd = 0.0;  // mean Euclidean distance between paired rows
  std::size_t pairs = 0;
};

/// Rows are matched by pair id; the two id lists must be permutations of each
/// other without repeats, and n >= 3.
PairedStats paired_embedding_stats(const Tensor& source, const Tensor& target,
                                   const std::vector<std::size_t>& source_ids,
                                   const std::vector<std::size_t>& target_ids);

enum class EmbeddingSource {
  visual,  // mean over X^L tokens
  probes,  // mean over P^L rows
};
const char* to_string(EmbeddingSource s);
EmbeddingSource embedding_source_from_string(const std::string& s);

/// Mean-pooled embedding of one video, in the encoder width d_v.
std::vector<double> pooled_embedding(const VlmModel& model, const Video& video, EmbeddingSource source);

struct EmbeddingRow {
  std::size_t pair_id = 0;
  std::string domain;
  std::vector<double> values;
};

/// CSV with header `pair_id,domain,dim_0,...,dim_{d-1}`; values printed with 17 significant digits.
void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows);
std::vector<EmbeddingRow> read_embeddings_csv(const std::filesystem::path& path);

/// Splits rows by domain into aligned (source, target) matrices and computes BD/PSD.
PairedStats paired_stats_from_rows(const std::vector<EmbeddingRow>& rows, const std::string& source_domain,
                                   const std::string& target_domain);

}  // namespace viscop
