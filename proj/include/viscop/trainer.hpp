#pragma once

// Adaptation strategies as hard parameter gates, plus the Adam training loop
// and greedy-decode evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "viscop/model.hpp"
#include "viscop/synthetic.hpp"

namespace viscop {

enum class TrainGroup { vl_c, ve_full, ve_lora, ve_last4, viscop, llm_full, llm_lora };

const char* to_string(TrainGroup group);
/// Accepts the display names ("VL-C", "VE-full", ...) and snake_case; unknown names throw ConfigError.
TrainGroup train_group_from_string(const std::string& name);

struct AdaptationStrategy {
  std::string name;
  std::set<TrainGroup> groups;
  /// Multiplies the group's learning rate; absent means 1.
  std::map<TrainGroup, double> lr_multiplier;
  /// Used when groups contains viscop.
  ProbeOptions probes;
  std::size_t llm_lora_rank = 4;
  double llm_lora_alpha = 8.0;
  std::size_t ve_lora_rank = 4;
  double ve_lora_alpha = 8.0;
  std::size_t last_k = 4;

  [[nodiscard]] bool has(TrainGroup g) const { return groups.count(g) != 0; }
};

/// The ten named presets, in display order.
const std::vector<std::string>& strategy_names();
/// Preset by name for an encoder with `encoder_layers` layers. Unknown names throw ConfigError.
AdaptationStrategy strategy_preset(const std::string& name, std::size_t encoder_layers);
/// All groups: what source pretraining of the base model uses.
AdaptationStrategy full_training_strategy();
/// Custom strategy from group names.
AdaptationStrategy make_strategy(const std::string& name, const std::vector<std::string>& group_names,
                                 std::size_t encoder_layers);

/// Whether the strategy trains this parameter. ve_last4 covers encoder layers
/// L-k+1..L only, not the patch embedding.
bool parameter_trainable(const NamedParameter& p, const AdaptationStrategy& s, std::size_t encoder_layers);

struct FrozenRecord {
  std::string name;
  std::string hash;  // FNV-1a over the raw f64 bytes
};

struct GatingAudit {
  std::vector<std::string> trainable;
  std::vector<FrozenRecord> frozen;
  std::size_t trainable_params = 0;
  std::size_t frozen_params = 0;
};

/// Attaches whatever the strategy needs (probes, LoRA adapters), sets
/// requires_grad on exactly the gated parameters and records a hash of every
/// frozen tensor.
GatingAudit apply_strategy(VlmModel& model, const AdaptationStrategy& strategy, std::uint64_t seed);
/// Names of frozen tensors whose bytes changed since the audit.
std::vector<std::string> verify_frozen(const VlmModel& model, const GatingAudit& audit);
std::string tensor_hash(const Tensor& t);

struct TrainConfig {
  double base_lr = 1e-3;
  double ve_lr = 2e-4;  // 0.2 x base
  std::size_t epochs = 3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  /// Linear warmup over this fraction of the run, then cosine decay to zero.
  double warmup_fraction = 0.05;
  bool cosine_decay = true;
  /// Stop after this many optimizer steps; 0 means run every epoch.
  std::size_t max_steps = 0;

  void validate() const;
  /// Learning-rate factor for a step out of `total`.
  [[nodiscard]] double schedule(std::size_t step, std::size_t total) const;
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss per optimizer step
  std::size_t steps = 0;
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

/// Adam over the parameters that currently require grad (see apply_strategy);
/// the strategy only supplies per-group learning-rate multipliers. Encoder
/// activations are cached per sample when no encoder parameter is trainable.
/// A non-finite loss throws NumericAbort with the step index.
TrainResult train(VlmModel& model, const std::vector<const QASample*>& samples, const AdaptationStrategy& strategy,
                  const TrainConfig& cfg, const StepCallback& on_step = {});

/// Train split of every benchmark, in benchmark order.
std::vector<const QASample*> train_samples(const std::vector<Benchmark>& benchmarks);

inline constexpr std::size_t kMaxAnswerTokens = 4;

/// Greedy decode against the gold answer text; exact string match. Empty split throws.
double evaluate_accuracy(const VlmModel& model, const std::vector<QASample>& samples);
inline double evaluate_accuracy(const VlmModel& model, const Benchmark& b) { return evaluate_accuracy(model, b.eval); }

/// Decoded answer text for one sample.
std::string predict_text(const VlmModel& model, const QASample& sample, const Vocabulary& vocab);

}  // namespace viscop
