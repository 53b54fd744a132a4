#pragma once

// Experiment driver shared by the command-line tool, the acceptance suite and
// the Python bindings: flat TOML-like configuration, source pretraining of the
// base model, target adaptation under a strategy, ablation sweeps and reports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "viscop/metrics.hpp"
#include "viscop/trainer.hpp"

namespace viscop {

struct PretrainSettings {
  TrainConfig train;
  /// Optional single-family warm start before the joint run; empty disables it.
  std::string warm_start_family = "region";
  std::size_t warm_start_epochs = 6;
};

struct AdaptSettings {
  TrainConfig train;
  std::size_t llm_lora_rank = 4;
  double llm_lora_alpha = 8.0;
  std::size_t ve_lora_rank = 4;
  double ve_lora_alpha = 8.0;
  std::size_t last_k = 4;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DomainShift task = DomainShift::view;
  std::filesystem::path output;

  SceneOptions scene;
  /// Source samples used to pretrain the base model, split over the source families.
  std::size_t pretrain_samples = 1920;
  /// Samples per domain for the adaptation pair (80% train, 20% eval).
  std::size_t per_domain = 640;

  VlmConfig model;
  /// count, scope, residual, scaling and init; placement comes from probe_placement.
  ProbeOptions probes;
  /// "every", "every:<k>", "last", "none" or a comma list of 1-based layers.
  std::string probe_placement = "every";
  PretrainSettings pretrain;
  AdaptSettings adapt;

  /// Defaults with the fields that have no default (seed, task, output) filled in.
  static ExperimentConfig defaults();
  /// Parses the flat format. `origin` prefixes error messages ("<origin>:<line>: ...").
  static ExperimentConfig parse(const std::string& text, const std::string& origin = "config");
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Canonical text; parse(to_text()) reproduces the config exactly.
  [[nodiscard]] std::string to_text() const;
  /// Content hash of to_text().
  [[nodiscard]] std::string hash() const;
  /// Output directory with a relative path resolved against $VISCOP_OUT when set.
  [[nodiscard]] std::filesystem::path output_dir() const;
  void validate() const;

  /// Strategy preset with this config's probe and LoRA settings applied.
  [[nodiscard]] AdaptationStrategy strategy(const std::string& name) const;
};

/// Resolves a placement spec for an encoder with `layers` layers; bad specs throw ConfigError.
std::vector<std::size_t> resolve_placement(const std::string& spec, std::size_t layers);

/// Progress sink; the default writes nothing.
using LogFn = std::function<void(const std::string&)>;

struct DataBundle {
  Vocabulary vocab;
  std::vector<Benchmark> pretrain;  // source families, pretraining seed stream
  DomainPair pair;                  // adaptation target + paired source evaluation
};

DataBundle make_data(const ExperimentConfig& cfg);

struct PretrainResult {
  VlmModel model;
  std::map<std::string, double> source_acc;  // pair.source eval, percentage points
  std::map<std::string, double> target_acc;  // pair.target eval, percentage points
  std::vector<double> loss_curve;
};

PretrainResult run_pretrain(const ExperimentConfig& cfg, const DataBundle& data, const LogFn& log = {});

struct AdaptResult {
  VlmModel expert;
  AdaptationReport report;
  GatingAudit audit;
  std::vector<std::string> frozen_changed;
  std::size_t steps = 0;
  std::size_t interaction_params = 0;
  double final_loss = 0.0;
};

/// Accuracy (percentage points) of `model` on every eval split of the pair.
std::map<std::string, double> evaluate_pair(const VlmModel& model, const DomainPair& pair);

/// Adapts a clone of `base` on the target training split and evaluates both.
/// `base_acc` may carry precomputed base accuracies to skip re-evaluation.
AdaptResult run_adapt(const ExperimentConfig& cfg, const DataBundle& data, const VlmModel& base,
                      const AdaptationStrategy& strategy, const std::map<std::string, double>* base_acc = nullptr,
                      const LogFn& log = {});

struct AblationCell {
  std::string axis;
  std::string variant;
  AdaptationStrategy strategy;
};

/// Cells of an ablation axis: probes, placement or alternatives. Unknown axis throws ConfigError.
std::vector<AblationCell> ablation_cells(const ExperimentConfig& cfg, const std::string& axis);

struct ParameterAudit {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t interaction = 0;
};

/// Trainable/frozen counts after applying the strategy to a copy of `base`; no training.
ParameterAudit audit_strategy(const ExperimentConfig& cfg, const VlmModel& base, const AdaptationStrategy& s);

// Serialized artifacts. All are deterministic functions of their inputs.
std::string report_json(const ExperimentConfig& cfg, const std::string& strategy, const AdaptResult& r,
                        const std::string& base_hash, const std::string& expert_hash);
/// benchmark,split,base_acc,expert_acc rows plus a summary row carrying delta_target and delta_source.
std::string report_csv(const AdaptationReport& r);
std::string pretrain_json(const ExperimentConfig& cfg, const PretrainResult& r, const std::string& checkpoint_hash);

// Command implementations used by the CLI. Each writes under cfg.output_dir().
struct CommandResult {
  std::vector<std::filesystem::path> files;
  std::string summary;
};

CommandResult cmd_pretrain(const ExperimentConfig& cfg, const LogFn& log = {});
CommandResult cmd_adapt(const ExperimentConfig& cfg, const std::string& strategy, const LogFn& log = {});
CommandResult cmd_ablate(const ExperimentConfig& cfg, const std::string& axis, const LogFn& log = {});
/// Pooled embeddings of the paired eval sets; `model` is "base" or a strategy with an expert checkpoint.
CommandResult cmd_export_embeddings(const ExperimentConfig& cfg, const std::string& model, EmbeddingSource source,
                                    const LogFn& log = {});
/// Collects every adaptation report in the output directory into summary.csv.
CommandResult cmd_report(const ExperimentConfig& cfg, const LogFn& log = {});
CommandResult cmd_generate(const ExperimentConfig& cfg, const LogFn& log = {});

std::filesystem::path base_checkpoint_path(const ExperimentConfig& cfg);
std::filesystem::path expert_checkpoint_path(const ExperimentConfig& cfg, const std::string& strategy);
std::filesystem::path report_path(const ExperimentConfig& cfg, const std::string& strategy);

}  // namespace viscop
