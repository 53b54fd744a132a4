#pragma once

// VlmModel: vision encoder -> connector C -> decoder, with an optional probe
// pathway (probe bank + interaction modules + probe connector C_probe).

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "viscop/checkpoint.hpp"
#include "viscop/connectors.hpp"
#include "viscop/decoder.hpp"
#include "viscop/probes.hpp"
#include "viscop/vision_encoder.hpp"

namespace viscop {

struct VlmConfig {
  EncoderConfig encoder;
  ConnectorConfig connector;
  DecoderConfig decoder;
  bool probes_first = false;

  void validate() const;
};

struct ViscopModule {
  ProbeOptions options;
  ProbeBank bank;
  std::vector<InteractionModule> modules;
  MlpConnector connector;
};

class VlmModel {
 public:
  VlmModel(const VlmConfig& cfg, std::uint64_t seed);
  // Tensors are shared handles; copying would alias parameters. Use clone().
  VlmModel(const VlmModel&) = delete;
  VlmModel& operator=(const VlmModel&) = delete;
  VlmModel(VlmModel&&) = default;
  VlmModel& operator=(VlmModel&&) = default;

  [[nodiscard]] VlmModel clone() const { return from_checkpoint(to_checkpoint()); }

  [[nodiscard]] const VlmConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] VisionEncoder& encoder() noexcept { return encoder_; }
  [[nodiscard]] const VisionEncoder& encoder() const noexcept { return encoder_; }
  [[nodiscard]] MlpConnector& connector() noexcept { return connector_; }
  [[nodiscard]] const MlpConnector& connector() const noexcept { return connector_; }
  [[nodiscard]] Decoder& decoder() noexcept { return decoder_; }
  [[nodiscard]] const Decoder& decoder() const noexcept { return decoder_; }
  [[nodiscard]] const std::optional<ViscopModule>& viscop() const noexcept { return viscop_; }
  [[nodiscard]] std::optional<ViscopModule>& viscop() noexcept { return viscop_; }

  /// Adds M probes ~ N(0, init_std), one interaction module per placement layer
  /// copied from that encoder layer's self-attention, and C_probe copied from C
  /// (output layer zeroed unless options.zero_init_output is false).
  void attach_probes(const ProbeOptions& options, Rng& rng);
  void attach_decoder_lora(Rng& rng, std::size_t rank, double alpha);
  void attach_encoder_lora(Rng& rng, std::size_t rank, double alpha);

  [[nodiscard]] LayerActivations encode(const Video& frames) const { return encoder_.encode(frames); }
  /// E = C(downsample(X^L))
  [[nodiscard]] Tensor visual_embeddings(const LayerActivations& acts) const;
  /// Z = C_probe(P^L), or an undefined tensor when probes are absent.
  [[nodiscard]] Tensor probe_embeddings(const LayerActivations& acts, ProbeTrace* trace = nullptr) const;
  /// P^L itself (before C_probe); undefined when probes are absent.
  [[nodiscard]] Tensor probe_outputs(const LayerActivations& acts, ProbeTrace* trace = nullptr) const;

  [[nodiscard]] PromptLayout layout(const LayerActivations& acts, const std::vector<std::size_t>& question,
                                    const std::vector<std::size_t>& answer) const;
  [[nodiscard]] Tensor loss(const LayerActivations& acts, const std::vector<std::size_t>& question,
                            const std::vector<std::size_t>& answer) const;
  [[nodiscard]] std::vector<std::size_t> answer(const LayerActivations& acts,
                                                const std::vector<std::size_t>& question, std::size_t max_len) const;

  [[nodiscard]] std::vector<NamedParameter> parameters() const;
  [[nodiscard]] std::size_t parameter_count(const std::function<bool(const NamedParameter&)>& pred) const;

  [[nodiscard]] std::string config_json() const;
  [[nodiscard]] Checkpoint to_checkpoint() const;
  static VlmModel from_checkpoint(const Checkpoint& ck);

 private:
  VlmModel(const VlmConfig& cfg, Rng&& rng);

  VlmConfig cfg_;
  VisionEncoder encoder_;
  MlpConnector connector_;
  Decoder decoder_;
  std::optional<ViscopModule> viscop_;
  std::size_t encoder_lora_rank_ = 0;
  double encoder_lora_alpha_ = 0.0;
};

}  // namespace viscop
