#pragma once

// Visual probes: a small bank of learnable tokens that cross-attend to the
// intermediate activations of a frozen vision encoder, one interaction module
// per selected encoder layer. Probes never pass through the encoder's MLPs.

#include <cstddef>
#include <string>
#include <vector>

#include "viscop/layers.hpp"
#include "viscop/vision_encoder.hpp"

namespace viscop {

enum class AttentionScope {
  /// Probes attend to all T*N tokens at once.
  spatio_temporal,
  /// Probes attend to each frame's N tokens separately; per-frame outputs are averaged.
  spatial_only,
};

const char* to_string(AttentionScope scope);
AttentionScope attention_scope_from_string(const std::string& s);

struct ProbeOptions {
  std::size_t count = 16;
  /// 1-based encoder layers that carry an interaction module, strictly ascending.
  /// Empty means probes feed the connector without ever seeing the encoder.
  std::vector<std::size_t> placement;
  AttentionScope scope = AttentionScope::spatio_temporal;
  /// P' = P + attn(P, X) when true, P' = attn(P, X) otherwise.
  bool residual = true;
  /// Divide logits by sqrt(d_head) when true, by sqrt(d_v) otherwise.
  bool per_head_scaling = true;
  double init_std = 0.02;
  /// C_probe starts as a copy of C with its output layer zeroed, so Z = 0 and
  /// the expert matches the base until the probe pathway is trained. When
  /// false C_probe is an exact copy of C.
  bool zero_init_output = true;
};

struct InteractionModule {
  std::size_t layer = 0;
  std::size_t heads = 1;
  AttentionWeights weights;
  AttentionScope scope = AttentionScope::spatio_temporal;
  bool residual = true;
  bool per_head_scaling = true;
};

struct ProbeBank {
  Tensor probes;  // [M x d_v]

  static ProbeBank create(Rng& rng, std::size_t count, std::size_t d_v, double init_std);
  [[nodiscard]] std::size_t count() const { return probes.shape()[0]; }
};

/// Per-layer probe attention captured during run_probes: for each interaction
/// module, per-head [M x (T*N)] matrices. Under spatial-only scope the per-frame
/// [M x N] blocks are laid side by side and divided by T so each row still sums to 1.
struct ProbeTrace {
  std::vector<std::size_t> layers;
  std::vector<std::vector<Tensor>> attention;
};

/// Deep copy of the encoder's layer-l self-attention weights.
InteractionModule init_interaction(const VisionEncoder& encoder, std::size_t layer, const ProbeOptions& opt);

/// One probe update against one layer's tokens.
Tensor interaction_step(const InteractionModule& phi, const Tensor& probes, const Tensor& tokens,
                        std::size_t frames, std::vector<Tensor>* attention = nullptr);

/// Probes flow through the modules in ascending layer order; layers without a
/// module leave them unchanged.
Tensor run_probes(const ProbeBank& bank, const std::vector<InteractionModule>& modules,
                  const LayerActivations& acts, ProbeTrace* trace = nullptr);

/// Placement helpers: every k-th layer counted back from the last, and the last layer only.
std::vector<std::size_t> placement_every(std::size_t layers, std::size_t stride);
std::vector<std::size_t> placement_last(std::size_t layers);

}  // namespace viscop
