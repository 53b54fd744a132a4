#pragma once

// Building blocks shared by the encoder, the probe interaction modules and the
// decoder.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "viscop/ops.hpp"
#include "viscop/rng.hpp"

namespace viscop {

/// Which adaptation group a parameter belongs to. Strategies gate by group.
enum class ParamGroup {
  connector,
  encoder,
  encoder_lora,
  probes,
  interaction,
  probe_connector,
  decoder,
  decoder_lora,
};

const char* to_string(ParamGroup group);

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamGroup group;
  /// 1-based encoder layer for encoder/encoder_lora/interaction parameters, 0 otherwise.
  std::size_t layer = 0;
};

/// Low-rank additive update W + scale * A * B. B starts at zero.
struct LoraAdapter {
  Tensor a;  // [d_in x r]
  Tensor b;  // [r x d_out]
  double scale = 1.0;

  static LoraAdapter create(Rng& rng, std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha);
};

/// x * W, plus the LoRA path when present.
Tensor linear(const Tensor& x, const Tensor& w, const LoraAdapter* lora = nullptr);
/// x * W + b
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // each [d x d]

  static AttentionWeights create(Rng& rng, std::size_t d, double out_std);
  [[nodiscard]] AttentionWeights clone() const;
};

struct AttentionOptions {
  std::size_t heads = 1;
  /// Logits are divided by sqrt(score_dim). 0 means the per-head width.
  std::size_t score_dim = 0;
  AttentionMask mask = AttentionMask::none();
  const LoraAdapter* lora_q = nullptr;
  const LoraAdapter* lora_v = nullptr;
};

/// Multi-head scaled dot-product attention of `queries` over `context`, heads
/// concatenated and projected by W_o. When `probs` is non-null it receives one
/// row-stochastic [queries x context] matrix per head.
Tensor multi_head_attention(const Tensor& queries, const Tensor& context, const AttentionWeights& w,
                            const AttentionOptions& opt, std::vector<Tensor>* probs = nullptr);

}  // namespace viscop
