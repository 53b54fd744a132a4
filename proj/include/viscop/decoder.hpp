#pragma once

// Tiny causal transformer decoder over [E; Z; Q; A].
//
// Visual rows take learned visual-position embeddings, text tokens take
// text-position embeddings counted from the start of the question, and probe
// rows take none. Inserting probe rows therefore leaves the embedding of every
// question/answer token unchanged; they only add keys to attend to.

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "viscop/layers.hpp"

namespace viscop {

struct DecoderConfig {
  std::size_t vocab = 0;
  std::size_t d_lm = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t context = 96;
  std::size_t max_visual = 64;
  std::size_t max_text = 24;
  double mlp_ratio = 4.0;
  std::size_t lora_rank = 0;
  double lora_alpha = 8.0;

  void validate() const;
  [[nodiscard]] std::size_t mlp_hidden() const;
};

struct PromptLayout {
  Tensor visual;  // E [rows x d_lm]; may be undefined
  Tensor probes;  // Z [M x d_lm]; undefined when probes are disabled
  std::vector<std::size_t> question;
  /// Gold answer including the trailing EOS.
  std::vector<std::size_t> answer;
  bool probes_first = false;  // [Z; E; Q; A] instead of [E; Z; Q; A]

  [[nodiscard]] std::size_t visual_rows() const { return visual.defined() ? visual.rows() : 0; }
  [[nodiscard]] std::size_t probe_rows() const { return probes.defined() ? probes.rows() : 0; }
  [[nodiscard]] std::size_t prefix_rows() const { return visual_rows() + probe_rows(); }
  [[nodiscard]] std::size_t total_rows() const { return prefix_rows() + question.size() + answer.size(); }
};

/// Next-token targets for every position; only positions whose next token
/// belongs to the answer are unmasked.
std::pair<std::vector<std::size_t>, std::vector<bool>> answer_targets(const PromptLayout& layout);

struct DecoderLayer {
  Tensor ln1_gain, ln1_bias;
  AttentionWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::optional<LoraAdapter> lora_q, lora_v;
};

class Decoder {
 public:
  Decoder(const DecoderConfig& cfg, Rng& rng);

  [[nodiscard]] const DecoderConfig& config() const noexcept { return cfg_; }

  /// Logits for every position of the concatenated sequence, [total_rows x V].
  [[nodiscard]] Tensor forward(const PromptLayout& layout) const;

  /// Adds LoRA adapters (B = 0) on W_q and W_v of every layer.
  void attach_lora(Rng& rng, std::size_t rank, double alpha);
  [[nodiscard]] bool has_lora() const;

  [[nodiscard]] const std::vector<DecoderLayer>& layers() const noexcept { return layers_; }
  [[nodiscard]] std::vector<DecoderLayer>& layers() noexcept { return layers_; }

  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

 private:
  DecoderConfig cfg_;
  Tensor tok_emb_, visual_pos_, text_pos_;
  std::vector<DecoderLayer> layers_;
  Tensor lnf_gain_, lnf_bias_, head_;
};

/// Cross-entropy over answer positions only (teacher forcing).
Tensor sequence_loss(const Decoder& decoder, const PromptLayout& layout);

/// Argmax decoding from [E; Z; Q]; stops at EOS (not returned) or after max_len tokens.
std::vector<std::size_t> generate_greedy(const Decoder& decoder, const Tensor& visual, const Tensor& probes,
                                         const std::vector<std::size_t>& question, std::size_t max_len,
                                         bool probes_first = false);

}  // namespace viscop
