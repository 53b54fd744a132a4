#pragma once

// Tiny patch-based vision transformer. Frames are encoded independently: the
// self-attention of every layer is block-diagonal over the T*N token sequence.
// No CLS token; all N tokens of a frame are patch tokens.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "viscop/layers.hpp"

namespace viscop {

struct EncoderConfig {
  std::size_t image_side = 16;
  std::size_t patch_side = 4;
  std::size_t channels = 3;
  std::size_t d_v = 32;
  std::size_t layers = 6;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;

  void validate() const;
  [[nodiscard]] std::size_t grid_side() const { return image_side / patch_side; }
  [[nodiscard]] std::size_t num_patches() const { return grid_side() * grid_side(); }
  [[nodiscard]] std::size_t patch_dim() const { return channels * patch_side * patch_side; }
  [[nodiscard]] std::size_t mlp_hidden() const;
};

/// T x C x H x W pixels, row-major.
struct Video {
  std::size_t frames = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Video() = default;
  Video(std::size_t t, std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : frames(t), channels(c), height(h), width(w), pixels(t * c * h * w, fill) {}

  [[nodiscard]] double& at(std::size_t t, std::size_t c, std::size_t y, std::size_t x) {
    return pixels[((t * channels + c) * height + y) * width + x];
  }
  [[nodiscard]] double at(std::size_t t, std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[((t * channels + c) * height + y) * width + x];
  }
  bool operator==(const Video&) const = default;
};

/// X^l for l = 1..L, each [(T*N) x d_v], frame-major.
struct LayerActivations {
  std::vector<Tensor> layers;
  std::size_t frames = 0;
  std::size_t tokens_per_frame = 0;

  [[nodiscard]] const Tensor& at_layer(std::size_t l) const { return layers.at(l - 1); }
  [[nodiscard]] const Tensor& last() const { return layers.back(); }
};

struct EncoderLayer {
  Tensor ln1_gain, ln1_bias;
  AttentionWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::optional<LoraAdapter> lora_q, lora_v;
};

/// Rows are patches (frame-major, raster order within a frame); columns are C*p*p pixels.
Tensor patchify(const Video& frames, const EncoderConfig& cfg);

class VisionEncoder {
 public:
  VisionEncoder(const EncoderConfig& cfg, Rng& rng);

  [[nodiscard]] const EncoderConfig& config() const noexcept { return cfg_; }

  /// All L layer outputs. When `attention` is given it receives, per layer, the
  /// per-head [(T*N) x (T*N)] self-attention matrices.
  LayerActivations encode(const Video& frames, std::vector<std::vector<Tensor>>* attention = nullptr) const;

  /// Patch projection plus positional embedding, before any transformer layer.
  [[nodiscard]] Tensor embed_patches(const Video& frames) const;

  [[nodiscard]] const std::vector<EncoderLayer>& layers() const noexcept { return layers_; }
  [[nodiscard]] std::vector<EncoderLayer>& layers() noexcept { return layers_; }
  [[nodiscard]] const EncoderLayer& layer(std::size_t l) const;

  void attach_lora(Rng& rng, std::size_t rank, double alpha);
  [[nodiscard]] bool has_lora() const;

  void collect(std::vector<NamedParameter>& out, const std::string& prefix) const;

 private:
  EncoderConfig cfg_;
  Tensor patch_w_, patch_b_, pos_;
  std::vector<EncoderLayer> layers_;
};

}  // namespace viscop
