#include "viscop/vision_encoder.hpp"

#include <cmath>

#include "viscop/errors.hpp"

namespace viscop {

void EncoderConfig::validate() const {
  if (patch_side == 0 || image_side == 0 || image_side % patch_side != 0) {
    throw ConfigError("encoder: image_side " + std::to_string(image_side) + " not divisible by patch_side " +
                      std::to_string(patch_side));
  }
  if (channels == 0 || layers == 0) throw ConfigError("encoder: channels and layers must be positive");
  if (heads == 0 || d_v % heads != 0) {
    throw ConfigError("encoder: d_v " + std::to_string(d_v) + " not divisible by heads " + std::to_string(heads));
  }
  if (!(mlp_ratio > 0.0)) throw ConfigError("encoder: mlp_ratio must be positive");
}

std::size_t EncoderConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(d_v)));
}

Tensor patchify(const Video& frames, const EncoderConfig& cfg) {
  if (frames.height != cfg.image_side || frames.width != cfg.image_side || frames.channels != cfg.channels) {
    throw DimensionError("patchify: expected " + std::to_string(cfg.channels) + "x" +
                         std::to_string(cfg.image_side) + "x" + std::to_string(cfg.image_side) + " frames, got " +
                         std::to_string(frames.channels) + "x" + std::to_string(frames.height) + "x" +
                         std::to_string(frames.width));
  }
  if (frames.frames == 0) throw DimensionError("patchify: video has no frames");
  const std::size_t g = cfg.grid_side(), p = cfg.patch_side, n = cfg.num_patches();
  const std::size_t cols = cfg.patch_dim();
  std::vector<double> out(frames.frames * n * cols);
  for (std::size_t t = 0; t < frames.frames; ++t) {
    for (std::size_t py = 0; py < g; ++py) {
      for (std::size_t px = 0; px < g; ++px) {
        double* row = out.data() + ((t * n) + py * g + px) * cols;
        std::size_t k = 0;
        for (std::size_t c = 0; c < cfg.channels; ++c)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x) row[k++] = frames.at(t, c, py * p + y, px * p + x);
      }
    }
  }
  return Tensor({frames.frames * n, cols}, std::move(out));
}

VisionEncoder::VisionEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d_v, h = cfg_.mlp_hidden();
  const double out_std = 0.5 / std::sqrt(static_cast<double>(d * cfg_.layers));
  patch_w_ = randn(rng, {cfg_.patch_dim(), d}, 1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim())));
  patch_b_ = Tensor::zeros({d});
  pos_ = randn(rng, {cfg_.num_patches(), d}, 0.1);
  layers_.reserve(cfg_.layers);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    EncoderLayer layer;
    layer.ln1_gain = Tensor::full({d}, 1.0);
    layer.ln1_bias = Tensor::zeros({d});
    layer.attn = AttentionWeights::create(rng, d, out_std);
    layer.ln2_gain = Tensor::full({d}, 1.0);
    layer.ln2_bias = Tensor::zeros({d});
    layer.mlp_w1 = randn(rng, {d, h}, 1.0 / std::sqrt(static_cast<double>(d)));
    layer.mlp_b1 = Tensor::zeros({h});
    layer.mlp_w2 = randn(rng, {h, d}, out_std);
    layer.mlp_b2 = Tensor::zeros({d});
    layers_.push_back(std::move(layer));
  }
}

const EncoderLayer& VisionEncoder::layer(std::size_t l) const {
  if (l == 0 || l > layers_.size()) {
    throw DimensionError("encoder has no layer " + std::to_string(l) + " (layers are 1.." +
                         std::to_string(layers_.size()) + ")");
  }
  return layers_[l - 1];
}

Tensor VisionEncoder::embed_patches(const Video& frames) const {
  Tensor x = linear(patchify(frames, cfg_), patch_w_, patch_b_);
  std::vector<Tensor> pos(frames.frames, pos_);
  return add(x, frames.frames == 1 ? pos_ : concat_rows(pos));
}

LayerActivations VisionEncoder::encode(const Video& frames, std::vector<std::vector<Tensor>>* attention) const {
  LayerActivations acts;
  acts.frames = frames.frames;
  acts.tokens_per_frame = cfg_.num_patches();
  acts.layers.reserve(layers_.size());
  if (attention) attention->clear();

  AttentionOptions opt;
  opt.heads = cfg_.heads;
  opt.mask = AttentionMask::blocks(cfg_.num_patches());

  Tensor x = embed_patches(frames);
  for (const auto& layer : layers_) {
    opt.lora_q = layer.lora_q ? &*layer.lora_q : nullptr;
    opt.lora_v = layer.lora_v ? &*layer.lora_v : nullptr;
    const Tensor normed = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    std::vector<Tensor> probs;
    x = add(x, multi_head_attention(normed, normed, layer.attn, opt, attention ? &probs : nullptr));
    if (attention) attention->push_back(std::move(probs));
    const Tensor h = gelu(linear(layer_norm(x, layer.ln2_gain, layer.ln2_bias), layer.mlp_w1, layer.mlp_b1));
    x = add(x, linear(h, layer.mlp_w2, layer.mlp_b2));
    acts.layers.push_back(x);
  }
  return acts;
}

void VisionEncoder::attach_lora(Rng& rng, std::size_t rank, double alpha) {
  for (auto& layer : layers_) {
    layer.lora_q = LoraAdapter::create(rng, cfg_.d_v, cfg_.d_v, rank, alpha);
    layer.lora_v = LoraAdapter::create(rng, cfg_.d_v, cfg_.d_v, rank, alpha);
  }
}

bool VisionEncoder::has_lora() const { return !layers_.empty() && layers_.front().lora_q.has_value(); }

void VisionEncoder::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  out.push_back({prefix + "patch_w", patch_w_, ParamGroup::encoder, 0});
  out.push_back({prefix + "patch_b", patch_b_, ParamGroup::encoder, 0});
  out.push_back({prefix + "pos", pos_, ParamGroup::encoder, 0});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& L = layers_[i];
    const std::size_t l = i + 1;
    const std::string p = prefix + "layers." + std::to_string(l) + ".";
    out.push_back({p + "ln1_gain", L.ln1_gain, ParamGroup::encoder, l});
    out.push_back({p + "ln1_bias", L.ln1_bias, ParamGroup::encoder, l});
    out.push_back({p + "attn.wq", L.attn.wq, ParamGroup::encoder, l});
    out.push_back({p + "attn.wk", L.attn.wk, ParamGroup::encoder, l});
    out.push_back({p + "attn.wv", L.attn.wv, ParamGroup::encoder, l});
    out.push_back({p + "attn.wo", L.attn.wo, ParamGroup::encoder, l});
    out.push_back({p + "ln2_gain", L.ln2_gain, ParamGroup::encoder, l});
    out.push_back({p + "ln2_bias", L.ln2_bias, ParamGroup::encoder, l});
    out.push_back({p + "mlp_w1", L.mlp_w1, ParamGroup::encoder, l});
    out.push_back({p + "mlp_b1", L.mlp_b1, ParamGroup::encoder, l});
    out.push_back({p + "mlp_w2", L.mlp_w2, ParamGroup::encoder, l});
    out.push_back({p + "mlp_b2", L.mlp_b2, ParamGroup::encoder, l});
    if (L.lora_q) {
      out.push_back({p + "lora_q.a", L.lora_q->a, ParamGroup::encoder_lora, l});
      out.push_back({p + "lora_q.b", L.lora_q->b, ParamGroup::encoder_lora, l});
      out.push_back({p + "lora_v.a", L.lora_v->a, ParamGroup::encoder_lora, l});
      out.push_back({p + "lora_v.b", L.lora_v->b, ParamGroup::encoder_lora, l});
    }
  }
}

}  // namespace viscop
