#include "viscop/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "viscop/errors.hpp"
#include "viscop/vocabulary.hpp"

namespace viscop {

void DecoderConfig::validate() const {
  if (vocab < 5) throw ConfigError("decoder: vocabulary must hold the reserved tokens plus words");
  if (heads == 0 || d_lm % heads != 0) {
    throw ConfigError("decoder: d_lm " + std::to_string(d_lm) + " not divisible by heads " + std::to_string(heads));
  }
  if (layers == 0 || context == 0 || max_text == 0) throw ConfigError("decoder: layers/context must be positive");
  if (!(mlp_ratio > 0.0)) throw ConfigError("decoder: mlp_ratio must be positive");
}

std::size_t DecoderConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(d_lm)));
}

std::pair<std::vector<std::size_t>, std::vector<bool>> answer_targets(const PromptLayout& layout) {
  if (layout.answer.empty()) throw DegenerateBatchError("prompt has an empty answer");
  if (layout.question.empty()) throw DegenerateBatchError("prompt has an empty question");
  const std::size_t total = layout.total_rows();
  const std::size_t text_start = layout.prefix_rows();
  const std::size_t answer_start = text_start + layout.question.size();
  std::vector<std::size_t> targets(total, Vocabulary::pad);
  std::vector<bool> ignore(total, true);
  for (std::size_t pos = text_start; pos + 1 < total; ++pos) {
    const std::size_t next = pos + 1 - text_start;
    targets[pos] = next < layout.question.size() ? layout.question[next]
                                                 : layout.answer[next - layout.question.size()];
    ignore[pos] = pos + 1 < answer_start;
  }
  return {std::move(targets), std::move(ignore)};
}

Decoder::Decoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d_lm, h = cfg_.mlp_hidden();
  const double out_std = 0.5 / std::sqrt(static_cast<double>(d * cfg_.layers));
  tok_emb_ = randn(rng, {cfg_.vocab, d}, 0.5);
  visual_pos_ = randn(rng, {cfg_.max_visual, d}, 0.5);
  text_pos_ = randn(rng, {cfg_.max_text, d}, 0.5);
  layers_.reserve(cfg_.layers);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    DecoderLayer layer;
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
  lnf_gain_ = Tensor::full({d}, 1.0);
  lnf_bias_ = Tensor::zeros({d});
  head_ = randn(rng, {d, cfg_.vocab}, 1.0 / std::sqrt(static_cast<double>(d)));
  if (cfg_.lora_rank > 0) attach_lora(rng, cfg_.lora_rank, cfg_.lora_alpha);
}

Tensor Decoder::forward(const PromptLayout& layout) const {
  const std::size_t n_vis = layout.visual_rows();
  const std::size_t n_text = layout.question.size() + layout.answer.size();
  const std::size_t total = layout.total_rows();
  if (total > cfg_.context) {
    throw ContractError("decoder: sequence of " + std::to_string(total) + " rows exceeds context " +
                        std::to_string(cfg_.context));
  }
  if (n_vis > cfg_.max_visual) {
    throw ContractError("decoder: " + std::to_string(n_vis) + " visual rows exceed max_visual " +
                        std::to_string(cfg_.max_visual));
  }
  if (n_text == 0 || n_text > cfg_.max_text) {
    throw ContractError("decoder: text length " + std::to_string(n_text) + " outside 1.." +
                        std::to_string(cfg_.max_text));
  }
  for (const auto* seg : {&layout.visual, &layout.probes}) {
    if (seg->defined() && seg->cols() != cfg_.d_lm) {
      throw DimensionError("decoder: prefix rows " + shape_str(seg->shape()) + " do not have width " +
                           std::to_string(cfg_.d_lm));
    }
  }

  std::vector<std::size_t> ids = layout.question;
  ids.insert(ids.end(), layout.answer.begin(), layout.answer.end());
  Tensor text = add(gather_rows(tok_emb_, ids), slice_rows(text_pos_, 0, n_text));

  std::vector<Tensor> parts;
  Tensor visual;
  if (n_vis) visual = add(layout.visual, slice_rows(visual_pos_, 0, n_vis));
  if (layout.probes_first && layout.probes.defined()) parts.push_back(layout.probes);
  if (visual.defined()) parts.push_back(visual);
  if (!layout.probes_first && layout.probes.defined()) parts.push_back(layout.probes);
  parts.push_back(text);
  Tensor x = parts.size() == 1 ? text : concat_rows(parts);

  AttentionOptions opt;
  opt.heads = cfg_.heads;
  opt.mask = AttentionMask::causal();
  for (const auto& layer : layers_) {
    opt.lora_q = layer.lora_q ? &*layer.lora_q : nullptr;
    opt.lora_v = layer.lora_v ? &*layer.lora_v : nullptr;
    const Tensor normed = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    x = add(x, multi_head_attention(normed, normed, layer.attn, opt));
    const Tensor h = gelu(linear(layer_norm(x, layer.ln2_gain, layer.ln2_bias), layer.mlp_w1, layer.mlp_b1));
    x = add(x, linear(h, layer.mlp_w2, layer.mlp_b2));
  }
  return matmul(layer_norm(x, lnf_gain_, lnf_bias_), head_);
}

void Decoder::attach_lora(Rng& rng, std::size_t rank, double alpha) {
  for (auto& layer : layers_) {
    layer.lora_q = LoraAdapter::create(rng, cfg_.d_lm, cfg_.d_lm, rank, alpha);
    layer.lora_v = LoraAdapter::create(rng, cfg_.d_lm, cfg_.d_lm, rank, alpha);
  }
  cfg_.lora_rank = rank;
  cfg_.lora_alpha = alpha;
}

bool Decoder::has_lora() const { return !layers_.empty() && layers_.front().lora_q.has_value(); }

void Decoder::collect(std::vector<NamedParameter>& out, const std::string& prefix) const {
  out.push_back({prefix + "tok_emb", tok_emb_, ParamGroup::decoder, 0});
  out.push_back({prefix + "visual_pos", visual_pos_, ParamGroup::decoder, 0});
  out.push_back({prefix + "text_pos", text_pos_, ParamGroup::decoder, 0});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& L = layers_[i];
    const std::string p = prefix + "layers." + std::to_string(i + 1) + ".";
    out.push_back({p + "ln1_gain", L.ln1_gain, ParamGroup::decoder, 0});
    out.push_back({p + "ln1_bias", L.ln1_bias, ParamGroup::decoder, 0});
    out.push_back({p + "attn.wq", L.attn.wq, ParamGroup::decoder, 0});
    out.push_back({p + "attn.wk", L.attn.wk, ParamGroup::decoder, 0});
    out.push_back({p + "attn.wv", L.attn.wv, ParamGroup::decoder, 0});
    out.push_back({p + "attn.wo", L.attn.wo, ParamGroup::decoder, 0});
    out.push_back({p + "ln2_gain", L.ln2_gain, ParamGroup::decoder, 0});
    out.push_back({p + "ln2_bias", L.ln2_bias, ParamGroup::decoder, 0});
    out.push_back({p + "mlp_w1", L.mlp_w1, ParamGroup::decoder, 0});
    out.push_back({p + "mlp_b1", L.mlp_b1, ParamGroup::decoder, 0});
    out.push_back({p + "mlp_w2", L.mlp_w2, ParamGroup::decoder, 0});
    out.push_back({p + "mlp_b2", L.mlp_b2, ParamGroup::decoder, 0});
    if (L.lora_q) {
      out.push_back({p + "lora_q.a", L.lora_q->a, ParamGroup::decoder_lora, 0});
      out.push_back({p + "lora_q.b", L.lora_q->b, ParamGroup::decoder_lora, 0});
      out.push_back({p + "lora_v.a", L.lora_v->a, ParamGroup::decoder_lora, 0});
      out.push_back({p + "lora_v.b", L.lora_v->b, ParamGroup::decoder_lora, 0});
    }
  }
  out.push_back({prefix + "lnf_gain", lnf_gain_, ParamGroup::decoder, 0});
  out.push_back({prefix + "lnf_bias", lnf_bias_, ParamGroup::decoder, 0});
  out.push_back({prefix + "head", head_, ParamGroup::decoder, 0});
}

Tensor sequence_loss(const Decoder& decoder, const PromptLayout& layout) {
  auto [targets, ignore] = answer_targets(layout);
  return cross_entropy(decoder.forward(layout), targets, ignore);
}

std::vector<std::size_t> generate_greedy(const Decoder& decoder, const Tensor& visual, const Tensor& probes,
                                         const std::vector<std::size_t>& question, std::size_t max_len,
                                         bool probes_first) {
  if (max_len == 0) throw ContractError("generate_greedy: max_len must be at least 1");
  PromptLayout layout;
  layout.visual = visual;
  layout.probes = probes;
  layout.question = question;
  layout.probes_first = probes_first;
  std::vector<std::size_t> out;
  // The prompt's last row must be a text token, so the question doubles as the
  // running sequence and generated tokens are appended to the answer segment.
  while (out.size() < max_len) {
    layout.answer = out;
    if (layout.question.size() + layout.answer.size() > decoder.config().max_text) break;
    const Tensor logits = decoder.forward(layout);
    const std::size_t v = logits.cols();
    auto last = logits.data().subspan((logits.rows() - 1) * v, v);
    const auto best = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
    if (best == Vocabulary::eos) break;
    out.push_back(best);
  }
  return out;
}

}  // namespace viscop
