#include "viscop/layers.hpp"

#include <cmath>

#include "viscop/errors.hpp"

namespace viscop {

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::connector: return "connector";
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::encoder_lora: return "encoder_lora";
    case ParamGroup::probes: return "probes";
    case ParamGroup::interaction: return "interaction";
    case ParamGroup::probe_connector: return "probe_connector";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::decoder_lora: return "decoder_lora";
  }
  return "?";
}

LoraAdapter LoraAdapter::create(Rng& rng, std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha) {
  if (rank == 0) throw ConfigError("LoRA rank must be positive");
  LoraAdapter lora;
  lora.a = randn(rng, {d_in, rank}, 1.0 / std::sqrt(static_cast<double>(d_in)));
  lora.b = Tensor::zeros({rank, d_out});
  lora.scale = alpha / static_cast<double>(rank);
  return lora;
}

Tensor linear(const Tensor& x, const Tensor& w, const LoraAdapter* lora) {
  Tensor y = matmul(x, w);
  if (lora) y = add(y, scale(matmul(matmul(x, lora->a), lora->b), lora->scale));
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) { return add_bias(matmul(x, w), bias); }

AttentionWeights AttentionWeights::create(Rng& rng, std::size_t d, double out_std) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionWeights w;
  w.wq = randn(rng, {d, d}, s);
  w.wk = randn(rng, {d, d}, s);
  w.wv = randn(rng, {d, d}, s);
  w.wo = randn(rng, {d, d}, out_std);
  return w;
}

AttentionWeights AttentionWeights::clone() const { return {wq.clone(), wk.clone(), wv.clone(), wo.clone()}; }

Tensor multi_head_attention(const Tensor& queries, const Tensor& context, const AttentionWeights& w,
                            const AttentionOptions& opt, std::vector<Tensor>* probs) {
  const std::size_t d = w.wq.shape()[0];
  if (queries.cols() != d || context.cols() != d) {
    throw DimensionError("attention: width " + std::to_string(d) + " does not match queries " +
                         shape_str(queries.shape()) + " / context " + shape_str(context.shape()));
  }
  if (opt.heads == 0 || d % opt.heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(opt.heads) + " heads");
  }
  const std::size_t dh = d / opt.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(opt.score_dim ? opt.score_dim : dh));

  const Tensor q = linear(queries, w.wq, opt.lora_q);
  const Tensor k = linear(context, w.wk);
  const Tensor v = linear(context, w.wv, opt.lora_v);

  std::vector<Tensor> heads;
  heads.reserve(opt.heads);
  if (probs) probs->clear();
  for (std::size_t h = 0; h < opt.heads; ++h) {
    Tensor qh = opt.heads == 1 ? q : slice_cols(q, h * dh, dh);
    Tensor kh = opt.heads == 1 ? k : slice_cols(k, h * dh, dh);
    Tensor vh = opt.heads == 1 ? v : slice_cols(v, h * dh, dh);
    Tensor p = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt), opt.mask);
    if (probs) probs->push_back(p.detach());
    heads.push_back(matmul(p, vh));
  }
  Tensor merged = opt.heads == 1 ? heads.front() : concat_cols(heads);
  return matmul(merged, w.wo);
}

}  // namespace viscop
