#include "viscop/probes.hpp"

#include <algorithm>

#include "viscop/errors.hpp"

namespace viscop {

const char* to_string(AttentionScope scope) {
  return scope == AttentionScope::spatial_only ? "spatial-only" : "spatio-temporal";
}

AttentionScope attention_scope_from_string(const std::string& s) {
  if (s == "spatio-temporal") return AttentionScope::spatio_temporal;
  if (s == "spatial-only") return AttentionScope::spatial_only;
  throw ConfigError("unknown attention scope '" + s + "' (expected spatio-temporal or spatial-only)");
}

ProbeBank ProbeBank::create(Rng& rng, std::size_t count, std::size_t d_v, double init_std) {
  if (count == 0) throw ConfigError("probe bank needs at least one probe");
  return ProbeBank{randn(rng, {count, d_v}, init_std)};
}

InteractionModule init_interaction(const VisionEncoder& encoder, std::size_t layer, const ProbeOptions& opt) {
  const EncoderLayer& src = encoder.layer(layer);
  InteractionModule phi;
  phi.layer = layer;
  phi.heads = encoder.config().heads;
  phi.weights = src.attn.clone();
  phi.scope = opt.scope;
  phi.residual = opt.residual;
  phi.per_head_scaling = opt.per_head_scaling;
  return phi;
}

Tensor interaction_step(const InteractionModule& phi, const Tensor& probes, const Tensor& tokens,
                        std::size_t frames, std::vector<Tensor>* attention) {
  const std::size_t d = phi.weights.wq.shape()[0];
  if (probes.rank() != 2 || tokens.rank() != 2 || probes.cols() != d || tokens.cols() != d) {
    throw DimensionError("interaction_step: probes " + shape_str(probes.shape()) + " and tokens " +
                         shape_str(tokens.shape()) + " must both have width " + std::to_string(d));
  }
  if (frames == 0 || tokens.rows() % frames != 0) {
    throw DimensionError("interaction_step: " + std::to_string(tokens.rows()) + " tokens do not split into " +
                         std::to_string(frames) + " frames");
  }
  AttentionOptions opt;
  opt.heads = phi.heads;
  opt.score_dim = phi.per_head_scaling ? 0 : d;

  Tensor update;
  if (phi.scope == AttentionScope::spatio_temporal || frames == 1) {
    update = multi_head_attention(probes, tokens, phi.weights, opt, attention);
  } else {
    const std::size_t n = tokens.rows() / frames;
    std::vector<std::vector<Tensor>> per_frame(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      Tensor out = multi_head_attention(probes, slice_rows(tokens, t * n, n), phi.weights, opt,
                                        attention ? &per_frame[t] : nullptr);
      update = update.defined() ? add(update, out) : out;
    }
    update = scale(update, 1.0 / static_cast<double>(frames));
    if (attention) {
      attention->clear();
      for (std::size_t h = 0; h < phi.heads; ++h) {
        std::vector<Tensor> cols;
        for (std::size_t t = 0; t < frames; ++t) cols.push_back(per_frame[t][h]);
        attention->push_back(scale(concat_cols(cols), 1.0 / static_cast<double>(frames)).detach());
      }
    }
  }
  return phi.residual ? add(probes, update) : update;
}

Tensor run_probes(const ProbeBank& bank, const std::vector<InteractionModule>& modules,
                  const LayerActivations& acts, ProbeTrace* trace) {
  Tensor p = bank.probes;
  std::size_t previous = 0;
  for (const auto& phi : modules) {
    if (phi.layer <= previous || phi.layer > acts.layers.size()) {
      throw DimensionError("run_probes: module layer " + std::to_string(phi.layer) +
                           " is out of order or beyond the " + std::to_string(acts.layers.size()) +
                           " available layers");
    }
    previous = phi.layer;
    std::vector<Tensor> attn;
    p = interaction_step(phi, p, acts.at_layer(phi.layer), acts.frames, trace ? &attn : nullptr);
    if (trace) {
      trace->layers.push_back(phi.layer);
      trace->attention.push_back(std::move(attn));
    }
  }
  return p;
}

std::vector<std::size_t> placement_every(std::size_t layers, std::size_t stride) {
  if (stride == 0) throw ConfigError("placement stride must be positive");
  std::vector<std::size_t> out;
  if (layers == 0) return out;
  for (std::size_t l = layers;; l -= stride) {
    out.push_back(l);
    if (l <= stride) break;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> placement_last(std::size_t layers) { return {layers}; }

}  // namespace viscop
