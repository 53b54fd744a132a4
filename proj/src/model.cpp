#include "viscop/model.hpp"

#include <algorithm>
#include <map>

#include <json.hpp>

#include "viscop/errors.hpp"

namespace viscop {

using nlohmann::json;

void VlmConfig::validate() const {
  encoder.validate();
  connector.validate(encoder.num_patches());
  decoder.validate();
  if (connector.d_v != encoder.d_v) throw ConfigError("connector d_v does not match encoder d_v");
  if (connector.d_lm != decoder.d_lm) throw ConfigError("connector d_lm does not match decoder d_lm");
}

VlmModel::VlmModel(const VlmConfig& cfg, std::uint64_t seed) : VlmModel(cfg, Rng(seed)) {}

VlmModel::VlmModel(const VlmConfig& cfg, Rng&& rng)
    : cfg_((cfg.validate(), cfg)),
      encoder_(cfg.encoder, rng),
      connector_(MlpConnector::create(rng, cfg.connector)),
      decoder_(cfg.decoder, rng) {}

void VlmModel::attach_probes(const ProbeOptions& options, Rng& rng) {
  ProbeOptions opt = options;
  if (opt.count == 0) throw ConfigError("attach_probes: probe count must be at least 1");
  for (std::size_t i = 0; i < opt.placement.size(); ++i) {
    if (opt.placement[i] == 0 || opt.placement[i] > cfg_.encoder.layers ||
        (i > 0 && opt.placement[i] <= opt.placement[i - 1])) {
      throw ConfigError("attach_probes: placement must be strictly ascending layers in 1.." +
                        std::to_string(cfg_.encoder.layers));
    }
  }
  ViscopModule m;
  m.options = opt;
  m.bank = ProbeBank::create(rng, opt.count, cfg_.encoder.d_v, opt.init_std);
  for (auto l : opt.placement) m.modules.push_back(init_interaction(encoder_, l, opt));
  m.connector = connector_.clone();
  if (opt.zero_init_output) {
    for (auto& x : m.connector.w2.mutable_data()) x = 0.0;
    for (auto& x : m.connector.b2.mutable_data()) x = 0.0;
  }
  viscop_ = std::move(m);
}

void VlmModel::attach_decoder_lora(Rng& rng, std::size_t rank, double alpha) {
  decoder_.attach_lora(rng, rank, alpha);
  cfg_.decoder.lora_rank = rank;
  cfg_.decoder.lora_alpha = alpha;
}

void VlmModel::attach_encoder_lora(Rng& rng, std::size_t rank, double alpha) {
  encoder_.attach_lora(rng, rank, alpha);
  encoder_lora_rank_ = rank;
  encoder_lora_alpha_ = alpha;
}

Tensor VlmModel::visual_embeddings(const LayerActivations& acts) const {
  return project_visual(spatial_downsample(acts.last(), acts.frames, cfg_.connector.downsample), connector_);
}

Tensor VlmModel::probe_outputs(const LayerActivations& acts, ProbeTrace* trace) const {
  if (!viscop_) return {};
  return run_probes(viscop_->bank, viscop_->modules, acts, trace);
}

Tensor VlmModel::probe_embeddings(const LayerActivations& acts, ProbeTrace* trace) const {
  if (!viscop_) return {};
  return project_probes(probe_outputs(acts, trace), viscop_->connector);
}

PromptLayout VlmModel::layout(const LayerActivations& acts, const std::vector<std::size_t>& question,
                              const std::vector<std::size_t>& answer) const {
  PromptLayout l;
  l.visual = visual_embeddings(acts);
  l.probes = probe_embeddings(acts);
  l.question = question;
  l.answer = answer;
  l.probes_first = cfg_.probes_first;
  return l;
}

Tensor VlmModel::loss(const LayerActivations& acts, const std::vector<std::size_t>& question,
                      const std::vector<std::size_t>& answer) const {
  return sequence_loss(decoder_, layout(acts, question, answer));
}

std::vector<std::size_t> VlmModel::answer(const LayerActivations& acts, const std::vector<std::size_t>& question,
                                          std::size_t max_len) const {
  return generate_greedy(decoder_, visual_embeddings(acts), probe_embeddings(acts), question, max_len,
                         cfg_.probes_first);
}

std::vector<NamedParameter> VlmModel::parameters() const {
  std::vector<NamedParameter> out;
  encoder_.collect(out, "encoder.");
  connector_.collect(out, "connector.", ParamGroup::connector);
  decoder_.collect(out, "decoder.");
  if (viscop_) {
    out.push_back({"probes.bank", viscop_->bank.probes, ParamGroup::probes, 0});
    for (const auto& phi : viscop_->modules) {
      const std::string p = "interaction." + std::to_string(phi.layer) + ".";
      out.push_back({p + "wq", phi.weights.wq, ParamGroup::interaction, phi.layer});
      out.push_back({p + "wk", phi.weights.wk, ParamGroup::interaction, phi.layer});
      out.push_back({p + "wv", phi.weights.wv, ParamGroup::interaction, phi.layer});
      out.push_back({p + "wo", phi.weights.wo, ParamGroup::interaction, phi.layer});
    }
    viscop_->connector.collect(out, "probe_connector.", ParamGroup::probe_connector);
  }
  return out;
}

std::size_t VlmModel::parameter_count(const std::function<bool(const NamedParameter&)>& pred) const {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (pred(p)) n += p.tensor.numel();
  }
  return n;
}

namespace {

json to_json(const VlmConfig& c) {
  const auto& e = c.encoder;
  const auto& k = c.connector;
  const auto& d = c.decoder;
  return json{
      {"encoder",
       {{"image_side", e.image_side},
        {"patch_side", e.patch_side},
        {"channels", e.channels},
        {"d_v", e.d_v},
        {"layers", e.layers},
        {"heads", e.heads},
        {"mlp_ratio", e.mlp_ratio}}},
      {"connector", {{"d_v", k.d_v}, {"d_lm", k.d_lm}, {"downsample", k.downsample}, {"hidden", k.hidden}}},
      {"decoder",
       {{"vocab", d.vocab},
        {"d_lm", d.d_lm},
        {"layers", d.layers},
        {"heads", d.heads},
        {"context", d.context},
        {"max_visual", d.max_visual},
        {"max_text", d.max_text},
        {"mlp_ratio", d.mlp_ratio},
        {"lora_rank", d.lora_rank},
        {"lora_alpha", d.lora_alpha}}},
      {"probes_first", c.probes_first},
  };
}

VlmConfig vlm_config_from_json(const json& j) {
  VlmConfig c;
  const auto& e = j.at("encoder");
  c.encoder.image_side = e.at("image_side");
  c.encoder.patch_side = e.at("patch_side");
  c.encoder.channels = e.at("channels");
  c.encoder.d_v = e.at("d_v");
  c.encoder.layers = e.at("layers");
  c.encoder.heads = e.at("heads");
  c.encoder.mlp_ratio = e.at("mlp_ratio");
  const auto& k = j.at("connector");
  c.connector.d_v = k.at("d_v");
  c.connector.d_lm = k.at("d_lm");
  c.connector.downsample = k.at("downsample");
  c.connector.hidden = k.at("hidden");
  const auto& d = j.at("decoder");
  c.decoder.vocab = d.at("vocab");
  c.decoder.d_lm = d.at("d_lm");
  c.decoder.layers = d.at("layers");
  c.decoder.heads = d.at("heads");
  c.decoder.context = d.at("context");
  c.decoder.max_visual = d.at("max_visual");
  c.decoder.max_text = d.at("max_text");
  c.decoder.mlp_ratio = d.at("mlp_ratio");
  c.decoder.lora_rank = d.at("lora_rank");
  c.decoder.lora_alpha = d.at("lora_alpha");
  c.probes_first = j.at("probes_first");
  return c;
}

}  // namespace

std::string VlmModel::config_json() const {
  json j{{"model", to_json(cfg_)}};
  j["encoder_lora"] = {{"rank", encoder_lora_rank_}, {"alpha", encoder_lora_alpha_}};
  if (viscop_) {
    const auto& o = viscop_->options;
    j["probes"] = {{"count", o.count},
                   {"placement", o.placement},
                   {"scope", to_string(o.scope)},
                   {"residual", o.residual},
                   {"per_head_scaling", o.per_head_scaling},
                   {"init_std", o.init_std},
                   {"zero_init_output", o.zero_init_output}};
  } else {
    j["probes"] = nullptr;
  }
  return j.dump();
}

Checkpoint VlmModel::to_checkpoint() const {
  Checkpoint ck;
  ck.config_json = config_json();
  for (const auto& p : parameters()) ck.tensors.emplace_back(p.name, p.tensor.detach());
  return ck;
}

VlmModel VlmModel::from_checkpoint(const Checkpoint& ck) {
  json j;
  try {
    j = json::parse(ck.config_json);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint config: ") + e.what());
  }
  VlmConfig cfg = vlm_config_from_json(j.at("model"));
  const std::size_t lora_rank = cfg.decoder.lora_rank;
  const double lora_alpha = cfg.decoder.lora_alpha;
  cfg.decoder.lora_rank = 0;
  VlmModel model(cfg, 0);
  Rng rng(0);
  if (lora_rank > 0) model.attach_decoder_lora(rng, lora_rank, lora_alpha);
  if (j.contains("encoder_lora") && j["encoder_lora"].at("rank").get<std::size_t>() > 0) {
    model.attach_encoder_lora(rng, j["encoder_lora"].at("rank"), j["encoder_lora"].at("alpha"));
  }
  if (j.contains("probes") && !j["probes"].is_null()) {
    const auto& p = j["probes"];
    ProbeOptions opt;
    opt.count = p.at("count");
    opt.placement = p.at("placement").get<std::vector<std::size_t>>();
    opt.scope = attention_scope_from_string(p.at("scope"));
    opt.residual = p.at("residual");
    opt.per_head_scaling = p.at("per_head_scaling");
    opt.init_std = p.at("init_std");
    opt.zero_init_output = p.value("zero_init_output", true);
    model.attach_probes(opt, rng);
  }

  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : ck.tensors) stored.emplace(name, &t);
  auto params = model.parameters();
  if (params.size() != stored.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(stored.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& p : params) {
    auto it = stored.find(p.name);
    if (it == stored.end()) throw ConfigError("checkpoint is missing tensor '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw DimensionError("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                           ", model expects " + shape_str(p.tensor.shape()));
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
  }
  return model;
}

}  // namespace viscop
