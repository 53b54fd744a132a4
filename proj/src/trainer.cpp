#include "viscop/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "viscop/checkpoint.hpp"
#include "viscop/errors.hpp"

namespace viscop {

namespace {

struct GroupName {
  TrainGroup group;
  const char* display;
  const char* snake;
};

constexpr GroupName kGroupNames[] = {
    {TrainGroup::vl_c, "VL-C", "vl_c"},           {TrainGroup::ve_full, "VE-full", "ve_full"},
    {TrainGroup::ve_lora, "VE-LoRA", "ve_lora"},  {TrainGroup::ve_last4, "VE-Last-4", "ve_last4"},
    {TrainGroup::viscop, "VisCoP", "viscop"},     {TrainGroup::llm_full, "LLM-full", "llm_full"},
    {TrainGroup::llm_lora, "LLM-LoRA", "llm_lora"},
};

TrainGroup lr_group(const NamedParameter& p, const AdaptationStrategy& s) {
  switch (p.group) {
    case ParamGroup::connector: return TrainGroup::vl_c;
    case ParamGroup::encoder: return s.has(TrainGroup::ve_full) ? TrainGroup::ve_full : TrainGroup::ve_last4;
    case ParamGroup::encoder_lora: return TrainGroup::ve_lora;
    case ParamGroup::probes:
    case ParamGroup::interaction:
    case ParamGroup::probe_connector: return TrainGroup::viscop;
    case ParamGroup::decoder: return TrainGroup::llm_full;
    case ParamGroup::decoder_lora: return TrainGroup::llm_lora;
  }
  return TrainGroup::vl_c;
}

bool is_encoder(const NamedParameter& p) {
  return p.group == ParamGroup::encoder || p.group == ParamGroup::encoder_lora;
}

}  // namespace

const char* to_string(TrainGroup group) {
  for (const auto& g : kGroupNames)
    if (g.group == group) return g.display;
  return "?";
}

TrainGroup train_group_from_string(const std::string& name) {
  for (const auto& g : kGroupNames)
    if (name == g.display || name == g.snake) return g.group;
  throw ConfigError("unknown parameter group '" + name + "'");
}

const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names{
      "vlc-only", "vlc-ve",  "vlc-ve-llm",           "vlc-llm-lora",       "viscop",
      "viscop-llm-full", "vp-only", "vlc-ve-lora-llm-lora", "vlc-last4-llm-lora", "qformer",
  };
  return names;
}

AdaptationStrategy strategy_preset(const std::string& name, std::size_t encoder_layers) {
  using G = TrainGroup;
  AdaptationStrategy s;
  s.name = name;
  s.probes.placement = placement_every(encoder_layers, 1);
  if (name == "vlc-only") {
    s.groups = {G::vl_c};
  } else if (name == "vlc-ve") {
    s.groups = {G::vl_c, G::ve_full};
  } else if (name == "vlc-ve-llm") {
    s.groups = {G::vl_c, G::ve_full, G::llm_full};
  } else if (name == "vlc-llm-lora") {
    s.groups = {G::vl_c, G::llm_lora};
  } else if (name == "viscop") {
    s.groups = {G::vl_c, G::viscop, G::llm_lora};
  } else if (name == "viscop-llm-full") {
    s.groups = {G::vl_c, G::viscop, G::llm_full};
  } else if (name == "vp-only") {
    s.groups = {G::vl_c, G::viscop, G::llm_lora};
    s.probes.placement.clear();
  } else if (name == "vlc-ve-lora-llm-lora") {
    s.groups = {G::vl_c, G::ve_lora, G::llm_lora};
  } else if (name == "vlc-last4-llm-lora") {
    s.groups = {G::vl_c, G::ve_last4, G::llm_lora};
    s.last_k = std::min<std::size_t>(4, encoder_layers);
  } else if (name == "qformer") {
    s.groups = {G::vl_c, G::viscop, G::llm_lora};
    s.probes.placement = placement_last(encoder_layers);
  } else {
    std::string known;
    for (const auto& n : strategy_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown strategy '" + name + "' (known: " + known + ")");
  }
  return s;
}

AdaptationStrategy full_training_strategy() {
  AdaptationStrategy s;
  s.name = "full";
  s.groups = {TrainGroup::vl_c, TrainGroup::ve_full, TrainGroup::llm_full};
  return s;
}

AdaptationStrategy make_strategy(const std::string& name, const std::vector<std::string>& group_names,
                                 std::size_t encoder_layers) {
  AdaptationStrategy s;
  s.name = name;
  s.probes.placement = placement_every(encoder_layers, 1);
  for (const auto& g : group_names) s.groups.insert(train_group_from_string(g));
  if (s.groups.empty()) throw ConfigError("strategy '" + name + "' trains no group");
  return s;
}

bool parameter_trainable(const NamedParameter& p, const AdaptationStrategy& s, std::size_t encoder_layers) {
  switch (p.group) {
    case ParamGroup::connector: return s.has(TrainGroup::vl_c);
    case ParamGroup::encoder:
      if (s.has(TrainGroup::ve_full)) return true;
      return s.has(TrainGroup::ve_last4) && p.layer > 0 && p.layer + s.last_k > encoder_layers;
    case ParamGroup::encoder_lora: return s.has(TrainGroup::ve_lora);
    case ParamGroup::probes:
    case ParamGroup::interaction:
    case ParamGroup::probe_connector: return s.has(TrainGroup::viscop);
    case ParamGroup::decoder: return s.has(TrainGroup::llm_full);
    case ParamGroup::decoder_lora: return s.has(TrainGroup::llm_lora);
  }
  return false;
}

std::string tensor_hash(const Tensor& t) {
  const auto d = t.data();
  return hex64(fnv1a64(d.data(), d.size() * sizeof(double)));
}

GatingAudit apply_strategy(VlmModel& model, const AdaptationStrategy& strategy, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xad47);
  if (strategy.has(TrainGroup::ve_last4) && (strategy.last_k == 0 || strategy.last_k > model.config().encoder.layers)) {
    throw ConfigError("strategy '" + strategy.name + "': last_k must be in 1..encoder layers");
  }
  if (strategy.has(TrainGroup::viscop) && !model.viscop()) model.attach_probes(strategy.probes, rng);
  if (strategy.has(TrainGroup::llm_lora) && !model.decoder().has_lora()) {
    model.attach_decoder_lora(rng, strategy.llm_lora_rank, strategy.llm_lora_alpha);
  }
  if (strategy.has(TrainGroup::ve_lora) && !model.encoder().has_lora()) {
    model.attach_encoder_lora(rng, strategy.ve_lora_rank, strategy.ve_lora_alpha);
  }

  GatingAudit audit;
  const std::size_t L = model.config().encoder.layers;
  for (auto& p : model.parameters()) {
    const bool on = parameter_trainable(p, strategy, L);
    Tensor t = p.tensor;
    t.clear_grad();
    t.set_requires_grad(on);
    if (on) {
      audit.trainable.push_back(p.name);
      audit.trainable_params += t.numel();
    } else {
      audit.frozen.push_back({p.name, tensor_hash(t)});
      audit.frozen_params += t.numel();
    }
  }
  return audit;
}

std::vector<std::string> verify_frozen(const VlmModel& model, const GatingAudit& audit) {
  std::map<std::string, Tensor> by_name;
  for (const auto& p : model.parameters()) by_name.emplace(p.name, p.tensor);
  std::vector<std::string> changed;
  for (const auto& f : audit.frozen) {
    auto it = by_name.find(f.name);
    if (it == by_name.end() || tensor_hash(it->second) != f.hash) changed.push_back(f.name);
  }
  return changed;
}

void TrainConfig::validate() const {
  if (!(base_lr > 0) || !(ve_lr > 0)) throw ConfigError("train: learning rates must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be at least 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas must be in [0,1)");
  if (!(adam_eps > 0)) throw ConfigError("train: adam_eps must be positive");
  if (weight_decay < 0 || grad_clip < 0) throw ConfigError("train: weight_decay and grad_clip must be non-negative");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("train: warmup_fraction must be in [0,1)");
}

double TrainConfig::schedule(std::size_t step, std::size_t total) const {
  if (total == 0) return 1.0;
  const double t = static_cast<double>(step);
  const double warm = std::floor(warmup_fraction * static_cast<double>(total));
  if (t < warm) return (t + 1.0) / (warm + 1.0);
  if (!cosine_decay) return 1.0;
  const double progress = (t - warm) / std::max(1.0, static_cast<double>(total) - warm);
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

std::vector<const QASample*> train_samples(const std::vector<Benchmark>& benchmarks) {
  std::vector<const QASample*> out;
  for (const auto& b : benchmarks)
    for (const auto& s : b.train) out.push_back(&s);
  return out;
}

TrainResult train(VlmModel& model, const std::vector<const QASample*>& samples, const AdaptationStrategy& strategy,
                  const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  TrainResult result;
  if (cfg.epochs == 0 || samples.empty()) return result;

  struct Slot {
    Tensor param;
    double lr;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;
  bool encoder_trainable = false;
  for (const auto& p : model.parameters()) {
    if (!p.tensor.requires_grad()) continue;
    encoder_trainable = encoder_trainable || is_encoder(p);
    double lr = is_encoder(p) ? cfg.ve_lr : cfg.base_lr;
    if (auto it = strategy.lr_multiplier.find(lr_group(p, strategy)); it != strategy.lr_multiplier.end()) {
      lr *= it->second;
    }
    slots.push_back({p.tensor, lr, std::vector<double>(p.tensor.numel()), std::vector<double>(p.tensor.numel())});
  }
  if (slots.empty()) throw ConfigError("train: no parameter requires grad; call apply_strategy first");

  std::vector<LayerActivations> cache;
  if (!encoder_trainable) {
    cache.reserve(samples.size());
    for (const auto* s : samples) cache.push_back(model.encode(s->frames));
  }

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffler = Rng::derive(cfg.seed, 0x5a3f);
  const std::size_t per_epoch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps) total = std::min(total, cfg.max_steps);
  std::size_t step = 0;
  double b1t = 1.0, b2t = 1.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffler.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_steps && step >= cfg.max_steps) return result;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const QASample& s = *samples[order[i]];
        GradTape tape;
        TapeScope scope(tape);
        Tensor loss;
        try {
          LayerActivations acts = encoder_trainable ? model.encode(s.frames) : cache[order[i]];
          loss = model.loss(acts, s.question, s.answer);
        } catch (const NumericError& e) {
          for (auto& sl : slots) sl.param.clear_grad();
          throw NumericAbort(step, e.what());
        }
        const double value = loss.item();
        if (!std::isfinite(value)) {
          for (auto& sl : slots) sl.param.clear_grad();
          throw NumericAbort(step, "non-finite loss " + std::to_string(value));
        }
        batch_loss += value * inv;
        tape.backward(scale(loss, inv));
      }

      double norm2 = 0.0;
      for (auto& sl : slots) {
        if (!sl.param.has_grad()) continue;
        for (double g : sl.param.grad()) norm2 += g * g;
      }
      if (!std::isfinite(norm2)) {
        for (auto& sl : slots) sl.param.clear_grad();
        throw NumericAbort(step, "non-finite gradient");
      }
      const double norm = std::sqrt(norm2);
      const double clip = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

      const double factor = cfg.schedule(step, total);
      b1t *= cfg.beta1;
      b2t *= cfg.beta2;
      for (auto& sl : slots) {
        if (!sl.param.has_grad()) continue;
        const auto g = sl.param.grad();
        auto w = sl.param.mutable_data();
        for (std::size_t k = 0; k < w.size(); ++k) {
          const double gk = g[k] * clip;
          sl.m[k] = cfg.beta1 * sl.m[k] + (1 - cfg.beta1) * gk;
          sl.v[k] = cfg.beta2 * sl.v[k] + (1 - cfg.beta2) * gk * gk;
          const double mh = sl.m[k] / (1 - b1t);
          const double vh = sl.v[k] / (1 - b2t);
          w[k] -= factor * sl.lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * w[k]);
        }
        sl.param.clear_grad();
      }
      result.loss_curve.push_back(batch_loss);
      if (on_step) on_step(step, batch_loss);
      ++step;
      result.steps = step;
    }
  }
  return result;
}

double evaluate_accuracy(const VlmModel& model, const std::vector<QASample>& samples) {
  if (samples.empty()) throw DegenerateBatchError("evaluate_accuracy: benchmark has no samples");
  std::size_t correct = 0;
  for (const auto& s : samples) {
    auto pred = model.answer(model.encode(s.frames), s.question, kMaxAnswerTokens);
    if (!pred.empty() && pred.back() == Vocabulary::eos) pred.pop_back();
    std::vector<std::size_t> gold(s.answer.begin(), s.answer.end() - 1);
    correct += pred == gold;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

std::string predict_text(const VlmModel& model, const QASample& sample, const Vocabulary& vocab) {
  auto pred = model.answer(model.encode(sample.frames), sample.question, kMaxAnswerTokens);
  if (!pred.empty() && pred.back() == Vocabulary::eos) pred.pop_back();
  return vocab.decode(pred);
}

}  // namespace viscop
