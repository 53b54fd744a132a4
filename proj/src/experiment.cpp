#include "viscop/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <sstream>

#include <json.hpp>

#include "viscop/errors.hpp"

namespace viscop {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Flat config format

struct Value {
  enum class Kind { string, number, boolean } kind = Kind::string;
  std::string text;  // unquoted string, or the raw number literal
  bool flag = false;
};

struct Field {
  const char* section;  // "" for top level
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const Value&, const std::string& where)> set;
};

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::uint64_t as_uint(const Value& v, const std::string& where) {
  if (v.kind != Value::Kind::number) throw ConfigError(where + ": expected a non-negative integer");
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.text.data(), v.text.data() + v.text.size(), out);
  if (ec != std::errc() || p != v.text.data() + v.text.size()) {
    throw ConfigError(where + ": expected a non-negative integer, got '" + v.text + "'");
  }
  return out;
}

double as_double(const Value& v, const std::string& where) {
  if (v.kind != Value::Kind::number) throw ConfigError(where + ": expected a number");
  char* end = nullptr;
  const double d = std::strtod(v.text.c_str(), &end);
  if (end != v.text.c_str() + v.text.size()) throw ConfigError(where + ": malformed number '" + v.text + "'");
  return d;
}

bool as_bool(const Value& v, const std::string& where) {
  if (v.kind != Value::Kind::boolean) throw ConfigError(where + ": expected true or false");
  return v.flag;
}

const std::string& as_string(const Value& v, const std::string& where) {
  if (v.kind != Value::Kind::string) throw ConfigError(where + ": expected a quoted string");
  return v.text;
}

#define VISCOP_UINT(SEC, KEY, EXPR)                                                                \
  Field {                                                                                          \
    SEC, KEY, [](const ExperimentConfig& c) { return std::to_string(c.EXPR); },                    \
        [](ExperimentConfig& c, const Value& v, const std::string& w) {                            \
          c.EXPR = static_cast<decltype(c.EXPR)>(as_uint(v, w));                                   \
        }                                                                                          \
  }
#define VISCOP_DOUBLE(SEC, KEY, EXPR)                                                                          \
  Field {                                                                                                      \
    SEC, KEY, [](const ExperimentConfig& c) { return format_double(c.EXPR); },                                 \
        [](ExperimentConfig& c, const Value& v, const std::string& w) { c.EXPR = as_double(v, w); }            \
  }
#define VISCOP_BOOL(SEC, KEY, EXPR)                                                                            \
  Field {                                                                                                      \
    SEC, KEY, [](const ExperimentConfig& c) { return std::string(c.EXPR ? "true" : "false"); },                \
        [](ExperimentConfig& c, const Value& v, const std::string& w) { c.EXPR = as_bool(v, w); }              \
  }
#define VISCOP_STRING(SEC, KEY, EXPR)                                                                          \
  Field {                                                                                                      \
    SEC, KEY, [](const ExperimentConfig& c) { return quote(c.EXPR); },                                         \
        [](ExperimentConfig& c, const Value& v, const std::string& w) { c.EXPR = as_string(v, w); }            \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> all{
      VISCOP_UINT("", "seed", seed),
      Field{"", "task", [](const ExperimentConfig& c) { return quote(to_string(c.task)); },
            [](ExperimentConfig& c, const Value& v, const std::string& w) {
              try {
                c.task = domain_shift_from_string(as_string(v, w));
              } catch (const ConfigError& e) {
                throw ConfigError(w + ": " + e.what());
              }
              if (c.task == DomainShift::identity) throw ConfigError(w + ": task must be view, modality or task");
            }},
      Field{"", "output", [](const ExperimentConfig& c) { return quote(c.output.generic_string()); },
            [](ExperimentConfig& c, const Value& v, const std::string& w) {
              c.output = as_string(v, w);
              if (c.output.empty()) throw ConfigError(w + ": output must not be empty");
            }},

      VISCOP_UINT("data", "pretrain_samples", pretrain_samples),
      VISCOP_UINT("data", "per_domain", per_domain),
      VISCOP_UINT("data", "frames", scene.frames),
      VISCOP_UINT("data", "grid", scene.grid),
      VISCOP_UINT("data", "min_objects", scene.min_objects),
      VISCOP_UINT("data", "max_objects", scene.max_objects),

      VISCOP_UINT("encoder", "image_side", model.encoder.image_side),
      VISCOP_UINT("encoder", "patch_side", model.encoder.patch_side),
      VISCOP_UINT("encoder", "d_v", model.encoder.d_v),
      VISCOP_UINT("encoder", "layers", model.encoder.layers),
      VISCOP_UINT("encoder", "heads", model.encoder.heads),
      VISCOP_DOUBLE("encoder", "mlp_ratio", model.encoder.mlp_ratio),

      VISCOP_UINT("connector", "downsample", model.connector.downsample),
      VISCOP_UINT("connector", "hidden", model.connector.hidden),

      VISCOP_UINT("decoder", "d_lm", model.decoder.d_lm),
      VISCOP_UINT("decoder", "layers", model.decoder.layers),
      VISCOP_UINT("decoder", "heads", model.decoder.heads),
      VISCOP_UINT("decoder", "context", model.decoder.context),
      VISCOP_UINT("decoder", "max_visual", model.decoder.max_visual),
      VISCOP_UINT("decoder", "max_text", model.decoder.max_text),
      VISCOP_DOUBLE("decoder", "mlp_ratio", model.decoder.mlp_ratio),
      VISCOP_BOOL("decoder", "probes_first", model.probes_first),

      VISCOP_UINT("probes", "count", probes.count),
      VISCOP_STRING("probes", "placement", probe_placement),
      Field{"probes", "scope", [](const ExperimentConfig& c) { return quote(to_string(c.probes.scope)); },
            [](ExperimentConfig& c, const Value& v, const std::string& w) {
              try {
                c.probes.scope = attention_scope_from_string(as_string(v, w));
              } catch (const ConfigError& e) {
                throw ConfigError(w + ": " + e.what());
              }
            }},
      VISCOP_BOOL("probes", "residual", probes.residual),
      VISCOP_BOOL("probes", "per_head_scaling", probes.per_head_scaling),
      VISCOP_DOUBLE("probes", "init_std", probes.init_std),
      VISCOP_BOOL("probes", "zero_init_output", probes.zero_init_output),

      VISCOP_UINT("pretrain", "epochs", pretrain.train.epochs),
      VISCOP_UINT("pretrain", "batch_size", pretrain.train.batch_size),
      VISCOP_DOUBLE("pretrain", "base_lr", pretrain.train.base_lr),
      VISCOP_DOUBLE("pretrain", "ve_lr", pretrain.train.ve_lr),
      VISCOP_DOUBLE("pretrain", "warmup_fraction", pretrain.train.warmup_fraction),
      VISCOP_DOUBLE("pretrain", "grad_clip", pretrain.train.grad_clip),
      VISCOP_STRING("pretrain", "warm_start_family", pretrain.warm_start_family),
      VISCOP_UINT("pretrain", "warm_start_epochs", pretrain.warm_start_epochs),

      VISCOP_UINT("adapt", "epochs", adapt.train.epochs),
      VISCOP_UINT("adapt", "batch_size", adapt.train.batch_size),
      VISCOP_DOUBLE("adapt", "base_lr", adapt.train.base_lr),
      VISCOP_DOUBLE("adapt", "ve_lr", adapt.train.ve_lr),
      VISCOP_DOUBLE("adapt", "warmup_fraction", adapt.train.warmup_fraction),
      VISCOP_DOUBLE("adapt", "grad_clip", adapt.train.grad_clip),
      VISCOP_UINT("adapt", "llm_lora_rank", adapt.llm_lora_rank),
      VISCOP_DOUBLE("adapt", "llm_lora_alpha", adapt.llm_lora_alpha),
      VISCOP_UINT("adapt", "ve_lora_rank", adapt.ve_lora_rank),
      VISCOP_DOUBLE("adapt", "ve_lora_alpha", adapt.ve_lora_alpha),
      VISCOP_UINT("adapt", "last_k", adapt.last_k),
  };
  return all;
}

#undef VISCOP_UINT
#undef VISCOP_DOUBLE
#undef VISCOP_BOOL
#undef VISCOP_STRING

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Strips a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && in_string) {
      ++i;
    } else if (line[i] == '"') {
      in_string = !in_string;
    } else if (line[i] == '#' && !in_string) {
      return line.substr(0, i);
    }
  }
  return line;
}

Value parse_value(const std::string& raw, const std::string& where) {
  Value v;
  if (raw.empty()) throw ConfigError(where + ": missing value");
  if (raw.front() == '"') {
    if (raw.size() < 2 || raw.back() != '"') throw ConfigError(where + ": unterminated string");
    for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 2 < raw.size()) ++i;
      else if (raw[i] == '"') throw ConfigError(where + ": stray quote in string");
      v.text += raw[i];
    }
    return v;
  }
  if (raw == "true" || raw == "false") {
    v.kind = Value::Kind::boolean;
    v.flag = raw == "true";
    return v;
  }
  const bool numeric = std::all_of(raw.begin(), raw.end(), [](char c) {
    return std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E';
  });
  if (!numeric) throw ConfigError(where + ": cannot parse value '" + raw + "' (strings need double quotes)");
  v.kind = Value::Kind::number;
  v.text = raw;
  return v;
}

std::string family_list(const std::vector<Benchmark>& bs) {
  std::string s;
  for (const auto& b : bs) s += (s.empty() ? "" : ", ") + b.name;
  return s;
}

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t stream) { return Rng::derive(seed, stream).next_u64(); }

constexpr std::uint64_t kPretrainData = 0x9e1;
constexpr std::uint64_t kPairData = 0x9e2;
constexpr std::uint64_t kModelInit = 0x9e3;
constexpr std::uint64_t kPretrainOrder = 0x9e4;
constexpr std::uint64_t kAdaptOrder = 0x9e5;
constexpr std::uint64_t kAdaptInit = 0x9e6;

std::vector<std::string> names_of(const std::vector<Benchmark>& bs) {
  std::vector<std::string> out;
  for (const auto& b : bs) out.push_back(b.name);
  return out;
}

void write_manifest_entry(const ExperimentConfig& cfg, const std::vector<std::filesystem::path>& files) {
  const auto dir = cfg.output_dir();
  const auto path = dir / "manifest.json";
  json m;
  if (std::filesystem::exists(path)) {
    try {
      m = json::parse(read_text_file(path));
    } catch (const json::exception&) {
      m = json::object();
    }
  }
  m["format"] = "viscop-run";
  m["version"] = 1;
  m["config_hash"] = cfg.hash();
  m["seed"] = cfg.seed;
  m["task"] = to_string(cfg.task);
  if (!m.contains("artifacts") || !m["artifacts"].is_object()) m["artifacts"] = json::object();
  for (const auto& f : files) {
    m["artifacts"][std::filesystem::relative(f, dir).generic_string()] = content_hash(read_file_bytes(f));
  }
  write_text_file(path, m.dump(2) + "\n");
}

void write_config_copy(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir());
  write_text_file(cfg.output_dir() / "config.toml", cfg.to_text());
}

VlmModel load_base(const ExperimentConfig& cfg) {
  const auto path = base_checkpoint_path(cfg);
  if (!std::filesystem::exists(path)) {
    throw ConfigError("no base checkpoint at " + path.string() + "; run `pretrain` with this config first");
  }
  return VlmModel::from_checkpoint(Checkpoint::load(path));
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.output = "runs/default";
  c.pretrain.train.epochs = 8;
  c.pretrain.train.batch_size = 4;
  c.adapt.train.epochs = 3;
  c.adapt.train.batch_size = 4;
  return c;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& origin) {
  ExperimentConfig c = defaults();
  c.output.clear();
  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(body.substr(1, body.size() - 2));
      const bool known = std::any_of(fields().begin(), fields().end(),
                                     [&](const Field& f) { return section == f.section && !section.empty(); });
      if (!known) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    auto it = std::find_if(fields().begin(), fields().end(),
                           [&](const Field& f) { return section == f.section && key == f.key; });
    if (it == fields().end()) throw ConfigError(where + ": unknown field '" + full + "'");
    if (!seen.insert(full).second) throw ConfigError(where + ": field '" + full + "' given twice");
    it->set(c, parse_value(trim(body.substr(eq + 1)), where + ": field '" + full + "'"), where + ": field '" + full + "'");
  }
  for (const char* required : {"seed", "task", "output"}) {
    if (!seen.count(required)) throw ConfigError(origin + ": missing required field '" + required + "'");
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return parse(read_text_file(path), path.string());
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  std::string section = "";
  for (const auto& f : fields()) {
    if (section != f.section) {
      section = f.section;
      out += "\n[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(*this) + "\n";
  }
  return out;
}

std::string ExperimentConfig::hash() const { return content_hash(to_text()); }

std::filesystem::path ExperimentConfig::output_dir() const {
  if (output.is_absolute()) return output;
  if (const char* root = std::getenv("VISCOP_OUT"); root && *root) return std::filesystem::path(root) / output;
  return output;
}

void ExperimentConfig::validate() const {
  if (task == DomainShift::identity) throw ConfigError("config: task must be view, modality or task");
  if (output.empty()) throw ConfigError("config: output must not be empty");
  if (scene.grid * scene.cell != model.encoder.image_side) {
    throw ConfigError("config: data.grid x cell must equal encoder.image_side (" +
                      std::to_string(scene.grid * scene.cell) + " vs " + std::to_string(model.encoder.image_side) + ")");
  }
  if (pretrain_samples < 60) throw ConfigError("config: data.pretrain_samples must be at least 60");
  if (per_domain < 60) throw ConfigError("config: data.per_domain must be at least 60");
  VlmConfig m = model;
  m.connector.d_v = m.encoder.d_v;
  m.connector.d_lm = m.decoder.d_lm;
  m.decoder.vocab = synthetic_vocabulary().size();
  m.validate();
  pretrain.train.validate();
  adapt.train.validate();
  if (!pretrain.warm_start_family.empty()) {
    const auto f = question_family_from_string(pretrain.warm_start_family);
    const auto src = source_families();
    if (std::find(src.begin(), src.end(), f) == src.end()) {
      throw ConfigError("config: pretrain.warm_start_family must be a source family");
    }
  }
  (void)resolve_placement(probe_placement, model.encoder.layers);
  if (probes.count == 0) throw ConfigError("config: probes.count must be at least 1");
  const std::size_t frames_tokens =
      scene.frames * model.encoder.num_patches() / (model.connector.downsample * model.connector.downsample);
  if (frames_tokens > model.decoder.max_visual) {
    throw ConfigError("config: " + std::to_string(frames_tokens) + " visual tokens exceed decoder.max_visual");
  }
}

std::vector<std::size_t> resolve_placement(const std::string& spec, std::size_t layers) {
  if (spec == "every") return placement_every(layers, 1);
  if (spec == "last") return placement_last(layers);
  if (spec == "none") return {};
  if (spec.rfind("every:", 0) == 0) {
    std::size_t k = 0;
    auto [p, ec] = std::from_chars(spec.data() + 6, spec.data() + spec.size(), k);
    if (ec != std::errc() || p != spec.data() + spec.size() || k == 0) {
      throw ConfigError("placement '" + spec + "': expected every:<positive integer>");
    }
    return placement_every(layers, k);
  }
  std::vector<std::size_t> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::size_t l = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), l);
    if (item.empty() || ec != std::errc() || p != item.data() + item.size() || l == 0 || l > layers ||
        (!out.empty() && l <= out.back())) {
      throw ConfigError("placement '" + spec + "': expected every, every:<k>, last, none or ascending layers in 1.." +
                        std::to_string(layers));
    }
    out.push_back(l);
  }
  if (out.empty()) throw ConfigError("placement '" + spec + "' selects no layer");
  return out;
}

AdaptationStrategy ExperimentConfig::strategy(const std::string& name) const {
  const std::size_t L = model.encoder.layers;
  AdaptationStrategy s = strategy_preset(name, L);
  const auto preset_placement = s.probes.placement;
  s.probes = probes;
  s.probes.placement = resolve_placement(probe_placement, L);
  if (name == "vp-only" || name == "qformer") s.probes.placement = preset_placement;
  s.llm_lora_rank = adapt.llm_lora_rank;
  s.llm_lora_alpha = adapt.llm_lora_alpha;
  s.ve_lora_rank = adapt.ve_lora_rank;
  s.ve_lora_alpha = adapt.ve_lora_alpha;
  if (s.has(TrainGroup::ve_last4)) s.last_k = std::min(adapt.last_k, L);
  return s;
}

// ---------------------------------------------------------------------------
// Runs

DataBundle make_data(const ExperimentConfig& cfg) {
  DataBundle d;
  d.vocab = synthetic_vocabulary();
  const auto fams = source_families();
  const std::uint64_t pre_seed = derived_seed(cfg.seed, kPretrainData);
  for (auto f : fams) {
    d.pretrain.push_back(
        make_benchmark(cfg.pretrain_samples / fams.size(), DomainShift::identity, f, pre_seed, cfg.scene, d.vocab));
  }
  d.pair = make_domain_pair(cfg.task, cfg.per_domain, derived_seed(cfg.seed, kPairData), cfg.scene, d.vocab);
  return d;
}

std::map<std::string, double> evaluate_pair(const VlmModel& model, const DomainPair& pair) {
  std::map<std::string, double> out;
  for (const auto* side : {&pair.source, &pair.target})
    for (const auto& b : *side) out[b.name] = 100.0 * evaluate_accuracy(model, b);
  return out;
}

PretrainResult run_pretrain(const ExperimentConfig& cfg, const DataBundle& data, const LogFn& log) {
  cfg.validate();
  VlmConfig mc = cfg.model;
  mc.connector.d_v = mc.encoder.d_v;
  mc.connector.d_lm = mc.decoder.d_lm;
  mc.decoder.vocab = data.vocab.size();
  PretrainResult r{VlmModel(mc, derived_seed(cfg.seed, kModelInit)), {}, {}, {}};
  auto strategy = full_training_strategy();
  (void)apply_strategy(r.model, strategy, cfg.seed);

  TrainConfig tc = cfg.pretrain.train;
  tc.seed = derived_seed(cfg.seed, kPretrainOrder);
  if (!cfg.pretrain.warm_start_family.empty() && cfg.pretrain.warm_start_epochs > 0) {
    const auto fam = question_family_from_string(cfg.pretrain.warm_start_family);
    std::vector<Benchmark> warm;
    for (const auto& b : data.pretrain)
      if (b.family == fam) warm.push_back(b);
    TrainConfig wc = tc;
    wc.epochs = cfg.pretrain.warm_start_epochs;
    if (log) log("pretrain: warm start on " + family_list(warm) + " for " + std::to_string(wc.epochs) + " epochs");
    auto w = train(r.model, train_samples(warm), strategy, wc);
    r.loss_curve = w.loss_curve;
  }
  const auto samples = train_samples(data.pretrain);
  const std::size_t per_epoch = (samples.size() + tc.batch_size - 1) / tc.batch_size;
  double running = 0.0;
  if (log) log("pretrain: " + std::to_string(samples.size()) + " samples, " + std::to_string(tc.epochs) + " epochs");
  auto main = train(r.model, samples, strategy, tc, [&](std::size_t step, double loss) {
    running += loss;
    if ((step + 1) % per_epoch == 0) {
      if (log) log("pretrain: epoch " + std::to_string((step + 1) / per_epoch) + " mean loss " + fixed(running / per_epoch));
      running = 0.0;
    }
  });
  r.loss_curve.insert(r.loss_curve.end(), main.loss_curve.begin(), main.loss_curve.end());
  for (auto& p : r.model.parameters()) p.tensor.set_requires_grad(false);
  const auto acc = evaluate_pair(r.model, data.pair);
  for (const auto& b : data.pair.source) r.source_acc[b.name] = acc.at(b.name);
  for (const auto& b : data.pair.target) r.target_acc[b.name] = acc.at(b.name);
  return r;
}

AdaptResult run_adapt(const ExperimentConfig& cfg, const DataBundle& data, const VlmModel& base,
                      const AdaptationStrategy& strategy, const std::map<std::string, double>* base_acc,
                      const LogFn& log) {
  std::map<std::string, double> base_scores = base_acc ? *base_acc : evaluate_pair(base, data.pair);
  AdaptResult r{base.clone(), {}, {}, {}, 0, 0, 0.0};
  r.audit = apply_strategy(r.expert, strategy, derived_seed(cfg.seed, kAdaptInit));
  for (const auto& p : r.expert.parameters())
    if (p.group == ParamGroup::interaction) r.interaction_params += p.tensor.numel();
  TrainConfig tc = cfg.adapt.train;
  tc.seed = derived_seed(cfg.seed, kAdaptOrder);
  if (log) {
    log("adapt[" + strategy.name + "]: " + std::to_string(r.audit.trainable_params) + " trainable parameters, " +
        std::to_string(tc.epochs) + " epochs on " + family_list(data.pair.target));
  }
  auto res = train(r.expert, train_samples(data.pair.target), strategy, tc);
  r.steps = res.steps;
  r.final_loss = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
  r.frozen_changed = verify_frozen(r.expert, r.audit);
  for (auto& p : r.expert.parameters()) p.tensor.set_requires_grad(false);
  const auto expert_scores = evaluate_pair(r.expert, data.pair);
  r.report = delta_metrics(base_scores, expert_scores, names_of(data.pair.target), names_of(data.pair.source));
  return r;
}

std::vector<AblationCell> ablation_cells(const ExperimentConfig& cfg, const std::string& axis) {
  std::vector<AblationCell> cells;
  const std::size_t L = cfg.model.encoder.layers;
  if (axis == "probes") {
    for (std::size_t m : {1, 4, 8, 16, 32}) {
      auto s = cfg.strategy("viscop");
      s.probes.count = m;
      cells.push_back({axis, "M=" + std::to_string(m), s});
    }
  } else if (axis == "placement") {
    for (const char* spec : {"every", "every:2", "every:3", "last"}) {
      auto s = cfg.strategy("viscop");
      s.probes.placement = resolve_placement(spec, L);
      cells.push_back({axis, spec, s});
    }
  } else if (axis == "alternatives") {
    for (const char* name : {"vp-only", "vlc-ve-lora-llm-lora", "vlc-last4-llm-lora", "qformer", "viscop"}) {
      cells.push_back({axis, name, cfg.strategy(name)});
    }
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "' (expected probes, placement or alternatives)");
  }
  return cells;
}

ParameterAudit audit_strategy(const ExperimentConfig& cfg, const VlmModel& base, const AdaptationStrategy& s) {
  VlmModel m = base.clone();
  const auto audit = apply_strategy(m, s, derived_seed(cfg.seed, kAdaptInit));
  ParameterAudit out{audit.trainable_params, audit.frozen_params, 0};
  for (const auto& p : m.parameters())
    if (p.group == ParamGroup::interaction && p.tensor.requires_grad()) out.interaction += p.tensor.numel();
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

std::string report_json(const ExperimentConfig& cfg, const std::string& strategy, const AdaptResult& r,
                        const std::string& base_hash, const std::string& expert_hash) {
  const auto& rep = r.report;
  json benches = json::array();
  for (const auto& b : rep.benchmarks) {
    benches.push_back({{"name", b.name}, {"split", b.split}, {"base_acc", b.base_acc}, {"expert_acc", b.expert_acc}});
  }
  json j{
      {"format", "viscop-report"},
      {"version", 1},
      {"config_hash", cfg.hash()},
      {"seed", cfg.seed},
      {"task", to_string(cfg.task)},
      {"strategy", strategy},
      {"base_checkpoint", base_hash},
      {"expert_checkpoint", expert_hash},
      {"trainable_params", r.audit.trainable_params},
      {"frozen_params", r.audit.frozen_params},
      {"interaction_params", r.interaction_params},
      {"steps", r.steps},
      {"final_loss", r.final_loss},
      {"frozen_changed", r.frozen_changed},
      {"benchmarks", benches},
      {"acc_target_base", rep.acc_target_base},
      {"acc_target_expert", rep.acc_target_expert},
      {"acc_source_base", rep.acc_source_base},
      {"acc_source_expert", rep.acc_source_expert},
      {"delta_target", rep.delta_target},
      {"delta_source", rep.delta_source},
  };
  return j.dump(2) + "\n";
}

std::string report_csv(const AdaptationReport& r) {
  std::string out = "benchmark,split,base_acc,expert_acc,delta_target,delta_source\n";
  for (const auto& b : r.benchmarks) out += b.name + "," + b.split + "," + fixed(b.base_acc) + "," + fixed(b.expert_acc) + ",,\n";
  out += "average,target," + fixed(r.acc_target_base) + "," + fixed(r.acc_target_expert) + ",,\n";
  out += "average,source," + fixed(r.acc_source_base) + "," + fixed(r.acc_source_expert) + ",,\n";
  out += "summary,,,," + fixed(r.delta_target) + "," + fixed(r.delta_source) + "\n";
  return out;
}

std::string pretrain_json(const ExperimentConfig& cfg, const PretrainResult& r, const std::string& checkpoint_hash) {
  json j{
      {"format", "viscop-pretrain"},
      {"version", 1},
      {"config_hash", cfg.hash()},
      {"seed", cfg.seed},
      {"task", to_string(cfg.task)},
      {"checkpoint", checkpoint_hash},
      {"source_acc", r.source_acc},
      {"target_acc", r.target_acc},
      {"steps", r.loss_curve.size()},
      {"final_loss", r.loss_curve.empty() ? 0.0 : r.loss_curve.back()},
  };
  return j.dump(2) + "\n";
}

std::filesystem::path base_checkpoint_path(const ExperimentConfig& cfg) { return cfg.output_dir() / "base.ckpt"; }

std::filesystem::path expert_checkpoint_path(const ExperimentConfig& cfg, const std::string& strategy) {
  return cfg.output_dir() / "experts" / (strategy + ".ckpt");
}

std::filesystem::path report_path(const ExperimentConfig& cfg, const std::string& strategy) {
  return cfg.output_dir() / "reports" / (strategy + ".json");
}

// ---------------------------------------------------------------------------
// Commands

CommandResult cmd_pretrain(const ExperimentConfig& cfg, const LogFn& log) {
  write_config_copy(cfg);
  const auto data = make_data(cfg);
  auto r = run_pretrain(cfg, data, log);
  const auto bytes = r.model.to_checkpoint().serialize();
  const auto ck = base_checkpoint_path(cfg);
  write_file_bytes(ck, bytes);
  const auto log_path = cfg.output_dir() / "base.json";
  write_text_file(log_path, pretrain_json(cfg, r, content_hash(bytes)));
  CommandResult out{{ck, log_path, cfg.output_dir() / "config.toml"}, {}};
  write_manifest_entry(cfg, out.files);
  std::string s = "base " + content_hash(bytes) + "\n";
  for (const auto& [k, v] : r.source_acc) s += "  " + k + " " + fixed(v, 2) + "\n";
  for (const auto& [k, v] : r.target_acc) s += "  " + k + " " + fixed(v, 2) + "\n";
  out.summary = s;
  return out;
}

CommandResult cmd_adapt(const ExperimentConfig& cfg, const std::string& strategy, const LogFn& log) {
  const auto s = cfg.strategy(strategy);  // unknown names fail before any work
  const VlmModel base = load_base(cfg);
  const auto base_hash = content_hash(read_file_bytes(base_checkpoint_path(cfg)));
  const auto data = make_data(cfg);
  auto r = run_adapt(cfg, data, base, s, nullptr, log);
  const auto bytes = r.expert.to_checkpoint().serialize();
  const auto ck = expert_checkpoint_path(cfg, strategy);
  write_file_bytes(ck, bytes);
  const auto jpath = report_path(cfg, strategy);
  write_text_file(jpath, report_json(cfg, strategy, r, base_hash, content_hash(bytes)));
  auto cpath = jpath;
  cpath.replace_extension(".csv");
  write_text_file(cpath, report_csv(r.report));
  write_config_copy(cfg);
  CommandResult out{{ck, jpath, cpath, cfg.output_dir() / "config.toml"}, {}};
  write_manifest_entry(cfg, out.files);
  out.summary = strategy + ": delta_target " + fixed(r.report.delta_target, 2) + " delta_source " +
                fixed(r.report.delta_source, 2) + "\n";
  return out;
}

CommandResult cmd_ablate(const ExperimentConfig& cfg, const std::string& axis, const LogFn& log) {
  const auto cells = ablation_cells(cfg, axis);
  const VlmModel base = load_base(cfg);
  const auto data = make_data(cfg);
  const auto base_acc = evaluate_pair(base, data.pair);
  std::string csv =
      "axis,variant,strategy,probes,placement,trainable_params,interaction_params,acc_target,acc_source,"
      "delta_target,delta_source,config_hash,seed\n";
  std::string summary;
  for (const auto& c : cells) {
    auto r = run_adapt(cfg, data, base, c.strategy, &base_acc, log);
    const bool has_probes = c.strategy.has(TrainGroup::viscop);
    std::string placement;
    for (auto l : c.strategy.probes.placement) placement += (placement.empty() ? "" : " ") + std::to_string(l);
    csv += axis + "," + c.variant + "," + c.strategy.name + "," + (has_probes ? std::to_string(c.strategy.probes.count) : "0") +
           "," + (has_probes ? placement : "") + "," + std::to_string(r.audit.trainable_params) + "," +
           std::to_string(r.interaction_params) + "," + fixed(r.report.acc_target_expert) + "," +
           fixed(r.report.acc_source_expert) + "," + fixed(r.report.delta_target) + "," +
           fixed(r.report.delta_source) + "," + cfg.hash() + "," + std::to_string(cfg.seed) + "\n";
    summary += c.variant + ": delta_target " + fixed(r.report.delta_target, 2) + " delta_source " +
               fixed(r.report.delta_source, 2) + "\n";
  }
  const auto path = cfg.output_dir() / "ablate" / (axis + ".csv");
  write_text_file(path, csv);
  write_config_copy(cfg);
  CommandResult out{{path, cfg.output_dir() / "config.toml"}, summary};
  write_manifest_entry(cfg, out.files);
  return out;
}

CommandResult cmd_export_embeddings(const ExperimentConfig& cfg, const std::string& model, EmbeddingSource source,
                                    const LogFn& log) {
  VlmModel m = model == "base" ? load_base(cfg) : [&] {
    (void)cfg.strategy(model);
    const auto path = expert_checkpoint_path(cfg, model);
    if (!std::filesystem::exists(path)) {
      throw ConfigError("no expert checkpoint at " + path.string() + "; run `adapt --strategy " + model + "` first");
    }
    return VlmModel::from_checkpoint(Checkpoint::load(path));
  }();
  const auto data = make_data(cfg);
  std::vector<EmbeddingRow> rows;
  for (const auto* side : {&data.pair.source, &data.pair.target}) {
    for (std::size_t k = 0; k < side->size(); ++k) {
      const auto& b = (*side)[k];
      for (const auto& s : b.eval) rows.push_back({k * 100000 + s.pair_id, b.domain, pooled_embedding(m, s.frames, source)});
    }
  }
  const std::string stem = model + "-" + to_string(source);
  const auto csv = cfg.output_dir() / "embeddings" / (stem + ".csv");
  write_embeddings_csv(csv, rows);
  const auto stats = paired_stats_from_rows(rows, "source", to_string(cfg.task));
  json j{{"format", "viscop-embeddings"}, {"version", 1},         {"config_hash", cfg.hash()},
         {"seed", cfg.seed},              {"model", model},       {"source", to_string(source)},
         {"pairs", stats.pairs},          {"bd", stats.bd},       {"psd", stats.psd}};
  const auto jpath = cfg.output_dir() / "embeddings" / (stem + ".json");
  write_text_file(jpath, j.dump(2) + "\n");
  if (log) log("export-embeddings: " + std::to_string(rows.size()) + " rows");
  CommandResult out{{csv, jpath}, stem + ": BD " + fixed(stats.bd) + " PSD " + fixed(stats.psd) + "\n"};
  write_manifest_entry(cfg, out.files);
  return out;
}

CommandResult cmd_report(const ExperimentConfig& cfg, const LogFn& log) {
  const auto dir = cfg.output_dir() / "reports";
  std::vector<json> reports;
  for (const auto& name : strategy_names()) {
    const auto p = dir / (name + ".json");
    if (std::filesystem::exists(p)) reports.push_back(json::parse(read_text_file(p)));
  }
  if (reports.empty()) throw ConfigError("no adaptation reports under " + dir.string() + "; run `adapt` first");
  std::string csv =
      "strategy,trainable_params,acc_target_base,acc_target_expert,acc_source_base,acc_source_expert,delta_target,"
      "delta_source,config_hash,seed\n";
  std::string summary;
  for (const auto& r : reports) {
    const std::string name = r.at("strategy");
    csv += name + "," + std::to_string(r.at("trainable_params").get<std::size_t>()) + "," +
           fixed(r.at("acc_target_base").get<double>()) + "," + fixed(r.at("acc_target_expert").get<double>()) + "," +
           fixed(r.at("acc_source_base").get<double>()) + "," + fixed(r.at("acc_source_expert").get<double>()) + "," +
           fixed(r.at("delta_target").get<double>()) + "," + fixed(r.at("delta_source").get<double>()) + "," +
           r.at("config_hash").get<std::string>() + "," + std::to_string(r.at("seed").get<std::uint64_t>()) + "\n";
    summary += name + ": delta_target " + fixed(r.at("delta_target").get<double>(), 2) + " delta_source " +
               fixed(r.at("delta_source").get<double>(), 2) + "\n";
  }
  const auto path = cfg.output_dir() / "summary.csv";
  write_text_file(path, csv);
  if (log) log("report: " + std::to_string(reports.size()) + " strategies");
  CommandResult out{{path}, summary};
  write_manifest_entry(cfg, out.files);
  return out;
}

CommandResult cmd_generate(const ExperimentConfig& cfg, const LogFn& log) {
  const auto data = make_data(cfg);
  std::vector<Benchmark> all = data.pretrain;
  // Pretraining benchmarks share names with the pair's source side; keep them apart on disk.
  for (auto& b : all) b.name = "pretrain-" + b.name;
  all.insert(all.end(), data.pair.source.begin(), data.pair.source.end());
  all.insert(all.end(), data.pair.target.begin(), data.pair.target.end());
  const auto dir = cfg.output_dir() / "dataset";
  write_dataset(dir, all, data.vocab, cfg.seed);
  if (log) log("generate: " + std::to_string(all.size()) + " benchmarks");
  CommandResult out{{dir / "manifest.json"}, "dataset " + dir.string() + "\n"};
  write_manifest_entry(cfg, out.files);
  return out;
}

}  // namespace viscop
