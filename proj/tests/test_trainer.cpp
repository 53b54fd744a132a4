#include <doctest.h>

#include <cmath>
#include <limits>

#include "support.hpp"
#include "viscop/errors.hpp"
#include "viscop/trainer.hpp"

using namespace viscop;

namespace {

VlmConfig scene_config(std::size_t vocab) {
  VlmConfig c;
  c.encoder.image_side = 16;
  c.encoder.d_v = 8;
  c.encoder.layers = 2;
  c.encoder.heads = 2;
  c.encoder.mlp_ratio = 2;
  c.connector.d_v = 8;
  c.connector.d_lm = 16;
  c.connector.hidden = 16;
  c.decoder.vocab = vocab;
  c.decoder.d_lm = 16;
  c.decoder.layers = 2;
  c.decoder.heads = 2;
  c.decoder.mlp_ratio = 2;
  c.decoder.context = 48;
  c.decoder.max_visual = 16;
  c.decoder.max_text = 12;
  return c;
}

struct Fixture {
  Vocabulary vocab = synthetic_vocabulary();
  Benchmark color = make_benchmark(40, DomainShift::identity, QuestionFamily::color, 3, {}, vocab);
  VlmConfig cfg = scene_config(vocab.size());

  std::vector<const QASample*> first(std::size_t n) const {
    std::vector<const QASample*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&color.train[i]);
    return out;
  }
};

TrainConfig quick(std::size_t epochs, std::size_t batch = 4) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch;
  t.seed = 5;
  return t;
}

double mean_loss(const VlmModel& m, const std::vector<const QASample*>& s) {
  double total = 0.0;
  for (const auto* q : s) total += m.loss(m.encode(q->frames), q->question, q->answer).item();
  return total / static_cast<double>(s.size());
}

}  // namespace

TEST_CASE("ten named presets with the expected groups") {
  CHECK(strategy_names().size() == 10);
  for (const auto& n : strategy_names()) CHECK_NOTHROW(strategy_preset(n, 6));
  CHECK_THROWS_AS(strategy_preset("nope", 6), ConfigError);
  auto v = strategy_preset("viscop", 6);
  CHECK(v.has(TrainGroup::viscop));
  CHECK(v.has(TrainGroup::llm_lora));
  CHECK_FALSE(v.has(TrainGroup::ve_full));
  CHECK(v.probes.placement.size() == 6);
  CHECK(strategy_preset("vp-only", 6).probes.placement.empty());
  CHECK(strategy_preset("qformer", 6).probes.placement == std::vector<std::size_t>{6});
  CHECK(train_group_from_string("VE-full") == TrainGroup::ve_full);
  CHECK(train_group_from_string("llm_lora") == TrainGroup::llm_lora);
  CHECK_THROWS_AS(train_group_from_string("everything"), ConfigError);
  CHECK_THROWS_AS(make_strategy("x", {}, 6), ConfigError);
}

TEST_CASE("gating per preset") {
  Fixture f;
  auto groups_of = [&](const std::string& name) {
    VlmModel m(f.cfg, 1);
    (void)apply_strategy(m, strategy_preset(name, 2), 1);
    std::map<ParamGroup, std::pair<std::size_t, std::size_t>> on_off;
    for (const auto& p : m.parameters()) (p.tensor.requires_grad() ? on_off[p.group].first : on_off[p.group].second)++;
    return on_off;
  };
  SUBCASE("vlc-only trains the connector only") {
    for (auto& [g, c] : groups_of("vlc-only")) {
      if (g == ParamGroup::connector) CHECK(c.second == 0);
      else CHECK(c.first == 0);
    }
  }
  SUBCASE("viscop freezes encoder and decoder") {
    auto on_off = groups_of("viscop");
    CHECK(on_off[ParamGroup::encoder].first == 0);
    CHECK(on_off[ParamGroup::decoder].first == 0);
    for (auto g : {ParamGroup::probes, ParamGroup::interaction, ParamGroup::probe_connector, ParamGroup::connector,
                   ParamGroup::decoder_lora}) {
      CHECK(on_off[g].first > 0);
      CHECK(on_off[g].second == 0);
    }
  }
  SUBCASE("vlc-ve-llm freezes nothing") {
    for (auto& [g, c] : groups_of("vlc-ve-llm")) CHECK(c.second == 0);
  }
  SUBCASE("last-k covers only the last layers") {
    VlmModel m(f.cfg, 1);
    auto s = strategy_preset("vlc-last4-llm-lora", 2);
    s.last_k = 1;
    (void)apply_strategy(m, s, 1);
    for (const auto& p : m.parameters())
      if (p.group == ParamGroup::encoder) CHECK(p.tensor.requires_grad() == (p.layer == 2));
  }
  SUBCASE("vp-only has no interaction parameters") {
    CHECK(groups_of("vp-only").count(ParamGroup::interaction) == 0);
  }
}

TEST_CASE("zero epochs leave the parameters bit-identical") {
  Fixture f;
  VlmModel m(f.cfg, 2);
  auto s = strategy_preset("vlc-ve-llm", 2);
  (void)apply_strategy(m, s, 2);
  const auto before = m.to_checkpoint().serialize();
  auto r = train(m, f.first(8), s, quick(0));
  CHECK(r.steps == 0);
  CHECK(m.to_checkpoint().serialize() == before);
}

TEST_CASE("frozen groups are bit-identical after training under every preset") {
  Fixture f;
  for (const auto& name : strategy_names()) {
    VlmModel m(f.cfg, 3);
    auto s = strategy_preset(name, 2);
    auto audit = apply_strategy(m, s, 3);
    auto tc = quick(1);
    tc.max_steps = 3;
    (void)train(m, f.first(12), s, tc);
    CHECK_MESSAGE(verify_frozen(m, audit).empty(), name);
  }
}

TEST_CASE("overfit smoke test: loss halves within 200 steps on 8 samples") {
  Fixture f;
  VlmModel m(f.cfg, 4);
  auto s = full_training_strategy();
  (void)apply_strategy(m, s, 4);
  auto data = f.first(8);
  const double before = mean_loss(m, data);
  auto tc = quick(100, 4);  // 2 steps per epoch
  auto r = train(m, data, s, tc);
  CHECK(r.steps == 200);
  CHECK(mean_loss(m, data) <= 0.5 * before);
  // A model that reproduces every gold answer scores 1.0 on those samples.
  std::vector<QASample> seen;
  for (const auto* q : data) seen.push_back(*q);
  if (mean_loss(m, data) < 0.05) CHECK(evaluate_accuracy(m, seen) == 1.0);
}

TEST_CASE("identical seeds give identical loss curves") {
  Fixture f;
  auto run = [&] {
    VlmModel m(f.cfg, 6);
    auto s = strategy_preset("viscop", 2);
    (void)apply_strategy(m, s, 6);
    auto tc = quick(2);
    return train(m, f.first(16), s, tc).loss_curve;
  };
  auto a = run(), b = run();
  CHECK(a.size() == 8);
  CHECK(a == b);
}

TEST_CASE("non-finite loss aborts with the step index") {
  Fixture f;
  VlmModel m(f.cfg, 7);
  auto s = strategy_preset("vlc-only", 2);
  (void)apply_strategy(m, s, 7);
  m.connector().w1.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    (void)train(m, f.first(8), s, quick(1));
    FAIL("expected NumericAbort");
  } catch (const NumericAbort& e) {
    CHECK(e.step() == 0);
  }
}

TEST_CASE("learning-rate schedule") {
  TrainConfig t;
  t.warmup_fraction = 0.1;
  CHECK(t.schedule(0, 100) == doctest::Approx(1.0 / 11.0));
  CHECK(t.schedule(9, 100) == doctest::Approx(10.0 / 11.0));
  CHECK(t.schedule(10, 100) == doctest::Approx(1.0));
  CHECK(t.schedule(55, 100) == doctest::Approx(0.5));
  t.cosine_decay = false;
  CHECK(t.schedule(90, 100) == 1.0);
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("accuracy guards and chance level") {
  Fixture f;
  VlmModel m(f.cfg, 8);
  CHECK_THROWS_AS(evaluate_accuracy(m, std::vector<QASample>{}), DegenerateBatchError);

  // Labels shuffled against the videos carry no information: a trained model
  // can do no better than the answer marginal.
  auto vocab = f.vocab;
  auto train_b = make_benchmark(200, DomainShift::identity, QuestionFamily::color, 11, {}, vocab);
  auto eval_b = make_benchmark(1000, DomainShift::identity, QuestionFamily::color, 12, {}, vocab);
  Rng rng(13);
  std::vector<QASample> shuffled = train_b.train;
  std::vector<std::size_t> idx(shuffled.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    shuffled[i].answer = train_b.train[idx[i]].answer;
    shuffled[i].answer_text = train_b.train[idx[i]].answer_text;
  }
  std::vector<const QASample*> ptrs;
  for (const auto& s : shuffled) ptrs.push_back(&s);
  auto s = full_training_strategy();
  (void)apply_strategy(m, s, 8);
  (void)train(m, ptrs, s, quick(4, 4));
  const double acc = evaluate_accuracy(m, eval_b);
  const double ci = 3.0 * std::sqrt(0.25 * 0.75 / static_cast<double>(eval_b.eval.size()));
  MESSAGE("chance accuracy " << acc);
  CHECK(acc > 0.25 - ci - 0.05);
  CHECK(acc < 0.25 + ci + 0.05);
}

TEST_CASE("trainable parameter counts are ordered on default configs") {
  VlmConfig cfg;
  cfg.decoder.vocab = synthetic_vocabulary().size();
  auto count = [&](const std::string& name) {
    VlmModel m(cfg, 1);
    return apply_strategy(m, strategy_preset(name, cfg.encoder.layers), 1).trainable_params;
  };
  const auto vlc = count("vlc-only"), lora = count("vlc-llm-lora"), vis = count("viscop"), all = count("vlc-ve-llm");
  CHECK(vlc < lora);
  CHECK(lora < vis);
  CHECK(vis < all);
  CHECK(count("qformer") < vis);
}
