#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "viscop/errors.hpp"
#include "viscop/probes.hpp"
#include "viscop/trainer.hpp"

using namespace viscop;

namespace {

EncoderConfig small_encoder(std::size_t layers = 2, std::size_t heads = 2) {
  EncoderConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.d_v = 8;
  c.layers = layers;
  c.heads = heads;
  c.mlp_ratio = 2;
  return c;
}

Tensor eye(std::size_t d) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  return Tensor({d, d}, std::move(v));
}

InteractionModule identity_module(std::size_t d, AttentionScope scope = AttentionScope::spatio_temporal) {
  InteractionModule m;
  m.layer = 1;
  m.heads = 1;
  m.weights = {eye(d), eye(d), eye(d), eye(d)};
  m.scope = scope;
  return m;
}

// Plain-loop multi-head cross-attention: softmax((P Wq_h)(X Wk_h)^T / sqrt(d_h)) (X Wv_h), concat, Wo.
std::vector<double> reference_cross_attention(const Tensor& p, const Tensor& x, const AttentionWeights& w,
                                              std::size_t heads) {
  const std::size_t M = p.rows(), R = x.rows(), d = p.cols(), dh = d / heads;
  auto proj = [](const Tensor& a, const Tensor& m) {
    std::vector<double> out(a.rows() * m.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t k = 0; k < a.cols(); ++k)
        for (std::size_t j = 0; j < m.cols(); ++j) out[i * m.cols() + j] += a.at(i, k) * m.at(k, j);
    return out;
  };
  auto q = proj(p, w.wq), k = proj(x, w.wk), v = proj(x, w.wv);
  std::vector<double> cat(M * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < M; ++i) {
      std::vector<double> s(R);
      double mx = -INFINITY;
      for (std::size_t r = 0; r < R; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i * d + h * dh + c] * k[r * d + h * dh + c];
        s[r] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[r]);
      }
      double z = 0.0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < dh; ++c) cat[i * d + h * dh + c] += s[r] / z * v[r * d + h * dh + c];
    }
  }
  std::vector<double> out(M * d, 0.0);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k2 = 0; k2 < d; ++k2)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += cat[i * d + k2] * w.wo.at(k2, j);
  return out;
}

}  // namespace

TEST_CASE("probe bank initialization") {
  Rng rng(1);
  auto bank = ProbeBank::create(rng, 400, 8, 0.02);
  CHECK(bank.count() == 400);
  double s2 = 0.0;
  for (double v : bank.probes.data()) s2 += v * v;
  CHECK(std::sqrt(s2 / 3200.0) == doctest::Approx(0.02).epsilon(0.05));
  CHECK_THROWS_AS(ProbeBank::create(rng, 0, 8, 0.02), ConfigError);
}

TEST_CASE("init_interaction deep-copies the encoder layer") {
  Rng rng(2);
  VisionEncoder enc(small_encoder(), rng);
  ProbeOptions opt;
  auto phi1 = init_interaction(enc, 1, opt);
  auto phi2 = init_interaction(enc, 2, opt);
  CHECK(phi1.heads == 2);
  const double before = phi1.weights.wq.data()[0];
  CHECK(before == enc.layer(1).attn.wq.data()[0]);
  enc.layers()[0].attn.wq.mutable_data()[0] += 1.0;
  CHECK(phi1.weights.wq.data()[0] == before);
  CHECK_FALSE(phi1.weights.wq.same_storage(enc.layer(1).attn.wq));
  CHECK(phi1.weights.wk.data()[0] != phi2.weights.wk.data()[0]);
  CHECK_THROWS_AS(init_interaction(enc, 0, opt), DimensionError);
  CHECK_THROWS_AS(init_interaction(enc, 3, opt), DimensionError);
}

TEST_CASE("fresh interaction module matches a direct attention evaluation") {
  Rng rng(3);
  VisionEncoder enc(small_encoder(), rng);
  auto acts = enc.encode(viscop::testing::random_video(rng, 2, 8));
  auto phi = init_interaction(enc, 2, ProbeOptions{});
  Tensor p = randn(rng, {3, 8}, 0.5);
  auto got = interaction_step(phi, p, acts.at_layer(2), 2);
  auto ref = reference_cross_attention(p, acts.at_layer(2), enc.layer(2).attn, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(got.data()[i] - (p.data()[i] + ref[i])) < 1e-12);
}

TEST_CASE("single token: attention weight one, output P + v") {
  auto phi = identity_module(4);
  Tensor p = Tensor::matrix(1, 4, {0.1, -0.2, 0.3, 0.0});
  Tensor x = Tensor::matrix(1, 4, {1.0, 2.0, 3.0, 4.0});
  std::vector<Tensor> attn;
  auto out = interaction_step(phi, p, x, 1, &attn);
  REQUIRE(attn.size() == 1);
  CHECK(attn[0].at(0, 0) == 1.0);
  for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(out.at(0, j) - (p.at(0, j) + x.at(0, j))) < 1e-15);
}

TEST_CASE("query orthogonal to both keys gives the value mean") {
  auto phi = identity_module(4);
  Tensor p = Tensor::matrix(1, 4, {1, 0, 0, 0});
  Tensor x = Tensor::matrix(2, 4, {0, 2, 0, 0, 0, 0, 4, 0});
  auto out = interaction_step(phi, p, x, 1);
  CHECK(out.at(0, 0) == doctest::Approx(1.0));
  CHECK(out.at(0, 1) == doctest::Approx(1.0));
  CHECK(out.at(0, 2) == doctest::Approx(2.0));
  CHECK(out.at(0, 3) == doctest::Approx(0.0));
}

TEST_CASE("duplicate frames: spatio-temporal equals spatial-only") {
  Rng rng(4);
  VisionEncoder enc(small_encoder(), rng);
  Video one = viscop::testing::random_video(rng, 1, 8);
  Video dup(2, 3, 8, 8);
  std::copy(one.pixels.begin(), one.pixels.end(), dup.pixels.begin());
  std::copy(one.pixels.begin(), one.pixels.end(), dup.pixels.begin() + static_cast<long>(one.pixels.size()));
  auto acts = enc.encode(dup);
  ProbeOptions st, sp;
  sp.scope = AttentionScope::spatial_only;
  Tensor p = randn(rng, {3, 8}, 0.3);
  auto a = interaction_step(init_interaction(enc, 1, st), p, acts.at_layer(1), 2);
  auto b = interaction_step(init_interaction(enc, 1, sp), p, acts.at_layer(1), 2);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-12);
}

TEST_CASE("spatial-only scope attends per frame and averages") {
  Rng rng(5);
  VisionEncoder enc(small_encoder(), rng);
  auto acts = enc.encode(viscop::testing::random_video(rng, 2, 8));
  ProbeOptions sp;
  sp.scope = AttentionScope::spatial_only;
  auto phi = init_interaction(enc, 1, sp);
  Tensor p = randn(rng, {2, 8}, 0.3);
  std::vector<Tensor> attn;
  auto out = interaction_step(phi, p, acts.at_layer(1), 2, &attn);
  auto f0 = reference_cross_attention(p, slice_rows(acts.at_layer(1), 0, 4), phi.weights, 2);
  auto f1 = reference_cross_attention(p, slice_rows(acts.at_layer(1), 4, 4), phi.weights, 2);
  for (std::size_t i = 0; i < f0.size(); ++i)
    CHECK(std::abs(out.data()[i] - (p.data()[i] + 0.5 * (f0[i] + f1[i]))) < 1e-12);
  for (const auto& h : attn)
    for (std::size_t i = 0; i < 2; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 8; ++j) s += h.at(i, j);
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("non-residual and literal scaling variants") {
  auto phi = identity_module(4);
  phi.residual = false;
  Tensor p = Tensor::matrix(1, 4, {0.5, 0, 0, 0});
  Tensor x = Tensor::matrix(1, 4, {1.0, 2.0, 3.0, 4.0});
  auto out = interaction_step(phi, p, x, 1);
  for (std::size_t j = 0; j < 4; ++j) CHECK(out.at(0, j) == doctest::Approx(x.at(0, j)));

  Rng rng(6);
  VisionEncoder enc(small_encoder(1, 2), rng);
  auto acts = enc.encode(viscop::testing::random_video(rng, 1, 8));
  ProbeOptions a, b;
  b.per_head_scaling = false;
  Tensor q = randn(rng, {2, 8}, 1.0);
  auto ya = interaction_step(init_interaction(enc, 1, a), q, acts.at_layer(1), 1);
  auto yb = interaction_step(init_interaction(enc, 1, b), q, acts.at_layer(1), 1);
  double diff = 0.0;
  for (std::size_t i = 0; i < ya.numel(); ++i) diff += std::abs(ya.data()[i] - yb.data()[i]);
  CHECK(diff > 1e-9);
}

TEST_CASE("interaction_step rejects width mismatch") {
  auto phi = identity_module(4);
  CHECK_THROWS_AS(interaction_step(phi, Tensor::zeros({1, 3}), Tensor::zeros({2, 4}), 1), DimensionError);
  CHECK_THROWS_AS(interaction_step(phi, Tensor::zeros({1, 4}), Tensor::zeros({2, 3}), 1), DimensionError);
}

TEST_CASE("run_probes composes interaction steps in layer order") {
  Rng rng(7);
  VisionEncoder enc(small_encoder(2, 2), rng);
  auto acts = enc.encode(viscop::testing::random_video(rng, 2, 8));
  ProbeOptions opt;
  auto bank = ProbeBank::create(rng, 3, 8, 0.02);
  std::vector<InteractionModule> mods{init_interaction(enc, 1, opt), init_interaction(enc, 2, opt)};
  auto manual = interaction_step(mods[1], interaction_step(mods[0], bank.probes, acts.at_layer(1), 2),
                                 acts.at_layer(2), 2);
  ProbeTrace trace;
  auto out = run_probes(bank, mods, acts, &trace);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == manual.data()[i]);
  CHECK(trace.layers == std::vector<std::size_t>{1, 2});
  CHECK(trace.attention.size() == 2);

  // QFormer-style placement: only the last layer.
  std::vector<InteractionModule> last{init_interaction(enc, 2, opt)};
  auto q = run_probes(bank, last, acts);
  auto q_manual = interaction_step(last[0], bank.probes, acts.at_layer(2), 2);
  for (std::size_t i = 0; i < q.numel(); ++i) CHECK(q.data()[i] == q_manual.data()[i]);
}

TEST_CASE("zero output projections leave the probes unchanged") {
  Rng rng(8);
  VisionEncoder enc(small_encoder(2, 2), rng);
  auto acts = enc.encode(viscop::testing::random_video(rng, 1, 8));
  auto bank = ProbeBank::create(rng, 4, 8, 0.02);
  std::vector<InteractionModule> mods{init_interaction(enc, 1, {}), init_interaction(enc, 2, {})};
  for (auto& m : mods)
    for (auto& v : m.weights.wo.mutable_data()) v = 0.0;
  auto out = run_probes(bank, mods, acts);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == bank.probes.data()[i]);
}

TEST_CASE("probe output depends on every placed layer") {
  Rng rng(9);
  VisionEncoder enc(small_encoder(3, 2), rng);
  auto acts = enc.encode(viscop::testing::random_video(rng, 1, 8));
  auto bank = ProbeBank::create(rng, 2, 8, 0.5);
  std::vector<InteractionModule> mods{init_interaction(enc, 1, {}), init_interaction(enc, 3, {})};
  auto base = run_probes(bank, mods, acts);
  for (std::size_t l : {1u, 3u}) {
    LayerActivations z = acts;
    z.layers[l - 1] = Tensor::zeros(acts.layers[l - 1].shape());
    auto out = run_probes(bank, mods, z);
    double diff = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) diff += std::abs(out.data()[i] - base.data()[i]);
    CHECK(diff > 1e-9);
  }
  // Layer 2 carries no module: zeroing it has no effect.
  LayerActivations z = acts;
  z.layers[1] = Tensor::zeros(acts.layers[1].shape());
  auto same = run_probes(bank, mods, z);
  for (std::size_t i = 0; i < same.numel(); ++i) CHECK(same.data()[i] == base.data()[i]);
}

TEST_CASE("attention weights are invariant to a constant logit shift") {
  Rng rng(10);
  Tensor logits = randn(rng, {3, 5}, 1.0);
  Tensor shifted = add(logits, Tensor::full({3, 5}, 7.5));
  auto a = softmax_rows(logits), b = softmax_rows(shifted);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-12);
}

TEST_CASE("placement helpers") {
  CHECK(placement_every(6, 1) == std::vector<std::size_t>{1, 2, 3, 4, 5, 6});
  CHECK(placement_every(6, 2) == std::vector<std::size_t>{2, 4, 6});
  CHECK(placement_every(6, 3) == std::vector<std::size_t>{3, 6});
  CHECK(placement_every(5, 2) == std::vector<std::size_t>{1, 3, 5});
  CHECK(placement_last(6) == std::vector<std::size_t>{6});
}

TEST_CASE("gating: encoder gets no gradient, probes and interaction modules do") {
  auto cfg = viscop::testing::toy_config();
  VlmModel model(cfg, 11);
  auto strategy = strategy_preset("viscop", cfg.encoder.layers);
  (void)apply_strategy(model, strategy, 11);
  Rng rng(12);
  auto acts = model.encode(viscop::testing::random_video(rng, 2, 8));
  GradTape tape;
  {
    TapeScope scope(tape);
    tape.backward(model.loss(acts, {1, 4, 5}, {6, 2}));
  }
  for (const auto& p : model.parameters()) {
    if (p.group == ParamGroup::encoder || p.group == ParamGroup::decoder) {
      CHECK_MESSAGE(!p.tensor.has_grad(), p.name);
    }
    if (p.group == ParamGroup::probes || p.group == ParamGroup::interaction) {
      CHECK_MESSAGE(p.tensor.has_grad(), p.name);
    }
  }
}

TEST_CASE("interaction parameter count is placement size times 4 d_v^2") {
  auto cfg = viscop::testing::toy_config();
  const std::size_t d = cfg.encoder.d_v;
  VlmModel full(cfg, 1), last(cfg, 1);
  (void)apply_strategy(full, strategy_preset("viscop", 2), 1);
  (void)apply_strategy(last, strategy_preset("qformer", 2), 1);
  auto interaction = [](const NamedParameter& p) { return p.group == ParamGroup::interaction; };
  CHECK(full.parameter_count(interaction) == 2 * 4 * d * d);
  CHECK(last.parameter_count(interaction) == 1 * 4 * d * d);
  auto trainable = [](const NamedParameter& p) { return p.tensor.requires_grad(); };
  CHECK(last.parameter_count(trainable) < full.parameter_count(trainable));
}
