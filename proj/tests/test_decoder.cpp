#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "support.hpp"
#include "viscop/errors.hpp"
#include "viscop/vocabulary.hpp"

using namespace viscop;

namespace {

DecoderConfig small_decoder(std::size_t vocab = 16) {
  DecoderConfig c;
  c.vocab = vocab;
  c.d_lm = 8;
  c.layers = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.context = 40;
  c.max_visual = 16;
  c.max_text = 12;
  return c;
}

Tensor param(const Decoder& d, const std::string& name) {
  std::vector<NamedParameter> ps;
  d.collect(ps, "");
  for (auto& p : ps)
    if (p.name == name) return p.tensor;
  FAIL("no parameter " << name);
  return {};
}

PromptLayout prompt(Rng& rng, std::size_t vis = 4, std::size_t probes = 2) {
  PromptLayout l;
  l.visual = randn(rng, {vis, 8}, 1.0);
  if (probes) l.probes = randn(rng, {probes, 8}, 1.0);
  l.question = {1, 5, 6, 7};
  l.answer = {9, 10, 2};
  return l;
}

double max_abs_diff(const Tensor& a, const Tensor& b, std::size_t row_begin = 0, std::size_t row_end = SIZE_MAX) {
  double worst = 0.0;
  row_end = std::min(row_end, a.rows());
  for (std::size_t i = row_begin; i < row_end; ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) worst = std::max(worst, std::abs(a.at(i, j) - b.at(i, j)));
  return worst;
}

}  // namespace

TEST_CASE("answer targets cover only answer predictions") {
  Rng rng(1);
  auto l = prompt(rng);
  auto [targets, ignore] = answer_targets(l);
  REQUIRE(targets.size() == l.total_rows());
  std::size_t live = 0;
  for (std::size_t i = 0; i < ignore.size(); ++i) live += !ignore[i];
  CHECK(live == l.answer.size());
  const std::size_t first = l.prefix_rows() + l.question.size() - 1;
  for (std::size_t j = 0; j < l.answer.size(); ++j) {
    CHECK_FALSE(ignore[first + j]);
    CHECK(targets[first + j] == l.answer[j]);
  }
}

TEST_CASE("uniform logits give loss ln V") {
  Rng rng(2);
  Decoder d(small_decoder(16), rng);
  for (auto& v : param(d, "head").mutable_data()) v = 0.0;
  CHECK(sequence_loss(d, prompt(rng)).item() == doctest::Approx(std::log(16.0)).epsilon(1e-12));
}

TEST_CASE("loss ignores question targets") {
  Rng rng(3);
  Decoder d(small_decoder(), rng);
  auto l = prompt(rng);
  const double base = sequence_loss(d, l).item();
  auto [targets, ignore] = answer_targets(l);
  CHECK(ignore[l.prefix_rows()]);
  CHECK(targets[l.prefix_rows()] == l.question[1]);
  auto logits = d.forward(l);
  std::vector<std::size_t> alt = targets;
  for (std::size_t i = 0; i < alt.size(); ++i)
    if (ignore[i]) alt[i] = (alt[i] + 3) % 16;
  CHECK(cross_entropy(logits, alt, ignore).item() == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("answer logits depend on every visual row") {
  Rng rng(4);
  Decoder d(small_decoder(), rng);
  auto l = prompt(rng);
  Tensor base = d.forward(l);
  const std::size_t last = l.total_rows() - 1;
  for (std::size_t r = 0; r < l.visual_rows(); ++r) {
    PromptLayout p = l;
    p.visual = l.visual.clone();
    p.visual.mutable_data()[r * 8] += 0.5;
    Tensor out = d.forward(p);
    CHECK(max_abs_diff(out, base, last, last + 1) > 1e-9);
  }
}

TEST_CASE("causal mask: later answer tokens never change earlier logits") {
  Rng rng(5);
  Decoder d(small_decoder(), rng);
  auto l = prompt(rng);
  Tensor base = d.forward(l);
  PromptLayout p = l;
  p.answer[1] = 12;
  Tensor out = d.forward(p);
  const std::size_t pos = l.prefix_rows() + l.question.size() + 1;
  CHECK(max_abs_diff(out, base, 0, pos) == 0.0);
  CHECK(max_abs_diff(out, base, pos, pos + 1) > 1e-9);
}

TEST_CASE("inserting probe rows leaves text embeddings unchanged but adds context") {
  Rng rng(6);
  Decoder d(small_decoder(), rng);
  auto with = prompt(rng, 4, 3);
  PromptLayout without = with;
  without.probes = Tensor();
  Tensor a = d.forward(with), b = d.forward(without);
  CHECK(a.rows() == b.rows() + 3);
  // Visual rows come first and only attend to themselves.
  CHECK(max_abs_diff(slice_rows(a, 0, 4), slice_rows(b, 0, 4)) < 1e-12);
  CHECK(max_abs_diff(slice_rows(a, 7, b.rows() - 4), slice_rows(b, 4, b.rows() - 4)) > 1e-9);
}

TEST_CASE("LoRA with B = 0 reproduces the base logits") {
  Rng rng(7);
  Decoder d(small_decoder(), rng);
  auto l = prompt(rng);
  Tensor before = d.forward(l);
  Rng lr(8);
  d.attach_lora(lr, 4, 8.0);
  CHECK(d.has_lora());
  Tensor after = d.forward(l);
  for (std::size_t i = 0; i < before.numel(); ++i) CHECK(after.data()[i] == before.data()[i]);
  // Non-zero B moves the output; effective weight is W + (alpha/r) A B.
  auto& lq = *d.layers()[0].lora_q;
  CHECK(lq.scale == doctest::Approx(2.0));
  lq.b.mutable_data()[0] = 0.3;
  CHECK(max_abs_diff(d.forward(l), before) > 1e-9);
}

TEST_CASE("LoRA locality: frozen base decoder gets no gradient") {
  Rng rng(9);
  Decoder d(small_decoder(), rng);
  d.attach_lora(rng, 4, 8.0);
  std::vector<NamedParameter> ps;
  d.collect(ps, "");
  for (auto& p : ps) p.tensor.set_requires_grad(p.group == ParamGroup::decoder_lora);
  // B = 0 would zero A's gradient; give B a value so both factors see one.
  for (auto& p : ps)
    if (p.group == ParamGroup::decoder_lora) p.tensor.mutable_data()[0] = 0.1;
  GradTape tape;
  {
    TapeScope scope(tape);
    tape.backward(sequence_loss(d, prompt(rng)));
  }
  for (auto& p : ps) {
    if (p.group == ParamGroup::decoder_lora) CHECK_MESSAGE(p.tensor.has_grad(), p.name);
    else CHECK_MESSAGE(!p.tensor.has_grad(), p.name);
  }
}

TEST_CASE("decoder gradients match finite differences") {
  Rng rng(10);
  Decoder d(small_decoder(), rng);
  d.attach_lora(rng, 2, 4.0);
  auto l = prompt(rng, 2, 1);
  std::vector<NamedParameter> ps;
  d.collect(ps, "");
  for (auto& p : ps)
    if (p.name.find("lora_q.b") != std::string::npos || p.name.find("lora_v.b") != std::string::npos) {
      for (auto& v : p.tensor.mutable_data()) v = 0.05;
    }
  std::vector<Tensor> inputs{l.visual, l.probes};
  for (auto& p : ps) inputs.push_back(p.tensor);
  CHECK(viscop::testing::gradient_check([&] { return sequence_loss(d, l); }, inputs) < 1e-4);
}

TEST_CASE("context overflow and empty answers are rejected") {
  Rng rng(11);
  Decoder d(small_decoder(), rng);
  auto l = prompt(rng, 16, 0);
  l.probes = randn(rng, {30, 8}, 1.0);
  CHECK_THROWS_AS((void)d.forward(l), ContractError);
  auto e = prompt(rng);
  e.answer.clear();
  CHECK_THROWS_AS((void)sequence_loss(d, e), DegenerateBatchError);
  auto w = prompt(rng);
  w.visual = randn(rng, {2, 5}, 1.0);
  CHECK_THROWS_AS((void)d.forward(w), DimensionError);
}

TEST_CASE("greedy decoding is deterministic and works without probes") {
  Rng rng(12);
  Decoder d(small_decoder(), rng);
  auto l = prompt(rng);
  auto a = generate_greedy(d, l.visual, l.probes, l.question, 4);
  auto b = generate_greedy(d, l.visual, l.probes, l.question, 4);
  CHECK(a == b);
  CHECK(a.size() <= 4);
  auto c = generate_greedy(d, l.visual, Tensor(), l.question, 4);
  CHECK(c.size() <= 4);
  CHECK_THROWS_AS(generate_greedy(d, l.visual, l.probes, l.question, 0), ContractError);
}

TEST_CASE("overfitting a single sample reaches near-zero loss and decodes it exactly") {
  Rng rng(13);
  Decoder d(small_decoder(), rng);
  auto l = prompt(rng, 2, 0);
  std::vector<NamedParameter> ps;
  d.collect(ps, "");
  std::vector<Tensor> ts;
  for (auto& p : ps) {
    p.tensor.set_requires_grad(true);
    ts.push_back(p.tensor);
  }
  // Plain Adam, written out so this test does not depend on the trainer.
  std::vector<std::vector<double>> m(ts.size()), v(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) m[i].assign(ts[i].numel(), 0.0), v[i].assign(ts[i].numel(), 0.0);
  double loss = 0.0, loss50 = 0.0;
  for (int step = 1; step <= 500; ++step) {
    GradTape tape;
    {
      TapeScope scope(tape);
      Tensor lt = sequence_loss(d, l);
      loss = lt.item();
      tape.backward(lt);
    }
    if (step == 50) loss50 = loss;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (!ts[i].has_grad()) continue;
      auto g = ts[i].grad();
      auto w = ts[i].mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[i][k] = 0.9 * m[i][k] + 0.1 * g[k];
        v[i][k] = 0.999 * v[i][k] + 0.001 * g[k] * g[k];
        const double mh = m[i][k] / (1 - std::pow(0.9, step)), vh = v[i][k] / (1 - std::pow(0.999, step));
        w[k] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
      }
      ts[i].clear_grad();
    }
  }
  CHECK(loss < 1e-3);
  CHECK(loss < loss50);
  for (auto& t : ts) t.set_requires_grad(false);
  std::vector<std::size_t> gold(l.answer.begin(), l.answer.end() - 1);
  CHECK(generate_greedy(d, l.visual, Tensor(), l.question, 4) == gold);
}

TEST_CASE("vocabulary round trip and reserved ids") {
  Vocabulary v({"red", "blue"});
  CHECK(v.id("red") == 4);
  CHECK(v.encode("red green blue") == std::vector<std::size_t>{4, Vocabulary::unk, 5});
  CHECK(v.decode({4, 5}) == "red blue");
  CHECK(Vocabulary::from_json(v.to_json()) == v);
}

TEST_CASE("checkpoint serialization round trip") {
  auto cfg = viscop::testing::toy_config();
  VlmModel m(cfg, 3);
  Rng rng(4);
  m.attach_probes(ProbeOptions{4, {1, 2}}, rng);
  m.attach_decoder_lora(rng, 2, 4.0);
  auto bytes = m.to_checkpoint().serialize();
  auto back = VlmModel::from_checkpoint(Checkpoint::deserialize(bytes));
  CHECK(back.to_checkpoint().serialize() == bytes);
  auto video = viscop::testing::random_video(rng, 2, 8);
  auto acts = m.encode(video);
  auto a = m.loss(acts, {1, 4, 5}, {6, 2}).item();
  auto b = back.loss(back.encode(video), {1, 4, 5}, {6, 2}).item();
  CHECK(a == b);

  const auto path = std::filesystem::temp_directory_path() / "viscop_ck_test.bin";
  m.to_checkpoint().save(path);
  CHECK(Checkpoint::load(path).serialize() == bytes);
  std::filesystem::remove(path);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(Checkpoint::deserialize(bad), ConfigError);
  auto cut = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 5);
  CHECK_THROWS_AS(Checkpoint::deserialize(cut), ConfigError);
}
