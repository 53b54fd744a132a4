#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "viscop/errors.hpp"
#include "viscop/synthetic.hpp"

using namespace viscop;

namespace {

// Logistic regression on flattened pixels, full-batch gradient descent. Returns
// held-out accuracy of separating two renderings.
double linear_probe_accuracy(const std::vector<Video>& a, const std::vector<Video>& b) {
  const std::size_t d = a.front().pixels.size();
  const std::size_t n_train = a.size() * 3 / 4;
  std::vector<double> w(d, 0.0);
  double bias = 0.0;
  auto score = [&](const Video& v) {
    double s = bias;
    for (std::size_t k = 0; k < d; ++k) s += w[k] * v.pixels[k];
    return s;
  };
  for (int it = 0; it < 200; ++it) {
    std::vector<double> g(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n_train; ++i)
      for (int label = 0; label < 2; ++label) {
        const Video& v = label ? b[i] : a[i];
        const double p = 1.0 / (1.0 + std::exp(-score(v)));
        const double r = p - label;
        for (std::size_t k = 0; k < d; ++k) g[k] += r * v.pixels[k];
        gb += r;
      }
    const double lr = 0.5 / static_cast<double>(2 * n_train);
    for (std::size_t k = 0; k < d; ++k) w[k] -= lr * g[k];
    bias -= lr * gb;
  }
  std::size_t correct = 0, total = 0;
  for (std::size_t i = n_train; i < a.size(); ++i) {
    correct += score(a[i]) < 0;
    correct += score(b[i]) > 0;
    total += 2;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("scene generation is deterministic and bounded") {
  SceneOptions o;
  CHECK(generate_scene(5, o) == generate_scene(5, o));
  CHECK_FALSE(generate_scene(0, o) == generate_scene(1, o));
  for (std::uint64_t s = 0; s < 200; ++s) {
    auto spec = generate_scene(s, o);
    CHECK(spec.objects.size() >= 2);
    CHECK(spec.objects.size() <= 5);
    CHECK(spec.trajectory.size() == o.frames);
    CHECK(spec.trajectory.back() == spec.objects[spec.touched].cell);
    for (std::size_t t = 1; t < spec.trajectory.size(); ++t) {
      const auto a = spec.trajectory[t - 1], b = spec.trajectory[t];
      const auto step = (a.row > b.row ? a.row - b.row : b.row - a.row) + (a.col > b.col ? a.col - b.col : b.col - a.col);
      CHECK(step == 1);
    }
  }
  SceneOptions bad;
  bad.cell = 3;
  CHECK_THROWS_AS(generate_scene(0, bad), ConfigError);
  bad = {};
  bad.max_objects = 17;
  CHECK_THROWS_AS(generate_scene(0, bad), ConfigError);
}

TEST_CASE("renderings stay in [0,1] with the expected layout") {
  auto spec = generate_scene(11);
  for (auto shift : {DomainShift::identity, DomainShift::view, DomainShift::modality, DomainShift::task}) {
    Video v = render(spec, shift);
    CHECK(v.frames == 4);
    CHECK(v.channels == 3);
    CHECK(v.height == 16);
    for (double p : v.pixels) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }
  }
}

TEST_CASE("modality shift replicates one channel") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Video v = render(generate_scene(s), DomainShift::modality);
    for (std::size_t t = 0; t < v.frames; ++t)
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
          CHECK(v.at(t, 0, y, x) == v.at(t, 1, y, x));
          CHECK(v.at(t, 1, y, x) == v.at(t, 2, y, x));
        }
  }
}

TEST_CASE("view shift centres the actor marker in every frame") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto spec = generate_scene(s);
    Video v = render(spec, DomainShift::view);
    const auto rgb = palette_rgb(spec.actor_color);
    for (std::size_t t = 0; t < v.frames; ++t)
      for (std::size_t y = 6; y < 10; ++y)
        for (std::size_t x = 6; x < 10; ++x)
          for (std::size_t c = 0; c < 3; ++c) CHECK(v.at(t, c, y, x) == rgb[c]);
  }
}

TEST_CASE("source rendering draws the actor at its trajectory cell") {
  auto spec = generate_scene(3);
  Video v = render(spec, DomainShift::identity);
  const auto rgb = palette_rgb(spec.actor_color);
  for (std::size_t t = 0; t < v.frames; ++t) {
    const auto at = spec.trajectory[t];
    for (std::size_t c = 0; c < 3; ++c) CHECK(v.at(t, c, at.row * 4 + 1, at.col * 4 + 2) == rgb[c]);
  }
}

TEST_CASE("benchmarks split 80/20 with disjoint seeds and closed answers") {
  auto vocab = synthetic_vocabulary();
  auto b = make_benchmark(100, DomainShift::identity, QuestionFamily::region, 3, {}, vocab);
  CHECK(b.train.size() == 80);
  CHECK(b.eval.size() == 20);
  CHECK(b.name == "source/region");
  std::set<std::uint64_t> train_seeds;
  for (auto& s : b.train) train_seeds.insert(s.scene_seed);
  for (auto& s : b.eval) CHECK(train_seeds.count(s.scene_seed) == 0);
  for (auto& s : b.train) {
    CHECK(s.question.front() == Vocabulary::bos);
    CHECK(s.answer.back() == Vocabulary::eos);
    CHECK(std::binary_search(b.answer_set.begin(), b.answer_set.end(), s.answer_text));
  }
  CHECK(b.answer_set.size() == 4);
  CHECK_THROWS_AS(make_benchmark(19, DomainShift::identity, QuestionFamily::color, 3, {}, vocab), ConfigError);
  CHECK_THROWS_AS(make_benchmark(40, DomainShift::view, QuestionFamily::pick_place, 3, {}, vocab), ConfigError);
}

TEST_CASE("task shift answers are coordinate pairs") {
  auto vocab = synthetic_vocabulary();
  auto b = make_benchmark(40, DomainShift::task, QuestionFamily::pick_place, 1, {}, vocab);
  for (auto& s : b.train) {
    CHECK(s.answer.size() == 3);
    CHECK(s.answer_text.size() == 11);
    CHECK(s.answer_text[0] == '(');
  }
}

TEST_CASE("paired generation preserves labels and pair ids") {
  auto vocab = synthetic_vocabulary();
  for (auto shift : {DomainShift::view, DomainShift::modality}) {
    auto pair = make_domain_pair(shift, 120, 9, {}, vocab);
    REQUIRE(pair.source.size() == pair.target.size());
    for (std::size_t k = 0; k < pair.source.size(); ++k) {
      const auto& s = pair.source[k];
      const auto& t = pair.target[k];
      REQUIRE(s.eval.size() == t.eval.size());
      for (std::size_t i = 0; i < s.eval.size(); ++i) {
        CHECK(s.eval[i].pair_id == t.eval[i].pair_id);
        CHECK(s.eval[i].scene_seed == t.eval[i].scene_seed);
        CHECK(s.eval[i].answer == t.eval[i].answer);
        CHECK(s.eval[i].frames.pixels != t.eval[i].frames.pixels);
      }
    }
  }
  CHECK_THROWS_AS(make_domain_pair(DomainShift::identity, 120, 9, {}, vocab), ConfigError);
}

TEST_CASE("generation is byte-deterministic") {
  auto vocab = synthetic_vocabulary();
  auto a = make_benchmark(30, DomainShift::view, QuestionFamily::touch, 4, {}, vocab);
  auto b = make_benchmark(30, DomainShift::view, QuestionFamily::touch, 4, {}, vocab);
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(encode_video(a.train[i].frames) == encode_video(b.train[i].frames));
}

TEST_CASE("the visual shift is real and the label marginals match") {
  auto vocab = synthetic_vocabulary();
  for (auto shift : {DomainShift::view, DomainShift::modality}) {
    auto src = make_benchmark(160, DomainShift::identity, QuestionFamily::color, 21, {}, vocab);
    auto tgt = make_benchmark(160, shift, QuestionFamily::color, 21, {}, vocab);
    std::vector<Video> a, b;
    for (auto& s : src.train) a.push_back(s.frames);
    for (auto& s : tgt.train) b.push_back(s.frames);
    CHECK(linear_probe_accuracy(a, b) > 0.9);

    for (auto family : source_families()) {
      auto bs = make_benchmark(200, DomainShift::identity, family, 22, {}, vocab);
      auto bt = make_benchmark(200, shift, family, 22, {}, vocab);
      std::map<std::string, double> ms, mt;
      for (auto& s : bs.train) ms[s.answer_text] += 1.0 / bs.train.size();
      for (auto& s : bt.train) mt[s.answer_text] += 1.0 / bt.train.size();
      for (auto& [k, v] : ms) CHECK(std::abs(v - mt[k]) < 0.05);
    }
  }
}

TEST_CASE("answer marginals are not degenerate") {
  auto vocab = synthetic_vocabulary();
  for (auto family : source_families()) {
    auto b = make_benchmark(400, DomainShift::identity, family, 5, {}, vocab);
    std::map<std::string, std::size_t> counts;
    for (auto& s : b.train) ++counts[s.answer_text];
    CHECK(counts.size() == 4);
    for (auto& [k, c] : counts) CHECK(c > 40);
  }
}

TEST_CASE("dataset directory round trip") {
  auto vocab = synthetic_vocabulary();
  auto pair = make_domain_pair(DomainShift::modality, 60, 2, {}, vocab);
  std::vector<Benchmark> all = pair.source;
  all.insert(all.end(), pair.target.begin(), pair.target.end());
  const auto dir = std::filesystem::temp_directory_path() / "viscop_dataset_test";
  std::filesystem::remove_all(dir);
  write_dataset(dir, all, vocab, 2);
  Vocabulary back_vocab;
  auto back = read_dataset(dir, &back_vocab);
  CHECK(back_vocab == vocab);
  REQUIRE(back.size() == all.size());
  for (std::size_t k = 0; k < all.size(); ++k) {
    CHECK(back[k].name == all[k].name);
    REQUIRE(back[k].eval.size() == all[k].eval.size());
    for (std::size_t i = 0; i < all[k].eval.size(); ++i) {
      CHECK(back[k].eval[i].frames.pixels == all[k].eval[i].frames.pixels);
      CHECK(back[k].eval[i].answer == all[k].eval[i].answer);
      CHECK(back[k].eval[i].pair_id == all[k].eval[i].pair_id);
    }
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(read_dataset(dir), ConfigError);
}
