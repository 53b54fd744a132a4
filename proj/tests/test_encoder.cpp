#include <doctest.h>

#include "support.hpp"
#include "viscop/errors.hpp"
#include "viscop/vision_encoder.hpp"

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

void zero(Tensor t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST_CASE("patchify counts and ordering") {
  EncoderConfig c = small_encoder();
  Video one(1, 3, 8, 8);
  for (std::size_t i = 0; i < one.pixels.size(); ++i) one.pixels[i] = static_cast<double>(i);
  Tensor p = patchify(one, c);
  CHECK(p.shape() == Shape{4, 48});
  // Patch (0,1) starts at pixel x=4 of channel 0, row 0.
  CHECK(p.at(1, 0) == one.at(0, 0, 0, 4));
  CHECK(p.at(2, 0) == one.at(0, 0, 4, 0));
  CHECK(p.at(3, 16) == one.at(0, 1, 4, 4));

  Video two(2, 3, 8, 8);
  for (std::size_t i = 0; i < two.pixels.size(); ++i) two.pixels[i] = static_cast<double>(i);
  Tensor q = patchify(two, c);
  CHECK(q.shape() == Shape{8, 48});
  for (std::size_t r = 0; r < 4; ++r) CHECK(q.at(r, 0) == two.at(0, 0, (r / 2) * 4, (r % 2) * 4));
  CHECK(q.at(4, 0) == two.at(1, 0, 0, 0));
}

TEST_CASE("patchify of a constant frame gives identical rows") {
  Tensor p = patchify(Video(1, 3, 8, 8, 0.3), small_encoder());
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t k = 0; k < 48; ++k) CHECK(p.at(r, k) == p.at(0, k));
}

TEST_CASE("patchify rejects wrong spatial size") {
  CHECK_THROWS_AS(patchify(Video(1, 3, 12, 12), small_encoder()), DimensionError);
  CHECK_THROWS_AS(patchify(Video(1, 1, 8, 8), small_encoder()), DimensionError);
}

TEST_CASE("encoder config validation") {
  EncoderConfig c = small_encoder();
  c.image_side = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_encoder();
  c.d_v = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("encode returns L equal-shape layers") {
  Rng rng(1);
  VisionEncoder enc(small_encoder(3), rng);
  auto acts = enc.encode(viscop::testing::random_video(rng, 2, 8));
  CHECK(acts.layers.size() == 3);
  CHECK(acts.frames == 2);
  CHECK(acts.tokens_per_frame == 4);
  for (const auto& x : acts.layers) CHECK(x.shape() == Shape{8, 8});
  CHECK_THROWS_AS((void)enc.layer(0), DimensionError);
  CHECK_THROWS_AS((void)enc.layer(4), DimensionError);
}

TEST_CASE("frames are encoded independently") {
  Rng rng(2);
  VisionEncoder enc(small_encoder(), rng);
  Video one = viscop::testing::random_video(rng, 1, 8);
  Video dup(2, 3, 8, 8);
  std::copy(one.pixels.begin(), one.pixels.end(), dup.pixels.begin());
  std::copy(one.pixels.begin(), one.pixels.end(), dup.pixels.begin() + static_cast<long>(one.pixels.size()));
  auto acts = enc.encode(dup);
  for (const auto& x : acts.layers)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t k = 0; k < 8; ++k) CHECK(x.at(r, k) == x.at(r + 4, k));
}

TEST_CASE("permuting frames permutes token blocks") {
  Rng rng(3);
  VisionEncoder enc(small_encoder(), rng);
  Video v = viscop::testing::random_video(rng, 3, 8);
  Video p(3, 3, 8, 8);
  const std::size_t per = 3 * 8 * 8;
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t t = 0; t < 3; ++t)
    std::copy_n(v.pixels.begin() + static_cast<long>(perm[t] * per), per, p.pixels.begin() + static_cast<long>(t * per));
  auto a = enc.encode(v), b = enc.encode(p);
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t k = 0; k < 8; ++k) CHECK(b.layers[l].at(t * 4 + r, k) == a.layers[l].at(perm[t] * 4 + r, k));
}

TEST_CASE("self-attention is block diagonal and row stochastic") {
  Rng rng(4);
  VisionEncoder enc(small_encoder(2, 2), rng);
  std::vector<std::vector<Tensor>> attn;
  (void)enc.encode(viscop::testing::random_video(rng, 2, 8), &attn);
  REQUIRE(attn.size() == 2);
  for (const auto& heads : attn) {
    CHECK(heads.size() == 2);
    for (const auto& h : heads) {
      for (std::size_t i = 0; i < 8; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
          if (i / 4 != j / 4) CHECK(h.at(i, j) == 0.0);
          s += h.at(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("with zero output projection and zero MLP the layer is the identity") {
  Rng rng(5);
  VisionEncoder enc(small_encoder(1, 1), rng);
  auto& layer = enc.layers()[0];
  zero(layer.attn.wo);
  zero(layer.mlp_w2);
  zero(layer.mlp_b2);
  Video v = viscop::testing::random_video(rng, 1, 8);
  auto x1 = enc.encode(v).layers[0];
  auto emb = enc.embed_patches(v);
  for (std::size_t i = 0; i < x1.numel(); ++i) CHECK(x1.data()[i] == emb.data()[i]);
}

TEST_CASE("identical tokens: attention averages identical values") {
  // All patch rows equal (constant frame, zero positional embedding), so every
  // attention row averages copies of the same value: X1 = x + LN(x) Wv Wo.
  Rng rng(6);
  VisionEncoder enc(small_encoder(1, 1), rng);
  auto params = std::vector<NamedParameter>{};
  enc.collect(params, "");
  for (auto& p : params)
    if (p.name == "pos") zero(p.tensor);
  auto& layer = enc.layers()[0];
  zero(layer.mlp_w2);
  zero(layer.mlp_b2);
  Video v(1, 3, 8, 8, 0.7);
  auto x = enc.embed_patches(v);
  auto x1 = enc.encode(v).layers[0];
  // Hand evaluation on one row.
  const std::size_t d = 8;
  std::vector<double> row(x.data().begin(), x.data().begin() + d);
  double mu = 0, var = 0;
  for (double r : row) mu += r / d;
  for (double r : row) var += (r - mu) * (r - mu) / d;
  std::vector<double> ln(d), val(d, 0.0), out(d, 0.0);
  for (std::size_t k = 0; k < d; ++k)
    ln[k] = (row[k] - mu) / std::sqrt(var + 1e-5) * layer.ln1_gain[k] + layer.ln1_bias[k];
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k) val[j] += ln[k] * layer.attn.wv.at(k, j);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k) out[j] += val[k] * layer.attn.wo.at(k, j);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(x1.at(r, j) - (row[j] + out[j])) < 1e-12);
}
