#include <doctest.h>

#include <cmath>

#include "attmask/error.hpp"
#include "attmask/ops.hpp"
#include "attmask/vit.hpp"
#include "support.hpp"

using attmask::EncoderConfig;
using attmask::ImageBatch;
using attmask::ParamSet;
using attmask::Rng;
using attmask::Tensor;

namespace {

EncoderConfig micro() {
  EncoderConfig c;
  c.image_side = 8;
  c.channels = 1;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.depth = 2;
  c.mlp_ratio = 2;
  c.out_dim = 8;
  c.head_hidden = 16;
  c.head_bottleneck = 4;
  return c;
}

ImageBatch<double> random_images(std::size_t count, int side, int channels, Rng& rng) {
  ImageBatch<double> b{count, side, channels, {}};
  b.pixels.resize(count * static_cast<std::size_t>(side * side * channels));
  for (auto& p : b.pixels) p = rng.normal();
  return b;
}

void zero(ParamSet<double>& p, const std::string& name) {
  for (auto& v : p.at(name).mutable_data()) v = 0;
}

}  // namespace

TEST_SUITE("vit") {

TEST_CASE("config validation") {
  auto c = micro();
  CHECK_NOTHROW(c.validate());
  c.patch_size = 3;
  CHECK_THROWS_AS(c.validate(), attmask::ConfigError);
  c = micro();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), attmask::ConfigError);
}

TEST_CASE("tokenize shape and zero image") {
  const auto cfg = micro();
  auto params = attmask::init_vit_params<double>(cfg, Rng(1));
  ImageBatch<double> img{1, 8, 1, std::vector<double>(64, 0.0)};
  const auto seq = attmask::tokenize(img, params, cfg);
  CHECK(seq.num_patches == 4);
  CHECK(seq.seq_len() == 5);
  CHECK(seq.tokens.rows() == 5);
  const auto cls = params.at("cls_token").data();
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(seq.tokens.at(0, j) == cls[j]);
    for (std::size_t r = 1; r < 5; ++r) CHECK(seq.tokens.at(r, j) == 0.0);
  }
}

TEST_CASE("patch extraction follows (row, col, channel) order") {
  auto cfg = micro();
  cfg.channels = 2;
  auto params = attmask::init_vit_params<double>(cfg, Rng(2));
  Rng rng(3);
  const auto img = random_images(1, 8, 2, rng);
  const auto seq = attmask::tokenize(img, params, cfg);
  const auto w = params.at("patch_embed.weight");  // [32 x 8]
  const auto b = params.at("patch_embed.bias").data();
  for (int t = 0; t < 4; ++t) {
    const int gy = t / 2, gx = t % 2;
    for (std::size_t j = 0; j < 8; ++j) {
      double acc = b[j];
      std::size_t f = 0;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
          for (int ch = 0; ch < 2; ++ch, ++f)
            acc += img.pixels[static_cast<std::size_t>(((gy * 4 + y) * 8 + gx * 4 + x) * 2 + ch)] * w.at(f, j);
      CHECK(seq.tokens.at(static_cast<std::size_t>(1 + t), j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("spatially permuting patches permutes tokens") {
  const auto cfg = micro();
  auto params = attmask::init_vit_params<double>(cfg, Rng(4));
  Rng rng(5);
  const auto img = random_images(1, 8, 1, rng);
  const int perm[4] = {2, 0, 3, 1};  // patch t moves to slot perm[t]
  ImageBatch<double> moved = img;
  for (int t = 0; t < 4; ++t) {
    const int sy = t / 2, sx = t % 2, dy = perm[t] / 2, dx = perm[t] % 2;
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        moved.pixels[static_cast<std::size_t>((dy * 4 + y) * 8 + dx * 4 + x)] =
            img.pixels[static_cast<std::size_t>((sy * 4 + y) * 8 + sx * 4 + x)];
  }
  const auto a = attmask::tokenize(img, params, cfg);
  const auto b = attmask::tokenize(moved, params, cfg);
  for (int t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(b.tokens.at(static_cast<std::size_t>(1 + perm[t]), j) == a.tokens.at(static_cast<std::size_t>(1 + t), j));
}

TEST_CASE("position embeddings at the base grid and with a zero table") {
  const auto cfg = micro();
  auto params = attmask::init_vit_params<double>(cfg, Rng(6));
  Rng rng(7);
  const auto seq = attmask::tokenize(random_images(2, 8, 1, rng), params, cfg);
  const auto out = attmask::add_position_embeddings(seq, params, cfg);
  const auto pos = params.at("pos_embed");
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(out.tokens.at(r, j) == seq.tokens.at(r, j) + pos.at(r % 5, j));
  zero(params, "pos_embed");
  const auto same = attmask::add_position_embeddings(seq, params, cfg);
  for (std::size_t i = 0; i < seq.tokens.numel(); ++i) CHECK(same.tokens[i] == seq.tokens[i]);
}

TEST_CASE("position table resized 4x4 -> 2x2 matches a direct bilinear oracle") {
  auto cfg = micro();
  cfg.image_side = 16;  // 4x4 base grid
  auto params = attmask::init_vit_params<double>(cfg, Rng(8));
  ImageBatch<double> small{1, 8, 1, std::vector<double>(64, 0.0)};  // 2x2 grid
  zero(params, "patch_embed.weight");
  zero(params, "patch_embed.bias");
  const auto seq = attmask::tokenize(small, params, cfg);
  const auto out = attmask::add_position_embeddings(seq, params, cfg);
  const auto pos = params.at("pos_embed");
  // Half-pixel centres: output cell i samples base coordinate 2i + 0.5, i.e.
  // the equal-weight average of base cells 2i and 2i+1 along each axis.
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox)
      for (std::size_t j = 0; j < 8; ++j) {
        double expect = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            expect += 0.25 * pos.at(static_cast<std::size_t>(1 + (2 * oy + dy) * 4 + 2 * ox + dx), j);
        const double cls = params.at("cls_token").data()[j];
        CHECK(out.tokens.at(static_cast<std::size_t>(1 + oy * 2 + ox), j) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(out.tokens.at(0, j) == doctest::Approx(cls + pos.at(0, j)));
      }
  const auto m = attmask::bilinear_resize_matrix(3, 3);
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 9; ++c) CHECK(m[r * 9 + c] == (r == c ? 1.0 : 0.0));
}

TEST_CASE("depth 0 encoder is the identity") {
  auto cfg = micro();
  cfg.depth = 0;
  auto params = attmask::init_vit_params<double>(cfg, Rng(9));
  Rng rng(10);
  const auto seq = attmask::tokenize(random_images(2, 8, 1, rng), params, cfg);
  const auto out = attmask::encoder_forward(seq, params, cfg);
  for (std::size_t i = 0; i < seq.tokens.numel(); ++i) CHECK(out.sequence.tokens[i] == seq.tokens[i]);
}

TEST_CASE("captured attention rows sum to one and cls_attention slices them") {
  const auto cfg = micro();
  auto params = attmask::init_vit_params<double>(cfg, Rng(11));
  Rng rng(12);
  const auto seq = attmask::add_position_embeddings(
      attmask::tokenize(random_images(3, 8, 1, rng), params, cfg), params, cfg);
  const auto out = attmask::encoder_forward(seq, params, cfg, 0);
  for (int l = 1; l <= 2; ++l) {
    REQUIRE(out.attention.captured(l));
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t h = 0; h < 2; ++h) {
        const auto a = out.attention.head_matrix(l, b, h);
        for (std::size_t r = 0; r < 5; ++r) {
          double s = 0;
          for (std::size_t c = 0; c < 5; ++c) s += a[r * 5 + c];
          CHECK(std::abs(s - 1.0) < 1e-12);
        }
      }
      const auto v = attmask::cls_attention(out.attention, l, b).values;
      REQUIRE(v.size() == 4);
      for (std::size_t i = 0; i < 4; ++i) {
        const double m = 0.5 * (out.attention.head_matrix(l, b, 0)[1 + i] + out.attention.head_matrix(l, b, 1)[1 + i]);
        CHECK(v[i] == doctest::Approx(m).epsilon(1e-14));
      }
    }
  }
  const auto only = attmask::encoder_forward(seq, params, cfg, 2);
  CHECK_FALSE(only.attention.captured(1));
  CHECK_THROWS_AS((void)only.attention.head_matrix(1, 0, 0), attmask::StateError);
}

TEST_CASE("cls_attention hand cases") {
  attmask::AttentionRecord<double> one(1, 1, 1, 4);
  std::vector<double> a(16, 0.25);
  a[0] = 0.1; a[1] = 0.2; a[2] = 0.3; a[3] = 0.4;
  one.store(1, a);
  const auto v = attmask::cls_attention(one, 1, 0).values;
  CHECK(v == std::vector<double>{0.2, 0.3, 0.4});

  attmask::AttentionRecord<double> two(1, 1, 2, 3);
  std::vector<double> b(18, 1.0 / 3);
  b[1] = 0.5; b[2] = 0.1;            // head 0, row 0
  b[9 + 1] = 0.2; b[9 + 2] = 0.6;    // head 1, row 0
  two.store(1, b);
  const auto w = attmask::cls_attention(two, 1, 0).values;
  CHECK(w[0] == doctest::Approx(0.35));
  CHECK(w[1] == doctest::Approx(0.35));
}

TEST_CASE("non-finite activations name the layer") {
  const auto cfg = micro();
  auto params = attmask::init_vit_params<double>(cfg, Rng(13));
  params.at("blocks.1.mlp.fc1.weight").mutable_data()[0] = std::nan("");
  Rng rng(14);
  const auto seq = attmask::tokenize(random_images(1, 8, 1, rng), params, cfg);
  try {
    attmask::encoder_forward(seq, params, cfg);
    FAIL("expected NumericError");
  } catch (const attmask::NumericError& e) {
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
  }
}

TEST_CASE("scaled softmax closed forms") {
  const auto logits = Tensor<double>::from({1, 2}, {0.0, std::log(3.0)});
  const auto p = attmask::scaled_softmax<double>(logits, 1.0, {});
  CHECK(p.data()[0] == doctest::Approx(0.25));
  const std::vector<double> center{0.0, std::log(3.0)};
  const auto u = attmask::scaled_softmax<double>(logits, 0.04, center);
  CHECK(u.data()[0] == doctest::Approx(0.5));
  const auto sharp = attmask::scaled_softmax<double>(Tensor<double>::from({1, 3}, {0.1, 0.3, 0.2}), 1e-3, {});
  CHECK(sharp.data()[1] > 1 - 1e-6);
}

TEST_CASE("gap and cls features") {
  attmask::TokenSequence<double> seq;
  seq.batch = 1;
  seq.num_patches = 2;
  seq.grid_side = 1;
  seq.tokens = Tensor<double>::from({3, 2}, {7, 7, 0, 2, 2, 0});
  const auto g = attmask::gap_features(seq);
  CHECK(g.data()[0] == 1.0);
  CHECK(g.data()[1] == 1.0);
  const auto c = attmask::cls_features(seq);
  CHECK(c.data()[0] == 7.0);
}

TEST_CASE("head logits are cosine similarities times the output gain") {
  const auto cfg = micro();
  auto params = attmask::init_vit_params<double>(cfg, Rng(15));
  Rng rng(16);
  const auto x = testing::random_tensor({5, 8}, rng, 1.0, false);
  const auto logits = attmask::head_logits(x, params, cfg);
  CHECK(logits.rows() == 5);
  CHECK(logits.cols() == 8);
  for (const double v : logits.data()) CHECK(std::abs(v) <= 1.0 + 1e-12);

  auto gain = params.at("head.last.gain").mutable_data();
  gain[3] = 2.5;
  const auto scaled = attmask::head_logits(x, params, cfg);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t j = 0; j < 8; ++j) {
      const double expect = (j == 3 ? 2.5 : 1.0) * logits.data()[r * 8 + j];
      CHECK(scaled.data()[r * 8 + j] == doctest::Approx(expect).epsilon(1e-14));
    }
  }
}

}
