#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include "attmask/error.hpp"
#include "attmask/evaluation.hpp"
#include "support.hpp"

using attmask::FeatureBank;
using attmask::MaskVector;
using attmask::Rng;

namespace {

FeatureBank random_bank(std::size_t count, std::size_t dim, int classes, Rng& rng) {
  FeatureBank b;
  b.count = count;
  b.dim = dim;
  b.features.resize(count * dim);
  for (std::size_t i = 0; i < count; ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      // Coarse values make exact similarity ties common.
      const double v = static_cast<double>(rng.below(5)) - 2.0;
      b.features[i * dim + j] = v;
      norm += v * v;
    }
    if (norm == 0) {
      b.features[i * dim] = 1;
      norm = 1;
    }
    for (std::size_t j = 0; j < dim; ++j) b.features[i * dim + j] /= std::sqrt(norm);
    b.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
  }
  return b;
}

// Full sort of the whole bank, then a vote table.
int knn_oracle(const FeatureBank& bank, std::span<const double> q, std::size_t k, double tau) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < bank.count; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < bank.dim; ++j) s += bank.features[i * bank.dim + j] * q[j];
    all.emplace_back(s, i);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::map<int, double> votes;
  for (std::size_t i = 0; i < k; ++i) votes[bank.labels[all[i].second]] += std::exp(all[i].first / tau);
  int best = -1;
  double best_v = -1;
  for (const auto& [label, v] : votes) {
    if (v > best_v) {
      best = label;
      best_v = v;
    }
  }
  return best;
}

attmask::EncoderConfig tiny_encoder() {
  attmask::EncoderConfig c;
  c.image_side = 16;
  c.channels = 3;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.heads = 2;
  c.depth = 2;
  c.mlp_ratio = 2;
  c.out_dim = 8;
  c.head_hidden = 16;
  c.head_bottleneck = 8;
  return c;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("names round-trip") {
  CHECK(attmask::parse_feature_source("gap") == attmask::FeatureSource::Gap);
  CHECK(attmask::feature_source_name(attmask::FeatureSource::Cls) == "cls");
  CHECK(attmask::parse_masking_mode("random") == attmask::MaskingMode::Random);
  CHECK_THROWS_AS(attmask::parse_feature_source("mean"), attmask::ConfigError);
  CHECK_THROWS_AS(attmask::parse_masking_mode("saliency"), attmask::ConfigError);
}

TEST_CASE("knn agrees with a full-sort oracle") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto bank = random_bank(30 + rng.below(20), 3, 4, rng);
    const auto queries = random_bank(10, 3, 4, rng);
    const std::size_t k = 1 + rng.below(bank.count);
    const auto r = attmask::knn_classify(bank, queries, k);
    std::size_t correct = 0;
    for (std::size_t q = 0; q < queries.count; ++q) {
      const int expected = knn_oracle(bank, queries.row(q), k, attmask::kKnnTemperature);
      REQUIRE(r.predictions[q] == expected);
      correct += expected == queries.labels[q];
    }
    CHECK(r.accuracy == doctest::Approx(static_cast<double>(correct) / queries.count));
  }
}

TEST_CASE("knn hand cases") {
  FeatureBank bank;
  bank.count = 2;
  bank.dim = 2;
  bank.features = {1, 0, 0, 1};
  bank.labels = {0, 1};
  FeatureBank q = bank;
  CHECK(attmask::knn_classify(bank, q, 1).accuracy == 1.0);
  // Orthogonal query equidistant from both: the class tie goes to label 0.
  FeatureBank mid;
  mid.count = 1;
  mid.dim = 2;
  mid.features = {std::sqrt(0.5), std::sqrt(0.5)};
  mid.labels = {1};
  CHECK(attmask::knn_classify(bank, mid, 2).predictions[0] == 0);
  CHECK_THROWS_AS(attmask::knn_classify(bank, q, 0), attmask::ContractError);
  CHECK_THROWS_AS(attmask::knn_classify(bank, q, 3), attmask::ContractError);
  CHECK_THROWS_AS(attmask::knn_classify(FeatureBank{}, q, 1), attmask::ContractError);
}

TEST_CASE("few-example knn") {
  Rng rng(2);
  const auto bank = random_bank(40, 4, 2, rng);
  const auto queries = random_bank(20, 4, 2, rng);
  // A balanced bank with 20 per class: keeping 20 of each is plain k-NN.
  FeatureBank balanced = bank;
  for (std::size_t i = 0; i < balanced.count; ++i) balanced.labels[i] = static_cast<int>(i % 2);
  Rng r1(3);
  const auto full = attmask::few_example_knn(balanced, queries, 10, 20, r1);
  CHECK(full.predictions == attmask::knn_classify(balanced, queries, 10).predictions);
  // One example per class with k = 1 returns the nearer of the two kept rows.
  Rng r2(4);
  const auto one = attmask::few_example_knn(balanced, queries, 5, 1, r2);
  CHECK(one.predictions.size() == queries.count);
  Rng r3(4);
  CHECK(attmask::few_example_knn(balanced, queries, 5, 1, r3).predictions == one.predictions);
  Rng r4(5);
  CHECK_THROWS_AS(attmask::few_example_knn(balanced, queries, 5, 21, r4), attmask::ContractError);
}

TEST_CASE("feature extraction") {
  const auto cfg = tiny_encoder();
  const auto params = attmask::init_vit_params<double>(cfg, Rng(5));
  auto ds = attmask::make_synthetic(2, 3, 16, 3, Rng(6));
  const std::size_t dup[] = {0, 1, 0};
  ds = ds.subset(dup);
  const auto cls = attmask::extract_features(params, cfg, ds, attmask::FeatureSource::Cls, 2);
  const auto gap = attmask::extract_features(params, cfg, ds, attmask::FeatureSource::Gap, 2);
  REQUIRE(cls.count == 3);
  CHECK(cls.dim == 16);
  for (std::size_t i = 0; i < 3; ++i) {
    double n = 0;
    for (const double v : cls.row(i)) n += v * v;
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto a = cls.row(0), b = cls.row(2);
  CHECK(std::equal(a.begin(), a.end(), b.begin()));
  CHECK_FALSE(std::equal(a.begin(), a.end(), gap.row(0).begin()));
  CHECK(cls.labels == std::vector<int>{0, 1, 0});
  // Batch size does not change the features.
  const auto whole = attmask::extract_features(params, cfg, ds, attmask::FeatureSource::Cls, 64);
  for (std::size_t i = 0; i < cls.features.size(); ++i) {
    REQUIRE(whole.features[i] == doctest::Approx(cls.features[i]).epsilon(1e-12));
  }
  const auto wrong = attmask::make_synthetic(2, 1, 8, 3, Rng(6));
  CHECK_THROWS_AS(attmask::extract_features(params, cfg, wrong, attmask::FeatureSource::Cls),
                  attmask::ConfigError);
}

TEST_CASE("zeroing masked patches") {
  std::vector<std::uint8_t> img(8 * 8, 7);
  MaskVector m(4);
  m.bits[3] = 1;
  const auto out = attmask::zero_masked_patches(img, 8, 1, 4, m);
  std::size_t zeros = 0;
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      const bool in = y >= 4 && x >= 4;
      CHECK(out[y * 8 + x] == (in ? 0 : 7));
      zeros += out[y * 8 + x] == 0;
    }
  }
  CHECK(zeros == 16);
}

TEST_CASE("masked inference at ratio zero equals plain knn") {
  const auto cfg = tiny_encoder();
  const auto params = attmask::init_vit_params<double>(cfg, Rng(7));
  const auto ds = attmask::make_synthetic(2, 8, 16, 3, Rng(8));
  std::vector<std::size_t> bi, qi;
  for (std::size_t i = 0; i < ds.count; ++i) (i < 12 ? bi : qi).push_back(i);
  const auto bank_ds = ds.subset(bi), query_ds = ds.subset(qi);
  const auto bank = attmask::extract_features(params, cfg, bank_ds, attmask::FeatureSource::Cls);
  const auto queries = attmask::extract_features(params, cfg, query_ds, attmask::FeatureSource::Cls);
  const double plain = attmask::knn_classify(bank, queries, 3).accuracy;
  const double ratios[] = {0.0, 1.0};
  for (const auto mode : {attmask::MaskingMode::Attention, attmask::MaskingMode::Random}) {
    const auto r = attmask::masked_inference_eval(params, params, cfg, bank, query_ds, ratios, mode,
                                                  3, Rng(9));
    REQUIRE(r.size() == 2);
    CHECK(r[0].accuracy == plain);
    CHECK(r[1].ratio == 1.0);
  }
  // Everything masked: both modes see the same all-zero images.
  const auto att = attmask::masked_inference_eval(params, params, cfg, bank, query_ds, ratios,
                                                  attmask::MaskingMode::Attention, 3, Rng(9));
  const auto rnd = attmask::masked_inference_eval(params, params, cfg, bank, query_ds, ratios,
                                                  attmask::MaskingMode::Random, 3, Rng(9));
  CHECK(att[1].accuracy == rnd[1].accuracy);
}

TEST_CASE("dataset attention and layer range") {
  const auto cfg = tiny_encoder();
  const auto params = attmask::init_vit_params<double>(cfg, Rng(10));
  const auto ds = attmask::make_synthetic(2, 2, 16, 3, Rng(11));
  const auto att = attmask::dataset_cls_attention(params, cfg, ds);
  REQUIRE(att.size() == 4);
  CHECK(att[0].size() == 16);
  const auto last = attmask::dataset_cls_attention(params, cfg, ds, 2);
  CHECK(last == att);
  CHECK_THROWS_AS(attmask::dataset_cls_attention(params, cfg, ds, 3), attmask::RangeError);
}

TEST_CASE("pgm and csv writers") {
  const auto dir = testing::temp_dir("writers");
  const std::vector<double> constant(6, 0.3);
  attmask::write_pgm(dir / "c.pgm", constant, 3, 2);
  const auto c = read_bytes(dir / "c.pgm");
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(c.size() == header.size() + 6);
  CHECK(std::equal(header.begin(), header.end(), c.begin()));
  for (std::size_t i = header.size(); i < c.size(); ++i) CHECK(c[i] == 0);

  const std::vector<double> v{0.1, 0.5, -0.2, 0.9, 0.0, 0.3};
  attmask::write_pgm(dir / "v.pgm", v, 3, 2);
  const auto p = read_bytes(dir / "v.pgm");
  const auto px = std::vector<std::uint8_t>(p.begin() + static_cast<long>(header.size()), p.end());
  CHECK(std::max_element(px.begin(), px.end()) - px.begin() == 3);
  CHECK(px[3] == 255);
  CHECK(px[2] == 0);

  const std::vector<double> precise{1.0 / 3.0, -2e-300, 12345.678901234567, 0.0};
  attmask::write_csv_grid(dir / "g.csv", precise, 2, 2);
  CHECK(attmask::read_csv_grid(dir / "g.csv") == precise);
}

TEST_CASE("attention export") {
  const auto cfg = tiny_encoder();
  const auto params = attmask::init_vit_params<double>(cfg, Rng(12));
  const auto ds = attmask::make_synthetic(2, 1, 16, 3, Rng(13));
  attmask::NoGradGuard guard;
  auto seq = attmask::tokenize(attmask::to_image_batch<double>(ds, std::vector<std::size_t>{0, 1}),
                               params, cfg);
  seq = attmask::add_position_embeddings(seq, params, cfg);
  const auto enc = attmask::encoder_forward(seq, params, cfg, 0);
  const auto dir = testing::temp_dir("export");
  const auto paths = attmask::export_attention_map(enc.attention, 2, 1, dir);
  CHECK(paths.size() == 2 * (cfg.heads + 1));
  const auto mean = attmask::read_csv_grid(dir / "mean.csv");
  const auto want = attmask::cls_attention(enc.attention, 2, 1);
  REQUIRE(mean.size() == want.values.size());
  for (std::size_t i = 0; i < mean.size(); ++i) CHECK(mean[i] == want.values[i]);
}

TEST_CASE("mask overlay") {
  const auto dir = testing::temp_dir("overlay");
  std::vector<std::uint8_t> img(8 * 8 * 3);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<std::uint8_t>(i % 200);
  const std::string header = "P6\n8 8\n255\n";
  auto body = [&](const std::filesystem::path& p) {
    const auto b = read_bytes(p);
    REQUIRE(b.size() == header.size() + img.size());
    CHECK(std::equal(header.begin(), header.end(), b.begin()));
    return std::vector<std::uint8_t>(b.begin() + static_cast<long>(header.size()), b.end());
  };
  attmask::export_mask_overlay(img, 8, 3, 4, MaskVector(4), dir / "none.ppm");
  CHECK(body(dir / "none.ppm") == img);
  MaskVector all(4);
  std::fill(all.bits.begin(), all.bits.end(), 1);
  attmask::export_mask_overlay(img, 8, 3, 4, all, dir / "all.ppm");
  const auto solid = body(dir / "all.ppm");
  for (std::size_t i = 0; i < solid.size(); ++i) REQUIRE(solid[i] == attmask::kOverlayColor[i % 3]);
  // floor(r n) masked patches paint exactly that many p x p squares.
  const auto m = attmask::attmask_high<double>(std::vector<double>{0.1, 0.4, 0.3, 0.2}, 0.5);
  attmask::export_mask_overlay(img, 8, 3, 4, m, dir / "half.ppm");
  const auto half = body(dir / "half.ppm");
  std::size_t painted = 0;
  for (std::size_t i = 0; i < half.size(); i += 3) {
    painted += half[i] == 255 && half[i + 1] == 0 && half[i + 2] == 255;
  }
  CHECK(painted == 2 * 16);
  std::vector<std::uint8_t> grey(64, 9);
  attmask::export_mask_overlay(grey, 8, 1, 4, MaskVector(4), dir / "grey.ppm");
  CHECK(body(dir / "grey.ppm") == std::vector<std::uint8_t>(192, 9));
}

}
