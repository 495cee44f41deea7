#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "gradcheck.hpp"
#include "iap/encoder.hpp"

using namespace iap;
using namespace iap::diff;
using iap::testing::gradcheck;
using iap::testing::random_param;
using iap::testing::random_values;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.vision_depth = 2;
  c.text_depth = 2;
  c.width = 8;
  c.heads = 2;
  c.patch_grid = 2;
  c.patch_dim = 3;
  c.vocab_size = 64;
  c.max_text_len = 8;
  c.mlp_ratio = 2;
  return c;
}

template <typename T>
Tensor<T> random_pixels(std::size_t batch, const EncoderConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t p = static_cast<std::size_t>(c.patches());
  const std::size_t d = static_cast<std::size_t>(c.patch_dim);
  return Tensor<T>::constant({batch, p, d}, random_values<T>(batch * p * d, rng));
}

std::vector<double> row(const Tensor<double>& t, std::size_t r) {
  const auto d = t.dim(1);
  return {t.values().begin() + static_cast<long>(r * d), t.values().begin() + static_cast<long>((r + 1) * d)};
}

// -sum_i log softmax_j(cos(v_i, t_j)/tau)[i], straight from the definition.
double contrastive_oracle(const std::vector<std::vector<double>>& v, const std::vector<std::vector<double>>& t,
                          double tau) {
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      ab += a[k] * b[k];
      aa += a[k] * a[k];
      bb += b[k] * b[k];
    }
    return ab / std::sqrt(aa * bb);
  };
  double loss = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double denom = 0;
    for (std::size_t j = 0; j < t.size(); ++j) denom += std::exp(cosine(v[i], t[j]) / tau);
    loss -= std::log(std::exp(cosine(v[i], t[i]) / tau) / denom);
  }
  return loss;
}

std::vector<std::vector<double>> rows_of(const std::vector<double>& flat, std::size_t d) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < flat.size(); i += d) out.emplace_back(flat.begin() + static_cast<long>(i), flat.begin() + static_cast<long>(i + d));
  return out;
}

}  // namespace

TEST_CASE("encoder config validation") {
  EncoderConfig c;
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EncoderConfig{};
  c.contrastive_temperature = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EncoderConfig{};
  c.vision_depth = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("tokenizer: template prefix, range, padding, distinct names") {
  Tokenizer tok(512, 16);
  auto ids = tok.encode("kabo rutel");
  REQUIRE(ids.size() == 16);
  CHECK(ids[0] == Tokenizer::kStart);
  for (int id : ids) {
    CHECK(id >= 0);
    CHECK(id < 512);
  }
  CHECK(ids.back() == Tokenizer::kPad);
  for (std::size_t i = 4; i < ids.size(); ++i) {
    if (ids[i] != Tokenizer::kPad) CHECK(ids[i] >= Tokenizer::kReserved);
  }
  CHECK(tok.encode("kabo rutel") == ids);
  CHECK(tok.encode("rutel kabo") != ids);
  CHECK(tok.encode("kabo rutem") != ids);

  auto batch = TextBatch::from_names(tok, {"aa bb", "cc dd", "ee ff"});
  CHECK(batch.rows == 3);
  CHECK(batch.len == 16);
  CHECK(batch.token_ids.size() == 48);
}

TEST_CASE("encode_image: determinism, batch independence, unit norm") {
  const auto cfg = tiny_config();
  DualEncoder<double> enc(cfg, 11);
  auto px = random_pixels<double>(5, cfg, 3);
  auto a = enc.encode_image(px);
  auto b = enc.encode_image(px);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  CHECK(a.shape() == Shape{5, 8});
  for (std::size_t i = 0; i < 5; ++i) {
    double n = 0;
    for (double x : row(a, i)) n += x * x;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
  }

  // one image duplicated
  auto one = px.values().subspan(0, static_cast<std::size_t>(cfg.patches() * cfg.patch_dim));
  std::vector<double> dup(one.begin(), one.end());
  dup.insert(dup.end(), one.begin(), one.end());
  auto d = enc.encode_image(Tensor<double>::constant({2, 4, 3}, dup));
  for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(d.at({0, c}) - d.at({1, c})) < 1e-12);

  CHECK_THROWS_AS(enc.encode_image(Tensor<double>::zeros({2, 5, 3})), DimensionError);
  CHECK_THROWS_AS(enc.encode_image(px, HookList<double>(1)), DimensionError);
  CHECK_NOTHROW(enc.encode_image(px, HookList<double>(2)));
}

TEST_CASE("encode_text: determinism, batch independence, unit norm") {
  const auto cfg = tiny_config();
  DualEncoder<double> enc(cfg, 11);
  Tokenizer tok(cfg.vocab_size, cfg.max_text_len);
  auto text = TextBatch::from_names(tok, {"ab cd", "ef gh", "ab cd"});
  auto a = enc.encode_text(text);
  auto b = enc.encode_text(text);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  CHECK(row(a, 0) == row(a, 2));
  CHECK(row(a, 0) != row(a, 1));
  for (std::size_t i = 0; i < 3; ++i) {
    double n = 0;
    for (double x : row(a, i)) n += x * x;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
  }
  TextBatch bad = text;
  bad.token_ids.pop_back();
  CHECK_THROWS_AS(enc.encode_text(bad), DimensionError);
}

TEST_CASE("hooks see per-head queries and can replace the attention output") {
  const auto cfg = tiny_config();
  DualEncoder<double> enc(cfg, 5);
  auto px = random_pixels<double>(3, cfg, 9);
  std::vector<std::size_t> seen;
  HookList<double> hooks(2);
  hooks[1] = [&](const AttentionSite<double>& site) {
    seen = {site.layer, site.batch, site.len, site.heads};
    CHECK(site.queries.shape() == Shape{3 * 2, 5, 4});
    CHECK(site.output.shape() == Shape{3 * 2, 5, 4});
    return site.output;
  };
  auto a = enc.encode_image(px, hooks);
  CHECK(seen == std::vector<std::size_t>{1, 3, 5, 2});
  auto b = enc.encode_image(px);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST_CASE("contrastive loss examples") {
  auto one = Tensor<double>::constant({1, 3}, {0.2, -0.4, 1.0});
  auto other = Tensor<double>::constant({1, 3}, {-1.0, 0.3, 0.1});
  CHECK(contrastive_loss(one, other, 0.07).item() == 0.0);

  auto e = Tensor<double>::constant({2, 2}, {1, 0, 0, 1});
  const double expected = 2.0 * -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(contrastive_loss(e, e, 1.0).item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK(expected == doctest::Approx(0.6265).epsilon(1e-4));

  CHECK_THROWS_AS(contrastive_loss(e, Tensor<double>::zeros({3, 2}), 1.0), DimensionError);
}

TEST_CASE("contrastive loss matches the definition and is non-negative") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng() % 6, d = 2 + rng() % 7;
    auto v = random_values(n * d, rng);
    auto t = random_values(n * d, rng);
    const double tau = 0.05 + 0.5 * (rng() % 100) / 100.0;
    const double got =
        contrastive_loss(Tensor<double>::constant({n, d}, v), Tensor<double>::constant({n, d}, t), tau).item();
    CHECK(got == doctest::Approx(contrastive_oracle(rows_of(v, d), rows_of(t, d), tau)).epsilon(1e-10));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("aligned orthogonal pairs beat every other pairing") {
  for (std::size_t n = 2; n <= 4; ++n) {
    std::vector<double> basis(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) basis[i * n + i] = 1.0;
    auto v = Tensor<double>::constant({n, n}, basis);
    const double aligned = contrastive_loss(v, v, 0.5).item();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    while (std::next_permutation(perm.begin(), perm.end())) {
      std::vector<double> t(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i) t[i * n + perm[i]] = 1.0;
      CHECK(aligned < contrastive_loss(v, Tensor<double>::constant({n, n}, t), 0.5).item());
    }
  }
}

TEST_CASE("contrastive loss gradients match finite differences") {
  std::mt19937_64 rng(4);
  auto v = random_param({3, 8}, rng);
  auto t = random_param({3, 8}, rng);
  CHECK(gradcheck([&] { return contrastive_loss(v, t, 0.3); }, {v, t}) < 1e-4);

  auto img = random_param({5, 6}, rng);
  auto cls = random_param({3, 6}, rng);
  const std::vector<int> labels{0, 2, 1, 2, 0};
  CHECK(gradcheck([&] { return class_contrastive_loss(img, cls, labels, 0.2); }, {img, cls}) < 1e-4);
}

TEST_CASE("class contrastive loss is the mean cross-entropy over class sentences") {
  std::mt19937_64 rng(8);
  const std::size_t n = 6, m = 4, d = 5;
  auto v = random_values(n * d, rng);
  auto t = random_values(m * d, rng);
  const std::vector<int> labels{3, 0, 1, 1, 2, 0};
  const double got = class_contrastive_loss(Tensor<double>::constant({n, d}, v), Tensor<double>::constant({m, d}, t),
                                            labels, 0.1)
                         .item();
  auto vr = rows_of(v, d), tr = rows_of(t, d);
  double want = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // rotate the class list so the label sits in position 0 of a one-row oracle
    std::vector<std::vector<double>> classes{tr[static_cast<std::size_t>(labels[i])]};
    for (std::size_t c = 0; c < m; ++c)
      if (static_cast<int>(c) != labels[i]) classes.push_back(tr[c]);
    // single-image call of the same oracle: row 0 of `classes` is the match
    std::vector<std::vector<double>> img(classes.size(), vr[i]);
    double denom = 0;
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
      }
      return ab / std::sqrt(aa * bb);
    };
    for (const auto& c : classes) denom += std::exp(cosine(vr[i], c) / 0.1);
    want -= std::log(std::exp(cosine(vr[i], classes[0]) / 0.1) / denom);
  }
  CHECK(got == doctest::Approx(want / n).epsilon(1e-10));
  CHECK_THROWS_AS(class_contrastive_loss(Tensor<double>::constant({n, d}, v), Tensor<double>::constant({m, d}, t),
                                         std::vector<int>{0, 1}, 0.1),
                  DimensionError);
}

TEST_CASE("classify: exact match, ties, brute force, rescaling") {
  auto cls = Tensor<double>::constant({3, 2}, {1, 0, 0, 1, -1, 0});
  CHECK(classify(Tensor<double>::constant({1, 2}, {-1, 0}), cls) == std::vector<int>{2});
  auto tied = Tensor<double>::constant({2, 2}, {0.6, 0.8, 0.6, 0.8});
  CHECK(classify(Tensor<double>::constant({1, 2}, {0.6, 0.8}), tied) == std::vector<int>{0});

  std::mt19937_64 rng(12);
  const std::size_t n = 40, m = 7, d = 5;
  auto v = random_values(n * d, rng);
  auto t = random_values(m * d, rng);
  auto pred = classify(Tensor<double>::constant({n, d}, v), Tensor<double>::constant({m, d}, t));
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    double best_s = -1e300;
    for (std::size_t c = 0; c < m; ++c) {
      double ab = 0, bb = 0;
      for (std::size_t k = 0; k < d; ++k) {
        ab += v[i * d + k] * t[c * d + k];
        bb += t[c * d + k] * t[c * d + k];
      }
      const double s = ab / std::sqrt(bb);
      if (s > best_s) {
        best_s = s;
        best = static_cast<int>(c);
      }
    }
    CHECK(pred[i] == best);
  }
  std::vector<double> scaled = v;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) scaled[i * d + k] *= 0.5 + static_cast<double>(i);
  CHECK(classify(Tensor<double>::constant({n, d}, scaled), Tensor<double>::constant({m, d}, t)) == pred);
}

TEST_CASE("end-to-end contrastive loss gradient through both encoders") {
  const auto cfg = tiny_config();
  DualEncoder<double> enc(cfg, 2);
  Tokenizer tok(cfg.vocab_size, cfg.max_text_len);
  auto text = TextBatch::from_names(tok, {"ab cd", "ef gh", "ij kl"});
  auto px = random_pixels<double>(3, cfg, 1);
  std::vector<Tensor<double>> inputs;
  for (const auto& name : {"backbone/vision/layer1/qkv_w", "backbone/text/layer0/fc1_w", "backbone/vision/proj",
                           "backbone/text/proj", "backbone/vision/patch_w"}) {
    REQUIRE(enc.parameters().contains(name));
    inputs.push_back(enc.parameters().at(name));
  }
  auto loss = [&] { return contrastive_loss(enc.encode_image(px), enc.encode_text(text), 0.5); };
  CHECK(gradcheck(loss, inputs) < 1e-4);
}
