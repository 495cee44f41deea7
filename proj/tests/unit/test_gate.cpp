#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "gradcheck.hpp"
#include "iap/encoder.hpp"
#include "iap/gate.hpp"
#include "iap/prompt.hpp"

using namespace iap;
using namespace iap::diff;
using iap::testing::gradcheck;
using iap::testing::random_values;

namespace {

// Gate with W = 0 and the given bias: logits are the bias for every input.
GateParams<double> fixed_logit_gate(double on, double off, int layers = 1, int df = 3) {
  GateParams<double> g(0, layers, df, 1);
  for (int l = 0; l < layers; ++l) {
    auto w = g.weight(l);
    for (auto& x : w.mutable_values()) x = 0.0;
    auto b = g.bias(l);
    b.mutable_values()[0] = on;
    b.mutable_values()[1] = off;
  }
  return g;
}

}  // namespace

TEST_CASE("gumbel noise examples") {
  CHECK(gumbel_from_uniform(0.5, 1e-6) == doctest::Approx(-std::log(std::log(2.0))).epsilon(1e-15));
  CHECK(gumbel_from_uniform(0.5, 1e-6) == doctest::Approx(0.3665).epsilon(1e-4));
  CHECK(std::isfinite(gumbel_from_uniform(0.0, 1e-6)));
  CHECK(std::isfinite(gumbel_from_uniform(1.0, 1e-6)));
  CHECK(gumbel_from_uniform(0.0, 1e-6) == gumbel_from_uniform(1e-6, 1e-6));

  Rng rng(123);
  double total = 0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) total += gumbel_noise(rng, 1e-6);
  CHECK(std::abs(total / n - 0.5772156649) < 0.01);
}

TEST_CASE("gate_decide: saturation, ties, hardness, temperature limit") {
  auto d = gate_decide({10, -10}, {0, 0}, 3.0);
  CHECK(d.open);
  CHECK(d.soft[0] > 0.99);
  CHECK(d.hard == std::array<double, 2>{1, 0});

  auto tie = gate_decide({0, 0}, {0, 0}, 3.0);
  CHECK(tie.soft == std::array<double, 2>{0.5, 0.5});
  CHECK_FALSE(tie.open);
  CHECK(tie.hard == std::array<double, 2>{0, 1});

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int i = 0; i < 200; ++i) {
    const std::array<double, 2> z{u(rng), u(rng)};
    auto g = gate_decide(z, {0, 0}, 1e-3);
    CHECK(g.soft[0] + g.soft[1] == doctest::Approx(1.0));
    CHECK(((g.hard[0] == 1 && g.hard[1] == 0) || (g.hard[0] == 0 && g.hard[1] == 1)));
    const int argmax = z[0] > z[1] ? 0 : 1;
    if (std::abs(z[0] - z[1]) > 0.05) CHECK(std::abs(g.soft[static_cast<std::size_t>(argmax)] - 1.0) < 1e-9);
    auto warm = gate_decide(z, {0, 0}, 3.0);
    CHECK(warm.open == (warm.soft[0] > warm.soft[1]));
  }
}

TEST_CASE("training-mode open rate follows softmax of the logits") {
  GateConfig cfg;
  for (auto z : {std::array<double, 2>{0, 0}, std::array<double, 2>{1, 0}, std::array<double, 2>{-1.5, 0.5}}) {
    auto gate = fixed_logit_gate(z[0], z[1]);
    const std::vector<double> f{0.1, -0.2, 0.3};
    Rng rng(99);
    int open = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) open += gate_forward<double>(f, gate, 0, cfg, rng, true).open;
    const double p = 1.0 / (1.0 + std::exp(z[1] - z[0]));
    CHECK(std::abs(double(open) / n - p) < 0.01);
  }
}

TEST_CASE("inference is deterministic and noise-free") {
  GateConfig cfg;
  GateParams<double> gate(0, 4, 6, 7);
  std::mt19937_64 frng(1);
  auto feats = Tensor<double>::constant({5, 6}, random_values(30, frng));
  Rng a(1), b(2);
  for (int l = 0; l < 4; ++l) {
    auto x = gate_layer(feats, gate, l, cfg, a, false);
    auto y = gate_layer(feats, gate, l, cfg, b, false);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(x.decisions[i].soft == y.decisions[i].soft);
      CHECK(x.decisions[i].open == y.decisions[i].open);
      auto row = feats.values().subspan(i * 6, 6);
      auto z = gate.logits(l, row);
      auto single = gate_decide(z, {0, 0}, cfg.temperature);
      CHECK(single.open == x.decisions[i].open);
      CHECK(single.soft[0] == doctest::Approx(x.decisions[i].soft[0]).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(gate_layer(Tensor<double>::zeros({2, 5}), gate, 0, cfg, a, false), DimensionError);
  const std::vector<double> short_f{1, 2};
  CHECK_THROWS_AS(gate_forward<double>(short_f, gate, 0, cfg, a, false), DimensionError);
}

TEST_CASE("batched and single-instance gates agree under the same noise stream") {
  GateConfig cfg;
  GateParams<double> gate(0, 2, 4, 3);
  std::mt19937_64 frng(2);
  auto feats = Tensor<double>::constant({6, 4}, random_values(24, frng));
  Rng a(5), b(5);
  auto batched = gate_layer(feats, gate, 1, cfg, a, true);
  for (std::size_t i = 0; i < 6; ++i) {
    auto single = gate_forward<double>(feats.values().subspan(i * 4, 4), gate, 1, cfg, b, true);
    CHECK(single.open == batched.decisions[i].open);
    CHECK(single.soft[0] == doctest::Approx(batched.decisions[i].soft[0]).epsilon(1e-12));
    CHECK(batched.weight.values()[i] == (single.open ? 1.0 : 0.0));
  }
}

TEST_CASE("gate modes") {
  std::mt19937_64 frng(3);
  auto feats = Tensor<double>::constant({2000, 3}, random_values(6000, frng));
  GateParams<double> gate(0, 1, 3, 4);
  Rng rng(8);

  GateConfig on;
  on.mode = GateMode::always_on;
  for (double w : gate_layer(feats, gate, 0, on, rng, true).weight.values()) CHECK(w == 1.0);

  GateConfig rnd;
  rnd.mode = GateMode::random;
  auto r = gate_layer(feats, gate, 0, rnd, rng, false);
  double open = 0;
  for (double w : r.weight.values()) open += w;
  CHECK(std::abs(open / 2000 - 0.5) < 0.05);
  CHECK_FALSE(r.weight.requires_grad());

  GateConfig soft;
  soft.mode = GateMode::soft;
  auto s = gate_layer(feats, gate, 0, soft, rng, false);
  for (std::size_t i = 0; i < 2000; ++i) CHECK(s.weight.values()[i] == doctest::Approx(s.decisions[i].soft[0]));

  CHECK(gate_mode_from_string("random") == GateMode::random);
  CHECK(std::string(to_string(GateMode::always_on)) == "always_on");
  CHECK_THROWS_AS(gate_mode_from_string("sometimes"), ConfigError);
  GateConfig bad;
  bad.temperature = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = GateConfig{};
  bad.noise_clamp = 0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("gated_residual examples") {
  auto ori = Tensor<double>::constant({1, 3}, {1, 2, 3});
  auto r = Tensor<double>::constant({1, 3}, {4, 5, 6});
  GateDecision closed;
  CHECK(gated_residual(ori, r, closed, 1.0, false).node() == ori.node());
  CHECK(gated_residual(ori, r, closed, 1.0, true).node() == ori.node());
  auto open = gate_decide({5, -5}, {0, 0}, 1.0);
  auto full = gated_residual(ori, r, open, 1.0, false);
  auto iki = iki_residual(ori, r, 1.0);
  CHECK(std::equal(full.values().begin(), full.values().end(), iki.values().begin()));
  CHECK(gated_residual(ori, r, open, 0.0, false).node() == ori.node());
  auto half = gated_residual(ori, r, open, 0.5, false);
  CHECK(half.at({0, 2}) == 6.0);
  auto train = gated_residual(ori, r, open, 0.5, true);
  CHECK(train.at({0, 2}) == 9.0);
  CHECK_THROWS_AS(gated_residual(ori, r, open, 2.0, false), ArgumentError);
}

TEST_CASE("gate usage statistics") {
  CHECK(gate_usage_stats({{true, true, true, true}, {true, true, true, true}}) == 4.0);
  CHECK(gate_usage_stats({{true, true, false, false}, {false, false, false, false}}) == 1.0);
  CHECK_THROWS_AS(gate_usage_stats({}), ArgumentError);
  std::mt19937_64 rng(5);
  std::vector<std::vector<bool>> flags(37);
  int count = 0;
  for (auto& inst : flags)
    for (int l = 0; l < 4; ++l) {
      const bool o = rng() % 2;
      inst.push_back(o);
      count += o;
    }
  CHECK(gate_usage_stats(flags) == double(count) / 37);
}

TEST_CASE("gate parameter names and freezing") {
  GateParams<double> g(3, 2, 5, 1);
  CHECK(g.parameters().contains("gate/3/0/W"));
  CHECK(g.parameters().contains("gate/3/1/b"));
  CHECK(g.weight(0).shape() == Shape{5, 2});
  g.set_trainable(false);
  for (const auto& [n, t] : g.parameters()) CHECK_FALSE(t.trainable());
}

TEST_CASE("straight-through gate gradient matches the soft-relaxed objective") {
  // Near-saturated gates: forward weights are hard one-hot, the relaxed
  // objective uses the soft ON probability; at small temperature they agree.
  EncoderConfig cfg;
  cfg.vision_depth = 2;
  cfg.text_depth = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.patch_grid = 2;
  cfg.patch_dim = 3;
  cfg.vocab_size = 64;
  cfg.max_text_len = 8;
  cfg.mlp_ratio = 2;
  DualEncoder<double> enc(cfg, 2);
  PromptLibrary<double> lib(cfg, 3, 8);
  lib.add_task(5);
  std::mt19937_64 rng(9);
  for (auto side : {EncoderSide::vision, EncoderSide::text}) {
    for (int layer : lib.layers(side)) {
      for (auto t : {lib.pool(0, side, layer).keys, lib.pool(0, side, layer).values}) {
        auto src = random_values(t.numel(), rng);
        std::copy(src.begin(), src.end(), t.mutable_values().begin());
      }
    }
  }
  GateParams<double> gate(0, 2, 8, 3);
  for (int l = 0; l < 2; ++l) {
    auto wt = gate.weight(l);
    auto w = wt.mutable_values();
    auto src = random_values(w.size(), rng, -0.01, 0.01);
    std::copy(src.begin(), src.end(), w.begin());
    auto bt = gate.bias(l);
    auto b = bt.mutable_values();
    b[0] = l == 0 ? 0.6 : -0.6;  // layer 0 open, layer 1 closed
    b[1] = 0.0;
  }
  GateConfig gc;
  gc.temperature = 0.05;
  const std::size_t batch = 3;
  auto px = Tensor<double>::constant({batch, 4, 3}, random_values(batch * 12, rng));
  auto feats = Tensor<double>::constant({batch, 8}, random_values(batch * 8, rng, -1.0, 1.0));
  Tokenizer tok(cfg.vocab_size, cfg.max_text_len);
  auto text = TextBatch::from_names(tok, {"ab cd", "ef gh"});
  const std::vector<int> labels{0, 1, 1};

  auto objective = [&](bool relaxed) {
    std::vector<Tensor<double>> w;
    for (int l = 0; l < 2; ++l) {
      Rng unused(0);
      if (relaxed) {
        auto z = add_tiled(matmul(feats, gate.weight(l)), gate.bias(l));
        auto probs = softmax(scale(z, 1.0 / gc.temperature));
        w.push_back(pick(probs, std::vector<int>(batch, 0)));
      } else {
        w.push_back(gate_layer(feats, gate, l, gc, unused, false).weight);
      }
    }
    auto img = enc.encode_image(px, make_prompt_hooks(lib, 0, EncoderSide::vision, 2, w));
    std::vector<Tensor<double>> tw(1, Tensor<double>::constant({2}, {1.0, 1.0}));
    auto txt = enc.encode_text(text, make_prompt_hooks(lib, 0, EncoderSide::text, 1, tw));
    return class_contrastive_loss(img, txt, labels, 0.5);
  };

  // straight-through analytic gradient from a hard forward pass
  std::vector<Tensor<double>> params;
  for (int l = 0; l < 2; ++l) {
    params.push_back(gate.weight(l));
    params.push_back(gate.bias(l));
  }
  for (auto& p : params) p.zero_grad();
  {
    std::vector<Tensor<double>> w;
    for (int l = 0; l < 2; ++l) {
      // Training mode adds noise; reuse the noise-free path with a hard
      // straight-through weight to isolate the estimator.
      auto z = add_tiled(matmul(feats, gate.weight(l)), gate.bias(l));
      auto probs = softmax(scale(z, 1.0 / gc.temperature));
      auto soft_on = pick(probs, std::vector<int>(batch, 0));
      std::vector<double> hard(batch);
      for (std::size_t i = 0; i < batch; ++i) hard[i] = soft_on.values()[i] > 0.5 ? 1.0 : 0.0;
      w.push_back(straight_through<double>(hard, soft_on));
    }
    auto img = enc.encode_image(px, make_prompt_hooks(lib, 0, EncoderSide::vision, 2, w));
    std::vector<Tensor<double>> tw(1, Tensor<double>::constant({2}, {1.0, 1.0}));
    auto txt = enc.encode_text(text, make_prompt_hooks(lib, 0, EncoderSide::text, 1, tw));
    class_contrastive_loss(img, txt, labels, 0.5).backward();
  }
  double diff2 = 0, norm2 = 0;
  const double h = 1e-5;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto v = p.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = objective(true).item();
      v[i] = orig - h;
      const double down = objective(true).item();
      v[i] = orig;
      const double numeric = (up - down) / (2 * h);
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      norm2 += numeric * numeric;
    }
  }
  // forward values agree as well: the hard and relaxed objectives coincide
  CHECK(objective(false).item() == doctest::Approx(objective(true).item()).epsilon(1e-6));
  REQUIRE(norm2 > 0);
  CHECK(std::sqrt(diff2 / norm2) < 1e-3);
}
