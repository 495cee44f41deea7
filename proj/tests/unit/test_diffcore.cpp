#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "iap/diffcore/ops.hpp"

using namespace iap;
using namespace iap::diff;
using iap::testing::gradcheck;
using iap::testing::random_param;
using iap::testing::random_values;

namespace {

Tensor<double> c(Shape s, std::vector<double> v) { return Tensor<double>::constant(std::move(s), std::move(v)); }

}  // namespace

TEST_CASE("matmul examples") {
  auto eye = c({2, 2}, {1, 0, 0, 1});
  auto p = matmul(eye, eye);
  CHECK(std::vector<double>(p.values().begin(), p.values().end()) == std::vector<double>{1, 0, 0, 1});

  auto r = matmul(c({2, 2}, {1, 2, 3, 4}), c({2, 1}, {0, 1}));
  CHECK(r.shape() == Shape{2, 1});
  CHECK(r.at({0, 0}) == 2);
  CHECK(r.at({1, 0}) == 4);

  std::mt19937_64 rng(7);
  auto a = c({5, 7}, random_values(35, rng));
  auto b = c({7, 3}, random_values(21, rng));
  auto m = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 7; ++k) acc += a.at({i, k}) * b.at({k, j});
      CHECK(std::abs(m.at({i, j}) - acc) < 1e-12);
    }

  CHECK_THROWS_AS(matmul(c({2, 3}, std::vector<double>(6)), c({2, 3}, std::vector<double>(6))), DimensionError);
  try {
    matmul(c({2, 3}, std::vector<double>(6)), c({2, 3}, std::vector<double>(6)));
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  auto s = softmax(c({2}, {0, 0}));
  CHECK(s.values()[0] == doctest::Approx(0.5));
  CHECK(s.values()[1] == doctest::Approx(0.5));

  auto big = softmax(c({2}, {1000, 0}));
  CHECK(std::isfinite(big.values()[0]));
  CHECK(big.values()[0] == doctest::Approx(1.0));
  CHECK(big.values()[1] < 1e-300);

  std::mt19937_64 rng(3);
  auto x = random_values(6, rng, -3.0, 3.0);
  auto y = softmax(c({6}, x));
  double total = 0;
  for (double v : x) total += std::exp(v);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(y.values()[i] - std::exp(x[i]) / total) < 1e-12);
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t rows = 1 + rng() % 8, cols = 1 + rng() % 8;
    auto y = softmax(c({rows, cols}, random_values(rows * cols, rng, -50.0, 50.0)));
    for (std::size_t r = 0; r < rows; ++r) {
      double t = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        CHECK(y.at({r, j}) >= 0);
        t += y.at({r, j});
      }
      CHECK(std::abs(t - 1) < 1e-9);
    }
  }
}

TEST_CASE("elementwise and normalization examples") {
  auto n = l2_normalize(c({2}, {3, 4}));
  CHECK(n.values()[0] == doctest::Approx(0.6));
  CHECK(n.values()[1] == doctest::Approx(0.8));

  auto z = l2_normalize(c({2, 2}, {0, 0, 1, 0}));
  CHECK(z.at({0, 0}) == 0);
  CHECK(z.at({0, 1}) == 0);
  CHECK(z.at({1, 0}) == 1);

  auto ln = layernorm(c({1, 4}, {2, 2, 2, 2}), c({4}, {1, 1, 1, 1}), c({4}, {0, 0, 0, 0}));
  for (double v : ln.values()) CHECK(v == 0.0);

  auto table = c({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<int> ok{2, 0};
  auto e = embedding_lookup(table, ok);
  CHECK(e.at({0, 1}) == 6);
  CHECK(e.at({1, 0}) == 1);
  std::vector<int> bad{3};
  CHECK_THROWS_AS(embedding_lookup(table, bad), IndexError);
  std::vector<int> neg{-1};
  CHECK_THROWS_AS(embedding_lookup(table, neg), IndexError);

  CHECK(gelu(c({1}, {0})).item() == 0.0);
}

TEST_CASE("gradient checks for every op (64-bit, extents <= 8)") {
  std::mt19937_64 rng(2024);
  auto weights = [&](std::size_t n) { return c({n}, random_values(n, rng)); };

  SUBCASE("matmul") {
    for (bool tb : {false, true}) {
      auto a = random_param({4, 5}, rng);
      auto b = tb ? random_param({3, 5}, rng) : random_param({5, 3}, rng);
      auto w = weights(12);
      CHECK(gradcheck([&] { return sum(mul(reshape(matmul(a, b, tb), {12}), w)); }, {a, b}) < 1e-4);
    }
  }
  SUBCASE("bmm") {
    for (bool tb : {false, true}) {
      auto a = random_param({2, 3, 4}, rng);
      auto b = tb ? random_param({2, 5, 4}, rng) : random_param({2, 4, 5}, rng);
      auto w = weights(30);
      CHECK(gradcheck([&] { return sum(mul(reshape(bmm(a, b, tb), {30}), w)); }, {a, b}) < 1e-4);
    }
  }
  SUBCASE("softmax and log_softmax") {
    auto x = random_param({3, 6}, rng, -2, 2);
    auto w = c({3, 6}, random_values(18, rng));
    CHECK(gradcheck([&] { return sum(mul(softmax(x), w)); }, {x}) < 1e-4);
    CHECK(gradcheck([&] { return sum(mul(log_softmax(x), w)); }, {x}) < 1e-4);
  }
  SUBCASE("layernorm") {
    auto x = random_param({4, 8}, rng, -2, 2);
    auto g = random_param({8}, rng);
    auto b = random_param({8}, rng);
    auto w = c({4, 8}, random_values(32, rng));
    CHECK(gradcheck([&] { return sum(mul(layernorm(x, g, b), w)); }, {x, g, b}) < 1e-4);
  }
  SUBCASE("gelu") {
    auto x = random_param({2, 8}, rng, -3, 3);
    auto w = c({2, 8}, random_values(16, rng));
    CHECK(gradcheck([&] { return sum(mul(gelu(x), w)); }, {x}) < 1e-4);
  }
  SUBCASE("l2_normalize") {
    auto x = random_param({3, 5}, rng);
    auto w = c({3, 5}, random_values(15, rng));
    CHECK(gradcheck([&] { return sum(mul(l2_normalize(x), w)); }, {x}) < 1e-4);
  }
  SUBCASE("elementwise family") {
    auto a = random_param({2, 4}, rng);
    auto b = random_param({2, 4}, rng);
    auto t = random_param({4}, rng);
    auto w = c({2, 4}, random_values(8, rng));
    CHECK(gradcheck([&] { return sum(mul(add(mul(a, b), scale(sub(a, b), 0.7)), w)); }, {a, b}) < 1e-4);
    CHECK(gradcheck([&] { return sum(mul(add_tiled(a, t), w)); }, {a, t}) < 1e-4);
    CHECK(gradcheck([&] { return mean(mul(a, a)); }, {a}) < 1e-4);
  }
  SUBCASE("embedding_lookup") {
    auto table = random_param({6, 3}, rng);
    std::vector<int> idx{1, 4, 1, 0};
    auto w = c({4, 3}, random_values(12, rng));
    CHECK(gradcheck([&] { return sum(mul(embedding_lookup(table, idx), w)); }, {table}) < 1e-4);
  }
  SUBCASE("layout ops") {
    auto x = random_param({2 * 3, 8}, rng);
    auto w = c({4, 3, 4}, random_values(48, rng));
    CHECK(gradcheck([&] { return sum(mul(split_heads(x, 2, 3, 2), w)); }, {x}) < 1e-4);
    auto y = random_param({4, 3, 4}, rng);
    auto w2 = c({6, 8}, random_values(48, rng));
    CHECK(gradcheck([&] { return sum(mul(merge_heads(y, 2, 2), w2)); }, {y}) < 1e-4);

    auto s = random_param({3, 7}, rng);
    auto w3 = c({3, 2}, random_values(6, rng));
    CHECK(gradcheck([&] { return sum(mul(slice_cols(s, 4, 2), w3)); }, {s}) < 1e-4);

    auto r = random_param({2, 3}, rng);
    auto w4 = c({6, 3}, random_values(18, rng));
    CHECK(gradcheck([&] { return sum(mul(repeat_groups(r, 3), w4)); }, {r}) < 1e-4);

    auto p = random_param({2, 3, 4}, rng);
    auto tok = random_param({4}, rng);
    auto w5 = c({2, 4}, random_values(8, rng));
    CHECK(gradcheck([&] { return sum(mul(select_token(prepend_token(p, tok), 0), w5)); }, {p, tok}) < 1e-4);
    CHECK(gradcheck([&] { return sum(mul(select_token(prepend_token(p, tok), 2), w5)); }, {p, tok}) < 1e-4);

    auto q = random_param({4, 5}, rng);
    std::vector<int> picks{0, 4, 2, 2};
    CHECK(gradcheck([&] { return sum(mul(pick(q, picks), pick(q, picks))); }, {q}) < 1e-4);
  }
  SUBCASE("add_scaled_groups") {
    auto base = random_param({3, 4}, rng);
    auto delta = random_param({3, 4}, rng);
    auto wts = random_param({3}, rng);
    auto w = c({3, 4}, random_values(12, rng));
    CHECK(gradcheck([&] { return sum(mul(add_scaled_groups(base, delta, wts), w)); }, {base, delta, wts}) < 1e-4);
  }
}

TEST_CASE("straight_through forwards hard values and routes gradient to soft") {
  auto soft = Tensor<double>::parameter({2}, {0.3, 0.7});
  std::vector<double> hard{0, 1};
  auto st = straight_through<double>(hard, soft);
  CHECK(st.values()[0] == 0.0);
  CHECK(st.values()[1] == 1.0);
  sum(mul(st, c({2}, {2.0, 5.0}))).backward();
  CHECK(soft.grad()[0] == 2.0);
  CHECK(soft.grad()[1] == 5.0);
}

TEST_CASE("add_scaled_groups leaves zero-weight groups bit-identical") {
  auto base = c({2, 2}, {-0.0, 1.5, 2.0, 3.0});
  auto delta = c({2, 2}, {1.0, 1.0, 1.0, 1.0});
  auto out = add_scaled_groups(base, delta, c({2}, {0.0, 1.0}));
  CHECK(std::signbit(out.values()[0]));
  CHECK(out.values()[1] == 1.5);
  CHECK(out.values()[2] == 3.0);
}

TEST_CASE("sgd_step examples") {
  ParameterSet<double> ps;
  auto w = Tensor<double>::parameter({1}, {1.0});
  ps.add("w", w);
  CHECK_THROWS_AS(sgd_step(ps, 0.1), StateError);

  sum(scale(w, 0.5)).backward();  // grad 0.5
  sgd_step(ps, 2.0);
  CHECK(w.values()[0] == 0.0);
  CHECK_FALSE(w.has_grad());

  sum(scale(w, 0.5)).backward();
  sgd_step(ps, 0.0);
  CHECK(w.values()[0] == 0.0);

  w.mutable_values()[0] = 1.0;
  sum(mul(w, w)).backward();
  sgd_step(ps, 0.1);
  CHECK(w.values()[0] == doctest::Approx(0.8).epsilon(1e-15));

  auto frozen = Tensor<double>::parameter({1}, {4.0});
  frozen.set_trainable(false);
  ps.add("frozen", frozen);
  sum(mul(w, w)).backward();
  sgd_step(ps, 0.1);
  CHECK(frozen.values()[0] == 4.0);
}

TEST_CASE("identical seeds give bit-identical outputs") {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto a = random_param({5, 8}, rng);
    auto b = random_param({8, 8}, rng);
    auto g = random_param({8}, rng);
    auto bias = random_param({8}, rng);
    auto y = l2_normalize(gelu(layernorm(matmul(a, b), g, bias)));
    return std::vector<double>(y.values().begin(), y.values().end());
  };
  CHECK(run() == run());
}

TEST_CASE("tensor construction contracts") {
  CHECK_THROWS_AS(Tensor<double>::constant({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>::zeros({0, 2}), DimensionError);
  auto p = Tensor<float>::parameter({2}, {1, 2});
  auto q = scale(p, 2.0f);
  CHECK_THROWS_AS(q.mutable_values(), StateError);
  CHECK_THROWS_AS(q.backward(), DimensionError);

  ParameterSet<float> ps;
  ps.add("a", p);
  CHECK_THROWS_AS(ps.add("a", p), ArgumentError);
  const auto before = checksum(ps);
  p.mutable_values()[0] = 3.0f;
  CHECK(checksum(ps) != before);
}
