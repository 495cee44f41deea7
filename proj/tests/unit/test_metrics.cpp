#include <doctest.h>

#include <cmath>
#include <random>

#include "iap/errors.hpp"
#include "iap/metrics.hpp"

using namespace iap;

TEST_CASE("hand-computed three-task matrix") {
  auto a = AccuracyMatrix::from_rows({{.9, .5, .4}, {.8, .9, .5}, {.7, .8, .9}});
  auto r = compute_metrics(a, {.3, .4, .5});
  CHECK_FALSE(r.transfer[0].has_value());
  CHECK(*r.transfer[1] == doctest::Approx(.5).epsilon(1e-14));
  CHECK(*r.transfer[2] == doctest::Approx(.45).epsilon(1e-14));
  CHECK(std::abs(*r.transfer_mean - .475) < 1e-12);
  CHECK(r.last == std::vector<double>{.7, .8, .9});
  CHECK(std::abs(r.last_mean - .8) < 1e-12);
  CHECK(r.average[0] == doctest::Approx(.8).epsilon(1e-14));
  CHECK(r.average[1] == doctest::Approx(2.2 / 3).epsilon(1e-14));
  CHECK(r.average[2] == doctest::Approx(.6).epsilon(1e-14));
  CHECK(std::abs(r.average_mean - 6.4 / 9) < 1e-12);
  CHECK(std::abs(r.zero_shot_mean - .4) < 1e-12);
}

TEST_CASE("single task: no transfer, last equals average") {
  auto r = compute_metrics(AccuracyMatrix::from_rows({{.62}}), {});
  CHECK_FALSE(r.transfer_mean.has_value());
  CHECK(r.last_mean == .62);
  CHECK(r.average_mean == .62);
}

TEST_CASE("perfect and zero matrices saturate every metric") {
  for (double v : {0.0, 1.0}) {
    auto r = compute_metrics(AccuracyMatrix::from_rows(std::vector<std::vector<double>>(4, std::vector<double>(4, v))), {});
    CHECK(*r.transfer_mean == v);
    CHECK(r.average_mean == v);
    CHECK(r.last_mean == v);
  }
}

TEST_CASE("metrics lie within the matrix range and agree with direct sums") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const int t = 1 + static_cast<int>(rng() % 6);
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(t), std::vector<double>(static_cast<std::size_t>(t)));
    double lo = 1, hi = 0, total = 0;
    for (auto& row : rows)
      for (auto& x : row) {
        x = u(rng);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        total += x;
      }
    auto r = compute_metrics(AccuracyMatrix::from_rows(rows), {});
    CHECK(r.average_mean == doctest::Approx(total / (t * t)).epsilon(1e-12));
    CHECK(r.last_mean >= lo);
    CHECK(r.last_mean <= hi);
    if (t > 1) {
      CHECK(*r.transfer_mean >= lo);
      CHECK(*r.transfer_mean <= hi);
    }
  }
}

TEST_CASE("accuracy matrix bookkeeping") {
  AccuracyMatrix a(2);
  CHECK_FALSE(a.complete());
  a.set(0, 0, .5);
  CHECK_THROWS_AS(a.at(0, 1), StateError);
  CHECK_THROWS_AS(compute_metrics(a, {}), StateError);
  CHECK_THROWS_AS(a.set(2, 0, .5), IndexError);
  CHECK_THROWS_AS(a.set(0, 0, 1.5), ArgumentError);
  CHECK_THROWS_AS(a.set_row(1, {.1}), DimensionError);
  a.set_row(0, {.5, .6});
  a.set_row(1, {.7, .8});
  CHECK(a.complete());
  CHECK_THROWS_AS(compute_metrics(a, {.1, .2, .3}), DimensionError);
}
