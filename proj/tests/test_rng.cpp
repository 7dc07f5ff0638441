#include <doctest.h>

#include <vector>

#include "msborrow/numeric.hpp"
#include "msborrow/rng.hpp"
#include "oracles.hpp"

using msborrow::Rng;

TEST_CASE("identical seeds give identical streams") {
  Rng a(12345), b(12345);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng c(12345), d(54321);
  bool all_equal = true;
  for (int i = 0; i < 16; ++i) all_equal &= (c.uniform() == d.uniform());
  CHECK_FALSE(all_equal);
}

TEST_CASE("derived substreams are deterministic and distinct") {
  Rng root(7);
  Rng s1 = root.derive(0);
  Rng s2 = root.derive(1);
  Rng s1_again = Rng(7).derive(0);
  CHECK(s1.uniform() == s1_again.uniform());
  CHECK(s1.uniform() != s2.uniform());
}

TEST_CASE("normal and gamma moments") {
  Rng rng(99);
  const int n = 200000;
  std::vector<double> zs(n), gs(n);
  for (auto& z : zs) z = rng.normal();
  for (auto& g : gs) g = rng.gamma(3.5);
  auto mz = oracle::moments(zs);
  CHECK(std::abs(mz.mean) < 3 * mz.se_mean);
  CHECK(mz.var == doctest::Approx(1.0).epsilon(0.02));
  auto mg = oracle::moments(gs);
  CHECK(std::abs(mg.mean - 3.5) < 3 * mg.se_mean);
  CHECK(mg.var == doctest::Approx(3.5).epsilon(0.05));
}

TEST_CASE("inverse gamma mean matches b/(a-1)") {
  Rng rng(5);
  const double a = 2.5, b = 6.0;
  std::vector<double> xs(400000);
  for (auto& x : xs) x = rng.inverse_gamma(a, b);
  auto m = oracle::moments(xs);
  CHECK(std::abs(m.mean - b / (a - 1.0)) < 3 * m.se_mean);
}

TEST_CASE("flat dirichlet sums to one") {
  Rng rng(11);
  for (int n : {1, 2, 7}) {
    auto w = rng.dirichlet_flat(static_cast<std::size_t>(n));
    double total = 0.0;
    for (double v : w) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("uniform_index has no obvious bias") {
  Rng rng(3);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) counts[rng.uniform_index(5)]++;
  for (int c : counts) CHECK(c > 9000);
}
