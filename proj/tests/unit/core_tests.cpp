#include <catch_amalgamated.hpp>

#include <numeric>
#include <set>

#include "mpmri/core.hpp"

using namespace mpmri;

TEST_CASE("rng is deterministic under the same seed", "[core]") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("rng streams with different seeds differ", "[core]") {
  Rng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
  REQUIRE(same == 0);
}

TEST_CASE("uniform stays in bounds and covers the interval", "[core]") {
  Rng rng(7);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  REQUIRE(lo < 0.01);
  REQUIRE(hi > 0.99);
}

TEST_CASE("uniform_int is inclusive on both ends", "[core]") {
  Rng rng(3);
  std::set<int> seen;
  for (int i = 0; i < 1000; ++i) {
    const int v = rng.uniform_int(2, 5);
    REQUIRE(v >= 2);
    REQUIRE(v <= 5);
    seen.insert(v);
  }
  REQUIRE(seen == std::set<int>{2, 3, 4, 5});
}

TEST_CASE("normal has roughly standard moments", "[core]") {
  Rng rng(11);
  const int n = 20000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.03);
  REQUIRE(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("bernoulli respects its probability", "[core]") {
  Rng rng(5);
  int hits = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) hits += rng.bernoulli(0.3);
  REQUIRE(std::abs(hits / static_cast<double>(n) - 0.3) < 0.02);
}

TEST_CASE("shuffle is a permutation and seed-stable", "[core]") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  Rng a(9);
  a.shuffle(v);
  REQUIRE(std::is_permutation(v.begin(), v.end(), w.begin()));
  auto v2 = w;
  Rng b(9);
  b.shuffle(v2);
  REQUIRE(v == v2);
}

TEST_CASE("derive_seed distinguishes argument order and position", "[core]") {
  REQUIRE(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
  REQUIRE(derive_seed(1, 2) != derive_seed(2, 2));
  REQUIRE(derive_seed(1, 2, 0, 5) != derive_seed(1, 2, 5, 0));
  REQUIRE(derive_seed(7, 0x10) == derive_seed(7, 0x10));
}

TEST_CASE("pipeline errors carry their code and name", "[core]") {
  try {
    fail(Err::EmptyMask, "nothing here");
    FAIL("fail() must throw");
  } catch (const PipelineError& e) {
    REQUIRE(e.code() == Err::EmptyMask);
    REQUIRE(std::string(e.what()).find("EmptyMask") != std::string::npos);
    REQUIRE(std::string(e.what()).find("nothing here") != std::string::npos);
  }
}

TEST_CASE("grid2d is zero-initialized row-major storage", "[core]") {
  Grid2D<float> g(3, 4);
  REQUIRE(g.size() == 12);
  for (float v : g.v) REQUIRE(v == 0.0f);
  g.at(1, 2) = 5.0f;
  REQUIRE(g.v[1 * 4 + 2] == 5.0f);
  REQUIRE(g.same_shape(Grid2D<float>(3, 4)));
  REQUIRE_FALSE(g.same_shape(Grid2D<float>(4, 3)));
}

TEST_CASE("parallel_for covers every index exactly once", "[core]") {
  std::vector<std::atomic<int>> hits(257);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i].fetch_add(1); });
  for (const auto& h : hits) REQUIRE(h.load() == 1);
}

TEST_CASE("parallel_for propagates the first exception", "[core]") {
  REQUIRE_THROWS_AS(parallel_for(64, 4,
                                 [&](std::size_t i) {
                                   if (i == 13) fail(Err::InvalidConfig, "boom");
                                 }),
                    PipelineError);
}
