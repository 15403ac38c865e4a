#include "doctest.h"
#include "oracle.hpp"

#include "advrank/metrics.hpp"

#include <random>

using namespace advrank;

namespace {

std::vector<float> vec(std::initializer_list<float> v) { return v; }

}  // namespace

TEST_CASE("distances by hand") {
  const auto x = vec({0.3f, -0.7f});
  CHECK(distance(x, x, Metric::euclidean) == 0.0);
  CHECK(distance(vec({1, 0}), vec({0, 1}), Metric::cosine) == doctest::Approx(1.0));
  CHECK(distance(vec({1, 2}), vec({4, 6}), Metric::euclidean) == doctest::Approx(5.0));
  CHECK(distance(vec({1, 0}), vec({-2, 0}), Metric::cosine) == doctest::Approx(2.0));
  CHECK_THROWS_AS((void)distance(vec({0, 0}), vec({1, 0}), Metric::cosine), std::domain_error);
  CHECK_THROWS_AS((void)distance(vec({0, 0}), vec({1, 0, 0}), Metric::euclidean), ShapeError);
  CHECK(parse_metric("cosine") == Metric::cosine);
  CHECK_THROWS_AS((void)parse_metric("manhattan"), std::invalid_argument);
}

TEST_CASE("rank by hand") {
  // One-dimensional corpus at distances 0.1, 0.5, 0.9 from q = 0.
  const RankingIndex index(Tensor({3, 1}, {0.1f, 0.5f, 0.9f}), Metric::euclidean);
  const auto q = vec({0.0f});
  CHECK(index.rank_of(q, vec({0.5f})) == 1);
  CHECK(index.rank_of(q, vec({0.05f})) == 0);
  CHECK(index.rank_of(q, vec({2.0f})) == 3);
  const std::size_t skip[] = {0};
  CHECK(index.rank_of(q, vec({0.5f}), skip) == 0);
  CHECK_THROWS_AS(RankingIndex(Tensor::zeros({0, 2}), Metric::euclidean), std::invalid_argument);
}

TEST_CASE("rank oracle on 200 random corpora") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> size(1, 60), dim(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = size(rng), d = dim(rng);
    const Metric metric = trial % 2 ? Metric::cosine : Metric::euclidean;
    // Coarse values make exact ties common.
    std::uniform_int_distribution<int> grid(-3, 3);
    std::vector<float> v(n * d);
    for (auto& x : v) x = 0.5f * static_cast<float>(grid(rng));
    for (std::size_t i = 0; i < n; ++i) v[i * d] = v[i * d] == 0.0f ? 1.0f : v[i * d];
    const Tensor emb({n, d}, v);
    const RankingIndex index(emb, metric);
    std::vector<std::vector<double>> corpus;
    for (std::size_t i = 0; i < n; ++i) corpus.emplace_back(v.begin() + i * d, v.begin() + (i + 1) * d);
    for (int probe = 0; probe < 5; ++probe) {
      std::vector<float> q(d), c(d);
      for (auto& x : q) x = 0.5f * static_cast<float>(grid(rng));
      for (auto& x : c) x = 0.5f * static_cast<float>(grid(rng));
      q[0] = 1.0f;
      c[0] = c[0] == 0.0f ? -1.0f : c[0];
      std::vector<std::size_t> exclude;
      if (probe % 2 && n > 1) exclude = {0, n - 1};
      const std::vector<double> qd(q.begin(), q.end()), cd(c.begin(), c.end());
      CAPTURE(trial);
      const std::size_t got = index.rank_of(q, c, exclude);
      CHECK(count_closer(index.sorted_distances(q, exclude), distance(q, c, metric)) == got);
      if (metric == Metric::euclidean) {
        // Half-integer coordinates: every distance comparison is exact.
        CHECK(got == oracle::brute_rank(corpus, qd, cd, metric, exclude));
      } else {
        const auto [lo, hi] = oracle::brute_rank_bounds(corpus, qd, cd, metric, exclude, 1e-12);
        CHECK(got >= lo);
        CHECK(got <= hi);
      }
    }
  }
}

TEST_CASE("nearest keeps corpus order on ties") {
  const RankingIndex index(Tensor({4, 1}, {2, 1, 1, 3}), Metric::euclidean);
  const auto q = vec({0.0f});
  CHECK(index.nearest(q, 3) == std::vector<std::size_t>{1, 2, 0});
  const std::size_t skip[] = {1};
  CHECK(index.nearest(q, 2, skip) == std::vector<std::size_t>{2, 0});
}

TEST_CASE("normalized rank and aggregation") {
  CHECK(normalized_rank(0, 100) == 0.0);
  CHECK(normalized_rank(50, 100) == 0.5);
  CHECK_THROWS_AS((void)normalized_rank(0, 0), std::invalid_argument);
  CHECK(attack_performance({{0.2, 0.4}}).mean_rank == doctest::Approx(0.3));
  const auto r = attack_performance({{0.1, 0.1}, {0.1}, {0.1, 0.1, 0.1}});
  CHECK(r.mean_rank == doctest::Approx(0.1));
  CHECK(r.per_target_rank.size() == 3);
  CHECK_THROWS_AS((void)attack_performance({}), std::invalid_argument);
}

TEST_CASE("recall at 1") {
  const RankingIndex tight(Tensor({4, 2}, {0, 0, 0, 0.01f, 5, 5, 5, 5.01f}), Metric::euclidean, {0, 0, 1, 1});
  CHECK(recall_at_1(tight) == 1.0);
  // Identical points of different classes: self is skipped, the other point wins.
  const RankingIndex twins(Tensor({2, 2}, {1, 1, 1, 1}), Metric::euclidean, {0, 1});
  CHECK(recall_at_1(twins) == 0.0);
  const RankingIndex unlabeled(Tensor({2, 2}, {1, 1, 1, 1}), Metric::euclidean);
  CHECK_THROWS_AS((void)recall_at_1(unlabeled), std::invalid_argument);
}
