#include "advrank/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace advrank {

std::string_view to_string(Metric metric) { return metric == Metric::euclidean ? "euclidean" : "cosine"; }

Metric parse_metric(std::string_view name) {
  if (name == "euclidean" || name == "E") return Metric::euclidean;
  if (name == "cosine" || name == "C") return Metric::cosine;
  throw std::invalid_argument("unknown metric '" + std::string(name) + "'");
}

double distance(std::span<const float> a, std::span<const float> b, Metric metric) {
  if (a.size() != b.size()) throw ShapeError("distance", Shape{a.size()}, Shape{b.size()});
  if (metric == Metric::euclidean) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - b[i];
      acc += d * d;
    }
    return std::sqrt(acc);
  }
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine distance is undefined for a zero vector");
  const double sim = ab / std::sqrt(aa * bb);
  return std::max(0.0, 1.0 - std::clamp(sim, -1.0, 1.0));
}

// ---------------------------------------------------------------------------
// Differentiable distances

namespace {

void require_rows(const Tensor& t, const char* op) {
  if (t.dim() != 2) throw ShapeError(std::string(op) + ": expected (n, D), got " + to_string(t.shape()));
}

void require_nonzero_rows(const Tensor& norms) {
  for (float v : norms.data()) {
    if (v == 0.0f) throw std::domain_error("cosine distance is undefined for a zero embedding");
  }
}

}  // namespace

Tensor normalize_rows(const Tensor& a) {
  require_rows(a, "normalize_rows");
  Tensor norms = l2_norm_rows(a);
  require_nonzero_rows(norms);
  return div(a, reshape(norms, {a.size(0), 1}));
}

Tensor pairwise_distance(const Tensor& a, const Tensor& b, Metric metric) {
  require_rows(a, "pairwise_distance");
  require_rows(b, "pairwise_distance");
  if (a.size(1) != b.size(1)) throw ShapeError("pairwise_distance", a.shape(), b.shape());
  const std::size_t na = a.size(0), nb = b.size(0), d = a.size(1);
  if (metric == Metric::euclidean) {
    Tensor diff = sub(reshape(a, {na, 1, d}), reshape(b, {1, nb, d}));
    return reshape(l2_norm_rows(reshape(diff, {na * nb, d})), {na, nb});
  }
  Tensor sim = matmul(normalize_rows(a), transpose(normalize_rows(b)));
  return add_scalar(neg(sim), 1.0f);
}

Tensor row_distance(const Tensor& a, const Tensor& b, Metric metric) {
  require_rows(a, "row_distance");
  if (a.shape() != b.shape()) throw ShapeError("row_distance", a.shape(), b.shape());
  if (metric == Metric::euclidean) return l2_norm_rows(sub(a, b));
  Tensor na = l2_norm_rows(a);
  Tensor nb = l2_norm_rows(b);
  require_nonzero_rows(na);
  require_nonzero_rows(nb);
  return add_scalar(neg(div(dot_rows(a, b), mul(na, nb))), 1.0f);
}

// ---------------------------------------------------------------------------
// RankingIndex

namespace {

bool excluded(std::span<const std::size_t> exclude, std::size_t i) {
  return std::find(exclude.begin(), exclude.end(), i) != exclude.end();
}

}  // namespace

RankingIndex::RankingIndex(Tensor corpus_embeddings, Metric metric, std::vector<int> labels)
    : embeddings_(corpus_embeddings.detach()), metric_(metric), labels_(std::move(labels)) {
  require_rows(embeddings_, "RankingIndex");
  size_ = embeddings_.size(0);
  dim_ = embeddings_.size(1);
  if (size_ == 0) throw std::invalid_argument("RankingIndex: empty corpus");
  if (!labels_.empty() && labels_.size() != size_) {
    throw std::invalid_argument("RankingIndex: " + std::to_string(labels_.size()) + " labels for " +
                                std::to_string(size_) + " items");
  }
  for (float v : embeddings_.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("RankingIndex: non-finite embedding");
  }
}

std::span<const float> RankingIndex::embedding(std::size_t i) const {
  if (i >= size_) throw std::out_of_range("RankingIndex: item " + std::to_string(i) + " out of range");
  return embeddings_.data().subspan(i * dim_, dim_);
}

std::vector<double> RankingIndex::distances(std::span<const float> q, std::span<const std::size_t> exclude) const {
  std::vector<double> out(size_);
  for (std::size_t i = 0; i < size_; ++i) {
    out[i] = excluded(exclude, i) ? std::numeric_limits<double>::quiet_NaN() : distance(q, embedding(i), metric_);
  }
  return out;
}

std::vector<double> RankingIndex::sorted_distances(std::span<const float> q,
                                                   std::span<const std::size_t> exclude) const {
  std::vector<double> out;
  out.reserve(size_);
  for (std::size_t i = 0; i < size_; ++i) {
    if (!excluded(exclude, i)) out.push_back(distance(q, embedding(i), metric_));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t count_closer(std::span<const double> sorted, double d) {
  return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), d) - sorted.begin());
}

std::size_t RankingIndex::rank_of(std::span<const float> q, std::span<const float> c,
                                  std::span<const std::size_t> exclude) const {
  const double dc = distance(q, c, metric_);
  std::size_t rank = 0;
  for (std::size_t i = 0; i < size_; ++i) {
    if (!excluded(exclude, i) && distance(q, embedding(i), metric_) < dc) ++rank;
  }
  return rank;
}

std::vector<std::size_t> RankingIndex::nearest(std::span<const float> q, std::size_t k,
                                               std::span<const std::size_t> exclude) const {
  const auto d = distances(q, exclude);
  std::vector<std::size_t> order;
  order.reserve(size_);
  for (std::size_t i = 0; i < size_; ++i) {
    if (!std::isnan(d[i])) order.push_back(i);
  }
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return d[a] < d[b] || (d[a] == d[b] && a < b); });
  order.resize(k);
  return order;
}

// ---------------------------------------------------------------------------
// Aggregates

double normalized_rank(std::size_t rank, std::size_t corpus_size) {
  if (corpus_size == 0) throw std::invalid_argument("normalized_rank: empty corpus");
  if (rank >= corpus_size) {
    throw std::out_of_range("normalized_rank: rank " + std::to_string(rank) + " >= corpus size " +
                            std::to_string(corpus_size));
  }
  return static_cast<double>(rank) / static_cast<double>(corpus_size);
}

RankReport attack_performance(const std::vector<std::vector<double>>& ranks) {
  if (ranks.empty()) throw std::invalid_argument("attack_performance: no targets");
  RankReport report;
  double total = 0.0;
  for (const auto& row : ranks) {
    if (row.empty()) throw std::invalid_argument("attack_performance: target without counterparts");
    const double m = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
    report.per_target_rank.push_back(m);
    total += m;
  }
  report.mean_rank = total / static_cast<double>(ranks.size());
  return report;
}

double recall_at_1(const RankingIndex& index, const Tensor& query_embeddings, std::span<const int> query_labels,
                   std::span<const std::size_t> self_rows) {
  if (!index.has_labels()) throw std::invalid_argument("recall_at_1: corpus has no labels");
  if (query_embeddings.dim() != 2 || query_embeddings.size(1) != index.dim()) {
    throw ShapeError("recall_at_1", query_embeddings.shape(), Shape{index.size(), index.dim()});
  }
  const std::size_t n = query_embeddings.size(0);
  if (query_labels.size() != n) throw std::invalid_argument("recall_at_1: missing query labels");
  if (!self_rows.empty() && self_rows.size() != n) throw std::invalid_argument("recall_at_1: self_rows size mismatch");
  if (n == 0) throw std::invalid_argument("recall_at_1: no queries");

  const auto q_all = query_embeddings.data();
  const std::size_t d = index.dim();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto q = q_all.subspan(i * d, d);
    std::size_t best = index.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < index.size(); ++j) {
      if (!self_rows.empty() && self_rows[i] == j) continue;
      const double dj = distance(q, index.embedding(j), index.metric());
      if (dj < best_d) {
        best_d = dj;
        best = j;
      }
    }
    if (best < index.size() && index.labels()[best] == query_labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

double recall_at_1(const RankingIndex& index) {
  std::vector<std::size_t> self(index.size());
  std::iota(self.begin(), self.end(), std::size_t{0});
  return recall_at_1(index, index.embeddings(), index.labels(), self);
}

}  // namespace advrank
