#pragma once

#include "advrank/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace advrank {

enum class Metric { euclidean, cosine };

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view name);

/// d(a, b). Euclidean is the l2 norm of the difference; cosine is
/// 1 - a.b / (|a||b|), in [0, 2]. Throws on a zero vector under cosine.
double distance(std::span<const float> a, std::span<const float> b, Metric metric);

/// Differentiable distances between every row of a (n_a, D) and b (n_b, D) -> (n_a, n_b).
Tensor pairwise_distance(const Tensor& a, const Tensor& b, Metric metric);
/// Differentiable distance between matching rows of two (n, D) tensors -> (n).
Tensor row_distance(const Tensor& a, const Tensor& b, Metric metric);
/// Rows scaled to unit length.
Tensor normalize_rows(const Tensor& a);

/// Candidate corpus X with cached embeddings. Immutable after construction.
class RankingIndex {
 public:
  RankingIndex(Tensor corpus_embeddings, Metric metric, std::vector<int> labels = {});

  std::size_t size() const { return size_; }
  std::size_t dim() const { return dim_; }
  Metric metric() const { return metric_; }
  const Tensor& embeddings() const { return embeddings_; }
  std::span<const float> embedding(std::size_t i) const;
  bool has_labels() const { return !labels_.empty(); }
  const std::vector<int>& labels() const { return labels_; }

  /// d(q, x_i) for every corpus item, NaN for excluded rows.
  std::vector<double> distances(std::span<const float> q, std::span<const std::size_t> exclude = {}) const;
  /// Ascending distances from q to the non-excluded corpus; feed to count_closer().
  std::vector<double> sorted_distances(std::span<const float> q, std::span<const std::size_t> exclude = {}) const;

  /// |{x in X \ exclude : d(q, x) < d(q, c)}|.
  std::size_t rank_of(std::span<const float> q, std::span<const float> c,
                      std::span<const std::size_t> exclude = {}) const;

  /// The k closest non-excluded items to q; ties keep corpus order.
  std::vector<std::size_t> nearest(std::span<const float> q, std::size_t k,
                                   std::span<const std::size_t> exclude = {}) const;

 private:
  Tensor embeddings_;
  Metric metric_;
  std::vector<int> labels_;
  std::size_t size_ = 0;
  std::size_t dim_ = 0;
};

/// Number of entries in an ascending list strictly below d.
std::size_t count_closer(std::span<const double> sorted, double d);

/// rank / corpus_size.
double normalized_rank(std::size_t rank, std::size_t corpus_size);

struct RankReport {
  std::vector<double> per_target_rank;
  double mean_rank = 0.0;
  std::optional<double> sp_mean_rank;
};

/// Rows are targets, columns their counterparts (queries for CA, candidates
/// for QA). Each row is averaged into one per-target rank; mean_rank is the
/// mean over targets.
RankReport attack_performance(const std::vector<std::vector<double>>& ranks);

/// Fraction of queries whose nearest corpus item shares their label. When
/// `self_rows` is given, query i ignores corpus row self_rows[i].
double recall_at_1(const RankingIndex& index, const Tensor& query_embeddings, std::span<const int> query_labels,
                   std::span<const std::size_t> self_rows = {});
/// Leave-one-out Recall@1 with the corpus as its own query set.
double recall_at_1(const RankingIndex& index);

}  // namespace advrank
