#pragma once

#include "advrank/attack_kind.hpp"
#include "advrank/metrics.hpp"
#include "advrank/model.hpp"
#include "advrank/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

namespace advrank {

class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// l-inf budget and PGD schedule.
struct PerturbationBudget {
  double epsilon = 0.3;
  float alpha = 0.01f;
  std::size_t eta = 30;

  /// alpha = min(max(eps/10, 1/255), 0.01), eta = ceil(min(max(10, 2 eps/alpha), 30)).
  static PerturbationBudget from_epsilon(double epsilon);
  void validate() const;
};

float default_alpha(double epsilon);
std::size_t default_eta(double epsilon, float alpha);

/// Differentiable objective over a batch of images (k, N) -> scalar.
using LossFn = std::function<Tensor(const Tensor& images)>;
/// Called after every projected step with the iteration number (1-based) and iterate.
using PgdObserver = std::function<void(std::size_t iter, std::span<const float> x)>;

enum class StepDirection { descend, ascend };

struct PgdOptions {
  StepDirection direction = StepDirection::descend;
  /// Value box intersected with the epsilon ball. Pixels use [0, 1].
  float lower = 0.0f;
  float upper = 1.0f;
  PgdObserver observer;
};

struct PgdResult {
  Tensor image;
  /// Loss at each of the eta iterates before its step.
  std::vector<double> loss_trace;
};

/// Signed-gradient steps of size alpha, each followed by projection onto
/// {x : |x - x0|_inf <= eps, lower <= x <= upper}. Runs exactly eta steps
/// from x0 (no random start). Throws AttackError on a non-finite gradient.
PgdResult pgd(const LossFn& loss, const Tensor& x0, const PerturbationBudget& budget, const PgdOptions& options = {});

// Attack objectives. Images are batches (k, N) of perturbed items scored
// independently and summed; the other operands are fixed embeddings:
// queries/candidates (w, D), the inner comparison set (s, D).

/// sum_q sum_x [d(q, c) - d(q, x)]_+
Tensor loss_ca_plus(const EmbeddingModel& model, const Tensor& candidates, const Tensor& queries, const Tensor& inner,
                    Metric metric);
/// sum_q sum_x [d(q, x) - d(q, c)]_+
Tensor loss_ca_minus(const EmbeddingModel& model, const Tensor& candidates, const Tensor& queries, const Tensor& inner,
                     Metric metric);
/// sum_c sum_x [d(q, c) - d(q, x)]_+ with the query perturbed.
Tensor loss_qa_plus(const EmbeddingModel& model, const Tensor& queries, const Tensor& candidates, const Tensor& inner,
                    Metric metric);
/// sum_c sum_x [d(q, x) - d(q, c)]_+ with the query perturbed.
Tensor loss_qa_minus(const EmbeddingModel& model, const Tensor& queries, const Tensor& candidates, const Tensor& inner,
                     Metric metric);
/// QA loss for `direction` (QA+ or QA-) plus xi * QA+ on the frozen pool.
/// xi == 0 returns the plain QA loss without evaluating the pool term.
Tensor loss_sp_qa(const EmbeddingModel& model, const Tensor& queries, const Tensor& candidates, const Tensor& sp_pool,
                  const Tensor& inner, Metric metric, double xi, AttackKind direction);
/// Summed displacement |g(x~) - g(x)| of each row from its original
/// embedding, where g is the identity for Euclidean and row normalization for
/// cosine. To be maximized.
Tensor loss_max_shift(const EmbeddingModel& model, const Tensor& images, const Tensor& original, Metric metric);
/// DistAlt-CA+: sum d(q, c). DistAlt-QA-: -sum d(q, c) (descending it pushes the candidates away).
Tensor distance_alt_loss(const EmbeddingModel& model, const Tensor& images, const Tensor& counterparts, Metric metric,
                         AttackKind kind);
/// sum over targets of per_target(clamp(target + r, 0, 1)) for one shared r (1, N).
Tensor universal_loss(const Tensor& r, const Tensor& targets, const LossFn& per_target);

/// Images plus a shared perturbation, clipped to the pixel box.
Tensor apply_perturbation(const Tensor& images, const Tensor& r);

struct AttackSpec {
  AttackKind kind = AttackKind::ca_plus;
  /// Q, for candidate attacks (corpus indices).
  std::vector<std::size_t> queries;
  /// C, for query attacks (corpus indices).
  std::vector<std::size_t> candidates;
  double xi = 0.0;
  std::size_t g = 5;
  /// Size of the random subset of X used inside the hinge sums; 0 means all of X.
  std::size_t inner_sample = 256;
  std::uint64_t seed = 0;

  void validate(std::size_t corpus_size) const;
};

/// The attacked item: a corpus member or a free image (1, N).
struct Target {
  std::optional<std::size_t> corpus_index;
  Tensor image;
};

struct AttackOutcome {
  Tensor adversarial_image;
  RankReport rank_before;
  RankReport rank_after;
  std::optional<RankReport> sp_rank_before;
  std::optional<RankReport> sp_rank_after;
  double embedding_shift = 0.0;
  std::vector<double> loss_trace;
};

struct RankMeasurement {
  RankReport before;
  RankReport after;
  std::optional<RankReport> sp_before;
  std::optional<RankReport> sp_after;
  double embedding_shift = 0.0;
};

/// Ranks of the original and adversarial item in `index` under `model`.
/// Candidate attacks rank the item for each query in Q, excluding that query
/// and the item itself from X. Query attacks rank each c in C (and each member
/// of the semantic pool) for the item as query, excluding the item from X.
/// Ranks are normalized by |X|.
RankMeasurement measure_ranks(const EmbeddingModel& model, const RankingIndex& index, const AttackSpec& spec,
                              const Target& original, const Tensor& adversarial);

/// Top-g items for `query` from X without C and without the query's own row.
std::vector<std::size_t> semantic_pool(const RankingIndex& index, std::span<const float> query,
                                       std::span<const std::size_t> candidates, std::optional<std::size_t> self,
                                       std::size_t g);

/// Fixed random subset of X minus `exclude`, as embeddings (s, D).
Tensor inner_sample(const RankingIndex& index, std::span<const std::size_t> exclude, std::size_t count,
                    std::uint64_t seed);

/// The differentiable objective `run_attack` descends for this target.
LossFn make_objective(const EmbeddingModel& model, const RankingIndex& index, const AttackSpec& spec,
                      const Target& target);

AttackOutcome run_attack(const EmbeddingModel& model, const RankingIndex& index, const AttackSpec& spec,
                         const PerturbationBudget& budget, const Target& target);

/// Convenience: a corpus member of `images` as the target.
Target corpus_target(const Tensor& images, std::size_t item);

/// Max-shift adversarial examples for a batch (params frozen). Rows are
/// optimized jointly but independently. `shift` receives the per-row metric
/// distance between original and adversarial embeddings when non-null.
Tensor max_shift_batch(const EmbeddingModel& model, const Tensor& images, const PerturbationBudget& budget,
                       Metric metric, std::vector<double>* shift = nullptr);

struct UniversalSpec {
  /// One of I-CA+, I-CA-, I-QA+, I-QA-.
  AttackKind kind = AttackKind::ica_plus;
  /// Shared Q (candidate kinds) or C (query kinds).
  std::vector<std::size_t> counterparts;
  /// Items the perturbation is optimized on.
  std::vector<std::size_t> targets;
  std::size_t inner_sample = 256;
  std::size_t minibatch = 32;
  /// PGD runs this many times the per-image eta.
  std::size_t iteration_factor = 5;
  std::uint64_t seed = 0;
};

struct UniversalResult {
  Tensor perturbation;  // (1, N), |r|_inf <= eps
  std::vector<double> loss_trace;
};

UniversalResult craft_universal(const EmbeddingModel& model, const RankingIndex& index, const Tensor& corpus_images,
                                const UniversalSpec& spec, const PerturbationBudget& budget);

}  // namespace advrank
