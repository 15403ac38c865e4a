#include "advrank/attack.hpp"

#include "advrank/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

namespace advrank {

// ---------------------------------------------------------------------------
// Budget

float default_alpha(double epsilon) { return static_cast<float>(std::min(std::max(epsilon / 10.0, 1.0 / 255.0), 0.01)); }

std::size_t default_eta(double epsilon, float alpha) {
  const double raw = std::min(std::max(10.0, 2.0 * epsilon / static_cast<double>(alpha)), 30.0);
  // 2 * 0.1 / 0.01 must stay 20, not round up to 21 through float noise.
  return static_cast<std::size_t>(std::ceil(raw - 1e-6));
}

PerturbationBudget PerturbationBudget::from_epsilon(double epsilon) {
  PerturbationBudget b;
  b.epsilon = epsilon;
  b.alpha = default_alpha(epsilon);
  b.eta = default_eta(epsilon, b.alpha);
  b.validate();
  return b;
}

void PerturbationBudget::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("budget: epsilon must lie in [0, 1]");
  if (!(alpha > 0.0f) || !std::isfinite(alpha)) throw std::invalid_argument("budget: alpha must be positive");
}

// ---------------------------------------------------------------------------
// PGD

PgdResult pgd(const LossFn& loss, const Tensor& x0, const PerturbationBudget& budget, const PgdOptions& options) {
  budget.validate();
  const auto start = x0.data();
  const std::size_t n = start.size();
  const double eps = budget.epsilon;

  // Per-element bounds of the feasible set, tightened so that |x - x0| <= eps
  // holds exactly when evaluated in double.
  std::vector<float> lo(n), hi(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float a = start[i];
    if (!(a >= options.lower && a <= options.upper)) {
      throw AttackError("pgd: starting point has value " + std::to_string(a) + " outside [" +
                        std::to_string(options.lower) + ", " + std::to_string(options.upper) + "]");
    }
    float l = std::max(options.lower, static_cast<float>(a - eps));
    while (static_cast<double>(a) - l > eps) l = std::nextafter(l, options.upper);
    float h = std::min(options.upper, static_cast<float>(a + eps));
    while (static_cast<double>(h) - a > eps) h = std::nextafter(h, options.lower);
    lo[i] = std::min(l, a);
    hi[i] = std::max(h, a);
  }

  const float step = options.direction == StepDirection::descend ? -budget.alpha : budget.alpha;
  std::vector<float> x(start.begin(), start.end());
  PgdResult result;
  result.loss_trace.reserve(budget.eta);
  for (std::size_t t = 0; t < budget.eta; ++t) {
    Tensor leaf(x0.shape(), x, true);
    std::vector<float> grad;
    {
      Tape tape;
      const Tensor value = loss(leaf);
      if (value.numel() != 1) throw AttackError("pgd: objective must return a scalar, got " + to_string(value.shape()));
      const double v = value.item();
      if (!std::isfinite(v)) throw AttackError("pgd: non-finite objective at iteration " + std::to_string(t));
      result.loss_trace.push_back(v);
      if (value.on_tape()) {
        tape.backward(value);
        if (leaf.has_grad()) grad.assign(leaf.grad().begin(), leaf.grad().end());
      }
    }
    if (grad.empty()) grad.assign(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      const float g = grad[i];
      if (!std::isfinite(g)) {
        throw AttackError("pgd: non-finite gradient at iteration " + std::to_string(t) + ", element " +
                          std::to_string(i));
      }
      const float s = g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f);
      x[i] = std::clamp(x[i] + step * s, lo[i], hi[i]);
      if (x[i] < lo[i] || x[i] > hi[i]) throw std::logic_error("pgd: projection left the feasible set");
    }
    if (options.observer) options.observer(t + 1, x);
  }
  result.image = Tensor(x0.shape(), std::move(x));
  return result;
}

// ---------------------------------------------------------------------------
// Objectives

namespace {

// sum over (i, j, x) of relu(sign * (lhs[i, j] - rhs[i, x])).
Tensor hinge_sum(const Tensor& lhs, const Tensor& rhs, bool plus) {
  const std::size_t a = lhs.size(0), b = lhs.size(1), s = rhs.size(1);
  if (rhs.size(0) != a) throw ShapeError("hinge_sum", lhs.shape(), rhs.shape());
  Tensor diff = sub(reshape(lhs, {a, b, 1}), reshape(rhs, {a, 1, s}));
  return sum(relu(plus ? diff : neg(diff)));
}

void require_nonempty(const Tensor& t, const char* what) {
  if (!t.defined() || t.dim() != 2 || t.size(0) == 0) throw std::invalid_argument(std::string(what) + " must be a nonempty (n, D) tensor");
}

Tensor candidate_hinge(const EmbeddingModel& model, const Tensor& candidates, const Tensor& queries,
                       const Tensor& inner, Metric metric, bool plus) {
  require_nonempty(queries, "queries");
  require_nonempty(inner, "inner set");
  const Tensor e = model.embed(candidates);
  return hinge_sum(pairwise_distance(queries, e, metric), pairwise_distance(queries, inner, metric), plus);
}

Tensor query_hinge(const EmbeddingModel& model, const Tensor& queries, const Tensor& candidates, const Tensor& inner,
                   Metric metric, bool plus) {
  require_nonempty(candidates, "candidates");
  require_nonempty(inner, "inner set");
  const Tensor e = model.embed(queries);
  return hinge_sum(pairwise_distance(e, candidates, metric), pairwise_distance(e, inner, metric), plus);
}

}  // namespace

Tensor loss_ca_plus(const EmbeddingModel& model, const Tensor& candidates, const Tensor& queries, const Tensor& inner,
                    Metric metric) {
  return candidate_hinge(model, candidates, queries, inner, metric, true);
}

Tensor loss_ca_minus(const EmbeddingModel& model, const Tensor& candidates, const Tensor& queries, const Tensor& inner,
                     Metric metric) {
  return candidate_hinge(model, candidates, queries, inner, metric, false);
}

Tensor loss_qa_plus(const EmbeddingModel& model, const Tensor& queries, const Tensor& candidates, const Tensor& inner,
                    Metric metric) {
  return query_hinge(model, queries, candidates, inner, metric, true);
}

Tensor loss_qa_minus(const EmbeddingModel& model, const Tensor& queries, const Tensor& candidates, const Tensor& inner,
                     Metric metric) {
  return query_hinge(model, queries, candidates, inner, metric, false);
}

Tensor loss_sp_qa(const EmbeddingModel& model, const Tensor& queries, const Tensor& candidates, const Tensor& sp_pool,
                  const Tensor& inner, Metric metric, double xi, AttackKind direction) {
  if (direction != AttackKind::qa_plus && direction != AttackKind::qa_minus) {
    throw std::invalid_argument("loss_sp_qa: direction must be QA+ or QA-");
  }
  if (!(xi >= 0.0)) throw std::invalid_argument("loss_sp_qa: xi must be >= 0");
  const bool plus = direction == AttackKind::qa_plus;
  Tensor main = query_hinge(model, queries, candidates, inner, metric, plus);
  if (xi == 0.0) return main;
  return add(main, scale(query_hinge(model, queries, sp_pool, inner, metric, true), static_cast<float>(xi)));
}

Tensor loss_max_shift(const EmbeddingModel& model, const Tensor& images, const Tensor& original, Metric metric) {
  const Tensor e = model.embed(images);
  if (metric == Metric::cosine) return sum(l2_norm_rows(sub(normalize_rows(e), normalize_rows(original.detach()))));
  return sum(l2_norm_rows(sub(e, original.detach())));
}

Tensor distance_alt_loss(const EmbeddingModel& model, const Tensor& images, const Tensor& counterparts, Metric metric,
                         AttackKind kind) {
  require_nonempty(counterparts, "counterparts");
  const Tensor e = model.embed(images);
  switch (kind) {
    case AttackKind::dist_ca_plus:
      return sum(pairwise_distance(counterparts, e, metric));
    case AttackKind::dist_qa_minus:
      return neg(sum(pairwise_distance(e, counterparts, metric)));
    default:
      throw std::invalid_argument("distance_alt_loss: kind must be DistAlt-CA+ or DistAlt-QA-");
  }
}

Tensor apply_perturbation(const Tensor& images, const Tensor& r) { return clamp(add(images, r), 0.0f, 1.0f); }

Tensor universal_loss(const Tensor& r, const Tensor& targets, const LossFn& per_target) {
  if (!targets.defined() || targets.dim() != 2 || targets.size(0) == 0) {
    throw std::invalid_argument("universal_loss: empty target set");
  }
  return per_target(apply_perturbation(targets, r));
}

// ---------------------------------------------------------------------------
// Attack specs and rank measurement

void AttackSpec::validate(std::size_t corpus_size) const {
  const AttackKind base = per_image_kind(kind);
  auto check = [&](const std::vector<std::size_t>& ids, const char* what) {
    if (ids.empty()) throw std::invalid_argument(std::string(to_string(kind)) + " needs a nonempty " + what);
    std::vector<std::size_t> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw std::invalid_argument(std::string(what) + " contains duplicates");
    }
    if (sorted.back() >= corpus_size) {
      throw std::out_of_range(std::string(what) + " index " + std::to_string(sorted.back()) + " outside corpus of " +
                              std::to_string(corpus_size));
    }
  };
  if (perturbs_candidate(base)) check(queries, "query set");
  if (perturbs_query(base)) check(candidates, "candidate set");
  if (!(xi >= 0.0)) throw std::invalid_argument("xi must be >= 0");
  if (xi > 0.0 && g == 0) throw std::invalid_argument("g must be positive");
}

Target corpus_target(const Tensor& images, std::size_t item) {
  if (item >= images.size(0)) throw std::out_of_range("corpus_target: item out of range");
  return {item, slice_rows(images.detach(), item, item + 1)};
}

std::vector<std::size_t> semantic_pool(const RankingIndex& index, std::span<const float> query,
                                       std::span<const std::size_t> candidates, std::optional<std::size_t> self,
                                       std::size_t g) {
  std::vector<std::size_t> exclude(candidates.begin(), candidates.end());
  if (self) exclude.push_back(*self);
  std::sort(exclude.begin(), exclude.end());
  exclude.erase(std::unique(exclude.begin(), exclude.end()), exclude.end());
  if (index.size() < exclude.size() + g) {
    throw AttackError("semantic pool: |X \\ C| = " + std::to_string(index.size() - exclude.size()) +
                      " is smaller than G = " + std::to_string(g));
  }
  return index.nearest(query, g, exclude);
}

Tensor inner_sample(const RankingIndex& index, std::span<const std::size_t> exclude, std::size_t count,
                    std::uint64_t seed) {
  std::vector<std::size_t> pool;
  pool.reserve(index.size());
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (std::find(exclude.begin(), exclude.end(), j) == exclude.end()) pool.push_back(j);
  }
  if (pool.empty()) throw AttackError("inner sample: corpus has no items left after exclusions");
  if (count != 0 && count < pool.size()) {
    std::mt19937_64 rng(seed);
    pool = sample_distinct(pool, count, rng);
    std::sort(pool.begin(), pool.end());
  }
  return gather_rows(index.embeddings().detach(), pool);
}

namespace {

RankReport report_of(std::vector<double> ranks) { return attack_performance({std::move(ranks)}); }

void require_single_row(const Tensor& image, std::size_t pixels, const char* what) {
  if (!image.defined() || image.dim() != 2 || image.size(0) != 1 || image.size(1) != pixels) {
    throw ShapeError(std::string(what) + ": expected an image of shape (1, " + std::to_string(pixels) + "), got " +
                     (image.defined() ? to_string(image.shape()) : std::string("undefined")));
  }
}

}  // namespace

RankMeasurement measure_ranks(const EmbeddingModel& model, const RankingIndex& index, const AttackSpec& spec,
                              const Target& original, const Tensor& adversarial) {
  require_single_row(original.image, model.input_dim(), "measure_ranks");
  require_single_row(adversarial, model.input_dim(), "measure_ranks");
  const Tensor e0 = model.embed(original.image);
  const Tensor e1 = model.embed(adversarial);
  const auto before = e0.data();
  const auto after = e1.data();
  const double n = static_cast<double>(index.size());
  const AttackKind base = per_image_kind(spec.kind);

  RankMeasurement m;
  m.embedding_shift = distance(before, after, index.metric());
  if (perturbs_candidate(base)) {
    std::vector<double> rb, ra;
    for (std::size_t q : spec.queries) {
      std::vector<std::size_t> exclude{q};
      if (original.corpus_index) exclude.push_back(*original.corpus_index);
      const auto qe = index.embedding(q);
      const auto sorted = index.sorted_distances(qe, exclude);
      rb.push_back(count_closer(sorted, distance(qe, before, index.metric())) / n);
      ra.push_back(count_closer(sorted, distance(qe, after, index.metric())) / n);
    }
    m.before = report_of(std::move(rb));
    m.after = report_of(std::move(ra));
  } else if (perturbs_query(base)) {
    std::vector<std::size_t> exclude;
    if (original.corpus_index) exclude.push_back(*original.corpus_index);
    const auto sorted_b = index.sorted_distances(before, exclude);
    const auto sorted_a = index.sorted_distances(after, exclude);
    auto ranks = [&](std::span<const std::size_t> items, std::vector<double>& rb, std::vector<double>& ra) {
      for (std::size_t c : items) {
        const auto ce = index.embedding(c);
        rb.push_back(count_closer(sorted_b, distance(before, ce, index.metric())) / n);
        ra.push_back(count_closer(sorted_a, distance(after, ce, index.metric())) / n);
      }
    };
    std::vector<double> rb, ra;
    ranks(spec.candidates, rb, ra);
    m.before = report_of(std::move(rb));
    m.after = report_of(std::move(ra));
    if (spec.g > 0 && base != AttackKind::dist_qa_minus) {
      const auto pool = semantic_pool(index, before, spec.candidates, original.corpus_index, spec.g);
      std::vector<double> sb, sa;
      ranks(pool, sb, sa);
      m.sp_before = report_of(std::move(sb));
      m.sp_after = report_of(std::move(sa));
    }
  }
  return m;
}

LossFn make_objective(const EmbeddingModel& model, const RankingIndex& index, const AttackSpec& spec,
                      const Target& target) {
  spec.validate(index.size());
  require_single_row(target.image, model.input_dim(), "make_objective");
  const Metric metric = index.metric();
  const AttackKind base = per_image_kind(spec.kind);
  const Tensor all = index.embeddings().detach();
  std::vector<std::size_t> self;
  if (target.corpus_index) self.push_back(*target.corpus_index);

  if (base == AttackKind::max_shift) {
    const Tensor original = model.embed(target.image);
    return [&model, original, metric](const Tensor& x) { return loss_max_shift(model, x, original, metric); };
  }
  if (perturbs_candidate(base)) {
    const Tensor q = gather_rows(all, spec.queries);
    if (base == AttackKind::dist_ca_plus) {
      return [&model, q, metric](const Tensor& x) {
        return distance_alt_loss(model, x, q, metric, AttackKind::dist_ca_plus);
      };
    }
    const Tensor inner = inner_sample(index, self, spec.inner_sample, spec.seed);
    const bool plus = base == AttackKind::ca_plus;
    return [&model, q, inner, metric, plus](const Tensor& x) {
      return plus ? loss_ca_plus(model, x, q, inner, metric) : loss_ca_minus(model, x, q, inner, metric);
    };
  }
  const Tensor c = gather_rows(all, spec.candidates);
  if (base == AttackKind::dist_qa_minus) {
    return [&model, c, metric](const Tensor& x) {
      return distance_alt_loss(model, x, c, metric, AttackKind::dist_qa_minus);
    };
  }
  const Tensor inner = inner_sample(index, self, spec.inner_sample, spec.seed);
  Tensor pool;
  if (spec.xi > 0.0) {
    // Frozen from the unperturbed query for the whole attack.
    const Tensor e = model.embed(target.image);
    pool = gather_rows(all, semantic_pool(index, e.data(), spec.candidates, target.corpus_index, spec.g));
  }
  const double xi = spec.xi;
  return [&model, c, pool, inner, metric, xi, base](const Tensor& x) {
    return loss_sp_qa(model, x, c, pool, inner, metric, xi, base);
  };
}

AttackOutcome run_attack(const EmbeddingModel& model, const RankingIndex& index, const AttackSpec& spec,
                         const PerturbationBudget& budget, const Target& target) {
  budget.validate();
  const LossFn objective = make_objective(model, index, spec, target);
  PgdOptions options;
  if (spec.kind == AttackKind::max_shift) options.direction = StepDirection::ascend;
  PgdResult r = pgd(objective, target.image, budget, options);

  AttackOutcome out;
  out.loss_trace = std::move(r.loss_trace);
  out.adversarial_image = r.image;
  RankMeasurement m = measure_ranks(model, index, spec, target, r.image);
  out.rank_before = std::move(m.before);
  out.rank_after = std::move(m.after);
  out.sp_rank_before = std::move(m.sp_before);
  out.sp_rank_after = std::move(m.sp_after);
  out.embedding_shift = m.embedding_shift;
  return out;
}

Tensor max_shift_batch(const EmbeddingModel& model, const Tensor& images, const PerturbationBudget& budget,
                       Metric metric, std::vector<double>* shift) {
  const Tensor x0 = images.detach();
  const Tensor original = model.embed(x0);
  PgdOptions options;
  options.direction = StepDirection::ascend;
  const Tensor adv =
      pgd([&](const Tensor& x) { return loss_max_shift(model, x, original, metric); }, x0, budget, options).image;
  if (shift) {
    const Tensor moved = model.embed(adv);
    const std::size_t n = x0.size(0), d = model.embed_dim();
    shift->assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      (*shift)[i] = distance(original.data().subspan(i * d, d), moved.data().subspan(i * d, d), metric);
    }
  }
  return adv;
}

// ---------------------------------------------------------------------------
// Universal perturbations

UniversalResult craft_universal(const EmbeddingModel& model, const RankingIndex& index, const Tensor& corpus_images,
                                const UniversalSpec& spec, const PerturbationBudget& budget) {
  if (!is_universal(spec.kind)) throw std::invalid_argument("craft_universal: kind must be I-CA+/-, I-QA+/-");
  if (spec.targets.empty()) throw std::invalid_argument("craft_universal: empty target set");
  if (spec.counterparts.empty()) throw std::invalid_argument("craft_universal: empty counterpart set");
  if (spec.minibatch == 0) throw std::invalid_argument("craft_universal: minibatch must be positive");
  budget.validate();

  const AttackKind base = per_image_kind(spec.kind);
  const Metric metric = index.metric();
  const Tensor counter = gather_rows(index.embeddings().detach(), spec.counterparts);
  const Tensor inner = inner_sample(index, spec.counterparts, spec.inner_sample, spec.seed);
  const Tensor targets = gather_rows(corpus_images.detach(), spec.targets);

  LossFn per_target = [&model, counter, inner, metric, base](const Tensor& x) {
    switch (base) {
      case AttackKind::ca_plus:
        return loss_ca_plus(model, x, counter, inner, metric);
      case AttackKind::ca_minus:
        return loss_ca_minus(model, x, counter, inner, metric);
      case AttackKind::qa_plus:
        return loss_qa_plus(model, x, counter, inner, metric);
      default:
        return loss_qa_minus(model, x, counter, inner, metric);
    }
  };

  auto rng = std::make_shared<std::mt19937_64>(spec.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> rows(spec.targets.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  LossFn objective = [&, rng, rows, per_target](const Tensor& r) {
    if (rows.size() <= spec.minibatch) return universal_loss(r, targets, per_target);
    auto pick = sample_distinct(rows, spec.minibatch, *rng);
    std::sort(pick.begin(), pick.end());
    return universal_loss(r, gather_rows(targets, pick), per_target);
  };

  PerturbationBudget schedule = budget;
  schedule.eta = budget.eta * spec.iteration_factor;
  PgdOptions options;
  options.lower = -1.0f;
  options.upper = 1.0f;
  const Tensor zero = Tensor::zeros({1, model.input_dim()});
  PgdResult r = pgd(objective, zero, schedule, options);
  return {r.image, std::move(r.loss_trace)};
}

}  // namespace advrank
