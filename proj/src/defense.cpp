#include "advrank/defense.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

namespace advrank {

std::string_view to_string(DefenseVariant v) { return v == DefenseVariant::shift_replace ? "shift-replace" : "trip-es"; }

DefenseVariant parse_defense_variant(std::string_view name) {
  if (name == "shift-replace") return DefenseVariant::shift_replace;
  if (name == "trip-es") return DefenseVariant::trip_es;
  throw std::invalid_argument("unknown defense variant '" + std::string(name) + "' (expected shift-replace or trip-es)");
}

void DefenseConfig::validate() const {
  budget.validate();
  base.validate();
  if (base.loss_kind != LossKind::triplet) throw std::invalid_argument("defense: only the triplet loss is supported");
  if (!(trip_es_weight >= 0.0f)) throw std::invalid_argument("defense: trip_es_weight must be >= 0");
}

namespace {

struct InnerResult {
  Tensor images;
  std::vector<bool> ok;
};

// Max-shift replacements for every row. A row whose attack produces
// non-finite values is marked not ok.
InnerResult inner_attack(const EmbeddingModel& model, const Tensor& clean, const DefenseConfig& cfg) {
  const std::size_t n = clean.size(0);
  if (cfg.budget.epsilon == 0.0 || cfg.budget.eta == 0) return {clean, std::vector<bool>(n, true)};
  const Metric metric = cfg.base.metric;
  std::vector<double> shift;
  try {
    InnerResult r{max_shift_batch(model, clean, cfg.budget, metric, &shift), {}};
    r.ok.resize(n);
    for (std::size_t i = 0; i < n; ++i) r.ok[i] = std::isfinite(shift[i]);
    return r;
  } catch (const std::exception&) {
    // Retry row by row so one bad sample does not poison the batch.
  }
  std::vector<Tensor> rows;
  InnerResult r;
  r.ok.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor x = slice_rows(clean, i, i + 1);
    try {
      rows.push_back(max_shift_batch(model, x, cfg.budget, metric, &shift));
      r.ok[i] = std::isfinite(shift[0]);
    } catch (const std::exception&) {
      rows.push_back(x);
      r.ok[i] = false;
    }
  }
  r.images = concat_rows(rows);
  return r;
}

struct Triplet {
  Tensor a, p, n;
  std::size_t skipped = 0;
};

Triplet split_kept(const InnerResult& inner, std::size_t b) {
  std::vector<std::size_t> ka, kp, kn;
  Triplet t;
  for (std::size_t i = 0; i < b; ++i) {
    if (inner.ok[i] && inner.ok[b + i] && inner.ok[2 * b + i]) {
      ka.push_back(i);
      kp.push_back(b + i);
      kn.push_back(2 * b + i);
    } else {
      ++t.skipped;
    }
  }
  if (t.skipped) {
    std::cerr << "warning: skipped " << t.skipped << " triplet(s) with a non-finite inner shift\n";
  }
  if (!ka.empty()) {
    t.a = gather_rows(inner.images, ka);
    t.p = gather_rows(inner.images, kp);
    t.n = gather_rows(inner.images, kn);
  }
  return t;
}

double clean_triplet_loss(const EmbeddingModel& model, const Tensor& a, const Tensor& p, const Tensor& n,
                          const TrainConfig& cfg) {
  std::vector<Tensor> frozen;
  for (const auto& param : model.params()) frozen.push_back(param.value.detach());
  return batch_loss(model, frozen, a, p, n, {}, cfg).item();
}

void check_divergence(double loss) {
  if (!std::isfinite(loss) || loss > kDivergenceThreshold) {
    throw DivergedError("DIVERGED: batch loss " + std::to_string(loss) + " (threshold " +
                        std::to_string(kDivergenceThreshold) + ")");
  }
}

std::string format_epsilon(double e) {
  std::ostringstream os;
  os << e;
  return os.str();
}

void check_batch(const Tensor& a, const Tensor& p, const Tensor& n) {
  if (a.shape() != p.shape() || a.shape() != n.shape()) throw ShapeError("defense step", a.shape(), p.shape());
}

}  // namespace

DefenseStep defensive_triplet_step(EmbeddingModel& model, const Tensor& anchor, const Tensor& positive,
                                   const Tensor& negative, const DefenseConfig& cfg) {
  check_batch(anchor, positive, negative);
  DefenseStep step;
  step.clean_loss = clean_triplet_loss(model, anchor, positive, negative, cfg.base);
  const std::size_t b = anchor.size(0);
  const InnerResult inner = inner_attack(model, concat_rows({anchor, positive, negative}), cfg);
  const Triplet t = split_kept(inner, b);
  step.skipped = t.skipped;
  if (!t.a.defined()) return step;
  try {
    step.loss = sgd_step(model, t.a, t.p, t.n, {}, cfg.base);
  } catch (const TrainingError& e) {
    throw DivergedError(std::string("DIVERGED: ") + e.what());
  }
  check_divergence(step.loss);
  return step;
}

DefenseStep trip_es_step(EmbeddingModel& model, const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                         const DefenseConfig& cfg) {
  check_batch(anchor, positive, negative);
  DefenseStep step;
  step.clean_loss = clean_triplet_loss(model, anchor, positive, negative, cfg.base);
  const std::size_t b = anchor.size(0);
  const InnerResult inner = inner_attack(model, concat_rows({anchor, positive, negative}), cfg);
  const Triplet adv = split_kept(inner, b);
  step.skipped = adv.skipped;
  if (!adv.a.defined()) return step;

  // Clean rows matching the kept adversarial rows.
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < b; ++i) {
    if (inner.ok[i] && inner.ok[b + i] && inner.ok[2 * b + i]) keep.push_back(i);
  }
  const Tensor ca = gather_rows(anchor.detach(), keep);
  const Tensor cp = gather_rows(positive.detach(), keep);
  const Tensor cn = gather_rows(negative.detach(), keep);
  const std::size_t k = keep.size();

  const auto views = model.grad_views();
  Tape tape;
  const Tensor clean_e = model.embed(concat_rows({ca, cp, cn}), views);
  const Tensor adv_e = model.embed(concat_rows({adv.a, adv.p, adv.n}), views);
  const Tensor trip = triplet_loss(slice_rows(clean_e, 0, k), slice_rows(clean_e, k, 2 * k),
                                   slice_rows(clean_e, 2 * k, 3 * k), cfg.base.metric, cfg.base.margin_beta);
  const Tensor shift = mean(row_distance(adv_e, clean_e, cfg.base.metric));
  const Tensor loss = add(trip, scale(shift, cfg.trip_es_weight));
  step.loss = loss.item();
  check_divergence(step.loss);
  tape.backward(loss);
  auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.mutable_data();
    const auto g = views[i].grad();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= cfg.base.lr * g[j];
  }
  return step;
}

DefenseResult harden(const Dataset& data, const DefenseConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const TrainConfig& base = cfg.base;
  DefenseResult result{EmbeddingModel::create(cfg.arch, data.images.size(1), cfg.init_seed), {}};
  result.model.metadata["defense"] = std::string(to_string(cfg.variant));
  result.model.metadata["inner_epsilon"] = format_epsilon(cfg.budget.epsilon);
  result.model.metadata["metric"] = std::string(to_string(base.metric));
  if (base.epochs == 0) return result;

  TripletSampler sampler(data.labels, base.seed);
  const std::size_t per_epoch = base.samples_per_epoch ? base.samples_per_epoch : data.size();
  const std::size_t steps = (per_epoch + base.batch - 1) / base.batch;
  for (std::size_t epoch = 0; epoch < base.epochs; ++epoch) {
    double total = 0.0, clean = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto b = sampler.next(base.batch, LossKind::triplet);
      const Tensor a = data.batch(b.anchor), p = data.batch(b.second), n = data.batch(b.third);
      const DefenseStep st = cfg.variant == DefenseVariant::shift_replace
                                 ? defensive_triplet_step(result.model, a, p, n, cfg)
                                 : trip_es_step(result.model, a, p, n, cfg);
      total += st.loss;
      clean += st.clean_loss;
      result.history.skipped += st.skipped;
      result.history.adversarial_not_easier.push_back(st.loss >= st.clean_loss);
    }
    result.history.epoch_loss.push_back(total / static_cast<double>(steps));
    result.history.epoch_clean_loss.push_back(clean / static_cast<double>(steps));
    if (on_epoch) on_epoch(epoch + 1, result.history.epoch_loss.back());
  }
  return result;
}

}  // namespace advrank
