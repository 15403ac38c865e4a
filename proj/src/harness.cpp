#include "advrank/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

namespace advrank {

double default_xi(AttackKind kind) {
  if (kind == AttackKind::qa_plus) return 1.0;
  if (kind == AttackKind::qa_minus) return 100.0;
  return 0.0;
}

void ExperimentPlan::validate() const {
  if (models.empty()) throw std::invalid_argument("plan: no models");
  if (attacks.empty()) throw std::invalid_argument("plan: no attacks");
  if (epsilon_grid.empty() || wm_grid.empty()) throw std::invalid_argument("plan: empty grid");
  if (trials == 0) throw std::invalid_argument("plan: trials must be positive");
  for (const auto& m : models) {
    if (!m.model) throw std::invalid_argument("plan: model '" + m.name + "' is not loaded");
    if (m.name.find(',') != std::string::npos) throw std::invalid_argument("plan: model names cannot contain ','");
  }
  for (std::size_t wm : wm_grid) {
    if (wm == 0) throw std::invalid_argument("plan: w/m must be positive");
  }
  for (double e : epsilon_grid) {
    if (!(e >= 0.0 && e <= 1.0)) throw std::invalid_argument("plan: epsilon outside [0, 1]");
  }
}

bool ResultTable::has_errors() const {
  return std::any_of(cells.begin(), cells.end(), [](const auto& kv) { return !kv.second.ok(); });
}

const CellResult& ResultTable::at(const std::string& model, AttackKind kind, double epsilon, std::size_t wm) const {
  const auto it = cells.find({model, kind, epsilon, wm});
  if (it == cells.end()) {
    throw std::out_of_range("no cell for " + model + " " + std::string(to_string(kind)) + " eps=" +
                            format_grid_value(epsilon) + " wm=" + std::to_string(wm));
  }
  return it->second;
}

// ---------------------------------------------------------------------------
// Trials

std::uint64_t trial_seed(std::uint64_t seed, AttackKind kind, std::size_t wm, std::size_t trial) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  mix(seed);
  mix(static_cast<std::uint64_t>(kind));
  mix(wm);
  mix(trial);
  return h;
}

TrialPlan plan_trial(const RankingIndex& index, AttackKind kind, std::size_t wm, std::uint64_t seed,
                     std::size_t trial) {
  TrialPlan p;
  p.seed = trial_seed(seed, kind, wm, trial);
  std::mt19937_64 rng(p.seed);
  std::uniform_int_distribution<std::size_t> pick(0, index.size() - 1);
  p.item = pick(rng);
  p.counterparts = sample_attack_targets(index, per_image_kind(kind), p.item, wm, rng);
  return p;
}

AttackSpec make_spec(const AttackTemplate& tmpl, const TrialPlan& trial, std::size_t inner_sample) {
  AttackSpec s;
  s.kind = tmpl.kind;
  s.xi = tmpl.xi;
  s.g = tmpl.g;
  s.inner_sample = inner_sample;
  s.seed = trial.seed;
  const AttackKind base = per_image_kind(tmpl.kind);
  if (perturbs_candidate(base)) s.queries = trial.counterparts;
  if (perturbs_query(base)) s.candidates = trial.counterparts;
  return s;
}

namespace {

struct Accumulator {
  double before = 0.0, after = 0.0, sp_before = 0.0, sp_after = 0.0, shift = 0.0;
  std::size_t n = 0;
  bool has_sp = true;

  void add(const RankReport& b, const RankReport& a, const std::optional<RankReport>& sb,
           const std::optional<RankReport>& sa, double s) {
    before += b.mean_rank;
    after += a.mean_rank;
    shift += s;
    if (sb && sa) {
      sp_before += sb->mean_rank;
      sp_after += sa->mean_rank;
    } else {
      has_sp = false;
    }
    ++n;
  }

  CellResult result() const {
    CellResult r;
    r.trials = n;
    if (n == 0) return r;
    const double k = static_cast<double>(n);
    r.rank_before = before / k;
    r.rank_after = after / k;
    r.shift = shift / k;
    if (has_sp) {
      r.sp_before = sp_before / k;
      r.sp_after = sp_after / k;
    }
    return r;
  }
};

CellResult error_cell(const std::string& what) {
  CellResult r;
  r.error = what;
  return r;
}

}  // namespace

CellResult run_cell(const EmbeddingModel& model, const RankingIndex& index, const Dataset& corpus,
                    const AttackTemplate& tmpl, double epsilon, std::size_t wm, std::size_t trials,
                    std::uint64_t seed, std::size_t inner_sample) {
  try {
    if (is_universal(tmpl.kind)) throw std::invalid_argument("universal kinds run through run_universal");
    const PerturbationBudget budget = PerturbationBudget::from_epsilon(epsilon);
    Accumulator acc;
    for (std::size_t t = 0; t < trials; ++t) {
      const TrialPlan plan = plan_trial(index, tmpl.kind, wm, seed, t);
      const AttackSpec spec = make_spec(tmpl, plan, inner_sample);
      const AttackOutcome out = run_attack(model, index, spec, budget, corpus_target(corpus.images, plan.item));
      acc.add(out.rank_before, out.rank_after, out.sp_rank_before, out.sp_rank_after, out.embedding_shift);
    }
    return acc.result();
  } catch (const std::exception& e) {
    return error_cell(e.what());
  }
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(std::max<std::size_t>(jobs, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

ResultTable run_attack_sweep(const ExperimentPlan& plan, const Dataset& corpus) {
  plan.validate();
  std::vector<RankingIndex> indexes;
  for (const auto& m : plan.models) indexes.push_back(build_index(*m.model, corpus));

  struct Job {
    std::size_t model;
    AttackTemplate attack;
    double epsilon;
    std::size_t wm;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < plan.models.size(); ++m) {
    for (const auto& a : plan.attacks) {
      for (double e : plan.epsilon_grid) {
        for (std::size_t wm : plan.wm_grid) jobs.push_back({m, a, e, wm});
      }
    }
  }
  std::vector<CellResult> results(jobs.size());
  parallel_for(jobs.size(), plan.jobs, [&](std::size_t i) {
    const Job& j = jobs[i];
    results[i] = run_cell(*plan.models[j.model].model, indexes[j.model], corpus, j.attack, j.epsilon, j.wm,
                          plan.trials, plan.seed, plan.inner_sample);
  });

  ResultTable table;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Job& j = jobs[i];
    table.cells[{plan.models[j.model].name, j.attack.kind, j.epsilon, j.wm}] = std::move(results[i]);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Transfer

TransferMatrix run_transfer(const std::vector<ModelRef>& models, const Dataset& corpus, const AttackTemplate& attack,
                            double epsilon, std::size_t wm, std::size_t trials, std::uint64_t seed,
                            std::size_t inner_sample, std::size_t jobs) {
  if (models.size() < 2) throw std::invalid_argument("transfer: need at least two models");
  for (const auto& m : models) {
    if (!m.model) throw std::invalid_argument("transfer: model '" + m.name + "' is not loaded");
    if (m.model->input_dim() != models.front().model->input_dim()) {
      throw ShapeError("transfer: models '" + models.front().name + "' and '" + m.name +
                       "' take different input sizes");
    }
  }
  if (corpus.images.size(1) != models.front().model->input_dim()) {
    throw ShapeError("transfer: corpus images do not match the model input size");
  }
  const std::size_t n = models.size();
  std::vector<RankingIndex> indexes;
  for (const auto& m : models) indexes.push_back(build_index(*m.model, corpus));

  TransferMatrix out;
  for (const auto& m : models) out.models.push_back(m.name);
  out.cells.assign(n, std::vector<CellResult>(n));
  const PerturbationBudget budget = PerturbationBudget::from_epsilon(epsilon);

  parallel_for(n, jobs, [&](std::size_t i) {
    std::vector<Accumulator> acc(n);
    try {
      for (std::size_t t = 0; t < trials; ++t) {
        const TrialPlan plan = plan_trial(indexes[i], attack.kind, wm, seed, t);
        const AttackSpec spec = make_spec(attack, plan, inner_sample);
        const Target target = corpus_target(corpus.images, plan.item);
        const AttackOutcome own = run_attack(*models[i].model, indexes[i], spec, budget, target);
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) {
            acc[j].add(own.rank_before, own.rank_after, own.sp_rank_before, own.sp_rank_after, own.embedding_shift);
            continue;
          }
          const RankMeasurement m = measure_ranks(*models[j].model, indexes[j], spec, target, own.adversarial_image);
          acc[j].add(m.before, m.after, m.sp_before, m.sp_after, m.embedding_shift);
        }
      }
      for (std::size_t j = 0; j < n; ++j) out.cells[i][j] = acc[j].result();
    } catch (const std::exception& e) {
      for (std::size_t j = 0; j < n; ++j) out.cells[i][j] = error_cell(e.what());
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Universal

namespace {

// Items x whose own ranking list places `item` within the top `fraction`.
std::vector<std::size_t> reverse_top_pool(const RankingIndex& index, std::size_t item, double fraction) {
  std::vector<std::size_t> pool;
  const auto target = index.embedding(item);
  for (std::size_t x = 0; x < index.size(); ++x) {
    if (x == item) continue;
    const std::size_t self[] = {x};
    const auto q = index.embedding(x);
    const auto sorted = index.sorted_distances(q, self);
    if (normalized_rank(count_closer(sorted, distance(q, target, index.metric())), index.size()) <= fraction) {
      pool.push_back(x);
    }
  }
  return pool;
}

}  // namespace

UniversalReport run_universal(const EmbeddingModel& model, const RankingIndex& index, const Dataset& corpus,
                              const UniversalPlan& plan) {
  if (!is_universal(plan.kind)) throw std::invalid_argument("run_universal: kind must be I-CA+/-, I-QA+/-");
  if (plan.trials == 0) throw std::invalid_argument("run_universal: trials must be positive");
  const std::size_t k = static_cast<std::size_t>(std::ceil(plan.train_frac * static_cast<double>(index.size())));
  if (k < 32) {
    throw std::invalid_argument("run_universal: train_frac * |X| = " + std::to_string(k) + " is below 32");
  }
  const AttackKind base = per_image_kind(plan.kind);
  const PerturbationBudget budget = PerturbationBudget::from_epsilon(plan.epsilon);

  UniversalReport report;
  Accumulator seen, unseen;
  for (std::size_t t = 0; t < plan.trials; ++t) {
    const std::uint64_t s = trial_seed(plan.seed, plan.kind, 1, t);
    std::mt19937_64 rng(s);
    std::uniform_int_distribution<std::size_t> pick(0, index.size() - 1);
    const std::size_t counterpart = pick(rng);

    std::vector<std::size_t> pool;
    if (raises_rank(base)) {
      for (std::size_t j = 0; j < index.size(); ++j) {
        if (j != counterpart) pool.push_back(j);
      }
    } else if (perturbs_candidate(base)) {
      pool = top_ranked_pool(index, counterpart, plan.minus_pool_fraction);
    } else {
      pool = reverse_top_pool(index, counterpart, plan.minus_pool_fraction);
    }
    if (pool.size() < 2 * k) {
      throw std::invalid_argument("run_universal: target pool of " + std::to_string(pool.size()) +
                                  " items cannot supply two disjoint sets of " + std::to_string(k));
    }
    auto drawn = sample_distinct(pool, 2 * k, rng);
    std::vector<std::size_t> seen_items(drawn.begin(), drawn.begin() + static_cast<std::ptrdiff_t>(k));
    std::vector<std::size_t> unseen_items(drawn.begin() + static_cast<std::ptrdiff_t>(k), drawn.end());
    std::sort(seen_items.begin(), seen_items.end());
    std::sort(unseen_items.begin(), unseen_items.end());
    std::vector<std::size_t> both;
    std::set_intersection(seen_items.begin(), seen_items.end(), unseen_items.begin(), unseen_items.end(),
                          std::back_inserter(both));
    if (!both.empty()) throw std::logic_error("run_universal: seen and unseen sets overlap");

    UniversalSpec spec;
    spec.kind = plan.kind;
    spec.counterparts = {counterpart};
    spec.targets = seen_items;
    spec.inner_sample = plan.inner_sample;
    spec.minibatch = plan.minibatch;
    spec.iteration_factor = plan.iteration_factor;
    spec.seed = s;
    const UniversalResult u = craft_universal(model, index, corpus.images, spec, budget);

    AttackSpec eval;
    eval.kind = base;
    eval.g = 0;
    if (perturbs_candidate(base)) eval.queries = {counterpart};
    else eval.candidates = {counterpart};
    auto score = [&](const std::vector<std::size_t>& items, Accumulator& acc) {
      for (std::size_t item : items) {
        const Target target = corpus_target(corpus.images, item);
        const RankMeasurement m =
            measure_ranks(model, index, eval, target, apply_perturbation(target.image, u.perturbation));
        acc.add(m.before, m.after, m.sp_before, m.sp_after, m.embedding_shift);
      }
    };
    score(seen_items, seen);
    score(unseen_items, unseen);
    report.perturbations.push_back(u.perturbation);
    report.seen_items.push_back(std::move(seen_items));
    report.unseen_items.push_back(std::move(unseen_items));
  }
  report.seen = seen.result();
  report.unseen = unseen.result();
  return report;
}

// ---------------------------------------------------------------------------
// xi search

std::vector<XiRow> run_xi_search(const EmbeddingModel& model, const Dataset& corpus, const std::vector<double>& xi_grid,
                                 const std::vector<AttackKind>& kinds, double epsilon, std::size_t wm,
                                 std::size_t trials, std::uint64_t seed, std::size_t inner_sample, std::size_t jobs) {
  if (xi_grid.empty()) throw std::invalid_argument("xi search: empty grid");
  if (!std::is_sorted(xi_grid.begin(), xi_grid.end())) throw std::invalid_argument("xi search: grid must be ascending");
  for (AttackKind k : kinds) {
    if (k != AttackKind::qa_plus && k != AttackKind::qa_minus) {
      throw std::invalid_argument("xi search: kinds must be QA+ or QA-");
    }
  }
  const RankingIndex index = build_index(model, corpus);
  std::vector<XiRow> rows;
  for (AttackKind k : kinds) {
    for (double xi : xi_grid) rows.push_back({xi, k, wm, {}});
  }
  parallel_for(rows.size(), jobs, [&](std::size_t i) {
    rows[i].cell = run_cell(model, index, corpus, {rows[i].kind, rows[i].xi, 5}, epsilon, wm, trials, seed,
                            inner_sample);
  });
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "text") return ReportFormat::text;
  throw std::invalid_argument("unknown report format '" + std::string(name) + "' (expected csv or text)");
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", fraction * 100.0);
  return buf;
}

std::string format_grid_value(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

std::string format_shift(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string opt_percent(const std::optional<double>& v) { return v ? format_percent(*v) : "-"; }

struct Fields {
  std::string before, after, sp_before, sp_after, shift;
};

Fields fields_of(AttackKind kind, const CellResult& c) {
  if (!c.ok()) return {"ERR", "ERR", "ERR", "ERR", "ERR"};
  Fields f;
  const bool ranked = kind != AttackKind::max_shift;
  f.before = ranked ? format_percent(c.rank_before) : "-";
  f.after = ranked ? format_percent(c.rank_after) : "-";
  f.sp_before = opt_percent(c.sp_before);
  f.sp_after = opt_percent(c.sp_after);
  f.shift = format_shift(c.shift);
  return f;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const char* what) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw std::invalid_argument(std::string("report: bad ") + what + " '" + s + "'");
  }
  return v;
}

}  // namespace

void write_report(const ResultTable& table, std::ostream& out, ReportFormat format) {
  if (format == ReportFormat::csv) {
    out << kCsvHeader << '\n';
    for (const auto& [key, cell] : table.cells) {
      const Fields f = fields_of(key.kind, cell);
      out << key.model << ',' << to_string(key.kind) << ',' << format_grid_value(key.epsilon) << ',' << key.wm << ','
          << f.before << ',' << f.after << ',' << f.sp_before << ',' << f.sp_after << ',' << f.shift << '\n';
    }
    return;
  }
  std::size_t width = 5;
  for (const auto& kv : table.cells) width = std::max(width, kv.first.model.size());
  out << std::left << std::setw(static_cast<int>(width)) << "model" << "  " << std::setw(12) << "attack"
      << std::setw(7) << "eps" << std::setw(5) << "w/m" << std::setw(16) << "rank (%)" << std::setw(16)
      << "SP rank (%)" << "shift\n";
  for (const auto& [key, cell] : table.cells) {
    const Fields f = fields_of(key.kind, cell);
    const std::string rank = cell.ok() ? f.before + " -> " + f.after : "ERR";
    const std::string sp = cell.ok() && cell.sp_before ? f.sp_before + " -> " + f.sp_after : "";
    out << std::left << std::setw(static_cast<int>(width)) << key.model << "  " << std::setw(12)
        << to_string(key.kind) << std::setw(7) << format_grid_value(key.epsilon) << std::setw(5) << key.wm
        << std::setw(16) << rank << std::setw(16) << sp << f.shift << '\n';
  }
  for (const auto& [key, cell] : table.cells) {
    if (!cell.ok()) {
      out << "ERR " << key.model << ' ' << to_string(key.kind) << " eps=" << format_grid_value(key.epsilon)
          << " wm=" << key.wm << ": " << *cell.error << '\n';
    }
  }
}

void emit_report(const ResultTable& table, const std::filesystem::path& path, ReportFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  write_report(table, out, format);
  out.flush();
  if (!out) throw std::runtime_error("failed writing report " + path.string());
}

ResultTable read_report_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || split_csv(line) != split_csv(kCsvHeader)) {
    throw std::invalid_argument("report: missing or unexpected CSV header");
  }
  ResultTable table;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != 9) throw std::invalid_argument("report: expected 9 fields in '" + line + "'");
    CellKey key{f[0], parse_attack_kind(f[1]), parse_double(f[2], "epsilon"),
                static_cast<std::size_t>(parse_double(f[3], "wm"))};
    CellResult c;
    if (f[4] == "ERR") {
      c.error = "ERR";
    } else {
      auto pct = [&](const std::string& s) -> std::optional<double> {
        if (s == "-") return std::nullopt;
        return parse_double(s, "percentage") / 100.0;
      };
      c.rank_before = pct(f[4]).value_or(0.0);
      c.rank_after = pct(f[5]).value_or(0.0);
      c.sp_before = pct(f[6]);
      c.sp_after = pct(f[7]);
      c.shift = parse_double(f[8], "shift");
    }
    table.cells[key] = c;
  }
  return table;
}

void write_transfer_csv(const TransferMatrix& m, AttackKind kind, double epsilon, std::size_t wm, std::ostream& out) {
  out << "source,target,kind,epsilon,wm,rank_before,rank_after,shift\n";
  for (std::size_t i = 0; i < m.models.size(); ++i) {
    for (std::size_t j = 0; j < m.models.size(); ++j) {
      const Fields f = fields_of(kind, m.cells[i][j]);
      out << m.models[i] << ',' << m.models[j] << ',' << to_string(kind) << ',' << format_grid_value(epsilon) << ','
          << wm << ',' << f.before << ',' << f.after << ',' << f.shift << '\n';
    }
  }
}

void write_xi_csv(const std::vector<XiRow>& rows, std::ostream& out) {
  out << "xi,kind,wm,rank_before,rank_after,sp_before,sp_after\n";
  for (const auto& r : rows) {
    const Fields f = fields_of(r.kind, r.cell);
    out << format_grid_value(r.xi) << ',' << to_string(r.kind) << ',' << r.wm << ',' << f.before << ',' << f.after
        << ',' << f.sp_before << ',' << f.sp_after << '\n';
  }
}

void write_universal_csv(const UniversalReport& r, AttackKind kind, double epsilon, std::ostream& out) {
  out << "kind,epsilon,set,rank_before,rank_after\n";
  const Fields seen = fields_of(kind, r.seen);
  const Fields unseen = fields_of(kind, r.unseen);
  out << to_string(kind) << ',' << format_grid_value(epsilon) << ",seen," << seen.before << ',' << seen.after << '\n';
  out << to_string(kind) << ',' << format_grid_value(epsilon) << ",unseen," << unseen.before << ',' << unseen.after
      << '\n';
}

}  // namespace advrank
