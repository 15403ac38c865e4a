#pragma once

#include "advrank/attack.hpp"
#include "advrank/data.hpp"
#include "advrank/model.hpp"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace advrank {

struct ModelRef {
  std::string name;
  std::shared_ptr<const EmbeddingModel> model;
};

struct AttackTemplate {
  AttackKind kind = AttackKind::ca_plus;
  double xi = 0.0;
  std::size_t g = 5;
};

/// The conventional SP weight for a kind: 1 for QA+, 100 for QA-, 0 otherwise.
double default_xi(AttackKind kind);

struct ExperimentPlan {
  std::vector<ModelRef> models;
  std::vector<AttackTemplate> attacks;
  std::vector<double> epsilon_grid{0.0, 0.01, 0.03, 0.1, 0.3};
  std::vector<std::size_t> wm_grid{1, 2, 5, 10};
  std::size_t trials = 200;
  std::uint64_t seed = 0;
  std::size_t inner_sample = 256;
  /// Worker threads; cells are distributed across them.
  std::size_t jobs = 1;

  void validate() const;
};

struct CellKey {
  std::string model;
  AttackKind kind = AttackKind::ca_plus;
  double epsilon = 0.0;
  std::size_t wm = 1;

  auto operator<=>(const CellKey&) const = default;
};

struct CellResult {
  double rank_before = 0.0;
  double rank_after = 0.0;
  std::optional<double> sp_before;
  std::optional<double> sp_after;
  double shift = 0.0;
  std::size_t trials = 0;
  /// Set when the cell failed; the numbers are then meaningless.
  std::optional<std::string> error;

  bool ok() const { return !error.has_value(); }
};

struct ResultTable {
  std::map<CellKey, CellResult> cells;

  bool has_errors() const;
  const CellResult& at(const std::string& model, AttackKind kind, double epsilon, std::size_t wm) const;
};

/// One attack of a cell: the attacked corpus item, its counterparts, and the
/// seed of its inner sample. Depends only on (seed, kind, wm, trial) and the
/// index it samples counterparts from.
struct TrialPlan {
  std::size_t item = 0;
  std::vector<std::size_t> counterparts;
  std::uint64_t seed = 0;
};

std::uint64_t trial_seed(std::uint64_t seed, AttackKind kind, std::size_t wm, std::size_t trial);
TrialPlan plan_trial(const RankingIndex& index, AttackKind kind, std::size_t wm, std::uint64_t seed,
                     std::size_t trial);
AttackSpec make_spec(const AttackTemplate& tmpl, const TrialPlan& trial, std::size_t inner_sample);

/// Runs T trials of one cell. Failures are returned as an error cell.
CellResult run_cell(const EmbeddingModel& model, const RankingIndex& index, const Dataset& corpus,
                    const AttackTemplate& tmpl, double epsilon, std::size_t wm, std::size_t trials,
                    std::uint64_t seed, std::size_t inner_sample);

/// Every (model, attack, epsilon, w/m) cell, each with `trials` attacks.
ResultTable run_attack_sweep(const ExperimentPlan& plan, const Dataset& corpus);

struct TransferMatrix {
  std::vector<std::string> models;
  /// cells[i][j]: crafted on model i, ranked by model j.
  std::vector<std::vector<CellResult>> cells;
};

TransferMatrix run_transfer(const std::vector<ModelRef>& models, const Dataset& corpus, const AttackTemplate& attack,
                            double epsilon, std::size_t wm, std::size_t trials, std::uint64_t seed,
                            std::size_t inner_sample = 256, std::size_t jobs = 1);

struct UniversalPlan {
  AttackKind kind = AttackKind::ica_plus;
  double epsilon = 0.3;
  /// Fraction of X in the seen set, and again in the disjoint unseen set.
  double train_frac = 0.05;
  /// Independent perturbations, each with a fresh counterpart.
  std::size_t trials = 5;
  std::uint64_t seed = 0;
  std::size_t inner_sample = 256;
  std::size_t minibatch = 32;
  std::size_t iteration_factor = 5;
  /// "-" kinds draw targets from this top fraction of the counterpart's list.
  double minus_pool_fraction = 0.10;
};

struct UniversalReport {
  CellResult seen;
  CellResult unseen;
  std::vector<Tensor> perturbations;
  std::vector<std::vector<std::size_t>> seen_items;
  std::vector<std::vector<std::size_t>> unseen_items;
};

UniversalReport run_universal(const EmbeddingModel& model, const RankingIndex& index, const Dataset& corpus,
                              const UniversalPlan& plan);

struct XiRow {
  double xi = 0.0;
  AttackKind kind = AttackKind::qa_plus;
  std::size_t wm = 1;
  CellResult cell;
};

/// QA cells with the SP weight set to each grid value (ascending).
std::vector<XiRow> run_xi_search(const EmbeddingModel& model, const Dataset& corpus, const std::vector<double>& xi_grid,
                                 const std::vector<AttackKind>& kinds, double epsilon, std::size_t wm,
                                 std::size_t trials, std::uint64_t seed, std::size_t inner_sample = 256,
                                 std::size_t jobs = 1);

enum class ReportFormat { csv, text };
ReportFormat parse_report_format(std::string_view name);

inline constexpr const char* kCsvHeader = "model,kind,epsilon,wm,rank_before,rank_after,sp_before,sp_after,shift";

void write_report(const ResultTable& table, std::ostream& out, ReportFormat format);
/// Writes to `path`; throws std::runtime_error when the file cannot be written.
void emit_report(const ResultTable& table, const std::filesystem::path& path, ReportFormat format);
/// Parses CSV written by write_report. Values are read back at their printed precision.
ResultTable read_report_csv(std::istream& in);

void write_transfer_csv(const TransferMatrix& m, AttackKind kind, double epsilon, std::size_t wm, std::ostream& out);
void write_xi_csv(const std::vector<XiRow>& rows, std::ostream& out);
void write_universal_csv(const UniversalReport& r, AttackKind kind, double epsilon, std::ostream& out);

/// Percent with one decimal ("44.6"), as used in every table.
std::string format_percent(double fraction);
/// Shortest round-trip form of a grid value ("0.3", "0.01").
std::string format_grid_value(double v);

/// Runs fn(0..n-1) on up to `jobs` threads. Exceptions escape after all workers join.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace advrank
