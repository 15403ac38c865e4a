#include "doctest.h"

#include "advrank/harness.hpp"

#include <filesystem>
#include <memory>
#include <set>
#include <sstream>

using namespace advrank;

namespace {

Dataset corpus(std::size_t per_class = 25, std::size_t classes = 8) {
  SyntheticSpec s;
  s.n_classes = classes;
  s.points_per_class = per_class;
  s.dim = 12;
  s.cluster_std = 0.04;
  s.seed = 3;
  return make_synthetic(s);
}

std::shared_ptr<const EmbeddingModel> model(std::string_view arch, std::uint64_t seed) {
  return std::make_shared<const EmbeddingModel>(EmbeddingModel::create(arch, 12, seed));
}

std::string csv(const ResultTable& t) {
  std::ostringstream os;
  write_report(t, os, ReportFormat::csv);
  return os.str();
}

ExperimentPlan small_plan() {
  ExperimentPlan p;
  p.models = {{"a", model("mlp256", 1)}};
  p.attacks = {{AttackKind::ca_plus, 0, 5}, {AttackKind::qa_minus, 100, 5}};
  p.epsilon_grid = {0.0, 0.1};
  p.wm_grid = {1, 2};
  p.trials = 4;
  p.seed = 17;
  p.inner_sample = 64;
  return p;
}

}  // namespace

TEST_CASE("number formatting") {
  CHECK(format_percent(0.021) == "2.1");
  CHECK(format_percent(0.5) == "50.0");
  CHECK(format_percent(0.0) == "0.0");
  CHECK(format_grid_value(0.3) == "0.3");
  CHECK(format_grid_value(0.01) == "0.01");
  CHECK(format_grid_value(10000) == "10000");
  CHECK(default_xi(AttackKind::qa_plus) == 1.0);
  CHECK(default_xi(AttackKind::qa_minus) == 100.0);
  CHECK(default_xi(AttackKind::ca_plus) == 0.0);
}

TEST_CASE("golden CSV") {
  ResultTable t;
  t.cells[{"vanilla", AttackKind::ca_plus, 0.3, 1}] = {0.5, 0.021, std::nullopt, std::nullopt, 0.123449, 200, {}};
  t.cells[{"vanilla", AttackKind::qa_plus, 0.01, 2}] = {0.4996, 0.06349, 0.001, 0.0166, 0.5, 200, {}};
  t.cells[{"vanilla", AttackKind::max_shift, 0.3, 1}] = {0, 0, std::nullopt, std::nullopt, 1.23456, 200, {}};
  t.cells[{"defended", AttackKind::ca_minus, 0.03, 10}] = {};
  t.cells[{"defended", AttackKind::ca_minus, 0.03, 10}].error = "pool too small";
  const std::string expected =
      "model,kind,epsilon,wm,rank_before,rank_after,sp_before,sp_after,shift\n"
      "defended,CA-,0.03,10,ERR,ERR,ERR,ERR,ERR\n"
      "vanilla,CA+,0.3,1,50.0,2.1,-,-,0.1234\n"
      "vanilla,QA+,0.01,2,50.0,6.3,0.1,1.7,0.5000\n"
      "vanilla,MaxShift,0.3,1,-,-,-,-,1.2346\n";
  CHECK(csv(t) == expected);
  CHECK(t.has_errors());

  std::istringstream in(expected);
  const ResultTable back = read_report_csv(in);
  CHECK(csv(back) == expected);
  CHECK(back.at("vanilla", AttackKind::qa_plus, 0.01, 2).sp_after == doctest::Approx(0.017));
  CHECK_THROWS_AS((void)back.at("vanilla", AttackKind::qa_minus, 0.3, 1), std::out_of_range);

  std::ostringstream text;
  write_report(t, text, ReportFormat::text);
  CHECK(text.str().find("ERR defended CA- eps=0.03 wm=10: pool too small") != std::string::npos);

  std::istringstream bad("model,kind\n");
  CHECK_THROWS_AS((void)read_report_csv(bad), std::invalid_argument);
  CHECK_THROWS_AS(emit_report(t, "/nonexistent-dir/x/report.csv", ReportFormat::csv), std::runtime_error);
}

TEST_CASE("trial plans depend only on their key") {
  const Dataset d = corpus();
  const auto m = model("mlp256", 1);
  const RankingIndex index = build_index(*m, d);
  CHECK(trial_seed(1, AttackKind::ca_plus, 1, 0) != trial_seed(1, AttackKind::ca_plus, 1, 1));
  CHECK(trial_seed(1, AttackKind::ca_plus, 1, 0) != trial_seed(1, AttackKind::ca_minus, 1, 0));
  CHECK(trial_seed(1, AttackKind::ca_plus, 1, 0) != trial_seed(1, AttackKind::ca_plus, 2, 0));
  CHECK(trial_seed(1, AttackKind::ca_plus, 1, 0) != trial_seed(2, AttackKind::ca_plus, 1, 0));
  const TrialPlan a = plan_trial(index, AttackKind::qa_plus, 5, 9, 3);
  const TrialPlan b = plan_trial(index, AttackKind::qa_plus, 5, 9, 3);
  CHECK(a.item == b.item);
  CHECK(a.counterparts == b.counterparts);
  CHECK(a.counterparts.size() == 5);
  const AttackSpec s = make_spec({AttackKind::qa_plus, 1.0, 5}, a, 64);
  CHECK(s.candidates == a.counterparts);
  CHECK(s.queries.empty());
  CHECK(s.seed == a.seed);
}

TEST_CASE("sweep is deterministic across runs and worker counts") {
  const Dataset d = corpus();
  ExperimentPlan p = small_plan();
  const std::string first = csv(run_attack_sweep(p, d));
  CHECK(first == csv(run_attack_sweep(p, d)));
  p.jobs = 3;
  CHECK(first == csv(run_attack_sweep(p, d)));
}

TEST_CASE("cells do not depend on the rest of the grid") {
  const Dataset d = corpus();
  ExperimentPlan full = small_plan();
  const ResultTable all = run_attack_sweep(full, d);
  ExperimentPlan one = small_plan();
  one.attacks = {{AttackKind::qa_minus, 100, 5}};
  one.epsilon_grid = {0.1};
  one.wm_grid = {2};
  const ResultTable single = run_attack_sweep(one, d);
  const auto& x = all.at("a", AttackKind::qa_minus, 0.1, 2);
  const auto& y = single.at("a", AttackKind::qa_minus, 0.1, 2);
  CHECK(x.rank_after == y.rank_after);
  CHECK(x.sp_after == y.sp_after);
  CHECK(x.shift == y.shift);
}

TEST_CASE("zero budget cells are unchanged") {
  const Dataset d = corpus();
  const ResultTable t = run_attack_sweep(small_plan(), d);
  for (const auto& [key, cell] : t.cells) {
    REQUIRE(cell.ok());
    CHECK(cell.trials == 4);
    if (key.epsilon == 0.0) {
      CHECK(cell.rank_after == cell.rank_before);
      CHECK(cell.shift == 0.0);
    }
  }
}

TEST_CASE("a failing cell becomes an error cell") {
  const Dataset d = corpus();
  ExperimentPlan p = small_plan();
  p.attacks = {{AttackKind::ca_minus, 0, 5}, {AttackKind::ca_plus, 0, 5}};
  // The top-1% pool of a 200-item corpus cannot supply 50 queries.
  p.wm_grid = {50};
  p.epsilon_grid = {0.1};
  const ResultTable t = run_attack_sweep(p, d);
  CHECK(t.has_errors());
  CHECK_FALSE(t.at("a", AttackKind::ca_minus, 0.1, 50).ok());
  CHECK(t.at("a", AttackKind::ca_plus, 0.1, 50).ok());
  CHECK(csv(t).find("a,CA-,0.1,50,ERR,ERR,ERR,ERR,ERR\n") != std::string::npos);
}

TEST_CASE("plan validation") {
  ExperimentPlan p = small_plan();
  p.models[0].name = "a,b";
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = small_plan();
  p.trials = 0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = small_plan();
  p.epsilon_grid = {1.5};
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("transfer diagonal matches the sweep") {
  const Dataset d = corpus();
  const std::vector<ModelRef> models{{"wide", model("mlp256", 1)}, {"deep", model("mlp128x64", 2)}};
  const AttackTemplate ca{AttackKind::ca_plus, 0, 5};
  const TransferMatrix m = run_transfer(models, d, ca, 0.1, 1, 5, 21, 64);
  REQUIRE(m.cells.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const RankingIndex index = build_index(*models[i].model, d);
    const CellResult own = run_cell(*models[i].model, index, d, ca, 0.1, 1, 5, 21, 64);
    CHECK(m.cells[i][i].rank_after == own.rank_after);
    CHECK(m.cells[i][i].rank_before == own.rank_before);
  }
  std::ostringstream os;
  write_transfer_csv(m, AttackKind::ca_plus, 0.1, 1, os);
  CHECK(os.str().rfind("source,target,kind,epsilon,wm,rank_before,rank_after,shift\nwide,wide,CA+,0.1,1,", 0) == 0);
  CHECK_THROWS_AS((void)run_transfer({models[0]}, d, ca, 0.1, 1, 5, 21), std::invalid_argument);
}

TEST_CASE("universal seen and unseen sets are disjoint") {
  const Dataset d = corpus(125, 8);
  const auto m = model("mlp256", 1);
  const RankingIndex index = build_index(*m, d);
  for (AttackKind kind : {AttackKind::ica_plus, AttackKind::ica_minus}) {
    CAPTURE(to_string(kind));
    UniversalPlan plan;
    plan.kind = kind;
    plan.epsilon = 0.1;
    plan.trials = 2;
    plan.train_frac = 0.04;
    plan.inner_sample = 64;
    plan.iteration_factor = 1;
    const UniversalReport r = run_universal(*m, index, d, plan);
    REQUIRE(r.perturbations.size() == 2);
    for (std::size_t t = 0; t < 2; ++t) {
      CHECK(r.seen_items[t].size() == 40);
      std::set<std::size_t> seen(r.seen_items[t].begin(), r.seen_items[t].end());
      for (std::size_t u : r.unseen_items[t]) CHECK(seen.count(u) == 0);
      for (float v : r.perturbations[t].data()) CHECK(std::abs(v) <= 0.1f);
    }
    CHECK(r.seen.trials == 80);
    CHECK(r.unseen.trials == 80);
  }
  UniversalPlan tiny;
  tiny.train_frac = 0.01;
  CHECK_THROWS_AS((void)run_universal(*m, index, d, tiny), std::invalid_argument);
}

TEST_CASE("xi search rows") {
  const Dataset d = corpus();
  const auto m = model("mlp256", 1);
  const auto rows = run_xi_search(*m, d, {0, 1, 100}, {AttackKind::qa_plus}, 0.1, 1, 3, 5, 64);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.cell.ok());
    CHECK(r.cell.sp_after.has_value());
  }
  CHECK(rows[0].cell.rank_before == rows[2].cell.rank_before);
  CHECK_THROWS_AS((void)run_xi_search(*m, d, {1, 0}, {AttackKind::qa_plus}, 0.1, 1, 3, 5), std::invalid_argument);
  CHECK_THROWS_AS((void)run_xi_search(*m, d, {0, 1}, {AttackKind::ca_plus}, 0.1, 1, 3, 5), std::invalid_argument);
  std::ostringstream os;
  write_xi_csv(rows, os);
  CHECK(os.str().rfind("xi,kind,wm,rank_before,rank_after,sp_before,sp_after\n0,QA+,1,", 0) == 0);
}

TEST_CASE("parallel_for covers every index and rethrows") {
  std::vector<int> hits(50, 0);
  parallel_for(50, 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::count(hits.begin(), hits.end(), 1) == 50);
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 7) throw std::runtime_error("boom");
                               }),
                  std::runtime_error);
}
