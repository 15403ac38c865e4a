#include "advrank/attack.hpp"
#include "advrank/data.hpp"
#include "advrank/defense.hpp"
#include "advrank/harness.hpp"
#include "advrank/model.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

using namespace advrank;

namespace {

struct Common {
  std::string data_dir = "data/mnist";
  std::uint64_t seed = 0;
  std::size_t corpus_size = 2000;
  std::size_t train_size = 0;
  std::size_t trials = 200;
  std::size_t jobs = 1;
  std::size_t inner_sample = 256;
  std::string out;
};

Dataset load_corpus(const Common& c) {
  Dataset d = load_mnist_split(c.data_dir, Split::test);
  return c.corpus_size ? d.head(c.corpus_size) : d;
}

Dataset load_training(const Common& c) {
  Dataset d = load_mnist_split(c.data_dir, Split::train);
  return c.train_size ? d.head(c.train_size) : d;
}

// "name=path" or "path" (named after the file stem).
ModelRef load_ref(const std::string& spec) {
  const auto eq = spec.find('=');
  const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
  const std::string name = eq == std::string::npos ? std::filesystem::path(path).stem().string() : spec.substr(0, eq);
  return {name, std::make_shared<const EmbeddingModel>(load_model(path))};
}

std::vector<ModelRef> load_refs(const std::vector<std::string>& specs) {
  std::vector<ModelRef> out;
  for (const auto& s : specs) out.push_back(load_ref(s));
  return out;
}

// Writes to --out when given, stdout otherwise.
template <class Fn>
void with_output(const Common& c, Fn&& fn) {
  if (c.out.empty()) {
    fn(std::cout);
    return;
  }
  std::ofstream f(c.out, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + c.out);
  fn(f);
  if (!f) throw std::runtime_error("failed writing " + c.out);
}

std::vector<AttackKind> kinds_of(const std::string& list) {
  auto kinds = parse_attack_kinds(list);
  if (kinds.empty()) throw std::invalid_argument("no attack kinds given");
  return kinds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial ranking attacks and defenses on embedding models"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Key-value config file (TOML or INI); command-line flags override it");

  Common c;
  app.add_option("--data-dir", c.data_dir, "Directory holding the MNIST IDX files")->capture_default_str();
  app.add_option("--seed", c.seed, "Seed for sampling and initialization")->capture_default_str();
  app.add_option("--corpus-size", c.corpus_size, "Test items used as the ranking corpus (0 = all)")
      ->capture_default_str();
  app.add_option("--train-size", c.train_size, "Training items used (0 = all)")->capture_default_str();
  app.add_option("--trials", c.trials, "Attacks per cell")->capture_default_str();
  app.add_option("--jobs", c.jobs, "Worker threads")->capture_default_str();
  app.add_option("--inner-sample", c.inner_sample, "Corpus items inside the hinge sums (0 = all)")
      ->capture_default_str();
  app.add_option("--out", c.out, "Output path (checkpoint or CSV; CSV goes to stdout when omitted)");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a vanilla ranking model");
  std::string arch = "mlp256", loss = "triplet", metric = "cosine";
  float margin = -1.0f, lr = 0.05f;
  std::size_t batch = 32, epochs = 15;
  std::uint64_t init_seed = 7;
  train_cmd->add_option("--arch", arch, "mlp256 or mlp128x64")->capture_default_str();
  train_cmd->add_option("--loss", loss, "triplet or contrastive")->capture_default_str();
  train_cmd->add_option("--metric", metric, "cosine or euclidean")->capture_default_str();
  train_cmd->add_option("--margin", margin, "Loss margin (default: 0.2 cosine / 1.0 Euclidean triplet, 1.0 contrastive)");
  train_cmd->add_option("--lr", lr, "SGD learning rate")->capture_default_str();
  train_cmd->add_option("--batch", batch, "Batch size")->capture_default_str();
  train_cmd->add_option("--epochs", epochs, "Epochs")->capture_default_str();
  train_cmd->add_option("--init-seed", init_seed, "Parameter initialization seed")->capture_default_str();

  // defend
  auto* defend_cmd = app.add_subcommand("defend", "Adversarially train a model against max-shift examples");
  std::string variant = "shift-replace";
  double inner_eps = 0.3;
  float es_weight = 1.0f;
  defend_cmd->add_option("--arch", arch, "mlp256 or mlp128x64")->capture_default_str();
  defend_cmd->add_option("--metric", metric, "cosine or euclidean")->capture_default_str();
  defend_cmd->add_option("--variant", variant, "shift-replace or trip-es")->capture_default_str();
  defend_cmd->add_option("--epsilon", inner_eps, "Inner max-shift budget")->capture_default_str();
  defend_cmd->add_option("--trip-es-weight", es_weight, "Shift term weight (trip-es)")->capture_default_str();
  defend_cmd->add_option("--margin", margin, "Triplet margin (default by metric)");
  defend_cmd->add_option("--lr", lr, "SGD learning rate")->capture_default_str();
  defend_cmd->add_option("--batch", batch, "Batch size")->capture_default_str();
  defend_cmd->add_option("--epochs", epochs, "Epochs")->capture_default_str();
  defend_cmd->add_option("--init-seed", init_seed, "Parameter initialization seed")->capture_default_str();

  // attack
  auto* attack_cmd = app.add_subcommand("attack", "Sweep attacks over (model, kind, epsilon, w/m)");
  std::vector<std::string> models;
  std::string kinds = "CA+,CA-,QA+,QA-", format = "csv";
  std::vector<double> epsilons{0.0, 0.01, 0.03, 0.1, 0.3};
  std::vector<std::size_t> wms{1, 2, 5, 10};
  double xi_override = -1.0;
  attack_cmd->add_option("--model", models, "Checkpoint as name=path or path (repeatable)")->required();
  attack_cmd->add_option("--kinds", kinds, "Comma-separated attack kinds")->capture_default_str();
  attack_cmd->add_option("--epsilons", epsilons, "Epsilon grid")->delimiter(',')->capture_default_str();
  attack_cmd->add_option("--wm", wms, "w/m grid")->delimiter(',')->capture_default_str();
  attack_cmd->add_option("--xi", xi_override, "SP weight for every QA kind (default: 1 for QA+, 100 for QA-)");
  attack_cmd->add_option("--format", format, "csv or text")->capture_default_str();

  // transfer
  auto* transfer_cmd = app.add_subcommand("transfer", "Cross-model transfer matrix");
  std::string kind = "CA+";
  double epsilon = 0.3;
  std::size_t wm = 1;
  transfer_cmd->add_option("--model", models, "Checkpoints (at least two)")->required();
  transfer_cmd->add_option("--kind", kind, "Attack kind")->capture_default_str();
  transfer_cmd->add_option("--epsilon", epsilon, "Budget")->capture_default_str();
  transfer_cmd->add_option("--wm", wm, "w or m")->capture_default_str();

  // universal
  auto* universal_cmd = app.add_subcommand("universal", "Image-agnostic perturbation, seen vs unseen");
  std::string ukind = "I-CA+";
  double train_frac = 0.05;
  std::size_t perturbations = 5;
  std::string model_path;
  universal_cmd->add_option("--model", model_path, "Checkpoint")->required();
  universal_cmd->add_option("--kind", ukind, "I-CA+, I-CA-, I-QA+ or I-QA-")->capture_default_str();
  universal_cmd->add_option("--epsilon", epsilon, "Budget")->capture_default_str();
  universal_cmd->add_option("--train-frac", train_frac, "Fraction of X in each of the seen/unseen sets")
      ->capture_default_str();
  universal_cmd->add_option("--perturbations", perturbations, "Independent perturbations")->capture_default_str();

  // xi-search
  auto* xi_cmd = app.add_subcommand("xi-search", "Sweep the semantics-preserving weight");
  std::vector<double> xis{0.0, 1.0, 100.0, 10000.0};
  std::string xi_kinds = "QA+,QA-";
  xi_cmd->add_option("--model", model_path, "Checkpoint")->required();
  xi_cmd->add_option("--xi", xis, "Ascending xi grid")->delimiter(',')->capture_default_str();
  xi_cmd->add_option("--kinds", xi_kinds, "QA+ and/or QA-")->capture_default_str();
  xi_cmd->add_option("--epsilon", epsilon, "Budget")->capture_default_str();
  xi_cmd->add_option("--wm", wm, "m")->capture_default_str();

  // report
  auto* report_cmd = app.add_subcommand("report", "Render a sweep CSV");
  std::string in_path;
  report_cmd->add_option("--in", in_path, "CSV written by `attack`")->required();
  report_cmd->add_option("--format", format, "csv or text")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      if (c.out.empty()) throw std::invalid_argument("train needs --out for the checkpoint");
      TrainConfig cfg;
      cfg.loss_kind = parse_loss_kind(loss);
      cfg.metric = parse_metric(metric);
      cfg.margin_beta = margin >= 0.0f ? margin : (cfg.loss_kind == LossKind::contrastive ? 1.0f : default_margin(cfg.metric));
      cfg.lr = lr;
      cfg.batch = batch;
      cfg.epochs = epochs;
      cfg.seed = c.seed;
      const Dataset data = load_training(c);
      TrainResult r = train(EmbeddingModel::create(arch, data.pixels(), init_seed), data, cfg);
      for (std::size_t e = 0; e < r.history.epoch_loss.size(); ++e) {
        std::cerr << "epoch " << e + 1 << " loss " << r.history.epoch_loss[e] << '\n';
      }
      r.model.metadata["loss"] = std::string(to_string(cfg.loss_kind));
      save_model(r.model, c.out);
      std::cout << "Recall@1 " << recall_at_1(build_index(r.model, load_corpus(c))) << '\n';
      return 0;
    }
    if (defend_cmd->parsed()) {
      if (c.out.empty()) throw std::invalid_argument("defend needs --out for the checkpoint");
      DefenseConfig cfg;
      cfg.budget = PerturbationBudget::from_epsilon(inner_eps);
      cfg.base.metric = parse_metric(metric);
      cfg.base.margin_beta = margin >= 0.0f ? margin : default_margin(cfg.base.metric);
      cfg.base.lr = lr;
      cfg.base.batch = batch;
      cfg.base.epochs = epochs;
      cfg.base.seed = c.seed;
      cfg.variant = parse_defense_variant(variant);
      cfg.trip_es_weight = es_weight;
      cfg.arch = arch;
      cfg.init_seed = init_seed;
      const Dataset data = load_training(c);
      DefenseResult r = harden(data, cfg, [](std::size_t e, double l) {
        std::cerr << "epoch " << e << " loss " << l << '\n';
      });
      save_model(r.model, c.out);
      std::cout << "Recall@1 " << recall_at_1(build_index(r.model, load_corpus(c))) << '\n';
      return 0;
    }
    if (attack_cmd->parsed()) {
      ExperimentPlan plan;
      plan.models = load_refs(models);
      for (AttackKind k : kinds_of(kinds)) {
        const double xi = xi_override >= 0.0 && perturbs_query(k) ? xi_override : default_xi(k);
        plan.attacks.push_back({k, xi, 5});
      }
      plan.epsilon_grid = epsilons;
      plan.wm_grid = wms;
      plan.trials = c.trials;
      plan.seed = c.seed;
      plan.inner_sample = c.inner_sample;
      plan.jobs = c.jobs;
      const ResultTable table = run_attack_sweep(plan, load_corpus(c));
      with_output(c, [&](std::ostream& os) { write_report(table, os, parse_report_format(format)); });
      for (const auto& [key, cell] : table.cells) {
        if (!cell.ok()) std::cerr << "ERROR " << key.model << ' ' << to_string(key.kind) << ": " << *cell.error << '\n';
      }
      return table.has_errors() ? 2 : 0;
    }
    if (transfer_cmd->parsed()) {
      const AttackKind k = parse_attack_kind(kind);
      const TransferMatrix m = run_transfer(load_refs(models), load_corpus(c), {k, default_xi(k), 5}, epsilon, wm,
                                            c.trials, c.seed, c.inner_sample, c.jobs);
      with_output(c, [&](std::ostream& os) { write_transfer_csv(m, k, epsilon, wm, os); });
      for (const auto& row : m.cells) {
        for (const auto& cell : row) {
          if (!cell.ok()) return 2;
        }
      }
      return 0;
    }
    if (universal_cmd->parsed()) {
      const EmbeddingModel model = load_model(model_path);
      const Dataset corpus = load_corpus(c);
      UniversalPlan plan;
      plan.kind = parse_attack_kind(ukind);
      plan.epsilon = epsilon;
      plan.train_frac = train_frac;
      plan.trials = perturbations;
      plan.seed = c.seed;
      plan.inner_sample = c.inner_sample;
      const UniversalReport r = run_universal(model, build_index(model, corpus), corpus, plan);
      with_output(c, [&](std::ostream& os) { write_universal_csv(r, plan.kind, epsilon, os); });
      return 0;
    }
    if (xi_cmd->parsed()) {
      const EmbeddingModel model = load_model(model_path);
      const auto rows = run_xi_search(model, load_corpus(c), xis, kinds_of(xi_kinds), epsilon, wm, c.trials, c.seed,
                                      c.inner_sample, c.jobs);
      with_output(c, [&](std::ostream& os) { write_xi_csv(rows, os); });
      for (const auto& r : rows) {
        if (!r.cell.ok()) return 2;
      }
      return 0;
    }
    if (report_cmd->parsed()) {
      std::ifstream in(in_path, std::ios::binary);
      if (!in) throw std::runtime_error("cannot open " + in_path);
      const ResultTable table = read_report_csv(in);
      with_output(c, [&](std::ostream& os) { write_report(table, os, parse_report_format(format)); });
      return table.has_errors() ? 2 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
