/*
 * Copyright 2026 The pbcert Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// pbcert: train, certify and evaluate probabilistic networks, and run the
// removal-fraction sweep.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pbcert/certification.hpp"
#include "pbcert/data_pipeline.hpp"
#include "pbcert/experiment.hpp"
#include "pbcert/pnn.hpp"

namespace fs = std::filesystem;
using namespace pbcert;

namespace {

struct Flags {
  std::vector<std::string> datasets;
  std::optional<std::string> label_col;
  std::vector<std::string> modes;
  std::vector<double> removal;
  std::vector<double> prior_frac;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> seeds;
  std::optional<std::size_t> mc_samples;
  std::optional<std::size_t> eval_samples;
  std::optional<std::size_t> mc_workers;
  std::optional<std::size_t> cell_workers;
  std::optional<std::string> profile;
  std::optional<std::string> out_dir;
  std::optional<std::string> cache_dir;
  std::string config;
  bool certify_xent = false;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--dataset", f.datasets, "CSV path, openml:<id> or synthetic:blobs[:k=v...]");
  app->add_option("--label-col", f.label_col, "label column name or 0-based index (default: last)");
  app->add_option("--mode", f.modes, "self_certified, traditional_pnn or traditional_erm");
  app->add_option("--removal", f.removal, "fraction of data removed at random");
  app->add_option("--prior-frac", f.prior_frac, "fraction of training data for the prior");
  app->add_option("--seed", f.seed, "seed (base seed for sweeps)");
  app->add_option("--seeds", f.seeds, "seeds per sweep cell");
  app->add_option("--mc-samples", f.mc_samples, "Monte Carlo weight samples for the certificate");
  app->add_option("--eval-samples", f.eval_samples, "weight draws per test example");
  app->add_option("--mc-workers", f.mc_workers, "threads for Monte Carlo evaluation");
  app->add_option("--cell-workers", f.cell_workers, "sweep cells run concurrently");
  app->add_option("--profile", f.profile, "full or desk");
  app->add_option("--out-dir", f.out_dir, "output directory");
  app->add_option("--cache-dir", f.cache_dir, "download cache directory");
  app->add_option("--config", f.config, "JSON config file");
  app->add_flag("--certify-xent", f.certify_xent, "also certify the bounded cross-entropy");
}

ExperimentConfig resolve(const Flags& f) {
  nlohmann::json file = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw std::runtime_error("cannot open config " + f.config);
    file = nlohmann::json::parse(in);
  }
  std::string profile = "full";
  if (file.contains("profile")) profile = file["profile"].get<std::string>();
  if (f.profile) profile = *f.profile;
  file.erase("profile");
  ExperimentConfig cfg = ExperimentConfig::for_profile(profile);
  apply_json(cfg, file);

  if (!f.datasets.empty()) cfg.datasets = f.datasets;
  if (f.label_col) cfg.label_column = *f.label_col;
  if (!f.modes.empty()) {
    cfg.modes.clear();
    for (const std::string& m : f.modes) cfg.modes.push_back(parse_mode(m));
  }
  if (!f.removal.empty()) cfg.removal_grid = f.removal;
  if (!f.prior_frac.empty()) cfg.prior_fractions = f.prior_frac;
  if (f.seed) cfg.base_seed = *f.seed;
  if (f.seeds) cfg.seeds = *f.seeds;
  if (f.mc_samples) cfg.mc_samples = *f.mc_samples;
  if (f.eval_samples) cfg.eval_samples = *f.eval_samples;
  if (f.mc_workers) cfg.mc_workers = *f.mc_workers;
  if (f.cell_workers) cfg.cell_workers = *f.cell_workers;
  if (f.out_dir) cfg.output_dir = *f.out_dir;
  if (f.cache_dir) cfg.cache_dir = *f.cache_dir;
  if (f.certify_xent) cfg.certify_xent = true;
  cfg.validate();
  return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg) {
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << to_json(cfg).dump(2) << '\n';
  return dir;
}

// A single cell: first entry of every grid.
struct One {
  Dataset raw;
  double removal;
  Mode mode;
  std::uint64_t seed;
  double prior_fraction;
};

One single_cell(const ExperimentConfig& cfg) {
  return {load_dataset(cfg.datasets.front(), cfg), cfg.removal_grid.front(), cfg.modes.front(), cfg.base_seed,
          cfg.prior_fractions.front()};
}

void emit(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
  std::cout << text;
}

int cmd_fetch(const ExperimentConfig& cfg) {
  for (const std::string& src : cfg.datasets) {
    if (src.rfind("openml:", 0) == 0) {
      FetchOptions opts;
      opts.label_column = cfg.label_column;
      const FetchResult r = fetch_openml(std::stoi(src.substr(7)), cfg.cache_dir, opts);
      std::cout << src << ": " << r.data.size() << " examples, " << r.data.dim() << " features, "
                << r.data.class_count << " classes; " << (r.from_cache ? "cached" : "downloaded") << " at "
                << r.path << " sha256=" << r.sha256 << '\n';
    } else {
      const Dataset d = load_dataset(src, cfg);
      std::cout << src << ": " << d.size() << " examples, " << d.dim() << " features, " << d.class_count
                << " classes (local)\n";
    }
  }
  return 0;
}

int cmd_train_erm(const ExperimentConfig& cfg) {
  const fs::path dir = prepare_out(cfg);
  const One c = single_cell(cfg);
  const CellData cell = prepare_cell(cfg, c.raw, c.removal, Mode::TraditionalErm, c.seed, c.prior_fraction);
  const WeightSet w = train_erm_model(cfg, cell, c.seed);
  save_weights((dir / "erm_weights.txt").string(), w);
  std::cout << "trained on " << cell.s_full.size() << " examples; train 01 error "
            << zero_one_error(w, cell.s_full) << "; weights in " << (dir / "erm_weights.txt").string() << '\n';
  return 0;
}

int cmd_train_pnn(const ExperimentConfig& cfg) {
  const fs::path dir = prepare_out(cfg);
  const One c = single_cell(cfg);
  if (c.mode == Mode::TraditionalErm) throw std::invalid_argument("train-pnn needs a PNN mode");
  const CellData cell = prepare_cell(cfg, c.raw, c.removal, c.mode, c.seed, c.prior_fraction);
  const PnnModels m = train_pnn_models(cfg, cell, c.seed);
  save_distribution((dir / "prior.txt").string(), {m.prior, cfg.sigma0, cfg.p_min, c.seed, "prior"});
  save_distribution((dir / "posterior.txt").string(), {m.posterior, cfg.sigma0, cfg.p_min, c.seed, "posterior"});
  std::cout << "prior on " << cell.s_pri.size() << " (+" << cell.s_prival.size() << " validation), posterior on "
            << cell.s_full.size() << "; KL " << kl_gaussian_diag(m.posterior, m.prior) << "; written to "
            << dir.string() << '\n';
  return 0;
}

int cmd_certify(const ExperimentConfig& cfg, const std::string& prior_path, const std::string& posterior_path) {
  const fs::path dir = prepare_out(cfg);
  const One c = single_cell(cfg);
  if (c.mode == Mode::TraditionalErm) throw std::invalid_argument("certify needs a PNN mode");
  const CellData cell = prepare_cell(cfg, c.raw, c.removal, c.mode, c.seed, c.prior_fraction);
  PnnModels m;
  m.prior = load_distribution(prior_path.empty() ? (dir / "prior.txt").string() : prior_path).dist;
  m.posterior = load_distribution(posterior_path.empty() ? (dir / "posterior.txt").string() : posterior_path).dist;
  const RiskCertificate cert = certify_models(cfg, cell, m, c.seed);
  std::ostringstream os;
  write_record(os, cert);
  os << "config_hash = " << config_hash(cfg) << '\n' << "seed = " << c.seed << '\n';
  emit(dir / "certificate.txt", os.str());
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& posterior_path, const std::string& weights_path) {
  const fs::path dir = prepare_out(cfg);
  const One c = single_cell(cfg);
  if (c.mode == Mode::SelfCertified) throw std::invalid_argument("self_certified mode has no test set");
  const CellData cell = prepare_cell(cfg, c.raw, c.removal, c.mode, c.seed, c.prior_fraction);
  std::ostringstream os;
  if (c.mode == Mode::TraditionalErm) {
    const WeightSet w = load_weights(weights_path.empty() ? (dir / "erm_weights.txt").string() : weights_path);
    write_record(os, test_set_bounds(w, cell.test, cfg.confidence.delta_test));
  } else {
    const GaussianWeightDist q =
        load_distribution(posterior_path.empty() ? (dir / "posterior.txt").string() : posterior_path).dist;
    McOptions mc;
    mc.workers = cfg.mc_workers;
    write_record(os, evaluate_posterior(q, cell.test, cfg.eval_samples, eval_seed(c.seed), mc));
  }
  os << "config_hash = " << config_hash(cfg) << '\n' << "seed = " << c.seed << '\n';
  emit(dir / "evaluation.txt", os.str());
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg) {
  const AblateOutput out = ablate(cfg);
  std::size_t failed = 0;
  for (const ResultsRow& r : out.rows) failed += r.ok() ? 0 : 1;
  std::cout << out.rows.size() << " cells (" << failed << " failed); results in " << cfg.output_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PAC-Bayes certified probabilistic neural networks"};
  app.require_subcommand(1);
  Flags flags;
  std::string prior_path;
  std::string posterior_path;
  std::string weights_path;
  std::string results_path;

  CLI::App* fetch = app.add_subcommand("fetch", "download and cache datasets");
  CLI::App* train_erm = app.add_subcommand("train-erm", "train the deterministic baseline");
  CLI::App* train_pnn = app.add_subcommand("train-pnn", "train prior and posterior");
  CLI::App* certify = app.add_subcommand("certify", "compute the risk certificate");
  CLI::App* evaluate = app.add_subcommand("evaluate", "test errors or test-set bounds");
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "sweep datasets x removal x mode x seed");
  CLI::App* report_cmd = app.add_subcommand("report", "plot data from a results CSV");
  for (CLI::App* sub : {fetch, train_erm, train_pnn, certify, evaluate, ablate_cmd, report_cmd}) {
    add_common(sub, flags);
  }
  certify->add_option("--prior", prior_path, "prior file (default <out-dir>/prior.txt)");
  certify->add_option("--posterior", posterior_path, "posterior file (default <out-dir>/posterior.txt)");
  evaluate->add_option("--posterior", posterior_path, "posterior file (default <out-dir>/posterior.txt)");
  evaluate->add_option("--weights", weights_path, "ERM weights (default <out-dir>/erm_weights.txt)");
  report_cmd->add_option("--results", results_path, "results CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report_cmd->parsed()) {
      const std::string out = flags.out_dir.value_or(fs::path(results_path).parent_path().string());
      report(results_path, out.empty() ? "." : out);
      std::cout << "plot data written to " << (out.empty() ? "." : out) << '\n';
      return 0;
    }
    const ExperimentConfig cfg = resolve(flags);
    if (fetch->parsed()) return cmd_fetch(cfg);
    if (train_erm->parsed()) return cmd_train_erm(cfg);
    if (train_pnn->parsed()) return cmd_train_pnn(cfg);
    if (certify->parsed()) return cmd_certify(cfg, prior_path, posterior_path);
    if (evaluate->parsed()) return cmd_evaluate(cfg, posterior_path, weights_path);
    if (ablate_cmd->parsed()) return cmd_ablate(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
