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

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Pass criterion numbers to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "pbcert/bound_math.hpp"
#include "pbcert/certification.hpp"
#include "pbcert/experiment.hpp"
#include "pbcert/nn_core.hpp"
#include "pbcert/pnn.hpp"
#include "pbcert/random.hpp"

namespace {

using namespace pbcert;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string spambase_path() {
  if (const char* env = std::getenv("PBCERT_SPAMBASE_CSV"); env != nullptr && *env != '\0') return env;
  return std::string(PBCERT_SOURCE_DIR) + "/data/spambase.csv";
}

ExperimentConfig spambase_config() {
  ExperimentConfig c = ExperimentConfig::for_profile("desk");
  c.datasets = {spambase_path()};
  c.label_column = "class";
  c.output_dir = "";
  return c;
}

// ---- 1

Outcome kl_inversion_oracle() {
  std::mt19937_64 rng(2026);
  std::uniform_real_distribution<double> uq(0.0, 1.0);
  std::uniform_real_distribution<double> ulogc(std::log(1e-5), std::log(3.0));
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double q = uq(rng);
    const double c = std::exp(ulogc(rng));
    worst = std::max(worst, std::abs(kl_inverse(q, c) - oracle::kl_inverse_grid(q, c, 1e-7)));
  }
  return {worst <= 1e-6, fmt("1000 pairs, max |bisection - grid| = %.3g (tol 1e-6)", worst)};
}

// ---- 2

Outcome binomial_correctness() {
  double worst = 0.0;
  for (double delta : {0.01, 0.035, 0.05}) {
    for (std::size_t m = 1; m <= 30; ++m) {
      for (std::size_t k = 0; k <= m; ++k) {
        worst = std::max(worst, std::abs(binomial_test_bound(k, m, delta).value - oracle::binomial_inversion(k, m, delta)));
      }
    }
  }
  const double delta = 0.035;
  const int trials = 100000;
  const double sigma = std::sqrt(delta * (1.0 - delta) / trials);
  double worst_gap = 1.0;
  std::string worst_case;
  std::mt19937_64 rng(7);
  for (std::size_t m : {10u, 30u, 100u, 500u}) {
    for (double p : {0.01, 0.1, 0.3, 0.5, 0.8}) {
      std::vector<double> bound(m + 1);
      for (std::size_t k = 0; k <= m; ++k) bound[k] = binomial_test_bound(k, m, delta).value;
      std::binomial_distribution<std::size_t> draw(m, p);
      int covered = 0;
      for (int t = 0; t < trials; ++t) covered += bound[draw(rng)] >= p ? 1 : 0;
      const double coverage = static_cast<double>(covered) / trials;
      const double gap = coverage - (1.0 - delta - 3.0 * sigma);
      if (gap < worst_gap) {
        worst_gap = gap;
        worst_case = fmt("m=%zu p=%.2f coverage=%.5f", m, p, coverage);
      }
    }
  }
  return {worst <= 1e-9 && worst_gap >= 0.0,
          fmt("max |bisection - enumeration| = %.3g (tol 1e-9); lowest coverage margin %.4f at %s", worst, worst_gap,
              worst_case.c_str())};
}

// ---- 3

Outcome spot_values() {
  double worst = 0.0;
  for (double c : {1e-6, 1e-3, 0.01, 0.1, 0.5, 1.0, 2.0, 10.0}) worst = std::max(worst, std::abs(kl_inverse(0.0, c) - (1.0 - std::exp(-c))));
  const double chern = chernoff_test_bound(0.1, 100, 0.035).value;
  const double closed = 0.1 + std::sqrt(std::log(1.0 / 0.035) / 200.0);
  const double cerr = std::abs(chern - closed);
  return {worst <= 1e-12 && cerr <= 1e-12,
          fmt("kl_inverse(0,c) max err %.3g; Chernoff(0.1,100,0.035) = %.15f, err %.3g (tol 1e-12)", worst, chern, cerr)};
}

// ---- 4

Eigen::VectorXd random_vector(Eigen::Index n, std::uint64_t seed, double scale) {
  Engine e(seed);
  NormalSampler s(e);
  Eigen::VectorXd v(n);
  s.fill(v);
  return v * scale;
}

Outcome gradient_fidelity() {
  const FcnArchitecture arch({2, 4, 4, 2});
  const auto n = static_cast<Eigen::Index>(arch.parameter_count());
  Eigen::MatrixXd x(2, 8);
  x << 0.3, -1.1, 0.8, 1.5, -0.2, 0.9, -0.6, 1.1, 1.2, 0.4, -0.7, 0.1, -1.3, 0.6, 0.2, -0.9;
  const std::vector<int> y{0, 1, 1, 0, 1, 0, 0, 1};
  double worst_erm = 0.0;
  double worst_fq = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const WeightSet w(arch, random_vector(n, seed, 0.8));
    for (LossKind kind : {LossKind::BoundedCrossEntropy, LossKind::CrossEntropy}) {
      const LossSpec spec{1e-4, kind};
      const Eigen::VectorXd g = backprop(w, x, y, spec).grad;
      const Eigen::VectorXd fd = oracle::central_difference(
          [&](const Eigen::VectorXd& v) { return backprop(WeightSet(arch, v), x, y, spec).loss; }, w.values());
      worst_erm = std::max(worst_erm, oracle::max_relative_error(g, fd));
    }
    const GaussianWeightDist prior(arch, random_vector(n, 10 + seed, 0.7), Eigen::VectorXd::Constant(n, -2.0));
    const GaussianWeightDist q(arch, random_vector(n, 20 + seed, 0.7),
                               Eigen::VectorXd::Constant(n, -1.5) + random_vector(n, 30 + seed, 0.3));
    const Eigen::VectorXd noise = random_vector(n, 40 + seed, 1.0);
    TrainConfigPnn cfg;
    cfg.n_for_objective = 60;
    const ObjectiveValue v = fquad_objective(q, prior, x, y, cfg, noise);
    const Eigen::VectorXd fmu = oracle::central_difference(
        [&](const Eigen::VectorXd& m) {
          return fquad_objective(GaussianWeightDist(arch, m, q.rho), prior, x, y, cfg, noise).objective;
        },
        q.mu);
    const Eigen::VectorXd frho = oracle::central_difference(
        [&](const Eigen::VectorXd& r) {
          return fquad_objective(GaussianWeightDist(arch, q.mu, r), prior, x, y, cfg, noise).objective;
        },
        q.rho);
    worst_fq = std::max({worst_fq, oracle::max_relative_error(v.grad_mu, fmu),
                         oracle::max_relative_error(v.grad_rho, frho)});
  }
  return {worst_erm < 1e-4 && worst_fq < 1e-4,
          fmt("2-4-4-2, 5 points: ERM backprop max rel err %.3g, f_quad (frozen noise) %.3g (tol 1e-4)", worst_erm,
              worst_fq)};
}

// ---- 5

Outcome gaussian_kl_oracle() {
  const FcnArchitecture arch({2, 3, 3, 2});
  const auto n = static_cast<Eigen::Index>(arch.parameter_count());
  const int draws = 1000000;
  int within = 0;
  double worst_z = 0.0;
  for (std::uint64_t pair = 0; pair < 20; ++pair) {
    const GaussianWeightDist p(arch, random_vector(n, 100 + pair, 0.5), random_vector(n, 200 + pair, 0.4).array() - 1.0);
    const GaussianWeightDist q(arch, random_vector(n, 300 + pair, 0.5), random_vector(n, 400 + pair, 0.4).array() - 1.0);
    const Eigen::ArrayXd sq = q.sigma().array();
    const Eigen::ArrayXd sp = p.sigma().array();
    const Eigen::ArrayXd mq = q.mu.array();
    const Eigen::ArrayXd mp = p.mu.array();
    Engine e(derive_seed(pair, {stream_tag("kl_oracle")}));
    NormalSampler normal(e);
    Eigen::ArrayXd z(n);
    double sum = 0.0;
    double sum2 = 0.0;
    for (int i = 0; i < draws; ++i) {
      for (Eigen::Index k = 0; k < n; ++k) z[k] = normal();
      const Eigen::ArrayXd w = mq + sq * z;
      // log q(w) - log p(w); the 2 pi terms cancel
      const double lr = ((sp / sq).log() - 0.5 * z.square() + 0.5 * ((w - mp) / sp).square()).sum();
      sum += lr;
      sum2 += lr * lr;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sum2 / draws - mean * mean) / draws);
    const double z_score = std::abs(mean - kl_gaussian_diag(q, p)) / se;
    worst_z = std::max(worst_z, z_score);
    within += z_score <= 3.0 ? 1 : 0;
  }
  return {within == 20, fmt("%d/20 pairs within 3 MC sigma of the closed form (worst |z| = %.2f)", within, worst_z)};
}

// ---- 6

Outcome certificate_validity() {
  const int runs = 50;
  int covered = 0;
  int chain_ok = 0;
  double worst_margin = 1.0;
  double mean_cert = 0.0;
  double mean_truth = 0.0;
  bool matches_run_cell = true;
  for (int run = 0; run < runs; ++run) {
    ExperimentConfig cfg = ExperimentConfig::for_profile("desk");
    const std::string source = "synthetic:blobs:n=2000:seed=" + std::to_string(run);
    cfg.datasets = {source};
    cfg.output_dir = "";
    const Dataset raw = load_dataset(source, cfg);
    const auto seed = static_cast<std::uint64_t>(run);

    // The selection loop of a self-certified cell, keeping the models.
    std::optional<CellData> best_cell;
    std::optional<PnnModels> best_models;
    std::optional<RiskCertificate> best;
    for (double f : cfg.prior_fractions) {
      CellData cell = prepare_cell(cfg, raw, 0.0, Mode::SelfCertified, seed, f);
      PnnModels models = train_pnn_models(cfg, cell, seed);
      RiskCertificate cert = certify_models(cfg, cell, models, seed);
      if (!best || cert.final_bound < best->final_bound) {
        best_cell = std::move(cell);
        best_models = std::move(models);
        best = cert;
      }
    }
    if (run == 0) {
      const ResultsRow row = run_cell(cfg, raw, 0.0, Mode::SelfCertified, seed).row;
      matches_run_cell = row.ok() && row.certificate && *row.certificate == best->final_bound;
    }

    // Risk of the stochastic predictor on a million fresh points, one fresh
    // weight draw per block of 1000 points.
    const Dataset fresh = best_cell->standardizer.apply(
        load_dataset("synthetic:blobs:n=1000000:seed=" + std::to_string(1000000 + run), cfg));
    Engine engine(derive_seed(seed, {stream_tag("true_risk")}));
    std::size_t errors = 0;
    for (Eigen::Index b = 0; b < 1000; ++b) {
      const WeightSample s = sample_weights(best_models->posterior, engine);
      const auto block = fresh.features.middleCols(b * 1000, 1000);
      const Eigen::MatrixXd logits = fcn_forward_batch(s.weights, block);
      errors += count_errors(logits, std::span<const int>(fresh.labels).subspan(static_cast<std::size_t>(b) * 1000, 1000));
    }
    const double truth = static_cast<double>(errors) / 1e6;
    const bool chain = best->mc_avg_01 <= best->emp_bound && best->emp_bound <= best->final_bound &&
                       best->final_bound <= best->quad_bound + 1e-9;
    chain_ok += chain ? 1 : 0;
    covered += best->final_bound >= truth ? 1 : 0;
    worst_margin = std::min(worst_margin, best->final_bound - truth);
    mean_cert += best->final_bound / runs;
    mean_truth += truth / runs;
    std::fprintf(stderr, "  run %2d: certificate %.4f true risk %.4f mc_avg %.4f kl %.2f\n", run, best->final_bound,
                 truth, best->mc_avg_01, best->kl_div);
  }
  return {covered >= 48 && chain_ok == runs && matches_run_cell,
          fmt("certificate >= true risk in %d/%d runs (need 48); chain held in %d/%d; mean certificate %.4f, mean "
              "true risk %.4f, smallest margin %.4f; selection loop %s run_cell",
              covered, runs, chain_ok, runs, mean_cert, mean_truth, worst_margin,
              matches_run_cell ? "matches" : "DIFFERS FROM")};
}

// ---- 7

Outcome small_data_regime() {
  const ExperimentConfig cfg = spambase_config();
  const Dataset raw = load_dataset(cfg.datasets.front(), cfg);
  double cert = 0.0;
  double chern = 0.0;
  double binom = 0.0;
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ResultsRow sc = run_cell(cfg, raw, 0.98, Mode::SelfCertified, seed).row;
    const ResultsRow erm = run_cell(cfg, raw, 0.98, Mode::TraditionalErm, seed).row;
    if (!sc.ok() || !erm.ok()) continue;
    ++ok;
    cert += *sc.certificate / 5.0;
    chern += *erm.chernoff / 5.0;
    binom += *erm.binomial / 5.0;
    std::fprintf(stderr, "  seed %llu: certificate %.4f (prior fraction %.1f)  ERM test err %.4f chernoff %.4f binomial %.4f\n",
                 static_cast<unsigned long long>(seed), *sc.certificate, *sc.prior_fraction, *erm.mean_test_err,
                 *erm.chernoff, *erm.binomial);
  }
  const std::size_t kept = remove_random(raw, 0.98, 0).size();
  const bool pass = ok == 5 && cert < chern && cert < binom && chern >= 0.5 && binom >= 0.5 && cert <= 0.5;
  return {pass, fmt("%zu points after removal; mean certificate %.4f vs ERM chernoff %.4f, binomial %.4f "
                    "(need cert < both, bounds >= 0.5, cert <= 0.5); %d/5 cells ok",
                    kept, cert, chern, binom, ok)};
}

// ---- 8

Outcome test_error_parity() {
  ExperimentConfig cfg = spambase_config();
  const Dataset raw = load_dataset(cfg.datasets.front(), cfg);
  double pnn = 0.0;
  double erm = 0.0;
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ResultsRow p = run_cell(cfg, raw, 0.0, Mode::TraditionalPnn, seed).row;
    const ResultsRow e = run_cell(cfg, raw, 0.0, Mode::TraditionalErm, seed).row;
    if (!p.ok() || !e.ok()) continue;
    ++ok;
    pnn += *p.stochastic_test_err / 5.0;
    erm += *e.mean_test_err / 5.0;
    std::fprintf(stderr, "  seed %llu: PNN stochastic %.4f (mean %.4f, certificate %.4f)  ERM %.4f\n",
                 static_cast<unsigned long long>(seed), *p.stochastic_test_err, *p.mean_test_err, *p.certificate,
                 *e.mean_test_err);
  }
  const double gap = std::abs(pnn - erm);
  return {ok == 5 && gap <= 0.10,
          fmt("mean stochastic PNN test error %.4f, mean ERM test error %.4f, |gap| %.4f (tol 0.10); %d/5 cells ok",
              pnn, erm, gap, ok)};
}

// ---- 9

bool rows_identical(const ResultsRow& a, const ResultsRow& b) {
  std::ostringstream sa;
  std::ostringstream sb;
  ResultsRow x = a;
  ResultsRow y = b;
  x.wall_time = 0.0;
  y.wall_time = 0.0;
  write_results_csv(sa, {x});
  write_results_csv(sb, {y});
  return sa.str() == sb.str();
}

Outcome determinism() {
  ExperimentConfig cfg = spambase_config();
  cfg.prior_fractions = {0.5, 0.7};
  cfg.mc_samples = 2000;
  const Dataset raw = load_dataset(cfg.datasets.front(), cfg);
  int same = 0;
  int cells = 0;
  for (Mode m : {Mode::SelfCertified, Mode::TraditionalPnn, Mode::TraditionalErm}) {
    const ResultsRow a = run_cell(cfg, raw, 0.9, m, 11).row;
    const ResultsRow b = run_cell(cfg, raw, 0.9, m, 11).row;
    ExperimentConfig par = cfg;
    par.mc_workers = 4;
    const ResultsRow c = run_cell(par, raw, 0.9, m, 11).row;
    cells += 2;
    same += (a.ok() && rows_identical(a, b)) ? 1 : 0;
    same += (a.ok() && rows_identical(a, c)) ? 1 : 0;
  }
  const CellData cell = prepare_cell(cfg, raw, 0.0, Mode::SelfCertified, 3, 0.5);
  const PnnModels models = train_pnn_models(cfg, cell, 3);
  const double one = mc_empirical_risk(models.posterior, cell.s_cert, 3000, 5, McOptions{1});
  bool mc_same = true;
  for (std::size_t w : {2u, 4u, 7u}) mc_same = mc_same && mc_empirical_risk(models.posterior, cell.s_cert, 3000, 5, McOptions{w}) == one;
  return {same == cells && mc_same,
          fmt("%d/%d cell reruns bit-identical (same seed, 1 and 4 MC workers); MC risk with 1/2/4/7 workers %s",
              same, cells, mc_same ? "bit-identical" : "DIFFERS")};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "kl-inversion oracle equivalence", 10, kl_inversion_oracle},
      {2, "binomial bound correctness", 60, binomial_correctness},
      {3, "analytic spot values", 10, spot_values},
      {4, "gradient fidelity", 30, gradient_fidelity},
      {5, "Gaussian KL oracle", 60, gaussian_kl_oracle},
      {6, "certificate validity on blobs", 1800, certificate_validity},
      {7, "small-data regime on Spambase", 1200, small_data_regime},
      {8, "test-error parity on Spambase", 900, test_error_parity},
      {9, "determinism and parallel invariance", 300, determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const Criterion& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s [%.1f s, limit %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.limit_s, in_time ? "" : ", OVER TIME");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
