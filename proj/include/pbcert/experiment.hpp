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

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pbcert/bound_math.hpp"
#include "pbcert/certification.hpp"
#include "pbcert/data_pipeline.hpp"
#include "pbcert/dataset.hpp"
#include "pbcert/nn_core.hpp"
#include "pbcert/pnn.hpp"

namespace pbcert {

// Which n enters the complexity term of the training objective.
enum class ObjectiveN { Full, Cert };

struct ExperimentConfig {
  // CSV paths, "openml:<id>", or "synthetic:blobs[:key=value...]" with keys
  // n, dim, distance, sd, seed.
  std::vector<std::string> datasets;
  std::string label_column;
  std::vector<double> removal_grid{0.0, 0.25, 0.5, 0.75, 0.90, 0.95, 0.97, 0.98};
  std::vector<Mode> modes{Mode::SelfCertified, Mode::TraditionalPnn, Mode::TraditionalErm};
  std::vector<double> prior_fractions{0.5, 0.6, 0.7, 0.8};
  std::size_t seeds = 5;
  std::uint64_t base_seed = 0;

  double test_fraction = 0.10;
  double prior_val_fraction = 0.01;
  bool stratified_removal = false;

  std::size_t hidden_width = 100;
  double sigma0 = 0.005;
  std::size_t prior_epochs = 500;
  std::size_t posterior_epochs = 100;
  std::size_t erm_epochs = 600;
  std::size_t batch_size = 250;
  double learning_rate = 1e-3;
  double momentum = 0.95;
  double dropout_rate = 0.01;
  bool dropout_inputs = false;
  LossKind erm_loss = LossKind::BoundedCrossEntropy;
  LossKind prior_loss = LossKind::CrossEntropy;
  double p_min = 1e-4;
  ObjectiveN objective_n = ObjectiveN::Full;

  ConfidenceParams confidence;
  std::size_t mc_samples = 150000;
  std::size_t eval_samples = 100;
  bool certify_xent = false;

  std::size_t mc_workers = 1;
  std::size_t cell_workers = 1;

  std::string profile = "full";
  std::string output_dir = "results";
  std::string cache_dir = default_cache_dir();

  void validate() const;

  // "full" (the defaults above) or "desk": m = 10000 and 100 / 30 / 150
  // prior / posterior / ERM epochs.
  static ExperimentConfig for_profile(std::string_view profile);

  TrainConfigErm erm_config(std::uint64_t seed) const;
  PriorSpec prior_spec() const;
  TrainConfigPnn pnn_config(std::uint64_t seed, std::size_t n_full, std::size_t n_cert) const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Overlays the keys present in `j` onto `cfg`. Unknown keys are rejected.
void apply_json(ExperimentConfig& cfg, const nlohmann::json& j);
// Fields whose value differs from the full profile, as {name: value}.
nlohmann::json profile_deviations(const ExperimentConfig& cfg);
// SHA-256 prefix over every field that can change results (workers and
// directories excluded).
std::string config_hash(const ExperimentConfig& cfg);

Dataset load_dataset(const std::string& source, const ExperimentConfig& cfg);

// One partitioned, standardised cell. Standardisation is fit on the prior
// data (s_pri + s_prival) in PNN modes and on s_full in ERM mode.
struct CellData {
  Partition partition;
  Standardizer standardizer;
  Dataset s_pri;
  Dataset s_prival;
  Dataset s_cert;
  Dataset s_full;
  Dataset test;
};

CellData prepare_cell(const ExperimentConfig& cfg, const Dataset& raw, double removal, Mode mode,
                      std::uint64_t seed, double prior_fraction);

// Seeds of a cell's random streams.
std::uint64_t init_seed(std::uint64_t seed);
std::uint64_t mc_seed(std::uint64_t seed);
std::uint64_t eval_seed(std::uint64_t seed);

struct PnnModels {
  GaussianWeightDist prior;
  GaussianWeightDist posterior;
};

PnnModels train_pnn_models(const ExperimentConfig& cfg, const CellData& cell, std::uint64_t seed);
WeightSet train_erm_model(const ExperimentConfig& cfg, const CellData& cell, std::uint64_t seed);
RiskCertificate certify_models(const ExperimentConfig& cfg, const CellData& cell, const PnnModels& models,
                               std::uint64_t seed);

struct ResultsRow {
  std::string dataset;
  double removal_fraction = 0.0;
  Mode mode = Mode::SelfCertified;
  std::uint64_t seed = 0;
  std::optional<double> prior_fraction;
  std::optional<double> stochastic_test_err;
  std::optional<double> mean_test_err;
  std::optional<double> mc_avg;
  std::optional<double> kl_div;
  std::optional<double> certificate;
  std::optional<double> quad_bound;
  std::optional<double> chernoff;
  std::optional<double> binomial;
  std::optional<double> n_cert;
  std::optional<double> n_test;
  std::optional<double> m;
  double wall_time = 0.0;
  std::string status = "ok";

  bool ok() const { return status == "ok"; }
};

// Certificate of every prior fraction tried in a PNN cell.
struct SelectionEntry {
  double prior_fraction = 0.0;
  double certificate = 1.0;
};

struct CellResult {
  ResultsRow row;
  std::vector<SelectionEntry> selection;
};

// Never throws for data problems: they become a failed row.
CellResult run_cell(const ExperimentConfig& cfg, const Dataset& raw, double removal, Mode mode,
                    std::uint64_t seed);

const std::vector<std::string>& results_header();
void write_results_csv(std::ostream& out, const std::vector<ResultsRow>& rows);
std::vector<ResultsRow> read_results_csv(std::istream& in);

// Long format: one line per (dataset, removal, mode, metric).
struct SummaryRow {
  std::string dataset;
  double removal_fraction = 0.0;
  Mode mode = Mode::SelfCertified;
  std::string metric;
  std::size_t n = 0;
  double mean = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct Interval {
  std::size_t n = 0;
  double mean = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

// mean +- 1.96 standard errors (sample standard deviation); se = 0 for n = 1.
Interval normal_interval(const std::vector<double>& values);

std::vector<SummaryRow> summarize(const std::vector<ResultsRow>& rows);
void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows);

struct AblateOutput {
  std::vector<ResultsRow> rows;
  std::vector<SummaryRow> summary;
};

// Sweeps dataset x removal x mode x seed, writing results.csv, summary.csv,
// selection.csv, config.json and metadata.json into cfg.output_dir (skipped
// when it is empty). Rows come out in sweep order whatever the worker count.
AblateOutput ablate(const ExperimentConfig& cfg);

// Reads a results CSV and writes test_error.csv, certificates.csv,
// certificate_vs_test_bounds.csv and report_metadata.json into out_dir.
void report(const std::string& results_csv, const std::string& out_dir);

struct FigureRow {
  std::string dataset;  // "all" for the pooled series
  std::string series;
  double removal_fraction = 0.0;
  Interval interval;
};

struct FigureData {
  std::vector<FigureRow> test_error;
  std::vector<FigureRow> certificates;
  std::vector<FigureRow> certificate_vs_test_bounds;
};

FigureData figure_data(const std::vector<ResultsRow>& rows);
void write_figure_csv(std::ostream& out, const std::vector<FigureRow>& rows);

}  // namespace pbcert
