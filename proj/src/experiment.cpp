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

#include "pbcert/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <tuple>

#include "pbcert/random.hpp"

namespace pbcert {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string_view loss_name(LossKind k) {
  switch (k) {
    case LossKind::BoundedCrossEntropy: return "bounded_xent";
    case LossKind::CrossEntropy: return "xent";
    case LossKind::ZeroOne: return "zero_one";
  }
  return "?";
}

LossKind parse_loss(std::string_view s) {
  if (s == "bounded_xent") return LossKind::BoundedCrossEntropy;
  if (s == "xent") return LossKind::CrossEntropy;
  throw std::invalid_argument("unknown ERM loss '" + std::string(s) + "'");
}

std::string_view objective_n_name(ObjectiveN n) { return n == ObjectiveN::Full ? "full" : "cert"; }

ObjectiveN parse_objective_n(std::string_view s) {
  if (s == "full") return ObjectiveN::Full;
  if (s == "cert") return ObjectiveN::Cert;
  throw std::invalid_argument("objective_n must be 'full' or 'cert'");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

// CSV cells are written unquoted.
std::string sanitize(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '"' || c == '\n' || c == '\r') c = ';';
  }
  return s;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw DataError("not a number: '" + s + "'", line);
  return v;
}

std::optional<double> parse_opt(const std::string& s, std::size_t line) {
  if (s.empty()) return std::nullopt;
  return parse_double(s, line);
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::vector<std::size_t> merged(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::vector<std::size_t> out;
  out.reserve(a.size() + b.size());
  std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Metric accessors shared by summary and figures.
struct Metric {
  const char* name;
  std::optional<double> (*get)(const ResultsRow&);
};

const std::vector<Metric>& metrics() {
  static const std::vector<Metric> m = {
      {"prior_fraction", [](const ResultsRow& r) { return r.prior_fraction; }},
      {"stochastic_test_err", [](const ResultsRow& r) { return r.stochastic_test_err; }},
      {"mean_test_err", [](const ResultsRow& r) { return r.mean_test_err; }},
      {"mc_avg", [](const ResultsRow& r) { return r.mc_avg; }},
      {"kl_div", [](const ResultsRow& r) { return r.kl_div; }},
      {"certificate", [](const ResultsRow& r) { return r.certificate; }},
      {"quad_bound", [](const ResultsRow& r) { return r.quad_bound; }},
      {"chernoff", [](const ResultsRow& r) { return r.chernoff; }},
      {"binomial", [](const ResultsRow& r) { return r.binomial; }},
      {"n_cert", [](const ResultsRow& r) { return r.n_cert; }},
      {"n_test", [](const ResultsRow& r) { return r.n_test; }},
      {"m", [](const ResultsRow& r) { return r.m; }},
      {"wall_time", [](const ResultsRow& r) { return std::optional<double>(r.wall_time); }},
  };
  return m;
}

std::vector<std::string> dataset_order(const std::vector<ResultsRow>& rows) {
  std::vector<std::string> names;
  for (const ResultsRow& r : rows) {
    if (std::find(names.begin(), names.end(), r.dataset) == names.end()) names.push_back(r.dataset);
  }
  return names;
}

}  // namespace

// ---- configuration -------------------------------------------------------

void ExperimentConfig::validate() const {
  if (datasets.empty()) throw std::invalid_argument("no datasets configured");
  if (removal_grid.empty() || modes.empty() || prior_fractions.empty()) {
    throw std::invalid_argument("grids must be nonempty");
  }
  for (double r : removal_grid) {
    if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument("removal fractions must lie in [0,1)");
  }
  for (double f : prior_fractions) {
    if (!(f > 0.0 && f + prior_val_fraction < 1.0)) throw std::invalid_argument("prior fraction out of range");
  }
  if (seeds == 0) throw std::invalid_argument("seeds must be positive");
  if (hidden_width == 0 || batch_size == 0) throw std::invalid_argument("sizes must be positive");
  if (mc_samples == 0 || eval_samples == 0) throw std::invalid_argument("sample counts must be positive");
  if (!(sigma0 > 0.0)) throw std::invalid_argument("sigma0 must be positive");
  if (mc_workers == 0 || cell_workers == 0) throw std::invalid_argument("worker counts must be positive");
  confidence.validate();
  erm_config(0).validate();
  pnn_config(0, 1, 1).validate();
}

ExperimentConfig ExperimentConfig::for_profile(std::string_view profile) {
  ExperimentConfig c;
  if (profile == "full") return c;
  if (profile == "desk") {
    c.profile = "desk";
    c.mc_samples = 10000;
    c.prior_epochs = 100;
    c.posterior_epochs = 30;
    c.erm_epochs = 150;
    return c;
  }
  throw std::invalid_argument("unknown profile '" + std::string(profile) + "'");
}

TrainConfigErm ExperimentConfig::erm_config(std::uint64_t seed) const {
  TrainConfigErm c;
  c.epochs = erm_epochs;
  c.batch_size = batch_size;
  c.learning_rate = learning_rate;
  c.momentum = momentum;
  c.dropout_rate = dropout_rate;
  c.dropout_inputs = dropout_inputs;
  c.loss = LossSpec{p_min, erm_loss};
  c.seed = seed;
  return c;
}

PriorSpec ExperimentConfig::prior_spec() const {
  PriorSpec s;
  s.sigma0 = sigma0;
  s.mean_training = erm_config(0);
  s.mean_training.epochs = prior_epochs;
  s.mean_training.loss = LossSpec{p_min, prior_loss};
  return s;
}

TrainConfigPnn ExperimentConfig::pnn_config(std::uint64_t seed, std::size_t n_full, std::size_t n_cert) const {
  TrainConfigPnn c;
  c.epochs = posterior_epochs;
  c.batch_size = batch_size;
  c.learning_rate = learning_rate;
  c.momentum = momentum;
  c.n_for_objective = objective_n == ObjectiveN::Full ? n_full : n_cert;
  c.delta = confidence.delta;
  c.p_min = p_min;
  c.seed = seed;
  return c;
}

json to_json(const ExperimentConfig& c) {
  json modes = json::array();
  for (Mode m : c.modes) modes.push_back(std::string(to_string(m)));
  return json{
      {"datasets", c.datasets},
      {"label_column", c.label_column},
      {"removal_grid", c.removal_grid},
      {"modes", modes},
      {"prior_fractions", c.prior_fractions},
      {"seeds", c.seeds},
      {"base_seed", c.base_seed},
      {"test_fraction", c.test_fraction},
      {"prior_val_fraction", c.prior_val_fraction},
      {"stratified_removal", c.stratified_removal},
      {"hidden_width", c.hidden_width},
      {"sigma0", c.sigma0},
      {"prior_epochs", c.prior_epochs},
      {"posterior_epochs", c.posterior_epochs},
      {"erm_epochs", c.erm_epochs},
      {"batch_size", c.batch_size},
      {"learning_rate", c.learning_rate},
      {"momentum", c.momentum},
      {"dropout_rate", c.dropout_rate},
      {"dropout_inputs", c.dropout_inputs},
      {"erm_loss", std::string(loss_name(c.erm_loss))},
      {"prior_loss", std::string(loss_name(c.prior_loss))},
      {"p_min", c.p_min},
      {"objective_n", std::string(objective_n_name(c.objective_n))},
      {"delta", c.confidence.delta},
      {"delta_prime", c.confidence.delta_prime},
      {"delta_test", c.confidence.delta_test},
      {"mc_samples", c.mc_samples},
      {"eval_samples", c.eval_samples},
      {"certify_xent", c.certify_xent},
      {"mc_workers", c.mc_workers},
      {"cell_workers", c.cell_workers},
      {"profile", c.profile},
      {"output_dir", c.output_dir},
      {"cache_dir", c.cache_dir},
  };
}

void apply_json(ExperimentConfig& c, const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  if (j.contains("profile")) {
    const std::string p = j.at("profile").get<std::string>();
    if (p != c.profile) {
      ExperimentConfig fresh = ExperimentConfig::for_profile(p);
      fresh.datasets = c.datasets;
      fresh.output_dir = c.output_dir;
      fresh.cache_dir = c.cache_dir;
      c = fresh;
    }
  }
  for (const auto& [key, v] : j.items()) {
    if (key == "profile") continue;
    if (key == "datasets") {
      c.datasets = v.is_string() ? std::vector<std::string>{v.get<std::string>()} : v.get<std::vector<std::string>>();
    } else if (key == "label_column") {
      c.label_column = v.is_string() ? v.get<std::string>() : std::to_string(v.get<long long>());
    } else if (key == "removal_grid") {
      c.removal_grid = v.get<std::vector<double>>();
    } else if (key == "modes") {
      c.modes.clear();
      for (const auto& m : v) c.modes.push_back(parse_mode(m.get<std::string>()));
    } else if (key == "prior_fractions") {
      c.prior_fractions = v.get<std::vector<double>>();
    } else if (key == "seeds") {
      c.seeds = v.get<std::size_t>();
    } else if (key == "base_seed") {
      c.base_seed = v.get<std::uint64_t>();
    } else if (key == "test_fraction") {
      c.test_fraction = v.get<double>();
    } else if (key == "prior_val_fraction") {
      c.prior_val_fraction = v.get<double>();
    } else if (key == "stratified_removal") {
      c.stratified_removal = v.get<bool>();
    } else if (key == "hidden_width") {
      c.hidden_width = v.get<std::size_t>();
    } else if (key == "sigma0") {
      c.sigma0 = v.get<double>();
    } else if (key == "prior_epochs") {
      c.prior_epochs = v.get<std::size_t>();
    } else if (key == "posterior_epochs") {
      c.posterior_epochs = v.get<std::size_t>();
    } else if (key == "erm_epochs") {
      c.erm_epochs = v.get<std::size_t>();
    } else if (key == "batch_size") {
      c.batch_size = v.get<std::size_t>();
    } else if (key == "learning_rate") {
      c.learning_rate = v.get<double>();
    } else if (key == "momentum") {
      c.momentum = v.get<double>();
    } else if (key == "dropout_rate") {
      c.dropout_rate = v.get<double>();
    } else if (key == "dropout_inputs") {
      c.dropout_inputs = v.get<bool>();
    } else if (key == "erm_loss") {
      c.erm_loss = parse_loss(v.get<std::string>());
    } else if (key == "prior_loss") {
      c.prior_loss = parse_loss(v.get<std::string>());
    } else if (key == "p_min") {
      c.p_min = v.get<double>();
    } else if (key == "objective_n") {
      c.objective_n = parse_objective_n(v.get<std::string>());
    } else if (key == "delta") {
      c.confidence.delta = v.get<double>();
    } else if (key == "delta_prime") {
      c.confidence.delta_prime = v.get<double>();
    } else if (key == "delta_test") {
      c.confidence.delta_test = v.get<double>();
    } else if (key == "mc_samples") {
      c.mc_samples = v.get<std::size_t>();
    } else if (key == "eval_samples") {
      c.eval_samples = v.get<std::size_t>();
    } else if (key == "certify_xent") {
      c.certify_xent = v.get<bool>();
    } else if (key == "mc_workers") {
      c.mc_workers = v.get<std::size_t>();
    } else if (key == "cell_workers") {
      c.cell_workers = v.get<std::size_t>();
    } else if (key == "output_dir") {
      c.output_dir = v.get<std::string>();
    } else if (key == "cache_dir") {
      c.cache_dir = v.get<std::string>();
    } else {
      throw std::invalid_argument("unknown config key '" + key + "'");
    }
  }
}

json profile_deviations(const ExperimentConfig& cfg) {
  const json base = to_json(ExperimentConfig{});
  const json mine = to_json(cfg);
  json out = json::object();
  for (const char* key : {"removal_grid", "modes", "prior_fractions", "seeds", "test_fraction",
                          "prior_val_fraction", "stratified_removal", "hidden_width", "sigma0", "prior_epochs",
                          "posterior_epochs", "erm_epochs", "batch_size", "learning_rate", "momentum",
                          "dropout_rate", "dropout_inputs", "erm_loss", "prior_loss", "delta", "delta_prime", "delta_test", "mc_samples",
                          "eval_samples"}) {
    if (mine.at(key) != base.at(key)) out[key] = mine.at(key);
  }
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  for (const char* key : {"mc_workers", "cell_workers", "output_dir", "cache_dir"}) j.erase(key);
  return sha256_hex(j.dump()).substr(0, 16);
}

// ---- data ----------------------------------------------------------------

Dataset load_dataset(const std::string& source, const ExperimentConfig& cfg) {
  if (source.rfind("openml:", 0) == 0) {
    const int id = std::stoi(source.substr(7));
    FetchOptions opts;
    opts.label_column = cfg.label_column;
    return fetch_openml(id, cfg.cache_dir, opts).data;
  }
  if (source.rfind("synthetic:blobs", 0) == 0) {
    std::size_t n = 2000;
    std::size_t dim = 2;
    double distance = 2.5631031310892007;  // Bayes error 0.1 at unit noise
    double sd = 1.0;
    std::uint64_t seed = 0;
    std::istringstream is(source.substr(std::string("synthetic:blobs").size()));
    std::string kv;
    while (std::getline(is, kv, ':')) {
      if (kv.empty()) continue;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("bad blobs parameter '" + kv + "'");
      const std::string k = kv.substr(0, eq);
      const std::string v = kv.substr(eq + 1);
      if (k == "n") n = std::stoull(v);
      else if (k == "dim") dim = std::stoull(v);
      else if (k == "distance") distance = std::stod(v);
      else if (k == "sd") sd = std::stod(v);
      else if (k == "seed") seed = std::stoull(v);
      else throw std::invalid_argument("unknown blobs parameter '" + k + "'");
    }
    return GaussianBlobs::two_class(dim, distance, sd).sample(n, seed, sanitize(source));
  }
  return load_csv(source, cfg.label_column);
}

CellData prepare_cell(const ExperimentConfig& cfg, const Dataset& raw, double removal, Mode mode,
                      std::uint64_t seed, double prior_fraction) {
  SplitSpec spec;
  spec.test_fraction = cfg.test_fraction;
  spec.prior_fraction = prior_fraction;
  spec.prior_val_fraction = cfg.prior_val_fraction;
  spec.removal_fraction = removal;
  spec.mode = mode;
  spec.seed = seed;
  spec.stratified_removal = cfg.stratified_removal;

  CellData cell;
  cell.partition = make_partitions(raw, spec);
  Partition& p = cell.partition;
  const std::vector<std::size_t> fit_on = mode == Mode::TraditionalErm ? p.s_full : merged(p.s_pri, p.s_prival);
  cell.standardizer = Standardizer::fit(subset(p.data, fit_on));
  p.data = cell.standardizer.apply(p.data);
  cell.s_full = subset(p.data, p.s_full);
  if (!p.test.empty()) cell.test = subset(p.data, p.test);
  if (mode != Mode::TraditionalErm) {
    cell.s_pri = subset(p.data, p.s_pri);
    cell.s_prival = subset(p.data, p.s_prival);
    cell.s_cert = subset(p.data, p.s_cert);
  }
  return cell;
}

std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, {stream_tag("init")}); }
std::uint64_t mc_seed(std::uint64_t seed) { return derive_seed(seed, {stream_tag("certify")}); }
std::uint64_t eval_seed(std::uint64_t seed) { return derive_seed(seed, {stream_tag("evaluate")}); }

namespace {

FcnArchitecture cell_arch(const ExperimentConfig& cfg, const Dataset& ds) {
  return FcnArchitecture::standard(ds.dim(), ds.class_count, cfg.hidden_width);
}

}  // namespace

PnnModels train_pnn_models(const ExperimentConfig& cfg, const CellData& cell, std::uint64_t seed) {
  const FcnArchitecture arch = cell_arch(cfg, cell.s_full);
  PnnModels m;
  m.prior = init_prior(arch, cfg.prior_spec(), cell.s_pri, cell.s_prival, init_seed(seed));
  const TrainConfigPnn pc =
      cfg.pnn_config(derive_seed(seed, {stream_tag("posterior")}), cell.s_full.size(), cell.s_cert.size());
  m.posterior = train_posterior(cell.s_full, m.prior, pc);
  return m;
}

WeightSet train_erm_model(const ExperimentConfig& cfg, const CellData& cell, std::uint64_t seed) {
  const FcnArchitecture arch = cell_arch(cfg, cell.s_full);
  return erm_train(cell.s_full, cfg.erm_config(derive_seed(seed, {stream_tag("erm")})),
                   init_weights(arch, init_seed(seed)));
}

RiskCertificate certify_models(const ExperimentConfig& cfg, const CellData& cell, const PnnModels& models,
                               std::uint64_t seed) {
  CertifyOptions opts;
  opts.mc.workers = cfg.mc_workers;
  opts.certify_xent = cfg.certify_xent;
  opts.p_min = cfg.p_min;
  return compute_certificate(models.posterior, models.prior, cell.partition, cfg.confidence, cfg.mc_samples,
                             mc_seed(seed), opts);
}

// ---- cells ---------------------------------------------------------------

CellResult run_cell(const ExperimentConfig& cfg, const Dataset& raw, double removal, Mode mode,
                    std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  CellResult out;
  ResultsRow& row = out.row;
  row.dataset = sanitize(raw.name);
  row.removal_fraction = removal;
  row.mode = mode;
  row.seed = seed;
  try {
    if (mode == Mode::TraditionalErm) {
      const CellData cell = prepare_cell(cfg, raw, removal, mode, seed, cfg.prior_fractions.front());
      const WeightSet w = train_erm_model(cfg, cell, seed);
      const TestSetBounds tb = test_set_bounds(w, cell.test, cfg.confidence.delta_test);
      row.mean_test_err = tb.test_err_01;
      row.chernoff = tb.chernoff.value;
      row.binomial = tb.binomial.value;
      row.n_test = static_cast<double>(tb.n_test);
    } else {
      struct Best {
        double fraction;
        CellData cell;
        PnnModels models;
        RiskCertificate cert;
      };
      std::optional<Best> best;
      for (double f : cfg.prior_fractions) {
        CellData cell = prepare_cell(cfg, raw, removal, mode, seed, f);
        PnnModels models = train_pnn_models(cfg, cell, seed);
        RiskCertificate cert = certify_models(cfg, cell, models, seed);
        out.selection.push_back({f, cert.final_bound});
        if (!best || cert.final_bound < best->cert.final_bound) {
          best = Best{f, std::move(cell), std::move(models), std::move(cert)};
        }
      }
      row.prior_fraction = best->fraction;
      row.mc_avg = best->cert.mc_avg_01;
      row.kl_div = best->cert.kl_div;
      row.certificate = best->cert.final_bound;
      row.quad_bound = best->cert.quad_bound;
      row.n_cert = static_cast<double>(best->cert.n_cert);
      row.m = static_cast<double>(best->cert.m_samples);
      if (mode == Mode::TraditionalPnn) {
        McOptions mc;
        mc.workers = cfg.mc_workers;
        const EvalReport ev =
            evaluate_posterior(best->models.posterior, best->cell.test, cfg.eval_samples, eval_seed(seed), mc);
        row.stochastic_test_err = ev.stochastic_test_err_01;
        row.mean_test_err = ev.posterior_mean_test_err_01;
        row.n_test = static_cast<double>(best->cell.test.size());
      }
    }
  } catch (const std::exception& e) {
    const ResultsRow keep = row;
    row = ResultsRow{};
    row.dataset = keep.dataset;
    row.removal_fraction = keep.removal_fraction;
    row.mode = keep.mode;
    row.seed = keep.seed;
    row.status = sanitize(std::string("failed: ") + e.what());
    out.selection.clear();
  }
  row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---- CSV -----------------------------------------------------------------

const std::vector<std::string>& results_header() {
  static const std::vector<std::string> h = {
      "dataset", "removal_fraction", "mode",   "seed",     "prior_fraction", "stochastic_test_err",
      "mean_test_err", "mc_avg",     "kl_div", "certificate", "quad_bound",  "chernoff",
      "binomial", "n_cert",          "n_test", "m",        "wall_time",      "status"};
  return h;
}

void write_results_csv(std::ostream& out, const std::vector<ResultsRow>& rows) {
  const auto& h = results_header();
  for (std::size_t i = 0; i < h.size(); ++i) out << (i ? "," : "") << h[i];
  out << '\n';
  for (const ResultsRow& r : rows) {
    out << sanitize(r.dataset) << ',' << fmt_double(r.removal_fraction) << ',' << to_string(r.mode) << ','
        << r.seed << ',' << fmt_opt(r.prior_fraction) << ',' << fmt_opt(r.stochastic_test_err) << ','
        << fmt_opt(r.mean_test_err) << ',' << fmt_opt(r.mc_avg) << ',' << fmt_opt(r.kl_div) << ','
        << fmt_opt(r.certificate) << ',' << fmt_opt(r.quad_bound) << ',' << fmt_opt(r.chernoff) << ','
        << fmt_opt(r.binomial) << ',' << fmt_opt(r.n_cert) << ',' << fmt_opt(r.n_test) << ',' << fmt_opt(r.m)
        << ',' << fmt_double(r.wall_time) << ',' << sanitize(r.status) << '\n';
  }
}

std::vector<ResultsRow> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("results file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const std::string& name : results_header()) {
    if (!col.contains(name)) throw DataError("missing column '" + name + "'", 1);
  }
  std::vector<ResultsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size()) throw DataError("wrong number of cells", line_no);
    auto cell = [&](const char* name) -> const std::string& { return cells[col.at(name)]; };
    ResultsRow r;
    r.dataset = cell("dataset");
    r.removal_fraction = parse_double(cell("removal_fraction"), line_no);
    r.mode = parse_mode(cell("mode"));
    r.seed = std::stoull(cell("seed"));
    r.prior_fraction = parse_opt(cell("prior_fraction"), line_no);
    r.stochastic_test_err = parse_opt(cell("stochastic_test_err"), line_no);
    r.mean_test_err = parse_opt(cell("mean_test_err"), line_no);
    r.mc_avg = parse_opt(cell("mc_avg"), line_no);
    r.kl_div = parse_opt(cell("kl_div"), line_no);
    r.certificate = parse_opt(cell("certificate"), line_no);
    r.quad_bound = parse_opt(cell("quad_bound"), line_no);
    r.chernoff = parse_opt(cell("chernoff"), line_no);
    r.binomial = parse_opt(cell("binomial"), line_no);
    r.n_cert = parse_opt(cell("n_cert"), line_no);
    r.n_test = parse_opt(cell("n_test"), line_no);
    r.m = parse_opt(cell("m"), line_no);
    r.wall_time = parse_double(cell("wall_time"), line_no);
    r.status = cell("status");
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- aggregation ---------------------------------------------------------

Interval normal_interval(const std::vector<double>& values) {
  Interval iv;
  iv.n = values.size();
  if (values.empty()) return iv;
  double sum = 0.0;
  for (double v : values) sum += v;
  iv.mean = sum / static_cast<double>(iv.n);
  if (iv.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - iv.mean) * (v - iv.mean);
    iv.se = std::sqrt(ss / static_cast<double>(iv.n - 1)) / std::sqrt(static_cast<double>(iv.n));
  }
  iv.ci_low = iv.mean - 1.96 * iv.se;
  iv.ci_high = iv.mean + 1.96 * iv.se;
  return iv;
}

std::vector<SummaryRow> summarize(const std::vector<ResultsRow>& rows) {
  const std::vector<std::string> names = dataset_order(rows);
  using Key = std::tuple<std::size_t, double, int>;
  std::map<Key, std::vector<const ResultsRow*>> groups;
  for (const ResultsRow& r : rows) {
    if (!r.ok()) continue;
    const auto d = static_cast<std::size_t>(std::find(names.begin(), names.end(), r.dataset) - names.begin());
    groups[{d, r.removal_fraction, static_cast<int>(r.mode)}].push_back(&r);
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, members] : groups) {
    for (const Metric& m : metrics()) {
      std::vector<double> values;
      for (const ResultsRow* r : members) {
        if (auto v = m.get(*r)) values.push_back(*v);
      }
      if (values.empty()) continue;
      const Interval iv = normal_interval(values);
      SummaryRow s;
      s.dataset = names[std::get<0>(key)];
      s.removal_fraction = std::get<1>(key);
      s.mode = static_cast<Mode>(std::get<2>(key));
      s.metric = m.name;
      s.n = iv.n;
      s.mean = iv.mean;
      s.se = iv.se;
      s.ci_low = iv.ci_low;
      s.ci_high = iv.ci_high;
      out.push_back(std::move(s));
    }
  }
  return out;
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "dataset,removal_fraction,mode,metric,n,mean,se,ci_low,ci_high\n";
  for (const SummaryRow& s : rows) {
    out << sanitize(s.dataset) << ',' << fmt_double(s.removal_fraction) << ',' << to_string(s.mode) << ','
        << s.metric << ',' << s.n << ',' << fmt_double(s.mean) << ',' << fmt_double(s.se) << ','
        << fmt_double(s.ci_low) << ',' << fmt_double(s.ci_high) << '\n';
  }
}

// ---- sweep ---------------------------------------------------------------

AblateOutput ablate(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::string started = utc_now();
  std::vector<Dataset> data;
  data.reserve(cfg.datasets.size());
  for (const std::string& src : cfg.datasets) data.push_back(load_dataset(src, cfg));

  struct Cell {
    std::size_t dataset;
    double removal;
    Mode mode;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t d = 0; d < data.size(); ++d) {
    for (double r : cfg.removal_grid) {
      for (Mode m : cfg.modes) {
        for (std::size_t s = 0; s < cfg.seeds; ++s) cells.push_back({d, r, m, cfg.base_seed + s});
      }
    }
  }

  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const Cell& c = cells[i];
      results[i] = run_cell(cfg, data[c.dataset], c.removal, c.mode, c.seed);
      std::lock_guard lock(log_mutex);
      std::fprintf(stderr, "[%zu/%zu] %s removal=%g %s seed=%llu %s (%.1fs)\n", i + 1, cells.size(),
                   results[i].row.dataset.c_str(), c.removal, std::string(to_string(c.mode)).c_str(),
                   static_cast<unsigned long long>(c.seed), results[i].row.status.c_str(),
                   results[i].row.wall_time);
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t workers = std::min(cfg.cell_workers, std::max<std::size_t>(cells.size(), 1));
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }

  AblateOutput out;
  for (const CellResult& r : results) out.rows.push_back(r.row);
  out.summary = summarize(out.rows);

  if (cfg.output_dir.empty()) return out;
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "results.csv");
    write_results_csv(f, out.rows);
  }
  {
    std::ofstream f(dir / "summary.csv");
    write_summary_csv(f, out.summary);
  }
  {
    std::ofstream f(dir / "selection.csv");
    f << "dataset,removal_fraction,mode,seed,prior_fraction,certificate,selected\n";
    for (const CellResult& r : results) {
      for (const SelectionEntry& e : r.selection) {
        const bool chosen = r.row.prior_fraction && *r.row.prior_fraction == e.prior_fraction;
        f << sanitize(r.row.dataset) << ',' << fmt_double(r.row.removal_fraction) << ',' << to_string(r.row.mode)
          << ',' << r.row.seed << ',' << fmt_double(e.prior_fraction) << ',' << fmt_double(e.certificate) << ','
          << (chosen ? 1 : 0) << '\n';
      }
    }
  }
  write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");

  std::size_t failed = 0;
  for (const ResultsRow& r : out.rows) failed += r.ok() ? 0 : 1;
  json ds = json::array();
  for (std::size_t d = 0; d < data.size(); ++d) {
    ds.push_back({{"source", cfg.datasets[d]},
                  {"name", data[d].name},
                  {"n", data[d].size()},
                  {"features", data[d].dim()},
                  {"classes", data[d].class_count}});
  }
  const json meta = {
      {"config_hash", config_hash(cfg)},
      {"profile", cfg.profile},
      {"deviations_from_full_profile", profile_deviations(cfg)},
      {"p_min", cfg.p_min},
      {"datasets", ds},
      {"cells", out.rows.size()},
      {"failed_cells", failed},
      {"prior_fraction_selection",
       "smallest certificate over the prior_fractions grid; no union bound over the grid (see selection.csv)"},
      {"started", started},
      {"finished", utc_now()},
  };
  write_file(dir / "metadata.json", meta.dump(2) + "\n");
  return out;
}

// ---- figures -------------------------------------------------------------

FigureData figure_data(const std::vector<ResultsRow>& rows) {
  struct Series {
    const char* name;
    Mode mode;
    std::optional<double> (*get)(const ResultsRow&);
  };
  const std::vector<Series> left = {
      {"erm_test_err", Mode::TraditionalErm, [](const ResultsRow& r) { return r.mean_test_err; }},
      {"pnn_stochastic_test_err", Mode::TraditionalPnn, [](const ResultsRow& r) { return r.stochastic_test_err; }},
      {"pnn_mean_test_err", Mode::TraditionalPnn, [](const ResultsRow& r) { return r.mean_test_err; }},
  };
  const std::vector<Series> right = {
      {"certificate_self_certified", Mode::SelfCertified, [](const ResultsRow& r) { return r.certificate; }},
      {"certificate_traditional", Mode::TraditionalPnn, [](const ResultsRow& r) { return r.certificate; }},
  };
  const std::vector<Series> bounds = {
      {"certificate_self_certified", Mode::SelfCertified, [](const ResultsRow& r) { return r.certificate; }},
      {"chernoff_erm", Mode::TraditionalErm, [](const ResultsRow& r) { return r.chernoff; }},
      {"binomial_erm", Mode::TraditionalErm, [](const ResultsRow& r) { return r.binomial; }},
      {"erm_test_err", Mode::TraditionalErm, [](const ResultsRow& r) { return r.mean_test_err; }},
  };

  std::vector<std::string> names = dataset_order(rows);
  std::vector<double> removals;
  for (const ResultsRow& r : rows) removals.push_back(r.removal_fraction);
  std::sort(removals.begin(), removals.end());
  removals.erase(std::unique(removals.begin(), removals.end()), removals.end());

  auto build = [&](const std::vector<Series>& series) {
    std::vector<FigureRow> out;
    std::vector<std::string> scopes = names;
    if (!names.empty()) scopes.push_back("all");
    for (const std::string& scope : scopes) {
      for (const Series& s : series) {
        for (double removal : removals) {
          std::vector<double> values;
          for (const ResultsRow& r : rows) {
            if (!r.ok() || r.mode != s.mode || r.removal_fraction != removal) continue;
            if (scope != "all" && r.dataset != scope) continue;
            if (auto v = s.get(r)) values.push_back(*v);
          }
          if (values.empty()) continue;
          out.push_back({scope, s.name, removal, normal_interval(values)});
        }
      }
    }
    return out;
  };
  return FigureData{build(left), build(right), build(bounds)};
}

void write_figure_csv(std::ostream& out, const std::vector<FigureRow>& rows) {
  out << "dataset,series,removal,n,mean,ci_low,ci_high\n";
  for (const FigureRow& r : rows) {
    out << sanitize(r.dataset) << ',' << r.series << ',' << fmt_double(r.removal_fraction) << ','
        << r.interval.n << ',' << fmt_double(r.interval.mean) << ',' << fmt_double(r.interval.ci_low) << ','
        << fmt_double(r.interval.ci_high) << '\n';
  }
}

void report(const std::string& results_csv, const std::string& out_dir) {
  std::ifstream in(results_csv);
  if (!in) throw DataError("cannot open " + results_csv);
  const std::vector<ResultsRow> rows = read_results_csv(in);
  const FigureData fig = figure_data(rows);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  const std::pair<const char*, const std::vector<FigureRow>*> files[] = {
      {"test_error.csv", &fig.test_error},
      {"certificates.csv", &fig.certificates},
      {"certificate_vs_test_bounds.csv", &fig.certificate_vs_test_bounds}};
  for (const auto& [name, data] : files) {
    std::ofstream f(dir / name);
    write_figure_csv(f, *data);
  }
  std::size_t failed = 0;
  for (const ResultsRow& r : rows) failed += r.ok() ? 0 : 1;
  const json meta = {
      {"source", results_csv},
      {"rows", rows.size()},
      {"failed_rows", failed},
      {"datasets", dataset_order(rows)},
      {"pooled_scope", "all: every listed dataset and seed pooled per removal level"},
      {"interval", "mean +- 1.96 standard errors over runs"},
      {"series",
       {{"test_error", {"erm_test_err", "pnn_stochastic_test_err", "pnn_mean_test_err"}},
        {"certificates", {"certificate_self_certified", "certificate_traditional"}},
        {"certificate_vs_test_bounds", {"certificate_self_certified", "chernoff_erm", "binomial_erm", "erm_test_err"}}}},
  };
  write_file(dir / "report_metadata.json", meta.dump(2) + "\n");
}

}  // namespace pbcert
