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

#include "pbcert/pnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ios>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <utility>

#include "pbcert/bound_math.hpp"

namespace pbcert {
namespace {

constexpr const char* kDistributionMagic = "pbcert-distribution";
constexpr const char* kWeightsMagic = "pbcert-weights";
constexpr int kFormatVersion = 1;

void check_same_shape(const GaussianWeightDist& q, const GaussianWeightDist& p) {
  if (!(q.arch == p.arch) || q.mu.size() != p.mu.size()) {
    throw std::invalid_argument("distributions have different shapes");
  }
}

// Token-level reader for the text formats. Hex floats go through strtod since
// iostreams do not parse them.
class TokenReader {
 public:
  explicit TokenReader(std::istream& in) : in_(in) {}

  std::string word() {
    std::string s;
    if (!(in_ >> s)) throw std::runtime_error("unexpected end of file");
    return s;
  }

  void expect(const std::string& key) {
    const std::string got = word();
    if (got != key) throw std::runtime_error("expected '" + key + "' but found '" + got + "'");
  }

  double real() {
    const std::string s = word();
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw std::runtime_error("malformed number '" + s + "'");
    return v;
  }

  std::uint64_t count() {
    const std::string s = word();
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0') throw std::runtime_error("malformed integer '" + s + "'");
    return v;
  }

 private:
  std::istream& in_;
};

void write_layers(std::ostream& out, const FcnArchitecture& arch) {
  out << "layers";
  for (std::size_t s : arch.layer_sizes()) out << ' ' << s;
  out << '\n';
}

FcnArchitecture read_layers(TokenReader& r) {
  r.expect("layers");
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i <= FcnArchitecture::kWeightLayers; ++i) sizes.push_back(r.count());
  return FcnArchitecture(std::move(sizes));
}

void read_header(TokenReader& r, const char* magic) {
  r.expect(magic);
  const auto version = r.count();
  if (version != kFormatVersion) {
    throw std::runtime_error("unsupported format version " + std::to_string(version));
  }
}

}  // namespace

double softplus(double rho) {
  return rho > 20.0 ? rho + std::log1p(std::exp(-rho)) : std::log1p(std::exp(rho));
}

double inverse_softplus(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  return sigma > 20.0 ? sigma + std::log(-std::expm1(-sigma)) : std::log(std::expm1(sigma));
}

double sigmoid(double rho) {
  if (rho >= 0.0) return 1.0 / (1.0 + std::exp(-rho));
  const double e = std::exp(rho);
  return e / (1.0 + e);
}

GaussianWeightDist::GaussianWeightDist(FcnArchitecture a, Eigen::VectorXd mean, Eigen::VectorXd rho_values)
    : arch(std::move(a)), mu(std::move(mean)), rho(std::move(rho_values)) {
  if (static_cast<std::size_t>(mu.size()) != arch.parameter_count() || mu.size() != rho.size()) {
    throw std::invalid_argument("distribution parameters do not match architecture");
  }
}

GaussianWeightDist GaussianWeightDist::around(const WeightSet& mean, double sigma) {
  const double r = inverse_softplus(sigma);
  return {mean.architecture(), mean.values(), Eigen::VectorXd::Constant(mean.values().size(), r)};
}

Eigen::VectorXd GaussianWeightDist::sigma() const {
  return rho.unaryExpr([](double r) { return softplus(r); });
}

GaussianWeightDist init_prior(const FcnArchitecture& arch, const PriorSpec& spec, const Dataset& s_pri,
                              const Dataset& s_prival, std::uint64_t seed) {
  if (!(spec.sigma0 > 0.0)) throw std::invalid_argument("prior scale must be positive");
  WeightSet init = init_weights(arch, seed);
  if (spec.mode == PriorMode::RandomMean) return GaussianWeightDist::around(init, spec.sigma0);
  if (s_pri.empty()) throw std::invalid_argument("a learned prior mean needs nonempty prior data");
  TrainConfigErm cfg = spec.mean_training;
  cfg.seed = derive_seed(seed, {stream_tag("prior_mean")});
  const WeightSet mean = erm_train(s_pri, cfg, init, &s_prival);
  return GaussianWeightDist::around(mean, spec.sigma0);
}

GaussianWeightDist init_posterior_from_prior(const GaussianWeightDist& prior) { return prior; }

WeightSample sample_weights(const GaussianWeightDist& q, Engine& engine) {
  Eigen::VectorXd noise(q.mu.size());
  NormalSampler normal(engine);
  normal.fill(noise);
  return sample_weights(q, std::move(noise));
}

WeightSample sample_weights(const GaussianWeightDist& q, Eigen::VectorXd noise) {
  if (noise.size() != q.mu.size()) throw std::invalid_argument("noise does not match distribution");
  Eigen::VectorXd w = q.mu + q.sigma().cwiseProduct(noise);
  return {WeightSet(q.arch, std::move(w)), std::move(noise)};
}

double kl_gaussian_diag(const GaussianWeightDist& q, const GaussianWeightDist& p) {
  check_same_shape(q, p);
  double kl = 0.0;
  for (Eigen::Index i = 0; i < q.mu.size(); ++i) {
    const double sq = softplus(q.rho[i]);
    const double sp = softplus(p.rho[i]);
    const double dm = q.mu[i] - p.mu[i];
    kl += std::log(sp / sq) + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
  }
  return std::max(kl, 0.0);
}

void kl_gaussian_diag_grad(const GaussianWeightDist& q, const GaussianWeightDist& p,
                           Eigen::VectorXd& grad_mu, Eigen::VectorXd& grad_rho) {
  check_same_shape(q, p);
  grad_mu.resize(q.mu.size());
  grad_rho.resize(q.mu.size());
  for (Eigen::Index i = 0; i < q.mu.size(); ++i) {
    const double sq = softplus(q.rho[i]);
    const double sp = softplus(p.rho[i]);
    grad_mu[i] = (q.mu[i] - p.mu[i]) / (sp * sp);
    grad_rho[i] = (sq / (sp * sp) - 1.0 / sq) * sigmoid(q.rho[i]);
  }
}

void TrainConfigPnn::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0,1)");
  if (n_for_objective == 0) throw std::invalid_argument("objective sample size must be positive");
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0,1)");
  if (!(p_min > 0.0 && p_min < 1.0)) throw std::invalid_argument("p_min must lie in (0,1)");
}

ObjectiveValue fquad_objective(const GaussianWeightDist& q, const GaussianWeightDist& prior,
                               const Eigen::Ref<const Eigen::MatrixXd>& x, std::span<const int> y,
                               const TrainConfigPnn& cfg, Engine& engine) {
  Eigen::VectorXd noise(q.mu.size());
  NormalSampler normal(engine);
  normal.fill(noise);
  return fquad_objective(q, prior, x, y, cfg, noise);
}

ObjectiveValue fquad_objective(const GaussianWeightDist& q, const GaussianWeightDist& prior,
                               const Eigen::Ref<const Eigen::MatrixXd>& x, std::span<const int> y,
                               const TrainConfigPnn& cfg, const Eigen::VectorXd& noise) {
  if (y.empty()) throw std::invalid_argument("empty batch");
  const WeightSample sample = sample_weights(q, noise);
  const LossGrad emp = backprop(sample.weights, x, y, LossSpec{cfg.p_min, LossKind::BoundedCrossEntropy});

  ObjectiveValue out;
  out.empirical = emp.loss;
  out.kl = kl_gaussian_diag(q, prior);
  out.b_term = 0.5 * pac_bayes_budget(out.kl, cfg.n_for_objective, cfg.delta);
  out.objective = quadratic_form(out.empirical, out.b_term);

  const double root_total = std::sqrt(out.empirical + out.b_term);
  const double root_b = std::sqrt(out.b_term);
  const double d_emp = (root_total + root_b) / root_total;
  const double d_kl = (root_total + root_b) * (1.0 / root_total + 1.0 / root_b) /
                      (2.0 * static_cast<double>(cfg.n_for_objective));

  Eigen::VectorXd kl_mu;
  Eigen::VectorXd kl_rho;
  kl_gaussian_diag_grad(q, prior, kl_mu, kl_rho);
  const Eigen::VectorXd dsigma = q.rho.unaryExpr([](double r) { return sigmoid(r); });
  out.grad_mu = d_emp * emp.grad + d_kl * kl_mu;
  out.grad_rho = d_emp * emp.grad.cwiseProduct(noise).cwiseProduct(dsigma) + d_kl * kl_rho;
  return out;
}

GaussianWeightDist train_posterior(const Dataset& train_set, const GaussianWeightDist& prior,
                                   const TrainConfigPnn& cfg, PnnTrace* trace) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  if (train_set.dim() != prior.arch.input_dim()) {
    throw std::invalid_argument("dataset dimension does not match architecture");
  }
  if (trace != nullptr) *trace = PnnTrace{};
  GaussianWeightDist q = init_posterior_from_prior(prior);
  if (cfg.epochs == 0) return q;

  const std::size_t n = train_set.size();
  const auto dim = static_cast<Eigen::Index>(train_set.dim());
  Eigen::VectorXd vel_mu = Eigen::VectorXd::Zero(q.mu.size());
  Eigen::VectorXd vel_rho = Eigen::VectorXd::Zero(q.mu.size());
  Engine engine = make_engine(cfg.seed, {stream_tag("train_posterior")});
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  Eigen::MatrixXd xb;
  std::vector<int> yb;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), engine);
    double objective_sum = 0.0;
    double last_kl = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, n - start);
      xb.resize(dim, static_cast<Eigen::Index>(nb));
      yb.resize(nb);
      for (std::size_t j = 0; j < nb; ++j) {
        xb.col(static_cast<Eigen::Index>(j)) = train_set.features.col(static_cast<Eigen::Index>(order[start + j]));
        yb[j] = train_set.labels[order[start + j]];
      }
      ObjectiveValue obj = fquad_objective(q, prior, xb, yb, cfg, engine);
      if (cfg.max_grad_norm > 0.0) {
        const double norm = std::sqrt(obj.grad_mu.squaredNorm() + obj.grad_rho.squaredNorm());
        if (norm > cfg.max_grad_norm) {
          obj.grad_mu *= cfg.max_grad_norm / norm;
          obj.grad_rho *= cfg.max_grad_norm / norm;
        }
      }
      sgd_momentum_step(q.mu, obj.grad_mu, vel_mu, cfg.learning_rate, cfg.momentum);
      sgd_momentum_step(q.rho, obj.grad_rho, vel_rho, cfg.learning_rate, cfg.momentum);
      objective_sum += obj.objective * static_cast<double>(nb);
      last_kl = obj.kl;
    }
    const Eigen::VectorXd sigma = q.sigma();
    if (!q.mu.allFinite() || !(sigma.minCoeff() > 0.0) || !sigma.allFinite()) {
      throw std::runtime_error("posterior training diverged at epoch " + std::to_string(epoch + 1));
    }
    if (trace != nullptr) {
      trace->epoch_objective.push_back(objective_sum / static_cast<double>(n));
      trace->epoch_kl.push_back(last_kl);
    }
  }
  return q;
}

void write_distribution(std::ostream& out, const DistributionFile& file) {
  const GaussianWeightDist& d = file.dist;
  out << kDistributionMagic << ' ' << kFormatVersion << '\n';
  out << "role " << (file.role.empty() ? "posterior" : file.role) << '\n';
  write_layers(out, d.arch);
  out << std::hexfloat;
  out << "sigma0 " << file.sigma0 << '\n';
  out << "p_min " << file.p_min << '\n';
  out << std::dec << "seed " << file.seed << '\n';
  out << "parameters " << d.mu.size() << '\n';
  out << std::hexfloat;
  for (Eigen::Index i = 0; i < d.mu.size(); ++i) out << d.mu[i] << ' ' << d.rho[i] << '\n';
  out << std::defaultfloat;
  if (!out) throw std::runtime_error("failed to write distribution");
}

DistributionFile read_distribution(std::istream& in) {
  TokenReader r(in);
  read_header(r, kDistributionMagic);
  DistributionFile file;
  r.expect("role");
  file.role = r.word();
  FcnArchitecture arch = read_layers(r);
  r.expect("sigma0");
  file.sigma0 = r.real();
  r.expect("p_min");
  file.p_min = r.real();
  r.expect("seed");
  file.seed = r.count();
  r.expect("parameters");
  const auto count = r.count();
  if (count != arch.parameter_count()) throw std::runtime_error("parameter count does not match layers");
  Eigen::VectorXd mu(static_cast<Eigen::Index>(count));
  Eigen::VectorXd rho(static_cast<Eigen::Index>(count));
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    mu[i] = r.real();
    rho[i] = r.real();
  }
  file.dist = GaussianWeightDist(std::move(arch), std::move(mu), std::move(rho));
  return file;
}

void save_distribution(const std::string& path, const DistributionFile& file) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_distribution(out, file);
}

DistributionFile load_distribution(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_distribution(in);
}

void write_weights(std::ostream& out, const WeightSet& w) {
  out << kWeightsMagic << ' ' << kFormatVersion << '\n';
  write_layers(out, w.architecture());
  out << "parameters " << w.values().size() << '\n' << std::hexfloat;
  for (Eigen::Index i = 0; i < w.values().size(); ++i) out << w.values()[i] << '\n';
  out << std::defaultfloat;
  if (!out) throw std::runtime_error("failed to write weights");
}

WeightSet read_weights(std::istream& in) {
  TokenReader r(in);
  read_header(r, kWeightsMagic);
  FcnArchitecture arch = read_layers(r);
  r.expect("parameters");
  const auto count = r.count();
  if (count != arch.parameter_count()) throw std::runtime_error("parameter count does not match layers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(count));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = r.real();
  return WeightSet(std::move(arch), std::move(v));
}

void save_weights(const std::string& path, const WeightSet& w) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_weights(out, w);
}

WeightSet load_weights(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_weights(in);
}

}  // namespace pbcert
