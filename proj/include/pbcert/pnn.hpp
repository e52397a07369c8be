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
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pbcert/dataset.hpp"
#include "pbcert/nn_core.hpp"
#include "pbcert/random.hpp"

namespace pbcert {

// sigma = ln(1 + e^rho), computed without overflow.
double softplus(double rho);
// rho such that softplus(rho) == sigma.
double inverse_softplus(double sigma);
// d softplus / d rho.
double sigmoid(double rho);

// Diagonal Gaussian over every weight and bias of an FCN, parameterised by
// (mu, rho) with sigma = softplus(rho).
struct GaussianWeightDist {
  FcnArchitecture arch;
  Eigen::VectorXd mu;
  Eigen::VectorXd rho;

  GaussianWeightDist() = default;
  GaussianWeightDist(FcnArchitecture a, Eigen::VectorXd mean, Eigen::VectorXd rho_values);

  // Isotropic scale around a mean.
  static GaussianWeightDist around(const WeightSet& mean, double sigma);

  std::size_t size() const { return static_cast<std::size_t>(mu.size()); }
  Eigen::VectorXd sigma() const;
  WeightSet mean() const { return WeightSet(arch, mu); }
  bool operator==(const GaussianWeightDist& other) const {
    return arch == other.arch && mu == other.mu && rho == other.rho;
  }
};

enum class PriorMode { RandomMean, LearnedMean };

struct PriorSpec {
  PriorMode mode = PriorMode::LearnedMean;
  double sigma0 = 0.005;
  // ERM recipe for the learned mean (500 epochs, dropout 0.01, plain
  // cross-entropy by default).
  TrainConfigErm mean_training = [] {
    TrainConfigErm c;
    c.epochs = 500;
    c.loss.kind = LossKind::CrossEntropy;
    return c;
  }();
};

// Prior centred at init_weights(seed) or at ERM weights trained on s_pri with
// the checkpoint selected on s_prival. Throws std::invalid_argument for an
// empty s_pri in LearnedMean mode.
GaussianWeightDist init_prior(const FcnArchitecture& arch, const PriorSpec& spec, const Dataset& s_pri,
                              const Dataset& s_prival, std::uint64_t seed);

GaussianWeightDist init_posterior_from_prior(const GaussianWeightDist& prior);

struct WeightSample {
  WeightSet weights;
  Eigen::VectorXd noise;  // the standard-normal V with W = mu + sigma * V
};

WeightSample sample_weights(const GaussianWeightDist& q, Engine& engine);
WeightSample sample_weights(const GaussianWeightDist& q, Eigen::VectorXd noise);

// KL(q || p) in closed form.
double kl_gaussian_diag(const GaussianWeightDist& q, const GaussianWeightDist& p);

// Gradients of KL(q || p) wrt q's mu and rho.
void kl_gaussian_diag_grad(const GaussianWeightDist& q, const GaussianWeightDist& p,
                           Eigen::VectorXd& grad_mu, Eigen::VectorXd& grad_rho);

struct TrainConfigPnn {
  std::size_t epochs = 100;
  std::size_t batch_size = 250;
  double learning_rate = 1e-3;
  double momentum = 0.95;
  std::size_t n_for_objective = 1;  // n inside the bound's complexity term
  double delta = 0.025;
  double p_min = 1e-4;
  std::uint64_t seed = 0;
  double max_grad_norm = 0.0;

  void validate() const;
};

struct ObjectiveValue {
  double objective = 0.0;
  double empirical = 0.0;  // mean bounded cross-entropy on the batch
  double kl = 0.0;
  double b_term = 0.0;     // (KL + ln(2 sqrt(n)/delta)) / (2n)
  Eigen::VectorXd grad_mu;
  Eigen::VectorXd grad_rho;
};

// f_quad = (sqrt(emp + B) + sqrt(B))^2 on a batch, one weight sample drawn
// from `engine`, with pathwise gradients through the sample and closed-form
// KL gradients.
ObjectiveValue fquad_objective(const GaussianWeightDist& q, const GaussianWeightDist& prior,
                               const Eigen::Ref<const Eigen::MatrixXd>& x, std::span<const int> y,
                               const TrainConfigPnn& cfg, Engine& engine);

// Same, with the noise V supplied by the caller.
ObjectiveValue fquad_objective(const GaussianWeightDist& q, const GaussianWeightDist& prior,
                               const Eigen::Ref<const Eigen::MatrixXd>& x, std::span<const int> y,
                               const TrainConfigPnn& cfg, const Eigen::VectorXd& noise);

struct PnnTrace {
  std::vector<double> epoch_objective;
  std::vector<double> epoch_kl;
};

GaussianWeightDist train_posterior(const Dataset& train_set, const GaussianWeightDist& prior,
                                   const TrainConfigPnn& cfg, PnnTrace* trace = nullptr);

// Serialised distribution with its provenance. The text format writes every
// double as a hex float, so a round trip is bit-exact.
struct DistributionFile {
  GaussianWeightDist dist;
  double sigma0 = 0.0;
  double p_min = 0.0;
  std::uint64_t seed = 0;
  std::string role;  // "prior" or "posterior"
};

void write_distribution(std::ostream& out, const DistributionFile& file);
DistributionFile read_distribution(std::istream& in);
void save_distribution(const std::string& path, const DistributionFile& file);
DistributionFile load_distribution(const std::string& path);

void write_weights(std::ostream& out, const WeightSet& w);
WeightSet read_weights(std::istream& in);
void save_weights(const std::string& path, const WeightSet& w);
WeightSet load_weights(const std::string& path);

}  // namespace pbcert
