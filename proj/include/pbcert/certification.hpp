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

#include "pbcert/bound_math.hpp"
#include "pbcert/data_pipeline.hpp"
#include "pbcert/dataset.hpp"
#include "pbcert/nn_core.hpp"
#include "pbcert/pnn.hpp"

namespace pbcert {

// Weight draw j of a Monte Carlo evaluation uses noise derived from
// (base_seed, j) only, so results do not depend on how draws are scheduled
// across workers. All reductions are over integer error counts.
struct McOptions {
  std::size_t workers = 1;
};

// Mean over m weight draws of the 01 error on `data`.
double mc_empirical_risk(const GaussianWeightDist& posterior, const Dataset& data, std::size_t m,
                         std::uint64_t base_seed, const McOptions& options = {});

// Mean over m weight draws of the bounded cross-entropy on `data`.
double mc_empirical_xent(const GaussianWeightDist& posterior, const Dataset& data, std::size_t m,
                         double p_min, std::uint64_t base_seed, const McOptions& options = {});

struct RiskCertificate {
  double mc_avg_01 = 0.0;
  double emp_bound = 0.0;    // mc_avg inflated for sampling error (delta')
  double kl_div = 0.0;
  std::size_t n_cert = 0;
  std::size_t m_samples = 0;
  double final_bound = 1.0;  // PAC-Bayes-kl
  double quad_bound = 1.0;   // PAC-Bayes-quadratic on the same inputs
  bool vacuous = true;
  std::uint64_t base_seed = 0;
  std::string timestamp;
  ConfidenceParams confidence;
  // Optional certificate for the bounded cross-entropy risk.
  std::optional<double> xent_mc_avg;
  std::optional<double> xent_final_bound;
};

struct CertifyOptions {
  McOptions mc;
  bool certify_xent = false;
  double p_min = 1e-4;
};

// Certifies on partition.s_cert after checking it is disjoint from the prior
// data. Throws std::logic_error if the partition has no certification set or
// it overlaps s_pri / s_prival.
RiskCertificate compute_certificate(const GaussianWeightDist& posterior, const GaussianWeightDist& prior,
                                    const Partition& partition, const ConfidenceParams& cp, std::size_t m,
                                    std::uint64_t base_seed, const CertifyOptions& options = {});

// The certificate chain from already-computed ingredients.
RiskCertificate certificate_from_estimate(double mc_avg, double kl_div, std::size_t n_cert, std::size_t m,
                                          const ConfidenceParams& cp);

struct EvalReport {
  double stochastic_test_err_01 = 0.0;
  double posterior_mean_test_err_01 = 0.0;
  std::size_t samples_per_example = 100;
};

// Every example gets `samples_per_example` fresh weight draws keyed by
// (base_seed, example index, draw index).
double stochastic_test_error(const GaussianWeightDist& posterior, const Dataset& test_set,
                             std::size_t samples_per_example, std::uint64_t base_seed,
                             const McOptions& options = {});

double posterior_mean_test_error(const GaussianWeightDist& posterior, const Dataset& test_set);

EvalReport evaluate_posterior(const GaussianWeightDist& posterior, const Dataset& test_set,
                              std::size_t samples_per_example, std::uint64_t base_seed,
                              const McOptions& options = {});

struct TestSetBounds {
  double test_err_01 = 0.0;
  std::size_t error_count = 0;
  std::size_t n_test = 0;
  BoundValue chernoff;
  BoundValue binomial;
};

TestSetBounds test_set_bounds(const WeightSet& weights, const Dataset& test_set, double delta_test);
TestSetBounds test_set_bounds_from_counts(std::size_t errors, std::size_t n_test, double delta_test);

// "key = value" records.
void write_record(std::ostream& out, const RiskCertificate& cert);
void write_record(std::ostream& out, const TestSetBounds& bounds);
void write_record(std::ostream& out, const EvalReport& report);

}  // namespace pbcert
