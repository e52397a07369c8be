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

#include "pbcert/certification.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <vector>

namespace pbcert {
namespace {

// Runs body(begin, end) over [0, count) split into contiguous blocks, one per
// worker. Results must be written to per-index slots by the body.
void parallel_blocks(std::size_t count, std::size_t workers,
                     const std::function<void(std::size_t, std::size_t)>& body) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
  if (workers == 1) {
    body(0, count);
    return;
  }
  std::vector<std::jthread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = count * w / workers;
    const std::size_t end = count * (w + 1) / workers;
    threads.emplace_back([&body, begin, end] { body(begin, end); });
  }
}

// Per-draw sampler of network parameters in single precision. The
// evaluation forward pass runs in float; every reduction is exact or in
// double.
class DrawSampler {
 public:
  explicit DrawSampler(const GaussianWeightDist& q)
      : mu_(q.mu), sigma_(q.sigma()), noise_(q.mu.size()), params_(q.mu.size()) {}

  const float* draw(std::uint64_t seed) {
    Engine engine(seed);
    NormalSampler normal(engine);
    normal.fill(noise_);
    params_ = (mu_ + sigma_.cwiseProduct(noise_)).cast<float>();
    return params_.data();
  }

 private:
  const Eigen::VectorXd& mu_;
  Eigen::VectorXd sigma_;
  Eigen::VectorXd noise_;
  Eigen::VectorXf params_;
};

void require_nonempty(const Dataset& data, const char* what) {
  if (data.empty()) throw std::invalid_argument(std::string(what) + " must be nonempty");
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

bool intersects(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::vector<std::size_t> sa = a;
  std::vector<std::size_t> sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::vector<std::size_t> common;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
  return !common.empty();
}

}  // namespace

double mc_empirical_risk(const GaussianWeightDist& posterior, const Dataset& data, std::size_t m,
                         std::uint64_t base_seed, const McOptions& options) {
  require_nonempty(data, "certification set");
  if (m == 0) throw std::invalid_argument("number of Monte Carlo samples must be positive");
  const Eigen::MatrixXf x = data.features.cast<float>();
  std::vector<std::uint64_t> errors(m, 0);
  parallel_blocks(m, options.workers, [&](std::size_t begin, std::size_t end) {
    DrawSampler sampler(posterior);
    for (std::size_t j = begin; j < end; ++j) {
      const float* params = sampler.draw(derive_seed(base_seed, {stream_tag("mc_draw"), j}));
      errors[j] = count_errors(fcn_forward_batch(posterior.arch, params, x), data.labels);
    }
  });
  const std::uint64_t total = std::accumulate(errors.begin(), errors.end(), std::uint64_t{0});
  return static_cast<double>(total) / (static_cast<double>(m) * static_cast<double>(data.size()));
}

double mc_empirical_xent(const GaussianWeightDist& posterior, const Dataset& data, std::size_t m,
                         double p_min, std::uint64_t base_seed, const McOptions& options) {
  require_nonempty(data, "certification set");
  if (m == 0) throw std::invalid_argument("number of Monte Carlo samples must be positive");
  const Eigen::MatrixXf x = data.features.cast<float>();
  std::vector<double> per_draw(m, 0.0);
  parallel_blocks(m, options.workers, [&](std::size_t begin, std::size_t end) {
    DrawSampler sampler(posterior);
    for (std::size_t j = begin; j < end; ++j) {
      const float* params = sampler.draw(derive_seed(base_seed, {stream_tag("mc_draw"), j}));
      const Eigen::MatrixXd logits = fcn_forward_batch(posterior.arch, params, x).cast<double>();
      double sum = 0.0;
      for (Eigen::Index i = 0; i < logits.cols(); ++i) {
        sum += bounded_xent(logits.col(i), data.labels[static_cast<std::size_t>(i)], p_min).loss;
      }
      per_draw[j] = sum / static_cast<double>(data.size());
    }
  });
  double total = 0.0;
  for (double v : per_draw) total += v;
  return total / static_cast<double>(m);
}

RiskCertificate certificate_from_estimate(double mc_avg, double kl_div, std::size_t n_cert, std::size_t m,
                                          const ConfidenceParams& cp) {
  cp.validate();
  RiskCertificate cert;
  cert.confidence = cp;
  cert.mc_avg_01 = mc_avg;
  cert.kl_div = kl_div;
  cert.n_cert = n_cert;
  cert.m_samples = m;
  cert.emp_bound = mc_sample_bound(mc_avg, m, cp.delta_prime);
  const BoundValue kl_bound = pac_bayes_kl_bound(cert.emp_bound, kl_div, n_cert, cp.delta);
  cert.final_bound = kl_bound.value;
  cert.vacuous = kl_bound.vacuous;
  cert.quad_bound = pac_bayes_quadratic_bound(cert.emp_bound, kl_div, n_cert, cp.delta).value;
  return cert;
}

RiskCertificate compute_certificate(const GaussianWeightDist& posterior, const GaussianWeightDist& prior,
                                    const Partition& partition, const ConfidenceParams& cp, std::size_t m,
                                    std::uint64_t base_seed, const CertifyOptions& options) {
  if (partition.mode == Mode::TraditionalErm || partition.s_cert.empty()) {
    throw std::logic_error("partition has no certification set");
  }
  if (intersects(partition.s_cert, partition.s_pri) || intersects(partition.s_cert, partition.s_prival)) {
    throw std::logic_error("certification set overlaps the prior's training data");
  }
  const Dataset cert_set = subset(partition.data, partition.s_cert);
  const double mc_avg = mc_empirical_risk(posterior, cert_set, m, base_seed, options.mc);
  const double kl = kl_gaussian_diag(posterior, prior);
  RiskCertificate cert = certificate_from_estimate(mc_avg, kl, cert_set.size(), m, cp);
  cert.base_seed = base_seed;
  cert.timestamp = utc_now();
  if (options.certify_xent) {
    const double xent = mc_empirical_xent(posterior, cert_set, m, options.p_min, base_seed, options.mc);
    cert.xent_mc_avg = xent;
    const double emp = mc_sample_bound(std::min(xent, 1.0), m, cp.delta_prime);
    cert.xent_final_bound = pac_bayes_kl_bound(emp, kl, cert_set.size(), cp.delta).value;
  }
  return cert;
}

double stochastic_test_error(const GaussianWeightDist& posterior, const Dataset& test_set,
                             std::size_t samples_per_example, std::uint64_t base_seed,
                             const McOptions& options) {
  require_nonempty(test_set, "test set");
  if (samples_per_example == 0) throw std::invalid_argument("samples per example must be positive");
  const Eigen::MatrixXf x = test_set.features.cast<float>();
  std::vector<std::uint64_t> errors(test_set.size(), 0);
  parallel_blocks(test_set.size(), options.workers, [&](std::size_t begin, std::size_t end) {
    DrawSampler sampler(posterior);
    for (std::size_t i = begin; i < end; ++i) {
      const auto col = x.col(static_cast<Eigen::Index>(i));
      for (std::size_t k = 0; k < samples_per_example; ++k) {
        const float* params = sampler.draw(derive_seed(base_seed, {stream_tag("stochastic_eval"), i, k}));
        const Eigen::VectorXf logits = fcn_forward_batch(posterior.arch, params, col);
        if (predict_class(logits) != test_set.labels[i]) ++errors[i];
      }
    }
  });
  const std::uint64_t total = std::accumulate(errors.begin(), errors.end(), std::uint64_t{0});
  return static_cast<double>(total) /
         (static_cast<double>(test_set.size()) * static_cast<double>(samples_per_example));
}

double posterior_mean_test_error(const GaussianWeightDist& posterior, const Dataset& test_set) {
  require_nonempty(test_set, "test set");
  return zero_one_error(posterior.mean(), test_set);
}

EvalReport evaluate_posterior(const GaussianWeightDist& posterior, const Dataset& test_set,
                              std::size_t samples_per_example, std::uint64_t base_seed,
                              const McOptions& options) {
  EvalReport r;
  r.samples_per_example = samples_per_example;
  r.stochastic_test_err_01 = stochastic_test_error(posterior, test_set, samples_per_example, base_seed, options);
  r.posterior_mean_test_err_01 = posterior_mean_test_error(posterior, test_set);
  return r;
}

TestSetBounds test_set_bounds_from_counts(std::size_t errors, std::size_t n_test, double delta_test) {
  TestSetBounds b;
  b.error_count = errors;
  b.n_test = n_test;
  b.test_err_01 = static_cast<double>(errors) / static_cast<double>(n_test);
  b.chernoff = chernoff_test_bound(b.test_err_01, n_test, delta_test);
  b.binomial = binomial_test_bound(errors, n_test, delta_test);
  return b;
}

TestSetBounds test_set_bounds(const WeightSet& weights, const Dataset& test_set, double delta_test) {
  require_nonempty(test_set, "test set");
  const Eigen::MatrixXd logits = fcn_forward_batch(weights, test_set.features);
  return test_set_bounds_from_counts(count_errors(logits, test_set.labels), test_set.size(), delta_test);
}

void write_record(std::ostream& out, const RiskCertificate& c) {
  out << std::setprecision(17);
  out << "record = risk_certificate\n"
      << "mc_avg_01 = " << c.mc_avg_01 << '\n'
      << "emp_bound = " << c.emp_bound << '\n'
      << "kl_div = " << c.kl_div << '\n'
      << "n_cert = " << c.n_cert << '\n'
      << "m_samples = " << c.m_samples << '\n'
      << "final_bound = " << c.final_bound << '\n'
      << "quad_bound = " << c.quad_bound << '\n'
      << "vacuous = " << (c.vacuous ? "true" : "false") << '\n'
      << "delta = " << c.confidence.delta << '\n'
      << "delta_prime = " << c.confidence.delta_prime << '\n'
      << "base_seed = " << c.base_seed << '\n'
      << "timestamp = " << c.timestamp << '\n';
  if (c.xent_mc_avg) out << "xent_mc_avg = " << *c.xent_mc_avg << '\n';
  if (c.xent_final_bound) out << "xent_final_bound = " << *c.xent_final_bound << '\n';
}

void write_record(std::ostream& out, const TestSetBounds& b) {
  out << std::setprecision(17);
  out << "record = test_set_bounds\n"
      << "test_err_01 = " << b.test_err_01 << '\n'
      << "error_count = " << b.error_count << '\n'
      << "n_test = " << b.n_test << '\n'
      << "chernoff = " << b.chernoff.value << '\n'
      << "chernoff_vacuous = " << (b.chernoff.vacuous ? "true" : "false") << '\n'
      << "binomial = " << b.binomial.value << '\n'
      << "binomial_vacuous = " << (b.binomial.vacuous ? "true" : "false") << '\n';
}

void write_record(std::ostream& out, const EvalReport& r) {
  out << std::setprecision(17);
  out << "record = eval_report\n"
      << "stochastic_test_err_01 = " << r.stochastic_test_err_01 << '\n'
      << "posterior_mean_test_err_01 = " << r.posterior_mean_test_err_01 << '\n'
      << "samples_per_example = " << r.samples_per_example << '\n';
}

}  // namespace pbcert
