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

#include "pbcert/bound_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace pbcert {
namespace {

constexpr int kMaxBisectionSteps = 200;

void require_probability(double x, const char* what) {
  if (!(x >= 0.0 && x <= 1.0)) {
    throw std::invalid_argument(std::string(what) + " must lie in [0,1]");
  }
}

void require_delta(double delta, const char* what) {
  if (!(delta > 0.0 && delta <= 1.0)) {
    throw std::invalid_argument(std::string(what) + " must lie in (0,1]");
  }
}

// Bisection on a predicate that holds at lo and fails at hi. Runs until the
// bracket collapses onto adjacent doubles, which is far below the 1e-9
// tolerance any caller needs.
template <typename Pred>
double bisect_last_true(double lo, double hi, Pred holds) {
  for (int step = 0; step < kMaxBisectionSteps; ++step) {
    const double mid = lo + 0.5 * (hi - lo);
    if (mid <= lo || mid >= hi) break;
    if (holds(mid)) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

}  // namespace

void ConfidenceParams::validate() const {
  for (double d : {delta, delta_prime, delta_test}) {
    if (!(d > 0.0 && d < 1.0)) {
      throw std::invalid_argument("confidence parameters must lie in (0,1)");
    }
  }
}

std::string_view to_string(BoundKind kind) {
  switch (kind) {
    case BoundKind::PacBayesKl:
      return "pac_bayes_kl";
    case BoundKind::PacBayesQuad:
      return "pac_bayes_quadratic";
    case BoundKind::Chernoff:
      return "chernoff";
    case BoundKind::BinomialTail:
      return "binomial_tail";
    case BoundKind::McSampling:
      return "mc_sampling";
  }
  return "unknown";
}

BoundValue make_bound(double raw, BoundKind kind) {
  if (std::isnan(raw)) throw std::invalid_argument("bound value is NaN");
  if (raw >= 1.0) return {1.0, kind, true};
  return {std::max(raw, 0.0), kind, false};
}

double binary_kl(double q, double p) {
  require_probability(q, "q");
  require_probability(p, "p");
  if (q == p) return 0.0;
  if (p == 0.0 || p == 1.0) return std::numeric_limits<double>::infinity();
  double kl = 0.0;
  if (q > 0.0) kl += q * std::log(q / p);
  if (q < 1.0) kl += (1.0 - q) * (std::log1p(-q) - std::log1p(-p));
  // Rounding can push the sum a hair below zero when q ~ p.
  return std::max(kl, 0.0);
}

double kl_inverse(double q, double c) {
  require_probability(q, "q");
  if (!(c >= 0.0)) throw std::invalid_argument("kl budget must be nonnegative");
  if (q >= 1.0) return 1.0;
  if (c == 0.0) return q;
  const double below_one = std::nextafter(1.0, 0.0);
  if (binary_kl(q, below_one) <= c) return 1.0;
  return bisect_last_true(q, below_one, [&](double p) { return binary_kl(q, p) <= c; });
}

double pac_bayes_budget(double kl_div, std::size_t n, double delta) {
  if (n == 0) throw std::invalid_argument("sample size must be positive");
  if (!(kl_div >= 0.0)) throw std::invalid_argument("KL divergence must be nonnegative");
  require_delta(delta, "delta");
  const double nd = static_cast<double>(n);
  return (kl_div + std::log(2.0 * std::sqrt(nd) / delta)) / nd;
}

double quadratic_form(double emp_risk, double b) {
  const double r = std::sqrt(emp_risk + b) + std::sqrt(b);
  return r * r;
}

BoundValue pac_bayes_kl_bound(double emp_risk, double kl_div, std::size_t n, double delta) {
  require_probability(emp_risk, "empirical risk");
  return make_bound(kl_inverse(emp_risk, pac_bayes_budget(kl_div, n, delta)),
                    BoundKind::PacBayesKl);
}

BoundValue pac_bayes_quadratic_bound(double emp_risk, double kl_div, std::size_t n,
                                     double delta) {
  require_probability(emp_risk, "empirical risk");
  const double b = 0.5 * pac_bayes_budget(kl_div, n, delta);
  return make_bound(quadratic_form(emp_risk, b), BoundKind::PacBayesQuad);
}

double mc_sample_bound(double mc_avg, std::size_t m, double delta_prime) {
  if (m == 0) throw std::invalid_argument("number of Monte Carlo samples must be positive");
  require_delta(delta_prime, "delta_prime");
  return kl_inverse(mc_avg, std::log(2.0 / delta_prime) / static_cast<double>(m));
}

BoundValue chernoff_test_bound(double test_err, std::size_t n_test, double delta) {
  require_probability(test_err, "test error");
  require_delta(delta, "delta");
  if (n_test == 0) throw std::invalid_argument("test set must be nonempty");
  const double slack = std::sqrt(std::log(1.0 / delta) / (2.0 * static_cast<double>(n_test)));
  return make_bound(test_err + slack, BoundKind::Chernoff);
}

double binomial_cdf(std::size_t k, std::size_t m, double p) {
  require_probability(p, "p");
  if (k >= m) return 1.0;
  if (p == 0.0) return 1.0;
  if (p == 1.0) return 0.0;
  const double log_p = std::log(p);
  const double log_q = std::log1p(-p);
  // log C(m, i) is carried forward term by term; terms are accumulated with a
  // running log-sum-exp so no intermediate under/overflows.
  double log_choose = 0.0;
  double log_sum = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i <= k; ++i) {
    const double di = static_cast<double>(i);
    const double log_term = log_choose + di * log_p + (static_cast<double>(m) - di) * log_q;
    if (log_sum == -std::numeric_limits<double>::infinity()) {
      log_sum = log_term;
    } else {
      const double hi = std::max(log_sum, log_term);
      log_sum = hi + std::log1p(std::exp(std::min(log_sum, log_term) - hi));
    }
    log_choose += std::log(static_cast<double>(m - i)) - std::log(di + 1.0);
  }
  return std::min(1.0, std::exp(log_sum));
}

BoundValue binomial_test_bound(std::size_t k, std::size_t m, double delta) {
  if (m == 0) throw std::invalid_argument("test set must be nonempty");
  if (k > m) throw std::invalid_argument("error count exceeds test set size");
  require_delta(delta, "delta");
  if (k == m) return make_bound(1.0, BoundKind::BinomialTail);
  const double lo = static_cast<double>(k) / static_cast<double>(m);
  if (binomial_cdf(k, m, lo) < delta) return make_bound(lo, BoundKind::BinomialTail);
  const double p = bisect_last_true(lo, 1.0, [&](double x) { return binomial_cdf(k, m, x) >= delta; });
  return make_bound(p, BoundKind::BinomialTail);
}

}  // namespace pbcert
