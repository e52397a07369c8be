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
#include <string_view>

/*
Scalar bounds on the risk of a classifier.

All logarithms are natural. Every function is pure and thread-safe.

PAC-Bayes-kl (Langford & Caruana 2001; Seeger 2002; Maurer 2004). With
probability >= 1-delta over an i.i.d. sample of size n, for all posteriors Q:

    kl(emp(Q) || L(Q)) <= (KL(Q||P) + ln(2 sqrt(n) / delta)) / n

so L(Q) <= kl_inverse(emp(Q), rhs).

PAC-Bayes-quadratic. Relaxing the same inequality with Pinsker-type steps:

    L(Q) <= ( sqrt(emp + B) + sqrt(B) )^2,   B = (KL + ln(2 sqrt(n)/delta)) / (2n)

Monte Carlo inflation. emp(Q) is estimated by averaging the empirical risk of
m i.i.d. weight draws. Each draw's risk lies in [0,1], so by the Chernoff
bound for bounded variables kl(mc_avg || emp(Q)) <= ln(2/delta') / m with
probability >= 1-delta'.

Test-set bounds (Langford 2005). For a fixed classifier evaluated on n_test
fresh points with k errors:
  - Chernoff/Hoeffding:  L <= k/n + sqrt(ln(1/delta) / (2 n))
  - binomial tail inversion:  L <= max{ p : BinCDF(k; n, p) >= delta }
The second is the exact Clopper-Pearson style upper limit and is never looser
than the first.
*/

namespace pbcert {

struct ConfidenceParams {
  double delta = 0.025;        // PAC-Bayes bound
  double delta_prime = 0.01;   // Monte Carlo sampling of the posterior
  double delta_test = 0.035;   // test-set bounds

  // Throws std::invalid_argument unless every field is in (0,1).
  void validate() const;
};

enum class BoundKind { PacBayesKl, PacBayesQuad, Chernoff, BinomialTail, McSampling };

std::string_view to_string(BoundKind kind);

// A risk bound after clamping to [0,1]. `vacuous` is set when the raw value
// reached 1.
struct BoundValue {
  double value = 1.0;
  BoundKind kind = BoundKind::PacBayesKl;
  bool vacuous = true;
};

BoundValue make_bound(double raw, BoundKind kind);

// kl(q || p) between Bernoulli(q) and Bernoulli(p), with 0 log 0 = 0.
// Returns +infinity when p is 0 or 1 and q differs from it.
double binary_kl(double q, double p);

// Largest p in [q, 1) with binary_kl(q, p) <= c, by bisection; 1 if the
// budget is never exhausted below 1.
double kl_inverse(double q, double c);

BoundValue pac_bayes_kl_bound(double emp_risk, double kl_div, std::size_t n, double delta);

BoundValue pac_bayes_quadratic_bound(double emp_risk, double kl_div, std::size_t n,
                                     double delta);

// The complexity term (KL + ln(2 sqrt(n)/delta)) / n shared by both bounds.
double pac_bayes_budget(double kl_div, std::size_t n, double delta);

// (sqrt(emp + b) + sqrt(b))^2, unclamped. b is half the budget above.
double quadratic_form(double emp_risk, double b);

// Upper bound on the posterior's expected empirical risk given the average
// over m sampled predictors.
double mc_sample_bound(double mc_avg, std::size_t m, double delta_prime);

BoundValue chernoff_test_bound(double test_err, std::size_t n_test, double delta);

// P[Binomial(m, p) <= k], summed in log space.
double binomial_cdf(std::size_t k, std::size_t m, double p);

BoundValue binomial_test_bound(std::size_t k, std::size_t m, double delta);

}  // namespace pbcert
