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
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "pbcert/dataset.hpp"

namespace pbcert {

// Ingestion or splitting failure. `line` is the 1-based CSV line, 0 if the
// error is not tied to a line.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Comma-separated, header row required. `label_column` is a header name, a
// 0-based column index, or empty for the last column. Labels are mapped to
// 0..k-1 in sorted order (numeric order when every label is numeric).
Dataset load_csv(const std::string& path, const std::string& label_column);
Dataset parse_csv(std::istream& in, const std::string& label_column, std::string name = "csv");

// Environment: PBCERT_CACHE_DIR (default ~/.cache/pbcert) and
// PBCERT_OPENML_URL, a URL template in which "{id}" is replaced by the
// dataset id (default https://www.openml.org/data/get_csv/{id}).
std::string default_cache_dir();
std::string default_openml_url_template();

struct FetchOptions {
  std::string url_template = default_openml_url_template();
  std::string label_column;
};

struct FetchResult {
  Dataset data;
  bool from_cache = false;
  std::string path;    // cached CSV
  std::string sha256;  // of the raw bytes
};

// Downloads the CSV export of an OpenML dataset, caching the raw bytes under
// cache_dir. A cached copy is always preferred; its checksum is verified
// against the metadata sidecar written at download time.
FetchResult fetch_openml(int dataset_id, const std::string& cache_dir, const FetchOptions& options = {});

std::string sha256_hex(std::string_view bytes);

// Per-feature z-scoring. Features whose standard deviation is below 1e-12
// are only centred.
class Standardizer {
 public:
  static Standardizer fit(const Dataset& fit_on);
  Dataset apply(const Dataset& ds) const;

  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::VectorXd& scale() const { return scale_; }

 private:
  Eigen::VectorXd mean_;
  Eigen::VectorXd scale_;
};

struct Split {
  std::vector<std::size_t> part_a;
  std::vector<std::size_t> part_b;
};

// floor(fraction * n), robust to the representation error of fractions such
// as 0.2 or 0.3.
std::size_t floor_count(double fraction, std::size_t n);

// Stratified split of `pool` (indices into labels): part_a receives
// `count_a` examples, allocated to classes proportionally with the remainder
// going to the largest fractional parts. Index lists come back sorted.
Split stratified_split(std::span<const int> labels, std::span<const std::size_t> pool,
                       std::size_t count_a, std::uint64_t seed);

// part_a holds floor(fraction * n) examples of the whole dataset.
Split stratified_split(const Dataset& ds, double fraction, std::uint64_t seed);

// Keeps round((1 - fraction) * n) examples chosen uniformly at random
// (or class-proportionally when `stratified`). Throws DataError if a class
// would vanish.
std::vector<std::size_t> removal_keep_indices(const Dataset& ds, double fraction, std::uint64_t seed,
                                              bool stratified = false);
Dataset remove_random(const Dataset& ds, double fraction, std::uint64_t seed, bool stratified = false);

enum class Mode { SelfCertified, TraditionalPnn, TraditionalErm };

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view text);

struct SplitSpec {
  double test_fraction = 0.10;
  double prior_fraction = 0.5;
  double prior_val_fraction = 0.01;
  double removal_fraction = 0.0;
  Mode mode = Mode::SelfCertified;
  std::uint64_t seed = 0;
  bool stratified_removal = false;

  void validate() const;
};

// Data roles, as indices into `data` (the dataset after random removal).
//   s_pri     trains the prior mean
//   s_prival  selects the prior checkpoint; later part of posterior training
//   s_cert    evaluates the certificate
//   s_full    trains the posterior / ERM network (s_pri + s_prival + s_cert)
//   test      held-out evaluation, empty in SelfCertified mode
// In TraditionalErm mode only s_full and test are populated.
struct Partition {
  Dataset data;
  Mode mode = Mode::SelfCertified;
  std::vector<std::size_t> s_pri;
  std::vector<std::size_t> s_prival;
  std::vector<std::size_t> s_cert;
  std::vector<std::size_t> s_full;
  std::vector<std::size_t> test;

  // Roles disjoint, union equal to the data, s_cert clear of prior data.
  // Throws std::logic_error on violation.
  void check_invariants() const;
};

// Remove -> carve the stratified test split (traditional modes) -> split the
// training data into prior, prior-validation and certification parts.
//   |s_cert|   = floor((1 - prior_fraction) * n_train)
//   |s_prival| = max(1, floor(prior_val_fraction * n_train)), taken from the
//                prior portion
//   |test|     = floor(test_fraction * n)
// Throws DataError if any required role ends up empty.
Partition make_partitions(const Dataset& ds, const SplitSpec& spec);

// Two-or-more-class isotropic Gaussian mixture with equal class weights.
struct GaussianBlobs {
  std::vector<Eigen::VectorXd> centers;
  double noise_sd = 1.0;

  // Two classes centred at +-(distance/2) e_1 in `dim` dimensions.
  static GaussianBlobs two_class(std::size_t dim, double distance, double noise_sd = 1.0);

  Dataset sample(std::size_t n, std::uint64_t seed, std::string name = "blobs") const;
};

}  // namespace pbcert
