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
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pbcert {

// A labelled classification sample. Features are stored one example per
// column (d x n) so batches feed straight into the network.
struct Dataset {
  std::string name;
  Eigen::MatrixXd features;
  std::vector<int> labels;
  std::size_t class_count = 0;
  std::vector<std::string> label_names;
  std::vector<std::string> feature_names;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(features.rows()); }
  bool empty() const { return labels.empty(); }

  // Per-class example counts.
  std::vector<std::size_t> class_histogram() const;

  // Throws std::invalid_argument on shape mismatch, out-of-range labels or
  // non-finite features.
  void validate() const;
};

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

}  // namespace pbcert
