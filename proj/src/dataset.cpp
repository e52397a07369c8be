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

#include "pbcert/dataset.hpp"

#include <stdexcept>

namespace pbcert {

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> counts(class_count, 0);
  for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

void Dataset::validate() const {
  if (static_cast<std::size_t>(features.cols()) != labels.size()) {
    throw std::invalid_argument("feature and label counts differ");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
      throw std::invalid_argument("label out of range");
    }
  }
  if (!features.allFinite()) throw std::invalid_argument("features contain non-finite values");
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.name = ds.name;
  out.class_count = ds.class_count;
  out.label_names = ds.label_names;
  out.feature_names = ds.feature_names;
  out.features.resize(ds.features.rows(), static_cast<Eigen::Index>(indices.size()));
  out.labels.reserve(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    if (i >= ds.size()) throw std::out_of_range("subset index out of range");
    out.features.col(static_cast<Eigen::Index>(j)) = ds.features.col(static_cast<Eigen::Index>(i));
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

}  // namespace pbcert
