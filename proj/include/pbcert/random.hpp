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

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

#include <Eigen/Core>
#include <boost/random/normal_distribution.hpp>

namespace pbcert {

using Engine = std::mt19937_64;

// SplitMix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a, used to turn stream names into keys.
constexpr std::uint64_t stream_tag(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Counter-based seed derivation: the result depends only on the base seed and
// the ordered keys, so independent streams can be created in any order or on
// any thread.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t s = mix64(base);
  for (std::uint64_t k : keys) s = mix64(s ^ mix64(k));
  return s;
}

inline Engine make_engine(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  return Engine(derive_seed(base, keys));
}

// Standard normal draws (ziggurat).
class NormalSampler {
 public:
  explicit NormalSampler(Engine& engine) : engine_(engine) {}

  double operator()() { return dist_(engine_); }

  void fill(Eigen::Ref<Eigen::VectorXd> out) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = dist_(engine_);
  }

 private:
  Engine& engine_;
  boost::random::normal_distribution<double> dist_;
};

}  // namespace pbcert
