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
#include <span>
#include <vector>

#include <Eigen/Core>

#include "pbcert/dataset.hpp"
#include "pbcert/random.hpp"

namespace pbcert {

// Fully-connected ReLU network with three weight layers:
// input -> hidden -> hidden -> logits.
class FcnArchitecture {
 public:
  static constexpr std::size_t kWeightLayers = 3;

  FcnArchitecture() = default;
  // sizes = {input_dim, hidden1, hidden2, classes}; all positive.
  explicit FcnArchitecture(std::vector<std::size_t> sizes);

  static FcnArchitecture standard(std::size_t input_dim, std::size_t classes,
                                  std::size_t hidden = 100);

  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t num_classes() const { return sizes_.back(); }
  std::size_t fan_in(std::size_t layer) const { return sizes_[layer]; }
  std::size_t fan_out(std::size_t layer) const { return sizes_[layer + 1]; }

  // Flat parameter layout: for each layer, the (out x in) column-major weight
  // matrix followed by the bias vector.
  std::size_t parameter_count() const { return offsets_.back(); }
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const {
    return offsets_[layer] + fan_out(layer) * fan_in(layer);
  }

  bool operator==(const FcnArchitecture& other) const { return sizes_ == other.sizes_; }

 private:
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_{0};
};

// Concrete parameters of one network, stored as a flat vector.
class WeightSet {
 public:
  using MatrixMap = Eigen::Map<Eigen::MatrixXd>;
  using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXd>;
  using VectorMap = Eigen::Map<Eigen::VectorXd>;
  using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

  WeightSet() = default;
  explicit WeightSet(FcnArchitecture arch);
  WeightSet(FcnArchitecture arch, Eigen::VectorXd values);

  const FcnArchitecture& architecture() const { return arch_; }
  const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& values() { return values_; }

  MatrixMap weight(std::size_t layer);
  ConstMatrixMap weight(std::size_t layer) const;
  VectorMap bias(std::size_t layer);
  ConstVectorMap bias(std::size_t layer) const;

  bool operator==(const WeightSet& other) const {
    return arch_ == other.arch_ && values_ == other.values_;
  }

 private:
  FcnArchitecture arch_;
  Eigen::VectorXd values_;
};

enum class LossKind { BoundedCrossEntropy, CrossEntropy, ZeroOne };

struct LossSpec {
  double p_min = 1e-4;
  LossKind kind = LossKind::BoundedCrossEntropy;
};

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

// Logits for a single example.
Eigen::VectorXd fcn_forward(const WeightSet& w, const Eigen::Ref<const Eigen::VectorXd>& x);

// Logits for a batch (d x b in, classes x b out).
Eigen::MatrixXd fcn_forward_batch(const WeightSet& w, const Eigen::Ref<const Eigen::MatrixXd>& x);

// Single-precision batch forward over raw parameters in WeightSet layout.
// Used by the Monte Carlo evaluators, where throughput dominates.
Eigen::MatrixXf fcn_forward_batch(const FcnArchitecture& arch, const float* params,
                                  const Eigen::Ref<const Eigen::MatrixXf>& x);

// ln(1/max(p_y, p_min)) / ln(1/p_min) with its gradient wrt the logits.
// The gradient is zero while the floor is active (p_y < p_min).
LossGrad bounded_xent(const Eigen::Ref<const Eigen::VectorXd>& logits, int y, double p_min);

// Unbounded softmax cross-entropy.
LossGrad cross_entropy(const Eigen::Ref<const Eigen::VectorXd>& logits, int y);

// Argmax with ties resolved toward the lowest class index.
template <typename Derived>
int predict_class(const Eigen::MatrixBase<Derived>& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return static_cast<int>(best);
}

inline int zero_one(const Eigen::Ref<const Eigen::VectorXd>& logits, int y) {
  return predict_class(logits) == y ? 0 : 1;
}

// Misclassifications among the columns of a logits matrix.
template <typename Derived>
std::size_t count_errors(const Eigen::MatrixBase<Derived>& logits, std::span<const int> labels) {
  std::size_t errors = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    if (predict_class(logits.col(j)) != labels[static_cast<std::size_t>(j)]) ++errors;
  }
  return errors;
}

double zero_one_error(const WeightSet& w, const Dataset& data);

// Inverted-dropout masks: one (units x batch) matrix per hidden layer with
// entries 0 or 1/(1-rate). `input` is empty unless input dropout is enabled.
struct DropoutMasks {
  std::vector<Eigen::MatrixXd> hidden;
  Eigen::MatrixXd input;
};

DropoutMasks sample_dropout(const FcnArchitecture& arch, std::size_t batch, double rate,
                            bool include_inputs, Engine& engine);

// Mean loss over the batch and its exact gradient wrt every parameter.
LossGrad backprop(const WeightSet& w, const Eigen::Ref<const Eigen::MatrixXd>& x,
                  std::span<const int> y, const LossSpec& loss,
                  const DropoutMasks* masks = nullptr);

// Heavy-ball momentum: v <- momentum * v + grad; params <- params - lr * v.
void sgd_momentum_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads,
                       Eigen::Ref<Eigen::VectorXd> velocity, double lr, double momentum);

// Rescales grads in place so their L2 norm is at most max_norm (0 = off).
void clip_grad_norm(Eigen::Ref<Eigen::VectorXd> grads, double max_norm);

// Truncated N(0, 1/n_in) weights, cut at two standard deviations; zero biases.
WeightSet init_weights(const FcnArchitecture& arch, std::uint64_t seed);

struct TrainConfigErm {
  std::size_t epochs = 600;
  std::size_t batch_size = 250;
  double learning_rate = 1e-3;
  double momentum = 0.95;
  double dropout_rate = 0.01;
  bool dropout_inputs = false;
  LossSpec loss;
  std::uint64_t seed = 0;
  // With a validation set, evaluate every this many epochs (and at the end)
  // and return the checkpoint with the lowest 01 error.
  std::size_t checkpoint_every = 10;
  double max_grad_norm = 0.0;

  void validate() const;
};

struct ErmTrace {
  std::vector<double> epoch_loss;
  std::size_t selected_epoch = 0;
};

WeightSet erm_train(const Dataset& data, const TrainConfigErm& cfg, const WeightSet& init,
                    const Dataset* validation = nullptr, ErmTrace* trace = nullptr);

}  // namespace pbcert
