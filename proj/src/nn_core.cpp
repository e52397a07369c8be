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

#include "pbcert/nn_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

namespace pbcert {
namespace {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
Mat<Scalar> forward_raw(const FcnArchitecture& arch, const Scalar* params,
                        const Eigen::Ref<const Mat<Scalar>>& x) {
  if (static_cast<std::size_t>(x.rows()) != arch.input_dim()) {
    throw std::invalid_argument("input dimension " + std::to_string(x.rows()) +
                                " does not match architecture input " +
                                std::to_string(arch.input_dim()));
  }
  Mat<Scalar> h;
  for (std::size_t l = 0; l < FcnArchitecture::kWeightLayers; ++l) {
    const auto out = static_cast<Eigen::Index>(arch.fan_out(l));
    const auto in = static_cast<Eigen::Index>(arch.fan_in(l));
    Eigen::Map<const Mat<Scalar>> w(params + arch.weight_offset(l), out, in);
    Eigen::Map<const Vec<Scalar>> b(params + arch.bias_offset(l), out);
    Mat<Scalar> z = (l == 0) ? Mat<Scalar>(w * x) : Mat<Scalar>(w * h);
    z.colwise() += b;
    if (l + 1 < FcnArchitecture::kWeightLayers) z = z.cwiseMax(Scalar(0));
    h = std::move(z);
  }
  return h;
}

void check_label(int y, Eigen::Index classes) {
  if (y < 0 || y >= classes) throw std::invalid_argument("class label out of range");
}

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

}  // namespace

FcnArchitecture::FcnArchitecture(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() != kWeightLayers + 1) {
    throw std::invalid_argument("architecture needs input, two hidden and one output size");
  }
  if (std::any_of(sizes_.begin(), sizes_.end(), [](std::size_t s) { return s == 0; })) {
    throw std::invalid_argument("layer sizes must be positive");
  }
  for (std::size_t l = 0; l < kWeightLayers; ++l) {
    offsets_.push_back(offsets_.back() + sizes_[l + 1] * (sizes_[l] + 1));
  }
}

FcnArchitecture FcnArchitecture::standard(std::size_t input_dim, std::size_t classes,
                                          std::size_t hidden) {
  return FcnArchitecture({input_dim, hidden, hidden, classes});
}

WeightSet::WeightSet(FcnArchitecture arch)
    : arch_(std::move(arch)),
      values_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(arch_.parameter_count()))) {}

WeightSet::WeightSet(FcnArchitecture arch, Eigen::VectorXd values)
    : arch_(std::move(arch)), values_(std::move(values)) {
  if (static_cast<std::size_t>(values_.size()) != arch_.parameter_count()) {
    throw std::invalid_argument("parameter vector does not match architecture");
  }
}

WeightSet::MatrixMap WeightSet::weight(std::size_t layer) {
  return {values_.data() + arch_.weight_offset(layer),
          static_cast<Eigen::Index>(arch_.fan_out(layer)),
          static_cast<Eigen::Index>(arch_.fan_in(layer))};
}

WeightSet::ConstMatrixMap WeightSet::weight(std::size_t layer) const {
  return {values_.data() + arch_.weight_offset(layer),
          static_cast<Eigen::Index>(arch_.fan_out(layer)),
          static_cast<Eigen::Index>(arch_.fan_in(layer))};
}

WeightSet::VectorMap WeightSet::bias(std::size_t layer) {
  return {values_.data() + arch_.bias_offset(layer), static_cast<Eigen::Index>(arch_.fan_out(layer))};
}

WeightSet::ConstVectorMap WeightSet::bias(std::size_t layer) const {
  return {values_.data() + arch_.bias_offset(layer), static_cast<Eigen::Index>(arch_.fan_out(layer))};
}

Eigen::VectorXd fcn_forward(const WeightSet& w, const Eigen::Ref<const Eigen::VectorXd>& x) {
  return fcn_forward_batch(w, x);
}

Eigen::MatrixXd fcn_forward_batch(const WeightSet& w, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  return forward_raw<double>(w.architecture(), w.values().data(), x);
}

Eigen::MatrixXf fcn_forward_batch(const FcnArchitecture& arch, const float* params,
                                  const Eigen::Ref<const Eigen::MatrixXf>& x) {
  return forward_raw<float>(arch, params, x);
}

LossGrad bounded_xent(const Eigen::Ref<const Eigen::VectorXd>& logits, int y, double p_min) {
  if (!(p_min > 0.0 && p_min < 1.0)) throw std::invalid_argument("p_min must lie in (0,1)");
  check_label(y, logits.size());
  const double lse = log_sum_exp(logits);
  const double log_py = logits[y] - lse;
  const double scale = -std::log(p_min);
  LossGrad out;
  if (log_py < -scale) {
    out.loss = 1.0;
    out.grad = Eigen::VectorXd::Zero(logits.size());
    return out;
  }
  out.loss = -log_py / scale;
  out.grad = (logits.array() - lse).exp().matrix();
  out.grad[y] -= 1.0;
  out.grad /= scale;
  return out;
}

LossGrad cross_entropy(const Eigen::Ref<const Eigen::VectorXd>& logits, int y) {
  check_label(y, logits.size());
  const double lse = log_sum_exp(logits);
  LossGrad out;
  out.loss = lse - logits[y];
  out.grad = (logits.array() - lse).exp().matrix();
  out.grad[y] -= 1.0;
  return out;
}

double zero_one_error(const WeightSet& w, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("cannot evaluate on an empty dataset");
  const Eigen::MatrixXd logits = fcn_forward_batch(w, data.features);
  return static_cast<double>(count_errors(logits, data.labels)) / static_cast<double>(data.size());
}

DropoutMasks sample_dropout(const FcnArchitecture& arch, std::size_t batch, double rate,
                            bool include_inputs, Engine& engine) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0,1)");
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  auto draw = [&](std::size_t rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(batch));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = keep(engine) ? scale : 0.0;
    }
    return m;
  };
  DropoutMasks masks;
  if (include_inputs) masks.input = draw(arch.input_dim());
  for (std::size_t l = 1; l < FcnArchitecture::kWeightLayers; ++l) {
    masks.hidden.push_back(draw(arch.layer_sizes()[l]));
  }
  return masks;
}

LossGrad backprop(const WeightSet& w, const Eigen::Ref<const Eigen::MatrixXd>& x,
                  std::span<const int> y, const LossSpec& loss, const DropoutMasks* masks) {
  const FcnArchitecture& arch = w.architecture();
  constexpr std::size_t L = FcnArchitecture::kWeightLayers;
  const Eigen::Index batch = x.cols();
  if (static_cast<std::size_t>(batch) != y.size()) {
    throw std::invalid_argument("batch features and labels disagree in size");
  }
  if (batch == 0) throw std::invalid_argument("empty batch");
  if (static_cast<std::size_t>(x.rows()) != arch.input_dim()) {
    throw std::invalid_argument("input dimension does not match architecture");
  }
  if (loss.kind == LossKind::ZeroOne) {
    throw std::invalid_argument("the 01 loss has no useful gradient");
  }
  const bool hidden_dropout = masks != nullptr && !masks->hidden.empty();
  const bool input_dropout = masks != nullptr && masks->input.size() > 0;

  // acts[l] is the input to weight layer l; pre[l] the hidden pre-activations.
  std::vector<Eigen::MatrixXd> acts(L);
  std::vector<Eigen::MatrixXd> pre(L - 1);
  acts[0] = input_dropout ? Eigen::MatrixXd(x.cwiseProduct(masks->input)) : Eigen::MatrixXd(x);
  Eigen::MatrixXd logits;
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::MatrixXd z = w.weight(l) * acts[l];
    z.colwise() += w.bias(l);
    if (l + 1 == L) {
      logits = std::move(z);
    } else {
      Eigen::MatrixXd a = z.cwiseMax(0.0);
      if (hidden_dropout) a.array() *= masks->hidden[l].array();
      pre[l] = std::move(z);
      acts[l + 1] = std::move(a);
    }
  }

  LossGrad out;
  Eigen::MatrixXd delta(logits.rows(), batch);
  double total = 0.0;
  for (Eigen::Index j = 0; j < batch; ++j) {
    const int label = y[static_cast<std::size_t>(j)];
    LossGrad lg = loss.kind == LossKind::CrossEntropy ? cross_entropy(logits.col(j), label)
                                                      : bounded_xent(logits.col(j), label, loss.p_min);
    total += lg.loss;
    delta.col(j) = lg.grad;
  }
  const double inv_batch = 1.0 / static_cast<double>(batch);
  out.loss = total * inv_batch;
  delta *= inv_batch;

  WeightSet grad(arch);
  for (std::size_t l = L; l-- > 0;) {
    grad.weight(l).noalias() = delta * acts[l].transpose();
    grad.bias(l) = delta.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd back = w.weight(l).transpose() * delta;
    if (hidden_dropout) back.array() *= masks->hidden[l - 1].array();
    back.array() *= (pre[l - 1].array() > 0.0).cast<double>();
    delta = std::move(back);
  }
  out.grad = std::move(grad.values());
  return out;
}

void sgd_momentum_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads,
                       Eigen::Ref<Eigen::VectorXd> velocity, double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw std::invalid_argument("parameter, gradient and velocity shapes differ");
  }
  velocity = momentum * velocity + grads;
  params -= lr * velocity;
}

void clip_grad_norm(Eigen::Ref<Eigen::VectorXd> grads, double max_norm) {
  if (max_norm <= 0.0) return;
  const double norm = grads.norm();
  if (norm > max_norm) grads *= max_norm / norm;
}

WeightSet init_weights(const FcnArchitecture& arch, std::uint64_t seed) {
  Engine engine = make_engine(seed, {stream_tag("init_weights")});
  NormalSampler normal(engine);
  WeightSet w(arch);
  for (std::size_t l = 0; l < FcnArchitecture::kWeightLayers; ++l) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(arch.fan_in(l)));
    auto wl = w.weight(l);
    for (Eigen::Index j = 0; j < wl.cols(); ++j) {
      for (Eigen::Index i = 0; i < wl.rows(); ++i) {
        double z = normal();
        while (std::abs(z) > 2.0) z = normal();
        wl(i, j) = sd * z;
      }
    }
  }
  return w;
}

void TrainConfigErm::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0,1)");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("dropout rate must lie in [0,1)");
  }
  if (!(loss.p_min > 0.0 && loss.p_min < 1.0)) throw std::invalid_argument("p_min must lie in (0,1)");
}

WeightSet erm_train(const Dataset& data, const TrainConfigErm& cfg, const WeightSet& init,
                    const Dataset* validation, ErmTrace* trace) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  if (data.dim() != init.architecture().input_dim()) {
    throw std::invalid_argument("dataset dimension does not match architecture");
  }
  if (trace != nullptr) *trace = ErmTrace{};
  if (cfg.epochs == 0) return init;

  const bool select = validation != nullptr && !validation->empty() && cfg.checkpoint_every > 0;
  const FcnArchitecture& arch = init.architecture();
  const std::size_t n = data.size();
  const auto dim = static_cast<Eigen::Index>(data.dim());

  WeightSet w = init;
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(w.values().size());
  Engine engine = make_engine(cfg.seed, {stream_tag("erm_train")});
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  WeightSet best = w;
  double best_err = 2.0;
  std::size_t best_epoch = 0;

  Eigen::MatrixXd xb;
  std::vector<int> yb;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), engine);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, n - start);
      xb.resize(dim, static_cast<Eigen::Index>(nb));
      yb.resize(nb);
      for (std::size_t j = 0; j < nb; ++j) {
        xb.col(static_cast<Eigen::Index>(j)) = data.features.col(static_cast<Eigen::Index>(order[start + j]));
        yb[j] = data.labels[order[start + j]];
      }
      DropoutMasks masks;
      const bool dropout = cfg.dropout_rate > 0.0;
      if (dropout) masks = sample_dropout(arch, nb, cfg.dropout_rate, cfg.dropout_inputs, engine);
      LossGrad lg = backprop(w, xb, yb, cfg.loss, dropout ? &masks : nullptr);
      clip_grad_norm(lg.grad, cfg.max_grad_norm);
      sgd_momentum_step(w.values(), lg.grad, velocity, cfg.learning_rate, cfg.momentum);
      loss_sum += lg.loss * static_cast<double>(nb);
    }
    if (trace != nullptr) trace->epoch_loss.push_back(loss_sum / static_cast<double>(n));
    if (select && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs)) {
      const double err = zero_one_error(w, *validation);
      // Ties go to the later, longer-trained checkpoint.
      if (err <= best_err) {
        best_err = err;
        best = w;
        best_epoch = epoch;
      }
    }
  }
  if (!select) {
    best = std::move(w);
    best_epoch = cfg.epochs;
  }
  if (trace != nullptr) trace->selected_epoch = best_epoch;
  return best;
}

}  // namespace pbcert
