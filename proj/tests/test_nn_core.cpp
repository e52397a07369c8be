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

#include <cmath>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pbcert/data_pipeline.hpp"
#include "pbcert/nn_core.hpp"
#include "pbcert/random.hpp"

namespace pbcert {
namespace {

WeightSet random_weights(const FcnArchitecture& arch, std::uint64_t seed, double scale = 0.7) {
  Engine e(seed);
  NormalSampler n(e);
  Eigen::VectorXd v(static_cast<Eigen::Index>(arch.parameter_count()));
  n.fill(v);
  return WeightSet(arch, scale * v);
}

Eigen::MatrixXd random_inputs(std::size_t d, std::size_t b, std::uint64_t seed) {
  Engine e(seed);
  NormalSampler n(e);
  Eigen::MatrixXd x(d, b);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    Eigen::VectorXd c(static_cast<Eigen::Index>(d));
    n.fill(c);
    x.col(j) = c;
  }
  return x;
}

Dataset separable_blobs(std::size_t n, std::uint64_t seed) {
  return GaussianBlobs::two_class(2, 8.0, 1.0).sample(n, seed);
}

TEST(Architecture, LayoutAndCounts) {
  const FcnArchitecture a({2, 4, 4, 2});
  EXPECT_EQ(a.parameter_count(), 42u);
  EXPECT_EQ(a.weight_offset(0), 0u);
  EXPECT_EQ(a.bias_offset(0), 8u);
  EXPECT_EQ(a.weight_offset(1), 12u);
  EXPECT_EQ(a.bias_offset(2), 40u);
  const FcnArchitecture s = FcnArchitecture::standard(57, 2);
  EXPECT_EQ(s.layer_sizes(), (std::vector<std::size_t>{57, 100, 100, 2}));
  EXPECT_THROW(FcnArchitecture({2, 3, 2}), std::invalid_argument);
  EXPECT_THROW(FcnArchitecture({2, 0, 3, 2}), std::invalid_argument);
}

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  const FcnArchitecture a({3, 5, 5, 4});
  const WeightSet w(a);
  const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(3, -2.0, 5.0);
  EXPECT_TRUE(fcn_forward(w, x).isZero(0.0));
}

TEST(Forward, MatchesHandComputation) {
  const FcnArchitecture a({2, 2, 2, 2});
  WeightSet w(a);
  w.weight(0) << 1, -1, 2, 0.5;
  w.bias(0) << 0.1, -3.0;
  w.weight(1).setIdentity();
  w.bias(1).setZero();
  w.weight(2) << 1, 0, 0, -1;
  w.bias(2) << 0.0, 0.25;
  const Eigen::Vector2d x(1.0, 2.0);
  // h1 = relu([1 -1; 2 .5] x + b) = relu([-0.9, -1]) = 0
  EXPECT_TRUE(fcn_forward(w, x).isApprox(Eigen::Vector2d(0.0, 0.25)));
  const Eigen::Vector2d x2(3.0, 0.0);
  // h1 = relu([3.1, 3]) ; out = [3.1, -3 + .25]
  EXPECT_TRUE(fcn_forward(w, x2).isApprox(Eigen::Vector2d(3.1, -2.75)));
}

TEST(Forward, DimensionMismatchThrows) {
  const FcnArchitecture a({3, 4, 4, 2});
  const WeightSet w(a);
  EXPECT_THROW(fcn_forward(w, Eigen::VectorXd::Zero(2)), std::invalid_argument);
  EXPECT_THROW(WeightSet(a, Eigen::VectorXd::Zero(5)), std::invalid_argument);
}

TEST(Forward, BatchAndFloatAgreeWithSingle) {
  const FcnArchitecture a({6, 10, 8, 3});
  const WeightSet w = random_weights(a, 1);
  const Eigen::MatrixXd x = random_inputs(6, 20, 2);
  const Eigen::MatrixXd batch = fcn_forward_batch(w, x);
  const Eigen::VectorXf pf = w.values().cast<float>();
  const Eigen::MatrixXf fb = fcn_forward_batch(a, pf.data(), x.cast<float>());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const Eigen::VectorXd single = fcn_forward(w, x.col(j));
    EXPECT_TRUE(single.isApprox(batch.col(j), 1e-12));
    EXPECT_LT((fb.col(j).cast<double>() - single).cwiseAbs().maxCoeff(), 1e-4 * (1.0 + single.cwiseAbs().maxCoeff()));
  }
}

TEST(Losses, BoundedXentRangeAndFloor) {
  const double p_min = 1e-4;
  for (double big : {1e4, -1e4, 0.0, 30.0}) {
    for (int y : {0, 1, 2}) {
      Eigen::Vector3d z(big, -big, 0.5 * big);
      const LossGrad l = bounded_xent(z, y, p_min);
      EXPECT_GE(l.loss, 0.0);
      EXPECT_LE(l.loss, 1.0);
      EXPECT_TRUE(l.grad.allFinite());
    }
  }
  // p_y far below the floor: loss exactly 1 and no gradient.
  const LossGrad floored = bounded_xent(Eigen::Vector2d(50.0, 0.0), 1, p_min);
  EXPECT_DOUBLE_EQ(floored.loss, 1.0);
  EXPECT_TRUE(floored.grad.isZero(0.0));
  // Uniform logits over two classes.
  const LossGrad even = bounded_xent(Eigen::Vector2d(0.0, 0.0), 0, p_min);
  EXPECT_NEAR(even.loss, std::log(2.0) / std::log(1.0 / p_min), 1e-15);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  const Eigen::Vector3d z(0.3, -1.2, 0.8);
  for (int y = 0; y < 3; ++y) {
    const LossGrad b = bounded_xent(z, y, 1e-4);
    const Eigen::VectorXd fb = oracle::central_difference(
        [&](const Eigen::VectorXd& v) { return bounded_xent(v, y, 1e-4).loss; }, z);
    EXPECT_LT(oracle::max_relative_error(b.grad, fb), 1e-6);
    const LossGrad c = cross_entropy(z, y);
    const Eigen::VectorXd fc =
        oracle::central_difference([&](const Eigen::VectorXd& v) { return cross_entropy(v, y).loss; }, z);
    EXPECT_LT(oracle::max_relative_error(c.grad, fc), 1e-6);
    EXPECT_NEAR(b.loss, c.loss / std::log(1e4), 1e-14);
  }
}

TEST(Losses, ZeroOneTiesGoToLowestClass) {
  EXPECT_EQ(predict_class(Eigen::Vector3d(1.0, 1.0, 0.0)), 0);
  EXPECT_EQ(predict_class(Eigen::Vector3d(0.0, 2.0, 2.0)), 1);
  EXPECT_EQ(zero_one(Eigen::Vector2d(0.0, 0.0), 0), 0);
  EXPECT_EQ(zero_one(Eigen::Vector2d(0.0, 0.0), 1), 1);
}

TEST(Backprop, MatchesFiniteDifferencesOnSmallNet) {
  const FcnArchitecture a({2, 4, 4, 2});
  const Eigen::MatrixXd x = random_inputs(2, 7, 3);
  const std::vector<int> y{0, 1, 1, 0, 1, 0, 0};
  for (LossKind kind : {LossKind::BoundedCrossEntropy, LossKind::CrossEntropy}) {
    for (std::uint64_t seed = 10; seed < 15; ++seed) {
      const WeightSet w = random_weights(a, seed);
      const LossSpec spec{1e-4, kind};
      const LossGrad g = backprop(w, x, y, spec);
      const Eigen::VectorXd fd = oracle::central_difference(
          [&](const Eigen::VectorXd& p) { return backprop(WeightSet(a, p), x, y, spec).loss; }, w.values());
      EXPECT_LT(oracle::max_relative_error(g.grad, fd), 1e-4);
    }
  }
}

TEST(Backprop, WithFixedDropoutMasks) {
  const FcnArchitecture a({3, 6, 5, 3});
  const Eigen::MatrixXd x = random_inputs(3, 5, 4);
  const std::vector<int> y{0, 2, 1, 1, 0};
  Engine e(9);
  const DropoutMasks masks = sample_dropout(a, 5, 0.3, true, e);
  const WeightSet w = random_weights(a, 21);
  const LossSpec spec{1e-4, LossKind::CrossEntropy};
  const LossGrad g = backprop(w, x, y, spec, &masks);
  const Eigen::VectorXd fd = oracle::central_difference(
      [&](const Eigen::VectorXd& p) { return backprop(WeightSet(a, p), x, y, spec, &masks).loss; }, w.values());
  EXPECT_LT(oracle::max_relative_error(g.grad, fd), 1e-4);
}

TEST(Backprop, ZeroOneHasNoGradient) {
  const FcnArchitecture a({2, 3, 3, 2});
  EXPECT_THROW(backprop(WeightSet(a), random_inputs(2, 2, 1), std::vector<int>{0, 1},
                        LossSpec{1e-4, LossKind::ZeroOne}),
               std::invalid_argument);
}

TEST(Dropout, MasksAreInverted) {
  const FcnArchitecture a({3, 50, 40, 2});
  Engine e(1);
  const DropoutMasks m = sample_dropout(a, 100, 0.2, false, e);
  ASSERT_EQ(m.hidden.size(), 2u);
  EXPECT_EQ(m.input.size(), 0);
  for (const Eigen::MatrixXd& h : m.hidden) {
    for (Eigen::Index i = 0; i < h.size(); ++i) {
      const double v = h.data()[i];
      EXPECT_TRUE(v == 0.0 || std::abs(v - 1.25) < 1e-15);
    }
  }
  Engine e0(1);
  const DropoutMasks none = sample_dropout(a, 10, 0.0, false, e0);
  for (const Eigen::MatrixXd& h : none.hidden) EXPECT_TRUE(h.isOnes(0.0));
}

TEST(Dropout, RateZeroMasksAreNoOp) {
  const FcnArchitecture a({3, 6, 5, 2});
  const Eigen::MatrixXd x = random_inputs(3, 4, 8);
  const std::vector<int> y{0, 1, 1, 0};
  const WeightSet w = random_weights(a, 2);
  Engine e(4);
  const DropoutMasks m = sample_dropout(a, 4, 0.0, false, e);
  const LossSpec spec;
  EXPECT_EQ(backprop(w, x, y, spec, &m).loss, backprop(w, x, y, spec).loss);
}

TEST(Sgd, MomentumRecurrence) {
  Eigen::VectorXd p = Eigen::VectorXd::Constant(3, 1.0);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(3);
  const Eigen::VectorXd g = Eigen::Vector3d(0.5, -1.0, 2.0);
  sgd_momentum_step(p, g, v, 0.1, 0.9);
  sgd_momentum_step(p, g, v, 0.1, 0.9);
  EXPECT_TRUE((Eigen::VectorXd::Constant(3, 1.0) - p).isApprox(0.1 * g * 2.9, 1e-14));

  Eigen::VectorXd q = Eigen::VectorXd::Constant(3, 1.0);
  Eigen::VectorXd vq = Eigen::VectorXd::Zero(3);
  sgd_momentum_step(q, g, vq, 0.1, 0.0);
  EXPECT_TRUE(q.isApprox(Eigen::VectorXd::Constant(3, 1.0) - 0.1 * g));

  Eigen::VectorXd r = Eigen::VectorXd::Constant(3, 2.0);
  Eigen::VectorXd vr = Eigen::VectorXd::Zero(3);
  sgd_momentum_step(r, Eigen::VectorXd::Zero(3), vr, 0.1, 0.9);
  EXPECT_TRUE(r.isConstant(2.0, 0.0));
}

TEST(Sgd, ClipGradNorm) {
  Eigen::VectorXd g = Eigen::Vector2d(3.0, 4.0);
  clip_grad_norm(g, 1.0);
  EXPECT_NEAR(g.norm(), 1.0, 1e-15);
  Eigen::VectorXd h = Eigen::Vector2d(3.0, 4.0);
  clip_grad_norm(h, 0.0);
  EXPECT_EQ(h, Eigen::VectorXd(Eigen::Vector2d(3.0, 4.0)));
}

TEST(Init, TruncatedGaussianMoments) {
  const FcnArchitecture a({100, 1000, 1, 1});
  const WeightSet w = init_weights(a, 17);
  const auto w0 = w.weight(0);
  const double bound = 2.0 / std::sqrt(100.0);
  EXPECT_LE(w0.cwiseAbs().maxCoeff(), bound);
  const double mean = w0.mean();
  const double sd = std::sqrt((w0.array() - mean).square().mean());
  const double expect = oracle::truncated_normal_std_ratio() / std::sqrt(100.0);
  EXPECT_NEAR(expect * std::sqrt(100.0), 0.8796, 1e-4);
  EXPECT_NEAR(sd, expect, 0.05 * expect);
  EXPECT_TRUE(w.bias(0).isZero(0.0));
  EXPECT_EQ(init_weights(a, 17), w);
  EXPECT_NE(init_weights(a, 18), w);
}

TEST(Erm, ZeroEpochsReturnsInit) {
  const Dataset d = separable_blobs(50, 1);
  const WeightSet init = init_weights(FcnArchitecture::standard(2, 2, 8), 3);
  TrainConfigErm cfg;
  cfg.epochs = 0;
  EXPECT_EQ(erm_train(d, cfg, init), init);
}

TEST(Erm, SeparableBlobsAreLearned) {
  const Dataset d = separable_blobs(200, 2);
  const WeightSet init = init_weights(FcnArchitecture::standard(2, 2), 5);
  TrainConfigErm cfg;
  cfg.epochs = 100;
  cfg.batch_size = 20;
  cfg.seed = 7;
  const WeightSet w = erm_train(d, cfg, init);
  EXPECT_LE(zero_one_error(w, d), 0.02);
}

TEST(Erm, LossDecreasesOverFirstEpochs) {
  const Dataset d = separable_blobs(200, 4);
  const WeightSet init = init_weights(FcnArchitecture::standard(2, 2), 6);
  TrainConfigErm cfg;
  cfg.epochs = 10;
  cfg.batch_size = 20;
  cfg.dropout_rate = 0.0;
  ErmTrace trace;
  erm_train(d, cfg, init, nullptr, &trace);
  ASSERT_EQ(trace.epoch_loss.size(), 10u);
  for (std::size_t i = 1; i < trace.epoch_loss.size(); ++i) {
    EXPECT_LE(trace.epoch_loss[i], trace.epoch_loss[i - 1]) << "epoch " << i;
  }
}

TEST(Erm, DeterministicGivenSeed) {
  const Dataset d = separable_blobs(120, 8);
  const WeightSet init = init_weights(FcnArchitecture::standard(2, 2, 16), 1);
  TrainConfigErm cfg;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.seed = 99;
  EXPECT_EQ(erm_train(d, cfg, init), erm_train(d, cfg, init));
  TrainConfigErm other = cfg;
  other.seed = 100;
  EXPECT_NE(erm_train(d, other, init), erm_train(d, cfg, init));
}

TEST(Erm, ValidationSelectsACheckpoint) {
  const Dataset d = separable_blobs(100, 9);
  const Dataset v = separable_blobs(40, 10);
  const WeightSet init = init_weights(FcnArchitecture::standard(2, 2, 16), 2);
  TrainConfigErm cfg;
  cfg.epochs = 25;
  cfg.batch_size = 25;
  cfg.checkpoint_every = 5;
  ErmTrace trace;
  const WeightSet w = erm_train(d, cfg, init, &v, &trace);
  EXPECT_EQ(trace.selected_epoch % 5, 0u);
  EXPECT_LE(trace.selected_epoch, 25u);
  EXPECT_LE(zero_one_error(w, v), zero_one_error(init, v));
}

TEST(Erm, ConfigValidation) {
  TrainConfigErm cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrainConfigErm{};
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrainConfigErm{};
  cfg.dropout_rate = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace pbcert
