#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "oracles.hpp"
#include "roto/networks.hpp"

using namespace roto;
using namespace roto::nn;

TEST(Networks, StockArchitecturesHaveExpectedWidths) {
  Architecture mlp = mlp_small(8, 5);
  EXPECT_EQ(mlp.feature_dim(), 64u);
  Architecture conv = conv_tiny(5);
  conv.validate();
  EXPECT_EQ(conv.feature_dim(), 16u);
  EXPECT_EQ(conv.conv_output_shape(1), (Shape{7, 7, 16}));
  EXPECT_EQ(conv.conv_output_shape(3), (Shape{3, 3, 16}));

  Rng rng(1);
  ModelParams p = ModelParams::init(mlp, rng);
  EXPECT_EQ(p.count(), 8u * 64 + 64 + 64 * 64 + 64 + 64 * 5 + 5);
  EXPECT_EQ(p.encoder().size(), 4u);
  EXPECT_EQ(p.head().size(), 2u);
}

TEST(Networks, IdentityDenseEncoderPassesInputThrough) {
  Architecture a;
  a.input = Shape{3};
  a.encoder = {LayerSpec{LayerKind::Dense, 3, 3, 0, Activation::None, false, false}};
  a.outputs = 2;
  a.validate();
  Tape t;
  Var w = t.variable(Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  Tensor x = Tensor::matrix(2, 3, {0.5, -1.0, 2.0, 3.0, 0.0, -0.25});
  std::vector<Var> theta{w};
  ForwardTrace tr = encoder_forward(a, theta, t.constant(x));
  EXPECT_EQ(tr.features.value(), x);
  EXPECT_TRUE(tr.isi_masks.empty());
}

TEST(Networks, ZeroHeadGivesZeroLogitsAndLogNLoss) {
  Architecture a = mlp_small(4, 5);
  ModelParams p = ModelParams::zeros(a);
  Tape t;
  auto vars = as_variables(t, p.tensors);
  Tensor x(Shape{5, 4}, 0.3);
  ForwardTrace tr = forward(a, vars, t.constant(x));
  EXPECT_EQ(tr.logits.value(), Tensor(Shape{5, 5}, 0.0));
  LabeledSet d{x, {0, 1, 2, 3, 4}, {}};
  EXPECT_NEAR(task_loss(tr.logits, d).item(), std::log(5.0), 1e-15);
}

TEST(Networks, OneHotHeadOnOrthonormalFeatures) {
  Architecture a;
  a.input = Shape{4};
  a.outputs = 4;
  a.head_bias = false;
  Tape t;
  Var W = t.constant(Tensor::matrix(4, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}));
  Tensor z = Tensor::matrix(4, 4, {0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0});
  std::vector<Var> phi{W};
  auto pred = argmax_rows(classifier_forward(a, phi, t.constant(z)).value());
  EXPECT_EQ(pred, (std::vector<int>{2, 0, 3, 1}));
}

TEST(Networks, FeatureWidthMismatchThrows) {
  Architecture a = mlp_small(4, 3);
  ModelParams p = ModelParams::zeros(a);
  Tape t;
  auto vars = as_variables(t, p.tensors);
  std::span<const Var> phi(vars.data() + 4, 2);
  EXPECT_THROW(classifier_forward(a, phi, t.constant(Tensor(Shape{2, 10}))), ShapeError);
  std::span<const Var> theta(vars.data(), 4);
  EXPECT_THROW(encoder_forward(a, theta, t.constant(Tensor(Shape{2, 5}))), ShapeError);
}

TEST(Networks, RotationPreservesRowNorms) {
  Rng rng(4);
  const int m = 16;
  Eigen::MatrixXd S = Eigen::MatrixXd::NullaryExpr(m, m, [&] { return rng.normal(); });
  Eigen::MatrixXd A = S - S.transpose();
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(m, m);
  Eigen::MatrixXd gamma = (I - A) * (I + A).inverse();
  Tape t;
  Tensor z = oracle::random_tensor(Shape{6, static_cast<std::size_t>(m)}, rng, -3, 3);
  Tensor r = rotate_features(t.constant(z), gamma).value();
  for (std::size_t i = 0; i < 6; ++i) {
    double a = 0, b = 0;
    for (int j = 0; j < m; ++j) {
      a += z.at(i, j) * z.at(i, j);
      b += r.at(i, j) * r.at(i, j);
    }
    EXPECT_NEAR(std::sqrt(a), std::sqrt(b), 1e-9);
  }
}

TEST(Networks, ConvEncoderWithIsiIsDeterministicGivenSeed) {
  Architecture a = conv_tiny(5);
  Rng init(3);
  ModelParams p = ModelParams::init(a, init);
  Rng data(5);
  Tensor x = oracle::random_tensor(Shape{2, 16, 16, 1}, data, 0, 1);
  isi::ISIConfig cfg;
  cfg.enabled = true;
  cfg.drop_rate = 0.3;
  auto run = [&](std::uint64_t seed) {
    Rng r(seed);
    IsiHook hook{&cfg, &r, true};
    Tape t;
    auto vars = as_variables(t, p.tensors);
    ForwardTrace tr = forward(a, vars, t.constant(x), &hook);
    return std::make_pair(tr.logits.value(), tr.isi_masks);
  };
  auto r1 = run(42), r2 = run(42), r3 = run(43);
  EXPECT_EQ(r1.first, r2.first);
  ASSERT_EQ(r1.second.size(), 2u);
  EXPECT_EQ(r1.second[0], r2.second[0]);
  EXPECT_EQ(r1.second[0].shape(), (Shape{2, 14, 14, 16}));
  EXPECT_EQ(r1.second[1].shape(), (Shape{2, 5, 5, 16}));
  EXPECT_FALSE(r1.second[0] == r3.second[0]);
}

TEST(Networks, IsiInactiveOutsideTraining) {
  Architecture a = conv_tiny(3);
  Rng init(3);
  ModelParams p = ModelParams::init(a, init);
  Rng data(6);
  Tensor x = oracle::random_tensor(Shape{1, 16, 16, 1}, data, 0, 1);
  isi::ISIConfig cfg;
  cfg.enabled = true;
  Rng r(1);
  IsiHook hook{&cfg, &r, false};
  Tape t;
  auto vars = as_variables(t, p.tensors);
  ForwardTrace with = forward(a, vars, t.constant(x), &hook);
  ForwardTrace without = forward(a, vars, t.constant(x));
  EXPECT_TRUE(with.isi_masks.empty());
  EXPECT_EQ(with.logits.value(), without.logits.value());
}
