#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mmfuse/loss.hpp"
#include "test_oracles.hpp"

namespace mmfuse {
namespace {

using testing::central_difference;
using testing::focal_value;
using testing::naive_softmax;
using testing::norm_rel_error;

// Scalar oracles, evaluated directly from the definitions.
const double kLn2 = std::log(2.0);
const double kNegLn09 = -std::log(0.9);

TEST(CeLoss, HalfHalf) {
  const LossValue l = ce_loss(Vector{0.5, 0.5}, 0);
  EXPECT_NEAR(l.value, kLn2, 1e-15);
  EXPECT_NEAR(l.value, 0.693147, 1e-6);
  EXPECT_EQ(l.grad_logits, (Vector{-0.5, 0.5}));
}

TEST(CeLoss, PerfectPredictionIsZero) {
  EXPECT_EQ(ce_loss(Vector{0.0, 1.0, 0.0}, 1).value, 0.0);
}

TEST(CeLoss, ConfidentCorrect) {
  EXPECT_NEAR(ce_loss(Vector{0.9, 0.05, 0.05}, 0).value, kNegLn09, 1e-15);
  EXPECT_NEAR(ce_loss(Vector{0.9, 0.05, 0.05}, 0).value, 0.105361, 1e-6);
}

TEST(CeLoss, RejectsLabelOutOfRange) {
  EXPECT_THROW(ce_loss(Vector{0.5, 0.5}, 2), std::out_of_range);
}

TEST(CeLoss, ClampsZeroProbability) {
  const LossValue l = ce_loss(Vector{1.0, 0.0}, 1);
  EXPECT_NEAR(l.value, -std::log(kProbFloor), 1e-9);
  EXPECT_TRUE(std::isfinite(l.value));
}

TEST(FocalLoss, HalfHalfGammaTwo) {
  const double oracle = 0.25 * kLn2;
  EXPECT_NEAR(focal_loss(Vector{0.5, 0.5}, 0, 2.0).value, oracle, 1e-15);
  EXPECT_NEAR(focal_loss(Vector{0.5, 0.5}, 0, 2.0).value, 0.173287, 1e-6);
}

TEST(FocalLoss, ConfidentCorrectGammaTwo) {
  const double oracle = 0.01 * kNegLn09;
  EXPECT_NEAR(focal_loss(Vector{0.9, 0.05, 0.05}, 0, 2.0).value, oracle, 1e-15);
  EXPECT_NEAR(focal_loss(Vector{0.9, 0.05, 0.05}, 0, 2.0).value, 0.00105361, 1e-8);
}

TEST(FocalLoss, RejectsBadArguments) {
  EXPECT_THROW(focal_loss(Vector{0.5, 0.5}, 0, -0.1), std::invalid_argument);
  EXPECT_THROW(focal_loss(Vector{0.5, 0.5}, 5, 1.0), std::out_of_range);
}

TEST(FocalLoss, FiniteAtCertaintyForSmallGamma) {
  const LossValue l = focal_loss(Vector{1.0, 0.0}, 0, 0.1);
  EXPECT_TRUE(std::isfinite(l.value));
  for (double g : l.grad_logits) EXPECT_TRUE(std::isfinite(g));
}

TEST(FocalLoss, GammaZeroIsCrossEntropy) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    Vector z = rng_gaussian(rng, 2 + rng.uniform_index(15));
    for (double& x : z) x *= 3.0;
    const ProbDist p = softmax(z);
    const std::size_t label = rng.uniform_index(p.size());
    const LossValue ce = ce_loss(p, label);
    const LossValue fl = focal_loss(p, label, 0.0);
    EXPECT_NEAR(fl.value, ce.value, 1e-12);
    for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(fl.grad_logits[k], ce.grad_logits[k], 1e-12);
  }
}

TEST(FocalLoss, NeverExceedsCrossEntropy) {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    Vector z = rng_gaussian(rng, 2 + rng.uniform_index(8));
    const ProbDist p = softmax(z);
    const std::size_t label = rng.uniform_index(p.size());
    const double gamma = 0.05 + 3.0 * rng.uniform();
    EXPECT_LT(focal_loss(p, label, gamma).value, ce_loss(p, label).value);
  }
}

TEST(FocalLoss, StrictlyDecreasingInTrueClassProbability) {
  for (double gamma : {0.1, 0.5, 1.0, 2.0}) {
    double prev = focal_loss(Vector{0.001, 0.999}, 0, gamma).value;
    for (int i = 2; i < 1000; ++i) {
      const double pt = i / 1000.0;
      const double v = focal_loss(Vector{pt, 1.0 - pt}, 0, gamma).value;
      EXPECT_LT(v, prev) << "gamma " << gamma << " pt " << pt;
      prev = v;
    }
  }
}

TEST(FocalLoss, ValueMatchesUnclampedDefinition) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector z = rng_gaussian(rng, 5);
    const auto p = naive_softmax(z);
    const std::size_t t = rng.uniform_index(5);
    const double gamma = 2.0 * rng.uniform();
    EXPECT_NEAR(focal_loss(softmax(z), t, gamma).value, focal_value(p, t, gamma), 1e-12);
  }
}

TEST(FocalLoss, LogitGradientMatchesFiniteDifferences) {
  Rng rng(4);
  for (double gamma : {0.0, 0.1, 0.5, 1.0, 2.0}) {
    for (int trial = 0; trial < 40; ++trial) {
      Vector z = rng_gaussian(rng, 2 + rng.uniform_index(7));
      for (double& x : z) x *= 2.0;
      const std::size_t t = rng.uniform_index(z.size());
      const Vector analytic = focal_loss(softmax(z), t, gamma).grad_logits;
      const auto numeric = central_difference(
          [&](const std::vector<double>& zz) { return focal_value(naive_softmax(zz), t, gamma); }, z);
      EXPECT_LE(norm_rel_error(analytic, numeric), 1e-6) << "gamma " << gamma;
    }
  }
}

TEST(GammaSchedule, Endpoints) {
  const GammaSchedule s;
  EXPECT_EQ(gamma_at_epoch(s, 0), 2.0);
  EXPECT_NEAR(gamma_at_epoch(s, 19), 0.1, 1e-12);
}

TEST(GammaSchedule, GeometricMidpoint) {
  const GammaSchedule s{2.0, 0.1, 21};
  EXPECT_NEAR(gamma_at_epoch(s, 10), std::sqrt(0.2), 1e-12);
  EXPECT_NEAR(gamma_at_epoch(s, 10), 0.447214, 1e-6);
}

TEST(GammaSchedule, StrictlyDecreasing) {
  const GammaSchedule s;
  for (std::size_t e = 1; e < s.total_epochs; ++e)
    EXPECT_LT(gamma_at_epoch(s, e), gamma_at_epoch(s, e - 1));
}

TEST(GammaSchedule, ConstantRatioBetweenEpochs) {
  const GammaSchedule s{3.0, 0.2, 9};
  const double ratio = std::pow(0.2 / 3.0, 1.0 / 8.0);
  for (std::size_t e = 1; e < 9; ++e)
    EXPECT_NEAR(gamma_at_epoch(s, e) / gamma_at_epoch(s, e - 1), ratio, 1e-12);
}

TEST(GammaSchedule, SingleEpochReturnsStart) {
  EXPECT_EQ(gamma_at_epoch(GammaSchedule{2.0, 0.1, 1}, 0), 2.0);
}

TEST(GammaSchedule, Rejections) {
  EXPECT_THROW(gamma_at_epoch(GammaSchedule{}, 20), std::out_of_range);
  EXPECT_THROW(gamma_at_epoch(GammaSchedule{0.1, 2.0, 5}, 0), std::invalid_argument);
  EXPECT_THROW(gamma_at_epoch(GammaSchedule{0.0, 0.0, 5}, 0), std::invalid_argument);
  EXPECT_THROW(gamma_at_epoch(GammaSchedule{2.0, 0.1, 0}, 0), std::invalid_argument);
}

TEST(BatchLoss, SingleSampleEqualsSampleLoss) {
  const std::vector<ProbDist> probs{{0.2, 0.8}};
  const std::vector<std::size_t> labels{1};
  const BatchLoss b = batch_loss(probs, labels, 2.0);
  const LossValue l = focal_loss(probs[0], 1, 2.0);
  EXPECT_EQ(b.mean, l.value);
  EXPECT_EQ(b.grads[0], l.grad_logits);
}

TEST(BatchLoss, DuplicateSamplesKeepTheMean) {
  const std::vector<ProbDist> one{{0.3, 0.7}}, two{{0.3, 0.7}, {0.3, 0.7}};
  EXPECT_NEAR(batch_loss(two, std::vector<std::size_t>{0, 0}, 0.0).mean,
              batch_loss(one, std::vector<std::size_t>{0}, 0.0).mean, 1e-15);
}

TEST(BatchLoss, HandComputedMean) {
  const std::vector<ProbDist> probs{{0.5, 0.5}, {0.9, 0.05, 0.05}};
  const BatchLoss b = batch_loss(probs, std::vector<std::size_t>{0, 0}, 0.0);
  EXPECT_NEAR(b.mean, 0.5 * (kLn2 + kNegLn09), 1e-15);
  EXPECT_NEAR(b.mean, 0.399254, 1e-6);
  EXPECT_NEAR(b.grads[0][0], -0.25, 1e-15);
}

TEST(BatchLoss, Rejections) {
  const std::vector<ProbDist> probs{{0.5, 0.5}};
  EXPECT_THROW(batch_loss(probs, std::vector<std::size_t>{0, 1}, 0.0), ShapeError);
  EXPECT_THROW(batch_loss(std::vector<ProbDist>{}, std::vector<std::size_t>{}, 0.0),
               std::invalid_argument);
}

}  // namespace
}  // namespace mmfuse
