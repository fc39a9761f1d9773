#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "mmfuse/loss.hpp"
#include "mmfuse/model.hpp"
#include "test_oracles.hpp"

namespace mmfuse {
namespace {

using testing::central_difference;
using testing::focal_value;
using testing::naive_softmax;
using testing::norm_rel_error;

Matrix random_clip(Rng& rng, std::size_t t, std::size_t d) {
  Matrix m(t, d);
  for (double& x : m.flat()) x = rng.gaussian();
  return m;
}

HeadParams random_params(Rng& rng, std::size_t d, std::size_t h, std::size_t k) {
  HeadParams p = init_params(rng, d, h, k);
  for (double& b : p.b1) b = 0.1 * rng.gaussian();
  for (double& b : p.b2) b = 0.1 * rng.gaussian();
  return p;
}

// Loss of the head written out with plain loops, parameters passed flat in
// w1, b1, w2, b2 order.
double naive_head_loss(const std::vector<double>& flat, std::size_t d, std::size_t h, std::size_t k,
                       const Matrix& clip, std::size_t label, double gamma) {
  const double* w1 = flat.data();
  const double* b1 = w1 + h * d;
  const double* w2 = b1 + h;
  const double* b2 = w2 + k * h;
  std::vector<double> pooled(d, 0.0);
  for (std::size_t t = 0; t < clip.rows(); ++t)
    for (std::size_t j = 0; j < d; ++j) pooled[j] += clip(t, j) / static_cast<double>(clip.rows());
  std::vector<double> hidden(h);
  for (std::size_t i = 0; i < h; ++i) {
    double a = b1[i];
    for (std::size_t j = 0; j < d; ++j) a += w1[i * d + j] * pooled[j];
    hidden[i] = a > 0 ? a : 0;
  }
  std::vector<double> logits(k);
  for (std::size_t c = 0; c < k; ++c) {
    double a = b2[c];
    for (std::size_t i = 0; i < h; ++i) a += w2[c * h + i] * hidden[i];
    logits[c] = a;
  }
  return focal_value(naive_softmax(logits), label, gamma);
}

std::vector<double> flat_grads(const HeadGrads& g) {
  std::vector<double> out;
  for (auto t : g.tensors()) out.insert(out.end(), t.begin(), t.end());
  return out;
}

TEST(InitParams, Shapes) {
  Rng rng(1);
  const HeadParams p = init_params(rng, 8, 16, 4);
  EXPECT_EQ(p.w1.rows(), 16u);
  EXPECT_EQ(p.w1.cols(), 8u);
  EXPECT_EQ(p.b1.size(), 16u);
  EXPECT_EQ(p.w2.rows(), 4u);
  EXPECT_EQ(p.w2.cols(), 16u);
  EXPECT_EQ(p.b2.size(), 4u);
  EXPECT_NO_THROW(p.validate());
}

TEST(InitParams, DeterministicWithZeroBiases) {
  Rng a(9), b(9);
  const HeadParams pa = init_params(a, 8, 16, 4), pb = init_params(b, 8, 16, 4);
  EXPECT_EQ(pa, pb);
  EXPECT_TRUE(std::ranges::all_of(pa.b1, [](double x) { return x == 0.0; }));
  EXPECT_TRUE(std::ranges::all_of(pa.b2, [](double x) { return x == 0.0; }));
}

TEST(InitParams, HeScaling) {
  Rng rng(3);
  const HeadParams p = init_params(rng, 50, 400, 30);
  double ss = 0.0;
  for (double w : p.w1.flat()) ss += w * w;
  EXPECT_NEAR(ss / static_cast<double>(p.w1.size()), 2.0 / 50.0, 0.004);
}

TEST(InitParams, RejectsZeroDims) {
  Rng rng(1);
  EXPECT_THROW(init_params(rng, 0, 4, 3), std::invalid_argument);
  EXPECT_THROW(init_params(rng, 4, 0, 3), std::invalid_argument);
  EXPECT_THROW(init_params(rng, 4, 4, 0), std::invalid_argument);
}

TEST(Forward, SingleFramePoolsToItself) {
  Rng rng(2);
  const HeadParams p = init_params(rng, 3, 4, 2);
  const Matrix clip(1, 3, {0.5, -1.0, 2.0});
  EXPECT_EQ(forward(p, clip).pooled, (Vector{0.5, -1.0, 2.0}));
}

TEST(Forward, IdenticalFramesPoolToThatFrame) {
  Rng rng(2);
  const HeadParams p = init_params(rng, 3, 4, 2);
  Matrix clip(16, 3);
  for (std::size_t t = 0; t < 16; ++t) {
    clip(t, 0) = 0.25;
    clip(t, 1) = -4.0;
    clip(t, 2) = 1.5;
  }
  EXPECT_EQ(forward(p, clip).pooled, (Vector{0.25, -4.0, 1.5}));
}

TEST(Forward, ZeroParamsGiveUniform) {
  const HeadParams p = HeadParams::zeros(3, 4, 5);
  Rng rng(4);
  for (double q : forward(p, random_clip(rng, 6, 3)).probs) EXPECT_DOUBLE_EQ(q, 0.2);
}

TEST(Forward, TraceIsConsistent) {
  Rng rng(5);
  const HeadParams p = random_params(rng, 4, 8, 3);
  const ForwardTrace tr = forward(p, random_clip(rng, 7, 4));
  EXPECT_EQ(tr.probs, softmax(tr.logits));
  for (std::size_t i = 0; i < tr.hidden.size(); ++i) EXPECT_EQ(tr.mask[i], tr.hidden[i] > 0 ? 1.0 : 0.0);
}

TEST(Forward, RejectsWidthMismatch) {
  Rng rng(6);
  const HeadParams p = init_params(rng, 4, 5, 3);
  EXPECT_THROW(forward(p, Matrix(3, 5)), ShapeError);
  EXPECT_THROW(forward(p, Matrix(0, 4)), ShapeError);
}

TEST(Forward, FramePermutationInvariant) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const HeadParams p = random_params(rng, 6, 10, 4);
    const Matrix clip = random_clip(rng, 12, 6);
    std::vector<std::size_t> order(12);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    Matrix permuted(12, 6);
    for (std::size_t t = 0; t < 12; ++t) std::ranges::copy(clip.row(order[t]), permuted.row(t).begin());
    const ProbDist a = forward(p, clip).probs, b = forward(p, permuted).probs;
    for (std::size_t c = 0; c < a.size(); ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
  }
}

TEST(PredictProba, MatchesForward) {
  Rng rng(8);
  const HeadParams p = random_params(rng, 4, 6, 5);
  const Matrix clip = random_clip(rng, 9, 4);
  const ProbDist q = predict_proba(p, clip);
  EXPECT_EQ(q, forward(p, clip).probs);
  EXPECT_EQ(q, predict_proba(p, clip));
  EXPECT_NEAR(std::accumulate(q.begin(), q.end(), 0.0), 1.0, 1e-12);
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
  Rng rng(9);
  const HeadParams p = random_params(rng, 4, 5, 3);
  const HeadGrads g = backward(p, forward(p, random_clip(rng, 3, 4)), Vector(3, 0.0));
  for (double x : flat_grads(g)) EXPECT_EQ(x, 0.0);
}

TEST(Backward, OutputBiasGradientIsUpstream) {
  HeadParams p = HeadParams::zeros(4, 4, 3);
  p.w1 = Matrix::identity(4);
  Rng rng(10);
  for (double& w : p.w2.flat()) w = rng.gaussian();
  const Matrix clip(2, 4, {1, 2, 3, 4, 3, 2, 1, 2});  // all-positive hidden
  const ForwardTrace tr = forward(p, clip);
  ASSERT_TRUE(std::ranges::all_of(tr.mask, [](double m) { return m == 1.0; }));
  const Vector up{0.3, -0.1, -0.2};
  const HeadGrads g = backward(p, tr, up);
  EXPECT_EQ(g.b2, up);
  // Identity first layer: grad_b1 = w2^T up.
  EXPECT_EQ(g.b1, matvec_transposed(p.w2, up));
}

TEST(Backward, RejectsWrongUpstreamLength) {
  Rng rng(11);
  const HeadParams p = random_params(rng, 4, 5, 3);
  EXPECT_THROW(backward(p, forward(p, random_clip(rng, 2, 4)), Vector(4, 0.0)), ShapeError);
}

TEST(Backward, MatchesFiniteDifferencesSmallHead) {
  constexpr std::size_t d = 4, h = 5, k = 3;
  Rng rng(12);
  const HeadParams p = random_params(rng, d, h, k);
  const Matrix clip = random_clip(rng, 5, d);
  const std::size_t label = 2;
  const ForwardTrace tr = forward(p, clip);
  const auto analytic = flat_grads(backward(p, tr, ce_loss(tr.probs, label).grad_logits));
  const auto numeric = central_difference(
      [&](const std::vector<double>& flat) { return naive_head_loss(flat, d, h, k, clip, label, 0.0); },
      flat_grads(p));
  EXPECT_LE(norm_rel_error(analytic, numeric), 1e-6);
}

TEST(Backward, EndToEndFiniteDifferences) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 2 + rng.uniform_index(5), h = 2 + rng.uniform_index(6),
                      k = 2 + rng.uniform_index(4);
    const HeadParams p = random_params(rng, d, h, k);
    const Matrix clip = random_clip(rng, 1 + rng.uniform_index(8), d);
    const std::size_t label = rng.uniform_index(k);
    const ForwardTrace tr = forward(p, clip);
    for (double gamma : {0.0, 0.1, 2.0}) {
      const Vector gl = gamma == 0.0 ? ce_loss(tr.probs, label).grad_logits
                                     : focal_loss(tr.probs, label, gamma).grad_logits;
      const auto analytic = flat_grads(backward(p, tr, gl));
      const auto numeric = central_difference(
          [&](const std::vector<double>& flat) {
            return naive_head_loss(flat, d, h, k, clip, label, gamma);
          },
          flat_grads(p));
      EXPECT_LE(norm_rel_error(analytic, numeric), 1e-6) << "trial " << trial << " gamma " << gamma;
    }
  }
}

TEST(Backward, SmallGradientStepDecreasesLoss) {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const double gamma = trial % 2 ? 2.0 : 0.0;
    HeadParams p = random_params(rng, 4, 6, 3);
    const Matrix clip = random_clip(rng, 4, 4);
    const std::size_t label = rng.uniform_index(3);
    const ForwardTrace tr = forward(p, clip);
    const double before = focal_loss(tr.probs, label, gamma).value;
    const HeadGrads g = backward(p, tr, focal_loss(tr.probs, label, gamma).grad_logits);
    accumulate(p, g, -1e-3);
    const double after = focal_loss(predict_proba(p, clip), label, gamma).value;
    EXPECT_LT(after, before) << "trial " << trial;
  }
}

}  // namespace
}  // namespace mmfuse
