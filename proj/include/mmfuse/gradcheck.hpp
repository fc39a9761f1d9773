// Central finite-difference checks of the analytic gradients: loss-level
// (logits) and end-to-end through the classifier head.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/loss.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/numkernel.hpp"

namespace mmfuse {

inline constexpr double kGradcheckStep = 1e-6;
inline constexpr double kGradcheckTolerance = 1e-6;
inline constexpr std::array<double, 5> kGradcheckGammas{0.0, 0.1, 0.5, 1.0, 2.0};

/// ||a - n||_2 / max(||a||_2, ||n||_2); zero when both vanish.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::sqrt(std::max(na, nn));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

/// Central differences of f at x, one coordinate at a time.
inline Vector numeric_gradient(const std::function<double(std::span<const double>)>& f, Vector x,
                               double step = kGradcheckStep) {
  Vector grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f(x);
    x[i] = saved - step;
    const double down = f(x);
    x[i] = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

inline double loss_for(std::span<const double> probs, std::size_t label, double gamma, bool focal) {
  return focal ? focal_loss(probs, label, gamma).value : ce_loss(probs, label).value;
}

struct GradcheckCase {
  std::string suite;  // "loss" or "head"
  std::size_t index = 0;
  std::string loss;   // "ce" or "focal"
  double gamma = 0.0;
  double rel_err = 0.0;
};

struct GradcheckSummary {
  std::vector<GradcheckCase> cases;
  std::map<double, double> loss_max_by_gamma;
  double loss_max = 0.0;
  double head_max = 0.0;

  double max_error() const { return std::max(loss_max, head_max); }
  bool passed() const { return max_error() <= kGradcheckTolerance; }
  std::vector<GradcheckCase> failures() const {
    std::vector<GradcheckCase> out;
    for (const auto& c : cases)
      if (c.rel_err > kGradcheckTolerance) out.push_back(c);
    return out;
  }
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t loss_cases = 200;  // split evenly over kGradcheckGammas
  std::size_t head_cases = 20;
  double logit_scale = 2.0;
  // Test hook: multiplies every analytic gradient by (1 + perturbation).
  double perturbation = 0.0;
};

/// Flattened-parameter view so the head can be differentiated numerically.
inline Vector flatten(const HeadParams& p) {
  Vector out;
  for (auto t : p.tensors()) out.insert(out.end(), t.begin(), t.end());
  return out;
}

inline void unflatten(std::span<const double> flat, HeadParams& p) {
  std::size_t at = 0;
  for (auto t : p.tensors()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), t.size(), t.begin());
    at += t.size();
  }
}

inline GradcheckSummary run_gradcheck(const GradcheckOptions& opt = {}) {
  GradcheckSummary summary;
  Rng rng(opt.seed);
  const double bump = 1.0 + opt.perturbation;

  const std::size_t per_gamma = opt.loss_cases / kGradcheckGammas.size();
  for (double gamma : kGradcheckGammas) {
    double worst = 0.0;
    for (std::size_t i = 0; i < per_gamma; ++i) {
      const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_index(7));
      Vector z = rng_gaussian(rng, k);
      for (double& x : z) x *= opt.logit_scale;
      const std::size_t label = static_cast<std::size_t>(rng.uniform_index(k));

      Vector analytic = focal_loss(softmax(z), label, gamma).grad_logits;
      for (double& g : analytic) g *= bump;
      const Vector numeric = numeric_gradient(
          [&](std::span<const double> logits) {
            return focal_loss(softmax(logits), label, gamma).value;
          },
          z);
      const double err = relative_error(analytic, numeric);
      worst = std::max(worst, err);
      summary.cases.push_back({"loss", summary.cases.size(), "focal", gamma, err});
    }
    summary.loss_max_by_gamma[gamma] = worst;
    summary.loss_max = std::max(summary.loss_max, worst);
  }

  // Head cases cycle through cross-entropy, focal 0.1 and focal 2.
  constexpr std::array<std::pair<bool, double>, 3> variants{{{false, 0.0}, {true, 0.1}, {true, 2.0}}};
  for (std::size_t i = 0; i < opt.head_cases; ++i) {
    const auto [focal, gamma] = variants[i % variants.size()];
    constexpr std::size_t d = 4, h = 5, k = 3;
    HeadParams params = init_params(rng, d, h, k);
    for (double& b : params.b1) b = 0.1 * rng.gaussian();
    for (double& b : params.b2) b = 0.1 * rng.gaussian();
    const std::size_t frames = 1 + static_cast<std::size_t>(rng.uniform_index(6));
    Matrix clip(frames, d);
    for (double& x : clip.flat()) x = rng.gaussian();
    const std::size_t label = static_cast<std::size_t>(rng.uniform_index(k));

    const ForwardTrace tr = forward(params, clip);
    const Vector gl = focal ? focal_loss(tr.probs, label, gamma).grad_logits
                            : ce_loss(tr.probs, label).grad_logits;
    Vector analytic = flatten(backward(params, tr, gl));
    for (double& g : analytic) g *= bump;

    HeadParams probe = params;
    const Vector numeric = numeric_gradient(
        [&](std::span<const double> flat) {
          unflatten(flat, probe);
          return loss_for(predict_proba(probe, clip), label, gamma, focal);
        },
        flatten(params));
    const double err = relative_error(analytic, numeric);
    summary.head_max = std::max(summary.head_max, err);
    summary.cases.push_back({"head", i, focal ? "focal" : "ce", gamma, err});
  }
  return summary;
}

}  // namespace mmfuse
