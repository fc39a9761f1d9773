// Cross-entropy and focal losses with gradients taken with respect to the
// pre-softmax logits, plus the geometric focusing-parameter schedule.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "mmfuse/numkernel.hpp"

namespace mmfuse {

/// Lower clamp applied to p_t and 1 - p_t before log / pow.
inline constexpr double kProbFloor = 1e-12;

struct LossValue {
  double value = 0.0;
  Vector grad_logits;
};

namespace detail {

inline void check_label(std::span<const double> probs, std::size_t label) {
  if (probs.empty()) throw std::invalid_argument("loss: empty distribution");
  if (label >= probs.size()) {
    std::ostringstream os;
    os << "loss: label " << label << " out of range for " << probs.size() << " classes";
    throw std::out_of_range(os.str());
  }
}

inline double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0); }

}  // namespace detail

inline LossValue ce_loss(std::span<const double> probs, std::size_t label) {
  detail::check_label(probs, label);
  LossValue out;
  out.value = -std::log(detail::clamp_prob(probs[label]));
  out.grad_logits.assign(probs.begin(), probs.end());
  out.grad_logits[label] -= 1.0;
  return out;
}

/// Focal loss -(1 - p_t)^gamma * log(p_t) on the true class t.
///
/// The logit gradient is dL/dp_t * dp_t/dz_k with dp_t/dz_k = p_t (1{k=t} - p_k).
/// The product dL/dp_t * p_t is folded into one scale factor so that gamma = 0
/// reduces to exactly -1 and the gradient matches ce_loss bit for bit.
inline LossValue focal_loss(std::span<const double> probs, std::size_t label, double gamma) {
  detail::check_label(probs, label);
  if (!(gamma >= 0.0) || !std::isfinite(gamma))
    throw std::invalid_argument("focal_loss: gamma must be finite and nonnegative");

  const double pt = detail::clamp_prob(probs[label]);
  const double u = detail::clamp_prob(1.0 - pt);
  const double log_pt = std::log(pt);
  const double weight = std::pow(u, gamma);

  LossValue out;
  out.value = -weight * log_pt;
  if (out.value == 0.0) out.value = 0.0;  // drop the sign of -0

  // (dL/dp_t) * p_t
  const double scale = gamma * std::pow(u, gamma - 1.0) * pt * log_pt - weight;
  out.grad_logits.resize(probs.size());
  for (std::size_t k = 0; k < probs.size(); ++k)
    out.grad_logits[k] = scale * ((k == label ? 1.0 : 0.0) - probs[k]);
  return out;
}

/// Focusing-parameter annealing: geometric interpolation per epoch.
struct GammaSchedule {
  double gamma_start = 2.0;
  double gamma_end = 0.1;
  std::size_t total_epochs = 20;

  void validate() const {
    if (!(gamma_start > 0.0) || !(gamma_end > 0.0))
      throw std::invalid_argument("GammaSchedule: gamma endpoints must be positive");
    if (gamma_end > gamma_start)
      throw std::invalid_argument("GammaSchedule: gamma_end must not exceed gamma_start");
    if (total_epochs < 1)
      throw std::invalid_argument("GammaSchedule: total_epochs must be at least 1");
  }

  friend bool operator==(const GammaSchedule&, const GammaSchedule&) = default;
};

/// gamma(e) = start * (end / start)^(e / (epochs - 1)); endpoints are returned exactly.
inline double gamma_at_epoch(const GammaSchedule& s, std::size_t epoch) {
  s.validate();
  if (epoch >= s.total_epochs) {
    std::ostringstream os;
    os << "gamma_at_epoch: epoch " << epoch << " outside [0, " << s.total_epochs << ")";
    throw std::out_of_range(os.str());
  }
  if (epoch == 0 || s.total_epochs == 1) return s.gamma_start;
  if (epoch + 1 == s.total_epochs) return s.gamma_end;
  const double frac = static_cast<double>(epoch) / static_cast<double>(s.total_epochs - 1);
  return s.gamma_start * std::pow(s.gamma_end / s.gamma_start, frac);
}

struct BatchLoss {
  double mean = 0.0;
  std::vector<Vector> grads;  // already scaled by 1 / batch size
};

/// Mean focal loss over a batch; gamma = 0 gives mean cross-entropy.
inline BatchLoss batch_loss(std::span<const ProbDist> probs, std::span<const std::size_t> labels,
                            double gamma) {
  if (probs.size() != labels.size())
    throw ShapeError("batch_loss: probs and labels differ in length");
  if (probs.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(probs.size());
  BatchLoss out;
  out.grads.reserve(probs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    LossValue lv = gamma == 0.0 ? ce_loss(probs[i], labels[i])
                                : focal_loss(probs[i], labels[i], gamma);
    total += lv.value;
    for (double& g : lv.grad_logits) g *= inv_n;
    out.grads.push_back(std::move(lv.grad_logits));
  }
  out.mean = total * inv_n;
  return out;
}

}  // namespace mmfuse
