// AdamW with decoupled weight decay.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "mmfuse/numkernel.hpp"

namespace mmfuse {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;

  void validate() const {
    if (!(lr >= 0.0)) throw std::invalid_argument("AdamW: lr must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw std::invalid_argument("AdamW: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("AdamW: eps must be positive");
    if (!(weight_decay >= 0.0))
      throw std::invalid_argument("AdamW: weight_decay must be nonnegative");
  }

  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

struct AdamWState {
  AdamWConfig config;
  std::uint64_t step_count = 0;
  std::vector<Vector> m;  // first moments, one per tensor
  std::vector<Vector> v;  // second moments, one per tensor

  friend bool operator==(const AdamWState&, const AdamWState&) = default;
};

/// One parameter tensor handed to the optimizer.
struct ParamSlot {
  std::span<double> value;
  std::span<const double> grad;
  bool decay = true;
};

inline AdamWState adamw_init(std::span<const std::size_t> tensor_sizes, AdamWConfig config = {}) {
  config.validate();
  AdamWState s;
  s.config = config;
  for (std::size_t n : tensor_sizes) {
    s.m.emplace_back(n, 0.0);
    s.v.emplace_back(n, 0.0);
  }
  return s;
}

/// t += 1; m, v moment updates; theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
/// The decay factor applies only to slots with decay enabled and uses the
/// pre-step value of theta.
inline void adamw_step(AdamWState& s, std::span<const ParamSlot> slots) {
  if (slots.size() != s.m.size()) {
    std::ostringstream os;
    os << "adamw_step: " << slots.size() << " tensors given, state holds " << s.m.size();
    throw ShapeError(os.str());
  }
  for (std::size_t t = 0; t < slots.size(); ++t) {
    if (slots[t].value.size() != s.m[t].size() || slots[t].grad.size() != s.m[t].size()) {
      std::ostringstream os;
      os << "adamw_step: tensor " << t << " shape mismatch";
      throw ShapeError(os.str());
    }
    if (!all_finite(slots[t].grad))
      throw std::domain_error("adamw_step: non-finite gradient");
  }

  const AdamWConfig& c = s.config;
  ++s.step_count;
  const double step = static_cast<double>(s.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, step);
  const double bc2 = 1.0 - std::pow(c.beta2, step);

  for (std::size_t t = 0; t < slots.size(); ++t) {
    auto& m = s.m[t];
    auto& v = s.v[t];
    const auto value = slots[t].value;
    const auto grad = slots[t].grad;
    const double decay = slots[t].decay ? c.lr * c.weight_decay : 0.0;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      value[i] = value[i] * (1.0 - decay) - c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

}  // namespace mmfuse
