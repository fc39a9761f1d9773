// Per-modality classifier head: temporal mean pooling over a clip followed by
// a two-layer perceptron (relu hidden layer) producing class logits.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>

#include "mmfuse/numkernel.hpp"

namespace mmfuse {

struct HeadParams {
  Matrix w1;  // H x D
  Vector b1;  // H
  Matrix w2;  // K x H
  Vector b2;  // K

  std::size_t input_dim() const noexcept { return w1.cols(); }
  std::size_t hidden_dim() const noexcept { return w1.rows(); }
  std::size_t num_classes() const noexcept { return w2.rows(); }

  /// Zero-filled parameters of the given shape.
  static HeadParams zeros(std::size_t d, std::size_t h, std::size_t k) {
    return {Matrix(h, d), Vector(h, 0.0), Matrix(k, h), Vector(k, 0.0)};
  }

  /// Throws ShapeError unless the four arrays agree with each other.
  void validate() const {
    if (w1.rows() == 0 || w1.cols() == 0 || w2.rows() == 0 || b1.size() != w1.rows() ||
        w2.cols() != w1.rows() || b2.size() != w2.rows()) {
      std::ostringstream os;
      os << "inconsistent head shapes: w1 [" << w1.rows() << ", " << w1.cols() << "], b1 ["
         << b1.size() << "], w2 [" << w2.rows() << ", " << w2.cols() << "], b2 [" << b2.size()
         << "]";
      throw ShapeError(os.str());
    }
  }

  /// Flat views in the fixed order w1, b1, w2, b2.
  std::array<std::span<double>, 4> tensors() { return {w1.flat(), b1, w2.flat(), b2}; }
  std::array<std::span<const double>, 4> tensors() const {
    return {w1.flat(), b1, w2.flat(), b2};
  }

  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

/// Gradients share the parameter layout.
using HeadGrads = HeadParams;

/// Names matching HeadParams::tensors() order.
inline constexpr std::array<const char*, 4> kTensorNames{"w1", "b1", "w2", "b2"};

/// Whether weight decay applies to each tensor (biases are excluded).
inline constexpr std::array<bool, 4> kTensorDecays{true, false, true, false};

struct ForwardTrace {
  Vector pooled;  // D
  Vector hidden;  // H, post-relu
  Vector mask;    // H
  Vector logits;  // K
  ProbDist probs; // K
};

/// He-scaled Gaussian weights (std sqrt(2 / fan_in)), zero biases.
/// Draw order: w1 row-major, then w2 row-major.
inline HeadParams init_params(Rng& rng, std::size_t d, std::size_t h, std::size_t k) {
  if (d == 0 || h == 0 || k == 0)
    throw std::invalid_argument("init_params: dimensions must be positive");
  HeadParams p = HeadParams::zeros(d, h, k);
  const double s1 = std::sqrt(2.0 / static_cast<double>(d));
  for (double& w : p.w1.flat()) w = s1 * rng.gaussian();
  const double s2 = std::sqrt(2.0 / static_cast<double>(h));
  for (double& w : p.w2.flat()) w = s2 * rng.gaussian();
  return p;
}

/// Column-wise mean over the T rows of a clip.
inline Vector mean_pool(const Matrix& clip) {
  if (clip.rows() == 0) throw ShapeError("mean_pool: clip has no frames");
  Vector pooled(clip.cols(), 0.0);
  for (std::size_t t = 0; t < clip.rows(); ++t) {
    const auto r = clip.row(t);
    for (std::size_t j = 0; j < r.size(); ++j) pooled[j] += r[j];
  }
  const double inv_t = 1.0 / static_cast<double>(clip.rows());
  for (double& x : pooled) x *= inv_t;
  return pooled;
}

inline ForwardTrace forward(const HeadParams& params, const Matrix& clip) {
  if (clip.cols() != params.input_dim()) {
    std::ostringstream os;
    os << "forward: clip width " << clip.cols() << " does not match head input dim "
       << params.input_dim();
    throw ShapeError(os.str());
  }
  ForwardTrace tr;
  tr.pooled = mean_pool(clip);
  Vector pre = matvec(params.w1, tr.pooled);
  for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += params.b1[i];
  auto act = relu(pre);
  tr.hidden = std::move(act.out);
  tr.mask = std::move(act.mask);
  tr.logits = matvec(params.w2, tr.hidden);
  for (std::size_t i = 0; i < tr.logits.size(); ++i) tr.logits[i] += params.b2[i];
  tr.probs = softmax(tr.logits);
  return tr;
}

inline HeadGrads backward(const HeadParams& params, const ForwardTrace& trace,
                          std::span<const double> grad_logits) {
  const std::size_t d = params.input_dim(), h = params.hidden_dim(), k = params.num_classes();
  if (grad_logits.size() != k || trace.hidden.size() != h || trace.mask.size() != h ||
      trace.pooled.size() != d) {
    throw ShapeError("backward: trace or gradient does not match head shapes");
  }
  HeadGrads g = HeadGrads::zeros(d, h, k);
  for (std::size_t c = 0; c < k; ++c) {
    g.b2[c] = grad_logits[c];
    auto row = g.w2.row(c);
    for (std::size_t j = 0; j < h; ++j) row[j] = grad_logits[c] * trace.hidden[j];
  }
  Vector dh = matvec_transposed(params.w2, grad_logits);
  for (std::size_t j = 0; j < h; ++j) {
    dh[j] *= trace.mask[j];
    g.b1[j] = dh[j];
    auto row = g.w1.row(j);
    for (std::size_t i = 0; i < d; ++i) row[i] = dh[j] * trace.pooled[i];
  }
  return g;
}

inline ProbDist predict_proba(const HeadParams& params, const Matrix& clip) {
  return forward(params, clip).probs;
}

/// acc += scale * g, tensor by tensor.
inline void accumulate(HeadGrads& acc, const HeadGrads& g, double scale = 1.0) {
  auto dst = acc.tensors();
  const auto src = g.tensors();
  for (std::size_t t = 0; t < dst.size(); ++t) {
    if (dst[t].size() != src[t].size()) throw ShapeError("accumulate: shape mismatch");
    for (std::size_t i = 0; i < dst[t].size(); ++i) dst[t][i] += scale * src[t][i];
  }
}

}  // namespace mmfuse
