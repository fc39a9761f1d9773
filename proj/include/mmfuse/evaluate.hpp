// Late fusion of modality distributions and the classification metric suite:
// top-k accuracy, confusion matrix, per-class and averaged precision / recall
// / F1, and head / tail F1 slices.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmfuse/data.hpp"
#include "mmfuse/json_io.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/numkernel.hpp"

namespace mmfuse {

/// Unweighted mean of two distributions.
inline ProbDist late_fuse(std::span<const double> pa, std::span<const double> pb) {
  if (pa.size() != pb.size()) {
    std::ostringstream os;
    os << "late_fuse: distributions have " << pa.size() << " and " << pb.size() << " classes";
    throw ShapeError(os.str());
  }
  ProbDist out(pa.size());
  for (std::size_t j = 0; j < pa.size(); ++j) out[j] = 0.5 * (pa[j] + pb[j]);
  return out;
}

/// Rank of `label` under a descending sort with lowest-index tie-break.
inline std::size_t label_rank(std::span<const double> probs, std::size_t label) {
  const double p = probs[label];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < probs.size(); ++j)
    if (probs[j] > p || (probs[j] == p && j < label)) ++rank;
  return rank;
}

inline double top_k_accuracy(std::span<const ProbDist> probs, std::span<const std::size_t> labels,
                             std::size_t k) {
  if (probs.empty()) throw std::invalid_argument("top_k_accuracy: no samples");
  if (probs.size() != labels.size()) throw ShapeError("top_k_accuracy: length mismatch");
  if (k < 1) throw std::invalid_argument("top_k_accuracy: k must be at least 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (labels[i] >= probs[i].size()) throw std::out_of_range("top_k_accuracy: label out of range");
    if (label_rank(probs[i], labels[i]) < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probs.size());
}

/// Square count matrix; entry (t, p) counts samples of true class t predicted p.
class Confusion {
 public:
  Confusion() = default;
  explicit Confusion(std::size_t k) : k_(k), counts_(k * k, 0) {}

  std::size_t classes() const noexcept { return k_; }
  std::uint64_t& operator()(std::size_t t, std::size_t p) { return counts_[t * k_ + p]; }
  std::uint64_t operator()(std::size_t t, std::size_t p) const { return counts_[t * k_ + p]; }

  std::uint64_t row_sum(std::size_t t) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < k_; ++p) s += (*this)(t, p);
    return s;
  }
  std::uint64_t col_sum(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < k_; ++t) s += (*this)(t, p);
    return s;
  }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < k_; ++c) s += (*this)(c, c);
    return s;
  }
  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

  friend bool operator==(const Confusion&, const Confusion&) = default;

 private:
  std::size_t k_ = 0;
  std::vector<std::uint64_t> counts_;
};

inline Confusion confusion_matrix(std::span<const std::size_t> predicted,
                                  std::span<const std::size_t> truth, std::size_t k) {
  if (predicted.size() != truth.size()) throw ShapeError("confusion_matrix: length mismatch");
  if (predicted.empty()) throw std::invalid_argument("confusion_matrix: no samples");
  Confusion cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= k || predicted[i] >= k) {
      std::ostringstream os;
      os << "confusion_matrix: sample " << i << " has label outside [0, " << k << ")";
      throw std::out_of_range(os.str());
    }
    ++cm(truth[i], predicted[i]);
  }
  return cm;
}

struct PrfResult {
  Vector precision, recall, f1;  // per class
  std::vector<std::uint64_t> support;
  // Unweighted means over classes with nonzero support.
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  // Support-weighted means.
  double weighted_precision = 0.0, weighted_recall = 0.0, weighted_f1 = 0.0;
};

/// Per-class precision = diag / colsum, recall = diag / rowsum,
/// f1 = 2PR / (P + R); every 0/0 is taken as 0.
inline PrfResult macro_prf(const Confusion& cm) {
  const std::size_t k = cm.classes();
  const std::uint64_t n = cm.total();
  if (n == 0) throw std::invalid_argument("macro_prf: confusion matrix is empty");
  auto ratio = [](double num, double den) { return den == 0.0 ? 0.0 : num / den; };

  PrfResult r;
  r.precision.resize(k);
  r.recall.resize(k);
  r.f1.resize(k);
  r.support.resize(k);
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(cm(c, c));
    r.support[c] = cm.row_sum(c);
    r.precision[c] = ratio(tp, static_cast<double>(cm.col_sum(c)));
    r.recall[c] = ratio(tp, static_cast<double>(r.support[c]));
    r.f1[c] = ratio(2.0 * r.precision[c] * r.recall[c], r.precision[c] + r.recall[c]);
    if (r.support[c] == 0) continue;
    ++present;
    r.macro_precision += r.precision[c];
    r.macro_recall += r.recall[c];
    r.macro_f1 += r.f1[c];
    const double w = static_cast<double>(r.support[c]) / static_cast<double>(n);
    r.weighted_precision += w * r.precision[c];
    r.weighted_recall += w * r.recall[c];
    r.weighted_f1 += w * r.f1[c];
  }
  r.macro_precision /= static_cast<double>(present);
  r.macro_recall /= static_cast<double>(present);
  r.macro_f1 /= static_cast<double>(present);
  return r;
}

enum class FusionMode { a_only, b_only, fused };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::a_only: return "a_only";
    case FusionMode::b_only: return "b_only";
    case FusionMode::fused: return "fused";
  }
  return "unknown";
}

struct HeadTail {
  double head_f1 = 0.0;
  double tail_f1 = 0.0;
};

struct MetricsReport {
  FusionMode mode = FusionMode::fused;
  std::size_t num_samples = 0;
  double top1 = 0.0;
  double top5 = 0.0;
  PrfResult prf;
  Confusion confusion;
  // Present when training class counts were supplied.
  std::optional<HeadTail> slices;
};

/// Mean per-class F1 over the most and least frequent thirds of classes,
/// ranked by training count (ties keep the lower class index first).
inline HeadTail tail_slice(const MetricsReport& report, std::span<const std::size_t> train_counts) {
  const std::size_t k = report.prf.f1.size();
  if (train_counts.size() != k) throw ShapeError("tail_slice: counts do not match class count");
  if (k < 3) throw std::invalid_argument("tail_slice: needs at least 3 classes");
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t x, std::size_t y) {
    return train_counts[x] > train_counts[y];
  });
  const std::size_t third = k / 3;
  HeadTail ht;
  for (std::size_t i = 0; i < third; ++i) {
    ht.head_f1 += report.prf.f1[order[i]];
    ht.tail_f1 += report.prf.f1[order[k - third + i]];
  }
  ht.head_f1 /= static_cast<double>(third);
  ht.tail_f1 /= static_cast<double>(third);
  return ht;
}

/// Metrics from per-sample distributions and true labels.
inline MetricsReport build_report(std::span<const ProbDist> probs, std::span<const std::size_t> labels,
                                  std::size_t k, FusionMode mode) {
  std::vector<std::size_t> predicted;
  predicted.reserve(probs.size());
  for (const auto& p : probs) {
    if (p.size() != k) throw ShapeError("build_report: distribution length differs from class count");
    predicted.push_back(argmax_first(p));
  }
  MetricsReport r;
  r.mode = mode;
  r.num_samples = probs.size();
  r.top1 = top_k_accuracy(probs, labels, 1);
  r.top5 = top_k_accuracy(probs, labels, 5);
  r.confusion = confusion_matrix(predicted, labels, k);
  r.prf = macro_prf(r.confusion);
  return r;
}

/// Scores a split with one or both modality heads. Each sample contributes its
/// centred evaluation clip per modality; `model_a` / `model_b` may be null
/// only when the mode does not need them.
inline MetricsReport evaluate_models(const HeadParams* model_a, const HeadParams* model_b,
                                     std::span<const Sample> samples, FusionMode mode,
                                     std::size_t clip_len = 16) {
  if (samples.empty()) throw std::invalid_argument("evaluate_models: no samples");
  const bool need_a = mode != FusionMode::b_only;
  const bool need_b = mode != FusionMode::a_only;
  if ((need_a && !model_a) || (need_b && !model_b))
    throw std::invalid_argument(std::string("evaluate_models: mode ") + to_string(mode) +
                                " is missing a model");
  std::size_t k = 0;
  if (need_a) k = model_a->num_classes();
  if (need_b) {
    if (need_a && model_b->num_classes() != k)
      throw ShapeError("evaluate_models: models disagree on class count");
    k = model_b->num_classes();
  }

  std::vector<ProbDist> probs;
  std::vector<std::size_t> labels;
  probs.reserve(samples.size());
  labels.reserve(samples.size());
  for (const Sample& s : samples) {
    if (s.label >= k) {
      std::ostringstream os;
      os << "evaluate_models: sample " << s.id << " has label " << s.label << " but models have "
         << k << " classes";
      throw ShapeError(os.str());
    }
    ProbDist p;
    if (need_a) p = predict_proba(*model_a, eval_clip(s.seq_a, clip_len).frames);
    if (need_b) {
      ProbDist pb = predict_proba(*model_b, eval_clip(s.seq_b, clip_len).frames);
      p = need_a ? late_fuse(p, pb) : std::move(pb);
    }
    probs.push_back(std::move(p));
    labels.push_back(s.label);
  }
  return build_report(probs, labels, k, mode);
}

inline Json report_to_json(const MetricsReport& r) {
  const std::size_t k = r.confusion.classes();
  Json confusion = Json::array();
  for (std::size_t t = 0; t < k; ++t) {
    Json row = Json::array();
    for (std::size_t p = 0; p < k; ++p) row.push_back(r.confusion(t, p));
    confusion.push_back(std::move(row));
  }
  Json j{{"mode", to_string(r.mode)},
         {"num_classes", k},
         {"num_samples", r.num_samples},
         {"top1", r.top1},
         {"top5", r.top5},
         {"macro_precision", r.prf.macro_precision},
         {"macro_recall", r.prf.macro_recall},
         {"macro_f1", r.prf.macro_f1},
         {"weighted_precision", r.prf.weighted_precision},
         {"weighted_recall", r.prf.weighted_recall},
         {"weighted_f1", r.prf.weighted_f1},
         {"macro_averaging", "unweighted mean over classes with nonzero support"},
         {"per_class_precision", r.prf.precision},
         {"per_class_recall", r.prf.recall},
         {"per_class_f1", r.prf.f1},
         {"support", r.prf.support},
         {"confusion", std::move(confusion)}};
  if (r.slices) {
    j["head_f1"] = r.slices->head_f1;
    j["tail_f1"] = r.slices->tail_f1;
  }
  return j;
}

inline MetricsReport report_from_json(const Json& j) {
  try {
    MetricsReport r;
    const std::string mode = j.at("mode").get<std::string>();
    if (mode == "a_only") r.mode = FusionMode::a_only;
    else if (mode == "b_only") r.mode = FusionMode::b_only;
    else if (mode == "fused") r.mode = FusionMode::fused;
    else throw FormatError(0, "mode", "unknown fusion mode '" + mode + "'");
    const std::size_t k = j.at("num_classes").get<std::size_t>();
    r.num_samples = j.at("num_samples").get<std::size_t>();
    r.top1 = j.at("top1").get<double>();
    r.top5 = j.at("top5").get<double>();
    r.prf.macro_precision = j.at("macro_precision").get<double>();
    r.prf.macro_recall = j.at("macro_recall").get<double>();
    r.prf.macro_f1 = j.at("macro_f1").get<double>();
    r.prf.weighted_precision = j.at("weighted_precision").get<double>();
    r.prf.weighted_recall = j.at("weighted_recall").get<double>();
    r.prf.weighted_f1 = j.at("weighted_f1").get<double>();
    r.prf.precision = j.at("per_class_precision").get<Vector>();
    r.prf.recall = j.at("per_class_recall").get<Vector>();
    r.prf.f1 = j.at("per_class_f1").get<Vector>();
    r.prf.support = j.at("support").get<std::vector<std::uint64_t>>();
    const Json& rows = j.at("confusion");
    if (!rows.is_array() || rows.size() != k) throw FormatError(0, "confusion", "expected K rows");
    r.confusion = Confusion(k);
    for (std::size_t t = 0; t < k; ++t) {
      if (!rows[t].is_array() || rows[t].size() != k)
        throw FormatError(0, "confusion", "expected K columns");
      for (std::size_t p = 0; p < k; ++p) r.confusion(t, p) = rows[t][p].get<std::uint64_t>();
    }
    if (j.contains("head_f1"))
      r.slices = HeadTail{j.at("head_f1").get<double>(), j.at("tail_f1").get<double>()};
    return r;
  } catch (const Json::exception& e) {
    throw FormatError(0, "report", e.what());
  }
}

/// Confusion matrix as CSV; header row and first column hold class indices.
inline std::string confusion_to_csv(const Confusion& cm) {
  std::ostringstream os;
  os << "true\\pred";
  for (std::size_t p = 0; p < cm.classes(); ++p) os << ',' << p;
  os << '\n';
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    os << t;
    for (std::size_t p = 0; p < cm.classes(); ++p) os << ',' << cm(t, p);
    os << '\n';
  }
  return os.str();
}

inline Confusion confusion_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(1, "header", "empty confusion file");
  const std::size_t k = static_cast<std::size_t>(std::ranges::count(line, ','));
  Confusion cm(k);
  for (std::size_t t = 0; t < k; ++t) {
    if (!std::getline(in, line)) throw FormatError(t + 2, "row", "missing row");
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    for (std::size_t p = 0; p < k; ++p) {
      if (!std::getline(cells, cell, ','))
        throw FormatError(t + 2, "row", "too few columns");
      try {
        cm(t, p) = std::stoull(cell);
      } catch (const std::exception&) {
        throw FormatError(t + 2, "row", "bad count '" + cell + "'");
      }
    }
  }
  return cm;
}

}  // namespace mmfuse
