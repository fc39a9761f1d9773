// Per-modality training loop and the checkpoint document.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/data.hpp"
#include "mmfuse/json_io.hpp"
#include "mmfuse/loss.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/optim.hpp"

namespace mmfuse {

inline constexpr const char* kVersion = "0.3.0";

enum class LossKind { ce, focal };
enum class Modality { a, b };

inline const char* to_string(LossKind l) { return l == LossKind::ce ? "ce" : "focal"; }
inline const char* to_string(Modality m) { return m == Modality::a ? "a" : "b"; }

inline LossKind parse_loss(const std::string& s) {
  if (s == "ce") return LossKind::ce;
  if (s == "focal") return LossKind::focal;
  throw std::invalid_argument("unknown loss '" + s + "' (expected ce or focal)");
}

inline Modality parse_modality(const std::string& s) {
  if (s == "a") return Modality::a;
  if (s == "b") return Modality::b;
  throw std::invalid_argument("unknown modality '" + s + "' (expected a or b)");
}

/// Raised when training produces a non-finite loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  LossKind loss = LossKind::focal;
  GammaSchedule schedule;  // total_epochs follows `epochs`
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 3e-4;
  double weight_decay = 0.05;
  std::size_t hidden_dim = 64;
  std::size_t clip_len = 16;
  bool merge_val_into_train = false;

  GammaSchedule effective_schedule() const {
    GammaSchedule s = schedule;
    s.total_epochs = epochs;
    return s;
  }

  AdamWConfig optimizer() const {
    AdamWConfig c;
    c.lr = lr;
    c.weight_decay = weight_decay;
    return c;
  }

  void validate() const {
    dataset.validate();
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("batch-size must be at least 1");
    if (hidden_dim < 1) throw std::invalid_argument("hidden-dim must be at least 1");
    if (clip_len < 1) throw std::invalid_argument("clip-len must be at least 1");
    effective_schedule().validate();
    optimizer().validate();
  }
};

/// Independent stream per (seed, modality, stream index). Index 0 seeds the
/// parameter initialisation, index e + 1 drives epoch e.
inline Rng training_rng(std::uint64_t seed, Modality m, std::uint64_t index) {
  std::uint64_t x = Rng::splitmix64(seed);
  x = Rng::splitmix64(x ^ (m == Modality::a ? 0xA5A5A5A5ULL : 0x5A5A5A5AULL));
  return Rng(x ^ (index * 0x9E3779B97F4A7C15ULL));
}

struct Checkpoint {
  Modality modality = Modality::a;
  LossKind loss = LossKind::focal;
  GammaSchedule schedule;
  std::uint64_t seed = 0;
  std::size_t epochs_completed = 0;
  std::size_t clip_len = 16;
  HeadParams params;
  AdamWState optimizer;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_loss;   // mean training loss per epoch
  std::vector<double> epoch_gamma;  // empty for cross-entropy
  std::size_t train_size = 0;
};

inline std::array<std::size_t, 4> tensor_sizes(const HeadParams& p) {
  const auto t = p.tensors();
  return {t[0].size(), t[1].size(), t[2].size(), t[3].size()};
}

/// Trains one modality head. When `resume` is given, its parameters and
/// optimizer state are the starting point and training continues from its
/// epoch count; per-epoch streams make the result match an uninterrupted run.
inline TrainResult train_modality(const ExperimentConfig& cfg, std::span<const Sample> train_set,
                                  Modality modality, std::optional<Checkpoint> resume = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  const std::size_t d = modality == Modality::a ? cfg.dataset.d_a : cfg.dataset.d_b;
  const std::size_t k = cfg.dataset.k;
  for (const Sample& s : train_set) {
    const Matrix& seq = modality == Modality::a ? s.seq_a : s.seq_b;
    if (seq.cols() != d || s.label >= k) {
      std::ostringstream os;
      os << "sample " << s.id << " (label " << s.label << ", width " << seq.cols()
         << ") does not match config (k " << k << ", dim " << d << ")";
      throw ShapeError(os.str());
    }
  }

  const GammaSchedule schedule = cfg.effective_schedule();
  TrainResult result;
  result.train_size = train_set.size();
  Checkpoint& ck = result.checkpoint;
  std::size_t first_epoch = 0;
  if (resume) {
    ck = *resume;
    if (ck.params.input_dim() != d || ck.params.num_classes() != k ||
        ck.params.hidden_dim() != cfg.hidden_dim)
      throw ShapeError("resume checkpoint does not match config dimensions");
    first_epoch = ck.epochs_completed;
  } else {
    Rng init = training_rng(cfg.dataset.seed, modality, 0);
    ck.params = init_params(init, d, cfg.hidden_dim, k);
    ck.optimizer = adamw_init(tensor_sizes(ck.params), cfg.optimizer());
  }
  ck.modality = modality;
  ck.loss = cfg.loss;
  ck.schedule = schedule;
  ck.seed = cfg.dataset.seed;
  ck.clip_len = cfg.clip_len;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    Rng rng = training_rng(cfg.dataset.seed, modality, epoch + 1);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    const double gamma = cfg.loss == LossKind::focal ? gamma_at_epoch(schedule, epoch) : 0.0;

    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<ForwardTrace> traces;
      std::vector<ProbDist> probs;
      std::vector<std::size_t> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const Sample& s = train_set[order[i]];
        const Matrix& seq = modality == Modality::a ? s.seq_a : s.seq_b;
        traces.push_back(forward(ck.params, sample_clip(seq, cfg.clip_len, rng).frames));
        probs.push_back(traces.back().probs);
        labels.push_back(s.label);
      }
      const BatchLoss bl = batch_loss(probs, labels, gamma);
      if (!std::isfinite(bl.mean)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << ", batch starting at " << begin;
        throw NumericalError(os.str());
      }
      loss_sum += bl.mean * static_cast<double>(end - begin);

      HeadGrads grads = HeadGrads::zeros(d, cfg.hidden_dim, k);
      for (std::size_t i = 0; i < traces.size(); ++i)
        accumulate(grads, backward(ck.params, traces[i], bl.grads[i]));

      auto values = ck.params.tensors();
      const auto g = std::as_const(grads).tensors();
      std::array<ParamSlot, 4> slots;
      for (std::size_t t = 0; t < 4; ++t) slots[t] = {values[t], g[t], kTensorDecays[t]};
      adamw_step(ck.optimizer, slots);
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    if (cfg.loss == LossKind::focal) result.epoch_gamma.push_back(gamma);
    ck.epochs_completed = epoch + 1;
  }
  return result;
}

namespace detail {

inline Json tensors_to_json(const HeadParams& p) {
  return Json{{"w1", matrix_to_json(p.w1)},
              {"b1", vector_to_json(p.b1)},
              {"w2", matrix_to_json(p.w2)},
              {"b2", vector_to_json(p.b2)}};
}

inline HeadParams tensors_from_json(const Json& j, const std::string& field) {
  HeadParams p;
  p.w1 = matrix_from_json(require(j, "w1", 0, field), 0, field + ".w1");
  p.b1 = vector_from_json(require(j, "b1", 0, field), 0, field + ".b1");
  p.w2 = matrix_from_json(require(j, "w2", 0, field), 0, field + ".w2");
  p.b2 = vector_from_json(require(j, "b2", 0, field), 0, field + ".b2");
  p.validate();
  return p;
}

inline HeadParams moments_as_params(const std::vector<Vector>& moments, const HeadParams& like) {
  HeadParams p = HeadParams::zeros(like.input_dim(), like.hidden_dim(), like.num_classes());
  auto t = p.tensors();
  for (std::size_t i = 0; i < t.size(); ++i) std::ranges::copy(moments[i], t[i].begin());
  return p;
}

inline std::vector<Vector> params_as_moments(const HeadParams& p) {
  std::vector<Vector> out;
  for (auto t : p.tensors()) out.emplace_back(t.begin(), t.end());
  return out;
}

}  // namespace detail

inline Json checkpoint_to_json(const Checkpoint& ck) {
  const AdamWState& o = ck.optimizer;
  return Json{
      {"format", "mmfuse-checkpoint"},
      {"version", 1},
      {"modality", to_string(ck.modality)},
      {"dims",
       {{"d", ck.params.input_dim()}, {"h", ck.params.hidden_dim()}, {"k", ck.params.num_classes()}}},
      {"seed", ck.seed},
      {"epoch", ck.epochs_completed},
      {"clip_len", ck.clip_len},
      {"loss", to_string(ck.loss)},
      {"schedule",
       {{"gamma_start", ck.schedule.gamma_start},
        {"gamma_end", ck.schedule.gamma_end},
        {"total_epochs", ck.schedule.total_epochs}}},
      {"params", detail::tensors_to_json(ck.params)},
      {"optimizer",
       {{"lr", o.config.lr},
        {"beta1", o.config.beta1},
        {"beta2", o.config.beta2},
        {"eps", o.config.eps},
        {"weight_decay", o.config.weight_decay},
        {"step_count", o.step_count},
        {"m", detail::tensors_to_json(detail::moments_as_params(o.m, ck.params))},
        {"v", detail::tensors_to_json(detail::moments_as_params(o.v, ck.params))}}}};
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  try {
    if (j.value("format", std::string{}) != "mmfuse-checkpoint")
      throw FormatError(0, "format", "not an mmfuse checkpoint");
    Checkpoint ck;
    ck.modality = parse_modality(j.at("modality").get<std::string>());
    ck.loss = parse_loss(j.at("loss").get<std::string>());
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.epochs_completed = j.at("epoch").get<std::size_t>();
    ck.clip_len = j.at("clip_len").get<std::size_t>();
    const Json& s = j.at("schedule");
    ck.schedule = {s.at("gamma_start").get<double>(), s.at("gamma_end").get<double>(),
                   s.at("total_epochs").get<std::size_t>()};
    ck.params = detail::tensors_from_json(j.at("params"), "params");
    const Json& dims = j.at("dims");
    if (dims.at("d").get<std::size_t>() != ck.params.input_dim() ||
        dims.at("h").get<std::size_t>() != ck.params.hidden_dim() ||
        dims.at("k").get<std::size_t>() != ck.params.num_classes())
      throw FormatError(0, "dims", "disagree with parameter shapes");
    const Json& o = j.at("optimizer");
    ck.optimizer.config = {o.at("lr").get<double>(), o.at("beta1").get<double>(),
                           o.at("beta2").get<double>(), o.at("eps").get<double>(),
                           o.at("weight_decay").get<double>()};
    ck.optimizer.step_count = o.at("step_count").get<std::uint64_t>();
    const HeadParams m = detail::tensors_from_json(o.at("m"), "optimizer.m");
    const HeadParams v = detail::tensors_from_json(o.at("v"), "optimizer.v");
    if (tensor_sizes(m) != tensor_sizes(ck.params) || tensor_sizes(v) != tensor_sizes(ck.params))
      throw FormatError(0, "optimizer", "moment shapes differ from parameters");
    ck.optimizer.m = detail::params_as_moments(m);
    ck.optimizer.v = detail::params_as_moments(v);
    return ck;
  } catch (const Json::exception& e) {
    throw FormatError(0, "checkpoint", e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(0, "checkpoint", e.what());
  }
}

}  // namespace mmfuse
