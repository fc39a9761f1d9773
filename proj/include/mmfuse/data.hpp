// Synthetic long-tailed paired-modality benchmark, clip sampling, and the
// line-delimited dataset file format.
//
// Each record is one JSON object per line:
//   {"id": 7, "label": 3, "seq_a": {"shape": [T, Da], "data": [...]},
//                         "seq_b": {"shape": [T, Db], "data": [...]}}
// Both sequences must have the same number of rows (aligned frames).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmfuse/json_io.hpp"
#include "mmfuse/numkernel.hpp"

namespace mmfuse {

struct Sample {
  std::uint64_t id = 0;
  std::size_t label = 0;
  Matrix seq_a;  // T x Da
  Matrix seq_b;  // T x Db

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Raised when a record's modalities are not frame-aligned.
class AlignmentError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct DatasetConfig {
  std::size_t k = 12;
  std::size_t n_head = 200;
  double imbalance_ratio = 50.0;
  std::size_t d_a = 16;
  std::size_t d_b = 16;
  std::size_t len_min = 8;
  std::size_t len_max = 48;
  double noise_sigma = 1.0;
  double confusion_rate = 0.3;
  // Std of the per-class prototype entries; sets how far apart classes sit
  // relative to the frame noise.
  double prototype_scale = 1.75;
  std::uint64_t seed = 42;

  void validate() const {
    if (k < 1) throw std::invalid_argument("k must be at least 1");
    if (n_head < 1) throw std::invalid_argument("n-head must be at least 1");
    if (!(imbalance_ratio >= 1.0) || !std::isfinite(imbalance_ratio))
      throw std::invalid_argument("imbalance-ratio must be a finite value >= 1");
    if (d_a < 1 || d_b < 1) throw std::invalid_argument("feature dims must be at least 1");
    if (len_min < 1) throw std::invalid_argument("len-min must be at least 1");
    if (len_max < len_min) throw std::invalid_argument("len-max must be >= len-min");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
      throw std::invalid_argument("noise-sigma must be finite and nonnegative");
    if (!(confusion_rate >= 0.0 && confusion_rate <= 1.0))
      throw std::invalid_argument("confusion-rate must lie in [0, 1]");
    if (!(prototype_scale >= 0.0) || !std::isfinite(prototype_scale))
      throw std::invalid_argument("prototype-scale must be finite and nonnegative");
  }
};

/// Per-sample offset std as a fraction of noise_sigma.
inline constexpr double kSampleOffsetFraction = 0.25;

/// Training count per class: round(n_head * rho^(-k / (K - 1))), at least 1.
inline std::vector<std::size_t> class_counts(const DatasetConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> counts(cfg.k);
  for (std::size_t c = 0; c < cfg.k; ++c) {
    const double frac = cfg.k == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(cfg.k - 1);
    const double n = std::round(static_cast<double>(cfg.n_head) * std::pow(cfg.imbalance_ratio, -frac));
    counts[c] = std::max<std::size_t>(1, static_cast<std::size_t>(n));
  }
  return counts;
}

/// Per-class count of the balanced val and test splits: ceil(n_head / 10).
inline std::size_t eval_count_per_class(const DatasetConfig& cfg) {
  return (cfg.n_head + 9) / 10;
}

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

struct Prototypes {
  std::vector<Vector> a;  // K x Da
  std::vector<Vector> b;  // K x Db
};

/// Class prototypes, the first draws of the generator stream for cfg.seed.
inline Prototypes draw_prototypes(const DatasetConfig& cfg, Rng& rng) {
  Prototypes p;
  for (std::size_t c = 0; c < cfg.k; ++c) {
    Vector a = rng_gaussian(rng, cfg.d_a);
    Vector b = rng_gaussian(rng, cfg.d_b);
    for (double& x : a) x *= cfg.prototype_scale;
    for (double& x : b) x *= cfg.prototype_scale;
    p.a.push_back(std::move(a));
    p.b.push_back(std::move(b));
  }
  return p;
}

inline Prototypes draw_prototypes(const DatasetConfig& cfg) {
  Rng rng(cfg.seed);
  return draw_prototypes(cfg, rng);
}

namespace detail {

inline Matrix noisy_sequence(const Vector& centre, std::size_t len, double sigma, Rng& rng) {
  Vector offset = rng_gaussian(rng, centre.size());
  Matrix seq(len, centre.size());
  for (std::size_t t = 0; t < len; ++t) {
    auto row = seq.row(t);
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = centre[j] + sigma * (kSampleOffsetFraction * offset[j] + rng.gaussian());
  }
  return seq;
}

inline Vector midpoint(const Vector& x, const Vector& y) {
  Vector out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = 0.5 * (x[j] + y[j]);
  return out;
}

}  // namespace detail

/// Draws the three splits. Every sample's frames are its class prototype plus
/// a per-sample offset and per-frame noise; with probability confusion_rate
/// one modality (fair coin) uses the midpoint between its class prototype and
/// that of class (k + 1) mod K. Train follows class_counts; val and test hold
/// eval_count_per_class samples of every class. Ids run consecutively over
/// train, val, test.
inline Dataset generate(const DatasetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const Prototypes proto = draw_prototypes(cfg, rng);
  const auto train_counts = class_counts(cfg);
  const std::size_t eval_n = eval_count_per_class(cfg);
  const std::size_t len_span = cfg.len_max - cfg.len_min + 1;

  std::uint64_t next_id = 0;
  auto make_split = [&](auto count_of) {
    std::vector<Sample> split;
    for (std::size_t c = 0; c < cfg.k; ++c) {
      const std::size_t neighbour = (c + 1) % cfg.k;
      for (std::size_t i = 0; i < count_of(c); ++i) {
        const std::size_t len = cfg.len_min + static_cast<std::size_t>(rng.uniform_index(len_span));
        bool blur_a = false, blur_b = false;
        if (rng.uniform() < cfg.confusion_rate) (rng.coin() ? blur_b : blur_a) = true;
        const Vector centre_a = blur_a ? detail::midpoint(proto.a[c], proto.a[neighbour]) : proto.a[c];
        const Vector centre_b = blur_b ? detail::midpoint(proto.b[c], proto.b[neighbour]) : proto.b[c];
        Sample s;
        s.id = next_id++;
        s.label = c;
        s.seq_a = detail::noisy_sequence(centre_a, len, cfg.noise_sigma, rng);
        s.seq_b = detail::noisy_sequence(centre_b, len, cfg.noise_sigma, rng);
        split.push_back(std::move(s));
      }
    }
    return split;
  };

  Dataset ds;
  ds.train = make_split([&](std::size_t c) { return train_counts[c]; });
  ds.val = make_split([&](std::size_t) { return eval_n; });
  ds.test = make_split([&](std::size_t) { return eval_n; });
  return ds;
}

struct Clip {
  Matrix frames;  // clip_len x D
  std::size_t source_start = 0;
};

namespace detail {

inline Clip take_clip(const Matrix& seq, std::size_t clip_len, std::size_t start) {
  Clip clip{Matrix(clip_len, seq.cols()), start};
  for (std::size_t t = 0; t < clip_len; ++t) {
    const std::size_t src = std::min(start + t, seq.rows() - 1);
    std::ranges::copy(seq.row(src), clip.frames.row(t).begin());
  }
  return clip;
}

inline void check_clip_args(const Matrix& seq, std::size_t clip_len) {
  if (seq.rows() == 0) throw std::invalid_argument("clip: empty sequence");
  if (clip_len == 0) throw std::invalid_argument("clip: clip_len must be at least 1");
}

}  // namespace detail

/// Random window of clip_len consecutive frames; sequences shorter than
/// clip_len are padded by repeating the last frame.
inline Clip sample_clip(const Matrix& seq, std::size_t clip_len, Rng& rng) {
  detail::check_clip_args(seq, clip_len);
  std::size_t start = 0;
  if (seq.rows() >= clip_len)
    start = static_cast<std::size_t>(rng.uniform_index(seq.rows() - clip_len + 1));
  return detail::take_clip(seq, clip_len, start);
}

/// Deterministic centred window, padded like sample_clip.
inline Clip eval_clip(const Matrix& seq, std::size_t clip_len) {
  detail::check_clip_args(seq, clip_len);
  const std::size_t start = seq.rows() >= clip_len ? (seq.rows() - clip_len) / 2 : 0;
  return detail::take_clip(seq, clip_len, start);
}

inline Json sample_to_json(const Sample& s) {
  return Json{{"id", s.id},
              {"label", s.label},
              {"seq_a", matrix_to_json(s.seq_a)},
              {"seq_b", matrix_to_json(s.seq_b)}};
}

/// Parses one record; `line` is used for diagnostics only.
inline Sample sample_from_json_line(const std::string& text, std::size_t line) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(line, "record", std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError(line, "record", "expected an object");
  Sample s;
  const Json& id = detail::require(j, "id", line, "record");
  if (!id.is_number_unsigned()) throw FormatError(line, "id", "expected a nonnegative integer");
  s.id = id.get<std::uint64_t>();
  const Json& label = detail::require(j, "label", line, "record");
  if (!label.is_number_unsigned()) throw FormatError(line, "label", "expected a nonnegative integer");
  s.label = label.get<std::size_t>();
  s.seq_a = matrix_from_json(detail::require(j, "seq_a", line, "record"), line, "seq_a");
  s.seq_b = matrix_from_json(detail::require(j, "seq_b", line, "record"), line, "seq_b");
  if (s.seq_a.rows() == 0) throw FormatError(line, "seq_a", "sequence has no frames");
  if (s.seq_a.rows() != s.seq_b.rows()) {
    std::ostringstream os;
    os << "modalities not aligned: seq_a has " << s.seq_a.rows() << " frames, seq_b has "
       << s.seq_b.rows();
    throw AlignmentError(line, "seq_b", os.str());
  }
  return s;
}

inline void write_dataset(std::ostream& out, std::span<const Sample> samples) {
  for (const Sample& s : samples) out << sample_to_json(s).dump() << '\n';
}

inline std::vector<Sample> read_dataset(std::istream& in) {
  std::vector<Sample> samples;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) continue;
    samples.push_back(sample_from_json_line(text, line));
  }
  return samples;
}

inline void write_dataset(const std::filesystem::path& path, std::span<const Sample> samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_dataset(out, samples);
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return read_dataset(in);
}

}  // namespace mmfuse
