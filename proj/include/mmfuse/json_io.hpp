// Shape-tagged array encoding shared by dataset records, checkpoints and
// reports: {"shape": [rows, cols], "data": [...]} with shortest round-trip
// decimal reals.
#pragma once

#include <cstddef>
#include <fstream>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "mmfuse/numkernel.hpp"

namespace mmfuse {

using Json = nlohmann::json;

/// A malformed document; carries the offending field and, for line-oriented
/// files, the 1-based line number (0 when not applicable).
class FormatError : public std::runtime_error {
 public:
  FormatError(std::size_t line, std::string field, const std::string& what)
      : std::runtime_error(describe(line, field, what)), line_(line), field_(std::move(field)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  static std::string describe(std::size_t line, const std::string& field,
                              const std::string& what) {
    std::ostringstream os;
    if (line > 0) os << "line " << line << ": ";
    os << "field '" << field << "': " << what;
    return os.str();
  }

  std::size_t line_;
  std::string field_;
};

inline Json matrix_to_json(const Matrix& m) {
  return Json{{"shape", {m.rows(), m.cols()}}, {"data", m.data()}};
}

inline Json vector_to_json(const Vector& v) {
  return Json{{"shape", {v.size()}}, {"data", v}};
}

namespace detail {

inline const Json& require(const Json& obj, const char* key, std::size_t line,
                           const std::string& field) {
  if (!obj.is_object()) throw FormatError(line, field, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw FormatError(line, field + "." + key, "missing");
  return *it;
}

inline std::vector<double> read_reals(const Json& data, std::size_t line,
                                      const std::string& field) {
  if (!data.is_array()) throw FormatError(line, field + ".data", "expected an array");
  std::vector<double> out;
  out.reserve(data.size());
  for (const auto& x : data) {
    if (!x.is_number()) throw FormatError(line, field + ".data", "non-numeric entry");
    out.push_back(x.get<double>());
  }
  if (!all_finite(out)) throw FormatError(line, field + ".data", "non-finite entry");
  return out;
}

inline std::size_t read_extent(const Json& x, std::size_t line, const std::string& field) {
  if (!x.is_number_unsigned()) throw FormatError(line, field + ".shape", "expected nonnegative integers");
  return x.get<std::size_t>();
}

}  // namespace detail

inline Matrix matrix_from_json(const Json& j, std::size_t line, const std::string& field) {
  const Json& shape = detail::require(j, "shape", line, field);
  if (!shape.is_array() || shape.size() != 2)
    throw FormatError(line, field + ".shape", "expected [rows, cols]");
  const std::size_t rows = detail::read_extent(shape[0], line, field);
  const std::size_t cols = detail::read_extent(shape[1], line, field);
  auto data = detail::read_reals(detail::require(j, "data", line, field), line, field);
  if (data.size() != rows * cols) {
    std::ostringstream os;
    os << "shape [" << rows << ", " << cols << "] needs " << rows * cols << " values, found "
       << data.size();
    throw FormatError(line, field, os.str());
  }
  return Matrix(rows, cols, std::move(data));
}

inline Vector vector_from_json(const Json& j, std::size_t line, const std::string& field) {
  const Json& shape = detail::require(j, "shape", line, field);
  if (!shape.is_array() || shape.size() != 1)
    throw FormatError(line, field + ".shape", "expected [length]");
  const std::size_t n = detail::read_extent(shape[0], line, field);
  auto data = detail::read_reals(detail::require(j, "data", line, field), line, field);
  if (data.size() != n) {
    std::ostringstream os;
    os << "shape [" << n << "] but found " << data.size() << " values";
    throw FormatError(line, field, os.str());
  }
  return data;
}

/// Whole-file helpers. Writes are newline-terminated.
inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline Json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(0, path.filename().string(), e.what());
  }
}

}  // namespace mmfuse
