#pragma once

#include "penflow/problem.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>

namespace penflow {

/// Malformed input file; `field` names the offending entry.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& field, const std::string& what)
      : std::runtime_error("field '" + field + "': " + what), field_(field) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

namespace io {

using Json = nlohmann::json;

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("<file>", "cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError("<file>", std::string("not valid JSON: ") + e.what());
  }
}

inline const Json& require(const Json& j, const std::string& field) {
  if (!j.is_object()) throw ParseError("<root>", "expected an object");
  auto it = j.find(field);
  if (it == j.end()) throw ParseError(field, "missing");
  return *it;
}

inline int read_int(const Json& j, const std::string& field, int min_value = 0) {
  const Json& v = require(j, field);
  if (!v.is_number_integer()) throw ParseError(field, "expected an integer");
  const auto value = v.get<long long>();
  if (value < min_value) throw ParseError(field, "must be >= " + std::to_string(min_value));
  return static_cast<int>(value);
}

inline double read_double(const Json& j, const std::string& field) {
  const Json& v = require(j, field);
  if (!v.is_number()) throw ParseError(field, "expected a number");
  return v.get<double>();
}

inline Vector read_vector(const Json& j, const std::string& field, Eigen::Index size) {
  const Json& v = require(j, field);
  if (!v.is_array()) throw ParseError(field, "expected an array");
  if (static_cast<Eigen::Index>(v.size()) != size) {
    throw ParseError(field, "expected " + std::to_string(size) + " numbers, got " +
                                std::to_string(v.size()));
  }
  Vector out(size);
  for (Eigen::Index i = 0; i < size; ++i) {
    const Json& e = v[static_cast<std::size_t>(i)];
    if (!e.is_number()) throw ParseError(field, "entry " + std::to_string(i) + " is not a number");
    out(i) = e.get<double>();
  }
  return out;
}

/// Either an array of `rows` rows of `cols` numbers, or a row-major flat
/// array of rows*cols numbers.
inline Matrix read_matrix(const Json& j, const std::string& field, Eigen::Index rows,
                          Eigen::Index cols) {
  const Json& v = require(j, field);
  Matrix m(rows, cols);
  if (v.is_array() && !v.empty() && v.front().is_array()) {
    if (static_cast<Eigen::Index>(v.size()) != rows) {
      throw ParseError(field, "expected " + std::to_string(rows) + " rows, got " +
                                  std::to_string(v.size()));
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Json row{{"row", v[static_cast<std::size_t>(r)]}};
      try {
        m.row(r) = read_vector(row, "row", cols).transpose();
      } catch (const ParseError&) {
        throw ParseError(field, "row " + std::to_string(r) + " must hold " +
                                    std::to_string(cols) + " numbers");
      }
    }
    return m;
  }
  const Vector flat = read_vector(j, field, rows * cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = flat(r * cols + c);
  }
  return m;
}

inline Json vector_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Json matrix_json(const Matrix& m) {
  Json a = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) a.push_back(m(r, c));
  }
  return a;
}

/// Writes through a temporary sibling file and renames it into place.
inline void write_file_atomic(const std::string& path,
                              const std::function<void(std::ostream&)>& writer) {
  const std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    writer(out);
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot rename into " + path + ": " + ec.message());
  }
}

}  // namespace io
}  // namespace penflow
