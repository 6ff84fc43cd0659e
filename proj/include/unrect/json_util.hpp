#pragma once

#include <nlohmann/json.hpp>

#include "unrect/geometry.hpp"

namespace unrect {

inline nlohmann::json vec_to_json(const Vec& v) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

inline Vec vec_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() < 1 || j.size() > 3) {
    throw ValidationError("expected a vector of 1 to 3 numbers");
  }
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

inline nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    j.push_back(row);
  }
  return j;
}

inline Mat mat_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty() || j.size() > 3) throw ValidationError("expected a matrix");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  if (cols < 1 || cols > 3) throw ValidationError("expected a matrix with 1 to 3 columns");
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(r)].size()) != cols) {
      throw ValidationError("ragged matrix");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

}  // namespace unrect
