#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "gadms/error.hpp"

namespace gadms {

// Row-major throughout: token sequences are (positions x channels) and the
// hot loops walk rows.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline double cosine(const RowVec& a, const RowVec& b) {
  const double na = a.norm();
  const double nb = b.norm();
  check(na > 0.0 && nb > 0.0, ErrorKind::DegenerateInput,
        "cosine similarity of a zero-norm vector");
  return a.dot(b) / (na * nb);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace gadms
