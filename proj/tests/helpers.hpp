#pragma once

// Shared fixtures for the test suite: deterministic random tensors, the
// finite-difference harness, and small model configurations sized so a
// full forward/backward runs in milliseconds.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gadms/encoder.hpp"
#include "gadms/mat.hpp"
#include "gadms/model.hpp"
#include "gadms/rng.hpp"

namespace testutil {

using gadms::Mat;
using gadms::RowVec;

// Relative error between a computed vector/matrix and its reference, using
// the Frobenius norm of the difference over the reference norm.
inline double rel_err(const Mat& got, const Mat& want) {
  const double denom = std::max(1e-12, want.norm());
  return (got - want).norm() / denom;
}

inline Mat random_mat(gadms::Rng& rng, Eigen::Index rows, Eigen::Index cols,
                      double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = scale * rng.gaussian();
  return m;
}

// Central finite differences of a scalar function with respect to every
// entry of `theta`, mutating it in place and restoring it afterwards.
inline Mat fd_grad(Mat& theta, const std::function<double()>& f,
                   double h = 1e-5) {
  Mat g(theta.rows(), theta.cols());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double orig = theta.data()[i];
    theta.data()[i] = orig + h;
    const double up = f();
    theta.data()[i] = orig - h;
    const double down = f();
    theta.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Small encoder shape used wherever the test needs real forward passes but
// not the full default geometry.
inline gadms::EncoderConfig tiny_encoder() {
  gadms::EncoderConfig cfg;
  cfg.text_depth = 2;
  cfg.image_depth = 2;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.vocab_size = 64;
  cfg.max_text_len = 8;
  cfg.grid_rows = 2;
  cfg.grid_cols = 2;
  cfg.mlp_ratio = 2;
  return cfg;
}

inline gadms::ModelConfig tiny_model_config() {
  gadms::ModelConfig cfg;
  cfg.encoder = tiny_encoder();
  cfg.decoder.depth = 2;
  return cfg;
}

// A well-formed token sequence with `n_content` arbitrary content tokens.
inline std::vector<int> content_tokens(gadms::Rng& rng, int n_content,
                                       int vocab_size) {
  std::vector<int> out;
  for (int i = 0; i < n_content; ++i)
    out.push_back(4 + static_cast<int>(rng.below(
                          static_cast<std::uint64_t>(vocab_size - 4))));
  return out;
}

inline std::vector<char> all_valid(int n) {
  return std::vector<char>(static_cast<std::size_t>(n), 1);
}

}  // namespace testutil
