#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "gadms/encoder.hpp"

namespace gadms {

struct GassConfig {
  // Number of trailing encoder layers whose scores are averaged.
  int layers = 0;  // 0 selects the default of ceil(2/3 * depth)
  std::vector<int> scales{1, 2};

  static int default_layer_count(int depth) {
    return (2 * depth + 2) / 3;  // ceil(2*depth / 3)
  }

  int resolve_layer_count(int depth) const {
    const int L = layers > 0 ? layers : default_layer_count(depth);
    check(L >= 1 && L <= depth, ErrorKind::Config,
          "score layer count outside [1, depth]");
    return L;
  }

  std::vector<int> layer_indices(int depth) const {
    const int L = resolve_layer_count(depth);
    std::vector<int> idx(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) idx[static_cast<std::size_t>(i)] = depth - L + i;
    return idx;
  }
};

namespace detail {

// Mean over one non-overlapping window per output row; the tail window is
// padded by repeating the final row.
inline Mat pool_rows(const Mat& x, int scale) {
  const Eigen::Index n = x.rows();
  const Eigen::Index m = (n + scale - 1) / scale;
  Mat out(m, x.cols());
  for (Eigen::Index w = 0; w < m; ++w) {
    RowVec acc = RowVec::Zero(x.cols());
    for (int j = 0; j < scale; ++j) {
      const Eigen::Index r = std::min(w * scale + j, n - 1);
      acc += x.row(r);
    }
    out.row(w) = acc / static_cast<double>(scale);
  }
  return out;
}

// Endpoint-aligned linear interpolation of rows back to a target length.
inline Mat interp_rows(const Mat& x, Eigen::Index n) {
  const Eigen::Index m = x.rows();
  if (m == n) return x;
  Mat out(n, x.cols());
  if (m == 1) {
    out.rowwise() = x.row(0);
    return out;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(m - 1) /
                       static_cast<double>(n - 1);
    const Eigen::Index lo = static_cast<Eigen::Index>(std::floor(pos));
    const Eigen::Index hi = std::min(lo + 1, m - 1);
    const double frac = pos - static_cast<double>(lo);
    out.row(i) = (1.0 - frac) * x.row(lo) + frac * x.row(hi);
  }
  return out;
}

}  // namespace detail

// Multi-scale pooling: window means at each scale, interpolated back to the
// input length, averaged across scales. A single-row input passes through
// unchanged at every scale.
inline Mat msp(const Mat& x, const std::vector<int>& scales) {
  check(x.rows() > 0, ErrorKind::DegenerateInput, "pooling over empty input");
  check(!scales.empty(), ErrorKind::Config, "pooling needs at least one scale");
  Mat acc = Mat::Zero(x.rows(), x.cols());
  for (int c : scales) {
    check(c >= 1, ErrorKind::Config, "pooling scale must be >= 1");
    acc += detail::interp_rows(detail::pool_rows(x, c), x.rows());
  }
  return acc / static_cast<double>(scales.size());
}

// Softmax over valid positions of the pooled query-key affinities between
// the eos query row and every key row. Invalid positions get weight zero.
inline RowVec spatial_importance(const RowVec& q_eos, const Mat& k,
                                 const std::vector<char>& valid,
                                 const std::vector<int>& scales) {
  check(static_cast<Eigen::Index>(valid.size()) == k.rows(), ErrorKind::Shape,
        "validity flags do not match the key rows");
  const Mat qp = msp(Mat(q_eos), scales);
  const Mat kp = msp(k, scales);
  RowVec logits = (qp * kp.transpose()).row(0);
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (valid[static_cast<std::size_t>(i)]) mx = std::max(mx, logits(i));
  check(std::isfinite(mx), ErrorKind::DegenerateInput,
        "no valid positions for importance weights");
  RowVec w = RowVec::Zero(logits.size());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (!valid[static_cast<std::size_t>(i)]) continue;
    w(i) = std::exp(logits(i) - mx);
    sum += w(i);
  }
  return w / sum;
}

// Gradient-weighted value alignment: s_g[i] = w[i] * <g, v_i>.
inline RowVec gradient_score(const RowVec& g, const RowVec& w, const Mat& v) {
  check(w.size() == v.rows(), ErrorKind::Shape,
        "importance weights do not match the value rows");
  check(g.size() == v.cols(), ErrorKind::Shape,
        "gradient width does not match the value width");
  return w.cwiseProduct((v * g.transpose()).transpose().row(0));
}

// Head-averaged attention from the eos query to every position, rescaled to
// sum to one over the valid positions.
inline RowVec attention_score(const std::vector<Mat>& attn, int eos_pos,
                              const std::vector<char>& valid) {
  check(!attn.empty(), ErrorKind::DegenerateInput, "no attention maps");
  const Eigen::Index n = attn.front().rows();
  check(eos_pos >= 0 && eos_pos < n, ErrorKind::Shape,
        "eos position outside the attention map");
  check(static_cast<Eigen::Index>(valid.size()) == n, ErrorKind::Shape,
        "validity flags do not match the attention map");
  RowVec s = RowVec::Zero(n);
  for (const Mat& a : attn) {
    check(a.rows() == n && a.cols() == n, ErrorKind::Shape,
          "attention maps disagree on shape");
    s += a.row(eos_pos);
  }
  s /= static_cast<double>(attn.size());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (valid[static_cast<std::size_t>(i)])
      sum += s(i);
    else
      s(i) = 0.0;
  }
  check(sum > 0.0, ErrorKind::DegenerateInput,
        "attention mass over valid positions is zero");
  return s / sum;
}

// ReLU of the layer-mean of elementwise gradient-attention products.
inline RowVec fuse_scores(const std::vector<RowVec>& grad_scores,
                          const std::vector<RowVec>& attn_scores) {
  check(!grad_scores.empty() && grad_scores.size() == attn_scores.size(),
        ErrorKind::Config, "per-layer score lists must match and be non-empty");
  RowVec acc = RowVec::Zero(grad_scores.front().size());
  for (std::size_t l = 0; l < grad_scores.size(); ++l) {
    check(grad_scores[l].size() == acc.size() &&
              attn_scores[l].size() == acc.size(),
          ErrorKind::Shape, "per-layer scores disagree on length");
    acc += grad_scores[l].cwiseProduct(attn_scores[l]);
  }
  acc /= static_cast<double>(grad_scores.size());
  return acc.cwiseMax(0.0);
}

// Min-max rescaling over valid positions into [0, 1]; a constant score maps
// to 0.5 and invalid positions map to 0.
inline RowVec normalize_scores(const RowVec& s, const std::vector<char>& valid) {
  check(static_cast<Eigen::Index>(valid.size()) == s.size(), ErrorKind::Shape,
        "validity flags do not match the scores");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (!valid[static_cast<std::size_t>(i)]) continue;
    lo = std::min(lo, s(i));
    hi = std::max(hi, s(i));
  }
  check(lo <= hi, ErrorKind::DegenerateInput,
        "no valid positions to normalize over");
  RowVec out = RowVec::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (!valid[static_cast<std::size_t>(i)]) continue;
    out(i) = hi > lo ? (s(i) - lo) / (hi - lo) : 0.5;
  }
  return out;
}

struct GassScores {
  RowVec fused;       // pre-normalization, non-negative
  RowVec normalized;  // in [0, 1] on valid positions, 0 elsewhere
};

// Full per-caption scoring pipeline over the traced layers and the matching
// similarity gradients.
inline GassScores compute_gass(const std::vector<LayerTrace>& traces,
                               const GradientProbe& probe,
                               const std::vector<char>& valid, int eos_pos,
                               const GassConfig& cfg, int depth) {
  const std::vector<int> idx = cfg.layer_indices(depth);
  check(probe.layers == idx, ErrorKind::Contract,
        "gradient probe does not cover the scored layers");
  std::vector<RowVec> sg, sa;
  sg.reserve(idx.size());
  sa.reserve(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto& tr = traces.at(static_cast<std::size_t>(idx[j]));
    check(tr.layer_index == idx[j], ErrorKind::Contract,
          "trace layer order does not match");
    const RowVec w = spatial_importance(tr.q_eos, tr.k, valid, cfg.scales);
    sg.push_back(gradient_score(probe.g[j], w, tr.v));
    sa.push_back(attention_score(tr.attn, eos_pos, valid));
  }
  GassScores out;
  out.fused = fuse_scores(sg, sa);
  out.normalized = normalize_scores(out.fused, valid);
  return out;
}

}  // namespace gadms
