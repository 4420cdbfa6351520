#pragma once

#include <cmath>
#include <vector>

#include "gadms/mat.hpp"

namespace gadms {

struct SdmConfig {
  double tau = 0.02;      // similarity temperature
  double epsilon = 1e-8;  // stabilizer inside the log ratio

  void validate() const {
    check(tau > 0.0, ErrorKind::Config, "temperature must be positive");
    check(epsilon > 0.0, ErrorKind::Config, "epsilon must be positive");
  }
};

// Row-wise softmax over temperature-scaled cosine similarities.
inline Mat predicted_distribution(const Mat& anchors, const Mat& gallery,
                                  double tau) {
  check(anchors.cols() == gallery.cols(), ErrorKind::Shape,
        "anchor/gallery width mismatch");
  check(anchors.rows() > 0 && gallery.rows() > 0, ErrorKind::DegenerateInput,
        "empty batch");
  Vec an(anchors.rows()), gn(gallery.rows());
  for (Eigen::Index i = 0; i < anchors.rows(); ++i) {
    an(i) = anchors.row(i).norm();
    check(an(i) > 0.0, ErrorKind::DegenerateInput, "zero-norm anchor embedding");
  }
  for (Eigen::Index j = 0; j < gallery.rows(); ++j) {
    gn(j) = gallery.row(j).norm();
    check(gn(j) > 0.0, ErrorKind::DegenerateInput, "zero-norm gallery embedding");
  }
  Mat z = (anchors * gallery.transpose()).array().colwise() / an.array();
  z = z.array().rowwise() / gn.transpose().array();
  z /= tau;
  Mat p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    RowVec e = (z.row(i).array() - mx).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

// Uniform mass over gallery entries sharing the anchor's identity.
inline Mat ground_truth_distribution(const std::vector<int>& anchor_ids,
                                     const std::vector<int>& gallery_ids) {
  const Eigen::Index a = static_cast<Eigen::Index>(anchor_ids.size());
  const Eigen::Index g = static_cast<Eigen::Index>(gallery_ids.size());
  check(a > 0 && g > 0, ErrorKind::DegenerateInput, "empty identity lists");
  Mat q = Mat::Zero(a, g);
  for (Eigen::Index i = 0; i < a; ++i) {
    int matches = 0;
    for (Eigen::Index j = 0; j < g; ++j)
      if (gallery_ids[static_cast<std::size_t>(j)] ==
          anchor_ids[static_cast<std::size_t>(i)]) {
        q(i, j) = 1.0;
        ++matches;
      }
    check(matches > 0, ErrorKind::Label, "anchor without any gallery match");
    q.row(i) /= static_cast<double>(matches);
  }
  return q;
}

// KL between predicted and stabilized ground-truth rows, averaged over anchors:
// (1/B) sum_ij p_ij * log(p_ij / (q_ij + eps)).
inline double sdm_kl(const Mat& p, const Mat& q, double eps) {
  check(p.rows() == q.rows() && p.cols() == q.cols(), ErrorKind::Shape,
        "distribution shapes differ");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      if (p(i, j) > 0.0) acc += p(i, j) * std::log(p(i, j) / (q(i, j) + eps));
  return acc / static_cast<double>(p.rows());
}

struct SdmParts {
  double l_i2t = 0.0;
  double l_t2i = 0.0;
  double total() const { return l_i2t + l_t2i; }
};

// Matching loss over both retrieval directions for a paired batch.
inline SdmParts sdm_loss(const Mat& image_embeds, const Mat& text_embeds,
                         const std::vector<int>& ids, const SdmConfig& cfg) {
  cfg.validate();
  check(image_embeds.rows() == text_embeds.rows() &&
            image_embeds.rows() == static_cast<Eigen::Index>(ids.size()),
        ErrorKind::Alignment, "batch rows and identity list must align");
  const Mat q = ground_truth_distribution(ids, ids);
  SdmParts out;
  out.l_i2t = sdm_kl(predicted_distribution(image_embeds, text_embeds, cfg.tau),
                     q, cfg.epsilon);
  out.l_t2i = sdm_kl(predicted_distribution(text_embeds, image_embeds, cfg.tau),
                     q.transpose(), cfg.epsilon);
  return out;
}

namespace detail {

// d(loss)/d(logits) for one softmax-KL direction. With a_ij = log(p_ij) -
// log(q_ij + eps): dL/dz_im = p_im * ((a_im + 1) - sum_j p_ij (a_ij + 1)) / B.
inline Mat kl_logit_grad(const Mat& p, const Mat& q, double eps) {
  Mat a = (p.array().max(1e-300).log() - (q.array() + eps).log()).matrix();
  Mat g(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double inner = (p.row(i).array() * (a.row(i).array() + 1.0)).sum();
    g.row(i) = p.row(i).array() * (a.row(i).array() + 1.0 - inner);
  }
  return g / static_cast<double>(p.rows());
}

}  // namespace detail

struct SdmGrad {
  SdmParts parts;
  Mat d_image;  // dL/d image embeddings, B x d
  Mat d_text;   // dL/d text embeddings, B x d
};

// Loss and embedding gradients in closed form. Chains the logit gradient
// through the temperature and the cosine similarity.
inline SdmGrad sdm_loss_grad(const Mat& image_embeds, const Mat& text_embeds,
                             const std::vector<int>& ids, const SdmConfig& cfg) {
  cfg.validate();
  const Eigen::Index b = image_embeds.rows();
  check(text_embeds.rows() == b && static_cast<Eigen::Index>(ids.size()) == b,
        ErrorKind::Alignment, "batch rows and identity list must align");
  const Mat q = ground_truth_distribution(ids, ids);
  const Mat p_i2t = predicted_distribution(image_embeds, text_embeds, cfg.tau);
  const Mat p_t2i = predicted_distribution(text_embeds, image_embeds, cfg.tau);

  SdmGrad out;
  out.parts.l_i2t = sdm_kl(p_i2t, q, cfg.epsilon);
  out.parts.l_t2i = sdm_kl(p_t2i, q.transpose(), cfg.epsilon);
  // d(total)/d(cosine matrix), oriented image-rows x text-cols.
  Mat dc = (detail::kl_logit_grad(p_i2t, q, cfg.epsilon) +
            detail::kl_logit_grad(p_t2i, q.transpose(), cfg.epsilon).transpose()) /
           cfg.tau;

  out.d_image = Mat::Zero(b, image_embeds.cols());
  out.d_text = Mat::Zero(b, text_embeds.cols());
  Vec vn(b), tn(b);
  for (Eigen::Index i = 0; i < b; ++i) vn(i) = image_embeds.row(i).norm();
  for (Eigen::Index j = 0; j < b; ++j) tn(j) = text_embeds.row(j).norm();
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) {
      const double g = dc(i, j);
      if (g == 0.0) continue;
      const RowVec& v = image_embeds.row(i);
      const RowVec& t = text_embeds.row(j);
      const double c = v.dot(t) / (vn(i) * tn(j));
      out.d_image.row(i) += g * (t / (vn(i) * tn(j)) - c * v / (vn(i) * vn(i)));
      out.d_text.row(j) += g * (v / (vn(i) * tn(j)) - c * t / (tn(j) * tn(j)));
    }
  }
  return out;
}

// Masked-token cross entropy. The default normalizer is |M| * |V|; the
// conventional flag switches to the usual 1/|M| mean.
inline double mtp_loss(const Mat& logits, const std::vector<int>& targets,
                       bool conventional = false) {
  const Eigen::Index m = logits.rows();
  check(static_cast<Eigen::Index>(targets.size()) == m, ErrorKind::Alignment,
        "one target per masked row required");
  if (m == 0) return 0.0;
  const Eigen::Index vocab = logits.cols();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    check(y >= 0 && y < vocab, ErrorKind::Vocabulary,
          "target id outside the vocabulary");
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    acc -= logits(i, y) - lse;
  }
  const double denom =
      conventional ? static_cast<double>(m) : static_cast<double>(m * vocab);
  return acc / denom;
}

struct MtpGrad {
  double loss = 0.0;
  Mat d_logits;  // |M| x |V|
};

inline MtpGrad mtp_loss_grad(const Mat& logits, const std::vector<int>& targets,
                             bool conventional = false) {
  MtpGrad out;
  out.loss = mtp_loss(logits, targets, conventional);
  const Eigen::Index m = logits.rows();
  out.d_logits = Mat::Zero(m, logits.cols());
  if (m == 0) return out;
  const double denom = conventional
                           ? static_cast<double>(m)
                           : static_cast<double>(m * logits.cols());
  for (Eigen::Index i = 0; i < m; ++i) {
    const double mx = logits.row(i).maxCoeff();
    RowVec e = (logits.row(i).array() - mx).exp();
    out.d_logits.row(i) = e / e.sum();
    out.d_logits(i, targets[static_cast<std::size_t>(i)]) -= 1.0;
  }
  out.d_logits /= denom;
  return out;
}

struct LossReport {
  double l_i2t = 0.0;
  double l_t2i = 0.0;
  double l_sdm = 0.0;
  double l_mtp = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

inline LossReport total_loss(const SdmParts& sdm, double l_mtp, double beta) {
  LossReport r;
  r.l_i2t = sdm.l_i2t;
  r.l_t2i = sdm.l_t2i;
  r.l_sdm = sdm.total();
  r.l_mtp = l_mtp;
  r.beta = beta;
  r.total = r.l_sdm + beta * l_mtp;
  return r;
}

}  // namespace gadms
