#pragma once

#include <algorithm>
#include <vector>

#include <json.hpp>

#include "gadms/corpus.hpp"
#include "gadms/model.hpp"

namespace gadms {

// Query-by-gallery similarity scores with binary relevance ground truth.
struct ScoreMatrix {
  Mat scores;     // Q x G
  Mat relevance;  // Q x G, entries 0 or 1

  void validate() const {
    check(scores.rows() == relevance.rows() && scores.cols() == relevance.cols(),
          ErrorKind::Shape, "score and relevance shapes differ");
    check(scores.rows() > 0 && scores.cols() > 0, ErrorKind::DegenerateInput,
          "empty score matrix");
    check(all_finite(scores), ErrorKind::Numeric, "non-finite scores");
    for (Eigen::Index i = 0; i < relevance.rows(); ++i) {
      bool any = false;
      for (Eigen::Index j = 0; j < relevance.cols(); ++j) {
        const double r = relevance(i, j);
        check(r == 0.0 || r == 1.0, ErrorKind::Label,
              "relevance entries must be 0 or 1");
        any = any || r == 1.0;
      }
      check(any, ErrorKind::Label, "query row without any relevant item");
    }
  }
};

namespace detail {

// Rank of gallery item j for query row i under the deterministic ordering
// (descending score, ties by ascending gallery index). Rank 1 is best.
inline int item_rank(const Mat& scores, Eigen::Index i, Eigen::Index j) {
  int rank = 1;
  const double s = scores(i, j);
  for (Eigen::Index g = 0; g < scores.cols(); ++g) {
    if (g == j) continue;
    if (scores(i, g) > s || (scores(i, g) == s && g < j)) ++rank;
  }
  return rank;
}

}  // namespace detail

// Fraction of queries whose best-ranked relevant item lands in the top k.
// Computed by rank counting rather than sorting, so a full-sort oracle is an
// independent cross-check.
inline double rank_k(const ScoreMatrix& m, int k) {
  m.validate();
  check(k >= 1 && k <= m.scores.cols(), ErrorKind::Config,
        "k outside [1, gallery size]");
  int hits = 0;
  for (Eigen::Index i = 0; i < m.scores.rows(); ++i) {
    int best = static_cast<int>(m.scores.cols()) + 1;
    for (Eigen::Index j = 0; j < m.scores.cols(); ++j)
      if (m.relevance(i, j) == 1.0)
        best = std::min(best, detail::item_rank(m.scores, i, j));
    if (best <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(m.scores.rows());
}

// Mean over queries of the average, over that query's relevant items, of
// precision at each relevant item's rank.
inline double mean_average_precision(const ScoreMatrix& m) {
  m.validate();
  double map = 0.0;
  for (Eigen::Index i = 0; i < m.scores.rows(); ++i) {
    std::vector<int> rel_ranks;
    for (Eigen::Index j = 0; j < m.scores.cols(); ++j)
      if (m.relevance(i, j) == 1.0)
        rel_ranks.push_back(detail::item_rank(m.scores, i, j));
    std::sort(rel_ranks.begin(), rel_ranks.end());
    double ap = 0.0;
    for (std::size_t r = 0; r < rel_ranks.size(); ++r)
      ap += static_cast<double>(r + 1) / rel_ranks[r];
    map += ap / static_cast<double>(rel_ranks.size());
  }
  return map / static_cast<double>(m.scores.rows());
}

struct MetricsReport {
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0, map = 0.0;
  int query_count = 0, gallery_count = 0;
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"rank1", r.rank1},
                     {"rank5", r.rank5},
                     {"rank10", r.rank10},
                     {"map", r.map},
                     {"query_count", r.query_count},
                     {"gallery_count", r.gallery_count}};
}

// Builds the text-to-image score matrix for a record set: every caption
// queries the full image gallery, relevance is identity match.
inline ScoreMatrix score_records(const Model& model,
                                 const std::vector<PairRecord>& records) {
  check(!records.empty(), ErrorKind::DegenerateInput, "no records to score");
  const Eigen::Index n = static_cast<Eigen::Index>(records.size());
  const int d = model.cfg.encoder.width;
  Mat t_eos(n, d), v_cls(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& rec = records[static_cast<std::size_t>(i)];
    const TokenSequence seq = TokenSequence::build(rec.tokens, model.cfg.encoder);
    t_eos.row(i) = encode_text(model.text, seq).eos;
    v_cls.row(i) = encode_image(model.image, rec.image).cls;
  }
  ScoreMatrix m;
  m.scores.resize(n, n);
  for (Eigen::Index q = 0; q < n; ++q)
    for (Eigen::Index g = 0; g < n; ++g)
      m.scores(q, g) = cosine(t_eos.row(q), v_cls.row(g));
  m.relevance = Mat::Zero(n, n);
  for (Eigen::Index q = 0; q < n; ++q)
    for (Eigen::Index g = 0; g < n; ++g)
      if (records[static_cast<std::size_t>(q)].identity ==
          records[static_cast<std::size_t>(g)].identity)
        m.relevance(q, g) = 1.0;
  return m;
}

inline MetricsReport evaluate(const Model& model,
                              const std::vector<PairRecord>& records,
                              const Tokenizer& vocab) {
  check(vocab.size() <= model.cfg.encoder.vocab_size, ErrorKind::Compatibility,
        "corpus vocabulary larger than the model vocabulary");
  for (const auto& rec : records)
    for (int id : rec.tokens)
      check(id >= 0 && id < model.cfg.encoder.vocab_size,
            ErrorKind::Compatibility, "corpus token outside the model vocabulary");
  const ScoreMatrix m = score_records(model, records);
  MetricsReport r;
  r.query_count = static_cast<int>(m.scores.rows());
  r.gallery_count = static_cast<int>(m.scores.cols());
  r.rank1 = rank_k(m, std::min<int>(1, r.gallery_count));
  r.rank5 = rank_k(m, std::min<int>(5, r.gallery_count));
  r.rank10 = rank_k(m, std::min<int>(10, r.gallery_count));
  r.map = mean_average_precision(m);
  return r;
}

}  // namespace gadms
