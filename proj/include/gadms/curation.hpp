#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gadms/mat.hpp"
#include "gadms/rng.hpp"

namespace gadms {

// ---------------------------------------------------------------------------
// Person-crop filtering
// ---------------------------------------------------------------------------

struct DetectionRecord {
  std::string image_id;
  double bbox_width = 0.0;   // pixels
  double bbox_height = 0.0;  // pixels
  double confidence = 0.0;   // detector confidence in [0, 1]
};

enum class KeypointCategory { Head, Hip, Other };

struct Keypoint {
  std::string name;
  bool visible = false;
  KeypointCategory category = KeypointCategory::Other;
};

struct PoseRecord {
  std::vector<Keypoint> keypoints;
};

struct FilterCriteria {
  double min_short_side = 90.0;   // strict: shorter side must exceed this
  double aspect_lo = 2.0;         // inclusive height/width band
  double aspect_hi = 4.0;
  double min_confidence = 0.85;   // strict
  int min_visible_kp = 8;         // inclusive
  int min_hip = 1;                // inclusive
  int min_head = 2;               // inclusive

  void validate() const {
    check(min_short_side > 0.0 && min_confidence > 0.0 && aspect_lo > 0.0 &&
              aspect_hi > 0.0,
          ErrorKind::Config, "filter thresholds must be positive");
    check(aspect_lo < aspect_hi, ErrorKind::Config,
          "aspect band must satisfy lo < hi");
    check(min_visible_kp >= 0 && min_hip >= 0 && min_head >= 0,
          ErrorKind::Config, "keypoint thresholds must be non-negative");
  }
};

struct Verdict {
  bool accepted = true;
  std::vector<std::string> reasons;  // every violated rule, not just the first

  void reject(const std::string& reason) {
    accepted = false;
    reasons.push_back(reason);
  }
};

// Geometry + confidence rules. Short side and confidence are strict
// ("exceeds"/"above"); the aspect band is inclusive ("between").
inline Verdict filter_person_crop(const DetectionRecord& rec,
                                  const FilterCriteria& crit) {
  crit.validate();
  check(rec.bbox_width > 0.0 && rec.bbox_height > 0.0,
        ErrorKind::MalformedRecord, "nonpositive bounding-box dimensions");
  check(rec.confidence >= 0.0 && rec.confidence <= 1.0,
        ErrorKind::MalformedRecord, "confidence outside [0, 1]");
  Verdict v;
  if (!(std::min(rec.bbox_width, rec.bbox_height) > crit.min_short_side))
    v.reject("short-side");
  const double aspect = rec.bbox_height / rec.bbox_width;
  if (!(aspect >= crit.aspect_lo && aspect <= crit.aspect_hi))
    v.reject("aspect");
  if (!(rec.confidence > crit.min_confidence)) v.reject("confidence");
  return v;
}

// Pose-integrity rules, all inclusive ("at least").
inline Verdict verify_pose(const PoseRecord& rec, const FilterCriteria& crit) {
  crit.validate();
  std::set<std::string> names;
  for (const auto& kp : rec.keypoints)
    check(names.insert(kp.name).second, ErrorKind::MalformedRecord,
          "duplicate keypoint name: " + kp.name);
  int visible = 0, hip = 0, head = 0;
  for (const auto& kp : rec.keypoints) {
    if (!kp.visible) continue;
    ++visible;
    if (kp.category == KeypointCategory::Hip) ++hip;
    if (kp.category == KeypointCategory::Head) ++head;
  }
  Verdict v;
  if (visible < crit.min_visible_kp) v.reject("keypoint-count");
  if (hip < crit.min_hip) v.reject("hip");
  if (head < crit.min_head) v.reject("head");
  return v;
}

// ---------------------------------------------------------------------------
// Template clustering and selection
// ---------------------------------------------------------------------------

struct TemplateRecord {
  std::string template_id;
  std::string text;
  RowVec embedding;  // unit norm
};

inline void validate_templates(const std::vector<TemplateRecord>& records) {
  check(!records.empty(), ErrorKind::DegenerateInput, "no template records");
  const Eigen::Index d = records.front().embedding.size();
  for (const auto& r : records) {
    check(r.embedding.size() == d, ErrorKind::Shape,
          "template embeddings disagree on dimension");
    check(std::abs(r.embedding.norm() - 1.0) <= 1e-5, ErrorKind::Contract,
          "template embedding not unit norm: " + r.template_id);
  }
}

struct Clustering {
  std::vector<int> assignment;  // record index -> cluster
  Mat centroids;                // k x d
  int iterations = 0;
};

namespace detail {

inline int nearest_centroid(const RowVec& x, const Mat& centroids) {
  int best = 0;
  double best_d = (x - centroids.row(0)).squaredNorm();
  for (Eigen::Index c = 1; c < centroids.rows(); ++c) {
    const double d = (x - centroids.row(c)).squaredNorm();
    if (d < best_d) {  // ties keep the lowest cluster index
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

// Index of the point farthest from its nearest centroid among the first
// `have` centroids; ties go to the lowest record index.
inline int farthest_point(const std::vector<TemplateRecord>& records,
                          const Mat& centroids, Eigen::Index have) {
  int best = 0;
  double best_d = -1.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    double near = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < have; ++c)
      near = std::min(near,
                      (records[i].embedding - centroids.row(c)).squaredNorm());
    if (near > best_d) {
      best_d = near;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace detail

// Seeded k-means on the embedding vectors: the first centroid is a uniform
// random pick, the rest are farthest-point choices; Lloyd iterations stop at
// 300 rounds or when no centroid moves more than 1e-6.
inline Clustering cluster_templates(const std::vector<TemplateRecord>& records,
                                    int k, std::uint64_t seed) {
  validate_templates(records);
  const int n = static_cast<int>(records.size());
  check(k >= 1, ErrorKind::Config, "cluster count must be >= 1");
  check(k <= n, ErrorKind::Config, "cluster count exceeds the record count");
  const Eigen::Index d = records.front().embedding.size();

  Rng rng = derive_stream(seed, Stream::Kmeans, {});
  Mat centroids(k, d);
  centroids.row(0) =
      records[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n)))]
          .embedding;
  for (int c = 1; c < k; ++c)
    centroids.row(c) =
        records[static_cast<std::size_t>(
                    detail::farthest_point(records, centroids, c))]
            .embedding;

  Clustering out;
  out.assignment.assign(static_cast<std::size_t>(n), 0);
  constexpr int kMaxIter = 300;
  constexpr double kShiftTol = 1e-6;
  for (int iter = 0; iter < kMaxIter; ++iter) {
    out.iterations = iter + 1;
    for (int i = 0; i < n; ++i)
      out.assignment[static_cast<std::size_t>(i)] =
          detail::nearest_centroid(records[static_cast<std::size_t>(i)].embedding,
                                   centroids);
    Mat next = Mat::Zero(k, d);
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      next.row(out.assignment[static_cast<std::size_t>(i)]) +=
          records[static_cast<std::size_t>(i)].embedding;
      ++count[static_cast<std::size_t>(out.assignment[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] > 0) {
        next.row(c) /= static_cast<double>(count[static_cast<std::size_t>(c)]);
      } else {
        // Re-seed a dead centroid from the point worst served by the rest.
        next.row(c) =
            records[static_cast<std::size_t>(
                        detail::farthest_point(records, centroids, k))]
                .embedding;
      }
    }
    const double shift = (next - centroids).rowwise().norm().maxCoeff();
    centroids = next;
    if (shift < kShiftTol) break;
  }
  for (int i = 0; i < n; ++i)
    out.assignment[static_cast<std::size_t>(i)] = detail::nearest_centroid(
        records[static_cast<std::size_t>(i)].embedding, centroids);
  out.centroids = std::move(centroids);
  return out;
}

// Sum of squared distances to the assigned centroid; the quantity Lloyd
// iterations are guaranteed not to increase.
inline double kmeans_objective(const std::vector<TemplateRecord>& records,
                               const Clustering& c) {
  double acc = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i)
    acc += (records[i].embedding -
            c.centroids.row(c.assignment[i]))
               .squaredNorm();
  return acc;
}

struct SelectedCluster {
  int cluster = -1;
  int size = 0;
  std::string representative;         // template_id with max centroid cosine
  std::vector<std::string> selected;  // representative + random others
};

struct TemplateBank {
  int k = 0;
  std::vector<SelectedCluster> clusters;
  std::vector<std::string> warnings;
};

// Per cluster: the member closest to the centroid by cosine (ties broken by
// lowest template_id) plus `per_cluster_random` distinct random others.
inline TemplateBank select_templates(const std::vector<TemplateRecord>& records,
                                     const Clustering& clustering,
                                     int per_cluster_random, std::uint64_t seed) {
  validate_templates(records);
  check(clustering.assignment.size() == records.size(), ErrorKind::Alignment,
        "assignment does not cover the records");
  const int k = static_cast<int>(clustering.centroids.rows());
  TemplateBank bank;
  bank.k = k;
  for (int c = 0; c < k; ++c) {
    std::vector<int> members;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (clustering.assignment[i] == c) members.push_back(static_cast<int>(i));
    if (members.empty()) {
      bank.warnings.push_back("cluster " + std::to_string(c) +
                               " is empty; skipped");
      continue;
    }
    int rep = members.front();
    double rep_cos = -2.0;
    for (int i : members) {
      const double cs = cosine(records[static_cast<std::size_t>(i)].embedding,
                               clustering.centroids.row(c));
      const bool better =
          cs > rep_cos ||
          (cs == rep_cos &&
           records[static_cast<std::size_t>(i)].template_id <
               records[static_cast<std::size_t>(rep)].template_id);
      if (better) {
        rep_cos = cs;
        rep = i;
      }
    }
    SelectedCluster sel;
    sel.cluster = c;
    sel.size = static_cast<int>(members.size());
    sel.representative = records[static_cast<std::size_t>(rep)].template_id;
    sel.selected.push_back(sel.representative);
    std::vector<int> rest;
    for (int i : members)
      if (i != rep) rest.push_back(i);
    Rng rng = derive_stream(seed, Stream::Select,
                            {static_cast<std::uint64_t>(c)});
    rng.shuffle(rest);
    const int take = std::min<int>(per_cluster_random,
                                   static_cast<int>(rest.size()));
    for (int j = 0; j < take; ++j)
      sel.selected.push_back(
          records[static_cast<std::size_t>(rest[static_cast<std::size_t>(j)])]
              .template_id);
    bank.clusters.push_back(std::move(sel));
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Record I/O
// ---------------------------------------------------------------------------

// One candidate crop per line: detection geometry plus its pose keypoints.
struct CandidateRecord {
  DetectionRecord detection;
  PoseRecord pose;
  nlohmann::json raw;  // echoed verbatim into the accepted manifest
};

inline KeypointCategory keypoint_category(const std::string& s) {
  if (s == "head") return KeypointCategory::Head;
  if (s == "hip") return KeypointCategory::Hip;
  if (s == "other") return KeypointCategory::Other;
  fail(ErrorKind::MalformedRecord, "unknown keypoint category: " + s);
}

inline std::vector<CandidateRecord> load_candidates(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), ErrorKind::Io, "cannot open records file " + path);
  std::vector<CandidateRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    CandidateRecord rec;
    try {
      rec.raw = nlohmann::json::parse(line);
      rec.detection.image_id = rec.raw.at("image_id").get<std::string>();
      rec.detection.bbox_width = rec.raw.at("bbox_width").get<double>();
      rec.detection.bbox_height = rec.raw.at("bbox_height").get<double>();
      rec.detection.confidence = rec.raw.at("confidence").get<double>();
      for (const auto& kp : rec.raw.at("keypoints")) {
        Keypoint k;
        k.name = kp.at("name").get<std::string>();
        k.visible = kp.at("visible").get<bool>();
        k.category = keypoint_category(kp.at("category").get<std::string>());
        rec.pose.keypoints.push_back(std::move(k));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::MalformedRecord,
           std::string("bad candidate record: ") + e.what());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<TemplateRecord> load_templates(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), ErrorKind::Io, "cannot open template file " + path);
  std::vector<TemplateRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TemplateRecord rec;
    try {
      const auto j = nlohmann::json::parse(line);
      rec.template_id = j.at("template_id").get<std::string>();
      rec.text = j.at("text").get<std::string>();
      const auto e = j.at("embedding").get<std::vector<double>>();
      rec.embedding = Eigen::Map<const RowVec>(e.data(),
                                               static_cast<Eigen::Index>(e.size()));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::MalformedRecord,
           std::string("bad template record: ") + e.what());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline nlohmann::json bank_to_json(const TemplateBank& bank) {
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& c : bank.clusters)
    clusters.push_back(nlohmann::json{{"cluster", c.cluster},
                                      {"size", c.size},
                                      {"representative", c.representative},
                                      {"selected", c.selected}});
  return nlohmann::json{
      {"k", bank.k}, {"clusters", clusters}, {"warnings", bank.warnings}};
}

}  // namespace gadms
