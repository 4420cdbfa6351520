#pragma once

#include <vector>

#include "gadms/encoder.hpp"

namespace gadms {

struct MaskConfig {
  double alpha_noise = 0.2;        // cap on the noise-mask probability
  double alpha_informative = 0.3;  // cap on the informative-mask probability
  double lambda = 10.0;            // sigmoid sharpness
  double gamma = 0.5;              // sigmoid midpoint on the score axis

  void validate() const {
    check(alpha_noise >= 0.0 && alpha_noise <= 1.0 && alpha_informative >= 0.0 &&
              alpha_informative <= 1.0,
          ErrorKind::Config, "mask probability caps must lie in [0, 1]");
    check(lambda > 0.0, ErrorKind::Config, "sigmoid sharpness must be positive");
  }
};

// Low scores mark suspected noise: p = alpha_n * sigma(lambda * ((1-s) - gamma)).
inline double noise_mask_prob(double s, const MaskConfig& c) {
  return c.alpha_noise * sigmoid(c.lambda * ((1.0 - s) - c.gamma));
}

// High scores mark informative content: p = alpha_i * sigma(lambda * (s - gamma)).
inline double informative_mask_prob(double s, const MaskConfig& c) {
  return c.alpha_informative * sigmoid(c.lambda * (s - c.gamma));
}

struct MaskPlan {
  std::vector<int> noise_positions;
  std::vector<int> informative_positions;
  // Per-position audit trail, zero at protected positions.
  std::vector<double> p_noise;
  std::vector<double> p_informative;

  bool empty() const {
    return noise_positions.empty() && informative_positions.empty();
  }
};

// Draws both masks in one pass over the caption. Every unprotected position
// consumes exactly two draws (noise first, then informative) regardless of
// outcome, so the stream stays aligned across configurations. A position
// selected by both masks is treated as informative.
inline MaskPlan sample_mask(const TokenSequence& seq, const RowVec& scores,
                            const MaskConfig& cfg, Rng& rng) {
  cfg.validate();
  check(static_cast<int>(scores.size()) == static_cast<int>(seq.ids.size()),
        ErrorKind::Alignment, "score vector does not match the token buffer");
  MaskPlan plan;
  plan.p_noise.assign(seq.ids.size(), 0.0);
  plan.p_informative.assign(seq.ids.size(), 0.0);
  for (int i = 0; i < static_cast<int>(seq.ids.size()); ++i) {
    if (seq.is_protected(i)) {
      rng.uniform();
      rng.uniform();
      continue;
    }
    const double s = scores(i);
    const double pn = noise_mask_prob(s, cfg);
    const double pi = informative_mask_prob(s, cfg);
    plan.p_noise[static_cast<std::size_t>(i)] = pn;
    plan.p_informative[static_cast<std::size_t>(i)] = pi;
    const bool hit_noise = rng.uniform() < pn;
    const bool hit_informative = rng.uniform() < pi;
    if (hit_informative)
      plan.informative_positions.push_back(i);
    else if (hit_noise)
      plan.noise_positions.push_back(i);
  }
  return plan;
}

// Replaces the selected positions with the mask token.
inline TokenSequence apply_mask(const TokenSequence& seq, const MaskPlan& plan,
                                const EncoderConfig& cfg) {
  TokenSequence out = seq;
  auto blank = [&](const std::vector<int>& positions) {
    for (int p : positions) {
      check(!seq.is_protected(p), ErrorKind::Contract,
            "mask plan touches a protected position");
      out.ids[static_cast<std::size_t>(p)] = cfg.special.mask;
    }
  };
  blank(plan.noise_positions);
  blank(plan.informative_positions);
  return out;
}

}  // namespace gadms
