// Token-scoring pipeline: multi-scale pooling against hand-computed values,
// the importance/attention/gradient score laws, fusion, normalization, and
// the distribution invariants over randomized traces.

#include <catch2/catch_amalgamated.hpp>

#include "gadms/gass.hpp"
#include "helpers.hpp"

using namespace gadms;
using testutil::all_valid;
using testutil::random_mat;
using testutil::rel_err;

namespace {

// One synthetic layer trace: random projections plus attention maps built as
// genuine row distributions over the valid positions.
LayerTrace random_trace(Rng& rng, int n, int d, int heads,
                        const std::vector<char>& valid, int layer_index,
                        int eos_pos) {
  LayerTrace tr;
  tr.layer_index = layer_index;
  tr.q = random_mat(rng, n, d);
  tr.k = random_mat(rng, n, d);
  tr.v = random_mat(rng, n, d);
  tr.q_eos = tr.q.row(eos_pos);
  for (int h = 0; h < heads; ++h) {
    Mat a = Mat::Zero(n, n);
    for (int r = 0; r < n; ++r) {
      double sum = 0.0;
      for (int c = 0; c < n; ++c) {
        if (!valid[static_cast<std::size_t>(c)]) continue;
        a(r, c) = std::exp(rng.gaussian());
        sum += a(r, c);
      }
      for (int c = 0; c < n; ++c) a(r, c) /= sum;
    }
    tr.attn.push_back(std::move(a));
  }
  return tr;
}

}  // namespace

TEST_CASE("pooling at scale one is the identity") {
  Rng rng = derive_stream(50, Stream::Init);
  const Mat x = random_mat(rng, 7, 3);
  REQUIRE(rel_err(msp(x, {1}), x) == 0.0);
}

TEST_CASE("pooling matches the hand-worked window means") {
  // Single column [1,3,5,7] at scale 2: windows (1,3) and (5,7) give means
  // [2,6]; interpolating two rows back to four gives [2, 10/3, 14/3, 6].
  Mat x(4, 1);
  x << 1, 3, 5, 7;
  const Mat got = msp(x, {2});
  REQUIRE(got(0, 0) == Catch::Approx(2.0).margin(1e-12));
  REQUIRE(got(1, 0) == Catch::Approx(10.0 / 3.0).margin(1e-12));
  REQUIRE(got(2, 0) == Catch::Approx(14.0 / 3.0).margin(1e-12));
  REQUIRE(got(3, 0) == Catch::Approx(6.0).margin(1e-12));

  SECTION("a constant input is unchanged at any scale") {
    Mat c = Mat::Constant(5, 2, 3.25);
    for (int scale : {1, 2, 3, 5, 7})
      REQUIRE(rel_err(msp(c, {scale}), c) < 1e-15);
  }
  SECTION("the tail window repeats the final row") {
    Mat odd(3, 1);
    odd << 2, 4, 9;
    // scale 2: windows (2,4) and (9,9) -> [3,9] -> interpolated [3,6,9]
    const Mat got2 = msp(odd, {2});
    REQUIRE(got2(0, 0) == Catch::Approx(3.0).margin(1e-12));
    REQUIRE(got2(1, 0) == Catch::Approx(6.0).margin(1e-12));
    REQUIRE(got2(2, 0) == Catch::Approx(9.0).margin(1e-12));
  }
  SECTION("multiple scales average") {
    const Mat got12 = msp(x, {1, 2});
    const Mat want = 0.5 * (x + msp(x, {2}));
    REQUIRE(rel_err(got12, want) < 1e-15);
  }
  SECTION("length is preserved for every input length and scale") {
    Rng rng = derive_stream(51, Stream::Init);
    for (int n : {1, 2, 3, 5, 8, 13})
      for (int scale : {1, 2, 3, 4})
        REQUIRE(msp(random_mat(rng, n, 2), {scale}).rows() == n);
  }
  SECTION("degenerate inputs are rejected") {
    REQUIRE_THROWS_AS(msp(Mat(0, 3), {1}), Error);
    REQUIRE_THROWS_AS(msp(Mat::Ones(2, 2), {}), Error);
    REQUIRE_THROWS_AS(msp(Mat::Ones(2, 2), {0}), Error);
  }
}

TEST_CASE("importance weights form a softmax over valid positions") {
  SECTION("known logits") {
    // d=1, scale 1: q=[1], keys [ln 3, 0] give logits [ln 3, 0] and the
    // softmax [0.75, 0.25].
    RowVec q(1);
    q << 1.0;
    Mat k(2, 1);
    k << std::log(3.0), 0.0;
    const RowVec w = spatial_importance(q, k, all_valid(2), {1});
    REQUIRE(w(0) == Catch::Approx(0.75).margin(1e-12));
    REQUIRE(w(1) == Catch::Approx(0.25).margin(1e-12));
  }
  SECTION("orthogonal keys weigh uniformly") {
    RowVec q(2);
    q << 1.0, 0.0;
    Mat k = Mat::Zero(3, 2);
    k.col(1).setOnes();  // every key orthogonal to q: logits all zero
    const RowVec w = spatial_importance(q, k, all_valid(3), {1});
    for (int i = 0; i < 3; ++i)
      REQUIRE(w(i) == Catch::Approx(1.0 / 3.0).margin(1e-12));
  }
  SECTION("weights sum to one and vanish off the valid set") {
    Rng rng = derive_stream(52, Stream::Init);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 2 + static_cast<int>(rng.below(8));
      std::vector<char> valid = all_valid(n);
      valid[static_cast<std::size_t>(rng.below(
          static_cast<std::uint64_t>(n)))] = 0;
      bool any = false;
      for (char c : valid) any = any || c;
      if (!any) valid[0] = 1;
      const RowVec q = random_mat(rng, 1, 4).row(0);
      const Mat k = random_mat(rng, n, 4);
      const RowVec w = spatial_importance(q, k, valid, {1, 2});
      REQUIRE(std::abs(w.sum() - 1.0) < 1e-5);
      for (int i = 0; i < n; ++i) {
        if (valid[static_cast<std::size_t>(i)])
          REQUIRE(w(i) > 0.0);
        else
          REQUIRE(w(i) == 0.0);
      }
    }
  }
  SECTION("an all-invalid caption is degenerate") {
    RowVec q = RowVec::Ones(2);
    Mat k = Mat::Ones(2, 2);
    REQUIRE_THROWS_AS(spatial_importance(q, k, {0, 0}, {1}), Error);
  }
}

TEST_CASE("gradient scores weight the value alignment") {
  SECTION("hand-worked case") {
    RowVec g(2);
    g << 1.0, 0.0;
    RowVec w(2);
    w << 0.5, 0.5;
    Mat v(2, 2);
    v << 2, 0, 0, 2;  // <g, v_0> = 2, <g, v_1> = 0
    const RowVec s = gradient_score(g, w, v);
    REQUIRE(s(0) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(s(1) == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("a zero gradient kills every score") {
    Rng rng = derive_stream(53, Stream::Init);
    const Mat v = random_mat(rng, 4, 3);
    RowVec w = RowVec::Constant(4, 0.25);
    const RowVec s = gradient_score(RowVec::Zero(3), w, v);
    REQUIRE(s.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("zero weight silences a position") {
    RowVec g = RowVec::Ones(3);
    RowVec w(2);
    w << 1.0, 0.0;
    Rng rng = derive_stream(54, Stream::Init);
    const Mat v = random_mat(rng, 2, 3);
    REQUIRE(gradient_score(g, w, v)(1) == 0.0);
  }
  SECTION("linear in the gradient") {
    Rng rng = derive_stream(55, Stream::Init);
    const RowVec g = random_mat(rng, 1, 3).row(0);
    const RowVec w = random_mat(rng, 1, 4).row(0);
    const Mat v = random_mat(rng, 4, 3);
    const RowVec s1 = gradient_score(g, w, v);
    RowVec g2 = 2.5 * g;
    const RowVec s2 = gradient_score(g2, w, v);
    REQUIRE(rel_err(s2, 2.5 * s1) < 1e-12);
  }
  SECTION("shape contracts") {
    REQUIRE_THROWS_AS(
        gradient_score(RowVec::Ones(3), RowVec::Ones(2), Mat::Ones(3, 3)),
        Error);
    REQUIRE_THROWS_AS(
        gradient_score(RowVec::Ones(4), RowVec::Ones(3), Mat::Ones(3, 3)),
        Error);
  }
}

TEST_CASE("attention scores renormalize the eos row over valid positions") {
  SECTION("single head passes through when already normalized") {
    Mat a(2, 2);
    a << 0.2, 0.8, 0.5, 0.5;
    const RowVec s = attention_score({a}, 0, all_valid(2));
    REQUIRE(s(0) == Catch::Approx(0.2).margin(1e-12));
    REQUIRE(s(1) == Catch::Approx(0.8).margin(1e-12));
  }
  SECTION("heads average before normalizing") {
    Mat a = Mat::Zero(2, 2), b = Mat::Zero(2, 2);
    a.row(1) << 1.0, 0.0;
    b.row(1) << 0.0, 1.0;
    const RowVec s = attention_score({a, b}, 1, all_valid(2));
    REQUIRE(s(0) == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(s(1) == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("invalid positions are dropped and the rest rescaled") {
    Mat a(3, 3);
    a.setZero();
    a.row(2) << 0.25, 0.25, 0.5;
    const RowVec s = attention_score({a}, 2, {1, 0, 1});
    REQUIRE(s(0) == Catch::Approx(1.0 / 3.0).margin(1e-12));
    REQUIRE(s(1) == 0.0);
    REQUIRE(s(2) == Catch::Approx(2.0 / 3.0).margin(1e-12));
  }
  SECTION("zero valid mass is degenerate") {
    Mat a = Mat::Zero(2, 2);
    a.row(0) << 0.0, 1.0;
    REQUIRE_THROWS_AS(attention_score({a}, 0, {1, 0}), Error);
  }
}

TEST_CASE("fusion is the rectified layer mean of score products") {
  SECTION("hand-worked single layer") {
    RowVec sg(2), sa(2);
    sg << 2.0, -1.0;
    sa << 0.5, 0.5;
    const RowVec f = fuse_scores({sg}, {sa});
    REQUIRE(f(0) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(f(1) == 0.0);  // negative product clipped
  }
  SECTION("duplicated layers agree with a single layer") {
    Rng rng = derive_stream(56, Stream::Init);
    const RowVec sg = random_mat(rng, 1, 5).row(0);
    const RowVec sa = random_mat(rng, 1, 5).row(0).cwiseAbs();
    REQUIRE(rel_err(fuse_scores({sg, sg}, {sa, sa}), fuse_scores({sg}, {sa})) <
            1e-15);
  }
  SECTION("fusion commutes with position permutations") {
    Rng rng = derive_stream(57, Stream::Init);
    const int n = 6;
    RowVec sg = random_mat(rng, 1, n).row(0);
    RowVec sa = random_mat(rng, 1, n).row(0);
    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    RowVec sg_p(n), sa_p(n);
    for (int i = 0; i < n; ++i) {
      sg_p(i) = sg(perm[static_cast<std::size_t>(i)]);
      sa_p(i) = sa(perm[static_cast<std::size_t>(i)]);
    }
    const RowVec f = fuse_scores({sg}, {sa});
    const RowVec f_p = fuse_scores({sg_p}, {sa_p});
    for (int i = 0; i < n; ++i)
      REQUIRE(f_p(i) == Catch::Approx(f(perm[static_cast<std::size_t>(i)]))
                            .margin(1e-15));
  }
  SECTION("layer count mismatch is a configuration error") {
    REQUIRE_THROWS_AS(fuse_scores({RowVec::Ones(2)}, {}), Error);
    REQUIRE_THROWS_AS(
        fuse_scores({RowVec::Ones(2), RowVec::Ones(2)}, {RowVec::Ones(2)}),
        Error);
  }
}

TEST_CASE("normalization maps valid scores onto the unit interval") {
  RowVec s(3);
  s << 0.0, 5.0, 10.0;
  const RowVec n = normalize_scores(s, all_valid(3));
  REQUIRE(n(0) == 0.0);
  REQUIRE(n(1) == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(n(2) == 1.0);

  SECTION("constant scores collapse to one half") {
    RowVec c = RowVec::Constant(4, 2.0);
    const RowVec nc = normalize_scores(c, all_valid(4));
    for (int i = 0; i < 4; ++i) REQUIRE(nc(i) == 0.5);
  }
  SECTION("invalid positions stay zero and are ignored for the range") {
    RowVec v(4);
    v << 100.0, 1.0, 3.0, -50.0;
    const RowVec nv = normalize_scores(v, {0, 1, 1, 0});
    REQUIRE(nv(0) == 0.0);
    REQUIRE(nv(3) == 0.0);
    REQUIRE(nv(1) == 0.0);
    REQUIRE(nv(2) == 1.0);
  }
  SECTION("a single valid position maps to one half") {
    RowVec v(2);
    v << 7.0, 9.0;
    const RowVec nv = normalize_scores(v, {0, 1});
    REQUIRE(nv(1) == 0.5);
  }
  SECTION("no valid positions is degenerate") {
    REQUIRE_THROWS_AS(normalize_scores(RowVec::Ones(2), {0, 0}), Error);
  }
}

TEST_CASE("layer selection defaults to the trailing two thirds") {
  GassConfig cfg;
  REQUIRE(GassConfig::default_layer_count(4) == 3);   // ceil(8/3)
  REQUIRE(GassConfig::default_layer_count(12) == 8);  // paper-scale depth
  REQUIRE(cfg.layer_indices(4) == std::vector<int>{1, 2, 3});
  cfg.layers = 1;
  REQUIRE(cfg.layer_indices(4) == std::vector<int>{3});
  cfg.layers = 5;
  REQUIRE_THROWS_AS(cfg.layer_indices(4), Error);
}

TEST_CASE("score pipeline invariants hold over random traces") {
  Rng rng = derive_stream(58, Stream::Init);
  GassConfig cfg;
  const int depth = 3, heads = 2, d = 8;
  cfg.layers = 2;

  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + static_cast<int>(rng.below(5));
    const int content = n - 2 - static_cast<int>(rng.below(
                                    static_cast<std::uint64_t>(n - 3)));
    std::vector<char> valid(static_cast<std::size_t>(n), 0);
    const int len = content + 2;
    for (int i = 0; i < len; ++i) valid[static_cast<std::size_t>(i)] = 1;
    const int eos_pos = len - 1;

    std::vector<LayerTrace> traces;
    GradientProbe probe;
    probe.layers = cfg.layer_indices(depth);
    for (int l = 0; l < depth; ++l)
      traces.push_back(random_trace(rng, n, d, heads, valid, l, eos_pos));
    for (std::size_t j = 0; j < probe.layers.size(); ++j)
      probe.g.push_back(random_mat(rng, 1, d).row(0));

    const GassScores scores =
        compute_gass(traces, probe, valid, eos_pos, cfg, depth);

    // importance and attention each behave like distributions per layer
    for (int l : probe.layers) {
      const auto& tr = traces[static_cast<std::size_t>(l)];
      const RowVec w = spatial_importance(tr.q_eos, tr.k, valid, cfg.scales);
      REQUIRE(std::abs(w.sum() - 1.0) < 1e-5);
      const RowVec sa = attention_score(tr.attn, eos_pos, valid);
      REQUIRE(std::abs(sa.sum() - 1.0) < 1e-5);
    }
    REQUIRE(scores.fused.minCoeff() >= 0.0);
    REQUIRE(scores.normalized.minCoeff() >= 0.0);
    REQUIRE(scores.normalized.maxCoeff() <= 1.0);
    for (int i = 0; i < n; ++i)
      if (!valid[static_cast<std::size_t>(i)])
        REQUIRE(scores.normalized(i) == 0.0);
  }
}

TEST_CASE("a single pooled row passes through at any scale") {
  Rng rng = derive_stream(60, Stream::Init);
  const Mat q = random_mat(rng, 1, 6);
  for (int scale : {1, 2, 3})
    REQUIRE(rel_err(msp(q, {scale}), q) < 1e-15);
}

TEST_CASE("score pipeline runs on genuine encoder traces") {
  Rng rng = derive_stream(61, Stream::Init);
  EncoderConfig ec = testutil::tiny_encoder();
  TextEncoder text;
  text.init(ec, rng);
  ImageEncoder image;
  image.init(ec, rng);

  TokenSequence seq = TokenSequence::build(
      testutil::content_tokens(rng, 4, ec.vocab_size), ec);
  Mat patches =
      random_mat(rng, ec.grid_rows * ec.grid_cols, ec.patch_channels, 0.5);
  const RowVec v_cls = encode_image(image, patches).cls;

  GassConfig cfg;  // default trailing layers for this depth
  const std::vector<int> idx = cfg.layer_indices(text.depth());
  std::vector<LayerTrace> traces;
  GradientProbe probe = probe_text_gradients(text, seq, v_cls, idx, &traces);

  const GassScores scores = compute_gass(traces, probe, seq.valid,
                                          seq.eos_pos(), cfg, text.depth());
  REQUIRE(scores.fused.size() == static_cast<Eigen::Index>(seq.valid.size()));
  REQUIRE(scores.fused.minCoeff() >= 0.0);
  REQUIRE(scores.normalized.minCoeff() >= 0.0);
  REQUIRE(scores.normalized.maxCoeff() <= 1.0 + 1e-12);
  for (std::size_t i = 0; i < seq.valid.size(); ++i)
    if (!seq.valid[i])
      REQUIRE(scores.normalized(static_cast<Eigen::Index>(i)) == 0.0);

  // deterministic end to end
  std::vector<LayerTrace> traces2;
  GradientProbe probe2 = probe_text_gradients(text, seq, v_cls, idx, &traces2);
  const GassScores again = compute_gass(traces2, probe2, seq.valid,
                                        seq.eos_pos(), cfg, text.depth());
  REQUIRE(rel_err(again.normalized, scores.normalized) == 0.0);
}

TEST_CASE("score pipeline enforces probe and trace agreement") {
  Rng rng = derive_stream(59, Stream::Init);
  GassConfig cfg;
  cfg.layers = 1;
  std::vector<char> valid = all_valid(4);
  std::vector<LayerTrace> traces;
  for (int l = 0; l < 2; ++l)
    traces.push_back(random_trace(rng, 4, 4, 1, valid, l, 3));

  GradientProbe wrong;
  wrong.layers = {0};  // pipeline expects the trailing layer {1}
  wrong.g.push_back(RowVec::Ones(4));
  REQUIRE_THROWS_AS(compute_gass(traces, wrong, valid, 3, cfg, 2), Error);

  GradientProbe right;
  right.layers = {1};
  right.g.push_back(RowVec::Ones(4));
  compute_gass(traces, right, valid, 3, cfg, 2);  // must not throw

  std::swap(traces[0].layer_index, traces[1].layer_index);
  REQUIRE_THROWS_AS(compute_gass(traces, right, valid, 3, cfg, 2), Error);
}
