// Reconstruction head: shapes, determinism, order-independence of the image
// conditioning, and the position-indexed vocabulary logits.

#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "gadms/decoder.hpp"
#include "gadms/encoder.hpp"
#include "helpers.hpp"

using namespace gadms;
using testutil::random_mat;
using testutil::rel_err;
using testutil::tiny_encoder;

namespace {

struct Rig {
  EncoderConfig ec;
  CrossModalDecoder dec;
  Mat text_hidden;
  Mat image_tokens;
  std::vector<char> text_valid;

  explicit Rig(std::uint64_t seed) {
    ec = tiny_encoder();
    DecoderConfig dc;
    dc.depth = 2;
    Rng rng = derive_stream(seed, Stream::Init);
    dec.init(ec, dc, rng);
    const int n = ec.max_text_len;
    text_hidden = random_mat(rng, n, ec.width, 0.5);
    image_tokens = random_mat(rng, ec.image_tokens(), ec.width, 0.5);
    text_valid.assign(static_cast<std::size_t>(n), 1);
    text_valid.back() = 0;  // one padding slot to exercise the mask path
  }

  Mat fuse(const Mat& img) const {
    ag::Tape t;
    ag::NodePtr h = ag::input(t, text_hidden);
    ag::NodePtr v = ag::input(t, img);
    return dec.decode(t, h, v, text_valid, nullptr)->val;
  }
};

}  // namespace

TEST_CASE("decoding preserves the text sequence shape") {
  Rig rig(101);
  const Mat fused = rig.fuse(rig.image_tokens);
  REQUIRE(fused.rows() == rig.ec.max_text_len);
  REQUIRE(fused.cols() == rig.ec.width);
  REQUIRE(fused.allFinite());
}

TEST_CASE("decoding is deterministic") {
  Rig rig(102);
  const Mat a = rig.fuse(rig.image_tokens);
  const Mat b = rig.fuse(rig.image_tokens);
  REQUIRE((a - b).norm() == 0.0);
}

TEST_CASE("image conditioning is order independent") {
  // The cross-attention adds no positional information on the image side, so
  // permuting image tokens must leave the fused text sequence unchanged.
  Rig rig(103);
  const Mat base = rig.fuse(rig.image_tokens);

  Rng rng = derive_stream(104, Stream::Init);
  std::vector<int> perm(static_cast<std::size_t>(rig.image_tokens.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Mat shuffled(rig.image_tokens.rows(), rig.image_tokens.cols());
  for (Eigen::Index i = 0; i < shuffled.rows(); ++i)
    shuffled.row(i) = rig.image_tokens.row(perm[static_cast<std::size_t>(i)]);

  const Mat permuted = rig.fuse(shuffled);
  REQUIRE(rel_err(permuted, base) < 1e-12);
}

TEST_CASE("fused states change when the image content changes") {
  Rig rig(105);
  const Mat base = rig.fuse(rig.image_tokens);
  Mat other = rig.image_tokens;
  other.array() += 0.25;
  REQUIRE(rel_err(rig.fuse(other), base) > 1e-6);
}

TEST_CASE("decoder rejects width mismatches") {
  Rig rig(106);
  Rng rng = derive_stream(107, Stream::Init);
  ag::Tape t;
  ag::NodePtr h = ag::input(t, rig.text_hidden);
  ag::NodePtr bad = ag::input(
      t, random_mat(rng, static_cast<int>(rig.image_tokens.rows()),
                    rig.ec.width + 1, 0.5));
  REQUIRE_THROWS_AS(rig.dec.decode(t, h, bad, rig.text_valid, nullptr), Error);
}

TEST_CASE("vocabulary logits are scored at the selected positions") {
  Rig rig(108);
  ag::Tape t;
  ag::NodePtr h = ag::input(t, rig.text_hidden);
  ag::NodePtr v = ag::input(t, rig.image_tokens);
  ag::NodePtr fused = rig.dec.decode(t, h, v, rig.text_valid, nullptr);

  const std::vector<int> positions = {1, 4, 2};
  ag::NodePtr logits = rig.dec.logits_at(t, fused, positions, nullptr);
  REQUIRE(logits->val.rows() == 3);
  REQUIRE(logits->val.cols() == rig.ec.vocab_size);

  // row order follows the request order, and each row depends only on its
  // own fused position
  ag::NodePtr single = rig.dec.logits_at(t, fused, {4}, nullptr);
  REQUIRE((logits->val.row(1) - single->val.row(0)).norm() == 0.0);

  REQUIRE_THROWS_AS(rig.dec.logits_at(t, fused, {-1}, nullptr), Error);
  REQUIRE_THROWS_AS(
      rig.dec.logits_at(t, fused, {rig.ec.max_text_len}, nullptr), Error);
}

TEST_CASE("decoder parameters flow gradients") {
  Rig rig(109);
  ParamRegistry reg;
  rig.dec.reg(reg, "dec");
  REQUIRE(reg.size() > 0);

  GradStore gs(reg);
  ag::Tape t;
  ag::NodePtr h = ag::input(t, rig.text_hidden);
  ag::NodePtr v = ag::input(t, rig.image_tokens);
  ag::NodePtr fused = rig.dec.decode(t, h, v, rig.text_valid, &gs);
  ag::NodePtr logits = rig.dec.logits_at(t, fused, {1, 2}, &gs);
  ag::seed(logits, Mat::Ones(logits->val.rows(), logits->val.cols()));
  t.backward();

  int touched = 0;
  for (std::size_t i = 0; i < reg.size(); ++i)
    if (gs.touched(static_cast<int>(i))) ++touched;
  REQUIRE(touched > 0);
  REQUIRE(h->has_grad);
  REQUIRE(v->has_grad);
  REQUIRE(h->grad.allFinite());
  REQUIRE(v->grad.allFinite());
}
