#pragma once

#include <string>
#include <vector>

#include "gadms/encoder.hpp"
#include "gadms/nn.hpp"

namespace gadms {

struct DecoderConfig {
  int depth = 4;  // self-attention layers after the cross-attention block

  void validate() const {
    check(depth >= 1, ErrorKind::Config, "decoder depth must be >= 1");
  }
};

// Reconstruction head: text hidden states attend once into the image tokens,
// a self-attention stack refines the fused sequence, and a small projection
// scores the vocabulary at selected positions. No positional information is
// added to the image side, so the fusion cannot depend on image token order.
class CrossModalDecoder {
 public:
  void init(const EncoderConfig& enc, const DecoderConfig& cfg, Rng& rng) {
    cfg.validate();
    enc_ = enc;
    cfg_ = cfg;
    const int d = enc.width;
    const double w0 = 0.02;
    ln_cross_.init(d);
    wq_.init(rng, d, d, w0);
    wk_.init(rng, d, d, w0);
    wv_.init(rng, d, d, w0);
    wo_.init(rng, d, d, w0);
    layers_.resize(static_cast<std::size_t>(cfg.depth));
    for (auto& l : layers_) l.init(rng, d, enc.heads, enc.mlp_ratio);
    ln_out_.init(d);
    head_hidden_.init(rng, d, d, w0);
    head_vocab_.init(rng, d, enc.vocab_size, w0);
  }

  void reg(ParamRegistry& r, const std::string& prefix) {
    ln_cross_.reg(r, prefix + ".ln_cross");
    wq_.reg(r, prefix + ".wq");
    wk_.reg(r, prefix + ".wk");
    wv_.reg(r, prefix + ".wv");
    wo_.reg(r, prefix + ".wo");
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].reg(r, prefix + ".layer" + std::to_string(i));
    ln_out_.reg(r, prefix + ".ln_out");
    head_hidden_.reg(r, prefix + ".head_hidden");
    head_vocab_.reg(r, prefix + ".head_vocab");
  }

  // text_hidden: N x d node; image_tokens: (P+1) x d node. Returns the fused
  // N x d sequence.
  ag::NodePtr decode(ag::Tape& t, ag::NodePtr text_hidden,
                     ag::NodePtr image_tokens,
                     const std::vector<char>& text_valid, GradStore* gs) const {
    check(text_hidden->val.cols() == enc_.width &&
              image_tokens->val.cols() == enc_.width,
          ErrorKind::Shape, "decoder width mismatch");
    ag::NodePtr h = ln_cross_(t, text_hidden, gs);
    ag::NodePtr q = wq_(t, h, gs);
    ag::NodePtr k = wk_(t, image_tokens, gs);
    ag::NodePtr v = wv_(t, image_tokens, gs);
    const std::vector<char> image_valid(
        static_cast<std::size_t>(image_tokens->val.rows()), 1);
    ag::NodePtr ctx =
        ag::multi_head_attention(t, q, k, v, enc_.heads, image_valid);
    ag::NodePtr x = ag::add(t, text_hidden, wo_(t, ctx, gs));
    for (const auto& layer : layers_) x = layer.forward(t, x, text_valid, gs);
    return ln_out_(t, x, gs);
  }

  // Vocabulary logits at the given positions of a fused sequence.
  ag::NodePtr logits_at(ag::Tape& t, ag::NodePtr fused,
                        const std::vector<int>& positions, GradStore* gs) const {
    for (int p : positions)
      check(p >= 0 && p < fused->val.rows(), ErrorKind::Shape,
            "logit position outside the sequence");
    ag::NodePtr h = ag::rows(t, fused, positions);
    return head_vocab_(t, ag::quick_gelu(t, head_hidden_(t, h, gs)), gs);
  }

  const DecoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig enc_;
  DecoderConfig cfg_;
  nn::Norm ln_cross_;
  nn::Dense wq_, wk_, wv_, wo_;
  std::vector<nn::TransformerLayer> layers_;
  nn::Norm ln_out_;
  nn::Dense head_hidden_, head_vocab_;
};

}  // namespace gadms
