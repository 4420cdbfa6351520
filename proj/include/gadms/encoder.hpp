#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gadms/nn.hpp"

namespace gadms {

struct SpecialIds {
  int pad = 0, sos = 1, eos = 2, mask = 3;
};

struct EncoderConfig {
  int text_depth = 4;
  int image_depth = 4;
  int width = 64;
  int heads = 4;
  int vocab_size = 512;
  int max_text_len = 32;
  int grid_rows = 8;
  int grid_cols = 4;
  int patch_channels = 3;
  int mlp_ratio = 4;
  SpecialIds special;

  int image_tokens() const { return grid_rows * grid_cols + 1; }

  void validate() const {
    check(text_depth >= 1 && image_depth >= 1, ErrorKind::Config,
          "encoder depth must be >= 1");
    check(width >= 1 && heads >= 1 && width % heads == 0, ErrorKind::Config,
          "width must be a positive multiple of the head count");
    check(max_text_len >= 3, ErrorKind::Config,
          "text length must fit sos + content + eos");
    check(grid_rows >= 1 && grid_cols >= 1 && patch_channels >= 1,
          ErrorKind::Config, "patch grid must be non-empty");
    const std::set<int> ids{special.pad, special.sos, special.eos, special.mask};
    check(ids.size() == 4, ErrorKind::Config, "special token ids must be distinct");
    for (int id : ids)
      check(id >= 0 && id < vocab_size, ErrorKind::Config,
            "special token id outside the vocabulary");
  }
};

// Fixed-capacity token buffer: ids padded to max_text_len, with position 0
// holding sos, the last valid position eos, and pad only after eos.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<char> valid;
  int length = 0;  // count of valid positions, including sos and eos

  static TokenSequence build(const std::vector<int>& content,
                             const EncoderConfig& cfg) {
    const int n = cfg.max_text_len;
    check(static_cast<int>(content.size()) + 2 <= n, ErrorKind::Length,
          "caption longer than the token budget");
    TokenSequence s;
    s.ids.assign(static_cast<std::size_t>(n), cfg.special.pad);
    s.valid.assign(static_cast<std::size_t>(n), 0);
    s.ids[0] = cfg.special.sos;
    for (std::size_t i = 0; i < content.size(); ++i) s.ids[i + 1] = content[i];
    s.ids[content.size() + 1] = cfg.special.eos;
    s.length = static_cast<int>(content.size()) + 2;
    for (int i = 0; i < s.length; ++i) s.valid[static_cast<std::size_t>(i)] = 1;
    return s;
  }

  int eos_pos() const { return length - 1; }

  bool is_protected(int pos) const {
    return pos <= 0 || pos >= eos_pos() || !valid[static_cast<std::size_t>(pos)];
  }

  void validate(const EncoderConfig& cfg) const {
    const std::size_t n = static_cast<std::size_t>(cfg.max_text_len);
    check(ids.size() == n && valid.size() == n, ErrorKind::Length,
          "token buffer does not match the configured length");
    check(length >= 3 && length <= cfg.max_text_len, ErrorKind::Length,
          "valid token count out of range");
    check(ids[0] == cfg.special.sos, ErrorKind::Contract,
          "sequence must start with sos");
    check(ids[static_cast<std::size_t>(length - 1)] == cfg.special.eos,
          ErrorKind::Contract, "last valid position must be eos");
    for (std::size_t i = 0; i < n; ++i) {
      check(ids[i] >= 0 && ids[i] < cfg.vocab_size, ErrorKind::Vocabulary,
            "token id outside the vocabulary");
      const bool v = i < static_cast<std::size_t>(length);
      check(static_cast<bool>(valid[i]) == v, ErrorKind::Contract,
            "validity flags must cover exactly the leading positions");
      if (!v)
        check(ids[i] == cfg.special.pad, ErrorKind::Contract,
              "pad id required after eos");
    }
  }
};

// Per-layer tensors captured during a text forward pass.
struct LayerTrace {
  int layer_index = -1;
  Mat q, k, v;            // N x d projections, heads concatenated
  std::vector<Mat> attn;  // post-softmax map per head, N x N
  RowVec q_eos;
};

struct GradientProbe {
  std::vector<int> layers;
  std::vector<RowVec> g;  // d-vector per probed layer
};

// Injects a fixed offset into the residual stream right after one layer;
// used by the finite-difference checks.
struct ResidualInjection {
  int layer = -1;
  int pos = 0;
  RowVec delta;
};

class TextEncoder {
 public:
  void init(const EncoderConfig& cfg, Rng& rng) {
    cfg_ = cfg;
    const int d = cfg.width;
    token_emb_.resize(cfg.vocab_size, d);
    for (Eigen::Index i = 0; i < token_emb_.size(); ++i)
      token_emb_.data()[i] = 0.02 * rng.gaussian();
    pos_emb_.resize(cfg.max_text_len, d);
    for (Eigen::Index i = 0; i < pos_emb_.size(); ++i)
      pos_emb_.data()[i] = 0.01 * rng.gaussian();
    layers_.resize(static_cast<std::size_t>(cfg.text_depth));
    for (auto& l : layers_) l.init(rng, d, cfg.heads, cfg.mlp_ratio);
    ln_final_.init(d);
    proj_.init(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)), false);
  }

  void reg(ParamRegistry& r, const std::string& prefix) {
    token_emb_id_ = r.add(prefix + ".token_emb", &token_emb_);
    pos_emb_id_ = r.add(prefix + ".pos_emb", &pos_emb_);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].reg(r, prefix + ".layer" + std::to_string(i));
    ln_final_.reg(r, prefix + ".ln_final");
    proj_.reg(r, prefix + ".proj");
  }

  struct Forward {
    std::vector<ag::NodePtr> layer_out;  // residual stream after each layer
    ag::NodePtr hidden;                  // post-final-norm, N x d
    ag::NodePtr eos_embed;               // 1 x d, projected
    std::vector<LayerTrace> traces;
    int eos_pos = -1;
  };

  Forward forward(ag::Tape& t, const TokenSequence& seq, GradStore* gs,
                  bool capture = false,
                  const ResidualInjection* inject = nullptr) const {
    seq.validate(cfg_);
    Forward out;
    out.eos_pos = seq.eos_pos();
    ag::NodePtr x = ag::embedding(t, token_emb_, seq.ids, token_emb_id_, gs);
    x = ag::add_param_rows(t, x, pos_emb_, pos_emb_id_, gs);
    out.layer_out.reserve(layers_.size());
    if (capture) out.traces.resize(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      nn::TransformerLayer::Capture cap;
      x = layers_[l].forward(t, x, seq.valid, gs, capture ? &cap : nullptr);
      if (inject && inject->layer == static_cast<int>(l))
        x = ag::add_row_delta(t, x, inject->pos, inject->delta);
      out.layer_out.push_back(x);
      if (capture) {
        LayerTrace& tr = out.traces[l];
        tr.layer_index = static_cast<int>(l);
        tr.q = std::move(cap.q);
        tr.k = std::move(cap.k);
        tr.v = std::move(cap.v);
        tr.attn = std::move(cap.attn);
        tr.q_eos = tr.q.row(out.eos_pos);
      }
    }
    out.hidden = ln_final_(t, x, gs);
    out.eos_embed = proj_(t, ag::row(t, out.hidden, out.eos_pos), gs);
    return out;
  }

  const EncoderConfig& config() const { return cfg_; }
  int depth() const { return static_cast<int>(layers_.size()); }

 private:
  EncoderConfig cfg_;
  Mat token_emb_, pos_emb_;
  int token_emb_id_ = -1, pos_emb_id_ = -1;
  std::vector<nn::TransformerLayer> layers_;
  nn::Norm ln_final_;
  nn::Dense proj_;
};

class ImageEncoder {
 public:
  void init(const EncoderConfig& cfg, Rng& rng) {
    cfg_ = cfg;
    const int d = cfg.width;
    patch_embed_.init(rng, cfg.patch_channels, d, 0.02);
    cls_.resize(1, d);
    for (Eigen::Index i = 0; i < cls_.size(); ++i)
      cls_.data()[i] = 0.02 * rng.gaussian();
    pos_emb_.resize(cfg.image_tokens(), d);
    for (Eigen::Index i = 0; i < pos_emb_.size(); ++i)
      pos_emb_.data()[i] = 0.01 * rng.gaussian();
    layers_.resize(static_cast<std::size_t>(cfg.image_depth));
    for (auto& l : layers_) l.init(rng, d, cfg.heads, cfg.mlp_ratio);
    ln_final_.init(d);
    proj_.init(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)), false);
  }

  void reg(ParamRegistry& r, const std::string& prefix) {
    patch_embed_.reg(r, prefix + ".patch_embed");
    cls_id_ = r.add(prefix + ".cls", &cls_);
    pos_emb_id_ = r.add(prefix + ".pos_emb", &pos_emb_);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].reg(r, prefix + ".layer" + std::to_string(i));
    ln_final_.reg(r, prefix + ".ln_final");
    proj_.reg(r, prefix + ".proj");
  }

  struct Forward {
    ag::NodePtr tokens;     // (P+1) x d post-final-norm hidden states
    ag::NodePtr cls_embed;  // 1 x d, projected
  };

  // patches: (grid_rows*grid_cols) x patch_channels
  Forward forward(ag::Tape& t, const Mat& patches, GradStore* gs) const {
    check(patches.rows() == cfg_.grid_rows * cfg_.grid_cols &&
              patches.cols() == cfg_.patch_channels,
          ErrorKind::Shape, "patch grid does not match the configured shape");
    ag::NodePtr p = patch_embed_(t, ag::input(t, patches), gs);
    ag::NodePtr x = ag::vstack(t, ag::param_leaf(t, cls_, cls_id_, gs), p);
    x = ag::add_param_rows(t, x, pos_emb_, pos_emb_id_, gs);
    const std::vector<char> valid(static_cast<std::size_t>(x->val.rows()), 1);
    for (const auto& layer : layers_) x = layer.forward(t, x, valid, gs);
    Forward out;
    out.tokens = ln_final_(t, x, gs);
    out.cls_embed = proj_(t, ag::row(t, out.tokens, 0), gs);
    return out;
  }

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  nn::Dense patch_embed_;
  Mat cls_, pos_emb_;
  int cls_id_ = -1, pos_emb_id_ = -1;
  std::vector<nn::TransformerLayer> layers_;
  nn::Norm ln_final_;
  nn::Dense proj_;
};

// Convenience value-level views of one encoded caption / image.
struct TextEncoding {
  Mat tokens;     // N x d
  RowVec eos;     // projected global embedding
  std::vector<LayerTrace> traces;
  int eos_pos = -1;
};

struct ImageEncoding {
  Mat tokens;  // (P+1) x d
  RowVec cls;
};

inline TextEncoding encode_text(const TextEncoder& enc, const TokenSequence& seq,
                                bool capture = false) {
  ag::Tape t;
  auto f = enc.forward(t, seq, nullptr, capture);
  TextEncoding out;
  out.tokens = f.hidden->val;
  out.eos = f.eos_embed->val.row(0);
  out.traces = std::move(f.traces);
  out.eos_pos = f.eos_pos;
  return out;
}

inline ImageEncoding encode_image(const ImageEncoder& enc, const Mat& patches) {
  ag::Tape t;
  auto f = enc.forward(t, patches, nullptr);
  return ImageEncoding{f.tokens->val, f.cls_embed->val.row(0)};
}

inline double global_similarity(const RowVec& t_eos, const RowVec& v_cls) {
  return cosine(t_eos, v_cls);
}

// d SIM / d (residual stream at the eos position) for each requested layer,
// with the image-side global embedding held fixed. Scores derived from these
// gradients are constants downstream: no parameter gradient is accumulated.
inline GradientProbe probe_text_gradients(const TextEncoder& enc,
                                          const TokenSequence& seq,
                                          const RowVec& v_cls,
                                          const std::vector<int>& layers,
                                          std::vector<LayerTrace>* traces_out = nullptr,
                                          double* sim_out = nullptr) {
  for (int l : layers)
    check(l >= 0 && l < enc.depth(), ErrorKind::Contract,
          "probed layer index outside [0, depth)");
  ag::Tape t;
  auto f = enc.forward(t, seq, nullptr, traces_out != nullptr);
  ag::NodePtr v = ag::input(t, v_cls);
  ag::NodePtr sim = ag::cosine_sim(t, f.eos_embed, v);
  ag::seed_scalar(sim);
  t.backward();
  GradientProbe probe;
  probe.layers = layers;
  probe.g.reserve(layers.size());
  for (int l : layers) {
    const ag::Node& n = *f.layer_out[static_cast<std::size_t>(l)];
    check(n.has_grad, ErrorKind::Contract, "probe backward did not reach layer");
    probe.g.push_back(n.grad.row(f.eos_pos));
  }
  if (traces_out) *traces_out = std::move(f.traces);
  if (sim_out) *sim_out = sim->val(0, 0);
  return probe;
}

// Batch wrapper over matched pairs. Differentiating the sum of matched-pair
// similarities gives each sample its own gradients because cross-sample
// terms vanish.
inline std::vector<GradientProbe> probe_intermediate_gradients(
    const TextEncoder& text, const ImageEncoder& image,
    const std::vector<TokenSequence>& seqs, const std::vector<Mat>& patches,
    const std::vector<int>& layers) {
  check(seqs.size() == patches.size(), ErrorKind::Alignment,
        "text/image batch size mismatch");
  std::vector<GradientProbe> out;
  out.reserve(seqs.size());
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const ImageEncoding img = encode_image(image, patches[b]);
    out.push_back(probe_text_gradients(text, seqs[b], img.cls, layers));
  }
  return out;
}

}  // namespace gadms
