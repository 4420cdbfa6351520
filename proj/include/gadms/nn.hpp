#pragma once

#include <string>
#include <vector>

#include "gadms/autograd.hpp"
#include "gadms/rng.hpp"

namespace gadms::nn {

struct Dense {
  Mat w, b;
  int wid = -1, bid = -1;
  bool use_bias = true;

  void init(Rng& rng, int in, int out, double stddev, bool bias = true) {
    use_bias = bias;
    w.resize(in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = stddev * rng.gaussian();
    b = Mat::Zero(1, out);
  }

  void reg(ParamRegistry& r, const std::string& name) {
    wid = r.add(name + ".w", &w);
    if (use_bias) bid = r.add(name + ".b", &b);
  }

  ag::NodePtr operator()(ag::Tape& t, ag::NodePtr x, GradStore* gs) const {
    return ag::linear(t, x, w, b, wid, bid, gs, use_bias);
  }
};

struct Norm {
  Mat gamma, beta;
  int gid = -1, bid = -1;

  void init(int d) {
    gamma = Mat::Ones(1, d);
    beta = Mat::Zero(1, d);
  }

  void reg(ParamRegistry& r, const std::string& name) {
    gid = r.add(name + ".gamma", &gamma);
    bid = r.add(name + ".beta", &beta);
  }

  ag::NodePtr operator()(ag::Tape& t, ag::NodePtr x, GradStore* gs) const {
    return ag::layer_norm(t, x, gamma, beta, gid, bid, gs);
  }
};

// Pre-norm residual block: attention then a gated MLP.
struct TransformerLayer {
  Norm ln1, ln2;
  Dense wq, wk, wv, wo, fc1, fc2;
  int heads = 1;

  struct Capture {
    Mat q, k, v;            // full-width projections, heads concatenated
    std::vector<Mat> attn;  // post-softmax map per head
  };

  void init(Rng& rng, int d, int n_heads, int mlp_ratio) {
    heads = n_heads;
    ln1.init(d);
    ln2.init(d);
    const double s = 0.02;
    wq.init(rng, d, d, s);
    wk.init(rng, d, d, s);
    wv.init(rng, d, d, s);
    wo.init(rng, d, d, s);
    fc1.init(rng, d, d * mlp_ratio, s);
    fc2.init(rng, d * mlp_ratio, d, s);
  }

  void reg(ParamRegistry& r, const std::string& prefix) {
    ln1.reg(r, prefix + ".ln1");
    ln2.reg(r, prefix + ".ln2");
    wq.reg(r, prefix + ".wq");
    wk.reg(r, prefix + ".wk");
    wv.reg(r, prefix + ".wv");
    wo.reg(r, prefix + ".wo");
    fc1.reg(r, prefix + ".fc1");
    fc2.reg(r, prefix + ".fc2");
  }

  ag::NodePtr forward(ag::Tape& t, ag::NodePtr x,
                      const std::vector<char>& valid, GradStore* gs,
                      Capture* cap = nullptr) const {
    ag::NodePtr h = ln1(t, x, gs);
    ag::NodePtr q = wq(t, h, gs);
    ag::NodePtr k = wk(t, h, gs);
    ag::NodePtr v = wv(t, h, gs);
    std::vector<Mat>* attn_sink = nullptr;
    if (cap) {
      cap->q = q->val;
      cap->k = k->val;
      cap->v = v->val;
      attn_sink = &cap->attn;
    }
    ag::NodePtr ctx = ag::multi_head_attention(t, q, k, v, heads, valid, attn_sink);
    x = ag::add(t, x, wo(t, ctx, gs));
    ag::NodePtr m = ln2(t, x, gs);
    m = fc2(t, ag::quick_gelu(t, fc1(t, m, gs)), gs);
    return ag::add(t, x, m);
  }
};

}  // namespace gadms::nn
