#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gadms/error.hpp"
#include "gadms/mat.hpp"

namespace gadms {

// Registry of trainable tensors. Modules own their weight matrices and
// register a stable name + pointer here; ids index gradient stores and the
// optimizer state, names key the checkpoint format.
class ParamRegistry {
 public:
  int add(std::string name, Mat* value) {
    const int id = static_cast<int>(entries_.size());
    entries_.push_back(Entry{std::move(name), value});
    return id;
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(int id) const { return entries_[id].name; }
  Mat& value(int id) const { return *entries_[id].value; }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value->size());
    return n;
  }

 private:
  struct Entry {
    std::string name;
    Mat* value;
  };
  std::vector<Entry> entries_;
};

// Accumulates parameter gradients. One store per sample keeps batch
// reduction in a fixed sample order, so results do not depend on how the
// samples were scheduled across threads.
class GradStore {
 public:
  explicit GradStore(const ParamRegistry& reg) : reg_(&reg) {}

  template <class Derived>
  void add(int pid, const Eigen::MatrixBase<Derived>& g) {
    ensure(pid);
    if (!touched_[pid]) {
      grads_[pid] = g;
      touched_[pid] = 1;
    } else {
      grads_[pid] += g;
    }
  }

  bool touched(int pid) const {
    return pid < static_cast<int>(touched_.size()) && touched_[pid];
  }

  const Mat& grad(int pid) const { return grads_[pid]; }

  // Adds this store into `master`; call in a fixed sample order.
  void reduce_into(GradStore& master) const {
    for (std::size_t pid = 0; pid < grads_.size(); ++pid)
      if (touched_[pid]) master.add(static_cast<int>(pid), grads_[pid]);
  }

  void clear() {
    grads_.clear();
    touched_.clear();
  }

 private:
  void ensure(int pid) {
    if (pid >= static_cast<int>(grads_.size())) {
      grads_.resize(reg_->size());
      touched_.resize(reg_->size(), 0);
    }
  }
  const ParamRegistry* reg_;
  std::vector<Mat> grads_;
  std::vector<char> touched_;
};

namespace ag {

struct Node {
  Mat val;
  Mat grad;
  bool has_grad = false;
  std::function<void()> back;
};
using NodePtr = std::shared_ptr<Node>;

template <class Derived>
inline void accum(Node& n, const Eigen::MatrixBase<Derived>& g) {
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

// Records nodes in construction order; backward replays them in reverse.
// Forward values are computed eagerly as ops are recorded.
class Tape {
 public:
  NodePtr make(Mat v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    nodes_.push_back(n);
    return n;
  }

  void backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.has_grad && n.back) n.back();
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<NodePtr> nodes_;
};

inline NodePtr input(Tape& t, Mat v) { return t.make(std::move(v)); }

// Leaf bound to a registered parameter; gradients land in the store.
inline NodePtr param_leaf(Tape& t, const Mat& p, int pid, GradStore* gs) {
  NodePtr n = t.make(p);
  if (gs) {
    Node* self = n.get();
    n->back = [self, pid, gs] { gs->add(pid, self->grad); };
  }
  return n;
}

inline NodePtr matmul(Tape& t, NodePtr a, NodePtr b) {
  NodePtr n = t.make(a->val * b->val);
  Node* self = n.get();
  n->back = [self, a, b] {
    accum(*a, self->grad * b->val.transpose());
    accum(*b, a->val.transpose() * self->grad);
  };
  return n;
}

// y = x W (+ b). Parameter gradients are skipped when gs is null, which is
// what freezes score computation out of the weight updates.
inline NodePtr linear(Tape& t, NodePtr x, const Mat& w, const Mat& b, int wid,
                      int bid, GradStore* gs, bool use_bias = true) {
  Mat y = x->val * w;
  if (use_bias) y.rowwise() += b.row(0);
  NodePtr n = t.make(std::move(y));
  Node* self = n.get();
  n->back = [self, x, &w, wid, bid, gs, use_bias] {
    accum(*x, self->grad * w.transpose());
    if (gs) {
      gs->add(wid, x->val.transpose() * self->grad);
      if (use_bias) gs->add(bid, self->grad.colwise().sum());
    }
  };
  return n;
}

inline NodePtr add(Tape& t, NodePtr a, NodePtr b) {
  NodePtr n = t.make(a->val + b->val);
  Node* self = n.get();
  n->back = [self, a, b] {
    accum(*a, self->grad);
    accum(*b, self->grad);
  };
  return n;
}

// y = x + P[0:rows], for learned positional tables.
inline NodePtr add_param_rows(Tape& t, NodePtr x, const Mat& p, int pid,
                              GradStore* gs) {
  check(p.rows() >= x->val.rows() && p.cols() == x->val.cols(),
        ErrorKind::Shape, "positional table smaller than the sequence");
  const Eigen::Index rows = x->val.rows();
  NodePtr n = t.make(x->val + p.topRows(rows));
  Node* self = n.get();
  n->back = [self, x, &p, pid, gs, rows] {
    accum(*x, self->grad);
    if (gs) {
      Mat gp = Mat::Zero(p.rows(), p.cols());
      gp.topRows(rows) = self->grad;
      gs->add(pid, gp);
    }
  };
  return n;
}

inline NodePtr layer_norm(Tape& t, NodePtr x, const Mat& gamma, const Mat& beta,
                          int gid, int bid, GradStore* gs, double eps = 1e-5) {
  const Eigen::Index rows = x->val.rows(), cols = x->val.cols();
  Mat xhat(rows, cols);
  Vec inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = x->val.row(r).mean();
    const double var = (x->val.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = (x->val.row(r).array() - mu) * is;
  }
  Mat y = (xhat.array().rowwise() * gamma.row(0).array()).matrix();
  y.rowwise() += beta.row(0);
  NodePtr n = t.make(std::move(y));
  Node* self = n.get();
  auto xhat_s = std::make_shared<Mat>(std::move(xhat));
  auto istd_s = std::make_shared<Vec>(std::move(inv_std));
  n->back = [self, x, &gamma, gid, bid, gs, xhat_s, istd_s] {
    const Mat& g = self->grad;
    const Eigen::Index rows = g.rows(), cols = g.cols();
    Mat dx(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const auto gy = g.row(r).array() * gamma.row(0).array();
      const double m1 = gy.mean();
      const double m2 = (gy * xhat_s->row(r).array()).mean();
      dx.row(r) =
          ((gy - m1 - xhat_s->row(r).array() * m2) * (*istd_s)(r)).matrix();
    }
    accum(*x, dx);
    if (gs) {
      gs->add(gid, (g.array() * xhat_s->array()).colwise().sum().matrix());
      gs->add(bid, g.colwise().sum());
    }
    (void)cols;
  };
  return n;
}

// x * sigmoid(1.702 x); the cheap smooth gate used by the encoders.
inline NodePtr quick_gelu(Tape& t, NodePtr x) {
  Mat s = (1.0 / (1.0 + (-1.702 * x->val.array()).exp())).matrix();
  NodePtr n = t.make((x->val.array() * s.array()).matrix());
  Node* self = n.get();
  auto s_s = std::make_shared<Mat>(std::move(s));
  n->back = [self, x, s_s] {
    const auto sa = s_s->array();
    accum(*x, (self->grad.array() *
               (sa + x->val.array() * 1.702 * sa * (1.0 - sa)))
                  .matrix());
  };
  return n;
}

// Multi-head attention. q is Nq x d; k and v are Nk x d. Invalid key
// positions are excluded from the softmax. When attn_capture is non-null
// the per-head post-softmax maps are copied out.
inline NodePtr multi_head_attention(Tape& t, NodePtr q, NodePtr k, NodePtr v,
                                    int heads,
                                    const std::vector<char>& key_valid,
                                    std::vector<Mat>* attn_capture = nullptr) {
  const Eigen::Index nq = q->val.rows(), nk = k->val.rows(), d = q->val.cols();
  check(d % heads == 0, ErrorKind::Config, "width not divisible by head count");
  check(static_cast<Eigen::Index>(key_valid.size()) == nk, ErrorKind::Shape,
        "key validity mask length mismatch");
  bool any_valid = false;
  for (char c : key_valid) any_valid = any_valid || c;
  check(any_valid, ErrorKind::DegenerateInput, "attention over no valid keys");

  const Eigen::Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Mat>>();
  probs->reserve(heads);
  Mat out(nq, d);
  for (int h = 0; h < heads; ++h) {
    const Mat qh = q->val.middleCols(h * dh, dh);
    const Mat kh = k->val.middleCols(h * dh, dh);
    const Mat vh = v->val.middleCols(h * dh, dh);
    Mat logits = scale * (qh * kh.transpose());
    for (Eigen::Index j = 0; j < nk; ++j)
      if (!key_valid[j]) logits.col(j).setConstant(-1e30);
    for (Eigen::Index r = 0; r < nq; ++r) {
      const double mx = logits.row(r).maxCoeff();
      logits.row(r) = (logits.row(r).array() - mx).exp();
    }
    // The vectorized exp clamps instead of underflowing, so excluded columns
    // come back as ~1e-308 rather than zero; those crumbs breed denormals in
    // every downstream matmul (a ~20x slowdown). Pin them to exact zeros
    // before normalizing.
    for (Eigen::Index j = 0; j < nk; ++j)
      if (!key_valid[j]) logits.col(j).setZero();
    for (Eigen::Index r = 0; r < nq; ++r) logits.row(r) /= logits.row(r).sum();
    out.middleCols(h * dh, dh).noalias() = logits * vh;
    probs->push_back(std::move(logits));
  }
  if (attn_capture) *attn_capture = *probs;

  NodePtr n = t.make(std::move(out));
  Node* self = n.get();
  n->back = [self, q, k, v, heads, dh, scale, probs] {
    const Eigen::Index d = q->val.cols();
    Mat dq = Mat::Zero(q->val.rows(), d);
    Mat dk = Mat::Zero(k->val.rows(), d);
    Mat dv = Mat::Zero(v->val.rows(), d);
    for (int h = 0; h < heads; ++h) {
      const Mat& p = (*probs)[h];
      const Mat gh = self->grad.middleCols(h * dh, dh);
      const Mat qh = q->val.middleCols(h * dh, dh);
      const Mat kh = k->val.middleCols(h * dh, dh);
      const Mat vh = v->val.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() = p.transpose() * gh;
      Mat dp = gh * vh.transpose();
      // softmax backward, rowwise
      Mat ds(p.rows(), p.cols());
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double dot = (dp.row(r).array() * p.row(r).array()).sum();
        ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
      }
      ds *= scale;
      dq.middleCols(h * dh, dh).noalias() = ds * kh;
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qh;
    }
    accum(*q, dq);
    accum(*k, dk);
    accum(*v, dv);
  };
  return n;
}

inline NodePtr embedding(Tape& t, const Mat& table,
                         const std::vector<int>& ids, int pid, GradStore* gs) {
  Mat y(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < table.rows(), ErrorKind::Vocabulary,
          "token id outside the embedding table");
    y.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  }
  NodePtr n = t.make(std::move(y));
  if (gs) {
    Node* self = n.get();
    n->back = [self, &table, ids, pid, gs] {
      Mat gt = Mat::Zero(table.rows(), table.cols());
      for (std::size_t i = 0; i < ids.size(); ++i)
        gt.row(ids[i]) += self->grad.row(static_cast<Eigen::Index>(i));
      gs->add(pid, gt);
    };
  }
  return n;
}

inline NodePtr vstack(Tape& t, NodePtr a, NodePtr b) {
  Mat y(a->val.rows() + b->val.rows(), a->val.cols());
  y.topRows(a->val.rows()) = a->val;
  y.bottomRows(b->val.rows()) = b->val;
  NodePtr n = t.make(std::move(y));
  Node* self = n.get();
  n->back = [self, a, b] {
    accum(*a, self->grad.topRows(a->val.rows()));
    accum(*b, self->grad.bottomRows(b->val.rows()));
  };
  return n;
}

inline NodePtr row(Tape& t, NodePtr x, Eigen::Index i) {
  NodePtr n = t.make(x->val.row(i));
  Node* self = n.get();
  n->back = [self, x, i] {
    Mat g = Mat::Zero(x->val.rows(), x->val.cols());
    g.row(i) = self->grad;
    accum(*x, g);
  };
  return n;
}

inline NodePtr rows(Tape& t, NodePtr x, const std::vector<int>& idx) {
  Mat y(static_cast<Eigen::Index>(idx.size()), x->val.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    y.row(static_cast<Eigen::Index>(i)) = x->val.row(idx[i]);
  NodePtr n = t.make(std::move(y));
  Node* self = n.get();
  n->back = [self, x, idx] {
    Mat g = Mat::Zero(x->val.rows(), x->val.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      g.row(idx[i]) += self->grad.row(static_cast<Eigen::Index>(i));
    accum(*x, g);
  };
  return n;
}

// Adds a fixed offset to one row; the hook the finite-difference probes use
// to perturb an intermediate activation.
inline NodePtr add_row_delta(Tape& t, NodePtr x, Eigen::Index i,
                             const RowVec& delta) {
  Mat y = x->val;
  y.row(i) += delta;
  NodePtr n = t.make(std::move(y));
  Node* self = n.get();
  n->back = [self, x] { accum(*x, self->grad); };
  return n;
}

// Cosine similarity of two 1 x d nodes; yields a 1 x 1 node.
inline NodePtr cosine_sim(Tape& t, NodePtr a, NodePtr b) {
  const double na = a->val.norm(), nb = b->val.norm();
  check(na > 0.0 && nb > 0.0, ErrorKind::DegenerateInput,
        "cosine similarity of a zero-norm vector");
  const double c = a->val.row(0).dot(b->val.row(0)) / (na * nb);
  NodePtr n = t.make(Mat::Constant(1, 1, c));
  Node* self = n.get();
  n->back = [self, a, b, na, nb, c] {
    const double g = self->grad(0, 0);
    accum(*a, (g * (b->val / (na * nb) - (c / (na * na)) * a->val)).eval());
    accum(*b, (g * (a->val / (na * nb) - (c / (nb * nb)) * b->val)).eval());
  };
  return n;
}

inline void seed(NodePtr n, Mat g) {
  n->grad = std::move(g);
  n->has_grad = true;
}

inline void seed_scalar(NodePtr n, double g = 1.0) {
  seed(n, Mat::Constant(1, 1, g));
}

}  // namespace ag
}  // namespace gadms
