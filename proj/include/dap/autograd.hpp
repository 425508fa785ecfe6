#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "dap/common.hpp"

namespace dap::ag {

// Reverse-mode tape over dense row-major matrices. Nodes are created in
// topological order by construction; backward() walks the tape in reverse.
// Token batches are packed as (batch*seq) x width matrices so that the heavy
// linear algebra runs as a handful of large GEMMs per layer.
template <typename T>
class Tape;

template <typename T>
struct Node {
  Mat<T> value;
  Mat<T> grad;
  bool requires_grad = false;
  std::function<void(Tape<T>&, Node<T>&)> backprop;  // empty for leaves

  void ensure_grad() {
    if (grad.size() == 0) grad = Mat<T>::Zero(value.rows(), value.cols());
  }
};

// Lightweight handle; nodes are owned by the tape.
template <typename T>
struct Var {
  Node<T>* node = nullptr;

  const Mat<T>& val() const { return node->value; }
  const Mat<T>& grad() const { return node->grad; }
  Eigen::Index rows() const { return node->value.rows(); }
  Eigen::Index cols() const { return node->value.cols(); }
  explicit operator bool() const { return node != nullptr; }
};

template <typename T>
class Tape {
 public:
  Var<T> leaf(Mat<T> value, bool requires_grad = false) {
    nodes_.push_back(std::make_unique<Node<T>>());
    Node<T>* n = nodes_.back().get();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var<T>{n};
  }

  Var<T> make(Mat<T> value, bool requires_grad, std::function<void(Tape<T>&, Node<T>&)> back) {
    nodes_.push_back(std::make_unique<Node<T>>());
    Node<T>* n = nodes_.back().get();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    if (requires_grad) n->backprop = std::move(back);
    return Var<T>{n};
  }

  // Backward from a scalar (1x1) node.
  void backward(Var<T> out) {
    require_dims(out.node->value.size() == 1, "backward expects a scalar output");
    out.node->ensure_grad();
    out.node->grad(0, 0) = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.requires_grad && n.backprop && n.grad.size() != 0) n.backprop(*this, n);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::unique_ptr<Node<T>>> nodes_;
};

namespace detail {

template <typename T, typename Derived>
inline void accum(Node<T>* n, const Eigen::MatrixBase<Derived>& g) {
  if (!n->requires_grad) return;
  n->ensure_grad();
  n->grad += g;
}

template <typename T>
inline bool any_grad(std::initializer_list<const Var<T>*> vs) {
  for (auto* v : vs)
    if (v->node->requires_grad) return true;
  return false;
}

}  // namespace detail

// ---- basic ops -------------------------------------------------------------

template <typename T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  bool rg = detail::any_grad<T>({&a, &b});
  return tape.make(a.val() + b.val(), rg, [a, b](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, n.grad);
    detail::accum(b.node, n.grad);
  });
}

template <typename T>
Var<T> sub(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  bool rg = detail::any_grad<T>({&a, &b});
  return tape.make(a.val() - b.val(), rg, [a, b](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, n.grad);
    detail::accum(b.node, Mat<T>(-n.grad));
  });
}

// y = s * a + c, elementwise with scalar constants.
template <typename T>
Var<T> affine(Tape<T>& tape, Var<T> a, T s, T c) {
  return tape.make((a.val().array() * s + c).matrix(), a.node->requires_grad,
                   [a, s](Tape<T>&, Node<T>& n) { detail::accum(a.node, Mat<T>(n.grad * s)); });
}

template <typename T>
Var<T> hadamard(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
  bool rg = detail::any_grad<T>({&a, &b});
  return tape.make(a.val().cwiseProduct(b.val()), rg, [a, b](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, n.grad.cwiseProduct(b.val()));
    detail::accum(b.node, n.grad.cwiseProduct(a.val()));
  });
}

template <typename T>
Var<T> matmul(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_dims(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  bool rg = detail::any_grad<T>({&a, &b});
  return tape.make(a.val() * b.val(), rg, [a, b](Tape<T>&, Node<T>& n) {
    if (a.node->requires_grad) detail::accum(a.node, Mat<T>(n.grad * b.val().transpose()));
    if (b.node->requires_grad) detail::accum(b.node, Mat<T>(a.val().transpose() * n.grad));
  });
}

// a * b^T
template <typename T>
Var<T> matmul_nt(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_dims(a.cols() == b.cols(), "matmul_nt: width mismatch");
  bool rg = detail::any_grad<T>({&a, &b});
  return tape.make(a.val() * b.val().transpose(), rg, [a, b](Tape<T>&, Node<T>& n) {
    if (a.node->requires_grad) detail::accum(a.node, Mat<T>(n.grad * b.val()));
    if (b.node->requires_grad) detail::accum(b.node, Mat<T>(n.grad.transpose() * a.val()));
  });
}

// Broadcast a 1 x d row (bias) over all rows of a.
template <typename T>
Var<T> add_rowvec(Tape<T>& tape, Var<T> a, Var<T> r) {
  require_dims(r.rows() == 1 && r.cols() == a.cols(), "add_rowvec: bias must be 1 x cols");
  bool rg = detail::any_grad<T>({&a, &r});
  return tape.make(a.val().rowwise() + r.val().row(0), rg, [a, r](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, n.grad);
    if (r.node->requires_grad) detail::accum(r.node, Mat<T>(n.grad.colwise().sum()));
  });
}

// Scale row i of a by w(i, 0). Gradients flow to both unless w is a plain leaf.
template <typename T>
Var<T> scale_rows(Tape<T>& tape, Var<T> a, Var<T> w) {
  require_dims(w.cols() == 1 && w.rows() == a.rows(), "scale_rows: weights must be rows x 1");
  bool rg = detail::any_grad<T>({&a, &w});
  Mat<T> y = a.val().array().colwise() * w.val().col(0).array();
  return tape.make(std::move(y), rg, [a, w](Tape<T>&, Node<T>& n) {
    if (a.node->requires_grad)
      detail::accum(a.node, Mat<T>(n.grad.array().colwise() * w.val().col(0).array()));
    if (w.node->requires_grad)
      detail::accum(w.node, Mat<T>(n.grad.cwiseProduct(a.val()).rowwise().sum()));
  });
}

template <typename T>
Var<T> gelu(Tape<T>& tape, Var<T> a) {
  auto cdf = [](T x) { return T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2))); };
  Mat<T> y = a.val().unaryExpr([&](T x) { return x * cdf(x); });
  return tape.make(std::move(y), a.node->requires_grad, [a, cdf](Tape<T>&, Node<T>& n) {
    Mat<T> d = a.val().unaryExpr([&](T x) {
      const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
      return cdf(x) + x * pdf;
    });
    detail::accum(a.node, n.grad.cwiseProduct(d));
  });
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, Var<T> a) {
  Mat<T> y = a.val().unaryExpr([](T x) { return T(1) / (T(1) + std::exp(-x)); });
  Mat<T> yv = y;
  return tape.make(std::move(y), a.node->requires_grad, [a, yv](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, n.grad.cwiseProduct(yv.cwiseProduct((T(1) - yv.array()).matrix())));
  });
}

template <typename T>
Var<T> log_elem(Tape<T>& tape, Var<T> a) {
  Mat<T> y = a.val().array().log().matrix();
  return tape.make(std::move(y), a.node->requires_grad, [a](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, Mat<T>(n.grad.cwiseQuotient(a.val())));
  });
}

template <typename T>
Var<T> div_elem(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "div: shape mismatch");
  bool rg = detail::any_grad<T>({&a, &b});
  return tape.make(a.val().cwiseQuotient(b.val()), rg, [a, b](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, Mat<T>(n.grad.cwiseQuotient(b.val())));
    if (b.node->requires_grad) {
      Mat<T> g = -n.grad.cwiseProduct(a.val()).cwiseQuotient(b.val().cwiseProduct(b.val()));
      detail::accum(b.node, g);
    }
  });
}

template <typename T>
Var<T> sum(Tape<T>& tape, Var<T> a) {
  Mat<T> y(1, 1);
  y(0, 0) = a.val().sum();
  return tape.make(std::move(y), a.node->requires_grad, [a](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, Mat<T>(Mat<T>::Constant(a.rows(), a.cols(), n.grad(0, 0))));
  });
}

template <typename T>
Var<T> mean(Tape<T>& tape, Var<T> a) {
  return affine(tape, sum(tape, a), T(1) / static_cast<T>(a.val().size()), T(0));
}

// Per-row LayerNorm with learned gain/bias (1 x d each).
template <typename T>
Var<T> layer_norm(Tape<T>& tape, Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const Eigen::Index d = x.cols();
  require_dims(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
               "layer_norm: gain/bias must be 1 x width");
  Mat<T> xhat(x.rows(), d);
  Mat<T> inv_sd(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T mu = x.val().row(i).mean();
    const T var = (x.val().row(i).array() - mu).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    inv_sd(i, 0) = is;
    xhat.row(i) = ((x.val().row(i).array() - mu) * is).matrix();
  }
  Mat<T> y = (xhat.array().rowwise() * gain.val().row(0).array()).matrix().rowwise() +
             bias.val().row(0);
  bool rg = detail::any_grad<T>({&x, &gain, &bias});
  return tape.make(std::move(y), rg, [x, gain, bias, xhat, inv_sd](Tape<T>&, Node<T>& n) {
    if (gain.node->requires_grad)
      detail::accum(gain.node, Mat<T>(n.grad.cwiseProduct(xhat).colwise().sum()));
    if (bias.node->requires_grad) detail::accum(bias.node, Mat<T>(n.grad.colwise().sum()));
    if (x.node->requires_grad) {
      const Eigen::Index dd = x.cols();
      Mat<T> dxhat = n.grad.array().rowwise() * gain.val().row(0).array();
      Mat<T> gx(x.rows(), dd);
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const T m1 = dxhat.row(i).mean();
        const T m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
        gx.row(i) =
            ((dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_sd(i, 0)).matrix();
      }
      detail::accum(x.node, gx);
    }
  });
}

// Rowwise softmax.
template <typename T>
Var<T> softmax_rows(Tape<T>& tape, Var<T> a) {
  Mat<T> p(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const T m = a.val().row(i).maxCoeff();
    Eigen::Array<T, 1, Eigen::Dynamic> e = (a.val().row(i).array() - m).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  Mat<T> pv = p;
  return tape.make(std::move(p), a.node->requires_grad, [a, pv](Tape<T>&, Node<T>& n) {
    Mat<T> g(pv.rows(), pv.cols());
    for (Eigen::Index i = 0; i < pv.rows(); ++i) {
      const T dot = n.grad.row(i).cwiseProduct(pv.row(i)).sum();
      g.row(i) = pv.row(i).cwiseProduct((n.grad.row(i).array() - dot).matrix());
    }
    detail::accum(a.node, g);
  });
}

// Rows scaled to unit L2 norm; used to build cosine-similarity matrices.
template <typename T>
Var<T> row_normalize(Tape<T>& tape, Var<T> a) {
  Mat<T> y(a.rows(), a.cols());
  Mat<T> inv_norm(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const T nrm = a.val().row(i).norm();
    if (!(nrm > T(0))) throw NumericError("row_normalize: zero vector has no direction");
    inv_norm(i, 0) = T(1) / nrm;
    y.row(i) = a.val().row(i) * inv_norm(i, 0);
  }
  Mat<T> yv = y;
  return tape.make(std::move(y), a.node->requires_grad, [a, yv, inv_norm](Tape<T>&, Node<T>& n) {
    Mat<T> g(yv.rows(), yv.cols());
    for (Eigen::Index i = 0; i < yv.rows(); ++i) {
      const T dot = n.grad.row(i).cwiseProduct(yv.row(i)).sum();
      g.row(i) = (n.grad.row(i) - yv.row(i) * dot) * inv_norm(i, 0);
    }
    detail::accum(a.node, g);
  });
}

template <typename T>
Var<T> slice_rows(Tape<T>& tape, Var<T> a, Eigen::Index start, Eigen::Index count) {
  require_dims(start >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Mat<T> y = a.val().middleRows(start, count);
  return tape.make(std::move(y), a.node->requires_grad, [a, start, count](Tape<T>&, Node<T>& n) {
    if (!a.node->requires_grad) return;
    a.node->ensure_grad();
    a.node->grad.middleRows(start, count) += n.grad;
  });
}

template <typename T>
Var<T> concat_rows(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_dims(a.cols() == b.cols(), "concat_rows: width mismatch");
  Mat<T> y(a.rows() + b.rows(), a.cols());
  y.topRows(a.rows()) = a.val();
  y.bottomRows(b.rows()) = b.val();
  bool rg = detail::any_grad<T>({&a, &b});
  return tape.make(std::move(y), rg, [a, b](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, Mat<T>(n.grad.topRows(a.rows())));
    detail::accum(b.node, Mat<T>(n.grad.bottomRows(b.rows())));
  });
}

// Gather arbitrary rows (duplicates allowed); backward scatter-adds.
template <typename T>
Var<T> gather_rows(Tape<T>& tape, Var<T> a, std::vector<Eigen::Index> idx) {
  Mat<T> y(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require_dims(idx[i] >= 0 && idx[i] < a.rows(), "gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = a.val().row(idx[i]);
  }
  return tape.make(std::move(y), a.node->requires_grad,
                   [a, idx = std::move(idx)](Tape<T>&, Node<T>& n) {
                     if (!a.node->requires_grad) return;
                     a.node->ensure_grad();
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       a.node->grad.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
                   });
}

// Output row i equals input row map[i]; map must be a bijection on rows.
// Used for the pixel-shuffle step of the transpose-convolution stages.
template <typename T>
Var<T> permute_rows(Tape<T>& tape, Var<T> a, std::vector<Eigen::Index> map) {
  require_dims(static_cast<Eigen::Index>(map.size()) == a.rows(), "permute_rows: size mismatch");
  Mat<T> y(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) y.row(i) = a.val().row(map[i]);
  return tape.make(std::move(y), a.node->requires_grad,
                   [a, map = std::move(map)](Tape<T>&, Node<T>& n) {
                     if (!a.node->requires_grad) return;
                     a.node->ensure_grad();
                     for (Eigen::Index i = 0; i < n.grad.rows(); ++i)
                       a.node->grad.row(map[i]) += n.grad.row(i);
                   });
}

// Reshape without reordering (row-major semantics preserved).
template <typename T>
Var<T> reshape(Tape<T>& tape, Var<T> a, Eigen::Index rows, Eigen::Index cols) {
  require_dims(rows * cols == a.val().size(), "reshape: element count mismatch");
  Mat<T> y = Eigen::Map<const Mat<T>>(a.val().data(), rows, cols);
  return tape.make(std::move(y), a.node->requires_grad, [a](Tape<T>&, Node<T>& n) {
    detail::accum(a.node, Mat<T>(Eigen::Map<const Mat<T>>(n.grad.data(), a.rows(), a.cols())));
  });
}

// Stack single-row vars into one matrix (used to batch per-sample [CLS] rows).
template <typename T>
Var<T> stack_rows(Tape<T>& tape, const std::vector<Var<T>>& rows) {
  require_dims(!rows.empty(), "stack_rows: empty input");
  const Eigen::Index d = rows.front().cols();
  Mat<T> y(static_cast<Eigen::Index>(rows.size()), d);
  bool rg = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require_dims(rows[i].rows() == 1 && rows[i].cols() == d, "stack_rows: expected 1 x d rows");
    y.row(static_cast<Eigen::Index>(i)) = rows[i].val().row(0);
    rg = rg || rows[i].node->requires_grad;
  }
  return tape.make(std::move(y), rg, [rows](Tape<T>&, Node<T>& n) {
    for (std::size_t i = 0; i < rows.size(); ++i)
      detail::accum(rows[i].node, Mat<T>(n.grad.row(static_cast<Eigen::Index>(i))));
  });
}

// Gather embedding rows by token id; backward scatter-adds into the table.
template <typename T>
Var<T> embedding(Tape<T>& tape, Var<T> table, const std::vector<int>& ids) {
  Mat<T> y(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require_dims(ids[i] >= 0 && ids[i] < table.rows(), "embedding: token id out of range");
    y.row(static_cast<Eigen::Index>(i)) = table.val().row(ids[i]);
  }
  return tape.make(std::move(y), table.node->requires_grad, [table, ids](Tape<T>&, Node<T>& n) {
    if (!table.node->requires_grad) return;
    table.node->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      table.node->grad.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
  });
}

// ---- fused attention -------------------------------------------------------

// Recorded softmax attention probabilities (and, after backward, their
// gradients) for one layer: heads * batch matrices of seq x seq.
template <typename T>
struct AttentionProbes {
  std::vector<Mat<T>> probs;  // indexed [b * heads + h]
  std::vector<Mat<T>> grads;  // filled during backward when recording
  int heads = 0;
  int batch = 0;
  Eigen::Index seq = 0;
};

// Multi-head self-attention over a packed (batch*seq) x width input of Q/K/V
// projections. When `record` is non-null, per-head softmax maps and their
// gradients are kept for relevance extraction.
template <typename T>
Var<T> self_attention(Tape<T>& tape, Var<T> q, Var<T> k, Var<T> v, int batch, Eigen::Index seq,
                      int heads, std::shared_ptr<AttentionProbes<T>> record = nullptr) {
  const Eigen::Index width = q.cols();
  require_dims(q.rows() == batch * seq && k.rows() == q.rows() && v.rows() == q.rows(),
               "self_attention: packed shape mismatch");
  require_dims(width % heads == 0, "self_attention: width not divisible by heads");
  const Eigen::Index hd = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  auto probes = record ? record : std::make_shared<AttentionProbes<T>>();
  probes->heads = heads;
  probes->batch = batch;
  probes->seq = seq;
  probes->probs.assign(static_cast<std::size_t>(batch) * heads, Mat<T>());
  probes->grads.clear();

  Mat<T> ctx(q.rows(), width);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
      auto Q = q.val().block(r0, c0, seq, hd);
      auto K = k.val().block(r0, c0, seq, hd);
      auto V = v.val().block(r0, c0, seq, hd);
      Mat<T> s = (Q * K.transpose()) * scale;
      Mat<T> p(seq, seq);
      for (Eigen::Index i = 0; i < seq; ++i) {
        const T m = s.row(i).maxCoeff();
        Eigen::Array<T, 1, Eigen::Dynamic> e = (s.row(i).array() - m).exp();
        p.row(i) = (e / e.sum()).matrix();
      }
      ctx.block(r0, c0, seq, hd) = p * V;
      probes->probs[static_cast<std::size_t>(b) * heads + h] = std::move(p);
    }
  }

  const bool keep = record != nullptr;
  bool rg = detail::any_grad<T>({&q, &k, &v});
  return tape.make(std::move(ctx), rg,
                   [q, k, v, batch, seq, heads, hd, scale, probes, keep](Tape<T>&, Node<T>& n) {
                     if (keep) probes->grads.resize(probes->probs.size());
                     Mat<T> gq, gk, gv;
                     if (q.node->requires_grad) gq = Mat<T>::Zero(n.grad.rows(), n.grad.cols());
                     if (k.node->requires_grad) gk = Mat<T>::Zero(n.grad.rows(), n.grad.cols());
                     if (v.node->requires_grad) gv = Mat<T>::Zero(n.grad.rows(), n.grad.cols());
                     for (int b = 0; b < batch; ++b) {
                       const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
                       for (int h = 0; h < heads; ++h) {
                         const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
                         const Mat<T>& p = probes->probs[static_cast<std::size_t>(b) * heads + h];
                         auto dctx = n.grad.block(r0, c0, seq, hd);
                         auto V = v.val().block(r0, c0, seq, hd);
                         Mat<T> dp = dctx * V.transpose();
                         if (keep) probes->grads[static_cast<std::size_t>(b) * heads + h] = dp;
                         if (gv.size()) gv.block(r0, c0, seq, hd) += p.transpose() * dctx;
                         if (gq.size() || gk.size()) {
                           Mat<T> ds(seq, seq);
                           for (Eigen::Index i = 0; i < seq; ++i) {
                             const T dot = dp.row(i).cwiseProduct(p.row(i)).sum();
                             ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
                           }
                           auto Q = q.val().block(r0, c0, seq, hd);
                           auto K = k.val().block(r0, c0, seq, hd);
                           if (gq.size()) gq.block(r0, c0, seq, hd) += (ds * K) * scale;
                           if (gk.size()) gk.block(r0, c0, seq, hd) += (ds.transpose() * Q) * scale;
                         }
                       }
                     }
                     if (gq.size()) detail::accum(q.node, gq);
                     if (gk.size()) detail::accum(k.node, gk);
                     if (gv.size()) detail::accum(v.node, gv);
                   });
}

// Cross-attention where each sample attends over its own (possibly single-
// token) key/value sequence. q is packed (batch*seq_q) x width, kv is packed
// (batch*seq_kv) x width.
template <typename T>
Var<T> cross_attention(Tape<T>& tape, Var<T> q, Var<T> k, Var<T> v, int batch, Eigen::Index seq_q,
                       Eigen::Index seq_kv, int heads) {
  const Eigen::Index width = q.cols();
  require_dims(q.rows() == batch * seq_q, "cross_attention: query shape mismatch");
  require_dims(k.rows() == batch * seq_kv && v.rows() == batch * seq_kv,
               "cross_attention: key/value shape mismatch");
  require_dims(width % heads == 0, "cross_attention: width not divisible by heads");
  const Eigen::Index hd = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  auto probs = std::make_shared<std::vector<Mat<T>>>(static_cast<std::size_t>(batch) * heads);
  Mat<T> ctx(q.rows(), width);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index rq = static_cast<Eigen::Index>(b) * seq_q;
    const Eigen::Index rk = static_cast<Eigen::Index>(b) * seq_kv;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
      auto Q = q.val().block(rq, c0, seq_q, hd);
      auto K = k.val().block(rk, c0, seq_kv, hd);
      auto V = v.val().block(rk, c0, seq_kv, hd);
      Mat<T> s = (Q * K.transpose()) * scale;
      Mat<T> p(seq_q, seq_kv);
      for (Eigen::Index i = 0; i < seq_q; ++i) {
        const T m = s.row(i).maxCoeff();
        Eigen::Array<T, 1, Eigen::Dynamic> e = (s.row(i).array() - m).exp();
        p.row(i) = (e / e.sum()).matrix();
      }
      ctx.block(rq, c0, seq_q, hd) = p * V;
      (*probs)[static_cast<std::size_t>(b) * heads + h] = std::move(p);
    }
  }

  bool rg = detail::any_grad<T>({&q, &k, &v});
  return tape.make(
      std::move(ctx), rg,
      [q, k, v, batch, seq_q, seq_kv, heads, hd, scale, probs](Tape<T>&, Node<T>& n) {
        Mat<T> gq, gk, gv;
        if (q.node->requires_grad) gq = Mat<T>::Zero(q.rows(), q.cols());
        if (k.node->requires_grad) gk = Mat<T>::Zero(k.rows(), k.cols());
        if (v.node->requires_grad) gv = Mat<T>::Zero(v.rows(), v.cols());
        for (int b = 0; b < batch; ++b) {
          const Eigen::Index rq = static_cast<Eigen::Index>(b) * seq_q;
          const Eigen::Index rk = static_cast<Eigen::Index>(b) * seq_kv;
          for (int h = 0; h < heads; ++h) {
            const Eigen::Index c0 = static_cast<Eigen::Index>(h) * hd;
            const Mat<T>& p = (*probs)[static_cast<std::size_t>(b) * heads + h];
            auto dctx = n.grad.block(rq, c0, seq_q, hd);
            auto V = v.val().block(rk, c0, seq_kv, hd);
            Mat<T> dp = dctx * V.transpose();
            if (gv.size()) gv.block(rk, c0, seq_kv, hd) += p.transpose() * dctx;
            if (gq.size() || gk.size()) {
              Mat<T> ds(seq_q, seq_kv);
              for (Eigen::Index i = 0; i < seq_q; ++i) {
                const T dot = dp.row(i).cwiseProduct(p.row(i)).sum();
                ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
              }
              auto Q = q.val().block(rq, c0, seq_q, hd);
              auto K = k.val().block(rk, c0, seq_kv, hd);
              if (gq.size()) gq.block(rq, c0, seq_q, hd) += (ds * K) * scale;
              if (gk.size()) gk.block(rk, c0, seq_kv, hd) += (ds.transpose() * Q) * scale;
            }
          }
        }
        if (gq.size()) detail::accum(q.node, gq);
        if (gk.size()) detail::accum(k.node, gk);
        if (gv.size()) detail::accum(v.node, gv);
      });
}

// ---- contrastive losses (fused for stability) ------------------------------

// InfoNCE over rows of a similarity matrix: mean_i [ LSE_{j in denom(i)}
// (s_ij / tau) - s_ii / tau ]. denom_mask(i, j) != 0 marks the members of
// row i's denominator set.
template <typename T>
Var<T> info_nce_rows(Tape<T>& tape, Var<T> sims, const MaskGrid& denom_mask, T tau) {
  const Eigen::Index n = sims.rows();
  require_dims(sims.cols() == n, "info_nce_rows: similarity matrix must be square");
  require_dims(denom_mask.rows() == n && denom_mask.cols() == n, "info_nce_rows: mask mismatch");
  if (tau <= T(0)) throw ConfigError("temperature must be > 0");
  for (Eigen::Index i = 0; i < n; ++i)
    require_dims(denom_mask.row(i).template cast<int>().sum() > 0,
                 "info_nce_rows: empty denominator set");

  Mat<T> soft(n, n);  // masked softmax rows, reused in backward
  T loss = T(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    T m = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (denom_mask(i, j)) m = std::max(m, sims.val()(i, j) / tau);
    T z = T(0);
    for (Eigen::Index j = 0; j < n; ++j) {
      const T e = denom_mask(i, j) ? std::exp(sims.val()(i, j) / tau - m) : T(0);
      soft(i, j) = e;
      z += e;
    }
    soft.row(i) /= z;
    loss += (std::log(z) + m) - sims.val()(i, i) / tau;
  }
  Mat<T> out(1, 1);
  out(0, 0) = loss / static_cast<T>(n);
  return tape.make(std::move(out), sims.node->requires_grad,
                   [sims, soft, tau, n](Tape<T>&, Node<T>& nd) {
                     const T g = nd.grad(0, 0) / (static_cast<T>(n) * tau);
                     Mat<T> gs = soft * g;
                     for (Eigen::Index i = 0; i < n; ++i) gs(i, i) -= g;
                     detail::accum(sims.node, gs);
                   });
}

// Local FG/BG contrast for one sample: sims is n_patches x 1 of cos(v, CLS).
// loss = -mean_{f in FG} log( e^{s_f/tau} / (e^{s_f/tau} + sum_{b in BG} e^{s_b/tau}) ).
template <typename T>
Var<T> local_nce(Tape<T>& tape, Var<T> sims, const std::vector<char>& is_fg, T tau) {
  const Eigen::Index n = sims.rows();
  require_dims(sims.cols() == 1, "local_nce: expected column of similarities");
  require_dims(static_cast<Eigen::Index>(is_fg.size()) == n, "local_nce: mask size mismatch");
  if (tau <= T(0)) throw ConfigError("temperature must be > 0");
  Eigen::Index n_fg = 0, n_bg = 0;
  for (char c : is_fg) (c ? n_fg : n_bg)++;
  if (n_bg == 0) throw NumericError("local_nce: degenerate partition with empty BG");
  require_dims(n_fg > 0, "local_nce: FG empty; caller should skip this sample");

  const T m = sims.val().col(0).maxCoeff();
  T zbg = T(0);
  Mat<T> e(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    e(i, 0) = std::exp(sims.val()(i, 0) / tau - m / tau);
    if (!is_fg[i]) zbg += e(i, 0);
  }
  T loss = T(0);
  for (Eigen::Index i = 0; i < n; ++i)
    if (is_fg[i]) loss += std::log(e(i, 0) + zbg) - std::log(e(i, 0));
  Mat<T> out(1, 1);
  out(0, 0) = loss / static_cast<T>(n_fg);
  return tape.make(std::move(out), sims.node->requires_grad,
                   [sims, e, is_fg, tau, n_fg, zbg, n](Tape<T>&, Node<T>& nd) {
                     const T g = nd.grad(0, 0) / (static_cast<T>(n_fg) * tau);
                     Mat<T> gs = Mat<T>::Zero(n, 1);
                     T bg_coeff = T(0);
                     for (Eigen::Index f = 0; f < n; ++f) {
                       if (!is_fg[f]) continue;
                       const T denom = e(f, 0) + zbg;
                       gs(f, 0) += g * (e(f, 0) / denom - T(1));
                       bg_coeff += g / denom;
                     }
                     for (Eigen::Index b = 0; b < n; ++b)
                       if (!is_fg[b]) gs(b, 0) += e(b, 0) * bg_coeff;
                     detail::accum(sims.node, gs);
                   });
}

}  // namespace dap::ag
