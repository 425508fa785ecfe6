#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dap/autograd.hpp"
#include "dap/common.hpp"
#include "dap/io.hpp"
#include "dap/rng.hpp"

namespace dap {

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  Mat<T> m;  // Adam first moment
  Mat<T> v;  // Adam second moment
};

template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    for (auto& p : params_)
      if (p->name == name) throw ConfigError("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Param<T>>());
    Param<T>& p = *params_.back();
    p.name = name;
    p.value = Mat<T>::Zero(rows, cols);
    p.grad = Mat<T>::Zero(rows, cols);
    p.m = Mat<T>::Zero(rows, cols);
    p.v = Mat<T>::Zero(rows, cols);
    return p;
  }

  Param<T>& at(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return *p;
    throw ConfigError("unknown parameter: " + name);
  }

  std::vector<std::unique_ptr<Param<T>>>& all() { return params_; }
  const std::vector<std::unique_ptr<Param<T>>>& all() const { return params_; }

  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  std::vector<NamedTensor> to_tensors() const {
    std::vector<NamedTensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_)
      out.push_back({p->name, p->value.template cast<float>()});
    return out;
  }

  void from_tensors(const std::vector<NamedTensor>& tensors) {
    if (tensors.size() != params_.size())
      throw IoError("checkpoint tensor count does not match model");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      Param<T>& p = *params_[i];
      if (tensors[i].name != p.name || tensors[i].data.rows() != p.value.rows() ||
          tensors[i].data.cols() != p.value.cols())
        throw IoError("checkpoint tensor mismatch at " + tensors[i].name);
      p.value = tensors[i].data.template cast<T>();
      p.grad.setZero();
      p.m.setZero();
      p.v.setZero();
    }
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
};

// Truncated normal init (resampled beyond two standard deviations).
template <typename T>
void init_trunc_normal(Mat<T>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double x = rng.normal();
      while (std::abs(x) > 2.0) x = rng.normal();
      m(i, j) = static_cast<T>(x * stddev);
    }
}

// Binds store parameters to tape leaves for one graph build, then harvests
// gradients back after backward().
template <typename T>
class ParamBinder {
 public:
  ParamBinder(ag::Tape<T>& tape, bool trainable) : tape_(tape), trainable_(trainable) {}

  ag::Var<T> operator()(Param<T>& p, bool frozen = false) {
    ag::Var<T> v = tape_.leaf(p.value, trainable_ && !frozen);
    if (trainable_ && !frozen) bound_.emplace_back(&p, v);
    return v;
  }

  // Accumulates harvested gradients into Param::grad; caller zeroes between steps.
  void harvest() {
    for (auto& [p, v] : bound_)
      if (v.node->grad.size() != 0) p->grad += v.node->grad;
  }

  ag::Tape<T>& tape() { return tape_; }

 private:
  ag::Tape<T>& tape_;
  bool trainable_;
  std::vector<std::pair<Param<T>*, ag::Var<T>>> bound_;
};

template <typename T>
struct AdamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig<T> cfg = {}) : cfg_(cfg) {}

  void step(ParamStore<T>& params) {
    ++t_;
    const T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(t_));
    for (auto& pp : params.all()) {
      Param<T>& p = *pp;
      p.m = cfg_.beta1 * p.m + (T(1) - cfg_.beta1) * p.grad;
      p.v = (cfg_.beta2 * p.v.array() + (T(1) - cfg_.beta2) * p.grad.array().square()).matrix();
      auto mhat = p.m.array() / bc1;
      auto vhat = p.v.array() / bc2;
      p.value.array() -= cfg_.lr * mhat / (vhat.sqrt() + cfg_.eps);
    }
  }

  void zero_grad(ParamStore<T>& params) {
    for (auto& p : params.all()) p->grad.setZero();
  }

  AdamConfig<T>& config() { return cfg_; }

 private:
  AdamConfig<T> cfg_;
  long t_ = 0;
};

// ---- layer helpers ----------------------------------------------------------

template <typename T>
struct Linear {
  Param<T>* W = nullptr;  // in x out
  Param<T>* b = nullptr;  // 1 x out

  static Linear create(ParamStore<T>& store, const std::string& name, Eigen::Index in,
                       Eigen::Index out, Rng& rng, double init_std = 0.02) {
    Linear l;
    l.W = &store.add(name + ".weight", in, out);
    l.b = &store.add(name + ".bias", 1, out);
    init_trunc_normal(l.W->value, rng, init_std);
    return l;
  }

  ag::Var<T> apply(ParamBinder<T>& bind, ag::Var<T> x, bool frozen = false) const {
    return ag::add_rowvec(bind.tape(), ag::matmul(bind.tape(), x, bind(*W, frozen)),
                          bind(*b, frozen));
  }
};

template <typename T>
struct LayerNormP {
  Param<T>* gain = nullptr;
  Param<T>* bias = nullptr;

  static LayerNormP create(ParamStore<T>& store, const std::string& name, Eigen::Index width) {
    LayerNormP ln;
    ln.gain = &store.add(name + ".gain", 1, width);
    ln.bias = &store.add(name + ".bias", 1, width);
    ln.gain->value.setOnes();
    return ln;
  }

  ag::Var<T> apply(ParamBinder<T>& bind, ag::Var<T> x, bool frozen = false) const {
    return ag::layer_norm(bind.tape(), x, bind(*gain, frozen), bind(*bias, frozen));
  }
};

// Pre-norm transformer encoder block:
//   x += MHA(LN(x)); x += MLP(LN(x))
template <typename T>
struct EncoderBlock {
  LayerNormP<T> ln1, ln2;
  Linear<T> q, k, v, proj, fc1, fc2;
  int heads = 1;

  static EncoderBlock create(ParamStore<T>& store, const std::string& name, Eigen::Index width,
                             int heads, double mlp_ratio, Rng& rng) {
    EncoderBlock blk;
    blk.heads = heads;
    blk.ln1 = LayerNormP<T>::create(store, name + ".ln1", width);
    blk.q = Linear<T>::create(store, name + ".attn.q", width, width, rng);
    blk.k = Linear<T>::create(store, name + ".attn.k", width, width, rng);
    blk.v = Linear<T>::create(store, name + ".attn.v", width, width, rng);
    blk.proj = Linear<T>::create(store, name + ".attn.proj", width, width, rng);
    blk.ln2 = LayerNormP<T>::create(store, name + ".ln2", width);
    const auto hidden = static_cast<Eigen::Index>(width * mlp_ratio);
    blk.fc1 = Linear<T>::create(store, name + ".mlp.fc1", width, hidden, rng);
    blk.fc2 = Linear<T>::create(store, name + ".mlp.fc2", hidden, width, rng);
    return blk;
  }

  ag::Var<T> apply(ParamBinder<T>& bind, ag::Var<T> x, int batch, Eigen::Index seq, bool frozen,
                   std::shared_ptr<ag::AttentionProbes<T>> record = nullptr) const {
    auto& tape = bind.tape();
    ag::Var<T> h = ln1.apply(bind, x, frozen);
    ag::Var<T> ctx = ag::self_attention(tape, q.apply(bind, h, frozen), k.apply(bind, h, frozen),
                                        v.apply(bind, h, frozen), batch, seq, heads, record);
    x = ag::add(tape, x, proj.apply(bind, ctx, frozen));
    ag::Var<T> m = ln2.apply(bind, x, frozen);
    m = fc2.apply(bind, ag::gelu(tape, fc1.apply(bind, m, frozen)), frozen);
    return ag::add(tape, x, m);
  }
};

}  // namespace dap
