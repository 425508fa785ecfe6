#pragma once

#include <string>
#include <vector>

#include "dap/model.hpp"
#include "dap/nn.hpp"

namespace dap {

// Dense grounding scores for one image: pixel resolution plus the
// patch-resolution aggregate (mean score per patch cell).
template <typename T>
struct GroundingMap {
  Mat<T> scores;        // H x W in [0,1]
  Mat<T> patch_scores;  // grid rows x cols
};

struct DecoderConfig {
  int heads = 4;
  double mlp_ratio = 2.0;
  int mid_channels = 16;

  void validate() const {
    require(heads >= 1 && mid_channels >= 1, "decoder heads/channels must be >= 1");
  }
};

inline void to_json(json& j, const DecoderConfig& c) {
  j = json{{"heads", c.heads}, {"mlp_ratio", c.mlp_ratio}, {"mid_channels", c.mid_channels}};
}
inline void from_json(const json& j, DecoderConfig& c) {
  j.at("heads").get_to(c.heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("mid_channels").get_to(c.mid_channels);
}

// Pixel decoder: one cross-attention block fusing [CLS] into the patch
// tokens, then two transpose-convolution stages up to pixel resolution and a
// sigmoid squashing.
template <typename T>
class Decoder {
 public:
  Decoder(ParamStore<T>& store, DecoderConfig cfg, int shared_width, int grid, int patch_size,
          std::uint64_t init_seed)
      : cfg_(cfg), width_(shared_width), grid_(grid), patch_size_(patch_size) {
    cfg_.validate();
    require(shared_width % cfg_.heads == 0, "decoder width must be divisible by heads");
    require(patch_size == 1 || patch_size % 2 == 0,
            "decoder upsampling expects patch_size 1 or even");
    up1_ = patch_size == 1 ? 1 : patch_size / 2;
    up2_ = patch_size == 1 ? 1 : 2;
    Rng rng(mix_seed(init_seed, 0xdec0de));
    const Eigen::Index w = shared_width;
    ln_q_ = LayerNormP<T>::create(store, "decoder.ln_q", w);
    ln_kv_ = LayerNormP<T>::create(store, "decoder.ln_kv", w);
    q_ = Linear<T>::create(store, "decoder.attn.q", w, w, rng);
    k_ = Linear<T>::create(store, "decoder.attn.k", w, w, rng);
    v_ = Linear<T>::create(store, "decoder.attn.v", w, w, rng);
    proj_ = Linear<T>::create(store, "decoder.attn.proj", w, w, rng);
    ln2_ = LayerNormP<T>::create(store, "decoder.ln2", w);
    const auto hidden = static_cast<Eigen::Index>(w * cfg_.mlp_ratio);
    fc1_ = Linear<T>::create(store, "decoder.mlp.fc1", w, hidden, rng);
    fc2_ = Linear<T>::create(store, "decoder.mlp.fc2", hidden, w, rng);
    up1_lin_ = Linear<T>::create(store, "decoder.up1", w,
                                 static_cast<Eigen::Index>(up1_) * up1_ * cfg_.mid_channels, rng);
    up2_lin_ = Linear<T>::create(store, "decoder.up2", cfg_.mid_channels,
                                 static_cast<Eigen::Index>(up2_) * up2_, rng);
  }

  const DecoderConfig& config() const { return cfg_; }

  // Packed graph forward: patch tokens are (batch * n) x width, cls is
  // batch x width. Returns pixel scores as (batch * H * W) x 1 in [0,1].
  ag::Var<T> forward(ParamBinder<T>& bind, ag::Var<T> patch_tokens, ag::Var<T> cls,
                     int batch) const {
    auto& tape = bind.tape();
    const Eigen::Index n = static_cast<Eigen::Index>(grid_) * grid_;
    require_dims(patch_tokens.cols() == width_, "decoder: token width mismatch");
    require_dims(cls.cols() == width_, "decoder: text width mismatch between towers");
    require_dims(patch_tokens.rows() == batch * n, "decoder: packed patch shape mismatch");
    require_dims(cls.rows() == batch, "decoder: one [CLS] row per sample expected");

    ag::Var<T> hq = ln_q_.apply(bind, patch_tokens);
    ag::Var<T> hkv = ln_kv_.apply(bind, cls);
    ag::Var<T> ctx =
        ag::cross_attention(tape, q_.apply(bind, hq), k_.apply(bind, hkv), v_.apply(bind, hkv),
                            batch, n, 1, cfg_.heads);
    ag::Var<T> x = ag::add(tape, patch_tokens, proj_.apply(bind, ctx));
    ag::Var<T> m = ln2_.apply(bind, x);
    x = ag::add(tape, x, fc2_.apply(bind, ag::gelu(tape, fc1_.apply(bind, m))));

    // Upsampling head: per-cell linear expansion + pixel shuffle, twice.
    ag::Var<T> s1 = up1_lin_.apply(bind, x);
    s1 = ag::reshape(tape, s1, static_cast<Eigen::Index>(batch) * n * up1_ * up1_,
                     cfg_.mid_channels);
    s1 = ag::permute_rows(tape, s1, shuffle_map(batch, grid_, up1_));
    s1 = ag::gelu(tape, s1);
    const int g1 = grid_ * up1_;
    ag::Var<T> s2 = up2_lin_.apply(bind, s1);
    s2 = ag::reshape(tape, s2,
                     static_cast<Eigen::Index>(batch) * g1 * g1 * up2_ * up2_, 1);
    s2 = ag::permute_rows(tape, s2, shuffle_map(batch, g1, up2_));
    return ag::sigmoid(tape, s2);
  }

  // Inference-path grounding for one sample.
  GroundingMap<T> ground(const TokenBundle<T>& bundle, const TextEmbedding<T>& text) const {
    ag::Tape<T> tape;
    ParamBinder<T> bind(tape, false);
    ag::Var<T> patches = tape.leaf(bundle.patch_tokens, false);
    ag::Var<T> cls = tape.leaf(text.cls_token, false);
    ag::Var<T> scores = forward(bind, patches, cls, 1);
    const int H = grid_ * patch_size_;
    GroundingMap<T> out;
    out.scores = Eigen::Map<const Mat<T>>(scores.val().data(), H, H);
    out.patch_scores = Mat<T>::Zero(grid_, grid_);
    for (Eigen::Index i = 0; i < H; ++i)
      for (Eigen::Index j = 0; j < H; ++j)
        out.patch_scores(i / patch_size_, j / patch_size_) += out.scores(i, j);
    out.patch_scores /= static_cast<T>(patch_size_) * patch_size_;
    return out;
  }

 private:
  // Row map sending packed (cell, ky, kx) rows to (Y, X) pixel rows.
  static std::vector<Eigen::Index> shuffle_map(int batch, int grid, int k) {
    const Eigen::Index out_side = static_cast<Eigen::Index>(grid) * k;
    std::vector<Eigen::Index> map(static_cast<std::size_t>(batch) * out_side * out_side);
    for (int b = 0; b < batch; ++b)
      for (Eigen::Index pr = 0; pr < grid; ++pr)
        for (Eigen::Index pc = 0; pc < grid; ++pc)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const Eigen::Index in_row =
                  ((static_cast<Eigen::Index>(b) * grid * grid + pr * grid + pc) * k + ky) * k +
                  kx;
              const Eigen::Index out_row = static_cast<Eigen::Index>(b) * out_side * out_side +
                                           (pr * k + ky) * out_side + (pc * k + kx);
              map[static_cast<std::size_t>(out_row)] = in_row;
            }
    return map;
  }

  DecoderConfig cfg_;
  Eigen::Index width_;
  int grid_;
  int patch_size_;
  int up1_ = 1;
  int up2_ = 1;
  LayerNormP<T> ln_q_, ln_kv_, ln2_;
  Linear<T> q_, k_, v_, proj_, fc1_, fc2_;
  Linear<T> up1_lin_, up2_lin_;
};

// pixel > theta -> 1 else 0
template <typename T>
MaskGrid binarize(const Mat<T>& scores, T theta) {
  require(theta > T(0) && theta < T(1), "binarize threshold must lie in (0,1)");
  MaskGrid out(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i)
    for (Eigen::Index j = 0; j < scores.cols(); ++j) out(i, j) = scores(i, j) > theta ? 1 : 0;
  return out;
}

}  // namespace dap
