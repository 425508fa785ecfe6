#pragma once

#include <set>
#include <vector>

#include "dap/autograd.hpp"
#include "dap/prompting.hpp"

namespace dap {

struct LossWeights {
  double w_glb = 1.0;
  double w_lcl = 0.1;
  double w_seg = 1.0;

  void validate() const {
    require(w_glb >= 0 && w_lcl >= 0 && w_seg >= 0, "loss weights must be >= 0");
  }
};

template <typename T>
ag::Var<T> scalar_leaf(ag::Tape<T>& tape, T v) {
  Mat<T> m(1, 1);
  m(0, 0) = v;
  return tape.leaf(std::move(m), false);
}

// Batch texts j with a class set different from sample i's are i's negatives;
// the positive pair sits on the diagonal. With `literal_denominator` the
// denominator sums over negatives only, as the equation is written.
inline MaskGrid contrastive_denominator_mask(const std::vector<std::set<int>>& class_sets,
                                             bool literal_denominator) {
  const auto n = static_cast<Eigen::Index>(class_sets.size());
  MaskGrid mask = MaskGrid::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) {
        mask(i, j) = literal_denominator ? 0 : 1;
      } else {
        mask(i, j) = class_sets[static_cast<std::size_t>(i)] !=
                             class_sets[static_cast<std::size_t>(j)]
                         ? 1
                         : 0;
      }
    }
  }
  return mask;
}

// Cross-modal global contrastive loss over a batch: rows are the (prompted)
// [IMG] embeddings, one per sample, aligned with their [CLS] rows.
template <typename T>
ag::Var<T> global_contrastive(ag::Tape<T>& tape, ag::Var<T> img_tokens, ag::Var<T> cls_tokens,
                              const std::vector<std::set<int>>& class_sets, T temperature,
                              bool literal_denominator = false, bool symmetric = false) {
  const Eigen::Index n = img_tokens.rows();
  require(n >= 2, "global contrastive loss needs a batch of at least 2");
  require_dims(cls_tokens.rows() == n, "image/text batch size mismatch");
  require_dims(static_cast<Eigen::Index>(class_sets.size()) == n, "class set count mismatch");
  if (temperature <= T(0)) throw ConfigError("temperature must be > 0");

  const MaskGrid mask = contrastive_denominator_mask(class_sets, literal_denominator);
  ag::Var<T> img_n = ag::row_normalize(tape, img_tokens);
  ag::Var<T> cls_n = ag::row_normalize(tape, cls_tokens);
  ag::Var<T> sims = ag::matmul_nt(tape, img_n, cls_n);  // sims(i, j) = cos(IMG_i, CLS_j)
  ag::Var<T> loss = ag::info_nce_rows(tape, sims, mask, temperature);
  if (symmetric) {
    ag::Var<T> sims_t = ag::matmul_nt(tape, cls_n, img_n);
    ag::Var<T> loss_t = ag::info_nce_rows(tape, sims_t, mask, temperature);
    loss = ag::affine(tape, ag::add(tape, loss, loss_t), T(0.5), T(0));
  }
  return loss;
}

template <typename T>
struct LocalLossResult {
  ag::Var<T> loss;
  bool skipped = false;  // FG was empty; loss is a zero constant
};

// Per-sample FG/BG contrast: pull FG patch tokens toward [CLS], push BG away.
template <typename T>
LocalLossResult<T> local_contrastive(ag::Tape<T>& tape, const FgBgPartition<T>& partition,
                                     ag::Var<T> patch_tokens, ag::Var<T> cls, T temperature) {
  if (temperature <= T(0)) throw ConfigError("temperature must be > 0");
  const Eigen::Index n = patch_tokens.rows();
  if (partition.bg_indices.empty())
    throw NumericError("local contrastive: degenerate partition with empty BG");
  if (partition.fg_indices.empty())
    return {scalar_leaf(tape, T(0)), true};
  ag::Var<T> sims = ag::matmul_nt(tape, ag::row_normalize(tape, patch_tokens),
                                  ag::row_normalize(tape, cls));
  return {ag::local_nce(tape, sims, partition.fg_mask(n), temperature), false};
}

// Soft Dice: 1 - (2 sum(p t) + eps) / (sum p + sum t + eps). Inputs must lie
// in [0,1]; shapes must already match (the pseudo-label is upsampled first).
template <typename T>
ag::Var<T> dice_loss(ag::Tape<T>& tape, ag::Var<T> pred, ag::Var<T> target, T eps = T(1)) {
  require_dims(pred.rows() == target.rows() && pred.cols() == target.cols(),
               "dice: shape mismatch");
  auto in_unit = [](const Mat<T>& m) {
    return m.minCoeff() >= T(0) && m.maxCoeff() <= T(1);
  };
  if (!in_unit(pred.val()) || !in_unit(target.val()))
    throw NumericError("dice: values outside [0,1]");
  ag::Var<T> inter = ag::sum(tape, ag::hadamard(tape, pred, target));
  ag::Var<T> num = ag::affine(tape, inter, T(2), eps);
  ag::Var<T> den = ag::affine(tape, ag::add(tape, ag::sum(tape, pred), ag::sum(tape, target)),
                              T(1), eps);
  return ag::affine(tape, ag::div_elem(tape, num, den), T(-1), T(1));
}

// L = w_glb * glb + w_lcl * lcl + w_seg * seg
template <typename T>
ag::Var<T> total_loss(ag::Tape<T>& tape, ag::Var<T> glb, ag::Var<T> lcl, ag::Var<T> seg,
                      const LossWeights& weights) {
  weights.validate();
  const char* names[3] = {"global", "local", "seg"};
  const ag::Var<T>* comps[3] = {&glb, &lcl, &seg};
  for (int i = 0; i < 3; ++i)
    if (!std::isfinite(comps[i]->val()(0, 0)))
      throw NumericError(std::string("non-finite ") + names[i] + " loss component");
  ag::Var<T> acc = ag::affine(tape, glb, static_cast<T>(weights.w_glb), T(0));
  acc = ag::add(tape, acc, ag::affine(tape, lcl, static_cast<T>(weights.w_lcl), T(0)));
  return ag::add(tape, acc, ag::affine(tape, seg, static_cast<T>(weights.w_seg), T(0)));
}

}  // namespace dap
