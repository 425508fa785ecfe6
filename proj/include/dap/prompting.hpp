#pragma once

#include <utility>
#include <vector>

#include "dap/autograd.hpp"
#include "dap/common.hpp"

namespace dap {

enum class PromptSource { relevance, corrupted, uniform, external };

inline const char* to_string(PromptSource s) {
  switch (s) {
    case PromptSource::relevance: return "relevance";
    case PromptSource::corrupted: return "corrupted";
    case PromptSource::uniform: return "uniform";
    case PromptSource::external: return "external";
  }
  return "unknown";
}

// Per-patch relevance weights in [0,1] on the encoder patch grid.
template <typename T>
struct PromptMap {
  Mat<T> weights;
  PromptSource source = PromptSource::relevance;

  void validate() const {
    for (Eigen::Index i = 0; i < weights.rows(); ++i)
      for (Eigen::Index j = 0; j < weights.cols(); ++j)
        if (!(weights(i, j) >= T(0) && weights(i, j) <= T(1)))
          throw NumericError("prompt weight outside [0,1]");
  }

  static PromptMap uniform(Eigen::Index rows, Eigen::Index cols) {
    return PromptMap{Mat<T>::Ones(rows, cols), PromptSource::uniform};
  }
};

// v_i <- phi_i * v_i for every patch token row; plain (non-graph) variant.
template <typename T>
Mat<T> apply_prompt(const Mat<T>& tokens, const PromptMap<T>& prompt) {
  require_dims(tokens.rows() == prompt.weights.size(),
               "apply_prompt: token count does not match prompt entries");
  Mat<T> out(tokens.rows(), tokens.cols());
  const Eigen::Index cols = prompt.weights.cols();
  for (Eigen::Index i = 0; i < tokens.rows(); ++i)
    out.row(i) = tokens.row(i) * prompt.weights(i / cols, i % cols);
  return out;
}

// Graph variant. Pass the prompt as a (tokens x 1) Var; gradients reach the
// prompt only when its leaf was created with requires_grad (it is detached
// during training).
template <typename T>
ag::Var<T> apply_prompt(ag::Tape<T>& tape, ag::Var<T> tokens, ag::Var<T> prompt_column) {
  require_dims(prompt_column.cols() == 1 && prompt_column.rows() == tokens.rows(),
               "apply_prompt: prompt column does not match token count");
  return ag::scale_rows(tape, tokens, prompt_column);
}

template <typename T>
struct FgBgPartition {
  std::vector<Eigen::Index> fg_indices;
  std::vector<Eigen::Index> bg_indices;
  T threshold_used = T(0);

  std::vector<char> fg_mask(Eigen::Index n) const {
    std::vector<char> m(static_cast<std::size_t>(n), 0);
    for (auto i : fg_indices) m[static_cast<std::size_t>(i)] = 1;
    return m;
  }
};

// Patch index i is FG iff phi_i > tau (row-major over the grid).
template <typename T>
FgBgPartition<T> select_fg_bg(const PromptMap<T>& prompt, T tau) {
  require(tau > T(0) && tau < T(1), "fg/bg threshold must lie in (0,1)");
  FgBgPartition<T> part;
  part.threshold_used = tau;
  const Eigen::Index n = prompt.weights.size();
  const Eigen::Index cols = prompt.weights.cols();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (prompt.weights(i / cols, i % cols) > tau)
      part.fg_indices.push_back(i);
    else
      part.bg_indices.push_back(i);
  }
  return part;
}

}  // namespace dap
