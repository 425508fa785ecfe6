#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "dap/model.hpp"
#include "dap/prompting.hpp"

namespace dap {

// One layer's attention maps and their gradients with respect to the
// matching score, per head.
template <typename T>
struct AttentionRecord {
  std::vector<Mat<T>> maps;   // heads entries, each tokens x tokens
  std::vector<Mat<T>> grads;  // same shapes

  void validate() const {
    require_dims(maps.size() == grads.size(), "attention record: map/grad count mismatch");
    for (std::size_t h = 0; h < maps.size(); ++h) {
      require_dims(maps[h].rows() == maps[h].cols() && maps[h].rows() == grads[h].rows() &&
                       maps[h].cols() == grads[h].cols(),
                   "attention record: shape mismatch");
      for (Eigen::Index i = 0; i < maps[h].rows(); ++i) {
        const T s = maps[h].row(i).sum();
        if (std::abs(s - T(1)) > T(1e-5))
          throw NumericError("attention row does not sum to 1");
      }
    }
  }
};

// Instrumentation: number of relevance extractions since process start.
// The evaluation path must never bump this (inference is prompt-free).
inline std::atomic<long>& relevance_extraction_count() {
  static std::atomic<long> count{0};
  return count;
}

// Gradient-weighted attention rollout on the [IMG] row:
//   R = I;  per layer:  Abar = mean_h max(grad_h . A_h, 0);  R += Abar * R
// Returns the raw (unnormalized) patch relevance row for [IMG].
template <typename T>
Mat<T> rollout_from_records(const std::vector<AttentionRecord<T>>& layers) {
  require(!layers.empty(), "rollout needs at least one layer");
  const Eigen::Index tokens = layers.front().maps.front().rows();
  Mat<T> R = Mat<T>::Identity(tokens, tokens);
  for (const auto& layer : layers) {
    Mat<T> abar = Mat<T>::Zero(tokens, tokens);
    for (std::size_t h = 0; h < layer.maps.size(); ++h)
      abar += layer.grads[h].cwiseProduct(layer.maps[h]).cwiseMax(T(0));
    abar /= static_cast<T>(layer.maps.size());
    R = R + Mat<T>(abar * R);
  }
  return R;
}

// Min-max normalization to [0,1]; a constant raw map becomes all-ones so a
// zero-information prompt reduces to the unprompted pass.
template <typename T>
Mat<T> minmax_normalize(const Mat<T>& raw) {
  const T lo = raw.minCoeff();
  const T hi = raw.maxCoeff();
  if (hi - lo <= T(0)) return Mat<T>::Ones(raw.rows(), raw.cols());
  return ((raw.array() - lo) / (hi - lo)).matrix();
}

// Pluggable interpretability backend. Only the gradient-weighted rollout
// rule ships; the interface exists so other map sources can be swapped in.
template <typename T>
class RelevanceBackend {
 public:
  virtual ~RelevanceBackend() = default;
  virtual std::string name() const = 0;
  virtual Mat<T> raw_map(const std::vector<AttentionRecord<T>>& layers) const = 0;
};

template <typename T>
class GradAttnRollout final : public RelevanceBackend<T> {
 public:
  std::string name() const override { return "grad_attn_rollout"; }
  Mat<T> raw_map(const std::vector<AttentionRecord<T>>& layers) const override {
    Mat<T> R = rollout_from_records(layers);
    return R.row(0).rightCols(R.cols() - 1);  // [IMG] row, patch columns
  }
};

namespace detail {

// Unprompted forward of both towers with attention recording, backward from
// the cosine matching score. Returns the per-layer records.
template <typename T>
struct MatchForward {
  T score = T(0);
  std::vector<AttentionRecord<T>> records;
};

template <typename T>
MatchForward<T> matching_backward(const TwoTowerModel<T>& model, const Mat<T>& image,
                                  const std::vector<int>& tokens, bool need_records) {
  ag::Tape<T> tape;
  ParamBinder<T> bind(tape, false);
  // The image leaf carries the gradient chain; parameters stay frozen.
  auto fwd = model.vision().forward(bind, {image}, {}, {}, need_records, true, need_records);
  ag::Var<T> img = ag::slice_rows(tape, fwd.tokens, 0, 1);
  ag::Var<T> cls = model.text().forward(bind, tokens, true);
  ag::Var<T> score = ag::matmul_nt(tape, ag::row_normalize(tape, img),
                                   ag::row_normalize(tape, cls));
  MatchForward<T> out;
  out.score = score.val()(0, 0);
  if (need_records) {
    tape.backward(score);
    for (const auto& probes : fwd.attention) {
      AttentionRecord<T> rec;
      rec.maps = probes->probs;
      rec.grads = probes->grads.empty()
                      ? std::vector<Mat<T>>(probes->probs.size(),
                                            Mat<T>::Zero(probes->seq, probes->seq))
                      : probes->grads;
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

}  // namespace detail

// Cosine matching score between [IMG] and [CLS] on the unprompted pass.
template <typename T>
T matching_score(const TwoTowerModel<T>& model, const Mat<T>& image,
                 const std::vector<int>& tokens) {
  return detail::matching_backward(model, image, tokens, false).score;
}

// The 2D disease-aware prompt: relevance propagation of the matching score
// through the image tower's attention, min-max normalized to [0,1].
template <typename T>
PromptMap<T> relevance_map(const TwoTowerModel<T>& model, const Mat<T>& image,
                           const std::vector<int>& tokens,
                           const RelevanceBackend<T>* backend = nullptr) {
  relevance_extraction_count().fetch_add(1, std::memory_order_relaxed);
  auto match = detail::matching_backward(model, image, tokens, true);
  GradAttnRollout<T> default_backend;
  const RelevanceBackend<T>* be = backend ? backend : &default_backend;
  Mat<T> raw = be->raw_map(match.records);
  const int g = model.vision().config().grid();
  require_dims(raw.size() == static_cast<Eigen::Index>(g) * g,
               "relevance map size does not match patch grid");
  Mat<T> grid = Eigen::Map<const Mat<T>>(raw.data(), g, g);
  PromptMap<T> out;
  out.weights = minmax_normalize(grid);
  out.source = PromptSource::relevance;
  return out;
}

// Flip the top-k% highest-valued pixels among those above the importance
// threshold (0.3) to zero. k in [0, 100].
template <typename T>
PromptMap<T> corrupt_prompt(const PromptMap<T>& prompt, double k_percent,
                            T importance_threshold = T(0.3)) {
  require(k_percent >= 0.0 && k_percent <= 100.0, "k_percent must be in [0, 100]");
  std::vector<std::pair<T, Eigen::Index>> important;
  const Eigen::Index cols = prompt.weights.cols();
  for (Eigen::Index i = 0; i < prompt.weights.size(); ++i) {
    const T v = prompt.weights(i / cols, i % cols);
    if (v > importance_threshold) important.emplace_back(v, i);
  }
  PromptMap<T> out = prompt;
  if (important.empty() || k_percent == 0.0) return out;
  std::sort(important.begin(), important.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const auto n_flip = static_cast<std::size_t>(
      std::llround(static_cast<double>(important.size()) * k_percent / 100.0));
  for (std::size_t i = 0; i < n_flip && i < important.size(); ++i) {
    const Eigen::Index idx = important[i].second;
    out.weights(idx / cols, idx % cols) = T(0);
  }
  out.source = PromptSource::corrupted;
  return out;
}

}  // namespace dap
