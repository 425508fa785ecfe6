#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dap/nn.hpp"

namespace dap {

struct VisionEncoderConfig {
  int image_size = 64;
  int patch_size = 8;
  int depth = 4;
  int width = 64;
  int heads = 4;
  double mlp_ratio = 2.0;
  bool use_positional = true;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }

  void validate() const {
    require(depth >= 1, "vision depth must be >= 1");
    require(width % heads == 0, "vision width must be divisible by heads");
    require(patch_size >= 1 && image_size % patch_size == 0,
            "image_size must be divisible by patch_size");
  }
};

struct TextEncoderConfig {
  int depth = 2;
  int width = 64;
  int heads = 4;
  int vocab_size = 256;
  int max_len = 77;
  double mlp_ratio = 2.0;

  void validate() const {
    require(depth >= 1, "text depth must be >= 1");
    require(width % heads == 0, "text width must be divisible by heads");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(max_len >= 1, "max_len must be >= 1");
  }
};

inline void to_json(json& j, const VisionEncoderConfig& c) {
  j = json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"depth", c.depth},
           {"width", c.width},           {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
           {"use_positional", c.use_positional}};
}
inline void from_json(const json& j, VisionEncoderConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("depth").get_to(c.depth);
  j.at("width").get_to(c.width);
  j.at("heads").get_to(c.heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("use_positional").get_to(c.use_positional);
}
inline void to_json(json& j, const TextEncoderConfig& c) {
  j = json{{"depth", c.depth},           {"width", c.width},     {"heads", c.heads},
           {"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"mlp_ratio", c.mlp_ratio}};
}
inline void from_json(const json& j, TextEncoderConfig& c) {
  j.at("depth").get_to(c.depth);
  j.at("width").get_to(c.width);
  j.at("heads").get_to(c.heads);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_len").get_to(c.max_len);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
}

// Final-layer tokens of one image in the shared embedding space.
template <typename T>
struct TokenBundle {
  Mat<T> img_token;     // 1 x shared width
  Mat<T> patch_tokens;  // n x shared width
  std::pair<int, int> grid_shape;

  struct LayerTrace {
    std::vector<Mat<T>> layer_inputs;  // V^l entering each block, layers 1..L
    std::vector<std::shared_ptr<ag::AttentionProbes<T>>> attention;
  };
  std::optional<LayerTrace> layer_trace;
};

template <typename T>
struct TextEmbedding {
  Mat<T> cls_token;  // 1 x shared width
};

template <typename T>
T cosine_sim(const Mat<T>& a, const Mat<T>& b) {
  require_dims(a.size() == b.size(), "cosine_sim: length mismatch");
  const T na = a.norm();
  const T nb = b.norm();
  if (!(na > T(0)) || !(nb > T(0)))
    throw NumericError("cosine_sim: undefined for zero vector");
  T c = (a.array() * b.array()).sum() / (na * nb);
  return std::min(T(1), std::max(T(-1), c));
}

// Resolves the prompt-depth presets to 1-based layer indices.
inline std::vector<int> resolve_prompt_layers(const std::string& preset, int depth) {
  std::vector<int> out;
  if (preset == "last") {
    out.push_back(depth);
  } else if (preset == "first") {
    out.push_back(1);
  } else if (preset == "first_half") {
    for (int l = 1; l <= depth / 2; ++l) out.push_back(l);
    if (out.empty()) out.push_back(1);
  } else if (preset == "last_half") {
    for (int l = depth / 2 + 1; l <= depth; ++l) out.push_back(l);
  } else if (preset == "full") {
    for (int l = 1; l <= depth; ++l) out.push_back(l);
  } else {
    throw ConfigError("unknown prompt layer preset: " + preset);
  }
  return out;
}

template <typename T>
class VisionEncoder {
 public:
  VisionEncoder(ParamStore<T>& store, VisionEncoderConfig cfg, int shared_width, Rng& rng)
      : cfg_(cfg), shared_width_(shared_width) {
    cfg_.validate();
    const Eigen::Index w = cfg_.width;
    const Eigen::Index pdim = static_cast<Eigen::Index>(cfg_.patch_size) * cfg_.patch_size;
    patch_embed_ = Linear<T>::create(store, "vision.patch_embed", pdim, w, rng);
    img_token_ = &store.add("vision.img_token", 1, w);
    init_trunc_normal(img_token_->value, rng, 0.02);
    pos_ = &store.add("vision.pos", cfg_.num_patches() + 1, w);
    init_trunc_normal(pos_->value, rng, 0.02);
    for (int l = 0; l < cfg_.depth; ++l)
      blocks_.push_back(EncoderBlock<T>::create(store, "vision.block" + std::to_string(l), w,
                                                cfg_.heads, cfg_.mlp_ratio, rng));
    ln_final_ = LayerNormP<T>::create(store, "vision.ln_final", w);
    proj_ = Linear<T>::create(store, "vision.proj", w, shared_width, rng);
  }

  const VisionEncoderConfig& config() const { return cfg_; }
  int shared_width() const { return shared_width_; }
  Eigen::Index seq_len() const { return cfg_.num_patches() + 1; }

  struct Forward {
    ag::Var<T> tokens;  // packed (batch * (n+1)) x shared width, [IMG] first per sample
    int batch = 0;
    Eigen::Index seq = 0;
    std::vector<ag::Var<T>> layer_inputs;
    std::vector<std::shared_ptr<ag::AttentionProbes<T>>> attention;
  };

  // Packs a batch of images into one graph. `prompts` is empty for the plain
  // forward pass, otherwise one patch-grid of weights per sample, applied to
  // patch rows (never [IMG]) at the entry of each layer in `prompt_layers`.
  Forward forward(ParamBinder<T>& bind, const std::vector<Mat<T>>& images,
                  const std::vector<Mat<T>>& prompts, const std::vector<int>& prompt_layers,
                  bool record_attention = false, bool frozen = false,
                  bool image_requires_grad = false) const {
    auto& tape = bind.tape();
    const int B = static_cast<int>(images.size());
    require(B >= 1, "vision forward: empty batch");
    const int g = cfg_.grid();
    const Eigen::Index n = cfg_.num_patches();
    const Eigen::Index P = cfg_.patch_size;
    const Eigen::Index seq = n + 1;
    if (!prompts.empty()) {
      require_dims(static_cast<int>(prompts.size()) == B, "prompt count != batch size");
      for (const auto& p : prompts)
        require_dims(p.rows() == g && p.cols() == g, "prompt grid does not match patch grid");
    }
    for (const auto& layer : prompt_layers)
      require(layer >= 1 && layer <= cfg_.depth, "prompt layer out of range");

    Mat<T> patches(static_cast<Eigen::Index>(B) * n, P * P);
    for (int b = 0; b < B; ++b) {
      const Mat<T>& im = images[static_cast<std::size_t>(b)];
      require_dims(im.rows() == cfg_.image_size && im.cols() == cfg_.image_size,
                   "image does not match configured size");
      for (Eigen::Index pr = 0; pr < g; ++pr)
        for (Eigen::Index pc = 0; pc < g; ++pc) {
          const Eigen::Index row = static_cast<Eigen::Index>(b) * n + pr * g + pc;
          for (Eigen::Index y = 0; y < P; ++y)
            patches.row(row).segment(y * P, P) = im.row(pr * P + y).segment(pc * P, P);
        }
    }

    ag::Var<T> x = patch_embed_.apply(bind, tape.leaf(std::move(patches), image_requires_grad),
                                      frozen);

    // Interleave the learned [IMG] token in front of each sample's patches.
    ag::Var<T> img_rows =
        ag::gather_rows(tape, bind(*img_token_, frozen), std::vector<Eigen::Index>(B, 0));
    ag::Var<T> packed = ag::concat_rows(tape, img_rows, x);
    std::vector<Eigen::Index> inter(static_cast<std::size_t>(B) * seq);
    for (int b = 0; b < B; ++b) {
      inter[static_cast<std::size_t>(b) * seq] = b;
      for (Eigen::Index i = 0; i < n; ++i)
        inter[static_cast<std::size_t>(b) * seq + 1 + i] = B + static_cast<Eigen::Index>(b) * n + i;
    }
    x = ag::permute_rows(tape, packed, std::move(inter));

    if (cfg_.use_positional) {
      std::vector<Eigen::Index> tiled(static_cast<std::size_t>(B) * seq);
      for (int b = 0; b < B; ++b)
        for (Eigen::Index i = 0; i < seq; ++i) tiled[static_cast<std::size_t>(b) * seq + i] = i;
      x = ag::add(tape, x, ag::gather_rows(tape, bind(*pos_, frozen), std::move(tiled)));
    }

    Forward fwd;
    fwd.batch = B;
    fwd.seq = seq;
    for (int l = 0; l < cfg_.depth; ++l) {
      const bool prompted = !prompts.empty() &&
                            std::find(prompt_layers.begin(), prompt_layers.end(), l + 1) !=
                                prompt_layers.end();
      if (prompted) {
        Mat<T> w(static_cast<Eigen::Index>(B) * seq, 1);
        for (int b = 0; b < B; ++b) {
          w(static_cast<Eigen::Index>(b) * seq, 0) = T(1);  // [IMG] carries no prompt entry
          const Mat<T>& phi = prompts[static_cast<std::size_t>(b)];
          for (Eigen::Index i = 0; i < n; ++i)
            w(static_cast<Eigen::Index>(b) * seq + 1 + i, 0) = phi(i / g, i % g);
        }
        x = ag::scale_rows(tape, x, tape.leaf(std::move(w), false));
      }
      fwd.layer_inputs.push_back(x);
      std::shared_ptr<ag::AttentionProbes<T>> rec;
      if (record_attention) rec = std::make_shared<ag::AttentionProbes<T>>();
      x = blocks_[static_cast<std::size_t>(l)].apply(bind, x, B, seq, frozen, rec);
      fwd.attention.push_back(std::move(rec));
    }
    x = ln_final_.apply(bind, x, frozen);
    fwd.tokens = proj_.apply(bind, x, frozen);
    return fwd;
  }

  TokenBundle<T> bundle_from(const Forward& fwd, int b, bool with_trace = false) const {
    const Eigen::Index seq = fwd.seq;
    TokenBundle<T> out;
    out.img_token = fwd.tokens.val().row(static_cast<Eigen::Index>(b) * seq);
    out.patch_tokens = fwd.tokens.val().middleRows(static_cast<Eigen::Index>(b) * seq + 1, seq - 1);
    out.grid_shape = {cfg_.grid(), cfg_.grid()};
    if (with_trace) {
      typename TokenBundle<T>::LayerTrace trace;
      for (const auto& li : fwd.layer_inputs) trace.layer_inputs.push_back(li.val());
      trace.attention = fwd.attention;
      out.layer_trace = std::move(trace);
    }
    return out;
  }

 private:
  VisionEncoderConfig cfg_;
  int shared_width_;
  Linear<T> patch_embed_;
  Param<T>* img_token_ = nullptr;
  Param<T>* pos_ = nullptr;
  std::vector<EncoderBlock<T>> blocks_;
  LayerNormP<T> ln_final_;
  Linear<T> proj_;
};

template <typename T>
class TextEncoder {
 public:
  TextEncoder(ParamStore<T>& store, TextEncoderConfig cfg, int shared_width, Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    const Eigen::Index w = cfg_.width;
    tok_embed_ = &store.add("text.tok_embed", cfg_.vocab_size, w);
    init_trunc_normal(tok_embed_->value, rng, 0.02);
    cls_token_ = &store.add("text.cls_token", 1, w);
    init_trunc_normal(cls_token_->value, rng, 0.02);
    pos_ = &store.add("text.pos", cfg_.max_len + 1, w);
    init_trunc_normal(pos_->value, rng, 0.02);
    for (int l = 0; l < cfg_.depth; ++l)
      blocks_.push_back(EncoderBlock<T>::create(store, "text.block" + std::to_string(l), w,
                                                cfg_.heads, cfg_.mlp_ratio, rng));
    ln_final_ = LayerNormP<T>::create(store, "text.ln_final", w);
    proj_ = Linear<T>::create(store, "text.proj", w, shared_width, rng);
  }

  const TextEncoderConfig& config() const { return cfg_; }

  // Builds the text tower for one token sequence; returns the projected
  // 1 x shared_width [CLS] row.
  ag::Var<T> forward(ParamBinder<T>& bind, const std::vector<int>& tokens,
                     bool frozen = false) const {
    auto& tape = bind.tape();
    if (static_cast<int>(tokens.size()) > cfg_.max_len)
      throw DimensionError("text length exceeds max_len; truncation is not performed");
    const Eigen::Index len = static_cast<Eigen::Index>(tokens.size());
    ag::Var<T> x = ag::concat_rows(tape, bind(*cls_token_, frozen),
                                   ag::embedding(tape, bind(*tok_embed_, frozen), tokens));
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(len) + 1);
    for (Eigen::Index i = 0; i <= len; ++i) idx[static_cast<std::size_t>(i)] = i;
    x = ag::add(tape, x, ag::gather_rows(tape, bind(*pos_, frozen), std::move(idx)));
    for (const auto& blk : blocks_) x = blk.apply(bind, x, 1, len + 1, frozen);
    x = ln_final_.apply(bind, x, frozen);
    x = proj_.apply(bind, x, frozen);
    return ag::slice_rows(tape, x, 0, 1);
  }

 private:
  TextEncoderConfig cfg_;
  Param<T>* tok_embed_ = nullptr;
  Param<T>* cls_token_ = nullptr;
  Param<T>* pos_ = nullptr;
  std::vector<EncoderBlock<T>> blocks_;
  LayerNormP<T> ln_final_;
  Linear<T> proj_;
};

// The two-tower VLM: one parameter store, both encoders, shared embedding.
template <typename T>
class TwoTowerModel {
 public:
  struct Config {
    VisionEncoderConfig vision;
    TextEncoderConfig text;
    int shared_width = 64;
  };

  TwoTowerModel(const Config& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    Rng rng(mix_seed(init_seed, 0x7077));
    vision_ = std::make_unique<VisionEncoder<T>>(store_, cfg.vision, cfg.shared_width, rng);
    text_ = std::make_unique<TextEncoder<T>>(store_, cfg.text, cfg.shared_width, rng);
  }

  const Config& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  VisionEncoder<T>& vision() { return *vision_; }
  const VisionEncoder<T>& vision() const { return *vision_; }
  TextEncoder<T>& text() { return *text_; }
  const TextEncoder<T>& text() const { return *text_; }

  // Inference-path encoders (fresh throwaway tape, no gradients).
  TokenBundle<T> encode_image(const Mat<T>& image, const Mat<T>* prompt = nullptr,
                              const std::vector<int>& prompt_layers = {},
                              bool with_trace = false) const {
    ag::Tape<T> tape;
    ParamBinder<T> bind(tape, false);
    std::vector<Mat<T>> prompts;
    if (prompt) prompts.push_back(*prompt);
    auto fwd = vision_->forward(bind, {image}, prompts,
                                prompt ? prompt_layers : std::vector<int>{}, with_trace);
    return vision_->bundle_from(fwd, 0, with_trace);
  }

  TextEmbedding<T> encode_text(const std::vector<int>& tokens) const {
    ag::Tape<T> tape;
    ParamBinder<T> bind(tape, false);
    return TextEmbedding<T>{text_->forward(bind, tokens).val()};
  }

 private:
  Config cfg_;
  ParamStore<T> store_;
  std::unique_ptr<VisionEncoder<T>> vision_;
  std::unique_ptr<TextEncoder<T>> text_;
};

template <typename T>
Mat<T> patch_norm_map(const TokenBundle<T>& bundle) {
  const auto [rows, cols] = bundle.grid_shape;
  require_dims(bundle.patch_tokens.rows() == static_cast<Eigen::Index>(rows) * cols,
               "patch token count does not match grid shape");
  Mat<T> grid(rows, cols);
  for (Eigen::Index i = 0; i < bundle.patch_tokens.rows(); ++i)
    grid(i / cols, i % cols) = bundle.patch_tokens.row(i).norm();
  return grid;
}

template <typename T>
void to_json(json& j, const typename TwoTowerModel<T>::Config& c) {
  j = json{{"vision", c.vision}, {"text", c.text}, {"shared_width", c.shared_width}};
}

}  // namespace dap
