#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "dap/common.hpp"
#include "dap/io.hpp"
#include "dap/rng.hpp"

namespace dap {

struct SynthConfig {
  int image_size = 64;
  int patch_size = 8;
  int num_classes = 4;
  int lesions_min = 1;
  int lesions_max = 3;
  double area_frac_min = 0.01;
  double area_frac_max = 0.10;
  int templates_per_class = 10;
  double noise_level = 0.02;
  double contrast_floor = 0.15;
  int border_margin = 1;
  std::uint64_t seed = 0;

  void validate() const {
    require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
            "image_size must be divisible by patch_size");
    require(num_classes >= 1, "num_classes must be >= 1");
    require(lesions_min >= 1 && lesions_min <= lesions_max,
            "lesions_per_image range must satisfy 1 <= min <= max");
    require(lesions_max <= num_classes,
            "lesions_per_image max must not exceed num_classes (one class per lesion)");
    require(area_frac_min > 0.0, "lesion_area_fraction min must be > 0");
    require(area_frac_max < 0.5, "lesion_area_fraction max must be < 0.5");
    require(area_frac_min < area_frac_max, "lesion_area_fraction range is empty");
    require(area_frac_max / lesions_max > area_frac_min,
            "lesion_area_fraction range too narrow for lesions_per_image max");
    require(templates_per_class >= 1, "templates_per_class must be >= 1");
    require(noise_level >= 0.0, "noise_level must be >= 0");
    require(border_margin >= 0, "border_margin must be >= 0");
  }
};

inline void to_json(json& j, const SynthConfig& c) {
  j = json{{"image_size", c.image_size},
           {"patch_size", c.patch_size},
           {"num_classes", c.num_classes},
           {"lesions_per_image", {c.lesions_min, c.lesions_max}},
           {"lesion_area_fraction", {c.area_frac_min, c.area_frac_max}},
           {"templates_per_class", c.templates_per_class},
           {"noise_level", c.noise_level},
           {"contrast_floor", c.contrast_floor},
           {"border_margin", c.border_margin},
           {"seed", c.seed}};
}
inline void from_json(const json& j, SynthConfig& c) {
  c = SynthConfig{};
  if (j.contains("image_size")) j.at("image_size").get_to(c.image_size);
  if (j.contains("patch_size")) j.at("patch_size").get_to(c.patch_size);
  if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
  if (j.contains("lesions_per_image")) {
    c.lesions_min = j.at("lesions_per_image").at(0).get<int>();
    c.lesions_max = j.at("lesions_per_image").at(1).get<int>();
  }
  if (j.contains("lesion_area_fraction")) {
    c.area_frac_min = j.at("lesion_area_fraction").at(0).get<double>();
    c.area_frac_max = j.at("lesion_area_fraction").at(1).get<double>();
  }
  if (j.contains("templates_per_class")) j.at("templates_per_class").get_to(c.templates_per_class);
  if (j.contains("noise_level")) j.at("noise_level").get_to(c.noise_level);
  if (j.contains("contrast_floor")) j.at("contrast_floor").get_to(c.contrast_floor);
  if (j.contains("border_margin")) j.at("border_margin").get_to(c.border_margin);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

struct Sample {
  int id = 0;
  MatF image;                  // H x W in [0,1]
  std::vector<int> text_tokens;
  std::vector<int> class_ids;  // referenced class first
  std::vector<MaskGrid> masks; // aligned with class_ids
  long lesion_area = 0;        // pixels of the referenced-class mask
  int lesion_count = 0;

  int referenced_class() const { return class_ids.at(0); }
  const MaskGrid& gt_mask() const { return masks.at(0); }
};

// Whitespace word -> integer tokenizer built from the template bank; id 0 is
// the reserved unknown token.
class TemplateBank {
 public:
  static TemplateBank build(int num_classes, int templates_per_class) {
    require(num_classes >= 1 && templates_per_class >= 1, "bank needs classes and templates");
    static const std::vector<std::string> kNames = {
        "altheria", "borrelis", "cordatum", "dexolith",
        "eremnia",  "fulgara",  "gravenol", "hespirin"};
    static const std::vector<std::string> kShells = {
        "small % opacity is present",
        "focal % lesion noted",
        "there is a % abnormality",
        "imaging shows % involvement",
        "subtle % finding in the scan",
        "% texture detected",
        "evidence of % disease",
        "a compact % region appears",
        "the study reveals % signal",
        "suspected % process"};
    static const std::vector<std::string> kNumerals = {
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"};

    TemplateBank bank;
    bank.num_classes_ = num_classes;
    bank.templates_per_class_ = templates_per_class;
    bank.texts_.resize(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
      std::string name = kNames[static_cast<std::size_t>(c) % kNames.size()];
      if (c >= static_cast<int>(kNames.size()))
        name += " " + kNumerals[static_cast<std::size_t>(c / kNames.size()) % kNumerals.size()];
      for (int t = 0; t < templates_per_class; ++t) {
        std::string shell = kShells[static_cast<std::size_t>(t) % kShells.size()];
        std::string text;
        const auto pos = shell.find('%');
        text = shell.substr(0, pos) + name + shell.substr(pos + 1);
        if (t >= static_cast<int>(kShells.size()))
          text += " variant " +
                  kNumerals[static_cast<std::size_t>(t / kShells.size() - 1) % kNumerals.size()];
        bank.texts_[static_cast<std::size_t>(c)].push_back(text);
      }
    }
    // Assign word ids in first-seen order for reproducibility.
    bank.vocab_["<unk>"] = 0;
    for (const auto& cls : bank.texts_)
      for (const auto& text : cls)
        for (const auto& word : split(text))
          if (bank.vocab_.find(word) == bank.vocab_.end())
            bank.vocab_[word] = static_cast<int>(bank.vocab_.size());
    for (const auto& cls : bank.texts_) {
      bank.tokens_.emplace_back();
      for (const auto& text : cls) bank.tokens_.back().push_back(bank.encode(text));
    }
    return bank;
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& word : split(text)) {
      auto it = vocab_.find(word);
      ids.push_back(it == vocab_.end() ? 0 : it->second);
    }
    return ids;
  }

  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  int num_classes() const { return num_classes_; }
  int templates_per_class() const { return templates_per_class_; }
  const std::vector<std::string>& texts(int class_id) const {
    return texts_.at(static_cast<std::size_t>(class_id));
  }
  const std::vector<std::vector<int>>& tokens(int class_id) const {
    if (class_id < 0 || class_id >= num_classes_)
      throw ConfigError("unknown class_id " + std::to_string(class_id));
    return tokens_.at(static_cast<std::size_t>(class_id));
  }

 private:
  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
      if (ch == ' ') {
        if (!cur.empty()) words.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
  }

  int num_classes_ = 0;
  int templates_per_class_ = 0;
  std::vector<std::vector<std::string>> texts_;
  std::vector<std::vector<std::vector<int>>> tokens_;
  std::map<std::string, int> vocab_;
};

// One template's token sequence, drawn uniformly from the class's set.
inline std::vector<int> make_text(int class_id, Rng& rng, const TemplateBank& bank) {
  const auto& options = bank.tokens(class_id);
  if (options.empty()) throw ConfigError("template bank empty for class");
  return options[rng.uniform_int(options.size())];
}

namespace detail {

// Canonical smooth background shared by every image; individual images differ
// only by lesions and noise.
inline double background_at(int y, int x, int size) {
  const double u = static_cast<double>(x) / size;
  const double v = static_cast<double>(y) / size;
  return 0.30 + 0.12 * std::sin(M_PI * u + 0.6) * std::sin(M_PI * v + 0.3) +
         0.05 * std::cos(4.0 * M_PI * v + 1.1);
}

// Class textures: high-intensity fills with class-specific stripe patterns,
// distinguishable inside a single patch.
inline double lesion_texture_at(int class_id, int y, int x) {
  const double period = 4.0 + 2.0 * (class_id / 4);
  const double w = 2.0 * M_PI / period;
  double pattern = 0.0;
  switch (class_id % 4) {
    case 0: pattern = std::sin(w * x); break;
    case 1: pattern = std::sin(w * y); break;
    case 2: pattern = std::sin(w * (x + y) * 0.8); break;
    default: pattern = std::sin(w * x) * std::sin(w * y); break;
  }
  return 0.72 + 0.16 * pattern;
}

struct Ellipse {
  double cx, cy, ax, ay;
  bool contains(int y, int x) const {
    const double dx = (x - cx) / ax;
    const double dy = (y - cy) / ay;
    return dx * dx + dy * dy <= 1.0;
  }
};

}  // namespace detail

// Renders one sample from an rng stream. Lesions are non-overlapping
// axis-aligned ellipses, one class each; every per-class mask lands inside
// the configured area-fraction range.
inline Sample render_sample(Rng& rng, const SynthConfig& cfg,
                            const TemplateBank* shared_bank = nullptr) {
  cfg.validate();
  const int S = cfg.image_size;
  const double hw = static_cast<double>(S) * S;

  Sample sample;
  sample.lesion_count = rng.uniform_int(cfg.lesions_min, cfg.lesions_max);
  const int k = sample.lesion_count;

  std::vector<int> classes(static_cast<std::size_t>(cfg.num_classes));
  for (int c = 0; c < cfg.num_classes; ++c) classes[static_cast<std::size_t>(c)] = c;
  for (std::size_t i = classes.size() - 1; i > 0; --i)
    std::swap(classes[i], classes[rng.uniform_int(i + 1)]);
  classes.resize(static_cast<std::size_t>(k));

  // Per-lesion target fractions keep each mask inside the configured range
  // and the total below the range maximum.
  const double f_lo = cfg.area_frac_min * 1.15;
  const double f_hi = cfg.area_frac_max / k * 0.90;
  const long area_lo = static_cast<long>(std::ceil(cfg.area_frac_min * hw));
  const long area_hi = static_cast<long>(std::floor(cfg.area_frac_max / k * hw));

  MaskGrid occupied = MaskGrid::Zero(S, S);
  std::vector<MaskGrid> masks;
  for (int li = 0; li < k; ++li) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double area = rng.uniform(f_lo, f_hi) * hw;
      const double aspect = rng.uniform(0.6, 1.7);
      const double ax = std::sqrt(area * aspect / M_PI);
      const double ay = area / (M_PI * ax);
      const double m = cfg.border_margin;
      if (2 * (ax + m) + 2 >= S || 2 * (ay + m) + 2 >= S) continue;
      detail::Ellipse e{rng.uniform(m + ax + 1, S - 1 - m - ax - 1),
                        rng.uniform(m + ay + 1, S - 1 - m - ay - 1), ax, ay};
      MaskGrid mask = MaskGrid::Zero(S, S);
      long count = 0;
      bool overlap = false;
      const int y0 = std::max(0, static_cast<int>(std::floor(e.cy - e.ay)));
      const int y1 = std::min(S - 1, static_cast<int>(std::ceil(e.cy + e.ay)));
      const int x0 = std::max(0, static_cast<int>(std::floor(e.cx - e.ax)));
      const int x1 = std::min(S - 1, static_cast<int>(std::ceil(e.cx + e.ax)));
      for (int y = y0; y <= y1 && !overlap; ++y)
        for (int x = x0; x <= x1; ++x) {
          if (!e.contains(y, x)) continue;
          if (occupied(y, x)) {
            overlap = true;
            break;
          }
          mask(y, x) = 1;
          ++count;
        }
      if (overlap || count < area_lo || count > area_hi) continue;
      occupied = (occupied.array() | mask.array()).matrix();
      masks.push_back(std::move(mask));
      placed = true;
    }
    if (!placed)
      throw GenerationError("failed to place non-overlapping lesion within retry budget");
  }

  // Compose image: canonical background, textured lesions, then noise.
  Mat<double> img(S, S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) img(y, x) = detail::background_at(y, x, S);
  double bg_mean = img.mean();
  for (int li = 0; li < k; ++li) {
    double lesion_sum = 0.0;
    long lesion_n = 0;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if (masks[static_cast<std::size_t>(li)](y, x)) {
          img(y, x) = detail::lesion_texture_at(classes[static_cast<std::size_t>(li)], y, x);
          lesion_sum += img(y, x);
          ++lesion_n;
        }
    if (std::abs(lesion_sum / lesion_n - bg_mean) < cfg.contrast_floor)
      throw GenerationError("lesion texture violates the contrast floor");
  }
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      img(y, x) = std::clamp(img(y, x) + rng.gaussian(0.0, cfg.noise_level), 0.0, 1.0);

  // The text references one present class; that class leads the record.
  const int ref = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(k)));
  std::swap(classes[0], classes[static_cast<std::size_t>(ref)]);
  std::swap(masks[0], masks[static_cast<std::size_t>(ref)]);
  sample.class_ids.assign(classes.begin(), classes.end());
  sample.masks = std::move(masks);
  sample.lesion_area = sample.masks[0].cast<long>().sum();
  sample.image = img.cast<float>();

  if (shared_bank) {
    sample.text_tokens = make_text(sample.class_ids[0], rng, *shared_bank);
  } else {
    TemplateBank bank = TemplateBank::build(cfg.num_classes, cfg.templates_per_class);
    sample.text_tokens = make_text(sample.class_ids[0], rng, bank);
  }
  return sample;
}

// Deterministic function of (config, n); per-sample rng streams are split
// from the config seed, so generation order is irrelevant.
inline std::vector<Sample> generate_dataset(const SynthConfig& cfg, long n) {
  cfg.validate();
  require(n >= 0, "dataset size must be >= 0");
  TemplateBank bank = TemplateBank::build(cfg.num_classes, cfg.templates_per_class);
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    Sample s = render_sample(rng, cfg, &bank);
    s.id = static_cast<int>(i);
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---- on-disk dataset layout -------------------------------------------------
// dir/manifest.json: array of records; images/ and masks/ hold DAPG grids.

inline void save_dataset(const fs::path& dir, const std::vector<Sample>& samples,
                         const SynthConfig& cfg) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  json manifest = json::array();
  for (const auto& s : samples) {
    const std::string image_file = "images/" + std::to_string(s.id) + ".dapg";
    save_grid(dir / image_file, s.image);
    json mask_files = json::array();
    for (std::size_t m = 0; m < s.masks.size(); ++m) {
      const std::string mask_file =
          "masks/" + std::to_string(s.id) + "_c" + std::to_string(s.class_ids[m]) + ".dapg";
      save_grid(dir / mask_file, s.masks[m]);
      mask_files.push_back(mask_file);
    }
    manifest.push_back({{"id", s.id},
                        {"image_file", image_file},
                        {"mask_files", mask_files},
                        {"class_ids", s.class_ids},
                        {"text_tokens", s.text_tokens},
                        {"lesion_area", s.lesion_area},
                        {"lesion_count", s.lesion_count}});
  }
  save_json(dir / "manifest.json", manifest);
  json sidecar = {{"synth_config", cfg}, {"n", samples.size()}};
  save_json(dir / "dataset.json", sidecar);
}

inline std::vector<Sample> load_dataset(const fs::path& dir) {
  const json manifest = load_json(dir / "manifest.json");
  std::vector<Sample> samples;
  samples.reserve(manifest.size());
  for (const auto& rec : manifest) {
    Sample s;
    s.id = rec.at("id").get<int>();
    s.image = load_grid_f32(dir / rec.at("image_file").get<std::string>());
    rec.at("class_ids").get_to(s.class_ids);
    for (const auto& mf : rec.at("mask_files"))
      s.masks.push_back(load_grid_u8(dir / mf.get<std::string>()));
    rec.at("text_tokens").get_to(s.text_tokens);
    rec.at("lesion_area").get_to(s.lesion_area);
    rec.at("lesion_count").get_to(s.lesion_count);
    samples.push_back(std::move(s));
  }
  return samples;
}

inline SynthConfig load_dataset_config(const fs::path& dir) {
  return load_json(dir / "dataset.json").at("synth_config").get<SynthConfig>();
}

}  // namespace dap
