#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hmdrn/rng.hpp"
#include "hmdrn/tensor.hpp"

namespace hmdrn {

namespace fs = std::filesystem;

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Images (8-bit RGB, PPM P6 on disk)
// ---------------------------------------------------------------------------

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) {
    return rgb[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }
};

inline void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            std::streamsize(img.rgb.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

namespace detail {

inline int ppm_token(std::istream& in) {
  // skips whitespace and '#' comments, returns the next integer
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value = -1;
  in >> value;
  return value;
}

}  // namespace detail

inline Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw DataError("not a P6 ppm: " + path.string());
  const int w = detail::ppm_token(in);
  const int h = detail::ppm_token(in);
  const int maxval = detail::ppm_token(in);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw DataError("unsupported ppm header: " + path.string());
  in.get();  // single whitespace before payload
  Image img;
  img.width = std::size_t(w);
  img.height = std::size_t(h);
  img.rgb.resize(img.width * img.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()),
          std::streamsize(img.rgb.size()));
  if (in.gcount() != std::streamsize(img.rgb.size()))
    throw DataError("truncated ppm payload: " + path.string());
  return img;
}

// Working representation for the preprocessing pipeline: floats in [0,1].
struct FloatImage {
  std::size_t width = 0, height = 0;
  std::vector<float> rgb;

  static FloatImage from(const Image& img) {
    FloatImage f;
    f.width = img.width;
    f.height = img.height;
    f.rgb.resize(img.rgb.size());
    for (std::size_t i = 0; i < img.rgb.size(); ++i)
      f.rgb[i] = float(img.rgb[i]) / 255.0f;
    return f;
  }

  Image quantize() const {
    Image img;
    img.width = width;
    img.height = height;
    img.rgb.resize(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) {
      const float v = std::clamp(rgb[i], 0.0f, 1.0f);
      img.rgb[i] = std::uint8_t(std::lround(v * 255.0f));
    }
    return img;
  }

  float& at(std::size_t x, std::size_t y, std::size_t c) {
    return rgb[(y * width + x) * 3 + c];
  }
  float at(std::size_t x, std::size_t y, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }
};

inline FloatImage bilinear_resize(const FloatImage& src, std::size_t out_w,
                                  std::size_t out_h) {
  FloatImage dst;
  dst.width = out_w;
  dst.height = out_h;
  dst.rgb.resize(out_w * out_h * 3);
  const float sx = float(src.width) / float(out_w);
  const float sy = float(src.height) / float(out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const float fy = std::max(0.0f, (float(y) + 0.5f) * sy - 0.5f);
    const std::size_t y0 = std::min(std::size_t(fy), src.height - 1);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const float wy = fy - float(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const float fx = std::max(0.0f, (float(x) + 0.5f) * sx - 0.5f);
      const std::size_t x0 = std::min(std::size_t(fx), src.width - 1);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const float wx = fx - float(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const float top =
            src.at(x0, y0, c) * (1 - wx) + src.at(x1, y0, c) * wx;
        const float bot =
            src.at(x0, y1, c) * (1 - wx) + src.at(x1, y1, c) * wx;
        dst.at(x, y, c) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

inline FloatImage crop(const FloatImage& src, std::size_t x0, std::size_t y0,
                       std::size_t w, std::size_t h) {
  if (x0 + w > src.width || y0 + h > src.height)
    throw DataError("crop out of bounds");
  FloatImage dst;
  dst.width = w;
  dst.height = h;
  dst.rgb.resize(w * h * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        dst.at(x, y, c) = src.at(x0 + x, y0 + y, c);
  return dst;
}

inline void hflip_inplace(FloatImage& img) {
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width / 2; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        std::swap(img.at(x, y, c), img.at(img.width - 1 - x, y, c));
}

// ---------------------------------------------------------------------------
// Dataset index
// ---------------------------------------------------------------------------

struct ClassEntry {
  std::string name;
  std::vector<fs::path> images;
};

using SplitIndex = std::vector<ClassEntry>;

struct DatasetIndex {
  fs::path root;
  SplitIndex train, val, test;

  const SplitIndex& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw DataError("unknown split: " + name);
  }
};

inline const char* kSplitNames[3] = {"train", "val", "test"};

// Scans root/{train,val,test}/<class>/*.ppm. Classes and files are sorted for
// a stable index; split class-name sets must be disjoint; every file must
// carry a well-formed header and a full payload.
inline DatasetIndex load_dataset(const fs::path& root) {
  DatasetIndex index;
  index.root = root;
  std::map<std::string, std::string> owner;  // class name -> split
  for (const char* split_name : kSplitNames) {
    const fs::path split_dir = root / split_name;
    if (!fs::is_directory(split_dir))
      throw DataError("missing split directory: " + split_dir.string());
    SplitIndex split;
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(split_dir))
      if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& dir : class_dirs) {
      ClassEntry entry;
      entry.name = dir.filename().string();
      auto [it, inserted] = owner.emplace(entry.name, split_name);
      if (!inserted)
        throw DataError("class '" + entry.name + "' appears in both " +
                        it->second + " and " + split_name);
      for (const auto& f : fs::directory_iterator(dir))
        if (f.is_regular_file()) entry.images.push_back(f.path());
      std::sort(entry.images.begin(), entry.images.end());
      if (entry.images.empty())
        throw DataError("class '" + entry.name + "' in split " + split_name +
                        " has no images");
      for (const auto& f : entry.images) (void)read_ppm(f);
      split.push_back(std::move(entry));
    }
    if (std::string(split_name) == "train")
      index.train = std::move(split);
    else if (std::string(split_name) == "val")
      index.val = std::move(split);
    else
      index.test = std::move(split);
  }
  return index;
}

// ---------------------------------------------------------------------------
// Synthetic fine-grained dataset
// ---------------------------------------------------------------------------

// Classes share an object silhouette and background statistics; they differ
// only in a small localized color-mosaic patch, position-jittered per image.
struct SynthConfig {
  std::size_t train_classes = 20, val_classes = 5, test_classes = 5;
  std::size_t images_per_class = 60;
  std::size_t image_size = 84;
  double bg_noise = 0.06;      // background texture scale
  std::size_t patch_size = 12; // discriminative patch side
  std::size_t patch_cells = 3; // patch is a cells x cells color mosaic
  double pose_jitter = 0.08;   // patch/silhouette jitter, fraction of size
  double patch_noise = 0.08;   // per-image appearance noise inside the patch
  double brightness_lo = 0.75, brightness_hi = 1.25;
  std::uint64_t seed = 1234;
  std::size_t oracle_tasks = 200;  // template-matching check at generation
};

struct SynthMeta {
  SynthConfig config;
  double oracle_accuracy = 0;
};

namespace detail {

struct PatchPattern {
  std::vector<float> rgb;  // cells*cells*3
};

inline PatchPattern make_pattern(Rng& rng, std::size_t cells) {
  PatchPattern p;
  p.rgb.resize(cells * cells * 3);
  for (auto& v : p.rgb) v = float(rng.uniform(0.05, 0.95));
  return p;
}

struct GeneratedImage {
  FloatImage img;
  std::size_t patch_x = 0, patch_y = 0;  // top-left of the pasted patch
};

inline GeneratedImage render_synth_image(const SynthConfig& cfg,
                                         const PatchPattern& pattern,
                                         Rng& rng) {
  const std::size_t s = cfg.image_size;
  FloatImage img;
  img.width = img.height = s;
  img.rgb.assign(s * s * 3, 0.0f);

  // background: mild gray with per-pixel texture noise
  const float base = float(rng.uniform(0.35, 0.55));
  for (auto& v : img.rgb)
    v = std::clamp(base + float(rng.normal(0.0, cfg.bg_noise)), 0.0f, 1.0f);

  // shared silhouette: axis-aligned ellipse with pose jitter
  const double jit = cfg.pose_jitter * double(s);
  const double cx = double(s) / 2 + rng.uniform(-jit, jit);
  const double cy = double(s) / 2 + rng.uniform(-jit, jit);
  const double rx = 0.32 * double(s) * rng.uniform(0.9, 1.1);
  const double ry = 0.26 * double(s) * rng.uniform(0.9, 1.1);
  const float body[3] = {float(0.62 + rng.uniform(-0.05, 0.05)),
                         float(0.55 + rng.uniform(-0.05, 0.05)),
                         float(0.42 + rng.uniform(-0.05, 0.05))};
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double dx = (double(x) - cx) / rx, dy = (double(y) - cy) / ry;
      if (dx * dx + dy * dy <= 1.0)
        for (std::size_t c = 0; c < 3; ++c)
          img.at(x, y, c) =
              0.85f * body[c] + 0.15f * img.at(x, y, c);
    }

  // class patch: color mosaic pasted near the silhouette center
  const std::size_t p = cfg.patch_size;
  const double px_center = cx + rng.uniform(-jit, jit);
  const double py_center = cy + rng.uniform(-jit, jit);
  const std::size_t px = std::size_t(std::clamp(
      px_center - double(p) / 2, 0.0, double(s - p)));
  const std::size_t py = std::size_t(std::clamp(
      py_center - double(p) / 2, 0.0, double(s - p)));
  const std::size_t cells = cfg.patch_cells;
  for (std::size_t y = 0; y < p; ++y)
    for (std::size_t x = 0; x < p; ++x) {
      const std::size_t cellx = std::min(x * cells / p, cells - 1);
      const std::size_t celly = std::min(y * cells / p, cells - 1);
      for (std::size_t c = 0; c < 3; ++c)
        img.at(px + x, py + y, c) = std::clamp(
            pattern.rgb[(celly * cells + cellx) * 3 + c] +
                float(rng.normal(0.0, cfg.patch_noise)),
            0.0f, 1.0f);
    }

  // global lighting factor
  const float bright = float(rng.uniform(cfg.brightness_lo, cfg.brightness_hi));
  for (auto& v : img.rgb) v = std::clamp(v * bright, 0.0f, 1.0f);

  return {std::move(img), px, py};
}

// Min sliding-window SSD between a patch template and an image.
inline double template_distance(const FloatImage& img,
                                const std::vector<float>& tmpl,
                                std::size_t p) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y + p <= img.height; ++y)
    for (std::size_t x = 0; x + p <= img.width; ++x) {
      double acc = 0;
      for (std::size_t ty = 0; ty < p && acc < best; ++ty)
        for (std::size_t tx = 0; tx < p; ++tx)
          for (std::size_t c = 0; c < 3; ++c) {
            const double d = double(img.at(x + tx, y + ty, c)) -
                             double(tmpl[(ty * p + tx) * 3 + c]);
            acc += d * d;
          }
      best = std::min(best, acc);
    }
  return best;
}

}  // namespace detail

// Deterministic generation: every class pattern and image stream is derived
// from (seed, split, class, image). Returns the index plus the accuracy of a
// patch-template nearest-neighbour classifier measured on test-split tasks.
inline SynthMeta generate_synthetic(const SynthConfig& cfg,
                                    const fs::path& out_dir) {
  const std::size_t counts[3] = {cfg.train_classes, cfg.val_classes,
                                 cfg.test_classes};
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string());

  // test-split images and patch locations are kept for the oracle
  std::vector<std::vector<detail::GeneratedImage>> test_images;

  std::size_t class_serial = 0;
  for (std::size_t split = 0; split < 3; ++split) {
    for (std::size_t cls = 0; cls < counts[split]; ++cls, ++class_serial) {
      char cls_name[32];
      std::snprintf(cls_name, sizeof cls_name, "class_%03zu", class_serial);
      const fs::path cls_dir = out_dir / kSplitNames[split] / cls_name;
      fs::create_directories(cls_dir, ec);
      if (ec) throw DataError("cannot create " + cls_dir.string());

      Rng pattern_rng = Rng::derive(cfg.seed, split, cls, 0xC1A55);
      const auto pattern = detail::make_pattern(pattern_rng, cfg.patch_cells);
      std::vector<detail::GeneratedImage> kept;
      for (std::size_t i = 0; i < cfg.images_per_class; ++i) {
        Rng img_rng = Rng::derive(cfg.seed, split, cls, i + 1);
        auto gen = detail::render_synth_image(cfg, pattern, img_rng);
        char img_name[32];
        std::snprintf(img_name, sizeof img_name, "img_%04zu.ppm", i);
        write_ppm(cls_dir / img_name, gen.img.quantize());
        if (split == 2) kept.push_back(std::move(gen));
      }
      if (split == 2) test_images.push_back(std::move(kept));
    }
  }

  // template-matching oracle on N-way 1-shot tasks from the test split
  SynthMeta meta;
  meta.config = cfg;
  const std::size_t way = std::min<std::size_t>(5, cfg.test_classes);
  const std::size_t queries = std::min<std::size_t>(5, cfg.images_per_class - 1);
  if (way >= 2 && cfg.oracle_tasks > 0) {
    std::size_t hits = 0, total = 0;
    for (std::size_t task = 0; task < cfg.oracle_tasks; ++task) {
      Rng rng = Rng::derive(cfg.seed, 0x07ac1e, task);
      std::vector<std::size_t> classes(test_images.size());
      for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = i;
      rng.shuffle(classes.begin(), classes.end());
      classes.resize(way);
      std::vector<std::vector<float>> templates;
      std::vector<std::vector<std::size_t>> query_ids(way);
      for (std::size_t c = 0; c < way; ++c) {
        const auto& imgs = test_images[classes[c]];
        std::vector<std::size_t> ids(imgs.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
        rng.shuffle(ids.begin(), ids.end());
        const auto& sup = imgs[ids[0]];
        const std::size_t p = cfg.patch_size;
        std::vector<float> tmpl(p * p * 3);
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            for (std::size_t ch = 0; ch < 3; ++ch)
              tmpl[(y * p + x) * 3 + ch] =
                  sup.img.at(sup.patch_x + x, sup.patch_y + y, ch);
        templates.push_back(std::move(tmpl));
        for (std::size_t q = 0; q < queries; ++q)
          query_ids[c].push_back(ids[q + 1]);
      }
      for (std::size_t c = 0; c < way; ++c)
        for (std::size_t qi : query_ids[c]) {
          const auto& img = test_images[classes[c]][qi].img;
          std::size_t best = 0;
          double best_d = std::numeric_limits<double>::infinity();
          for (std::size_t t = 0; t < way; ++t) {
            const double d =
                detail::template_distance(img, templates[t], cfg.patch_size);
            if (d < best_d) {
              best_d = d;
              best = t;
            }
          }
          hits += (best == c);
          ++total;
        }
    }
    meta.oracle_accuracy = double(hits) / double(total);
  }

  nlohmann::json j;
  j["oracle_accuracy"] = meta.oracle_accuracy;
  j["seed"] = cfg.seed;
  j["image_size"] = cfg.image_size;
  j["patch_size"] = cfg.patch_size;
  j["images_per_class"] = cfg.images_per_class;
  j["classes"] = {cfg.train_classes, cfg.val_classes, cfg.test_classes};
  std::ofstream meta_out(out_dir / "synth_meta.json");
  meta_out << j.dump(2) << "\n";
  return meta;
}

inline double load_oracle_accuracy(const fs::path& root) {
  std::ifstream in(root / "synth_meta.json");
  if (!in) throw DataError("missing synth_meta.json under " + root.string());
  nlohmann::json j;
  in >> j;
  return j.at("oracle_accuracy").get<double>();
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

struct ChannelStats {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stddev{0.25, 0.25, 0.25};
};

// Per-channel statistics over every raw training image.
inline ChannelStats compute_channel_stats(const SplitIndex& train) {
  ChannelStats stats;
  std::array<double, 3> sum{}, sumsq{};
  std::size_t count = 0;
  for (const auto& cls : train)
    for (const auto& path : cls.images) {
      const Image img = read_ppm(path);
      for (std::size_t i = 0; i < img.rgb.size(); i += 3)
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = double(img.rgb[i + c]) / 255.0;
          sum[c] += v;
          sumsq[c] += v * v;
        }
      count += img.rgb.size() / 3;
    }
  if (count == 0) throw DataError("no training pixels for statistics");
  for (std::size_t c = 0; c < 3; ++c) {
    stats.mean[c] = sum[c] / double(count);
    const double var = sumsq[c] / double(count) - stats.mean[c] * stats.mean[c];
    stats.stddev[c] = std::sqrt(std::max(var, 1e-8));
  }
  return stats;
}

struct AugmentConfig {
  double crop_scale_lo = 0.5, crop_scale_hi = 1.0;
  double aspect_lo = 3.0 / 4.0, aspect_hi = 4.0 / 3.0;
  double flip_prob = 0.5;
  double jitter_lo = 0.6, jitter_hi = 1.4;
  bool enabled = true;
};

namespace detail {

inline void color_jitter(FloatImage& img, Rng& rng, const AugmentConfig& cfg) {
  const float fb = float(rng.uniform(cfg.jitter_lo, cfg.jitter_hi));
  const float fc = float(rng.uniform(cfg.jitter_lo, cfg.jitter_hi));
  const float fsat = float(rng.uniform(cfg.jitter_lo, cfg.jitter_hi));
  double mean = 0;
  for (std::size_t i = 0; i < img.rgb.size(); i += 3)
    mean += 0.299 * img.rgb[i] + 0.587 * img.rgb[i + 1] + 0.114 * img.rgb[i + 2];
  mean /= double(img.rgb.size() / 3);
  for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
    float px[3];
    for (std::size_t c = 0; c < 3; ++c) px[c] = img.rgb[i + c] * fb;
    for (std::size_t c = 0; c < 3; ++c)
      px[c] = (px[c] - float(mean)) * fc + float(mean);
    const float gray = 0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2];
    for (std::size_t c = 0; c < 3; ++c) {
      px[c] = gray + (px[c] - gray) * fsat;
      img.rgb[i + c] = std::clamp(px[c], 0.0f, 1.0f);
    }
  }
}

template <typename T>
Tensor<T> image_to_tensor(const FloatImage& img, const ChannelStats& stats) {
  Tensor<T> t(Shape{3, img.height, img.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        t(c, y, x) = static_cast<T>(
            (double(img.at(x, y, c)) - stats.mean[c]) / stats.stddev[c]);
  return t;
}

}  // namespace detail

// Training-path preprocessing: random resized crop (area scale then aspect,
// ten placement attempts), horizontal flip, color jitter, normalization.
template <typename T>
Tensor<T> augment_train(const Image& raw, std::size_t out_size, Rng& rng,
                        const ChannelStats& stats,
                        const AugmentConfig& cfg = {}) {
  FloatImage img = FloatImage::from(raw);
  if (!cfg.enabled)
    return detail::image_to_tensor<T>(bilinear_resize(img, out_size, out_size),
                                      stats);
  FloatImage region;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double scale = rng.uniform(cfg.crop_scale_lo, cfg.crop_scale_hi);
    const double aspect =
        std::exp(rng.uniform(std::log(cfg.aspect_lo), std::log(cfg.aspect_hi)));
    const double area = scale * double(img.width * img.height);
    const std::size_t cw = std::size_t(std::lround(std::sqrt(area * aspect)));
    const std::size_t ch = std::size_t(std::lround(std::sqrt(area / aspect)));
    if (cw == 0 || ch == 0 || cw > img.width || ch > img.height) continue;
    const std::size_t x0 = rng.below(img.width - cw + 1);
    const std::size_t y0 = rng.below(img.height - ch + 1);
    region = crop(img, x0, y0, cw, ch);
    found = true;
  }
  if (!found) region = img;
  FloatImage resized = bilinear_resize(region, out_size, out_size);
  if (rng.uniform() < cfg.flip_prob) hflip_inplace(resized);
  detail::color_jitter(resized, rng, cfg);
  return detail::image_to_tensor<T>(resized, stats);
}

// Deterministic evaluation path: resize the shorter side to ceil(1.15*S),
// center crop SxS, normalize.
template <typename T>
Tensor<T> preprocess_eval(const Image& raw, std::size_t out_size,
                          const ChannelStats& stats) {
  FloatImage img = FloatImage::from(raw);
  const std::size_t target = std::size_t(std::ceil(1.15 * double(out_size)));
  std::size_t rw, rh;
  if (img.width <= img.height) {
    rw = target;
    rh = std::max<std::size_t>(
        target, std::size_t(std::lround(double(img.height) * double(target) /
                                        double(img.width))));
  } else {
    rh = target;
    rw = std::max<std::size_t>(
        target, std::size_t(std::lround(double(img.width) * double(target) /
                                        double(img.height))));
  }
  FloatImage resized = bilinear_resize(img, rw, rh);
  const std::size_t x0 = (rw - out_size) / 2, y0 = (rh - out_size) / 2;
  return detail::image_to_tensor<T>(crop(resized, x0, y0, out_size, out_size),
                                    stats);
}

}  // namespace hmdrn
