#include "fsfnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <set>

#include "fsfnet/png_io.hpp"
#include "fsfnet/rng.hpp"

namespace fsfnet {

namespace fs = std::filesystem;

void SceneConfig::validate() const {
  if (image_size < 16 || image_size % 16 != 0) {
    fail("SceneConfig: image_size must be a positive multiple of 16, got " +
         std::to_string(image_size));
  }
  if (num_classes < 2) {
    fail("SceneConfig: num_classes must be >= 2, got " +
         std::to_string(num_classes));
  }
  if (min_shapes < 1 || min_shapes > max_shapes) {
    fail("SceneConfig: need 1 <= min_shapes <= max_shapes");
  }
  if (max_shapes > num_classes) {
    fail("SceneConfig: max_shapes cannot exceed num_classes (scenes draw "
         "distinct classes)");
  }
  if (!(depth_min > 0.0) || !(depth_max > depth_min)) {
    fail("SceneConfig: depth range must satisfy 0 < depth_min < depth_max");
  }
  if (rgb_noise_sigma < 0.0) {
    fail("SceneConfig: rgb_noise_sigma must be >= 0");
  }
}

bool SceneShape::covers(int y, int x) const {
  const double dy = y - cy;
  const double dx = x - cx;
  if (ellipse) {
    const double ny = dy / ry;
    const double nx = dx / rx;
    return ny * ny + nx * nx <= 1.0;
  }
  return std::abs(dy) <= ry && std::abs(dx) <= rx;
}

CameraIntrinsics synthetic_intrinsics(int height, int width) {
  CameraIntrinsics k;
  k.fx = k.fy = static_cast<double>(std::max(height, width));
  k.cx = (width - 1) / 2.0;
  k.cy = (height - 1) / 2.0;
  return k;
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace

std::array<double, 3> class_color(int class_id, int num_classes) {
  if (class_id < 0 || class_id >= num_classes) {
    fail("class_color: class " + std::to_string(class_id) +
         " outside [0, " + std::to_string(num_classes) + ")");
  }
  // Golden-ratio hue steps keep small palettes well separated.
  const double hue = std::fmod(0.11 + class_id * 0.61803398874989485, 1.0);
  return hsv_to_rgb(hue, 0.65, 0.85);
}

std::array<double, 2> class_depth_band(const SceneConfig& cfg, int class_id) {
  if (class_id < 0 || class_id >= cfg.num_classes) {
    fail("class_depth_band: class " + std::to_string(class_id) +
         " outside [0, " + std::to_string(cfg.num_classes) + ")");
  }
  const double bw = (cfg.depth_max - cfg.depth_min) / cfg.num_classes;
  return {cfg.depth_min + class_id * bw, cfg.depth_min + (class_id + 1) * bw};
}

RgbdSample synth_scene(const SceneConfig& cfg, int index, SceneTrace* trace) {
  cfg.validate();
  if (index < 0) fail("synth_scene: index must be >= 0");
  Rng rng(splitmix64(cfg.seed) + static_cast<std::uint64_t>(index));
  const int n = cfg.image_size;

  SceneTrace local;
  SceneTrace& tr = trace ? *trace : local;
  tr.shapes.clear();
  tr.background_class =
      static_cast<int>(rng.uniform_int(0, cfg.num_classes - 1));
  tr.background_depth = cfg.depth_max;

  const int count =
      static_cast<int>(rng.uniform_int(cfg.min_shapes, cfg.max_shapes));
  // Shapes draw distinct classes, so disjoint per-class depth bands give
  // every overlap a strict depth order.
  std::vector<int> classes(static_cast<std::size_t>(cfg.num_classes));
  std::iota(classes.begin(), classes.end(), 0);
  for (int i = 0; i < count; ++i) {
    const int j =
        static_cast<int>(rng.uniform_int(i, cfg.num_classes - 1));
    std::swap(classes[i], classes[j]);
  }

  const int r_lo = std::max(2, n / 10);
  const int r_hi = std::max(r_lo + 1, n / 3);
  for (int i = 0; i < count; ++i) {
    SceneShape sh;
    sh.class_id = classes[i];
    sh.ellipse = rng.coin();
    sh.cy = static_cast<int>(rng.uniform_int(0, n - 1));
    sh.cx = static_cast<int>(rng.uniform_int(0, n - 1));
    sh.ry = static_cast<int>(rng.uniform_int(r_lo, r_hi));
    sh.rx = static_cast<int>(rng.uniform_int(r_lo, r_hi));
    const auto band = class_depth_band(cfg, sh.class_id);
    const double margin = 0.05 * (band[1] - band[0]);
    sh.depth = rng.uniform(band[0] + margin, band[1] - margin);
    tr.shapes.push_back(sh);
  }

  RgbdSample s;
  char stem[16];
  std::snprintf(stem, sizeof stem, "%06d", index);
  s.stem = stem;
  s.depth = DepthMap(n, n);
  s.labels = LabelMap(1, n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double z = tr.background_depth;
      int label = tr.background_class;
      for (const SceneShape& sh : tr.shapes) {
        if (sh.depth < z && sh.covers(y, x)) {
          z = sh.depth;
          label = sh.class_id;
        }
      }
      s.depth.set(y, x, z);
      s.labels.at(0, y, x) = label;
    }
  }

  s.rgb = Tensor<float>(Shape{1, n, n, 3});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const auto base = class_color(s.labels.at(0, y, x), cfg.num_classes);
      for (int c = 0; c < 3; ++c) {
        const double v = base[c] + cfg.rgb_noise_sigma * rng.normal();
        s.rgb.at(0, y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  s.hha = encode_hha(s.depth, synthetic_intrinsics(n, n)).cast<float>();
  return s;
}

void save_sample(const std::string& root, const RgbdSample& sample,
                 bool with_hha) {
  const int h = sample.height();
  const int w = sample.width();
  for (const char* sub : {"rgb", "depth", "label"}) {
    fs::create_directories(fs::path(root) / sub);
  }
  if (with_hha) fs::create_directories(fs::path(root) / "hha");

  auto quantize = [](float v) {
    return static_cast<std::uint8_t>(
        std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  };

  ImageU8 rgb = make_image_u8(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = quantize(sample.rgb.at(0, y, x, c));
    }
  }
  write_png_u8((fs::path(root) / "rgb" / (sample.stem + ".png")).string(), rgb);

  ImageU16 depth = make_image_u16(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!sample.depth.is_valid(y, x)) {
        depth.at(y, x) = 0;
        continue;
      }
      // 0 marks a missing measurement, so valid depths clamp to >= 1 mm.
      const long mm = std::lround(sample.depth.at(y, x) * 1000.0);
      depth.at(y, x) = static_cast<std::uint16_t>(std::clamp(mm, 1L, 65535L));
    }
  }
  write_png_gray16((fs::path(root) / "depth" / (sample.stem + ".png")).string(),
                   depth);

  ImageU8 label = make_image_u8(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::int32_t l = sample.labels.at(0, y, x);
      if (l < 0 || l > 255) {
        fail("save_sample: label " + std::to_string(l) +
             " does not fit an 8-bit image");
      }
      label.at(y, x, 0) = static_cast<std::uint8_t>(l);
    }
  }
  write_png_u8((fs::path(root) / "label" / (sample.stem + ".png")).string(),
               label);

  if (with_hha) {
    ImageU8 hha = make_image_u8(h, w, 3);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) hha.at(y, x, c) = quantize(sample.hha.at(0, y, x, c));
      }
    }
    write_png_u8((fs::path(root) / "hha" / (sample.stem + ".png")).string(),
                 hha);
  }
}

void save_dataset(const std::string& root, const SceneConfig& cfg, int count,
                  bool with_hha) {
  cfg.validate();
  if (count < 0) fail("save_dataset: count must be >= 0");
  for (int i = 0; i < count; ++i) {
    save_sample(root, synth_scene(cfg, i), with_hha);
  }
}

namespace {

std::set<std::string> png_stems(const fs::path& dir) {
  std::set<std::string> stems;
  if (!fs::is_directory(dir)) return stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      stems.insert(entry.path().stem().string());
    }
  }
  return stems;
}

}  // namespace

std::vector<RgbdSample> load_dataset(const std::string& root) {
  const fs::path base(root);
  const auto rgb_stems = png_stems(base / "rgb");
  const auto depth_stems = png_stems(base / "depth");
  const auto label_stems = png_stems(base / "label");
  const auto hha_stems = png_stems(base / "hha");
  const bool has_hha = !hha_stems.empty();

  std::set<std::string> all = rgb_stems;
  all.insert(depth_stems.begin(), depth_stems.end());
  all.insert(label_stems.begin(), label_stems.end());
  all.insert(hha_stems.begin(), hha_stems.end());

  std::vector<RgbdSample> samples;
  for (const std::string& stem : all) {
    for (const auto& [stems, sub] :
         {std::pair(&rgb_stems, "rgb"), std::pair(&depth_stems, "depth"),
          std::pair(&label_stems, "label")}) {
      if (!stems->count(stem)) {
        fail("dataset " + root + ": stem " + stem + " has no " + sub +
             "/ image");
      }
    }
    if (has_hha && !hha_stems.count(stem)) {
      fail("dataset " + root + ": stem " + stem + " has no hha/ image");
    }

    RgbdSample s;
    s.stem = stem;
    const ImageU8 rgb = read_png_u8((base / "rgb" / (stem + ".png")).string(), 3);
    const int h = rgb.h;
    const int w = rgb.w;
    s.rgb = Tensor<float>(Shape{1, h, w, 3});
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          s.rgb.at(0, y, x, c) = rgb.at(y, x, c) / 255.0f;
        }
      }
    }

    const ImageU16 depth =
        read_png_gray16((base / "depth" / (stem + ".png")).string());
    if (depth.h != h || depth.w != w) {
      fail("dataset " + root + ": stem " + stem +
           " depth extents differ from rgb");
    }
    s.depth = DepthMap(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::uint16_t mm = depth.at(y, x);
        if (mm > 0) s.depth.set(y, x, mm / 1000.0);
      }
    }

    const ImageU8 label =
        read_png_u8((base / "label" / (stem + ".png")).string(), 1);
    if (label.h != h || label.w != w) {
      fail("dataset " + root + ": stem " + stem +
           " label extents differ from rgb");
    }
    s.labels = LabelMap(1, h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        s.labels.at(0, y, x) = label.at(y, x, 0);
      }
    }

    if (has_hha) {
      const ImageU8 hha =
          read_png_u8((base / "hha" / (stem + ".png")).string(), 3);
      if (hha.h != h || hha.w != w) {
        fail("dataset " + root + ": stem " + stem +
             " hha extents differ from rgb");
      }
      s.hha = Tensor<float>(Shape{1, h, w, 3});
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          for (int c = 0; c < 3; ++c) {
            s.hha.at(0, y, x, c) = hha.at(y, x, c) / 255.0f;
          }
        }
      }
    } else {
      try {
        s.hha = encode_hha(s.depth, synthetic_intrinsics(h, w)).cast<float>();
      } catch (const std::invalid_argument& e) {
        fail("dataset " + root + ": stem " + stem + ": " + e.what());
      }
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

RgbdSample random_crop(const RgbdSample& s, int size, std::uint64_t seed) {
  const int h = s.height();
  const int w = s.width();
  if (size < 1 || size > h || size > w) {
    fail("random_crop: size " + std::to_string(size) +
         " does not fit inside " + std::to_string(h) + "x" +
         std::to_string(w));
  }
  Rng rng(seed);
  const int oy = static_cast<int>(rng.uniform_int(0, h - size));
  const int ox = static_cast<int>(rng.uniform_int(0, w - size));

  RgbdSample out;
  out.stem = s.stem;
  out.rgb = Tensor<float>(Shape{1, size, size, 3});
  out.hha = Tensor<float>(Shape{1, size, size, 3});
  out.depth = DepthMap(size, size);
  out.labels = LabelMap(1, size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.rgb.at(0, y, x, c) = s.rgb.at(0, oy + y, ox + x, c);
        out.hha.at(0, y, x, c) = s.hha.at(0, oy + y, ox + x, c);
      }
      if (s.depth.is_valid(oy + y, ox + x)) {
        out.depth.set(y, x, s.depth.at(oy + y, ox + x));
      }
      out.labels.at(0, y, x) = s.labels.at(0, oy + y, ox + x);
    }
  }
  return out;
}

RgbdSample horizontal_flip(const RgbdSample& s) {
  const int h = s.height();
  const int w = s.width();
  RgbdSample out;
  out.stem = s.stem;
  out.rgb = Tensor<float>(Shape{1, h, w, 3});
  out.hha = Tensor<float>(Shape{1, h, w, 3});
  out.depth = DepthMap(h, w);
  out.labels = LabelMap(1, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sx = w - 1 - x;
      for (int c = 0; c < 3; ++c) {
        out.rgb.at(0, y, x, c) = s.rgb.at(0, y, sx, c);
        out.hha.at(0, y, x, c) = s.hha.at(0, y, sx, c);
      }
      if (s.depth.is_valid(y, sx)) out.depth.set(y, x, s.depth.at(y, sx));
      out.labels.at(0, y, x) = s.labels.at(0, y, sx);
    }
  }
  return out;
}

LabelMap downsample_labels(const LabelMap& labels, int factor) {
  if (factor < 1) fail("downsample_labels: factor must be >= 1");
  if (labels.h % factor != 0 || labels.w % factor != 0) {
    fail("downsample_labels: extents " + std::to_string(labels.h) + "x" +
         std::to_string(labels.w) + " not divisible by " +
         std::to_string(factor));
  }
  LabelMap out(labels.n, labels.h / factor, labels.w / factor);
  for (int n = 0; n < labels.n; ++n) {
    for (int y = 0; y < out.h; ++y) {
      for (int x = 0; x < out.w; ++x) {
        out.at(n, y, x) = labels.at(n, y * factor, x * factor);
      }
    }
  }
  return out;
}

Batch make_batch(const std::vector<const RgbdSample*>& samples) {
  if (samples.empty()) fail("make_batch: no samples");
  const int h = samples[0]->height();
  const int w = samples[0]->width();
  const int b = static_cast<int>(samples.size());
  Batch batch;
  batch.rgb = Tensor<float>(Shape{b, h, w, 3});
  batch.hha = Tensor<float>(Shape{b, h, w, 3});
  batch.labels = LabelMap(b, h, w);
  for (int i = 0; i < b; ++i) {
    const RgbdSample& s = *samples[i];
    if (s.height() != h || s.width() != w) {
      fail("make_batch: sample " + s.stem + " extents differ");
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          batch.rgb.at(i, y, x, c) = s.rgb.at(0, y, x, c);
          batch.hha.at(i, y, x, c) = s.hha.at(0, y, x, c);
        }
        batch.labels.at(i, y, x) = s.labels.at(0, y, x);
      }
    }
  }
  return batch;
}

}  // namespace fsfnet
