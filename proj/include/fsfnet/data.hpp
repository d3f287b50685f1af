#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fsfnet/hha.hpp"
#include "fsfnet/tensor.hpp"

namespace fsfnet {

/// One RGB-D training example: color and geometry images in [0,1], metric
/// depth, and exact per-pixel labels (255 = ignore).
struct RgbdSample {
  std::string stem;
  Tensor<float> rgb;   // (1, h, w, 3)
  DepthMap depth;      // meters
  Tensor<float> hha;   // (1, h, w, 3)
  LabelMap labels;     // (1, h, w)

  int height() const { return labels.h; }
  int width() const { return labels.w; }
};

struct SceneConfig {
  int image_size = 64;
  int num_classes = 6;
  int min_shapes = 2;
  int max_shapes = 5;
  double depth_min = 0.5;  // meters
  double depth_max = 5.0;
  double rgb_noise_sigma = 0.02;
  std::uint64_t seed = 1;

  void validate() const;
};

/// What the generator actually placed, for occlusion and consistency tests.
struct SceneShape {
  int class_id = 0;
  double depth = 0.0;
  bool ellipse = false;
  int cy = 0, cx = 0;  // center, pixels
  int ry = 0, rx = 0;  // half extents, pixels

  bool covers(int y, int x) const;
};

struct SceneTrace {
  int background_class = 0;
  double background_depth = 0.0;
  std::vector<SceneShape> shapes;
};

/// Fixed pinhole model used for all synthetic scenes and for datasets whose
/// depth images come without calibration.
CameraIntrinsics synthetic_intrinsics(int height, int width);

/// Deterministic palette entry for a class, components in [0,1].
std::array<double, 3> class_color(int class_id, int num_classes);

/// Per-class depth band [lo, hi): equal slices of [depth_min, depth_max].
std::array<double, 2> class_depth_band(const SceneConfig& cfg, int class_id);

/// Renders one scene: a far background plane plus axis-aligned rectangles
/// and ellipses of distinct classes, each at a depth inside its class band,
/// labeled with exact nearest-surface occlusion. Pure function of
/// (cfg.seed, index).
RgbdSample synth_scene(const SceneConfig& cfg, int index,
                       SceneTrace* trace = nullptr);

/// Writes rgb/depth/label (and optionally hha) PNGs for one sample under
/// root/<kind>/<stem>.png. Depth is stored as 16-bit millimeters (0 =
/// missing), everything else as 8-bit.
void save_sample(const std::string& root, const RgbdSample& sample,
                 bool with_hha = false);

/// Materializes `count` generated scenes to disk in the directory layout
/// that load_dataset reads.
void save_dataset(const std::string& root, const SceneConfig& cfg, int count,
                  bool with_hha = false);

/// Loads every sample under root (parallel rgb/, depth/, label/ and optional
/// hha/ directories with matching stems), sorted by stem. When hha/ is
/// absent the geometric encoding is computed from depth on the fly.
std::vector<RgbdSample> load_dataset(const std::string& root);

/// One deterministic crop offset applied identically to all channels.
RgbdSample random_crop(const RgbdSample& s, int size, std::uint64_t seed);

/// Mirrors every channel left-right. The geometric encoding channels
/// (disparity, height, gravity angle) are invariant under this mirror, so
/// flipping the encoded image equals encoding the flipped scene.
RgbdSample horizontal_flip(const RgbdSample& s);

/// Nearest-neighbor label subsampling; each output pixel takes the label at
/// the top-left corner of its block.
LabelMap downsample_labels(const LabelMap& labels, int factor);

/// Batched views of equally sized samples, ready for the model.
struct Batch {
  Tensor<float> rgb;
  Tensor<float> hha;
  LabelMap labels;
};

Batch make_batch(const std::vector<const RgbdSample*>& samples);

}  // namespace fsfnet
