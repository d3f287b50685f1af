#pragma once

#include <cstdint>
#include <vector>

#include "fsfnet/tensor.hpp"

namespace fsfnet {

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0;  // focal lengths, pixels
  double cx = 0.0, cy = 0.0;  // principal point, pixels

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) {
      fail("CameraIntrinsics: focal lengths must be positive");
    }
  }
};

/// Metric depth in meters, row-major (height, width). A pixel with
/// valid[i] == 0 carries no measurement; valid depths are strictly > 0.
struct DepthMap {
  int h = 0;
  int w = 0;
  std::vector<double> depth;
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(int h_, int w_) : h(h_), w(w_) {
    if (h_ < 1 || w_ < 1) fail("DepthMap: extents must be >= 1");
    depth.assign(static_cast<std::size_t>(h_) * w_, 0.0);
    valid.assign(static_cast<std::size_t>(h_) * w_, 0);
  }

  double& at(int y, int x) { return depth[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const {
    return depth[static_cast<std::size_t>(y) * w + x];
  }
  bool is_valid(int y, int x) const {
    return valid[static_cast<std::size_t>(y) * w + x] != 0;
  }
  void set(int y, int x, double d) {
    depth[static_cast<std::size_t>(y) * w + x] = d;
    valid[static_cast<std::size_t>(y) * w + x] = 1;
  }
};

/// Unit surface normals per pixel, (1, h, w, 3); valid mirrors DepthMap.
/// Normals are oriented toward the camera (n . P < 0 for the pixel's
/// back-projected point P).
struct NormalMap {
  Tensor<double> n;
  std::vector<std::uint8_t> valid;
};

/// Inverse depth min-max normalized to [0,1] over valid pixels; invalid
/// pixels are 0. A constant-depth map normalizes to all zeros. Throws when
/// no pixel is valid.
Tensor<double> depth_to_disparity(const DepthMap& d);

/// Central-difference normals of the back-projected point cloud. A pixel
/// needs all four axis neighbors valid (borders never qualify).
NormalMap estimate_normals(const DepthMap& d, const CameraIntrinsics& k);

/// 3-channel geometric encoding, (1, h, w, 3): normalized disparity,
/// height along the gravity-up axis (camera +y) shifted to minimum 0 and
/// normalized, and angle between normal and gravity-up scaled from
/// [0, 180 degrees] to [0,1]. Gravity-up is fixed to camera +y; pixels
/// without a valid depth (or, for the angle channel, a valid normal) are 0.
Tensor<double> encode_hha(const DepthMap& d, const CameraIntrinsics& k);

}  // namespace fsfnet
