#include "fsfnet/hha.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace fsfnet {

namespace {

std::array<double, 3> back_project(const DepthMap& d, const CameraIntrinsics& k,
                                   int y, int x) {
  const double z = d.at(y, x);
  return {(x - k.cx) / k.fx * z, (y - k.cy) / k.fy * z, z};
}

// (v - min) / (max - min) over the masked values; constant input maps to 0.
void min_max_normalize(std::vector<double>& v,
                       const std::vector<std::uint8_t>& mask) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask[i]) continue;
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
  }
  const double range = hi - lo;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask[i]) {
      v[i] = 0.0;
    } else {
      v[i] = range > 0.0 ? (v[i] - lo) / range : 0.0;
    }
  }
}

int count_valid(const DepthMap& d) {
  int n = 0;
  for (auto m : d.valid) n += m != 0;
  return n;
}

}  // namespace

Tensor<double> depth_to_disparity(const DepthMap& d) {
  if (count_valid(d) == 0) {
    fail("depth_to_disparity: no valid pixels to normalize over");
  }
  std::vector<double> disp(d.depth.size(), 0.0);
  for (std::size_t i = 0; i < d.depth.size(); ++i) {
    if (!d.valid[i]) continue;
    if (!(d.depth[i] > 0.0)) {
      fail("depth_to_disparity: valid pixel with non-positive depth " +
           std::to_string(d.depth[i]));
    }
    disp[i] = 1.0 / d.depth[i];
  }
  min_max_normalize(disp, d.valid);
  Tensor<double> out(Shape{1, d.h, d.w, 1});
  for (std::size_t i = 0; i < disp.size(); ++i) out.data()[i] = disp[i];
  return out;
}

NormalMap estimate_normals(const DepthMap& d, const CameraIntrinsics& k) {
  k.validate();
  NormalMap out;
  out.n = Tensor<double>(Shape{1, d.h, d.w, 3});
  out.valid.assign(d.depth.size(), 0);
  for (int y = 1; y < d.h - 1; ++y) {
    for (int x = 1; x < d.w - 1; ++x) {
      if (!d.is_valid(y, x) || !d.is_valid(y, x - 1) || !d.is_valid(y, x + 1) ||
          !d.is_valid(y - 1, x) || !d.is_valid(y + 1, x)) {
        continue;
      }
      const auto px0 = back_project(d, k, y, x - 1);
      const auto px1 = back_project(d, k, y, x + 1);
      const auto py0 = back_project(d, k, y - 1, x);
      const auto py1 = back_project(d, k, y + 1, x);
      const std::array<double, 3> tx = {px1[0] - px0[0], px1[1] - px0[1],
                                        px1[2] - px0[2]};
      const std::array<double, 3> ty = {py1[0] - py0[0], py1[1] - py0[1],
                                        py1[2] - py0[2]};
      std::array<double, 3> n = {tx[1] * ty[2] - tx[2] * ty[1],
                                 tx[2] * ty[0] - tx[0] * ty[2],
                                 tx[0] * ty[1] - tx[1] * ty[0]};
      const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
      if (!(len > 0.0) || !std::isfinite(len)) continue;
      const auto p = back_project(d, k, y, x);
      double sign = (n[0] * p[0] + n[1] * p[1] + n[2] * p[2]) > 0.0 ? -1.0 : 1.0;
      for (int c = 0; c < 3; ++c) out.n.at(0, y, x, c) = sign * n[c] / len;
      out.valid[static_cast<std::size_t>(y) * d.w + x] = 1;
    }
  }
  return out;
}

Tensor<double> encode_hha(const DepthMap& d, const CameraIntrinsics& k) {
  k.validate();
  Tensor<double> disparity = depth_to_disparity(d);

  std::vector<double> height(d.depth.size(), 0.0);
  for (int y = 0; y < d.h; ++y) {
    for (int x = 0; x < d.w; ++x) {
      if (!d.is_valid(y, x)) continue;
      height[static_cast<std::size_t>(y) * d.w + x] = back_project(d, k, y, x)[1];
    }
  }
  min_max_normalize(height, d.valid);

  const NormalMap normals = estimate_normals(d, k);

  Tensor<double> out(Shape{1, d.h, d.w, 3});
  for (int y = 0; y < d.h; ++y) {
    for (int x = 0; x < d.w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * d.w + x;
      if (!d.is_valid(y, x)) continue;
      out.at(0, y, x, 0) = disparity.at(0, y, x, 0);
      out.at(0, y, x, 1) = height[i];
      if (normals.valid[i]) {
        // Angle against gravity-up (camera +y), 0 aligned, 1 anti-aligned.
        const double dot = std::clamp(normals.n.at(0, y, x, 1), -1.0, 1.0);
        out.at(0, y, x, 2) = std::acos(dot) / M_PI;
      }
    }
  }
  return out;
}

}  // namespace fsfnet
