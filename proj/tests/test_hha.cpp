#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "fsfnet/hha.hpp"
#include "fsfnet/png_io.hpp"
#include "fsfnet/rng.hpp"

using namespace fsfnet;

namespace {

CameraIntrinsics default_k() {
  CameraIntrinsics k;
  k.fx = 16.0;
  k.fy = 16.0;
  k.cx = 7.5;
  k.cy = 7.5;
  return k;
}

DepthMap constant_plane(int h, int w, double z) {
  DepthMap d(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) d.set(y, x, z);
  }
  return d;
}

// Plane z = z0 + y * slope in camera space, rendered through the intrinsics:
// z(u,v) = z0 / (1 - slope * (v - cy) / fy).
DepthMap inclined_plane(int h, int w, const CameraIntrinsics& k, double z0,
                        double slope) {
  DepthMap d(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double denom = 1.0 - slope * (y - k.cy) / k.fy;
      if (denom <= 0.05) continue;
      d.set(y, x, z0 / denom);
    }
  }
  return d;
}

// Plane of constant camera-space height y = level (level < 0 keeps depths
// positive when cy sits below the image).
DepthMap floor_plane(int h, int w, const CameraIntrinsics& k, double level) {
  DepthMap d(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double denom = (y - k.cy) / k.fy;
      const double z = level / denom;
      if (z > 0.0 && std::isfinite(z)) d.set(y, x, z);
    }
  }
  return d;
}

}  // namespace

TEST_CASE("disparity of a constant plane collapses to zero") {
  auto d = constant_plane(8, 8, 2.5);
  auto disp = depth_to_disparity(d);
  for (std::int64_t i = 0; i < disp.numel(); ++i) CHECK(disp.data()[i] == 0.0);
}

TEST_CASE("disparity maps near to one and far to zero") {
  DepthMap d(1, 2);
  d.set(0, 0, 1.0);
  d.set(0, 1, 2.0);
  auto disp = depth_to_disparity(d);
  CHECK(disp.at(0, 0, 0, 0) == 1.0);
  CHECK(disp.at(0, 0, 1, 0) == 0.0);
}

TEST_CASE("disparity is unchanged by uniform depth scaling") {
  Rng rng(60);
  DepthMap a(6, 7);
  DepthMap b(6, 7);
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 7; ++x) {
      if (rng.coin(0.15)) continue;  // leave some pixels invalid
      const double z = rng.uniform(0.5, 4.0);
      a.set(y, x, z);
      b.set(y, x, 2.0 * z);
    }
  }
  auto da = depth_to_disparity(a);
  auto db = depth_to_disparity(b);
  CHECK(da.same_values(db));
}

TEST_CASE("disparity requires at least one valid pixel") {
  DepthMap d(4, 4);
  CHECK_THROWS_AS(depth_to_disparity(d), std::invalid_argument);
}

TEST_CASE("disparity is antitone in raw depth") {
  Rng rng(61);
  DepthMap d(8, 8);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) d.set(y, x, rng.uniform(0.3, 5.0));
  }
  auto disp = depth_to_disparity(d);
  for (int i = 0; i < 64; ++i) {
    for (int j = 0; j < 64; ++j) {
      const double di = d.depth[i], dj = d.depth[j];
      if (di < dj) {
        CHECK(disp.data()[i] >= disp.data()[j]);
      }
    }
  }
}

TEST_CASE("normals of a fronto-parallel plane point at the camera") {
  auto k = default_k();
  auto d = constant_plane(16, 16, 3.0);
  auto nm = estimate_normals(d, k);
  for (int y = 1; y < 15; ++y) {
    for (int x = 1; x < 15; ++x) {
      REQUIRE(nm.valid[static_cast<std::size_t>(y) * 16 + x] == 1);
      CHECK(nm.n.at(0, y, x, 0) == 0.0);
      CHECK(nm.n.at(0, y, x, 1) == 0.0);
      CHECK(nm.n.at(0, y, x, 2) == -1.0);
    }
  }
  // Borders have no full neighborhood.
  CHECK(nm.valid[0] == 0);
  CHECK(nm.valid[15] == 0);
}

TEST_CASE("normals are unit length and camera-facing on a tilted scene") {
  auto k = default_k();
  auto d = inclined_plane(16, 16, k, 2.0, 0.8);
  auto nm = estimate_normals(d, k);
  int checked = 0;
  for (int y = 1; y < 15; ++y) {
    for (int x = 1; x < 15; ++x) {
      if (!nm.valid[static_cast<std::size_t>(y) * 16 + x]) continue;
      double len2 = 0.0, dot = 0.0;
      const double z = d.at(y, x);
      const double p[3] = {(x - k.cx) / k.fx * z, (y - k.cy) / k.fy * z, z};
      for (int c = 0; c < 3; ++c) {
        const double nc = nm.n.at(0, y, x, c);
        len2 += nc * nc;
        dot += nc * p[c];
      }
      CHECK(std::abs(std::sqrt(len2) - 1.0) < 1e-6);
      CHECK(dot < 0.0);
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("a 45 degree plane yields the analytic normal within 2 degrees") {
  CameraIntrinsics k;
  k.fx = k.fy = 20.0;
  k.cx = k.cy = 7.5;
  auto d = inclined_plane(16, 16, k, 2.0, 1.0);
  auto nm = estimate_normals(d, k);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  const double want[3] = {0.0, inv_sqrt2, -inv_sqrt2};
  const double cos_2deg = std::cos(2.0 * M_PI / 180.0);
  int checked = 0;
  for (int y = 1; y < 15; ++y) {
    for (int x = 1; x < 15; ++x) {
      if (!nm.valid[static_cast<std::size_t>(y) * 16 + x]) continue;
      double dot = 0.0;
      for (int c = 0; c < 3; ++c) dot += nm.n.at(0, y, x, c) * want[c];
      CHECK(dot >= cos_2deg);
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("angle channel is 0 on a floor and one half on a wall") {
  CameraIntrinsics k;
  k.fx = k.fy = 8.0;
  k.cx = 7.5;
  k.cy = 16.5;  // principal point below the image so the floor stays in front
  auto floor = floor_plane(16, 16, k, -1.0);
  auto hha_floor = encode_hha(floor, k);
  for (int y = 1; y < 15; ++y) {
    for (int x = 1; x < 15; ++x) {
      REQUIRE(floor.is_valid(y, x));
      CHECK(std::abs(hha_floor.at(0, y, x, 2)) < 1e-3);
    }
  }

  auto wall = constant_plane(16, 16, 2.0);
  auto hha_wall = encode_hha(wall, default_k());
  for (int y = 1; y < 15; ++y) {
    for (int x = 1; x < 15; ++x) {
      CHECK(std::abs(hha_wall.at(0, y, x, 2) - 0.5) < 1e-3);
    }
  }
}

TEST_CASE("height channel ignores horizontal placement of the scene") {
  auto k = default_k();
  auto d = inclined_plane(16, 16, k, 1.5, 0.6);
  // Punch a fronto-parallel patch into the scene so two planes coexist.
  for (int y = 4; y < 9; ++y) {
    for (int x = 3; x < 8; ++x) d.set(y, x, 1.0);
  }
  auto base = encode_hha(d, k);
  CameraIntrinsics shifted = k;
  shifted.cx = k.cx - 3.0;  // x-translates every back-projected point
  auto moved = encode_hha(d, shifted);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      CHECK(base.at(0, y, x, 1) == moved.at(0, y, x, 1));
    }
  }
}

TEST_CASE("height channel spans exactly zero to one") {
  auto k = default_k();
  auto d = inclined_plane(16, 16, k, 1.5, 0.6);
  auto hha = encode_hha(d, k);
  double lo = 1e9, hi = -1e9;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      if (!d.is_valid(y, x)) continue;
      lo = std::min(lo, hha.at(0, y, x, 1));
      hi = std::max(hi, hha.at(0, y, x, 1));
    }
  }
  CHECK(lo == 0.0);
  CHECK(hi == 1.0);
}

TEST_CASE("all channels stay in range and invalid pixels are zero throughout") {
  auto k = default_k();
  Rng rng(62);
  DepthMap d(12, 12);
  for (int y = 0; y < 12; ++y) {
    for (int x = 0; x < 12; ++x) {
      if (rng.coin(0.2)) continue;
      d.set(y, x, rng.uniform(0.4, 6.0));
    }
  }
  auto hha = encode_hha(d, k);
  for (int y = 0; y < 12; ++y) {
    for (int x = 0; x < 12; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = hha.at(0, y, x, c);
        if (d.is_valid(y, x)) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
        } else {
          CHECK(v == 0.0);
        }
      }
    }
  }
}

TEST_CASE("angle channel is invariant under uniform scene scaling") {
  auto k = default_k();
  auto d = inclined_plane(16, 16, k, 2.0, 0.8);
  DepthMap scaled = d;
  for (auto& z : scaled.depth) z *= 3.7;
  auto a = encode_hha(d, k);
  auto b = encode_hha(scaled, k);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      CHECK(std::abs(a.at(0, y, x, 2) - b.at(0, y, x, 2)) < 1e-6);
    }
  }
}

TEST_CASE("PNG round trips preserve 8- and 16-bit payloads") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "fsfnet_png_test";
  fs::create_directories(dir);

  Rng rng(63);
  auto rgb = make_image_u8(9, 13, 3);
  for (auto& p : rgb.pix) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  write_png_u8((dir / "rgb.png").string(), rgb);
  auto rgb2 = read_png_u8((dir / "rgb.png").string(), 3);
  CHECK(rgb2.pix == rgb.pix);
  CHECK(rgb2.h == 9);
  CHECK(rgb2.w == 13);

  auto gray = make_image_u8(7, 5, 1);
  for (auto& p : gray.pix) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  write_png_u8((dir / "gray.png").string(), gray);
  auto gray2 = read_png_u8((dir / "gray.png").string(), 1);
  CHECK(gray2.pix == gray.pix);

  auto depth = make_image_u16(6, 8);
  for (auto& p : depth.pix) {
    p = static_cast<std::uint16_t>(rng.uniform_int(0, 65535));
  }
  write_png_gray16((dir / "depth.png").string(), depth);
  auto depth2 = read_png_gray16((dir / "depth.png").string());
  CHECK(depth2.pix == depth.pix);

  CHECK_THROWS_AS(read_png_gray16((dir / "rgb.png").string()),
                  std::invalid_argument);
  CHECK_THROWS_AS(read_png_u8((dir / "missing.png").string(), 3),
                  std::invalid_argument);
  fs::remove_all(dir);
}
