#include "plot.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>

namespace fsfnet::plot {

namespace {

// 5x7 glyphs, one byte per row, bit 4 = leftmost column.
const std::map<char, std::array<std::uint8_t, 7>>& font() {
  static const std::map<char, std::array<std::uint8_t, 7>> glyphs = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
      {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
      {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
      {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
  };
  return glyphs;
}

std::string format_number(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

Canvas::Canvas(int height, int width) : img_(make_image_u8(height, width, 3)) {
  std::fill(img_.pix.begin(), img_.pix.end(), std::uint8_t{255});
}

void Canvas::set(int y, int x, Color c) {
  if (y < 0 || y >= img_.h || x < 0 || x >= img_.w) return;
  img_.at(y, x, 0) = c.r;
  img_.at(y, x, 1) = c.g;
  img_.at(y, x, 2) = c.b;
}

void Canvas::fill_rect(int y0, int x0, int y1, int x1, Color c) {
  if (y0 > y1) std::swap(y0, y1);
  if (x0 > x1) std::swap(x0, x1);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) set(y, x, c);
  }
}

void Canvas::line(int y0, int x0, int y1, int x1, Color c) {
  const int dx = std::abs(x1 - x0);
  const int dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1;
  const int sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  int x = x0;
  int y = y0;
  while (true) {
    set(y, x, c);
    if (x == x1 && y == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y += sy;
    }
  }
}

int Canvas::text(int y, int x, const std::string& s, Color c, int scale) {
  for (const char raw : s) {
    const char ch =
        static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
    const auto it = font().find(ch);
    if (it != font().end()) {
      for (int ry = 0; ry < 7; ++ry) {
        for (int rx = 0; rx < 5; ++rx) {
          if (it->second[static_cast<std::size_t>(ry)] & (0x10 >> rx)) {
            fill_rect(y + ry * scale, x + rx * scale, y + (ry + 1) * scale - 1,
                      x + (rx + 1) * scale - 1, c);
          }
        }
      }
    }
    x += 6 * scale;
  }
  return x;
}

void Canvas::save(const std::string& path) const { write_png_u8(path, img_); }

void render_history(const std::vector<HistoryRow>& history,
                    const std::string& out_png) {
  if (history.empty()) fail("render_history: empty history");
  const int W = 720, H = 480;
  const int left = 64, right = 24, top = 40, bottom = 48;
  Canvas cv(H, W);

  const Color black{0, 0, 0};
  const Color grey{200, 200, 200};
  const Color total_c{0, 0, 0};
  const Color l1_c{204, 51, 51};
  const Color l2_c{34, 136, 51};
  const Color l3_c{51, 85, 204};

  double y_max = 0.0;
  for (const HistoryRow& r : history) {
    y_max = std::max({y_max, r.total_loss, r.l1, r.l2, r.l3});
  }
  if (y_max <= 0.0) y_max = 1.0;
  const int x_min = history.front().step;
  const int x_max = std::max(history.back().step, x_min + 1);

  const auto px = [&](double step) {
    return left + static_cast<int>(std::lround(
                      (step - x_min) / static_cast<double>(x_max - x_min) *
                      (W - left - right)));
  };
  const auto py = [&](double v) {
    return H - bottom -
           static_cast<int>(std::lround(v / y_max * (H - top - bottom)));
  };

  // Grid and tick labels.
  for (int t = 0; t <= 4; ++t) {
    const double v = y_max * t / 4.0;
    const int y = py(v);
    cv.line(y, left, y, W - right, grey);
    cv.text(y - 3, 4, format_number(v), black);
    const int step = x_min + (x_max - x_min) * t / 4;
    const int x = px(step);
    cv.line(top, x, H - bottom, x, grey);
    cv.text(H - bottom + 6, x - 8, std::to_string(step), black);
  }
  cv.line(H - bottom, left, H - bottom, W - right, black);
  cv.line(top, left, H - bottom, left, black);
  cv.text(H - 14, W / 2 - 12, "STEP", black);

  const auto curve = [&](auto get, Color c) {
    for (std::size_t i = 1; i < history.size(); ++i) {
      cv.line(py(get(history[i - 1])), px(history[i - 1].step),
              py(get(history[i])), px(history[i].step), c);
    }
    if (history.size() == 1) {
      cv.set(py(get(history[0])), px(history[0].step), c);
    }
  };
  curve([](const HistoryRow& r) { return r.total_loss; }, total_c);
  curve([](const HistoryRow& r) { return r.l1; }, l1_c);
  curve([](const HistoryRow& r) { return r.l2; }, l2_c);
  curve([](const HistoryRow& r) { return r.l3; }, l3_c);

  int x = left;
  x = cv.text(12, x, "TRAINING LOSS  ", black);
  x = cv.text(12, x, "TOTAL ", total_c);
  x = cv.text(12, x, "L1(1/2) ", l1_c);
  x = cv.text(12, x, "L2(1/4) ", l2_c);
  cv.text(12, x, "L3(1/8)", l3_c);

  cv.save(out_png);
}

void render_report(const nlohmann::json& report, const std::string& out_png) {
  if (!report.contains("per_class_iou") || !report["per_class_iou"].is_array()) {
    fail("render_report: report lacks a per_class_iou array");
  }
  const auto& iou = report["per_class_iou"];
  const int k = static_cast<int>(iou.size());
  if (k == 0) fail("render_report: no classes to draw");

  const int W = std::max(360, 72 + 56 * k), H = 400;
  const int left = 56, right = 24, top = 48, bottom = 56;
  Canvas cv(H, W);
  const Color black{0, 0, 0};
  const Color grey{200, 200, 200};
  const Color bar{60, 120, 200};
  const Color absent{160, 160, 160};

  const auto py = [&](double v) {
    return H - bottom -
           static_cast<int>(std::lround(v * (H - top - bottom)));
  };
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    cv.line(py(v), left, py(v), W - right, grey);
    cv.text(py(v) - 3, 10, format_number(v), black);
  }
  cv.line(H - bottom, left, H - bottom, W - right, black);
  cv.line(top, left, H - bottom, left, black);

  const int span = (W - left - right) / k;
  for (int c = 0; c < k; ++c) {
    const int x0 = left + c * span + span / 6;
    const int x1 = left + (c + 1) * span - span / 6;
    if (iou[static_cast<std::size_t>(c)].is_null()) {
      cv.fill_rect(H - bottom - 2, x0, H - bottom - 1, x1, absent);
      cv.text(H - bottom - 14, (x0 + x1) / 2 - 8, "N/A", absent);
    } else {
      const double v = iou[static_cast<std::size_t>(c)].get<double>();
      cv.fill_rect(py(v), x0, H - bottom - 1, x1, bar);
      cv.text(py(v) - 10, x0, format_number(v), black);
    }
    cv.text(H - bottom + 6, (x0 + x1) / 2 - 3, std::to_string(c), black);
  }
  cv.text(H - 14, W / 2 - 18, "CLASS", black);

  std::string title = "PER-CLASS IOU";
  if (report.contains("mean_iou") && report.contains("pixel_accuracy")) {
    title += "  MIOU=" + format_number(report["mean_iou"].get<double>()) +
             "  PIXEL ACC=" +
             format_number(report["pixel_accuracy"].get<double>());
  }
  cv.text(12, left, title, black);

  cv.save(out_png);
}

}  // namespace fsfnet::plot
