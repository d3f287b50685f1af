#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "fsfnet/png_io.hpp"
#include "fsfnet/train.hpp"

namespace fsfnet::plot {

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
};

// Minimal software canvas: white background, Bresenham lines, filled
// rectangles, and a built-in 5x7 uppercase bitmap font.
class Canvas {
 public:
  Canvas(int height, int width);

  int height() const { return img_.h; }
  int width() const { return img_.w; }

  void set(int y, int x, Color c);
  void fill_rect(int y0, int x0, int y1, int x1, Color c);
  void line(int y0, int x0, int y1, int x1, Color c);
  // Draws text with its top-left corner at (y, x); lowercase folds to
  // uppercase, unknown glyphs render as blanks. Returns x past the text.
  int text(int y, int x, const std::string& s, Color c, int scale = 1);

  void save(const std::string& path) const;

 private:
  ImageU8 img_;
};

// Loss curves (total and the three pyramid terms) over training steps.
void render_history(const std::vector<HistoryRow>& history,
                    const std::string& out_png);

// Per-class IoU bars from an evaluation report, annotated with mean IoU and
// pixel accuracy. Classes absent from the report (null IoU) are marked.
void render_report(const nlohmann::json& report, const std::string& out_png);

}  // namespace fsfnet::plot
