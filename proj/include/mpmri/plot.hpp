// Rasterizer for the per-patient probability curve: two series over slice
// index, a threshold line, axes with numeric tick labels. No text beyond
// digits and a decimal point, drawn from a built-in 3x5 bitmap font.
#pragma once

#include <cmath>
#include <cstdio>
#include <string>

#include "mpmri/explain.hpp"

namespace mpmri {
namespace detail {

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr Rgb kWhite{255, 255, 255};
constexpr Rgb kBlack{30, 30, 30};
constexpr Rgb kGridGray{220, 220, 220};
constexpr Rgb kSeriesPz{31, 119, 180};
constexpr Rgb kSeriesCg{255, 127, 14};
constexpr Rgb kThreshold{200, 60, 60};

inline void put_pixel(RGBImage& img, int r, int c, Rgb color) {
  if (r < 0 || r >= img.rows || c < 0 || c >= img.cols) return;
  auto* px = img.at(r, c);
  px[0] = color.r;
  px[1] = color.g;
  px[2] = color.b;
}

inline void draw_line(RGBImage& img, int r0, int c0, int r1, int c1, Rgb color) {
  const int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
  const int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
  int err = (dc > dr ? dc : -dr) / 2;
  while (true) {
    put_pixel(img, r0, c0, color);
    if (r0 == r1 && c0 == c1) break;
    const int e = err;
    if (e > -dc) {
      err -= dr;
      c0 += sc;
    }
    if (e < dr) {
      err += dc;
      r0 += sr;
    }
  }
}

inline void draw_disc(RGBImage& img, int r, int c, Rgb color) {
  for (int dr = -1; dr <= 1; ++dr)
    for (int dc = -1; dc <= 1; ++dc) put_pixel(img, r + dr, c + dc, color);
}

// Column-packed 3x5 glyphs for '0'-'9' and '.'; each value holds three
// 5-bit columns, least significant bit = top row.
inline int glyph_columns(char ch, int col) {
  static constexpr std::uint16_t digits[10] = {
      0x7E3F, 0x43F2, 0x5EBD, 0x7EB5, 0x7C87, 0x76B7, 0x76BF, 0x7C21, 0x7EBF, 0x7EB7,
  };
  std::uint16_t packed = 0;
  if (ch >= '0' && ch <= '9')
    packed = digits[ch - '0'];
  else if (ch == '.')
    packed = 0x0200;  // single dot, bottom of middle column
  return (packed >> (col * 5)) & 0x1F;
}

inline void draw_text(RGBImage& img, int r, int c, const std::string& text, Rgb color) {
  for (char ch : text) {
    for (int col = 0; col < 3; ++col) {
      const int bits = glyph_columns(ch, col);
      for (int row = 0; row < 5; ++row)
        if (bits & (1 << row)) put_pixel(img, r + row, c + col, color);
    }
    c += 4;
  }
}

}  // namespace detail

// Renders pz/cg probabilities against slice index on a 480x300 canvas. A
// single-slice sequence plots markers without connecting segments.
inline RGBImage plot_probability_curves(const std::vector<int>& slice_indices, const std::vector<double>& pz_probs,
                                        const std::vector<double>& cg_probs, double threshold) {
  require(!slice_indices.empty(), Err::EmptySequence, "nothing to plot");
  require(slice_indices.size() == pz_probs.size() && slice_indices.size() == cg_probs.size(), Err::ShapeMismatch,
          "probability series length mismatch");

  constexpr int kRows = 300, kCols = 480;
  constexpr int kLeft = 36, kRight = 12, kTop = 12, kBottom = 24;
  const int x0 = kLeft, x1 = kCols - kRight, y0 = kRows - kBottom, y1 = kTop;

  RGBImage img(kRows, kCols);
  for (int r = 0; r < kRows; ++r)
    for (int c = 0; c < kCols; ++c) detail::put_pixel(img, r, c, detail::kWhite);

  const int lo = slice_indices.front(), hi = slice_indices.back();
  const auto x_of = [&](int slice) {
    if (hi == lo) return (x0 + x1) / 2;
    return x0 + static_cast<int>(std::lround(static_cast<double>(slice - lo) / (hi - lo) * (x1 - x0)));
  };
  const auto y_of = [&](double p) { return y0 - static_cast<int>(std::lround(std::clamp(p, 0.0, 1.0) * (y0 - y1))); };

  for (int i = 0; i <= 4; ++i) {
    const double frac = i / 4.0;
    const int y = y_of(frac);
    detail::draw_line(img, y, x0, y, x1, detail::kGridGray);
    char label[8];
    std::snprintf(label, sizeof label, "%.2f", frac);
    detail::draw_text(img, y - 2, 6, label, detail::kBlack);
  }
  for (std::size_t i = 0; i < slice_indices.size(); ++i) {
    const int x = x_of(slice_indices[i]);
    detail::draw_line(img, y0, x, y0 + 3, x, detail::kBlack);
    if (slice_indices.size() <= 12 || i % ((slice_indices.size() + 11) / 12) == 0)
      detail::draw_text(img, y0 + 6, x - 3, std::to_string(slice_indices[i]), detail::kBlack);
  }
  detail::draw_line(img, y0, x0, y0, x1, detail::kBlack);
  detail::draw_line(img, y1, x0, y0, x0, detail::kBlack);

  const int ty = y_of(threshold);
  for (int c = x0; c <= x1; c += 6) detail::draw_line(img, ty, c, ty, std::min(c + 2, x1), detail::kThreshold);

  const auto draw_series = [&](const std::vector<double>& probs, detail::Rgb color) {
    for (std::size_t i = 0; i + 1 < probs.size(); ++i)
      detail::draw_line(img, y_of(probs[i]), x_of(slice_indices[i]), y_of(probs[i + 1]), x_of(slice_indices[i + 1]),
                        color);
    for (std::size_t i = 0; i < probs.size(); ++i) detail::draw_disc(img, y_of(probs[i]), x_of(slice_indices[i]), color);
  };
  draw_series(pz_probs, detail::kSeriesPz);
  draw_series(cg_probs, detail::kSeriesCg);
  return img;
}

}  // namespace mpmri
