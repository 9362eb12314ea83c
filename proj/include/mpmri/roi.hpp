// Mask-driven rectangular cropping: per-slice extreme points, the
// sequence-wide bounding box, and fixed-size patch extraction.
#pragma once

#include "mpmri/preprocess.hpp"

namespace mpmri {

enum class Region { PZ, CG, GLAND };

inline const char* to_string(Region r) {
  switch (r) {
    case Region::PZ: return "PZ";
    case Region::CG: return "CG";
    case Region::GLAND: return "GLAND";
  }
  return "?";
}

struct CropRect {
  int x_min = 0, x_max = 0;  // inclusive column range
  int y_min = 0, y_max = 0;  // inclusive row range
  int margin_px = 0;

  int width() const { return x_max - x_min + 1; }
  int height() const { return y_max - y_min + 1; }

  void validate() const {
    require(x_min <= x_max && y_min <= y_max, Err::InvalidConfig, "degenerate crop rect");
    require(margin_px >= 0, Err::InvalidConfig, "negative crop margin");
  }
};

struct ExtremePoints {
  // Each point is (row, col) of a foreground pixel attaining the extreme.
  std::array<int, 2> left, right, top, bottom;
};

inline ExtremePoints extreme_points(const Patch& mask) {
  ExtremePoints e{};
  bool found = false;
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c) {
      if (mask.at(r, c) <= 0.5f) continue;
      if (!found) {
        e.left = e.right = e.top = e.bottom = {r, c};
        found = true;
        continue;
      }
      if (c < e.left[1]) e.left = {r, c};
      if (c > e.right[1]) e.right = {r, c};
      if (r < e.top[0]) e.top = {r, c};
      if (r > e.bottom[0]) e.bottom = {r, c};
    }
  require(found, Err::EmptyMask, "mask slice has no foreground pixels");
  return e;
}

// Union of per-slice extreme-point boxes across the sequence, dilated by
// margin_px and clamped to the image bounds.
inline CropRect sequence_bbox(const std::vector<Patch>& mask_slices, int margin_px = 5) {
  require(margin_px >= 0, Err::InvalidConfig, "negative crop margin");
  require(!mask_slices.empty(), Err::EmptySequence, "no mask slices given");
  const int rows = mask_slices.front().rows, cols = mask_slices.front().cols;
  int x0 = cols, x1 = -1, y0 = rows, y1 = -1;
  for (const auto& m : mask_slices) {
    require(m.rows == rows && m.cols == cols, Err::GridMismatch, "mask slices differ in shape");
    bool any = false;
    for (int r = 0; r < m.rows && !any; ++r)
      for (int c = 0; c < m.cols; ++c)
        if (m.at(r, c) > 0.5f) {
          any = true;
          break;
        }
    if (!any) continue;
    const auto e = extreme_points(m);
    x0 = std::min(x0, e.left[1]);
    x1 = std::max(x1, e.right[1]);
    y0 = std::min(y0, e.top[0]);
    y1 = std::max(y1, e.bottom[0]);
  }
  require(x1 >= 0, Err::EmptyMask, "no slice in the sequence has foreground");
  CropRect rect;
  rect.x_min = std::max(0, x0 - margin_px);
  rect.x_max = std::min(cols - 1, x1 + margin_px);
  rect.y_min = std::max(0, y0 - margin_px);
  rect.y_max = std::min(rows - 1, y1 + margin_px);
  rect.margin_px = margin_px;
  return rect;
}

struct PatchSequence {
  std::vector<Patch> patches;
  std::vector<int> slice_indices;
  Region region = Region::GLAND;
  Modality modality = Modality::T2;
  std::string patient_id;
  CropRect crop_rect;

  std::size_t length() const { return patches.size(); }

  void validate() const {
    require(!patches.empty(), Err::EmptySequence, "patch sequence is empty");
    require(patches.size() == slice_indices.size(), Err::ShapeMismatch, "slice index count mismatch");
    for (std::size_t i = 0; i < patches.size(); ++i) {
      require(patches[i].same_shape(patches.front()), Err::ShapeMismatch, "patch shapes differ");
      if (i > 0)
        require(slice_indices[i] > slice_indices[i - 1], Err::SequenceMisaligned,
                "slice indices must be strictly increasing");
    }
  }
};

// Bilinear resize with the half-pixel center convention (identity when the
// sizes match).
inline Patch resize_bilinear(const Patch& in, int out_rows, int out_cols) {
  require(out_rows >= 1 && out_cols >= 1, Err::InvalidConfig, "resize target must be positive");
  if (out_rows == in.rows && out_cols == in.cols) return in;
  Patch out(out_rows, out_cols);
  const double sr = static_cast<double>(in.rows) / out_rows;
  const double sc = static_cast<double>(in.cols) / out_cols;
  for (int r = 0; r < out_rows; ++r) {
    const double fr = std::clamp((r + 0.5) * sr - 0.5, 0.0, static_cast<double>(in.rows - 1));
    const int r0 = static_cast<int>(fr);
    const int r1 = std::min(r0 + 1, in.rows - 1);
    const double tr = fr - r0;
    for (int c = 0; c < out_cols; ++c) {
      const double fc = std::clamp((c + 0.5) * sc - 0.5, 0.0, static_cast<double>(in.cols - 1));
      const int c0 = static_cast<int>(fc);
      const int c1 = std::min(c0 + 1, in.cols - 1);
      const double tc = fc - c0;
      const double top = in.at(r0, c0) * (1 - tc) + in.at(r0, c1) * tc;
      const double bot = in.at(r1, c0) * (1 - tc) + in.at(r1, c1) * tc;
      out.at(r, c) = static_cast<float>(top * (1 - tr) + bot * tr);
    }
  }
  return out;
}

// Zero-pad to a square, splitting evenly (extra pixel goes to the
// bottom/right on odd differences).
inline Patch pad_to_square(const Patch& in) {
  const int side = std::max(in.rows, in.cols);
  if (in.rows == side && in.cols == side) return in;
  Patch out(side, side);
  const int top = (side - in.rows) / 2;
  const int left = (side - in.cols) / 2;
  for (int r = 0; r < in.rows; ++r)
    for (int c = 0; c < in.cols; ++c) out.at(top + r, left + c) = in.at(r, c);
  return out;
}

namespace detail {

// Standardize a cropped patch; a (near-)constant crop becomes all zeros
// instead of failing, since background-only slices are legitimate inputs.
inline void zscore_tolerant(Patch& p) {
  const auto st = masked_stats(p.v, nullptr);
  if (st.count < 2 || st.std <= 1e-12 * std::max(1.0, std::abs(st.mean))) {
    std::fill(p.v.begin(), p.v.end(), 0.0f);
    return;
  }
  for (auto& x : p.v) x = static_cast<float>((x - st.mean) / st.std);
}

}  // namespace detail

// Crop each requested slice to `rect`, blur, standardize, pad square and
// resize. Slices must be given in increasing order.
inline PatchSequence crop_and_resize(const ImageVolume& vol, const std::vector<int>& slice_indices,
                                     const CropRect& rect, Region region,
                                     std::array<int, 2> out_size = {64, 64},
                                     const PreprocessConfig& cfg = {}) {
  vol.validate();
  cfg.validate();
  rect.validate();
  require(!slice_indices.empty(), Err::EmptySequence, "no slices requested");
  const auto [ax_lo, ax_hi] = inplane_axes(vol.slice_axis);
  const int cols = vol.dim[ax_lo], rows = vol.dim[ax_hi];
  require(rect.x_max < cols && rect.y_max < rows, Err::GridMismatch, "crop rect exceeds slice bounds");

  PatchSequence seq;
  seq.region = region;
  seq.modality = vol.modality;
  seq.patient_id = vol.patient_id;
  seq.crop_rect = rect;
  seq.slice_indices = slice_indices;
  seq.patches.reserve(slice_indices.size());
  for (int k : slice_indices) {
    const Patch full = extract_slice(vol, k);
    Patch crop(rect.height(), rect.width());
    for (int r = 0; r < crop.rows; ++r)
      for (int c = 0; c < crop.cols; ++c) crop.at(r, c) = full.at(rect.y_min + r, rect.x_min + c);
    crop = gaussian_blur(crop, cfg.blur_sigma_px);
    if (cfg.normalize == PreprocessConfig::Normalize::ZScore) detail::zscore_tolerant(crop);
    seq.patches.push_back(resize_bilinear(pad_to_square(crop), out_size[0], out_size[1]));
  }
  seq.validate();
  return seq;
}

// Convenience wrapper for co-registered multi-modality input.
inline std::vector<PatchSequence> crop_and_resize(const std::vector<const ImageVolume*>& vols,
                                                  const std::vector<int>& slice_indices,
                                                  const CropRect& rect, Region region,
                                                  std::array<int, 2> out_size = {64, 64},
                                                  const PreprocessConfig& cfg = {}) {
  require(!vols.empty(), Err::EmptySequence, "no volumes given");
  for (const auto* v : vols)
    require(v && v->same_grid(*vols.front()), Err::GridMismatch, "volumes do not share a grid");
  std::vector<PatchSequence> out;
  out.reserve(vols.size());
  for (const auto* v : vols) out.push_back(crop_and_resize(*v, slice_indices, rect, region, out_size, cfg));
  return out;
}

}  // namespace mpmri
