// Grid resampling, Gaussian blurring and intensity normalization.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "mpmri/volume.hpp"

namespace mpmri {

enum class Interp { Trilinear, Nearest };

struct PreprocessConfig {
  std::array<double, 3> target_spacing{1.0, 1.0, 1.0};
  int n4_iterations = 50;
  double n4_convergence_tol = 1e-3;
  double n4_control_spacing_mm = 40.0;
  double blur_sigma_px = 1.0;
  enum class Normalize { ZScore, None } normalize = Normalize::ZScore;
  // Histogram sharpening constants (standard N4 defaults, not searched).
  int n4_histogram_bins = 200;
  double n4_wiener_noise = 0.01;
  double n4_fwhm = 0.15;

  void validate() const {
    for (double s : target_spacing)
      require(s > 0.0, Err::InvalidConfig, "target_spacing must be positive");
    require(n4_iterations >= 1, Err::InvalidConfig, "n4_iterations must be >= 1");
    require(blur_sigma_px >= 0.0, Err::InvalidConfig, "blur_sigma_px must be >= 0");
  }
};

namespace detail {

enum class Border { Clamp, Zero };

inline float sample_trilinear(const ImageVolume& v, double x, double y, double z, Border border) {
  if (border == Border::Zero) {
    if (x < 0.0 || y < 0.0 || z < 0.0 || x > v.dim[0] - 1 || y > v.dim[1] - 1 || z > v.dim[2] - 1)
      return 0.0f;
  }
  const auto clampf = [](double t, int n) { return std::clamp(t, 0.0, static_cast<double>(n - 1)); };
  x = clampf(x, v.dim[0]);
  y = clampf(y, v.dim[1]);
  z = clampf(z, v.dim[2]);
  const int x0 = static_cast<int>(x), y0 = static_cast<int>(y), z0 = static_cast<int>(z);
  const int x1 = std::min(x0 + 1, v.dim[0] - 1);
  const int y1 = std::min(y0 + 1, v.dim[1] - 1);
  const int z1 = std::min(z0 + 1, v.dim[2] - 1);
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  const double c00 = v.at(x0, y0, z0) * (1 - fx) + v.at(x1, y0, z0) * fx;
  const double c10 = v.at(x0, y1, z0) * (1 - fx) + v.at(x1, y1, z0) * fx;
  const double c01 = v.at(x0, y0, z1) * (1 - fx) + v.at(x1, y0, z1) * fx;
  const double c11 = v.at(x0, y1, z1) * (1 - fx) + v.at(x1, y1, z1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

inline float sample_nearest(const ImageVolume& v, double x, double y, double z, Border border) {
  const int xi = static_cast<int>(std::llround(x));
  const int yi = static_cast<int>(std::llround(y));
  const int zi = static_cast<int>(std::llround(z));
  if (xi < 0 || yi < 0 || zi < 0 || xi >= v.dim[0] || yi >= v.dim[1] || zi >= v.dim[2]) {
    if (border == Border::Zero) return 0.0f;
    return v.at(std::clamp(xi, 0, v.dim[0] - 1), std::clamp(yi, 0, v.dim[1] - 1),
                std::clamp(zi, 0, v.dim[2] - 1));
  }
  return v.at(xi, yi, zi);
}

inline void check_interp(const ImageVolume& vol, Interp interp) {
  if (is_mask(vol.modality))
    require(interp == Interp::Nearest, Err::InterpMismatch,
            "mask volumes must be resampled with nearest-neighbour interpolation");
}

}  // namespace detail

// Resample onto a grid with the given spacing, keeping origin and orientation.
// The output extent covers the input extent; border handling clamps so that
// constant images stay constant.
inline ImageVolume resample_isotropic(const ImageVolume& vol,
                                      std::array<double, 3> target_spacing = {1.0, 1.0, 1.0},
                                      Interp interp = Interp::Trilinear) {
  vol.validate();
  detail::check_interp(vol, interp);
  for (double s : target_spacing)
    require(s > 0.0, Err::InvalidConfig, "target spacing must be positive");

  ImageVolume out;
  out.modality = vol.modality;
  out.patient_id = vol.patient_id;
  out.slice_axis = vol.slice_axis;
  std::array<double, 3> ratio{};
  for (int i = 0; i < 3; ++i) {
    ratio[i] = target_spacing[i] / vol.spacing[i];
    out.dim[i] = std::max(1, static_cast<int>(std::ceil(vol.dim[i] * vol.spacing[i] / target_spacing[i])));
    out.spacing[i] = target_spacing[i];
  }
  out.affine = vol.affine;
  for (int c = 0; c < 3; ++c) out.affine.block<3, 1>(0, c) *= ratio[c];
  out.data.assign(out.size(), 0.0f);

  // Same orientation and origin: index mapping is a pure per-axis scale.
  std::size_t p = 0;
  for (int z = 0; z < out.dim[2]; ++z) {
    const double sz = z * ratio[2];
    for (int y = 0; y < out.dim[1]; ++y) {
      const double sy = y * ratio[1];
      for (int x = 0; x < out.dim[0]; ++x, ++p) {
        const double sx = x * ratio[0];
        out.data[p] = interp == Interp::Trilinear
                          ? detail::sample_trilinear(vol, sx, sy, sz, detail::Border::Clamp)
                          : detail::sample_nearest(vol, sx, sy, sz, detail::Border::Clamp);
      }
    }
  }
  return out;
}

// Sample `moving` on the reference grid (both assumed co-registered in world
// space). Voxels outside the moving field of view are zero.
inline ImageVolume resample_to_reference(const ImageVolume& moving, const ImageVolume& reference,
                                         Interp interp) {
  moving.validate();
  reference.validate();
  detail::check_interp(moving, interp);

  ImageVolume out;
  out.dim = reference.dim;
  out.spacing = reference.spacing;
  out.affine = reference.affine;
  out.modality = moving.modality;
  out.patient_id = moving.patient_id;
  out.slice_axis = reference.slice_axis;
  out.data.assign(out.size(), 0.0f);

  const Eigen::Matrix4d m = moving.affine.inverse() * reference.affine;
  std::size_t p = 0;
  for (int z = 0; z < out.dim[2]; ++z) {
    for (int y = 0; y < out.dim[1]; ++y) {
      for (int x = 0; x < out.dim[0]; ++x, ++p) {
        const double mx = m(0, 0) * x + m(0, 1) * y + m(0, 2) * z + m(0, 3);
        const double my = m(1, 0) * x + m(1, 1) * y + m(1, 2) * z + m(1, 3);
        const double mz = m(2, 0) * x + m(2, 1) * y + m(2, 2) * z + m(2, 3);
        out.data[p] = interp == Interp::Trilinear
                          ? detail::sample_trilinear(moving, mx, my, mz, detail::Border::Zero)
                          : detail::sample_nearest(moving, mx, my, mz, detail::Border::Zero);
      }
    }
  }
  return out;
}

// Separable Gaussian convolution with reflect boundary; sigma 0 is identity.
inline Patch gaussian_blur(const Patch& img, double sigma_px) {
  require(sigma_px >= 0.0, Err::InvalidConfig, "sigma must be >= 0");
  if (sigma_px == 0.0 || img.size() == 0) return img;

  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_px)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma_px * sigma_px));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  const auto reflect = [](int i, int n) {
    // reflect without repeating the border sample: -1 -> 1, n -> n-2
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
  };

  Patch tmp(img.rows, img.cols);
  for (int r = 0; r < img.rows; ++r)
    for (int c = 0; c < img.cols; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[k + radius] * img.at(r, reflect(c + k, img.cols));
      tmp.at(r, c) = static_cast<float>(acc);
    }
  Patch out(img.rows, img.cols);
  for (int r = 0; r < img.rows; ++r)
    for (int c = 0; c < img.cols; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[k + radius] * tmp.at(reflect(r + k, img.rows), c);
      out.at(r, c) = static_cast<float>(acc);
    }
  return out;
}

namespace detail {

struct MeanStd {
  double mean;
  double std;
  std::size_t count;
};

inline MeanStd masked_stats(const std::vector<float>& v, const std::vector<float>* mask) {
  double s = 0.0, s2 = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask && (*mask)[i] <= 0.5f) continue;
    s += v[i];
    s2 += static_cast<double>(v[i]) * v[i];
    ++n;
  }
  if (n == 0) return {0.0, 0.0, 0};
  const double mean = s / n;
  const double var = std::max(0.0, s2 / n - mean * mean);
  return {mean, std::sqrt(var), n};
}

}  // namespace detail

// Standardize the (masked) region to mean 0, std 1. Population std.
inline void zscore_normalize(std::vector<float>& values, const std::vector<float>* mask = nullptr) {
  if (mask) require(mask->size() == values.size(), Err::GridMismatch, "mask size mismatch");
  const auto st = detail::masked_stats(values, mask);
  require(st.count > 1, Err::DegenerateIntensity, "normalization region must have > 1 voxel");
  require(st.std > 1e-12 * std::max(1.0, std::abs(st.mean)), Err::DegenerateIntensity,
          "zero variance in normalization region");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (mask && (*mask)[i] <= 0.5f) continue;
    values[i] = static_cast<float>((values[i] - st.mean) / st.std);
  }
}

inline Patch zscore_normalize(const Patch& p, const Patch* mask = nullptr) {
  Patch out = p;
  if (mask) {
    require(mask->same_shape(p), Err::GridMismatch, "mask shape mismatch");
    zscore_normalize(out.v, &mask->v);
  } else {
    zscore_normalize(out.v);
  }
  return out;
}

}  // namespace mpmri
