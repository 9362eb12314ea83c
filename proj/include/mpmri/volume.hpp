// ImageVolume: 3D scalar grid with voxel spacing and a voxel->world affine.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mpmri/core.hpp"

namespace mpmri {

enum class Modality { T2, ADC, MaskPZ, MaskCG, MaskGland, MaskLesion };

inline bool is_mask(Modality m) {
  return m == Modality::MaskPZ || m == Modality::MaskCG || m == Modality::MaskGland ||
         m == Modality::MaskLesion;
}

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::T2: return "T2";
    case Modality::ADC: return "ADC";
    case Modality::MaskPZ: return "MASK_PZ";
    case Modality::MaskCG: return "MASK_CG";
    case Modality::MaskGland: return "MASK_GLAND";
    case Modality::MaskLesion: return "MASK_LESION";
  }
  return "?";
}

struct ImageVolume {
  std::array<int, 3> dim{0, 0, 0};          // nx, ny, nz
  std::array<double, 3> spacing{1, 1, 1};   // mm per voxel
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();  // voxel index -> world mm
  Modality modality = Modality::T2;
  std::string patient_id;
  int slice_axis = 2;
  std::vector<float> data;  // x fastest: index = x + nx*(y + ny*z)

  std::size_t size() const {
    return static_cast<std::size_t>(dim[0]) * dim[1] * dim[2];
  }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(dim[0]) *
           (static_cast<std::size_t>(y) + static_cast<std::size_t>(dim[1]) * z);
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }

  bool same_grid(const ImageVolume& o, double tol = 1e-6) const {
    return dim == o.dim && (affine - o.affine).cwiseAbs().maxCoeff() <= tol;
  }

  void validate() const {
    require(dim[0] >= 1 && dim[1] >= 1 && dim[2] >= 1, Err::InvalidVolume,
            "each dimension must be >= 1");
    require(data.size() == size(), Err::InvalidVolume, "data size does not match dims");
    for (double s : spacing)
      require(s > 0.0, Err::InvalidVolume, "spacing components must be strictly positive");
    const double det = affine.topLeftCorner<3, 3>().determinant();
    require(std::abs(det) > 1e-12, Err::NonInvertibleAffine, "affine is singular");
    for (int c = 0; c < 3; ++c) {
      const double norm = affine.block<3, 1>(0, c).norm();
      require(std::abs(norm - spacing[c]) <= 1e-6 * std::max(1.0, spacing[c]),
              Err::InvalidVolume, "affine column norm disagrees with spacing");
    }
    require(slice_axis >= 0 && slice_axis < 3, Err::InvalidVolume, "slice_axis out of range");
    if (is_mask(modality)) {
      for (float v : data)
        require(v == 0.0f || v == 1.0f, Err::InvalidMaskValue,
                "mask volume contains a value other than 0/1");
    }
  }
};

inline int default_slice_axis(const std::array<double, 3>& spacing) {
  int axis = 0;
  for (int i = 1; i < 3; ++i)
    if (spacing[i] > spacing[axis]) axis = i;
  return axis;
}

// Axis-aligned volume with the given origin (world position of voxel 0,0,0).
inline ImageVolume make_volume(std::array<int, 3> dim, std::array<double, 3> spacing,
                               Modality modality = Modality::T2, std::string patient_id = {},
                               std::array<double, 3> origin = {0, 0, 0}) {
  ImageVolume v;
  v.dim = dim;
  v.spacing = spacing;
  v.modality = modality;
  v.patient_id = std::move(patient_id);
  v.affine = Eigen::Matrix4d::Identity();
  for (int i = 0; i < 3; ++i) {
    v.affine(i, i) = spacing[i];
    v.affine(i, 3) = origin[i];
  }
  v.slice_axis = default_slice_axis(spacing);
  v.data.assign(v.size(), 0.0f);
  return v;
}

inline Eigen::Vector3d voxel_to_world(const ImageVolume& vol, const Eigen::Vector3d& idx) {
  return vol.affine.topLeftCorner<3, 3>() * idx + vol.affine.block<3, 1>(0, 3);
}

inline Eigen::Vector3d world_to_voxel(const ImageVolume& vol, const Eigen::Vector3d& world) {
  const Eigen::Matrix3d m = vol.affine.topLeftCorner<3, 3>();
  require(std::abs(m.determinant()) > 1e-12, Err::NonInvertibleAffine, "affine is singular");
  return m.inverse() * (world - vol.affine.block<3, 1>(0, 3));
}

// In-plane axes in ascending order, excluding the slice axis.
inline std::pair<int, int> inplane_axes(int slice_axis) {
  switch (slice_axis) {
    case 0: return {1, 2};
    case 1: return {0, 2};
    default: return {0, 1};
  }
}

// One slice as a 2D grid: rows follow the higher in-plane axis, cols the lower.
inline Patch extract_slice(const ImageVolume& vol, int slice_index) {
  const auto [ua, va] = inplane_axes(vol.slice_axis);
  require(slice_index >= 0 && slice_index < vol.dim[vol.slice_axis], Err::InvalidVolume,
          "slice index out of range");
  Patch out(vol.dim[va], vol.dim[ua]);
  std::array<int, 3> idx{};
  idx[vol.slice_axis] = slice_index;
  for (int r = 0; r < out.rows; ++r) {
    idx[va] = r;
    for (int c = 0; c < out.cols; ++c) {
      idx[ua] = c;
      out.at(r, c) = vol.at(idx[0], idx[1], idx[2]);
    }
  }
  return out;
}

inline std::vector<int> foreground_slices(const ImageVolume& mask) {
  std::vector<int> out;
  const auto [ua, va] = inplane_axes(mask.slice_axis);
  std::array<int, 3> idx{};
  for (int k = 0; k < mask.dim[mask.slice_axis]; ++k) {
    idx[mask.slice_axis] = k;
    bool any = false;
    for (int r = 0; r < mask.dim[va] && !any; ++r) {
      idx[va] = r;
      for (int c = 0; c < mask.dim[ua]; ++c) {
        idx[ua] = c;
        if (mask.at(idx[0], idx[1], idx[2]) > 0.5f) {
          any = true;
          break;
        }
      }
    }
    if (any) out.push_back(k);
  }
  return out;
}

}  // namespace mpmri
