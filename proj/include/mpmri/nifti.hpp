// NIfTI-1 load/save (.nii and .nii.gz). Honors dim, pixdim, srow_x/y/z,
// datatype and scl_slope/inter; qform is used only when no sform is present.
#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mpmri/volume.hpp"

namespace mpmri {
namespace nifti_detail {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

enum NiftiType : std::int16_t {
  DT_UINT8 = 2,
  DT_INT16 = 4,
  DT_INT32 = 8,
  DT_FLOAT32 = 16,
  DT_FLOAT64 = 64,
  DT_INT8 = 256,
  DT_UINT16 = 512,
};

inline void bswap(std::int16_t& x) {
  auto u = static_cast<std::uint16_t>(x);
  x = static_cast<std::int16_t>((u >> 8) | (u << 8));
}
inline void bswap(std::int32_t& x) {
  auto u = static_cast<std::uint32_t>(x);
  u = ((u >> 24) & 0xff) | ((u >> 8) & 0xff00) | ((u << 8) & 0xff0000) | (u << 24);
  x = static_cast<std::int32_t>(u);
}
inline void bswap(float& x) {
  std::uint32_t u;
  std::memcpy(&u, &x, 4);
  u = ((u >> 24) & 0xff) | ((u >> 8) & 0xff00) | ((u << 8) & 0xff0000) | (u << 24);
  std::memcpy(&x, &u, 4);
}

inline void swap_header(Nifti1Header& h) {
  bswap(h.sizeof_hdr);
  bswap(h.extents);
  bswap(h.session_error);
  for (auto& d : h.dim) bswap(d);
  bswap(h.intent_p1);
  bswap(h.intent_p2);
  bswap(h.intent_p3);
  bswap(h.intent_code);
  bswap(h.datatype);
  bswap(h.bitpix);
  bswap(h.slice_start);
  for (auto& p : h.pixdim) bswap(p);
  bswap(h.vox_offset);
  bswap(h.scl_slope);
  bswap(h.scl_inter);
  bswap(h.slice_end);
  bswap(h.cal_max);
  bswap(h.cal_min);
  bswap(h.slice_duration);
  bswap(h.toffset);
  bswap(h.glmax);
  bswap(h.glmin);
  bswap(h.qform_code);
  bswap(h.sform_code);
  bswap(h.quatern_b);
  bswap(h.quatern_c);
  bswap(h.quatern_d);
  bswap(h.qoffset_x);
  bswap(h.qoffset_y);
  bswap(h.qoffset_z);
  for (auto& v : h.srow_x) bswap(v);
  for (auto& v : h.srow_y) bswap(v);
  for (auto& v : h.srow_z) bswap(v);
}

// gzread handles both gzip-compressed and plain files.
inline std::vector<char> read_all(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  require(f != nullptr, Err::MissingFile, path);
  std::vector<char> out;
  char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool ok = n == 0;
  gzclose(f);
  require(ok, Err::MalformedHeader, "failed to decompress " + path);
  return out;
}

inline Eigen::Matrix4d affine_from_qform(const Nifti1Header& h) {
  const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
  const double a2 = 1.0 - (b * b + c * c + d * d);
  const double a = a2 > 0 ? std::sqrt(a2) : 0.0;
  Eigen::Matrix3d r;
  r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
       2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
       2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c;
  const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  for (int i = 0; i < 3; ++i) {
    m(i, 0) = r(i, 0) * h.pixdim[1];
    m(i, 1) = r(i, 1) * h.pixdim[2];
    m(i, 2) = r(i, 2) * h.pixdim[3] * qfac;
  }
  m(0, 3) = h.qoffset_x;
  m(1, 3) = h.qoffset_y;
  m(2, 3) = h.qoffset_z;
  return m;
}

template <class Raw>
inline void cast_voxels(const char* src, std::size_t n, bool swapped, float slope, float inter,
                        std::vector<float>& dst) {
  dst.resize(n);
  const bool rescale = slope != 0.0f && !(slope == 1.0f && inter == 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    Raw r;
    std::memcpy(&r, src + i * sizeof(Raw), sizeof(Raw));
    if (swapped && sizeof(Raw) > 1) {
      char* p = reinterpret_cast<char*>(&r);
      for (std::size_t a = 0, b = sizeof(Raw) - 1; a < b; ++a, --b) std::swap(p[a], p[b]);
    }
    float v = static_cast<float>(r);
    if (rescale) v = slope * v + inter;
    dst[i] = v;
  }
}

}  // namespace nifti_detail

inline ImageVolume load_volume(const std::string& path, Modality modality = Modality::T2,
                               std::string patient_id = {}) {
  namespace nd = nifti_detail;
  require(std::filesystem::exists(path), Err::MissingFile, path);
  std::vector<char> bytes = nd::read_all(path);
  require(bytes.size() >= 348, Err::MalformedHeader, "file shorter than a NIfTI-1 header");

  nd::Nifti1Header h{};
  std::memcpy(&h, bytes.data(), sizeof(h));
  const bool single_file = std::memcmp(h.magic, "n+1\0", 4) == 0;
  const bool pair_file = std::memcmp(h.magic, "ni1\0", 4) == 0;
  require(single_file || pair_file, Err::MalformedHeader, "magic is neither n+1 nor ni1");

  bool swapped = false;
  if (h.dim[0] < 1 || h.dim[0] > 7) {
    nd::swap_header(h);
    swapped = true;
    require(h.dim[0] >= 1 && h.dim[0] <= 7, Err::MalformedHeader, "dim[0] invalid in both byte orders");
  }
  for (int i = h.dim[0] + 1; i <= 7; ++i)
    require(h.dim[i] <= 1, Err::MalformedHeader, "trailing dims must be 1");
  require(h.dim[0] <= 3 || (h.dim[4] <= 1 && h.dim[5] <= 1 && h.dim[6] <= 1 && h.dim[7] <= 1),
          Err::MalformedHeader, "multi-frame 4D series are not supported");

  ImageVolume vol;
  vol.modality = modality;
  vol.patient_id = std::move(patient_id);
  for (int i = 0; i < 3; ++i) {
    vol.dim[i] = h.dim[0] >= i + 1 ? h.dim[i + 1] : 1;
    require(vol.dim[i] >= 1, Err::MalformedHeader, "non-positive dimension");
  }

  if (h.sform_code > 0) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    for (int c = 0; c < 4; ++c) {
      m(0, c) = h.srow_x[c];
      m(1, c) = h.srow_y[c];
      m(2, c) = h.srow_z[c];
    }
    vol.affine = m;
    for (int c = 0; c < 3; ++c) vol.spacing[c] = m.block<3, 1>(0, c).norm();
  } else {
    for (int i = 0; i < 3; ++i) {
      vol.spacing[i] = h.pixdim[i + 1] != 0.0f ? std::abs(h.pixdim[i + 1]) : 1.0;
    }
    if (h.qform_code > 0) {
      nd::Nifti1Header hq = h;
      for (int i = 0; i < 3; ++i) hq.pixdim[i + 1] = static_cast<float>(vol.spacing[i]);
      vol.affine = nd::affine_from_qform(hq);
    } else {
      vol.affine = Eigen::Matrix4d::Identity();
      for (int i = 0; i < 3; ++i) vol.affine(i, i) = vol.spacing[i];
    }
  }
  require(std::abs(vol.affine.topLeftCorner<3, 3>().determinant()) > 1e-12,
          Err::NonInvertibleAffine, path);
  vol.slice_axis = default_slice_axis(vol.spacing);

  // Voxel payload: within this file or in a sibling .img for ni1 pairs.
  std::vector<char> payload;
  const char* src = nullptr;
  std::size_t avail = 0;
  if (single_file) {
    auto off = static_cast<std::size_t>(h.vox_offset);
    require(off >= 348 && off <= bytes.size(), Err::MalformedHeader, "bad vox_offset");
    src = bytes.data() + off;
    avail = bytes.size() - off;
  } else {
    std::filesystem::path p(path);
    while (!p.extension().empty()) p.replace_extension();
    std::string img = p.string() + ".img";
    if (!std::filesystem::exists(img)) img += ".gz";
    require(std::filesystem::exists(img), Err::MissingFile, img);
    payload = nd::read_all(img);
    src = payload.data();
    avail = payload.size();
  }

  const std::size_t n = vol.size();
  const float slope = h.scl_slope;
  const float inter = h.scl_inter;
  switch (h.datatype) {
    case nd::DT_UINT8:
      require(avail >= n, Err::MalformedHeader, "truncated voxel data");
      nd::cast_voxels<std::uint8_t>(src, n, swapped, slope, inter, vol.data);
      break;
    case nd::DT_INT8:
      require(avail >= n, Err::MalformedHeader, "truncated voxel data");
      nd::cast_voxels<std::int8_t>(src, n, swapped, slope, inter, vol.data);
      break;
    case nd::DT_INT16:
      require(avail >= n * 2, Err::MalformedHeader, "truncated voxel data");
      nd::cast_voxels<std::int16_t>(src, n, swapped, slope, inter, vol.data);
      break;
    case nd::DT_UINT16:
      require(avail >= n * 2, Err::MalformedHeader, "truncated voxel data");
      nd::cast_voxels<std::uint16_t>(src, n, swapped, slope, inter, vol.data);
      break;
    case nd::DT_INT32:
      require(avail >= n * 4, Err::MalformedHeader, "truncated voxel data");
      nd::cast_voxels<std::int32_t>(src, n, swapped, slope, inter, vol.data);
      break;
    case nd::DT_FLOAT32:
      require(avail >= n * 4, Err::MalformedHeader, "truncated voxel data");
      nd::cast_voxels<float>(src, n, swapped, slope, inter, vol.data);
      break;
    case nd::DT_FLOAT64:
      require(avail >= n * 8, Err::MalformedHeader, "truncated voxel data");
      nd::cast_voxels<double>(src, n, swapped, slope, inter, vol.data);
      break;
    default:
      fail(Err::MalformedHeader, "unsupported datatype " + std::to_string(h.datatype));
  }
  for (float v : vol.data)
    require(std::isfinite(v), Err::MalformedHeader, "non-finite voxel value");

  vol.validate();
  return vol;
}

inline void save_volume(const ImageVolume& vol, const std::string& path) {
  namespace nd = nifti_detail;
  vol.validate();

  nd::Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int i = 0; i < 3; ++i) h.dim[i + 1] = static_cast<std::int16_t>(vol.dim[i]);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = nd::DT_FLOAT32;
  h.bitpix = 32;
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(vol.spacing[i]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // millimetres
  h.sform_code = 1;  // scanner-anatomical
  h.qform_code = 0;
  for (int c = 0; c < 4; ++c) {
    h.srow_x[c] = static_cast<float>(vol.affine(0, c));
    h.srow_y[c] = static_cast<float>(vol.affine(1, c));
    h.srow_z[c] = static_cast<float>(vol.affine(2, c));
  }
  std::snprintf(h.descrip, sizeof(h.descrip), "mpmri %s", to_string(vol.modality));
  std::memcpy(h.magic, "n+1\0", 4);

  const char extender[4] = {0, 0, 0, 0};
  const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  if (gz) {
    gzFile f = gzopen(path.c_str(), "wb6");
    require(f != nullptr, Err::UnwritablePath, path);
    bool ok = gzwrite(f, &h, sizeof(h)) == static_cast<int>(sizeof(h));
    ok = ok && gzwrite(f, extender, 4) == 4;
    const auto* bytes = reinterpret_cast<const char*>(vol.data.data());
    std::size_t total = vol.data.size() * 4;
    std::size_t done = 0;
    while (ok && done < total) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(total - done, 1u << 24));
      ok = gzwrite(f, bytes + done, chunk) == static_cast<int>(chunk);
      done += chunk;
    }
    ok = gzclose(f) == Z_OK && ok;
    require(ok, Err::UnwritablePath, path);
  } else {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), Err::UnwritablePath, path);
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
    f.write(extender, 4);
    f.write(reinterpret_cast<const char*>(vol.data.data()),
            static_cast<std::streamsize>(vol.data.size() * 4));
    f.flush();
    require(f.good(), Err::UnwritablePath, path);
  }
}

}  // namespace mpmri
