// Synthetic mpMRI cohort generator: concentric ellipsoidal gland (CG core,
// PZ shell), optional hypointense lesion scaled by grade group, smooth
// multiplicative bias, per-patient gain jitter and Rician noise. Every
// structural fact is recorded so tests can use it as ground truth.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "mpmri/dataset.hpp"
#include "mpmri/nifti.hpp"

namespace mpmri {

struct PhantomSpec {
  int n_patients = 60;
  double lesion_prevalence = 0.5;
  std::array<int, 2> slice_count_range{8, 24};
  double noise_sigma = 0.05;     // Rician noise component, absolute units
  double bias_amplitude = 0.15;  // log-amplitude of the smooth gain field
  std::uint64_t seed = 0;
  std::array<double, 3> spacing{0.5, 0.5, 3.6};
  double fov_mm = 80.0;      // in-plane field of view
  double lesion_span = 0.8;  // lesion z-extent as a fraction of the host region's
  double gain_jitter = 0.08; // per-patient log-gain spread (scanner scale variation)

  void validate() const {
    require(n_patients >= 1, Err::InvalidConfig, "n_patients must be >= 1");
    require(lesion_prevalence >= 0.0 && lesion_prevalence <= 1.0, Err::InvalidConfig,
            "lesion_prevalence must be in [0,1]");
    require(slice_count_range[0] >= 1 && slice_count_range[1] >= slice_count_range[0],
            Err::InvalidConfig, "bad slice_count_range");
    require(noise_sigma >= 0.0 && bias_amplitude >= 0.0 && gain_jitter >= 0.0, Err::InvalidConfig,
            "noise/bias/gain parameters must be >= 0");
    for (double s : spacing) require(s > 0.0, Err::InvalidConfig, "spacing must be positive");
    require(fov_mm > 0.0, Err::InvalidConfig, "fov_mm must be positive");
    require(lesion_span > 0.0 && lesion_span <= 1.0, Err::InvalidConfig, "lesion_span must be in (0,1]");
  }
};

struct PhantomPatient {
  ImageVolume t2, adc, pz_mask, cg_mask, lesion_mask;
  int ggg = 0;
  Region lesion_region = Region::PZ;        // host region, meaningful when ggg >= 2
  int lesion_slice_lo = -1, lesion_slice_hi = -1;  // inclusive slice range with lesion voxels
};

namespace detail {

// Baseline tissue intensities (arbitrary units). Lesions multiply their host
// intensity by 1 - (0.15 + 0.08 * ggg), so contrast deepens monotonically
// with grade group in both modalities.
struct PhantomTissue {
  static constexpr double background = 0.05;
  static constexpr double t2_pz = 0.85, t2_cg = 0.58;
  static constexpr double adc_pz = 0.78, adc_cg = 0.60;
  static double lesion_multiplier(int ggg) { return 1.0 - (0.15 + 0.08 * ggg); }
};

struct Ellipsoid {
  std::array<double, 3> center{};  // mm
  std::array<double, 3> semi{};    // mm

  bool contains(double x, double y, double z) const {
    const double u = (x - center[0]) / semi[0];
    const double v = (y - center[1]) / semi[1];
    const double w = (z - center[2]) / semi[2];
    return u * u + v * v + w * w <= 1.0;
  }
};

}  // namespace detail

inline PhantomPatient generate_patient(const PhantomSpec& spec, std::uint64_t patient_seed) {
  spec.validate();
  Rng rng(patient_seed);

  const int nx = std::max(4, static_cast<int>(std::llround(spec.fov_mm / spec.spacing[0])));
  const int ny = std::max(4, static_cast<int>(std::llround(spec.fov_mm / spec.spacing[1])));
  const int nz = static_cast<int>(rng.uniform_int(spec.slice_count_range[0], spec.slice_count_range[1]));
  const std::array<int, 3> dim{nx, ny, nz};

  PhantomPatient p;
  p.t2 = make_volume(dim, spec.spacing, Modality::T2);
  p.adc = make_volume(dim, spec.spacing, Modality::ADC);
  p.pz_mask = make_volume(dim, spec.spacing, Modality::MaskPZ);
  p.cg_mask = make_volume(dim, spec.spacing, Modality::MaskCG);
  p.lesion_mask = make_volume(dim, spec.spacing, Modality::MaskLesion);

  const double cx = (nx - 1) * spec.spacing[0] / 2.0;
  const double cy = (ny - 1) * spec.spacing[1] / 2.0;
  const double cz = (nz - 1) * spec.spacing[2] / 2.0;

  detail::Ellipsoid outer;
  outer.center = {cx, cy, cz};
  outer.semi = {0.30 * spec.fov_mm * rng.uniform(0.9, 1.1), 0.26 * spec.fov_mm * rng.uniform(0.9, 1.1),
                0.42 * nz * spec.spacing[2] * rng.uniform(0.9, 1.1)};
  detail::Ellipsoid inner;
  inner.center = outer.center;
  inner.semi = {0.55 * outer.semi[0], 0.55 * outer.semi[1], 0.70 * outer.semi[2]};

  // Bias field: product of per-axis sinusoids with random phases, amplitude
  // bounded by bias_amplitude in log space.
  const double ph1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ph2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ph3 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double gain_t2 = std::exp(spec.gain_jitter * rng.normal());
  const double gain_adc = std::exp(spec.gain_jitter * rng.normal());

  // Masks first (purely geometric, no rng draws).
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const double mx = x * spec.spacing[0], my = y * spec.spacing[1], mz = z * spec.spacing[2];
        if (!outer.contains(mx, my, mz)) continue;
        if (inner.contains(mx, my, mz))
          p.cg_mask.at(x, y, z) = 1.0f;
        else
          p.pz_mask.at(x, y, z) = 1.0f;
      }

  // Lesion placement. Malignant patients get GGG in 2..5; benign patients
  // carry GGG 0 or 1 and render no lesion at all.
  const bool malignant = rng.bernoulli(spec.lesion_prevalence);
  detail::Ellipsoid lesion{};
  if (malignant) {
    p.ggg = static_cast<int>(rng.uniform_int(2, 5));
    p.lesion_region = rng.bernoulli(0.5) ? Region::PZ : Region::CG;
    const ImageVolume& host = p.lesion_region == Region::PZ ? p.pz_mask : p.cg_mask;
    const double host_semi_z = p.lesion_region == Region::PZ ? outer.semi[2] : inner.semi[2];

    // Center on a host voxel near the gland's mid depth; the z coordinate
    // therefore lies exactly on a slice plane.
    std::vector<std::size_t> candidates;
    for (int z = 0; z < nz; ++z) {
      if (std::abs(z * spec.spacing[2] - cz) > 0.2 * host_semi_z + spec.spacing[2]) continue;
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x)
          if (host.at(x, y, z) > 0.5f) candidates.push_back(host.index(x, y, z));
    }
    require(!candidates.empty(), Err::EmptyMask, "phantom host region unexpectedly empty");
    const std::size_t pick =
        candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
    const int lx = static_cast<int>(pick % static_cast<std::size_t>(nx));
    const int ly = static_cast<int>((pick / static_cast<std::size_t>(nx)) % static_cast<std::size_t>(ny));
    const int lz = static_cast<int>(pick / (static_cast<std::size_t>(nx) * ny));
    lesion.center = {lx * spec.spacing[0], ly * spec.spacing[1], lz * spec.spacing[2]};
    const double r_xy = rng.uniform(0.12, 0.18) * spec.fov_mm;
    lesion.semi = {r_xy, r_xy, spec.lesion_span * host_semi_z};

    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
          if (host.at(x, y, z) <= 0.5f) continue;
          if (!lesion.contains(x * spec.spacing[0], y * spec.spacing[1], z * spec.spacing[2])) continue;
          p.lesion_mask.at(x, y, z) = 1.0f;
          if (p.lesion_slice_lo < 0) p.lesion_slice_lo = z;
          p.lesion_slice_hi = z;
        }
    require(p.lesion_slice_lo >= 0, Err::EmptyMask, "phantom lesion rendered no voxels");
  } else {
    p.ggg = rng.bernoulli(0.5) ? 1 : 0;
  }

  // Intensities: tissue constant, lesion multiplier, bias, gain, then noise.
  const double mult = detail::PhantomTissue::lesion_multiplier(p.ggg);
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        double t2v = detail::PhantomTissue::background;
        double adcv = detail::PhantomTissue::background;
        if (p.pz_mask.at(x, y, z) > 0.5f) {
          t2v = detail::PhantomTissue::t2_pz;
          adcv = detail::PhantomTissue::adc_pz;
        } else if (p.cg_mask.at(x, y, z) > 0.5f) {
          t2v = detail::PhantomTissue::t2_cg;
          adcv = detail::PhantomTissue::adc_cg;
        }
        if (p.lesion_mask.at(x, y, z) > 0.5f) {
          t2v *= mult;
          adcv *= mult;
        }
        const double bias = std::exp(spec.bias_amplitude *
                                     std::sin(std::numbers::pi * x / nx + ph1) *
                                     std::cos(std::numbers::pi * y / ny + ph2) *
                                     std::cos(0.5 * std::numbers::pi * z / nz + ph3));
        p.t2.at(x, y, z) = static_cast<float>(t2v * bias * gain_t2);
        p.adc.at(x, y, z) = static_cast<float>(adcv * bias * gain_adc);
      }

  if (spec.noise_sigma > 0.0) {
    // Rician-approximate noise: magnitude of the signal plus complex Gaussian.
    for (auto* vol : {&p.t2, &p.adc})
      for (auto& v : vol->data) {
        const double n1 = rng.normal(0.0, spec.noise_sigma);
        const double n2 = rng.normal(0.0, spec.noise_sigma);
        v = static_cast<float>(std::sqrt((v + n1) * (v + n1) + n2 * n2));
      }
  }
  return p;
}

// Structural ground truth for a generated cohort, written alongside the
// manifest so localization tests can look up the true lesion slices.
struct PhantomTruth {
  struct Entry {
    std::string patient_id;
    int ggg = 0;
    std::string lesion_region;  // "PZ"/"CG", or "" for benign
    int lesion_slice_lo = -1, lesion_slice_hi = -1;
  };
  std::vector<Entry> patients;
};

inline void save_truth(const PhantomTruth& truth, const std::filesystem::path& path) {
  nlohmann::json patients = nlohmann::json::array();
  for (const auto& e : truth.patients)
    patients.push_back({{"patient_id", e.patient_id},
                        {"ggg", e.ggg},
                        {"lesion_region", e.lesion_region},
                        {"lesion_slice_lo", e.lesion_slice_lo},
                        {"lesion_slice_hi", e.lesion_slice_hi}});
  std::ofstream out(path);
  require(out.good(), Err::UnwritablePath, "cannot write '" + path.string() + "'");
  out << nlohmann::json{{"patients", patients}}.dump(2) << '\n';
}

inline PhantomTruth load_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Err::MissingFile, "cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
    PhantomTruth truth;
    for (const auto& je : j.at("patients"))
      truth.patients.push_back({je.at("patient_id").get<std::string>(), je.at("ggg").get<int>(),
                                je.at("lesion_region").get<std::string>(),
                                je.at("lesion_slice_lo").get<int>(), je.at("lesion_slice_hi").get<int>()});
    return truth;
  } catch (const nlohmann::json::exception& ex) {
    fail(Err::InvalidConfig, std::string("malformed truth file: ") + ex.what());
  }
}

// Write n_patients NIfTI sets plus manifest.json and phantom_truth.json.
// Each patient yields one PZ and one CG manifest entry; the region hosting
// the lesion carries the malignant grade group, the other region stays benign.
// Generation is independent per patient, so `jobs` workers may run at once;
// the manifest order is by patient index regardless.
inline CohortManifest generate_cohort(const PhantomSpec& spec, const std::filesystem::path& out_dir,
                                      int jobs = 1) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, Err::UnwritablePath, "cannot create '" + out_dir.string() + "'");

  const auto n = static_cast<std::size_t>(spec.n_patients);
  std::vector<std::array<ManifestEntry, 2>> entries(n);
  std::vector<PhantomTruth::Entry> truth_entries(n);

  parallel_for(n, jobs, [&](std::size_t i) {
    char pid[16];
    std::snprintf(pid, sizeof pid, "P%04zu", i);
    const auto patient = generate_patient(spec, derive_seed(spec.seed, 0x9A71, static_cast<std::uint64_t>(i)));
    const auto dir = out_dir / pid;
    std::error_code dir_ec;
    std::filesystem::create_directories(dir, dir_ec);
    require(!dir_ec, Err::UnwritablePath, "cannot create '" + dir.string() + "'");

    const auto write = [&](const ImageVolume& v, const char* name) {
      ImageVolume named = v;
      named.patient_id = pid;
      save_volume(named, (dir / name).string());
      return (dir / name).string();
    };
    const auto t2_path = write(patient.t2, "t2.nii.gz");
    const auto adc_path = write(patient.adc, "adc.nii.gz");
    const auto pz_path = write(patient.pz_mask, "pz_mask.nii.gz");
    const auto cg_path = write(patient.cg_mask, "cg_mask.nii.gz");
    write(patient.lesion_mask, "lesion_mask.nii.gz");

    const bool malignant = patient.ggg >= 2;
    const int pz_ggg = malignant ? (patient.lesion_region == Region::PZ ? patient.ggg : 0) : patient.ggg;
    const int cg_ggg = malignant ? (patient.lesion_region == Region::CG ? patient.ggg : 0) : patient.ggg;
    entries[i] = {ManifestEntry{pid, Region::PZ, pz_ggg, t2_path, adc_path, pz_path},
                  ManifestEntry{pid, Region::CG, cg_ggg, t2_path, adc_path, cg_path}};
    truth_entries[i] = {pid, patient.ggg, malignant ? to_string(patient.lesion_region) : "",
                        patient.lesion_slice_lo, patient.lesion_slice_hi};
  });

  CohortManifest manifest;
  manifest.source = CohortSource::Phantom;
  for (const auto& pair : entries) {
    manifest.entries.push_back(pair[0]);
    manifest.entries.push_back(pair[1]);
  }
  PhantomTruth truth;
  truth.patients = std::move(truth_entries);

  save_manifest(manifest, (out_dir / "manifest.json").string());
  save_truth(truth, out_dir / "phantom_truth.json");
  return manifest;
}

}  // namespace mpmri
