// Labeled 2.5D paired samples: slice pairing, patient-level splits, class
// re-weighting and training-time augmentation.
#pragma once

#include <algorithm>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "mpmri/roi.hpp"

namespace mpmri {

enum class Pairing { T2_ADC, T2_T2, ADC_ADC };
enum class PairMode { Mixed, T2AdcOnly };

inline const char* to_string(Pairing p) {
  switch (p) {
    case Pairing::T2_ADC: return "T2_ADC";
    case Pairing::T2_T2: return "T2_T2";
    case Pairing::ADC_ADC: return "ADC_ADC";
  }
  return "?";
}

inline const char* to_string(PairMode m) { return m == PairMode::Mixed ? "mixed" : "t2_adc_only"; }

inline PairMode pair_mode_from_string(const std::string& s) {
  if (s == "mixed") return PairMode::Mixed;
  if (s == "t2_adc_only") return PairMode::T2AdcOnly;
  fail(Err::InvalidConfig, "unknown pair mode '" + s + "'");
}

struct PairedSample {
  std::array<Patch, 2> channels;
  Pairing pairing = Pairing::T2_ADC;
  int label = 0;  // 0 benign, 1 malignant
  std::string patient_id;
  int slice_index = 0;  // anchor slice
  Region region = Region::GLAND;
};

// Clinical significance cutoff: grade group 2 and above is malignant.
inline int assign_label(int ggg) {
  require(ggg >= 0 && ggg <= 5, Err::OutOfRangeGGG, "grade group must be in 0..5");
  return ggg >= 2 ? 1 : 0;
}

inline std::size_t pair_count(PairMode mode, std::size_t n_slices) {
  if (n_slices == 0) return 0;
  return mode == PairMode::Mixed ? 3 * n_slices - 2 : n_slices;
}

// One T2-ADC sample per slice; in mixed mode additionally consecutive
// same-modality pairs, giving 3n-2 samples for n slices.
inline std::vector<PairedSample> build_pairs(const PatchSequence& t2, const PatchSequence& adc,
                                             PairMode mode, int label) {
  t2.validate();
  adc.validate();
  require(label == 0 || label == 1, Err::InvalidConfig, "label must be 0 or 1");
  require(t2.slice_indices == adc.slice_indices, Err::SequenceMisaligned, "T2/ADC slice indices differ");
  require(t2.region == adc.region, Err::SequenceMisaligned, "T2/ADC regions differ");
  require(t2.patient_id == adc.patient_id, Err::SequenceMisaligned, "T2/ADC patients differ");
  require(t2.patches.front().same_shape(adc.patches.front()), Err::ShapeMismatch, "patch shapes differ");

  const std::size_t n = t2.length();
  std::vector<PairedSample> out;
  out.reserve(pair_count(mode, n));
  const auto emit = [&](const Patch& a, const Patch& b, Pairing pairing, int anchor) {
    PairedSample s;
    s.channels = {a, b};
    s.pairing = pairing;
    s.label = label;
    s.patient_id = t2.patient_id;
    s.slice_index = anchor;
    s.region = t2.region;
    out.push_back(std::move(s));
  };
  for (std::size_t i = 0; i < n; ++i)
    emit(t2.patches[i], adc.patches[i], Pairing::T2_ADC, t2.slice_indices[i]);
  if (mode == PairMode::Mixed) {
    for (std::size_t i = 0; i + 1 < n; ++i)
      emit(t2.patches[i], t2.patches[i + 1], Pairing::T2_T2, t2.slice_indices[i]);
    for (std::size_t i = 0; i + 1 < n; ++i)
      emit(adc.patches[i], adc.patches[i + 1], Pairing::ADC_ADC, adc.slice_indices[i]);
  }
  return out;
}

// Patient-level split: every sample of a patient lands on one side.
// Validation receives round(fraction * n_patients) patients.
inline std::pair<std::vector<PairedSample>, std::vector<PairedSample>> split_validation(
    const std::vector<PairedSample>& samples, double fraction, std::uint64_t seed) {
  require(fraction >= 0.0 && fraction <= 1.0, Err::InvalidConfig, "fraction must be in [0,1]");
  std::vector<std::string> patients;
  for (const auto& s : samples)
    if (std::find(patients.begin(), patients.end(), s.patient_id) == patients.end())
      patients.push_back(s.patient_id);
  require(patients.size() >= 2, Err::TooFewPatients, "patient-level split needs >= 2 patients");

  Rng rng(derive_seed(seed, 0x5311));
  rng.shuffle(patients);
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(patients.size())));
  std::vector<std::string> val_patients(patients.begin(), patients.begin() + std::min(k, patients.size()));

  std::pair<std::vector<PairedSample>, std::vector<PairedSample>> out;
  for (const auto& s : samples) {
    const bool in_val =
        std::find(val_patients.begin(), val_patients.end(), s.patient_id) != val_patients.end();
    (in_val ? out.second : out.first).push_back(s);
  }
  return out;
}

// w_c = N / (2 N_c), so both classes contribute equal total weight.
inline std::array<double, 2> class_weights(const std::vector<int>& labels) {
  std::array<std::size_t, 2> n{0, 0};
  for (int l : labels) {
    require(l == 0 || l == 1, Err::InvalidConfig, "labels must be 0 or 1");
    ++n[static_cast<std::size_t>(l)];
  }
  require(n[0] > 0 && n[1] > 0, Err::SingleClass, "both classes must be present to weight");
  const double total = static_cast<double>(labels.size());
  return {total / (2.0 * static_cast<double>(n[0])), total / (2.0 * static_cast<double>(n[1]))};
}

struct AugmentationPolicy {
  bool flip = false;           // horizontal flip with probability 1/2
  double max_translate = 0.0;  // fraction of patch size, <= 0.10
  double contrast = 0.0;       // deviation-scale jitter bound, <= 0.3

  void validate() const {
    require(max_translate >= 0.0 && max_translate <= 0.10 + 1e-12, Err::InvalidConfig,
            "max_translate must be in [0, 0.10]");
    require(contrast >= 0.0 && contrast <= 0.30 + 1e-12, Err::InvalidConfig,
            "contrast must be in [0, 0.30]");
  }

  bool active() const { return flip || max_translate > 0.0 || contrast > 0.0; }
};

inline Patch flip_horizontal(const Patch& p) {
  Patch out(p.rows, p.cols);
  for (int r = 0; r < p.rows; ++r)
    for (int c = 0; c < p.cols; ++c) out.at(r, c) = p.at(r, p.cols - 1 - c);
  return out;
}

// out(r, c) = in(r - dy, c - dx), zero fill outside.
inline Patch translate_image(const Patch& p, int dy, int dx) {
  Patch out(p.rows, p.cols);
  for (int r = 0; r < p.rows; ++r) {
    const int sr = r - dy;
    if (sr < 0 || sr >= p.rows) continue;
    for (int c = 0; c < p.cols; ++c) {
      const int sc = c - dx;
      if (sc >= 0 && sc < p.cols) out.at(r, c) = p.at(sr, sc);
    }
  }
  return out;
}

// Scale deviations from the patch mean; factor 1 is identity.
inline Patch adjust_contrast(const Patch& p, double factor) {
  const double mean = mean_of(p.v);
  Patch out(p.rows, p.cols);
  for (std::size_t i = 0; i < p.v.size(); ++i)
    out.v[i] = static_cast<float>(mean + factor * (p.v[i] - mean));
  return out;
}

// Identical geometric transform on both channels; contrast jitter is drawn
// per channel. Draw order is fixed (flip coin, dy, dx, contrast x2) so a
// seeded rng reproduces the sample exactly.
inline PairedSample augment(const PairedSample& sample, const AugmentationPolicy& policy, Rng& rng) {
  policy.validate();
  PairedSample out = sample;
  if (policy.flip && rng.bernoulli(0.5))
    for (auto& ch : out.channels) ch = flip_horizontal(ch);
  if (policy.max_translate > 0.0) {
    const int max_dy = static_cast<int>(policy.max_translate * out.channels[0].rows);
    const int max_dx = static_cast<int>(policy.max_translate * out.channels[0].cols);
    const int dy = static_cast<int>(rng.uniform_int(-max_dy, max_dy));
    const int dx = static_cast<int>(rng.uniform_int(-max_dx, max_dx));
    if (dy != 0 || dx != 0)
      for (auto& ch : out.channels) ch = translate_image(ch, dy, dx);
  }
  if (policy.contrast > 0.0)
    for (auto& ch : out.channels)
      ch = adjust_contrast(ch, rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast));
  return out;
}

enum class CohortSource { TrainPublic, TestInstitutional, Phantom };

inline const char* to_string(CohortSource s) {
  switch (s) {
    case CohortSource::TrainPublic: return "train_public";
    case CohortSource::TestInstitutional: return "test_institutional";
    case CohortSource::Phantom: return "phantom";
  }
  return "?";
}

inline CohortSource cohort_source_from_string(const std::string& s) {
  if (s == "train_public") return CohortSource::TrainPublic;
  if (s == "test_institutional") return CohortSource::TestInstitutional;
  if (s == "phantom") return CohortSource::Phantom;
  fail(Err::InvalidConfig, "unknown cohort source '" + s + "'");
}

inline Region region_from_string(const std::string& s) {
  if (s == "PZ") return Region::PZ;
  if (s == "CG") return Region::CG;
  if (s == "GLAND") return Region::GLAND;
  fail(Err::InvalidConfig, "unknown region '" + s + "'");
}

struct ManifestEntry {
  std::string patient_id;
  Region region = Region::GLAND;
  int ggg = 0;
  std::string t2_path, adc_path, mask_path;
};

struct CohortManifest {
  CohortSource source = CohortSource::Phantom;
  std::vector<ManifestEntry> entries;

  void validate() const {
    std::map<std::pair<std::string, Region>, int> seen;
    for (const auto& e : entries) {
      require(e.ggg >= 0 && e.ggg <= 5, Err::OutOfRangeGGG, "grade group must be in 0..5");
      require(++seen[{e.patient_id, e.region}] == 1, Err::InvalidConfig,
              "duplicate manifest entry for patient '" + e.patient_id + "'");
    }
  }
};

inline nlohmann::json to_json(const CohortManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"patient_id", e.patient_id},
                       {"region", to_string(e.region)},
                       {"ggg", e.ggg},
                       {"t2_path", e.t2_path},
                       {"adc_path", e.adc_path},
                       {"mask_path", e.mask_path}});
  return {{"source", to_string(m.source)}, {"entries", entries}};
}

inline CohortManifest manifest_from_json(const nlohmann::json& j) {
  CohortManifest m;
  try {
    m.source = cohort_source_from_string(j.at("source").get<std::string>());
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.patient_id = je.at("patient_id").get<std::string>();
      e.region = region_from_string(je.at("region").get<std::string>());
      e.ggg = je.at("ggg").get<int>();
      e.t2_path = je.at("t2_path").get<std::string>();
      e.adc_path = je.at("adc_path").get<std::string>();
      e.mask_path = je.at("mask_path").get<std::string>();
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(Err::InvalidConfig, std::string("malformed manifest: ") + ex.what());
  }
  m.validate();
  return m;
}

inline void save_manifest(const CohortManifest& m, const std::string& path) {
  m.validate();
  std::ofstream out(path);
  require(out.good(), Err::UnwritablePath, "cannot open '" + path + "' for writing");
  out << to_json(m).dump(2) << '\n';
  require(out.good(), Err::UnwritablePath, "failed writing '" + path + "'");
}

inline CohortManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Err::MissingFile, "cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    fail(Err::InvalidConfig, std::string("malformed manifest: ") + ex.what());
  }
  return manifest_from_json(j);
}

}  // namespace mpmri
