// Whole-sequence scoring: both zone detectors over every slice, slice
// ranking, and the per-patient report bundle (report.json, curve.png, CAM
// overlays).
#pragma once

#include <filesystem>
#include <fstream>
#include <map>

#include "mpmri/explain.hpp"
#include "mpmri/plot.hpp"
#include "mpmri/png.hpp"

namespace mpmri {

enum class RegionMode { Subregion, WholeGland };

inline const char* to_string(RegionMode m) { return m == RegionMode::Subregion ? "subregion" : "whole_gland"; }

inline RegionMode region_mode_from_string(const std::string& s) {
  if (s == "subregion") return RegionMode::Subregion;
  if (s == "whole_gland") return RegionMode::WholeGland;
  fail(Err::InvalidConfig, "unknown region mode '" + s + "'");
}

struct RankedSlice {
  int slice_index = 0;
  Zone zone = Zone::PZ;
  double prob = 0.0;
};

struct SequencePrediction {
  std::string patient_id;
  std::vector<int> slice_indices;
  std::vector<double> pz_probs, cg_probs;
  std::vector<RankedSlice> top_slices;  // full ranking, best first
  double threshold = 0.5;
  RegionMode region_mode = RegionMode::Subregion;
};

namespace detail {

// Each slice is tagged with the zone attaining its max probability (PZ on
// ties), then sorted by probability descending, slice index ascending.
inline std::vector<RankedSlice> full_ranking(const std::vector<int>& slice_indices,
                                             const std::vector<double>& pz_probs,
                                             const std::vector<double>& cg_probs) {
  std::vector<RankedSlice> out(slice_indices.size());
  for (std::size_t i = 0; i < slice_indices.size(); ++i) {
    const bool pz_wins = pz_probs[i] >= cg_probs[i];
    out[i] = {slice_indices[i], pz_wins ? Zone::PZ : Zone::CG, pz_wins ? pz_probs[i] : cg_probs[i]};
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedSlice& a, const RankedSlice& b) {
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.slice_index < b.slice_index;
  });
  return out;
}

inline std::vector<double> score_pairs(DetectorModel& model, const PatchSequence& t2, const PatchSequence& adc) {
  return predict(model, build_pairs(t2, adc, PairMode::T2AdcOnly, 0));
}

}  // namespace detail

// Scores one T2-ADC pair per slice with each detector. Both detectors see
// the same crops; pass gland-crop sequences when sub-region contours are
// absent.
inline SequencePrediction predict_sequence(DetectorModel& pz, DetectorModel& cg, const PatchSequence& t2,
                                           const PatchSequence& adc, double threshold = 0.5) {
  SequencePrediction pred;
  pred.patient_id = t2.patient_id;
  pred.slice_indices = t2.slice_indices;
  pred.threshold = threshold;
  pred.region_mode = t2.region == Region::GLAND ? RegionMode::WholeGland : RegionMode::Subregion;
  pred.pz_probs = detail::score_pairs(pz, t2, adc);
  pred.cg_probs = detail::score_pairs(cg, t2, adc);
  pred.top_slices = detail::full_ranking(pred.slice_indices, pred.pz_probs, pred.cg_probs);
  return pred;
}

// Sub-region variant: each detector scores crops taken around its own zone
// mask. All four sequences must cover the same slices.
inline SequencePrediction predict_sequence(DetectorModel& pz, DetectorModel& cg, const PatchSequence& pz_t2,
                                           const PatchSequence& pz_adc, const PatchSequence& cg_t2,
                                           const PatchSequence& cg_adc, double threshold = 0.5) {
  require(pz_t2.slice_indices == cg_t2.slice_indices, Err::SequenceMisaligned,
          "PZ and CG sequences cover different slices");
  require(pz_t2.patient_id == cg_t2.patient_id, Err::SequenceMisaligned, "PZ and CG sequences mix patients");

  SequencePrediction pred;
  pred.patient_id = pz_t2.patient_id;
  pred.slice_indices = pz_t2.slice_indices;
  pred.threshold = threshold;
  pred.region_mode = RegionMode::Subregion;
  pred.pz_probs = detail::score_pairs(pz, pz_t2, pz_adc);
  pred.cg_probs = detail::score_pairs(cg, cg_t2, cg_adc);
  pred.top_slices = detail::full_ranking(pred.slice_indices, pred.pz_probs, pred.cg_probs);
  return pred;
}

inline std::vector<RankedSlice> rank_slices(const SequencePrediction& pred, int top_k) {
  require(top_k >= 1 && static_cast<std::size_t>(top_k) <= pred.slice_indices.size(), Err::BadK,
          "top_k must be in [1, sequence length]");
  auto ranking = detail::full_ranking(pred.slice_indices, pred.pz_probs, pred.cg_probs);
  ranking.resize(static_cast<std::size_t>(top_k));
  return ranking;
}

namespace detail {

inline nlohmann::json report_to_json(const SequencePrediction& pred,
                                     const std::map<int, std::string>& cam_paths) {
  nlohmann::json slices = nlohmann::json::array();
  const std::size_t n = pred.slice_indices.size();
  for (std::size_t i = 0; i < n; ++i)
    slices.push_back({{"index", pred.slice_indices[i]},
                      {"pz_prob", pred.pz_probs[i]},
                      {"cg_prob", pred.cg_probs[i]},
                      {"marginal", i < 2 || i + 2 >= n}});
  nlohmann::json top = nlohmann::json::array();
  for (const auto& r : pred.top_slices) {
    const auto it = cam_paths.find(r.slice_index);
    top.push_back({{"index", r.slice_index},
                   {"zone", to_string(r.zone)},
                   {"prob", r.prob},
                   {"cam_path", it == cam_paths.end() ? std::string() : it->second}});
  }
  return {{"version", 1},
          {"patient_id", pred.patient_id},
          {"region_mode", to_string(pred.region_mode)},
          {"threshold", pred.threshold},
          {"slices", slices},
          {"top", top}};
}

}  // namespace detail

// Writes report.json and curve.png, plus one overlay PNG per supplied CAM.
// Every CAM must belong to a scored slice; its overlay is named after the
// zone that won that slice in the ranking.
inline void emit_report(const SequencePrediction& pred, const std::vector<CAMHeatmap>& cams,
                        const std::filesystem::path& out_dir) {
  require(!pred.slice_indices.empty(), Err::EmptySequence, "nothing to report");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, Err::UnwritablePath, "cannot create '" + out_dir.string() + "'");

  std::map<int, std::string> cam_paths;
  for (const auto& cam : cams) {
    const auto entry = std::find_if(pred.top_slices.begin(), pred.top_slices.end(),
                                    [&](const RankedSlice& r) { return r.slice_index == cam.slice_index; });
    require(entry != pred.top_slices.end(), Err::SequenceMisaligned,
            "CAM slice " + std::to_string(cam.slice_index) + " is not part of the prediction");
    const std::string name = pred.patient_id + "_" + std::to_string(cam.slice_index) + "_" +
                             to_string(entry->zone) + "_cam.png";
    write_png(overlay(cam, cam.background), out_dir / name);
    cam_paths[cam.slice_index] = name;
  }

  write_png(plot_probability_curves(pred.slice_indices, pred.pz_probs, pred.cg_probs, pred.threshold),
            out_dir / "curve.png");

  std::ofstream out(out_dir / "report.json", std::ios::binary);
  require(out.good(), Err::UnwritablePath, "cannot write report.json");
  out << detail::report_to_json(pred, cam_paths).dump(2) << '\n';
  require(out.good(), Err::UnwritablePath, "short write to report.json");
}

inline SequencePrediction load_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::MissingFile, "cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
    require(j.at("version").get<int>() == 1, Err::InvalidConfig, "unsupported report version");
    SequencePrediction pred;
    pred.patient_id = j.at("patient_id").get<std::string>();
    pred.region_mode = region_mode_from_string(j.at("region_mode").get<std::string>());
    pred.threshold = j.at("threshold").get<double>();
    for (const auto& js : j.at("slices")) {
      pred.slice_indices.push_back(js.at("index").get<int>());
      pred.pz_probs.push_back(js.at("pz_prob").get<double>());
      pred.cg_probs.push_back(js.at("cg_prob").get<double>());
    }
    for (const auto& jt : j.at("top"))
      pred.top_slices.push_back({jt.at("index").get<int>(), zone_from_string(jt.at("zone").get<std::string>()),
                                 jt.at("prob").get<double>()});
    return pred;
  } catch (const nlohmann::json::exception& ex) {
    fail(Err::InvalidConfig, std::string("malformed report: ") + ex.what());
  }
}

}  // namespace mpmri
