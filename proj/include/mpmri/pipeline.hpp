// Stage drivers shared by the command-line tool and the test suite. Each
// stage consumes and produces files under the configured directories, so any
// prefix of the pipeline can be rerun or inspected in isolation.
#pragma once

#include <map>
#include <sstream>

#include "mpmri/config.hpp"
#include "mpmri/n4.hpp"
#include "mpmri/triage.hpp"

namespace mpmri {

inline CohortManifest run_phantom_gen(const RunConfig& cfg) {
  PhantomSpec spec = cfg.phantom;
  spec.seed = cfg.seed;
  return generate_cohort(spec, cfg.data_dir, cfg.jobs);
}

// Resamples every series onto the T2 grid at the target spacing, then
// bias-corrects T2 and ADC. Masks travel by nearest neighbour and stay 0/1.
inline CohortManifest run_preprocess(const RunConfig& cfg) {
  const auto manifest = load_manifest((cfg.data_dir / "manifest.json").string());
  manifest.validate();

  std::vector<std::string> patient_order;
  std::map<std::string, std::vector<const ManifestEntry*>> by_patient;
  for (const auto& e : manifest.entries) {
    if (!by_patient.count(e.patient_id)) patient_order.push_back(e.patient_id);
    by_patient[e.patient_id].push_back(&e);
  }

  const auto out_root = cfg.work_dir / "preprocessed";
  std::error_code ec;
  std::filesystem::create_directories(out_root, ec);
  require(!ec, Err::UnwritablePath, "cannot create '" + out_root.string() + "'");

  std::vector<std::vector<ManifestEntry>> new_entries(patient_order.size());
  parallel_for(patient_order.size(), cfg.jobs, [&](std::size_t i) {
    const auto& pid = patient_order[i];
    const auto& entries = by_patient.at(pid);
    const auto dir = out_root / pid;
    std::error_code dir_ec;
    std::filesystem::create_directories(dir, dir_ec);
    require(!dir_ec, Err::UnwritablePath, "cannot create '" + dir.string() + "'");

    ImageVolume t2 = load_volume(entries.front()->t2_path, Modality::T2);
    t2.patient_id = pid;
    ImageVolume t2_iso = resample_isotropic(t2, cfg.preprocess.target_spacing);
    ImageVolume adc = load_volume(entries.front()->adc_path, Modality::ADC);
    adc.patient_id = pid;
    ImageVolume adc_iso = resample_to_reference(adc, t2_iso, Interp::Trilinear);

    auto [t2_corr, t2_field] = n4_bias_correct(t2_iso, cfg.preprocess);
    auto [adc_corr, adc_field] = n4_bias_correct(adc_iso, cfg.preprocess);
    save_volume(t2_corr, (dir / "t2.nii.gz").string());
    save_volume(adc_corr, (dir / "adc.nii.gz").string());

    for (const auto* e : entries) {
      const auto mask_modality = e->region == Region::PZ ? Modality::MaskPZ
                                 : e->region == Region::CG ? Modality::MaskCG
                                                           : Modality::MaskGland;
      ImageVolume mask = load_volume(e->mask_path, mask_modality);
      mask.patient_id = pid;
      const ImageVolume mask_iso = resample_to_reference(mask, t2_iso, Interp::Nearest);
      const std::string mask_name = e->region == Region::PZ   ? "pz_mask.nii.gz"
                                    : e->region == Region::CG ? "cg_mask.nii.gz"
                                                              : "gland_mask.nii.gz";
      save_volume(mask_iso, (dir / mask_name).string());
      new_entries[i].push_back({pid, e->region, e->ggg, (dir / "t2.nii.gz").string(),
                                (dir / "adc.nii.gz").string(), (dir / mask_name).string()});
    }
  });

  CohortManifest out;
  out.source = manifest.source;
  for (const auto& group : new_entries)
    out.entries.insert(out.entries.end(), group.begin(), group.end());
  save_manifest(out, (out_root / "manifest.json").string());
  return out;
}

// --- dataset files -----------------------------------------------------------

namespace detail {

template <class T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  require(in.good(), Err::InvalidConfig, "dataset file truncated");
  return v;
}

inline void write_string(std::ofstream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::ifstream& in) {
  const auto len = read_pod<std::uint32_t>(in);
  std::string s(len, '\0');
  in.read(s.data(), len);
  require(in.good(), Err::InvalidConfig, "dataset file truncated");
  return s;
}

inline void write_sequence_patches(std::ofstream& out, const PatchSequence& seq) {
  write_pod(out, static_cast<std::uint8_t>(seq.modality));
  write_pod(out, static_cast<std::uint32_t>(seq.patches.front().rows));
  write_pod(out, static_cast<std::uint32_t>(seq.patches.front().cols));
  for (const auto& p : seq.patches)
    out.write(reinterpret_cast<const char*>(p.v.data()), static_cast<std::streamsize>(p.v.size() * sizeof(float)));
}

inline void read_sequence_patches(std::ifstream& in, PatchSequence& seq, std::size_t n_slices) {
  seq.modality = static_cast<Modality>(read_pod<std::uint8_t>(in));
  const auto rows = static_cast<int>(read_pod<std::uint32_t>(in));
  const auto cols = static_cast<int>(read_pod<std::uint32_t>(in));
  seq.patches.assign(n_slices, Patch(rows, cols));
  for (auto& p : seq.patches) {
    in.read(reinterpret_cast<char*>(p.v.data()), static_cast<std::streamsize>(p.v.size() * sizeof(float)));
    require(in.good(), Err::InvalidConfig, "dataset file truncated");
  }
}

}  // namespace detail

// Native-endian binary container for cropped sequences; an internal
// artifact, not an interchange format.
inline void save_search_cases(const std::vector<SearchCase>& cases, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Err::UnwritablePath, "cannot write '" + path.string() + "'");
  out.write("MPMD0001", 8);
  detail::write_pod(out, static_cast<std::uint32_t>(cases.size()));
  for (const auto& c : cases) {
    c.t2.validate();
    c.adc.validate();
    detail::write_pod(out, static_cast<std::uint8_t>(c.label));
    detail::write_pod(out, static_cast<std::uint8_t>(c.t2.region));
    detail::write_string(out, c.t2.patient_id);
    for (int v : {c.t2.crop_rect.x_min, c.t2.crop_rect.x_max, c.t2.crop_rect.y_min, c.t2.crop_rect.y_max,
                  c.t2.crop_rect.margin_px})
      detail::write_pod(out, static_cast<std::int32_t>(v));
    detail::write_pod(out, static_cast<std::uint32_t>(c.t2.slice_indices.size()));
    for (int s : c.t2.slice_indices) detail::write_pod(out, static_cast<std::int32_t>(s));
    detail::write_sequence_patches(out, c.t2);
    detail::write_sequence_patches(out, c.adc);
  }
  require(out.good(), Err::UnwritablePath, "short write to '" + path.string() + "'");
}

inline std::vector<SearchCase> load_search_cases(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::MissingFile, "cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::string_view(magic, 8) == "MPMD0001", Err::InvalidConfig,
          "'" + path.string() + "' is not a dataset file");

  const auto count = detail::read_pod<std::uint32_t>(in);
  std::vector<SearchCase> cases(count);
  for (auto& c : cases) {
    c.label = static_cast<int>(detail::read_pod<std::uint8_t>(in));
    const auto region = static_cast<Region>(detail::read_pod<std::uint8_t>(in));
    const auto pid = detail::read_string(in);
    CropRect rect;
    rect.x_min = detail::read_pod<std::int32_t>(in);
    rect.x_max = detail::read_pod<std::int32_t>(in);
    rect.y_min = detail::read_pod<std::int32_t>(in);
    rect.y_max = detail::read_pod<std::int32_t>(in);
    rect.margin_px = detail::read_pod<std::int32_t>(in);
    const auto n_slices = detail::read_pod<std::uint32_t>(in);
    std::vector<int> slices(n_slices);
    for (auto& s : slices) s = detail::read_pod<std::int32_t>(in);
    for (auto* seq : {&c.t2, &c.adc}) {
      seq->region = region;
      seq->patient_id = pid;
      seq->crop_rect = rect;
      seq->slice_indices = slices;
      detail::read_sequence_patches(in, *seq, n_slices);
      seq->validate();
    }
  }
  return cases;
}

// Crops every manifest entry around its region mask and writes one dataset
// file per zone.
inline void run_build_dataset(const RunConfig& cfg) {
  const auto root = cfg.work_dir / "preprocessed";
  const auto manifest = load_manifest((root / "manifest.json").string());
  manifest.validate();

  std::vector<SearchCase> built(manifest.entries.size());
  parallel_for(manifest.entries.size(), cfg.jobs, [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    const auto mask_modality = e.region == Region::PZ ? Modality::MaskPZ
                               : e.region == Region::CG ? Modality::MaskCG
                                                        : Modality::MaskGland;
    const ImageVolume t2 = load_volume(e.t2_path, Modality::T2);
    const ImageVolume adc = load_volume(e.adc_path, Modality::ADC);
    const ImageVolume mask = load_volume(e.mask_path, mask_modality);
    require(t2.same_grid(mask) && adc.same_grid(mask), Err::GridMismatch,
            "series of patient '" + e.patient_id + "' do not share a grid");

    const auto slices = foreground_slices(mask);
    require(!slices.empty(), Err::EmptyMask, "mask of patient '" + e.patient_id + "' has no foreground");
    std::vector<Patch> mask_slices;
    mask_slices.reserve(slices.size());
    for (int s : slices) mask_slices.push_back(extract_slice(mask, s));
    const CropRect rect = sequence_bbox(mask_slices, cfg.dataset.crop_margin_px);

    auto seqs = crop_and_resize({&t2, &adc}, slices, rect, e.region,
                                {cfg.dataset.patch_size, cfg.dataset.patch_size}, cfg.preprocess);
    SearchCase c;
    c.t2 = std::move(seqs[0]);
    c.adc = std::move(seqs[1]);
    c.t2.patient_id = e.patient_id;
    c.adc.patient_id = e.patient_id;
    c.label = assign_label(e.ggg);
    built[i] = std::move(c);
  });

  std::vector<SearchCase> pz_cases, cg_cases;
  for (auto& c : built) {
    require(c.t2.region != Region::GLAND, Err::InvalidConfig,
            "zone datasets need PZ or CG entries, not whole-gland");
    (c.t2.region == Region::PZ ? pz_cases : cg_cases).push_back(std::move(c));
  }
  require(!pz_cases.empty() && !cg_cases.empty(), Err::EmptySequence,
          "dataset needs at least one case per zone");
  save_search_cases(pz_cases, cfg.work_dir / "dataset_pz.bin");
  save_search_cases(cg_cases, cfg.work_dir / "dataset_cg.bin");
}

// --- search / train ----------------------------------------------------------

inline std::filesystem::path bundle_dir(const RunConfig& cfg, Zone zone) {
  return cfg.work_dir / "models" / (zone == Zone::PZ ? "pz" : "cg");
}

inline std::filesystem::path dataset_path(const RunConfig& cfg, Zone zone) {
  return cfg.work_dir / (zone == Zone::PZ ? "dataset_pz.bin" : "dataset_cg.bin");
}

struct ZoneOutcome {
  Zone zone = Zone::PZ;
  double val_auc = 0.0;  // best-epoch validation AUC of the saved model
  int best_trial_id = -1;
  int trials_run = 0;
};

inline SearchConfig make_search_config(const RunConfig& cfg, Zone zone) {
  SearchConfig sc;
  sc.budget = cfg.search.budget;
  sc.seed = derive_seed(cfg.seed, 0x5A, zone == Zone::PZ ? 0 : 1);
  sc.trial_max_epochs = cfg.search.trial_max_epochs;
  sc.final_max_epochs = cfg.search.final_max_epochs;
  sc.patience = cfg.train.patience;
  sc.batch_size = cfg.train.batch_size;
  sc.learning_rate = cfg.train.learning_rate;
  sc.val_fraction = cfg.dataset.val_fraction;
  sc.patch_size = {cfg.dataset.patch_size, cfg.dataset.patch_size};
  sc.zone = zone;
  sc.ledger_path = (cfg.work_dir / (zone == Zone::PZ ? "search_pz.jsonl" : "search_cg.jsonl")).string();
  return sc;
}

// Architecture search plus full retrain of the winner; one model bundle per
// zone lands under work_dir/models.
inline std::vector<ZoneOutcome> run_search_stage(const RunConfig& cfg,
                                                 const std::function<void(const TrialRecord&)>& on_trial = {}) {
  std::vector<ZoneOutcome> outcomes;
  for (const Zone zone : {Zone::PZ, Zone::CG}) {
    const auto cases = load_search_cases(dataset_path(cfg, zone));
    SearchConfig sc = make_search_config(cfg, zone);
    sc.trial_callback = on_trial;
    const SearchResult result = run_search(cfg.search.space, cases, sc);
    save_bundle(result.best, bundle_dir(cfg, zone));

    ZoneOutcome out;
    out.zone = zone;
    out.best_trial_id = result.best_trial_id;
    out.trials_run = static_cast<int>(result.trials.size());
    out.val_auc = result.best.history.epochs[static_cast<std::size_t>(result.best.history.best_epoch)].val_auc;
    outcomes.push_back(out);

    nlohmann::json summary = {{"zone", to_string(zone)},
                              {"best_trial_id", out.best_trial_id},
                              {"trials_run", out.trials_run},
                              {"val_auc", out.val_auc}};
    std::ofstream sout(cfg.work_dir / (zone == Zone::PZ ? "search_pz_summary.json" : "search_cg_summary.json"));
    require(sout.good(), Err::UnwritablePath, "cannot write search summary");
    sout << summary.dump(2) << '\n';
  }
  return outcomes;
}

// Retrains from scratch: with the saved bundle's architecture when one
// exists, otherwise with a fixed default stack.
inline std::vector<ZoneOutcome> run_train_stage(const RunConfig& cfg) {
  std::vector<ZoneOutcome> outcomes;
  for (const Zone zone : {Zone::PZ, Zone::CG}) {
    const auto cases = load_search_cases(dataset_path(cfg, zone));

    ArchitectureDescriptor desc;
    AugmentationPolicy aug;
    PairMode mode = cfg.dataset.pair_mode;
    const auto dir = bundle_dir(cfg, zone);
    if (std::filesystem::exists(dir / "descriptor.json")) {
      const DetectorModel prev = load_bundle(dir);
      desc = prev.descriptor;
      aug = prev.augmentation;
      mode = prev.pair_mode;
    } else {
      desc.conv_blocks = {{16, 3, true}, {16, 3, true}};
      desc.dropout = 0.25;
      desc.dense_units = 64;
      desc.input_shape = {2, cfg.dataset.patch_size, cfg.dataset.patch_size};
      desc.normalization = ArchitectureDescriptor::Norm::Batch;
    }

    std::vector<PairedSample> samples;
    for (const auto& c : cases) {
      auto s = build_pairs(c.t2, c.adc, mode, c.label);
      samples.insert(samples.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    }
    const std::uint64_t zone_seed = derive_seed(cfg.seed, 0x5A, zone == Zone::PZ ? 0 : 1);
    auto [train_set, val_set] = split_validation(samples, cfg.dataset.val_fraction, derive_seed(zone_seed, 0x59));

    DetectorModel model = build_model(desc, derive_seed(zone_seed, 0xF1));
    model.augmentation = aug;
    model.pair_mode = mode;
    model.zone = zone;
    TrainConfig tc;
    tc.max_epochs = cfg.train.max_epochs;
    tc.patience = cfg.train.patience;
    tc.batch_size = cfg.train.batch_size;
    tc.learning_rate = cfg.train.learning_rate;
    tc.seed = derive_seed(zone_seed, 0xF2);
    train(model, train_set, val_set, tc);
    save_bundle(model, dir);

    ZoneOutcome out;
    out.zone = zone;
    out.val_auc = model.history.epochs[static_cast<std::size_t>(model.history.best_epoch)].val_auc;
    outcomes.push_back(out);
  }
  return outcomes;
}

// --- predict / report --------------------------------------------------------

namespace detail {

struct PatientSeries {
  std::string patient_id;
  ImageVolume t2, adc;
  ImageVolume pz_mask, cg_mask;  // dim[0] == 0 when the region is absent
  bool has_pz = false, has_cg = false;
};

inline PatientSeries load_patient_series(const std::vector<const ManifestEntry*>& entries) {
  PatientSeries ps;
  ps.patient_id = entries.front()->patient_id;
  ps.t2 = load_volume(entries.front()->t2_path, Modality::T2);
  ps.adc = load_volume(entries.front()->adc_path, Modality::ADC);
  for (const auto* e : entries) {
    if (e->region == Region::PZ) {
      ps.pz_mask = load_volume(e->mask_path, Modality::MaskPZ);
      ps.has_pz = true;
    } else if (e->region == Region::CG) {
      ps.cg_mask = load_volume(e->mask_path, Modality::MaskCG);
      ps.has_cg = true;
    }
  }
  return ps;
}

struct ZoneSequences {
  PatchSequence t2, adc;
};

inline ZoneSequences crop_zone(const PatientSeries& ps, const ImageVolume& mask, Region region,
                               const std::vector<int>& slices, int margin, std::array<int, 2> patch,
                               const PreprocessConfig& pp) {
  const auto own = foreground_slices(mask);
  require(!own.empty(), Err::EmptyMask, "mask has no foreground");
  std::vector<Patch> mask_slices;
  for (int s : own) mask_slices.push_back(extract_slice(mask, s));
  const CropRect rect = sequence_bbox(mask_slices, margin);
  auto seqs = crop_and_resize({&ps.t2, &ps.adc}, slices, rect, region, patch, pp);
  return {std::move(seqs[0]), std::move(seqs[1])};
}

// Builds the per-patient prediction: sub-region crops when both zone masks
// are present, a single whole-gland crop otherwise.
inline SequencePrediction predict_patient(DetectorModel& pz_model, DetectorModel& cg_model,
                                          const PatientSeries& ps, int margin, const PreprocessConfig& pp,
                                          double threshold) {
  require(pz_model.descriptor.input_shape == cg_model.descriptor.input_shape, Err::ShapeMismatch,
          "zone detectors expect different input shapes");
  const std::array<int, 2> patch{pz_model.descriptor.input_shape[1], pz_model.descriptor.input_shape[2]};

  if (ps.has_pz && ps.has_cg) {
    require(ps.pz_mask.same_grid(ps.t2) && ps.cg_mask.same_grid(ps.t2), Err::GridMismatch,
            "masks and series do not share a grid");
    std::vector<int> slices;
    {
      const auto a = foreground_slices(ps.pz_mask);
      const auto b = foreground_slices(ps.cg_mask);
      std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(slices));
    }
    require(!slices.empty(), Err::EmptyMask, "no slice has gland foreground");
    auto pz_seq = crop_zone(ps, ps.pz_mask, Region::PZ, slices, margin, patch, pp);
    auto cg_seq = crop_zone(ps, ps.cg_mask, Region::CG, slices, margin, patch, pp);
    auto pred = predict_sequence(pz_model, cg_model, pz_seq.t2, pz_seq.adc, cg_seq.t2, cg_seq.adc, threshold);
    pred.patient_id = ps.patient_id;
    return pred;
  }

  // Whole-gland fallback: merge whatever masks exist into one gland mask.
  require(ps.has_pz || ps.has_cg, Err::EmptyMask, "patient has no region mask");
  ImageVolume gland = ps.has_pz ? ps.pz_mask : ps.cg_mask;
  gland.modality = Modality::MaskGland;
  if (ps.has_pz && ps.has_cg)
    for (std::size_t i = 0; i < gland.data.size(); ++i)
      gland.data[i] = std::max(gland.data[i], ps.cg_mask.data[i]);
  const auto slices = foreground_slices(gland);
  require(!slices.empty(), Err::EmptyMask, "gland mask has no foreground");
  auto seq = crop_zone(ps, gland, Region::GLAND, slices, margin, patch, pp);
  auto pred = predict_sequence(pz_model, cg_model, seq.t2, seq.adc, threshold);
  pred.patient_id = ps.patient_id;
  return pred;
}

inline std::vector<std::pair<std::string, std::vector<const ManifestEntry*>>> group_by_patient(
    const CohortManifest& manifest) {
  std::vector<std::pair<std::string, std::vector<const ManifestEntry*>>> groups;
  std::map<std::string, std::size_t> index;
  for (const auto& e : manifest.entries) {
    const auto it = index.find(e.patient_id);
    if (it == index.end()) {
      index[e.patient_id] = groups.size();
      groups.push_back({e.patient_id, {&e}});
    } else {
      groups[it->second].second.push_back(&e);
    }
  }
  return groups;
}

}  // namespace detail

// Scores every preprocessed patient and writes one prediction JSON each
// (the report.json schema without rendered artifacts).
inline std::vector<SequencePrediction> run_predict_stage(const RunConfig& cfg) {
  DetectorModel pz_model = load_bundle(bundle_dir(cfg, Zone::PZ));
  DetectorModel cg_model = load_bundle(bundle_dir(cfg, Zone::CG));

  const auto root = cfg.work_dir / "preprocessed";
  const auto manifest = load_manifest((root / "manifest.json").string());
  const auto groups = detail::group_by_patient(manifest);

  const auto out_dir = cfg.work_dir / "predictions";
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, Err::UnwritablePath, "cannot create '" + out_dir.string() + "'");

  std::vector<SequencePrediction> preds(groups.size());
  parallel_for(groups.size(), cfg.jobs, [&](std::size_t i) {
    // Inference mutates layer caches, so each task scores on its own clones.
    DetectorModel pz = pz_model.clone();
    DetectorModel cg = cg_model.clone();
    const auto series = detail::load_patient_series(groups[i].second);
    preds[i] = detail::predict_patient(pz, cg, series, cfg.dataset.crop_margin_px, cfg.preprocess,
                                       cfg.triage.threshold);
    std::ofstream out(out_dir / (series.patient_id + ".json"), std::ios::binary);
    require(out.good(), Err::UnwritablePath, "cannot write prediction for '" + series.patient_id + "'");
    out << detail::report_to_json(preds[i], {}).dump(2) << '\n';
  });
  return preds;
}

// Full report bundles: prediction JSON, probability curve, and CAM overlays
// for the top-k slices (each explained by the zone that won the slice).
inline void run_report_stage(const RunConfig& cfg) {
  DetectorModel pz_model = load_bundle(bundle_dir(cfg, Zone::PZ));
  DetectorModel cg_model = load_bundle(bundle_dir(cfg, Zone::CG));

  const auto root = cfg.work_dir / "preprocessed";
  const auto manifest = load_manifest((root / "manifest.json").string());
  const auto groups = detail::group_by_patient(manifest);

  parallel_for(groups.size(), cfg.jobs, [&](std::size_t i) {
    DetectorModel pz = pz_model.clone();
    DetectorModel cg = cg_model.clone();
    const auto series = detail::load_patient_series(groups[i].second);
    const std::array<int, 2> patch{pz.descriptor.input_shape[1], pz.descriptor.input_shape[2]};

    const auto pred = detail::predict_patient(pz, cg, series, cfg.dataset.crop_margin_px, cfg.preprocess,
                                              cfg.triage.threshold);
    const int k = std::min<int>(cfg.triage.top_k, static_cast<int>(pred.slice_indices.size()));
    const auto top = rank_slices(pred, k);

    // Rebuild the scored samples so each top slice can be explained.
    const bool subregion = pred.region_mode == RegionMode::Subregion;
    std::map<Zone, std::vector<PairedSample>> samples;
    if (subregion) {
      auto pz_seq = detail::crop_zone(series, series.pz_mask, Region::PZ, pred.slice_indices,
                                      cfg.dataset.crop_margin_px, patch, cfg.preprocess);
      auto cg_seq = detail::crop_zone(series, series.cg_mask, Region::CG, pred.slice_indices,
                                      cfg.dataset.crop_margin_px, patch, cfg.preprocess);
      samples[Zone::PZ] = build_pairs(pz_seq.t2, pz_seq.adc, PairMode::T2AdcOnly, 0);
      samples[Zone::CG] = build_pairs(cg_seq.t2, cg_seq.adc, PairMode::T2AdcOnly, 0);
    } else {
      ImageVolume gland = series.has_pz ? series.pz_mask : series.cg_mask;
      gland.modality = Modality::MaskGland;
      if (series.has_pz && series.has_cg)
        for (std::size_t v = 0; v < gland.data.size(); ++v)
          gland.data[v] = std::max(gland.data[v], series.cg_mask.data[v]);
      auto seq = detail::crop_zone(series, gland, Region::GLAND, pred.slice_indices,
                                   cfg.dataset.crop_margin_px, patch, cfg.preprocess);
      auto shared = build_pairs(seq.t2, seq.adc, PairMode::T2AdcOnly, 0);
      samples[Zone::PZ] = shared;
      samples[Zone::CG] = std::move(shared);
    }

    std::vector<CAMHeatmap> cams;
    for (const auto& r : top) {
      const auto& zone_samples = samples.at(r.zone);
      const auto it = std::find(pred.slice_indices.begin(), pred.slice_indices.end(), r.slice_index);
      const auto idx = static_cast<std::size_t>(it - pred.slice_indices.begin());
      cams.push_back(grad_cam(r.zone == Zone::PZ ? pz : cg, zone_samples[idx]));
    }
    emit_report(pred, cams, cfg.work_dir / "reports" / series.patient_id);
  });
}

// --- selftest ----------------------------------------------------------------

// Invariant suite over a tiny built-in phantom; used by CI and the selftest
// subcommand. Throws on the first violated invariant.
inline void run_selftest(std::ostream& log) {
  const auto check = [&](const char* name, bool ok) {
    log << "selftest " << name << ": " << (ok ? "ok" : "FAIL") << '\n';
    require(ok, Err::InvalidConfig, std::string("selftest failed: ") + name);
  };

  PhantomSpec spec;
  spec.n_patients = 2;
  spec.slice_count_range = {6, 8};
  spec.fov_mm = 48.0;
  spec.spacing = {1.0, 1.0, 3.0};
  spec.seed = 7;
  spec.lesion_prevalence = 1.0;

  const auto a = generate_patient(spec, derive_seed(spec.seed, 0x9A71, 0));
  const auto b = generate_patient(spec, derive_seed(spec.seed, 0x9A71, 0));
  check("phantom_determinism", a.t2.data == b.t2.data && a.adc.data == b.adc.data);

  bool disjoint = true, contained = true;
  for (std::size_t i = 0; i < a.pz_mask.data.size(); ++i) {
    if (a.pz_mask.data[i] > 0.5f && a.cg_mask.data[i] > 0.5f) disjoint = false;
    if (a.lesion_mask.data[i] > 0.5f) {
      const auto& host = a.lesion_region == Region::PZ ? a.pz_mask : a.cg_mask;
      if (host.data[i] <= 0.5f) contained = false;
    }
  }
  check("masks_disjoint", disjoint);
  check("lesion_in_host", contained);

  {
    bool ok = true;
    for (std::size_t n = 1; n <= 10 && ok; ++n)
      ok = pair_count(PairMode::Mixed, n) == 3 * n - 2 && pair_count(PairMode::T2AdcOnly, n) == n;
    check("pairing_law", ok);
  }

  check("auc_worked_example", roc_auc({1, 0, 1, 0}, {0.9, 0.8, 0.7, 0.1}) == 0.75);

  {
    Rng rng(11);
    bool ok = true;
    for (int rep = 0; rep < 20 && ok; ++rep) {
      Patch m(12, 15);
      int fg = 0;
      for (auto& v : m.v) {
        v = rng.bernoulli(0.2) ? 1.0f : 0.0f;
        fg += v > 0.5f;
      }
      if (fg == 0) continue;
      const auto rect = sequence_bbox({m}, 2);
      int x0 = m.cols, x1 = -1, y0 = m.rows, y1 = -1;
      for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c)
          if (m.at(r, c) > 0.5f) {
            x0 = std::min(x0, c);
            x1 = std::max(x1, c);
            y0 = std::min(y0, r);
            y1 = std::max(y1, r);
          }
      ok = rect.x_min == std::max(0, x0 - 2) && rect.x_max == std::min(m.cols - 1, x1 + 2) &&
           rect.y_min == std::max(0, y0 - 2) && rect.y_max == std::min(m.rows - 1, y1 + 2);
    }
    check("bbox_oracle", ok);
  }

  const auto tmp = std::filesystem::temp_directory_path() /
                   ("mpmri_selftest_" + std::to_string(static_cast<unsigned>(splitmix64(spec.seed))));
  std::filesystem::create_directories(tmp);
  {
    save_volume(a.t2, (tmp / "t2.nii.gz").string());
    const auto back = load_volume((tmp / "t2.nii.gz").string(), Modality::T2);
    check("nifti_roundtrip", back.data == a.t2.data && back.dim == a.t2.dim);
  }

  {
    std::vector<float> v(512);
    Rng rng(3);
    for (auto& x : v) x = static_cast<float>(rng.normal(4.0, 2.5));
    zscore_normalize(v);
    const double m = mean_of(v);
    double s2 = 0;
    for (float x : v) s2 += (x - m) * (x - m);
    s2 /= static_cast<double>(v.size() - 1);
    check("zscore_stats", std::abs(m) < 1e-5 && std::abs(std::sqrt(s2) - 1.0) < 1e-4);
  }

  {
    SequencePrediction pred;
    pred.patient_id = "SELFTEST";
    pred.slice_indices = {0, 1, 2, 3, 4};
    pred.pz_probs = {0.1, 0.4, 0.9, 0.3, 0.2};
    pred.cg_probs = {0.2, 0.1, 0.3, 0.8, 0.1};
    pred.top_slices = detail::full_ranking(pred.slice_indices, pred.pz_probs, pred.cg_probs);
    emit_report(pred, {}, tmp / "report");
    const auto back = load_report(tmp / "report" / "report.json");
    check("report_roundtrip", back.patient_id == pred.patient_id && back.slice_indices == pred.slice_indices &&
                                  back.pz_probs == pred.pz_probs && back.cg_probs == pred.cg_probs &&
                                  back.threshold == pred.threshold);
  }

  std::error_code ec;
  std::filesystem::remove_all(tmp, ec);
}

}  // namespace mpmri
