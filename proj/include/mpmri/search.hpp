// Sequential model-based search over architecture, augmentation and input
// mode: 5 uniform warm-up trials, then a Gaussian-process surrogate over
// one-hot coordinates picks the unevaluated point with maximal expected
// improvement. The whole space is discrete and enumerable.
#pragma once

#include <chrono>
#include <set>

#include "mpmri/detector.hpp"

namespace mpmri {

struct SearchSpace {
  // Dimension order is fixed: blocks, filters, kernel, dropout, dense,
  // normalization, flip, translate, contrast, mode.
  std::vector<int> blocks{1, 2, 3};
  std::vector<int> filters{16, 32};
  std::vector<int> kernels{3, 5};
  std::vector<double> dropouts{0.0, 0.25, 0.5};
  std::vector<int> dense_units{32, 64};
  std::vector<std::string> normalizations{"batch", "none"};
  std::vector<int> flips{0, 1};
  std::vector<double> translates{0.0, 0.05, 0.10};
  std::vector<double> contrasts{0.0, 0.15, 0.30};
  std::vector<std::string> modes{"mixed", "t2_adc_only"};

  std::vector<std::size_t> dim_sizes() const {
    return {blocks.size(),      filters.size(), kernels.size(),    dropouts.size(),
            dense_units.size(), normalizations.size(), flips.size(), translates.size(),
            contrasts.size(),   modes.size()};
  }

  std::size_t size() const {
    std::size_t n = 1;
    for (std::size_t d : dim_sizes()) n *= d;
    return n;
  }

  void validate() const {
    const auto check = [](const auto& v, const char* what) {
      require(!v.empty(), Err::InvalidConfig, std::string("empty search dimension: ") + what);
      auto sorted = v;
      std::sort(sorted.begin(), sorted.end());
      require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), Err::InvalidConfig,
              std::string("duplicate levels in search dimension: ") + what);
    };
    check(blocks, "blocks");
    check(filters, "filters");
    check(kernels, "kernels");
    check(dropouts, "dropouts");
    check(dense_units, "dense_units");
    check(normalizations, "normalizations");
    check(flips, "flips");
    check(translates, "translates");
    check(contrasts, "contrasts");
    check(modes, "modes");
    for (int b : blocks) require(b >= 1 && b <= 5, Err::InvalidConfig, "blocks level out of range");
    for (const auto& n : normalizations)
      require(n == "batch" || n == "none", Err::InvalidConfig, "unknown normalization level");
    for (int f : flips) require(f == 0 || f == 1, Err::InvalidConfig, "flip level must be 0 or 1");
    for (const auto& m : modes) pair_mode_from_string(m);
    // Architecture levels are validated against descriptor bounds up front so
    // every point in the space maps to a buildable model.
    ArchitectureDescriptor probe;
    for (int f : filters)
      for (int k : kernels) {
        probe.conv_blocks = {{f, k, true}};
        probe.validate();
      }
    for (double d : dropouts) require(d >= 0.0 && d < 1.0, Err::InvalidConfig, "dropout level out of range");
    for (int du : dense_units) {
      probe.conv_blocks = {{filters.front(), kernels.front(), true}};
      probe.dense_units = du;
      probe.validate();
    }
    AugmentationPolicy pol;
    for (double t : translates) {
      pol.max_translate = t;
      pol.validate();
    }
    pol.max_translate = 0.0;
    for (double c : contrasts) {
      pol.contrast = c;
      pol.validate();
    }
  }

  std::vector<int> decode(std::size_t flat) const {
    const auto sizes = dim_sizes();
    std::vector<int> levels(sizes.size());
    for (std::size_t d = sizes.size(); d-- > 0;) {
      levels[d] = static_cast<int>(flat % sizes[d]);
      flat /= sizes[d];
    }
    return levels;
  }

  std::size_t encode(const std::vector<int>& levels) const {
    const auto sizes = dim_sizes();
    require(levels.size() == sizes.size(), Err::InvalidConfig, "level vector has wrong arity");
    std::size_t flat = 0;
    for (std::size_t d = 0; d < sizes.size(); ++d) {
      require(levels[d] >= 0 && static_cast<std::size_t>(levels[d]) < sizes[d], Err::InvalidConfig,
              "level index out of range");
      flat = flat * sizes[d] + static_cast<std::size_t>(levels[d]);
    }
    return flat;
  }

  ArchitectureDescriptor descriptor_at(const std::vector<int>& levels, std::array<int, 2> patch_hw) const {
    encode(levels);  // bounds check
    ArchitectureDescriptor d;
    d.conv_blocks.assign(static_cast<std::size_t>(blocks[static_cast<std::size_t>(levels[0])]),
                         {filters[static_cast<std::size_t>(levels[1])], kernels[static_cast<std::size_t>(levels[2])], true});
    d.dropout = dropouts[static_cast<std::size_t>(levels[3])];
    d.dense_units = dense_units[static_cast<std::size_t>(levels[4])];
    d.input_shape = {2, patch_hw[0], patch_hw[1]};
    d.normalization = normalizations[static_cast<std::size_t>(levels[5])] == "batch"
                          ? ArchitectureDescriptor::Norm::Batch
                          : ArchitectureDescriptor::Norm::None;
    d.validate();
    return d;
  }

  AugmentationPolicy policy_at(const std::vector<int>& levels) const {
    encode(levels);
    AugmentationPolicy p;
    p.flip = flips[static_cast<std::size_t>(levels[6])] != 0;
    p.max_translate = translates[static_cast<std::size_t>(levels[7])];
    p.contrast = contrasts[static_cast<std::size_t>(levels[8])];
    p.validate();
    return p;
  }

  PairMode mode_at(const std::vector<int>& levels) const {
    encode(levels);
    return pair_mode_from_string(modes[static_cast<std::size_t>(levels[9])]);
  }
};

struct TrialRecord {
  int trial_id = 0;
  std::vector<int> levels;
  double objective = 0.0;  // best validation AUC of the trial, 0 on failure
  TrainingHistory history;
  double wall_seconds = 0.0;
};

namespace detail {

inline std::vector<double> one_hot(const SearchSpace& space, const std::vector<int>& levels) {
  const auto sizes = space.dim_sizes();
  std::size_t width = 0;
  for (std::size_t s : sizes) width += s;
  std::vector<double> x(width, 0.0);
  std::size_t off = 0;
  for (std::size_t d = 0; d < sizes.size(); ++d) {
    x[off + static_cast<std::size_t>(levels[d])] = 1.0;
    off += sizes[d];
  }
  return x;
}

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace detail

// Next point to evaluate. The first 5 suggestions are uniform random over the
// unevaluated points; afterwards a GP with a squared-exponential kernel is fit
// to (point, objective) pairs and expected improvement is maximized over the
// remaining points (ties resolved toward the lowest enumeration index).
inline std::vector<int> suggest(const SearchSpace& space, const std::vector<TrialRecord>& completed,
                                Rng& rng) {
  space.validate();
  constexpr std::size_t kWarmup = 5;
  constexpr double kLengthScale = 2.0;
  constexpr double kNoise = 0.05;
  constexpr double kXi = 0.01;

  std::set<std::size_t> seen;
  for (const auto& t : completed) seen.insert(space.encode(t.levels));
  const std::size_t total = space.size();
  require(seen.size() < total, Err::SpaceExhausted, "all search points evaluated");

  std::vector<std::size_t> open;
  open.reserve(total - seen.size());
  for (std::size_t f = 0; f < total; ++f)
    if (!seen.count(f)) open.push_back(f);

  if (completed.size() < kWarmup)
    return space.decode(open[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(open.size()) - 1))]);

  const auto n = static_cast<Eigen::Index>(completed.size());
  std::vector<std::vector<double>> xs(completed.size());
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    xs[static_cast<std::size_t>(i)] = detail::one_hot(space, completed[static_cast<std::size_t>(i)].levels);
    y[i] = completed[static_cast<std::size_t>(i)].objective;
  }
  const double ymean = y.mean();
  double ystd = std::sqrt((y.array() - ymean).square().sum() / static_cast<double>(n));
  if (ystd < 1e-12) ystd = 1.0;
  const Eigen::VectorXd yn = (y.array() - ymean) / ystd;

  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      k(i, j) = std::exp(-detail::sq_dist(xs[static_cast<std::size_t>(i)], xs[static_cast<std::size_t>(j)]) /
                         (2.0 * kLengthScale * kLengthScale));
  k.diagonal().array() += kNoise * kNoise;
  const Eigen::LLT<Eigen::MatrixXd> llt(k);
  require(llt.info() == Eigen::Success, Err::NonFiniteLoss, "surrogate covariance not positive definite");
  const Eigen::VectorXd alpha = llt.solve(yn);
  const double f_best = yn.maxCoeff();

  std::size_t best_flat = open.front();
  double best_ei = -1.0;
  Eigen::VectorXd kstar(n);
  for (std::size_t f : open) {
    const auto xc = detail::one_hot(space, space.decode(f));
    for (Eigen::Index i = 0; i < n; ++i)
      kstar[i] = std::exp(-detail::sq_dist(xc, xs[static_cast<std::size_t>(i)]) / (2.0 * kLengthScale * kLengthScale));
    const double mu = kstar.dot(alpha);
    const double var = std::max(0.0, 1.0 - kstar.dot(llt.solve(kstar)));
    const double sigma = std::sqrt(var);
    double ei = 0.0;
    if (sigma > 1e-12) {
      const double imp = mu - f_best - kXi;
      const double z = imp / sigma;
      ei = imp * detail::normal_cdf(z) + sigma * detail::normal_pdf(z);
    }
    if (ei > best_ei) {
      best_ei = ei;
      best_flat = f;
    }
  }
  return space.decode(best_flat);
}

// One region's aligned sequences plus its weak label; the unit the search
// rebuilds per-mode datasets from.
struct SearchCase {
  PatchSequence t2;
  PatchSequence adc;
  int label = 0;
};

struct SearchConfig {
  int budget = 20;
  std::uint64_t seed = 0;
  int trial_max_epochs = 30;  // per-trial budget; the winner is retrained in full
  int final_max_epochs = 100;
  int patience = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double val_fraction = 1.0 / 3.0;
  std::array<int, 2> patch_size{64, 64};
  Zone zone = Zone::PZ;
  std::string ledger_path;  // optional JSONL trial ledger; enables resumption
  std::function<void(const TrialRecord&)> trial_callback;
};

struct SearchResult {
  DetectorModel best;
  std::vector<TrialRecord> trials;
  int best_trial_id = 0;
};

namespace detail {

inline nlohmann::json trial_to_json(const TrialRecord& t) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : t.history.epochs)
    epochs.push_back({{"train_loss", e.train_loss}, {"val_auc", e.val_auc}});
  return {{"trial_id", t.trial_id},
          {"levels", t.levels},
          {"objective", t.objective},
          {"wall_seconds", t.wall_seconds},
          {"history",
           {{"best_epoch", t.history.best_epoch}, {"stopped_early", t.history.stopped_early}, {"epochs", epochs}}}};
}

inline TrialRecord trial_from_json(const nlohmann::json& j) {
  TrialRecord t;
  try {
    t.trial_id = j.at("trial_id").get<int>();
    t.levels = j.at("levels").get<std::vector<int>>();
    t.objective = j.at("objective").get<double>();
    t.wall_seconds = j.at("wall_seconds").get<double>();
    const auto& jh = j.at("history");
    t.history.best_epoch = jh.at("best_epoch").get<int>();
    t.history.stopped_early = jh.at("stopped_early").get<bool>();
    for (const auto& je : jh.at("epochs"))
      t.history.epochs.push_back({je.at("train_loss").get<double>(), je.at("val_auc").get<double>()});
  } catch (const nlohmann::json::exception& ex) {
    fail(Err::InvalidConfig, std::string("malformed trial record: ") + ex.what());
  }
  return t;
}

inline std::vector<TrialRecord> load_trial_ledger(const std::string& path) {
  std::vector<TrialRecord> trials;
  std::ifstream in(path);
  if (!in.good()) return trials;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      fail(Err::InvalidConfig, std::string("malformed trial ledger line: ") + ex.what());
    }
    trials.push_back(trial_from_json(j));
  }
  for (std::size_t i = 0; i < trials.size(); ++i)
    require(trials[i].trial_id == static_cast<int>(i), Err::InvalidConfig,
            "trial ledger ids must be dense from 0");
  return trials;
}

}  // namespace detail

// Run up to `budget` trials (resuming from the ledger when present), then
// retrain the best point at full epoch budget. Fully deterministic under the
// seed: suggestion randomness is keyed per trial id.
inline SearchResult run_search(const SearchSpace& space, const std::vector<SearchCase>& cases,
                               const SearchConfig& cfg) {
  space.validate();
  require(cfg.budget >= 1, Err::InvalidConfig, "search budget must be >= 1");
  require(!cases.empty(), Err::EmptySequence, "no search cases given");

  // Datasets per input mode are built once and shared across trials; the
  // patient-level split is keyed by the same seed for both modes.
  std::map<std::string, std::pair<std::vector<PairedSample>, std::vector<PairedSample>>> data;
  for (const auto& mode_name : space.modes) {
    const PairMode mode = pair_mode_from_string(mode_name);
    std::vector<PairedSample> samples;
    for (const auto& c : cases) {
      auto s = build_pairs(c.t2, c.adc, mode, c.label);
      samples.insert(samples.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    }
    data[mode_name] = split_validation(samples, cfg.val_fraction, derive_seed(cfg.seed, 0x59));
  }

  std::vector<TrialRecord> trials;
  if (!cfg.ledger_path.empty()) trials = detail::load_trial_ledger(cfg.ledger_path);
  require(static_cast<int>(trials.size()) <= cfg.budget, Err::InvalidConfig,
          "trial ledger already exceeds the budget");

  const auto run_trial_training = [&](const std::vector<int>& levels, int max_epochs,
                                      std::uint64_t build_seed, std::uint64_t train_seed) {
    DetectorModel model = build_model(space.descriptor_at(levels, cfg.patch_size), build_seed);
    model.augmentation = space.policy_at(levels);
    model.pair_mode = space.mode_at(levels);
    model.zone = cfg.zone;
    TrainConfig tc;
    tc.max_epochs = max_epochs;
    tc.patience = cfg.patience;
    tc.batch_size = cfg.batch_size;
    tc.learning_rate = cfg.learning_rate;
    tc.seed = train_seed;
    const auto& [train_set, val_set] = data.at(space.modes[static_cast<std::size_t>(levels[9])]);
    train(model, train_set, val_set, tc);
    return model;
  };

  for (int t = static_cast<int>(trials.size()); t < cfg.budget; ++t) {
    std::vector<int> levels;
    {
      Rng trial_rng(derive_seed(cfg.seed, 0x5447, static_cast<std::uint64_t>(t)));
      try {
        levels = suggest(space, trials, trial_rng);
      } catch (const PipelineError& e) {
        if (e.code() == Err::SpaceExhausted) break;
        throw;
      }
    }
    TrialRecord rec;
    rec.trial_id = t;
    rec.levels = levels;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      DetectorModel model = run_trial_training(levels, cfg.trial_max_epochs,
                                               derive_seed(cfg.seed, 0x313, static_cast<std::uint64_t>(t)),
                                               derive_seed(cfg.seed, 0x7121, static_cast<std::uint64_t>(t)));
      rec.history = model.history;
      rec.objective = model.history.epochs[static_cast<std::size_t>(model.history.best_epoch)].val_auc;
    } catch (const PipelineError&) {
      rec.objective = 0.0;  // failed trial scores zero and the search continues
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    trials.push_back(rec);
    if (!cfg.ledger_path.empty()) {
      std::ofstream out(cfg.ledger_path, std::ios::app);
      require(out.good(), Err::UnwritablePath, "cannot append to trial ledger");
      out << detail::trial_to_json(rec).dump() << '\n';
    }
    if (cfg.trial_callback) cfg.trial_callback(rec);
  }
  require(!trials.empty(), Err::SpaceExhausted, "no trials were run");

  int best_id = 0;
  for (std::size_t i = 1; i < trials.size(); ++i)
    if (trials[i].objective > trials[static_cast<std::size_t>(best_id)].objective) best_id = static_cast<int>(i);

  SearchResult result;
  result.trials = trials;
  result.best_trial_id = best_id;
  result.best = run_trial_training(trials[static_cast<std::size_t>(best_id)].levels, cfg.final_max_epochs,
                                   derive_seed(cfg.seed, 0xF1), derive_seed(cfg.seed, 0xF2));
  return result;
}

}  // namespace mpmri
