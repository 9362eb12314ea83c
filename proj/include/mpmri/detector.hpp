// Zone-specific malignancy detector: searchable architecture family,
// early-stopping trainer, inference, AUC, and the on-disk model bundle.
#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include <nlohmann/json.hpp>

#include "mpmri/dataset.hpp"
#include "mpmri/nn.hpp"

namespace mpmri {

enum class Zone { PZ, CG };

inline const char* to_string(Zone z) { return z == Zone::PZ ? "PZ" : "CG"; }

inline Zone zone_from_string(const std::string& s) {
  if (s == "PZ") return Zone::PZ;
  if (s == "CG") return Zone::CG;
  fail(Err::InvalidConfig, "unknown zone '" + s + "'");
}

struct ConvBlockSpec {
  int filters = 16;
  int kernel = 3;
  bool pool = true;
};

struct ArchitectureDescriptor {
  std::vector<ConvBlockSpec> conv_blocks{{16, 3, true}};
  double dropout = 0.25;
  int dense_units = 64;
  std::array<int, 3> input_shape{2, 64, 64};  // (C, H, W)
  enum class Norm { Batch, None } normalization = Norm::Batch;

  void validate() const {
    require(conv_blocks.size() >= 1 && conv_blocks.size() <= 5, Err::InvalidDescriptor,
            "conv block count must be in 1..5");
    for (const auto& b : conv_blocks) {
      require(b.filters == 16 || b.filters == 32 || b.filters == 64 || b.filters == 128,
              Err::InvalidDescriptor, "filters must be one of 16/32/64/128");
      require(b.kernel == 3 || b.kernel == 5, Err::InvalidDescriptor, "kernel must be 3 or 5");
    }
    require(dropout >= 0.0 && dropout < 1.0, Err::InvalidDescriptor, "dropout must be in [0,1)");
    require(dense_units == 32 || dense_units == 64 || dense_units == 128 || dense_units == 256,
            Err::InvalidDescriptor, "dense_units must be one of 32/64/128/256");
    require(input_shape[0] == 2, Err::InvalidDescriptor, "input must have 2 channels");
    int h = input_shape[1], w = input_shape[2];
    require(h >= 1 && w >= 1, Err::InvalidDescriptor, "input shape must be positive");
    for (const auto& b : conv_blocks)
      if (b.pool) {
        require(h >= 2 && w >= 2, Err::InvalidDescriptor, "too many pooling stages for input size");
        h /= 2;
        w /= 2;
      }
  }
};

struct TrainingHistory {
  struct Epoch {
    double train_loss = 0.0;
    double val_auc = 0.0;
  };
  std::vector<Epoch> epochs;
  int best_epoch = -1;
  bool stopped_early = false;
};

// Stack per the descriptor: [conv -> (batchnorm) -> relu -> (pool)]*, then
// flatten -> dense -> relu -> dropout -> dense(1). The final ReLU of the last
// conv block is the feature layer used by class-activation maps.
template <class T>
nn::Network<T> build_network(const ArchitectureDescriptor& d, std::uint64_t seed) {
  d.validate();
  nn::Network<T> net(seed);
  int ch = d.input_shape[0], h = d.input_shape[1], w = d.input_shape[2];
  for (std::size_t i = 0; i < d.conv_blocks.size(); ++i) {
    const auto& b = d.conv_blocks[i];
    net.add(std::make_unique<nn::Conv2d<T>>(ch, b.filters, b.kernel, net.rng()));
    ch = b.filters;
    if (d.normalization == ArchitectureDescriptor::Norm::Batch)
      net.add(std::make_unique<nn::BatchNorm2d<T>>(ch));
    net.add(std::make_unique<nn::ReLU<T>>());
    if (i + 1 == d.conv_blocks.size()) net.mark_feature_layer();
    if (b.pool) {
      net.add(std::make_unique<nn::MaxPool2<T>>());
      h /= 2;
      w /= 2;
    }
  }
  net.add(std::make_unique<nn::Flatten<T>>());
  net.add(std::make_unique<nn::Dense<T>>(ch * h * w, d.dense_units, net.rng()));
  net.add(std::make_unique<nn::ReLU<T>>());
  net.add(std::make_unique<nn::Dropout<T>>(d.dropout, &net.rng()));
  net.add(std::make_unique<nn::Dense<T>>(d.dense_units, 1, net.rng()));
  return net;
}

struct DetectorModel {
  ArchitectureDescriptor descriptor;
  AugmentationPolicy augmentation;
  PairMode pair_mode = PairMode::Mixed;
  Zone zone = Zone::PZ;
  TrainingHistory history;
  std::unique_ptr<nn::Network<float>> net;

  DetectorModel clone() const {
    DetectorModel out;
    out.descriptor = descriptor;
    out.augmentation = augmentation;
    out.pair_mode = pair_mode;
    out.zone = zone;
    out.history = history;
    out.net = std::make_unique<nn::Network<float>>(build_network<float>(descriptor, 0));
    out.net->set_state(net->state());
    return out;
  }
};

inline DetectorModel build_model(const ArchitectureDescriptor& desc, std::uint64_t seed) {
  DetectorModel m;
  m.descriptor = desc;
  m.net = std::make_unique<nn::Network<float>>(build_network<float>(desc, seed));
  return m;
}

// Probability a random positive outranks a random negative, ties at 0.5.
// Accumulated as exact integer pair counts so the trapezoidal and pairwise
// formulations agree to the last bit.
inline double roc_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  require(labels.size() == scores.size(), Err::ShapeMismatch, "label/score count mismatch");
  long long pos = 0, neg = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, Err::InvalidConfig, "labels must be 0 or 1");
    (l ? pos : neg)++;
  }
  require(pos > 0 && neg > 0, Err::SingleClass, "AUC needs both classes");

  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Walk threshold groups of equal score: each negative in a group scores
  // 2 points against every strictly higher positive and 1 against ties.
  long long twice_wins = 0, tp_before = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    long long dp = 0, dn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? dp : dn)++;
      ++j;
    }
    twice_wins += dn * (2 * tp_before + dp);
    tp_before += dp;
    i = j;
  }
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

namespace detail {

inline Tensor<float> make_batch(const std::vector<const PairedSample*>& samples,
                                const ArchitectureDescriptor& desc) {
  const int h = desc.input_shape[1], w = desc.input_shape[2];
  Tensor<float> x(static_cast<int>(samples.size()), 2, h, w);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (int ch = 0; ch < 2; ++ch) {
      const Patch& p = samples[i]->channels[static_cast<std::size_t>(ch)];
      require(p.rows == h && p.cols == w, Err::ShapeMismatch, "sample shape does not match model input");
      std::copy(p.v.begin(), p.v.end(),
                x.v.begin() + (static_cast<std::size_t>(i) * 2 + static_cast<std::size_t>(ch)) * p.v.size());
    }
  return x;
}

}  // namespace detail

inline std::vector<double> predict(DetectorModel& model, const std::vector<PairedSample>& samples) {
  std::vector<double> probs;
  probs.reserve(samples.size());
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < samples.size(); start += kBatch) {
    std::vector<const PairedSample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + kBatch); ++i) batch.push_back(&samples[i]);
    const auto logits = model.net->forward(detail::make_batch(batch, model.descriptor), false);
    for (int i = 0; i < logits.n; ++i) {
      const double p = nn::sigmoid(static_cast<double>(logits.v[static_cast<std::size_t>(i)]));
      probs.push_back(std::clamp(p, 1e-7, 1.0 - 1e-7));
    }
  }
  return probs;
}

struct TrainConfig {
  int max_epochs = 100;
  int patience = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::optional<std::array<double, 2>> class_wts;  // computed from labels when unset
  std::uint64_t seed = 0;
  // Test seam: replaces the per-epoch validation AUC (the stopping rule is
  // exercised against scripted metric sequences).
  std::function<double(int)> val_metric_override;
  std::function<void(int, const TrainingHistory&)> epoch_callback;
};

// Class-weighted logistic training with early stopping on validation AUC;
// the returned model carries the best epoch's parameters.
inline void train(DetectorModel& model, const std::vector<PairedSample>& train_samples,
                  const std::vector<PairedSample>& val_samples, const TrainConfig& cfg) {
  require(cfg.max_epochs >= 1 && cfg.patience >= 1, Err::InvalidConfig, "epochs and patience must be >= 1");
  require(cfg.batch_size >= 1, Err::InvalidConfig, "batch size must be >= 1");
  require(!train_samples.empty(), Err::EmptySequence, "no training samples");
  model.augmentation.validate();

  std::vector<int> train_labels;
  train_labels.reserve(train_samples.size());
  for (const auto& s : train_samples) train_labels.push_back(s.label);
  const auto wts = cfg.class_wts.value_or(class_weights(train_labels));

  std::vector<int> val_labels;
  for (const auto& s : val_samples) val_labels.push_back(s.label);
  if (!cfg.val_metric_override) {
    bool has0 = false, has1 = false;
    for (int l : val_labels) (l ? has1 : has0) = true;
    require(has0 && has1, Err::SingleClass, "validation set needs both classes");
  }

  Rng shuffle_rng(derive_seed(cfg.seed, 0x7A1));
  nn::Adam<float> opt(cfg.learning_rate);
  model.history = {};

  std::vector<std::size_t> order(train_samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double best_auc = -1.0;
  std::vector<float> best_state = model.net->state();
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<PairedSample> augmented;
      std::vector<const PairedSample*> batch;
      std::vector<int> labels;
      augmented.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = train_samples[order[k]];
        if (model.augmentation.active()) {
          // Per-sample seed: reproducible regardless of batch composition.
          Rng r(derive_seed(cfg.seed, 0xA06, static_cast<std::uint64_t>(epoch), order[k]));
          augmented.push_back(augment(s, model.augmentation, r));
        } else {
          augmented.push_back(s);
        }
        labels.push_back(s.label);
      }
      for (const auto& s : augmented) batch.push_back(&s);

      const auto x = detail::make_batch(batch, model.descriptor);
      const auto logits = model.net->forward(x, true);
      Tensor<float> dlogits;
      const float loss = nn::weighted_bce_with_logits(logits, labels, wts, &dlogits);
      model.net->zero_grads();
      model.net->backward(dlogits);
      opt.step(model.net->params());
      loss_sum += static_cast<double>(loss) * static_cast<double>(end - start);
    }

    const double train_loss = loss_sum / static_cast<double>(train_samples.size());
    const double val_auc = cfg.val_metric_override ? cfg.val_metric_override(epoch)
                                                   : roc_auc(val_labels, predict(model, val_samples));
    model.history.epochs.push_back({train_loss, val_auc});

    if (val_auc > best_auc) {
      best_auc = val_auc;
      model.history.best_epoch = epoch;
      best_state = model.net->state();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      model.history.stopped_early = true;
      if (cfg.epoch_callback) cfg.epoch_callback(epoch, model.history);
      break;
    }
    if (cfg.epoch_callback) cfg.epoch_callback(epoch, model.history);
  }

  model.net->set_state(best_state);
}

// --- model bundle -----------------------------------------------------------

inline nlohmann::json descriptor_to_json(const DetectorModel& m) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : m.descriptor.conv_blocks)
    blocks.push_back({{"filters", b.filters}, {"kernel", b.kernel}, {"pool", b.pool}});
  return {{"format_version", 1},
          {"zone", to_string(m.zone)},
          {"pair_mode", to_string(m.pair_mode)},
          {"conv_blocks", blocks},
          {"dropout", m.descriptor.dropout},
          {"dense_units", m.descriptor.dense_units},
          {"input_shape", m.descriptor.input_shape},
          {"normalization", m.descriptor.normalization == ArchitectureDescriptor::Norm::Batch ? "batch" : "none"},
          {"augmentation",
           {{"flip", m.augmentation.flip},
            {"max_translate", m.augmentation.max_translate},
            {"contrast", m.augmentation.contrast}}}};
}

inline void save_bundle(const DetectorModel& model, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, Err::UnwritablePath, "cannot create bundle directory '" + dir.string() + "'");

  {
    std::ofstream out(dir / "descriptor.json");
    require(out.good(), Err::UnwritablePath, "cannot write descriptor.json");
    out << descriptor_to_json(model).dump(2) << '\n';
  }
  {
    const auto state = model.net->state();
    std::ofstream out(dir / "weights.bin", std::ios::binary);
    require(out.good(), Err::UnwritablePath, "cannot write weights.bin");
    const char magic[8] = {'M', 'P', 'M', 'W', '0', '0', '0', '1'};
    out.write(magic, 8);
    const std::uint64_t count = state.size();
    out.write(reinterpret_cast<const char*>(&count), 8);
    out.write(reinterpret_cast<const char*>(state.data()), static_cast<std::streamsize>(count * sizeof(float)));
    require(out.good(), Err::UnwritablePath, "failed writing weights.bin");
  }
  {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : model.history.epochs)
      epochs.push_back({{"train_loss", e.train_loss}, {"val_auc", e.val_auc}});
    const nlohmann::json j = {{"best_epoch", model.history.best_epoch},
                              {"stopped_early", model.history.stopped_early},
                              {"epochs", epochs}};
    std::ofstream out(dir / "history.json");
    require(out.good(), Err::UnwritablePath, "cannot write history.json");
    out << j.dump(2) << '\n';
  }
}

inline DetectorModel load_bundle(const std::filesystem::path& dir) {
  for (const char* f : {"descriptor.json", "weights.bin", "history.json"})
    require(std::filesystem::exists(dir / f), Err::MissingModelBundle,
            "bundle file missing: " + (dir / f).string());

  DetectorModel m;
  try {
    std::ifstream in(dir / "descriptor.json");
    nlohmann::json j;
    in >> j;
    m.zone = zone_from_string(j.at("zone").get<std::string>());
    m.pair_mode = pair_mode_from_string(j.at("pair_mode").get<std::string>());
    m.descriptor.conv_blocks.clear();
    for (const auto& jb : j.at("conv_blocks"))
      m.descriptor.conv_blocks.push_back(
          {jb.at("filters").get<int>(), jb.at("kernel").get<int>(), jb.at("pool").get<bool>()});
    m.descriptor.dropout = j.at("dropout").get<double>();
    m.descriptor.dense_units = j.at("dense_units").get<int>();
    const auto shape = j.at("input_shape").get<std::vector<int>>();
    require(shape.size() == 3, Err::InvalidDescriptor, "input_shape must have 3 entries");
    m.descriptor.input_shape = {shape[0], shape[1], shape[2]};
    const auto norm = j.at("normalization").get<std::string>();
    require(norm == "batch" || norm == "none", Err::InvalidDescriptor, "unknown normalization");
    m.descriptor.normalization =
        norm == "batch" ? ArchitectureDescriptor::Norm::Batch : ArchitectureDescriptor::Norm::None;
    const auto& ja = j.at("augmentation");
    m.augmentation.flip = ja.at("flip").get<bool>();
    m.augmentation.max_translate = ja.at("max_translate").get<double>();
    m.augmentation.contrast = ja.at("contrast").get<double>();
  } catch (const nlohmann::json::exception& ex) {
    fail(Err::InvalidDescriptor, std::string("malformed descriptor.json: ") + ex.what());
  }
  m.descriptor.validate();
  m.augmentation.validate();

  {
    std::ifstream in(dir / "weights.bin", std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    require(in.good() && std::string_view(magic, 8) == "MPMW0001", Err::MissingModelBundle,
            "weights.bin has wrong magic");
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 8);
    std::vector<float> state(count);
    in.read(reinterpret_cast<char*>(state.data()), static_cast<std::streamsize>(count * sizeof(float)));
    require(in.good(), Err::MissingModelBundle, "weights.bin truncated");
    m.net = std::make_unique<nn::Network<float>>(build_network<float>(m.descriptor, 0));
    m.net->set_state(state);
  }
  try {
    std::ifstream in(dir / "history.json");
    nlohmann::json j;
    in >> j;
    m.history.best_epoch = j.at("best_epoch").get<int>();
    m.history.stopped_early = j.at("stopped_early").get<bool>();
    for (const auto& je : j.at("epochs"))
      m.history.epochs.push_back({je.at("train_loss").get<double>(), je.at("val_auc").get<double>()});
  } catch (const nlohmann::json::exception& ex) {
    fail(Err::InvalidDescriptor, std::string("malformed history.json: ") + ex.what());
  }
  return m;
}

}  // namespace mpmri
