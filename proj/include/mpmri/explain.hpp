// Grad-CAM heatmaps for the zone detectors plus RGB overlay rendering.
#pragma once

#include <cstdint>

#include "mpmri/detector.hpp"
#include "mpmri/roi.hpp"

namespace mpmri {

struct CAMHeatmap {
  Patch values;                        // normalized to [0,1]; all zero iff raw map was all zero
  Patch raw;                           // upsampled pre-normalization map, kept for mass audits
  Patch background;                    // first input channel, kept for overlay rendering
  std::vector<float> channel_weights;  // spatial mean of dlogit/dA per feature channel
  std::string source_layer;
  std::string patient_id;
  int slice_index = 0;
  Pairing pairing = Pairing::T2_ADC;
  double prediction = 0.0;
};

// Class-activation map: channel weights are the spatial means of the logit's
// gradient at the feature layer, the map is the ReLU'd weighted activation
// sum, bilinearly upsampled to the input patch and min-max normalized. A map
// that is identically zero stays zero; a constant positive map normalizes to
// all ones so the peak is always 1 otherwise.
inline CAMHeatmap grad_cam(DetectorModel& model, const PairedSample& sample) {
  auto& net = *model.net;
  const auto x = detail::make_batch({&sample}, model.descriptor);
  const auto logits = net.forward(x, false);

  net.zero_grads();
  Tensor<float> dlogit(1, 1, 1, 1);
  dlogit.v[0] = 1.0f;
  net.backward(dlogit);

  const auto& act = net.feature_output();
  const auto& grad = net.feature_grad();
  const int ch = act.c, fh = act.h, fw = act.w;
  const auto plane = static_cast<std::size_t>(fh) * static_cast<std::size_t>(fw);

  CAMHeatmap cam;
  cam.channel_weights.resize(static_cast<std::size_t>(ch));
  Patch small(fh, fw);
  for (int k = 0; k < ch; ++k) {
    const float* g = grad.v.data() + static_cast<std::size_t>(k) * plane;
    const float* a = act.v.data() + static_cast<std::size_t>(k) * plane;
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += g[i];
    const float w = static_cast<float>(sum / static_cast<double>(plane));
    cam.channel_weights[static_cast<std::size_t>(k)] = w;
    for (std::size_t i = 0; i < plane; ++i) small.v[i] += w * a[i];
  }
  for (auto& v : small.v) v = std::max(v, 0.0f);

  cam.raw = resize_bilinear(small, model.descriptor.input_shape[1], model.descriptor.input_shape[2]);
  cam.values = cam.raw;
  const float maxv = *std::max_element(cam.values.v.begin(), cam.values.v.end());
  if (maxv <= 0.0f) {
    std::fill(cam.values.v.begin(), cam.values.v.end(), 0.0f);
  } else {
    const float minv = *std::min_element(cam.values.v.begin(), cam.values.v.end());
    if (maxv == minv)
      std::fill(cam.values.v.begin(), cam.values.v.end(), 1.0f);
    else
      for (auto& v : cam.values.v) v = (v - minv) / (maxv - minv);
  }

  cam.background = sample.channels[0];
  cam.source_layer = "conv_block_" + std::to_string(model.descriptor.conv_blocks.size());
  cam.patient_id = sample.patient_id;
  cam.slice_index = sample.slice_index;
  cam.pairing = sample.pairing;
  cam.prediction = std::clamp(nn::sigmoid(static_cast<double>(logits.v[0])), 1e-7, 1.0 - 1e-7);
  return cam;
}

struct RGBImage {
  int rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel

  RGBImage() = default;
  RGBImage(int r, int c) : rows(r), cols(c), pixels(static_cast<std::size_t>(r) * c * 3, 0) {}

  std::uint8_t* at(int r, int c) { return pixels.data() + (static_cast<std::size_t>(r) * cols + c) * 3; }
  const std::uint8_t* at(int r, int c) const { return pixels.data() + (static_cast<std::size_t>(r) * cols + c) * 3; }
};

// Piecewise-linear fit of the viridis colormap, perceptually ordered and
// monotone in luminance.
inline std::array<double, 3> colormap_viridis(double t) {
  static constexpr std::array<std::array<double, 3>, 9> anchors{{{68, 1, 84},
                                                                 {72, 40, 120},
                                                                 {62, 74, 137},
                                                                 {49, 104, 142},
                                                                 {38, 130, 142},
                                                                 {31, 158, 137},
                                                                 {53, 183, 121},
                                                                 {109, 205, 89},
                                                                 {253, 231, 37}}};
  t = std::clamp(t, 0.0, 1.0) * (anchors.size() - 1);
  const auto lo = static_cast<std::size_t>(std::min(t, double(anchors.size() - 2)));
  const double f = t - static_cast<double>(lo);
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) out[static_cast<std::size_t>(i)] = ((1.0 - f) * anchors[lo][static_cast<std::size_t>(i)] + f * anchors[lo + 1][static_cast<std::size_t>(i)]) / 255.0;
  return out;
}

// Min-max normalized grayscale rendering; a constant patch renders mid-gray.
inline Patch render_grayscale(const Patch& p) {
  Patch out = p;
  const auto [mn, mx] = std::minmax_element(p.v.begin(), p.v.end());
  if (*mx - *mn <= 0.0f)
    std::fill(out.v.begin(), out.v.end(), 0.5f);
  else
    for (auto& v : out.v) v = (v - *mn) / (*mx - *mn);
  return out;
}

// Alpha-blend the heatmap over the grayscale background. The blend weight
// scales with the heatmap value so zero-activation pixels keep the pure
// background.
inline RGBImage overlay(const CAMHeatmap& heatmap, const Patch& background, double alpha = 0.4) {
  require(heatmap.values.rows == background.rows && heatmap.values.cols == background.cols, Err::ShapeMismatch,
          "heatmap and background shapes differ");
  const Patch gray = render_grayscale(background);
  RGBImage img(background.rows, background.cols);
  for (int r = 0; r < background.rows; ++r)
    for (int c = 0; c < background.cols; ++c) {
      const double h = static_cast<double>(heatmap.values.at(r, c));
      const double g = static_cast<double>(gray.at(r, c));
      const auto color = colormap_viridis(h);
      auto* px = img.at(r, c);
      for (int i = 0; i < 3; ++i) {
        const double v = (1.0 - alpha * h) * g + alpha * h * color[static_cast<std::size_t>(i)];
        px[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
      }
    }
  return img;
}

}  // namespace mpmri
