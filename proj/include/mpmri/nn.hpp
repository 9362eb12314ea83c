// Minimal reverse-mode CNN engine: NCHW tensors, conv/batchnorm/pool/dense
// layers, weighted logistic loss and Adam. Templated on the scalar so tests
// can run gradient checks in double while production uses float.
#pragma once

#include <memory>

#include <Eigen/Dense>

#include "mpmri/core.hpp"

namespace mpmri {

template <class T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

  std::size_t size() const { return v.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_stride() const { return static_cast<std::size_t>(c) * h * w; }

  T& at(int i, int ch, int y, int x) {
    return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }
  T at(int i, int ch, int y, int x) const {
    return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

namespace nn {

template <class T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatrixRM<T>>;

// A trainable parameter block and its gradient accumulator.
template <class T>
struct ParamView {
  std::vector<T>* w = nullptr;
  std::vector<T>* g = nullptr;
};

template <class T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool training) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
  virtual std::vector<ParamView<T>> params() { return {}; }
  // Full layer state (trainables plus buffers such as running stats), used
  // for best-epoch snapshots and on-disk weights.
  virtual void append_state(std::vector<T>& out) const {}
  virtual std::size_t read_state(const T* src) { return 0; }
};

template <class T>
class Conv2d final : public Layer<T> {
 public:
  // Same-padded, stride-1 convolution; He-initialized.
  Conv2d(int in_ch, int out_ch, int kernel, Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), pad_(kernel / 2) {
    require(kernel % 2 == 1, Err::InvalidDescriptor, "kernel must be odd");
    const std::size_t fan_in = static_cast<std::size_t>(in_ch) * kernel * kernel;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    w_.resize(static_cast<std::size_t>(out_ch) * fan_in);
    for (auto& x : w_) x = static_cast<T>(rng.normal(0.0, stddev));
    b_.assign(static_cast<std::size_t>(out_ch), T(0));
    gw_.assign(w_.size(), T(0));
    gb_.assign(b_.size(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    require(x.c == in_ch_, Err::ShapeMismatch, "conv input channels mismatch");
    x_ = x;
    Tensor<T> y(x.n, out_ch_, x.h, x.w);
    const std::size_t ckk = static_cast<std::size_t>(in_ch_) * k_ * k_;
    MatrixRM<T> cols(ckk, x.plane());
    CMapRM<T> wmat(w_.data(), out_ch_, static_cast<Eigen::Index>(ckk));
    for (int i = 0; i < x.n; ++i) {
      im2col(x, i, cols);
      MapRM<T> out(y.v.data() + i * y.sample_stride(), out_ch_, static_cast<Eigen::Index>(y.plane()));
      out.noalias() = wmat * cols;
      for (int oc = 0; oc < out_ch_; ++oc) out.row(oc).array() += b_[oc];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(x_.n, x_.c, x_.h, x_.w);
    const std::size_t ckk = static_cast<std::size_t>(in_ch_) * k_ * k_;
    MatrixRM<T> cols(ckk, x_.plane());
    MatrixRM<T> dcols(ckk, x_.plane());
    CMapRM<T> wmat(w_.data(), out_ch_, static_cast<Eigen::Index>(ckk));
    MapRM<T> gwmat(gw_.data(), out_ch_, static_cast<Eigen::Index>(ckk));
    for (int i = 0; i < x_.n; ++i) {
      im2col(x_, i, cols);
      CMapRM<T> g(dy.v.data() + i * dy.sample_stride(), out_ch_, static_cast<Eigen::Index>(dy.plane()));
      gwmat.noalias() += g * cols.transpose();
      for (int oc = 0; oc < out_ch_; ++oc) gb_[oc] += g.row(oc).sum();
      dcols.noalias() = wmat.transpose() * g;
      col2im(dcols, i, dx);
    }
    return dx;
  }

  std::vector<ParamView<T>> params() override { return {{&w_, &gw_}, {&b_, &gb_}}; }

  void append_state(std::vector<T>& out) const override {
    out.insert(out.end(), w_.begin(), w_.end());
    out.insert(out.end(), b_.begin(), b_.end());
  }
  std::size_t read_state(const T* src) override {
    std::copy(src, src + w_.size(), w_.begin());
    std::copy(src + w_.size(), src + w_.size() + b_.size(), b_.begin());
    return w_.size() + b_.size();
  }

 private:
  void im2col(const Tensor<T>& x, int sample, MatrixRM<T>& cols) const {
    cols.setZero();
    const T* base = x.v.data() + sample * x.sample_stride();
    Eigen::Index row = 0;
    for (int ch = 0; ch < in_ch_; ++ch) {
      const T* plane = base + static_cast<std::size_t>(ch) * x.plane();
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx, ++row) {
          for (int oy = 0; oy < x.h; ++oy) {
            const int sy = oy + ky - pad_;
            if (sy < 0 || sy >= x.h) continue;
            const int x0 = std::max(0, pad_ - kx);
            const int x1 = x.w - 1 - std::max(0, kx - pad_);
            for (int ox = x0; ox <= x1; ++ox)
              cols(row, static_cast<Eigen::Index>(oy) * x.w + ox) = plane[static_cast<std::size_t>(sy) * x.w + (ox + kx - pad_)];
          }
        }
    }
  }

  void col2im(const MatrixRM<T>& dcols, int sample, Tensor<T>& dx) const {
    T* base = dx.v.data() + sample * dx.sample_stride();
    Eigen::Index row = 0;
    for (int ch = 0; ch < in_ch_; ++ch) {
      T* plane = base + static_cast<std::size_t>(ch) * dx.plane();
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx, ++row) {
          for (int oy = 0; oy < dx.h; ++oy) {
            const int sy = oy + ky - pad_;
            if (sy < 0 || sy >= dx.h) continue;
            const int x0 = std::max(0, pad_ - kx);
            const int x1 = dx.w - 1 - std::max(0, kx - pad_);
            for (int ox = x0; ox <= x1; ++ox)
              plane[static_cast<std::size_t>(sy) * dx.w + (ox + kx - pad_)] += dcols(row, static_cast<Eigen::Index>(oy) * dx.w + ox);
          }
        }
    }
  }

  int in_ch_, out_ch_, k_, pad_;
  std::vector<T> w_, b_, gw_, gb_;
  Tensor<T> x_;
};

template <class T>
class BatchNorm2d final : public Layer<T> {
 public:
  explicit BatchNorm2d(int channels) : c_(channels) {
    gamma_.assign(channels, T(1));
    beta_.assign(channels, T(0));
    ggamma_.assign(channels, T(0));
    gbeta_.assign(channels, T(0));
    run_mean_.assign(channels, T(0));
    run_var_.assign(channels, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    require(x.c == c_, Err::ShapeMismatch, "batchnorm channel mismatch");
    training_ = training;
    const std::size_t m = static_cast<std::size_t>(x.n) * x.plane();
    Tensor<T> y(x.n, x.c, x.h, x.w);
    xhat_ = Tensor<T>(x.n, x.c, x.h, x.w);
    inv_std_.assign(c_, T(0));
    for (int ch = 0; ch < c_; ++ch) {
      T mean, var;
      if (training) {
        T s = 0, s2 = 0;
        for (int i = 0; i < x.n; ++i) {
          const T* p = x.v.data() + i * x.sample_stride() + ch * x.plane();
          for (std::size_t j = 0; j < x.plane(); ++j) {
            s += p[j];
            s2 += p[j] * p[j];
          }
        }
        mean = s / static_cast<T>(m);
        var = std::max(T(0), s2 / static_cast<T>(m) - mean * mean);
        run_mean_[ch] = (T(1) - momentum_) * run_mean_[ch] + momentum_ * mean;
        run_var_[ch] = (T(1) - momentum_) * run_var_[ch] + momentum_ * var;
      } else {
        mean = run_mean_[ch];
        var = run_var_[ch];
      }
      const T inv = T(1) / std::sqrt(var + eps_);
      inv_std_[ch] = inv;
      for (int i = 0; i < x.n; ++i) {
        const T* p = x.v.data() + i * x.sample_stride() + ch * x.plane();
        T* q = y.v.data() + i * y.sample_stride() + ch * y.plane();
        T* xh = xhat_.v.data() + i * xhat_.sample_stride() + ch * xhat_.plane();
        for (std::size_t j = 0; j < x.plane(); ++j) {
          xh[j] = (p[j] - mean) * inv;
          q[j] = gamma_[ch] * xh[j] + beta_[ch];
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(dy.n, dy.c, dy.h, dy.w);
    const std::size_t m = static_cast<std::size_t>(dy.n) * dy.plane();
    for (int ch = 0; ch < c_; ++ch) {
      T dbeta = 0, dgamma = 0;
      for (int i = 0; i < dy.n; ++i) {
        const T* g = dy.v.data() + i * dy.sample_stride() + ch * dy.plane();
        const T* xh = xhat_.v.data() + i * xhat_.sample_stride() + ch * xhat_.plane();
        for (std::size_t j = 0; j < dy.plane(); ++j) {
          dbeta += g[j];
          dgamma += g[j] * xh[j];
        }
      }
      gbeta_[ch] += dbeta;
      ggamma_[ch] += dgamma;
      const T scale = gamma_[ch] * inv_std_[ch];
      for (int i = 0; i < dy.n; ++i) {
        const T* g = dy.v.data() + i * dy.sample_stride() + ch * dy.plane();
        const T* xh = xhat_.v.data() + i * xhat_.sample_stride() + ch * xhat_.plane();
        T* d = dx.v.data() + i * dx.sample_stride() + ch * dx.plane();
        for (std::size_t j = 0; j < dy.plane(); ++j) {
          if (training_)
            d[j] = scale * (g[j] - (dbeta + xh[j] * dgamma) / static_cast<T>(m));
          else
            d[j] = scale * g[j];
        }
      }
    }
    return dx;
  }

  std::vector<ParamView<T>> params() override { return {{&gamma_, &ggamma_}, {&beta_, &gbeta_}}; }

  void append_state(std::vector<T>& out) const override {
    for (const auto* v : {&gamma_, &beta_, &run_mean_, &run_var_}) out.insert(out.end(), v->begin(), v->end());
  }
  std::size_t read_state(const T* src) override {
    std::size_t off = 0;
    for (auto* v : {&gamma_, &beta_, &run_mean_, &run_var_}) {
      std::copy(src + off, src + off + v->size(), v->begin());
      off += v->size();
    }
    return off;
  }

 private:
  int c_;
  T eps_ = static_cast<T>(1e-5);
  T momentum_ = static_cast<T>(0.1);
  bool training_ = false;
  std::vector<T> gamma_, beta_, ggamma_, gbeta_, run_mean_, run_var_, inv_std_;
  Tensor<T> xhat_;
};

template <class T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    mask_.assign(x.size(), 0);
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y.v[i] > T(0))
        mask_[i] = 1;
      else
        y.v[i] = T(0);
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!mask_[i]) dx.v[i] = T(0);
    return dx;
  }

 private:
  std::vector<std::uint8_t> mask_;
};

template <class T>
class MaxPool2 final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    require(x.h >= 2 && x.w >= 2, Err::InvalidDescriptor, "pooling needs spatial extent >= 2");
    in_shape_ = {x.n, x.c, x.h, x.w};
    Tensor<T> y(x.n, x.c, x.h / 2, x.w / 2);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (int i = 0; i < x.n; ++i)
      for (int ch = 0; ch < x.c; ++ch)
        for (int oy = 0; oy < y.h; ++oy)
          for (int ox = 0; ox < y.w; ++ox, ++o) {
            T best = x.at(i, ch, oy * 2, ox * 2);
            std::size_t best_idx = ((static_cast<std::size_t>(i) * x.c + ch) * x.h + oy * 2) * x.w + ox * 2;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const T v = x.at(i, ch, oy * 2 + dy, ox * 2 + dx);
                if (v > best) {
                  best = v;
                  best_idx = ((static_cast<std::size_t>(i) * x.c + ch) * x.h + oy * 2 + dy) * x.w + ox * 2 + dx;
                }
              }
            y.v[o] = best;
            argmax_[o] = best_idx;
          }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (std::size_t o = 0; o < dy.size(); ++o) dx.v[argmax_[o]] += dy.v[o];
    return dx;
  }

 private:
  std::array<int, 4> in_shape_{};
  std::vector<std::size_t> argmax_;
};

template <class T>
class Dropout final : public Layer<T> {
 public:
  Dropout(double rate, Rng* rng) : rate_(static_cast<T>(rate)), rng_(rng) {
    require(rate >= 0.0 && rate < 1.0, Err::InvalidDescriptor, "dropout rate must be in [0,1)");
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    if (!training || rate_ == T(0)) {
      active_ = false;
      return x;
    }
    active_ = true;
    const T keep = T(1) - rate_;
    mask_.assign(x.size(), T(0));
    Tensor<T> y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (rng_->bernoulli(static_cast<double>(keep))) {
        mask_[i] = T(1) / keep;
        y.v[i] *= mask_[i];
      } else {
        y.v[i] = T(0);
      }
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    if (!active_) return dy;
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.v[i] *= mask_[i];
    return dx;
  }

 private:
  T rate_;
  Rng* rng_;
  bool active_ = false;
  std::vector<T> mask_;
};

template <class T>
class Flatten final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    in_shape_ = {x.n, x.c, x.h, x.w};
    Tensor<T> y(x.n, x.c * x.h * x.w, 1, 1);
    y.v = x.v;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    dx.v = dy.v;
    return dx;
  }

 private:
  std::array<int, 4> in_shape_{};
};

template <class T>
class Dense final : public Layer<T> {
 public:
  Dense(int in, int out, Rng& rng) : in_(in), out_(out) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    w_.resize(static_cast<std::size_t>(out) * in);
    for (auto& x : w_) x = static_cast<T>(rng.normal(0.0, stddev));
    b_.assign(static_cast<std::size_t>(out), T(0));
    gw_.assign(w_.size(), T(0));
    gb_.assign(b_.size(), T(0));
  }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    require(x.c * x.h * x.w == in_, Err::ShapeMismatch, "dense input size mismatch");
    x_ = x;
    Tensor<T> y(x.n, out_, 1, 1);
    CMapRM<T> xm(x.v.data(), x.n, in_);
    CMapRM<T> wm(w_.data(), out_, in_);
    MapRM<T> ym(y.v.data(), x.n, out_);
    ym.noalias() = xm * wm.transpose();
    for (int j = 0; j < out_; ++j) ym.col(j).array() += b_[j];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(x_.n, x_.c, x_.h, x_.w);
    CMapRM<T> gm(dy.v.data(), dy.n, out_);
    CMapRM<T> xm(x_.v.data(), x_.n, in_);
    CMapRM<T> wm(w_.data(), out_, in_);
    MapRM<T> gwm(gw_.data(), out_, in_);
    MapRM<T> dxm(dx.v.data(), dx.n, in_);
    gwm.noalias() += gm.transpose() * xm;
    for (int j = 0; j < out_; ++j) gb_[j] += gm.col(j).sum();
    dxm.noalias() = gm * wm;
    return dx;
  }

  std::vector<ParamView<T>> params() override { return {{&w_, &gw_}, {&b_, &gb_}}; }

  void append_state(std::vector<T>& out) const override {
    out.insert(out.end(), w_.begin(), w_.end());
    out.insert(out.end(), b_.begin(), b_.end());
  }
  std::size_t read_state(const T* src) override {
    std::copy(src, src + w_.size(), w_.begin());
    std::copy(src + w_.size(), src + w_.size() + b_.size(), b_.begin());
    return w_.size() + b_.size();
  }

 private:
  int in_, out_;
  std::vector<T> w_, b_, gw_, gb_;
  Tensor<T> x_;
};

// Feed-forward stack with one designated feature layer whose activations and
// gradients are retained for class-activation maps.
template <class T>
class Network {
 public:
  // The rng lives on the heap so dropout layers can hold a stable pointer
  // across moves of the network.
  explicit Network(std::uint64_t seed) : rng_(std::make_unique<Rng>(derive_seed(seed, 0x11))) {}

  Rng& rng() { return *rng_; }

  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }
  void mark_feature_layer() { feature_index_ = static_cast<int>(layers_.size()) - 1; }
  int feature_index() const { return feature_index_; }
  std::size_t layer_count() const { return layers_.size(); }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> cur = x;
    outputs_.clear();
    outputs_.reserve(layers_.size());
    for (auto& l : layers_) {
      cur = l->forward(cur, training);
      outputs_.push_back(cur);
    }
    return cur;
  }

  // Resumes the forward pass from an arbitrary layer, treating x as that
  // layer's input. Does not touch the cached outputs.
  Tensor<T> forward_from(int first_layer, const Tensor<T>& x, bool training) {
    require(first_layer >= 0 && first_layer <= static_cast<int>(layers_.size()), Err::InvalidDescriptor,
            "layer index out of range");
    Tensor<T> cur = x;
    for (std::size_t i = static_cast<std::size_t>(first_layer); i < layers_.size(); ++i)
      cur = layers_[i]->forward(cur, training);
    return cur;
  }

  // Returns the gradient with respect to the network input; the gradient at
  // the feature layer's output is kept for explanation.
  Tensor<T> backward(const Tensor<T>& dlogits) {
    Tensor<T> g = dlogits;
    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
      if (i == feature_index_) feature_grad_ = g;
      g = layers_[static_cast<std::size_t>(i)]->backward(g);
    }
    return g;
  }

  const Tensor<T>& feature_output() const {
    require(feature_index_ >= 0, Err::NoConvLayer, "no feature layer marked");
    return outputs_[static_cast<std::size_t>(feature_index_)];
  }
  const Tensor<T>& feature_grad() const {
    require(feature_index_ >= 0, Err::NoConvLayer, "no feature layer marked");
    return feature_grad_;
  }

  std::vector<ParamView<T>> params() {
    std::vector<ParamView<T>> out;
    for (auto& l : layers_)
      for (auto& p : l->params()) out.push_back(p);
    return out;
  }

  void zero_grads() {
    for (auto& p : params()) std::fill(p.g->begin(), p.g->end(), T(0));
  }

  std::vector<T> state() const {
    std::vector<T> out;
    for (const auto& l : layers_) l->append_state(out);
    return out;
  }

  void set_state(const std::vector<T>& s) {
    std::size_t off = 0;
    for (auto& l : layers_) off += l->read_state(s.data() + off);
    require(off == s.size(), Err::InvalidDescriptor, "state size does not match architecture");
  }

 private:
  std::unique_ptr<Rng> rng_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::vector<Tensor<T>> outputs_;
  Tensor<T> feature_grad_;
  int feature_index_ = -1;
};

// Numerically stable log(1 + exp(z)).
template <class T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <class T>
T sigmoid(T z) {
  return z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

// Class-weighted binary cross-entropy on logits, averaged over the batch.
// Returns the loss and writes dloss/dlogits.
template <class T>
T weighted_bce_with_logits(const Tensor<T>& logits, const std::vector<int>& labels,
                           const std::array<double, 2>& class_wts, Tensor<T>* dlogits) {
  require(logits.c == 1 && logits.h == 1 && logits.w == 1, Err::ShapeMismatch, "expected one logit per sample");
  require(static_cast<std::size_t>(logits.n) == labels.size(), Err::ShapeMismatch, "label count mismatch");
  const T inv_b = T(1) / static_cast<T>(logits.n);
  T loss = 0;
  if (dlogits) *dlogits = Tensor<T>(logits.n, 1, 1, 1);
  for (int i = 0; i < logits.n; ++i) {
    const T z = logits.v[static_cast<std::size_t>(i)];
    const T y = static_cast<T>(labels[static_cast<std::size_t>(i)]);
    const T w = static_cast<T>(class_wts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]);
    loss += w * (softplus(z) - y * z) * inv_b;
    if (dlogits) dlogits->v[static_cast<std::size_t>(i)] = w * (sigmoid(z) - y) * inv_b;
  }
  require(std::isfinite(static_cast<double>(loss)), Err::NonFiniteLoss, "loss diverged");
  return loss;
}

template <class T>
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::vector<ParamView<T>> params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.w->size(), T(0));
        v_.emplace_back(p.w->size(), T(0));
      }
    }
    require(m_.size() == params.size(), Err::ShapeMismatch, "optimizer bound to a different model");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& w = *params[k].w;
      auto& g = *params[k].g;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[k][i] = static_cast<T>(b1_) * m_[k][i] + static_cast<T>(1.0 - b1_) * g[i];
        v_[k][i] = static_cast<T>(b2_) * v_[k][i] + static_cast<T>(1.0 - b2_) * g[i] * g[i];
        const double mhat = static_cast<double>(m_[k][i]) / bc1;
        const double vhat = static_cast<double>(v_[k][i]) / bc2;
        w[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace nn
}  // namespace mpmri
