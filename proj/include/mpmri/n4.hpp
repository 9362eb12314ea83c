// Retrospective multiplicative bias-field correction (single-level N4).
//
// Per iteration: sharpen the log-intensity histogram by Wiener deconvolution
// of a Gaussian blur kernel, take (log input - sharpened expectation) as the
// residual log-bias, smooth it with a least-squares cubic B-spline fit, and
// accumulate. Stops when the coefficient of variation of the between-iteration
// field ratio drops below the configured tolerance.
#pragma once

#include <complex>
#include <numbers>

#include <Eigen/Dense>

#include "mpmri/preprocess.hpp"

namespace mpmri {

struct BiasField {
  std::array<int, 3> dim{0, 0, 0};
  double control_spacing = 0.0;  // B-spline control-point spacing, mm
  int iterations_run = 0;
  std::vector<float> field;  // multiplicative gain, same shape as source volume

  float at(int x, int y, int z) const {
    return field[static_cast<std::size_t>(x) + static_cast<std::size_t>(dim[0]) * (y + static_cast<std::size_t>(dim[1]) * z)];
  }
};

// Largest |second finite difference| of log(field) over any axis; the field
// contract bounds this by 0.5.
inline double log_field_max_second_diff(const BiasField& b) {
  const auto idx = [&](int x, int y, int z) {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(b.dim[0]) * (y + static_cast<std::size_t>(b.dim[1]) * z);
  };
  double worst = 0.0;
  for (int z = 0; z < b.dim[2]; ++z)
    for (int y = 0; y < b.dim[1]; ++y)
      for (int x = 0; x < b.dim[0]; ++x) {
        const double c = std::log(b.field[idx(x, y, z)]);
        if (x > 0 && x + 1 < b.dim[0])
          worst = std::max(worst, std::abs(std::log(b.field[idx(x - 1, y, z)]) - 2 * c + std::log(b.field[idx(x + 1, y, z)])));
        if (y > 0 && y + 1 < b.dim[1])
          worst = std::max(worst, std::abs(std::log(b.field[idx(x, y - 1, z)]) - 2 * c + std::log(b.field[idx(x, y + 1, z)])));
        if (z > 0 && z + 1 < b.dim[2])
          worst = std::max(worst, std::abs(std::log(b.field[idx(x, y, z - 1)]) - 2 * c + std::log(b.field[idx(x, y, z + 1)])));
      }
  return worst;
}

namespace detail {

inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

// Map each log intensity to its sharpened expectation E(u | v). Triangular
// Parzen histogram, Wiener-deconvolved against a Gaussian of the given FWHM
// (both expressed in histogram-bin units).
inline std::vector<double> sharpen_log_intensities(const std::vector<double>& values, int bins,
                                                   double fwhm, double wiener_noise) {
  auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mx - mn < 1e-12) return values;  // constant input sharpens to itself
  const double slope = (mx - mn) / (bins - 1);

  std::size_t padded = 1;
  while (padded < static_cast<std::size_t>(2 * bins)) padded <<= 1;
  const std::size_t offset = (padded - static_cast<std::size_t>(bins)) / 2;

  std::vector<std::complex<double>> vf(padded, 0.0);
  for (double v : values) {
    const double c = std::clamp((v - mn) / slope, 0.0, static_cast<double>(bins - 1));
    const auto i0 = static_cast<std::size_t>(c);
    const double frac = c - static_cast<double>(i0);
    vf[offset + i0] += 1.0 - frac;
    if (i0 + 1 < static_cast<std::size_t>(bins)) vf[offset + i0 + 1] += frac;
  }
  fft_inplace(vf, false);

  const double scaled_fwhm = fwhm / slope;
  const double exp_factor = 4.0 * std::numbers::ln2 / (scaled_fwhm * scaled_fwhm);
  const double scale_factor = 2.0 * std::sqrt(std::numbers::ln2 / std::numbers::pi) / scaled_fwhm;
  std::vector<std::complex<double>> ff(padded, 0.0);
  ff[0] = scale_factor;
  const std::size_t half = padded / 2;
  for (std::size_t n = 1; n < half; ++n)
    ff[n] = ff[padded - n] = scale_factor * std::exp(-exp_factor * static_cast<double>(n) * static_cast<double>(n));
  ff[half] = scale_factor * std::exp(-exp_factor * static_cast<double>(half) * static_cast<double>(half));
  fft_inplace(ff, false);

  // Wiener deconvolution of the blurred histogram, clamped to a density.
  std::vector<std::complex<double>> u(padded);
  for (std::size_t n = 0; n < padded; ++n) {
    const double g = (std::conj(ff[n]) / (std::norm(ff[n]) + wiener_noise)).real();
    u[n] = vf[n] * g;
  }
  fft_inplace(u, true);
  for (auto& x : u) x = std::max(x.real(), 0.0);

  // E(u | v) = (u·U ∗ F) / (U ∗ F), both convolutions via the FFT.
  std::vector<std::complex<double>> num(padded);
  for (std::size_t n = 0; n < padded; ++n) {
    const double bin_value = mn + (static_cast<double>(n) - static_cast<double>(offset)) * slope;
    num[n] = u[n].real() * bin_value;
  }
  fft_inplace(num, false);
  fft_inplace(u, false);
  for (std::size_t n = 0; n < padded; ++n) {
    num[n] *= ff[n];
    u[n] *= ff[n];
  }
  fft_inplace(num, true);
  fft_inplace(u, true);

  std::vector<double> lut(padded, 0.0);
  for (std::size_t n = 0; n < padded; ++n) {
    const double d = u[n].real();
    const double e = d != 0.0 ? num[n].real() / d : 0.0;
    lut[n] = std::isfinite(e) ? e : 0.0;
  }

  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double c = std::clamp((values[i] - mn) / slope, 0.0, static_cast<double>(bins - 1));
    const double p = static_cast<double>(offset) + c;
    const auto i0 = static_cast<std::size_t>(p);
    const double frac = p - static_cast<double>(i0);
    out[i] = lut[i0] * (1.0 - frac) + lut[i0 + 1] * frac;
  }
  return out;
}

// Uniform cubic B-spline basis at parameter t in [0,1].
inline std::array<double, 4> bspline_weights(double t) {
  const double t2 = t * t, t3 = t2 * t;
  return {(1.0 - t) * (1.0 - t) * (1.0 - t) / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
          (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0};
}

// Tensor-product cubic B-spline lattice over the voxel grid, with per-axis
// basis tables precomputed once. Fits residuals by dense normal equations
// (the lattice is small at clinical control spacings) and evaluates the
// smooth field over the full grid by staged per-axis contraction.
struct BSplineLattice {
  std::array<int, 3> dim{};
  std::array<int, 3> cells{};
  std::array<int, 3> nctrl{};
  std::array<std::vector<int>, 3> cell_of;
  std::array<std::vector<std::array<double, 4>>, 3> w_of;

  BSplineLattice(std::array<int, 3> d, std::array<double, 3> spacing, double control_spacing) : dim(d) {
    for (int a = 0; a < 3; ++a) {
      const double umax = (dim[a] - 1) * spacing[a] / control_spacing;
      cells[a] = std::max(1, static_cast<int>(std::ceil(umax - 1e-9)));
      nctrl[a] = cells[a] + 3;
      cell_of[a].resize(dim[a]);
      w_of[a].resize(dim[a]);
      for (int k = 0; k < dim[a]; ++k) {
        const double u = k * spacing[a] / control_spacing;
        const int j = std::min(static_cast<int>(u), cells[a] - 1);
        cell_of[a][k] = j;
        w_of[a][k] = bspline_weights(u - j);
      }
    }
  }

  std::size_t coeff_count() const {
    return static_cast<std::size_t>(nctrl[0]) * nctrl[1] * nctrl[2];
  }

  // Least-squares fit of `value` at the given voxels; a small ridge keeps
  // unsupported boundary coefficients pinned at zero.
  Eigen::VectorXd fit(const std::vector<std::array<int, 3>>& voxels, const std::vector<double>& value) const {
    const auto nc = static_cast<Eigen::Index>(coeff_count());
    Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(nc, nc);
    Eigen::VectorXd atb = Eigen::VectorXd::Zero(nc);
    std::array<Eigen::Index, 64> cidx{};
    std::array<double, 64> cw{};
    for (std::size_t s = 0; s < voxels.size(); ++s) {
      const auto [x, y, z] = voxels[s];
      int m = 0;
      for (int dz = 0; dz < 4; ++dz)
        for (int dy = 0; dy < 4; ++dy)
          for (int dx = 0; dx < 4; ++dx, ++m) {
            cidx[m] = (cell_of[0][x] + dx) +
                      static_cast<Eigen::Index>(nctrl[0]) * ((cell_of[1][y] + dy) + static_cast<Eigen::Index>(nctrl[1]) * (cell_of[2][z] + dz));
            cw[m] = w_of[0][x][dx] * w_of[1][y][dy] * w_of[2][z][dz];
          }
      for (int a = 0; a < 64; ++a) {
        atb[cidx[a]] += cw[a] * value[s];
        for (int b = a; b < 64; ++b) ata(cidx[a], cidx[b]) += cw[a] * cw[b];
      }
    }
    ata = ata.selfadjointView<Eigen::Upper>();
    const double ridge = 1e-6 * std::max<double>(1.0, static_cast<double>(voxels.size()));
    ata.diagonal().array() += ridge;
    return ata.ldlt().solve(atb);
  }

  // Evaluate the lattice over every voxel: contract z, then y, then x.
  std::vector<double> evaluate_full(const Eigen::VectorXd& c) const {
    const std::size_t n0 = nctrl[0], n1 = nctrl[1];
    const std::size_t nx = dim[0], ny = dim[1], nz = dim[2];
    std::vector<double> sz(n0 * n1 * nz, 0.0);
    for (std::size_t z = 0; z < nz; ++z)
      for (int d = 0; d < 4; ++d) {
        const double w = w_of[2][z][d];
        const std::size_t src = n0 * n1 * (cell_of[2][z] + d);
        const std::size_t dst = n0 * n1 * z;
        for (std::size_t ij = 0; ij < n0 * n1; ++ij) sz[dst + ij] += w * c[static_cast<Eigen::Index>(src + ij)];
      }
    std::vector<double> sy(n0 * ny * nz, 0.0);
    for (std::size_t z = 0; z < nz; ++z)
      for (std::size_t y = 0; y < ny; ++y)
        for (int d = 0; d < 4; ++d) {
          const double w = w_of[1][y][d];
          const std::size_t src = n0 * ((cell_of[1][y] + d) + n1 * z);
          const std::size_t dst = n0 * (y + ny * z);
          for (std::size_t i = 0; i < n0; ++i) sy[dst + i] += w * sz[src + i];
        }
    std::vector<double> out(nx * ny * nz, 0.0);
    std::size_t p = 0;
    for (std::size_t z = 0; z < nz; ++z)
      for (std::size_t y = 0; y < ny; ++y) {
        const std::size_t row = n0 * (y + ny * z);
        for (std::size_t x = 0; x < nx; ++x, ++p) {
          const auto& w = w_of[0][x];
          const std::size_t j = row + static_cast<std::size_t>(cell_of[0][x]);
          out[p] = w[0] * sy[j] + w[1] * sy[j + 1] + w[2] * sy[j + 2] + w[3] * sy[j + 3];
        }
      }
    return out;
  }
};

}  // namespace detail

inline std::pair<ImageVolume, BiasField> n4_bias_correct(const ImageVolume& vol, const PreprocessConfig& cfg = {},
                                                         const ImageVolume* mask = nullptr) {
  vol.validate();
  cfg.validate();
  for (float v : vol.data)
    require(v >= 0.0f, Err::NegativeIntensity, "bias correction requires non-negative intensities");
  if (mask) {
    mask->validate();
    require(vol.same_grid(*mask), Err::GridMismatch, "mask grid differs from volume grid");
  }

  // Log-domain estimation is restricted to strictly positive voxels.
  std::vector<std::size_t> inside;
  inside.reserve(vol.size());
  for (std::size_t i = 0; i < vol.size(); ++i) {
    if (mask && mask->data[i] <= 0.5f) continue;
    if (vol.data[i] > 0.0f) inside.push_back(i);
  }
  require(!inside.empty(), Err::EmptyMask, "no foreground voxels to estimate bias from");

  std::vector<double> log_input(inside.size());
  for (std::size_t k = 0; k < inside.size(); ++k) log_input[k] = std::log(static_cast<double>(vol.data[inside[k]]));

  const detail::BSplineLattice lattice(vol.dim, vol.spacing, cfg.n4_control_spacing_mm);

  // Fit on a deterministic subsample; evaluate everywhere.
  constexpr std::size_t kMaxFitSamples = 20000;
  const std::size_t stride = std::max<std::size_t>(1, inside.size() / kMaxFitSamples);
  std::vector<std::array<int, 3>> fit_voxels;
  std::vector<std::size_t> fit_pos;  // positions into `inside`
  for (std::size_t k = 0; k < inside.size(); k += stride) {
    const std::size_t i = inside[k];
    const int x = static_cast<int>(i % vol.dim[0]);
    const int y = static_cast<int>((i / vol.dim[0]) % vol.dim[1]);
    const int z = static_cast<int>(i / (static_cast<std::size_t>(vol.dim[0]) * vol.dim[1]));
    fit_voxels.push_back({x, y, z});
    fit_pos.push_back(k);
  }

  std::vector<double> log_bias(vol.size(), 0.0);
  std::vector<double> current(log_input);
  std::vector<double> residual(fit_voxels.size());
  BiasField bias;
  bias.dim = vol.dim;
  bias.control_spacing = cfg.n4_control_spacing_mm;

  for (int it = 0; it < cfg.n4_iterations; ++it) {
    ++bias.iterations_run;
    const auto sharpened =
        detail::sharpen_log_intensities(current, cfg.n4_histogram_bins, cfg.n4_fwhm, cfg.n4_wiener_noise);
    for (std::size_t s = 0; s < fit_pos.size(); ++s)
      residual[s] = current[fit_pos[s]] - sharpened[fit_pos[s]];

    const auto coeffs = lattice.fit(fit_voxels, residual);
    const auto update = lattice.evaluate_full(coeffs);

    // Between-iteration field ratio is exp(update); converged when its
    // coefficient of variation over the mask is small.
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t i : inside) {
      const double r = std::exp(update[i]);
      s1 += r;
      s2 += r * r;
    }
    const double mean = s1 / static_cast<double>(inside.size());
    const double var = std::max(0.0, s2 / static_cast<double>(inside.size()) - mean * mean);
    const double cv = std::sqrt(var) / mean;

    for (std::size_t i = 0; i < log_bias.size(); ++i) log_bias[i] += update[i];
    for (std::size_t k = 0; k < inside.size(); ++k) current[k] = log_input[k] - log_bias[inside[k]];

    if (cv < cfg.n4_convergence_tol) break;
  }

  // Pin the gauge: gain is a unit-mean correction, not a global rescale.
  double mean_log = 0.0;
  for (double b : log_bias) mean_log += b;
  mean_log /= static_cast<double>(log_bias.size());

  bias.field.resize(log_bias.size());
  for (std::size_t i = 0; i < log_bias.size(); ++i) bias.field[i] = static_cast<float>(std::exp(log_bias[i] - mean_log));

  ImageVolume corrected = vol;
  for (std::size_t i : inside) corrected.data[i] = vol.data[i] / bias.field[i];
  return {std::move(corrected), std::move(bias)};
}

}  // namespace mpmri
