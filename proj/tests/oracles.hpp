#pragma once

// Independent reference implementations used only by tests.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "aanet/model.hpp"
#include "aanet/numeric.hpp"
#include "aanet/random.hpp"

namespace oracle {

using aanet::Matrix;

inline Matrix random_matrix(std::size_t r, std::size_t c, aanet::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& x : m.values()) x = aanet::uniform(rng, lo, hi);
  return m;
}

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

/// Sum of square roots of the eigenvalues of A Aᵀ.
inline double trace_norm_gram(const Matrix& a) {
  const Eigen::MatrixXd e = to_eigen(a);
  // A Aᵀ and Aᵀ A share their nonzero eigenvalues; the rest are exactly zero.
  // The smaller one avoids taking square roots of roundoff.
  const Eigen::MatrixXd gram = a.rows() <= a.cols() ? Eigen::MatrixXd(e * e.transpose()) : Eigen::MatrixXd(e.transpose() * e);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  double s = 0.0;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) s += std::sqrt(std::max(0.0, solver.eigenvalues()(i)));
  return s;
}

/// Direct convolution. input[t][f][c], output[t][f'][o], 5x5 kernel,
/// stride 1 / pad 2 in time, stride 2 / pad 2 in frequency.
using Tensor3 = std::vector<std::vector<std::vector<double>>>;

inline Tensor3 conv_naive(const aanet::ConvLayer& layer, const Tensor3& in) {
  const long T = static_cast<long>(in.size());
  const long F = static_cast<long>(layer.freq_in);
  const long Fo = static_cast<long>(layer.freq_out());
  Tensor3 out(T, std::vector<std::vector<double>>(Fo, std::vector<double>(layer.out_channels, 0.0)));
  for (long t = 0; t < T; ++t)
    for (long fo = 0; fo < Fo; ++fo)
      for (std::size_t o = 0; o < layer.out_channels; ++o) {
        double s = 0.0;
        for (std::size_t c = 0; c < layer.in_channels; ++c)
          for (long kt = 0; kt < 5; ++kt)
            for (long kf = 0; kf < 5; ++kf) {
              const long ti = t + kt - 2, fi = 2 * fo + kf - 2;
              if (ti < 0 || ti >= T || fi < 0 || fi >= F) continue;
              s += layer.w(o, c, kt, kf) * in[ti][fi][c];
            }
        out[t][fo][o] = s;
      }
  return out;
}

/// Scalar GRU cell: z = σ(x Wz + h Uz + bz), r = σ(x Wr + h Ur + br),
/// n = tanh(x Wn + (r h) Un + bn), h' = (1 - z) n + z h.
inline std::vector<double> gru_cell(const aanet::GruDirection& d, std::size_t H, const std::vector<double>& x,
                                    const std::vector<double>& h) {
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> out(H), z(H), r(H);
  for (std::size_t j = 0; j < H; ++j) {
    double az = d.b(0, j), ar = d.b(0, H + j);
    for (std::size_t i = 0; i < x.size(); ++i) {
      az += x[i] * d.w(i, j);
      ar += x[i] * d.w(i, H + j);
    }
    for (std::size_t k = 0; k < H; ++k) {
      az += h[k] * d.u_zr(k, j);
      ar += h[k] * d.u_zr(k, H + j);
    }
    z[j] = sig(az);
    r[j] = sig(ar);
  }
  for (std::size_t j = 0; j < H; ++j) {
    double an = d.b(0, 2 * H + j);
    for (std::size_t i = 0; i < x.size(); ++i) an += x[i] * d.w(i, 2 * H + j);
    for (std::size_t k = 0; k < H; ++k) an += r[k] * h[k] * d.u_n(k, j);
    out[j] = (1.0 - z[j]) * std::tanh(an) + z[j] * h[j];
  }
  return out;
}

/// Full-table Levenshtein distance.
inline std::size_t levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1])});
  return d[a.size()][b.size()];
}

/// Centre frequencies of `bands` triangular filters spaced evenly on the
/// HTK mel scale over [0, sample_rate / 2].
inline std::vector<double> mel_centers(double sample_rate, std::size_t bands) {
  auto mel = [](double f) { return 1127.0 * std::log(1.0 + f / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::exp(m / 1127.0) - 1.0); };
  const double top = mel(sample_rate / 2.0);
  std::vector<double> c(bands);
  for (std::size_t i = 0; i < bands; ++i) c[i] = hz(top * static_cast<double>(i + 1) / static_cast<double>(bands + 1));
  return c;
}

inline std::size_t nearest_index(const std::vector<double>& xs, double target) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (std::abs(xs[i] - target) < std::abs(xs[best] - target)) best = i;
  return best;
}

}  // namespace oracle
