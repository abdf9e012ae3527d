// Independent brute-force references used by the test suites. Everything in
// this header is written straight from the defining formulas with plain
// loops, on purpose: it must not share code with the library implementations
// it checks.
#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "dynser/tensor.hpp"

namespace oracle {

using dynser::Shape;
using dynser::Tensor;

// y[r][o] = sum_i x[r][i] * w[o][i] + b[o]
inline std::vector<double> naive_linear(const std::vector<double>& x,
                                        std::int64_t rows, std::int64_t in,
                                        const std::vector<double>& w,
                                        std::int64_t out,
                                        const std::vector<double>& b) {
  std::vector<double> y(rows * out, 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t o = 0; o < out; ++o) {
      double acc = b.empty() ? 0.0 : b[o];
      for (std::int64_t i = 0; i < in; ++i) {
        acc += x[r * in + i] * w[o * in + i];
      }
      y[r * out + o] = acc;
    }
  }
  return y;
}

// Direct cross-correlation, six nested loops, zero padding.
// x [C,H,W], k [O,C,KH,KW] -> y [O,OH,OW]
inline std::vector<double> naive_conv2d(const std::vector<double>& x,
                                        std::int64_t c, std::int64_t h,
                                        std::int64_t w,
                                        const std::vector<double>& k,
                                        std::int64_t o, std::int64_t kh,
                                        std::int64_t kw,
                                        const std::vector<double>& bias,
                                        std::int64_t stride, std::int64_t pad,
                                        std::int64_t& oh, std::int64_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> y(o * oh * ow, 0.0);
  for (std::int64_t f = 0; f < o; ++f) {
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        double acc = bias.empty() ? 0.0 : bias[f];
        for (std::int64_t cc = 0; cc < c; ++cc) {
          for (std::int64_t u = 0; u < kh; ++u) {
            for (std::int64_t v = 0; v < kw; ++v) {
              const std::int64_t ih = i * stride - pad + u;
              const std::int64_t iw = j * stride - pad + v;
              if (ih >= 0 && ih < h && iw >= 0 && iw < w) {
                acc += x[(cc * h + ih) * w + iw] *
                       k[((f * c + cc) * kh + u) * kw + v];
              }
            }
          }
        }
        y[(f * oh + i) * ow + j] = acc;
      }
    }
  }
  return y;
}

// x [C,L], k [O,C,K] -> y [O,OL]
inline std::vector<double> naive_conv1d(const std::vector<double>& x,
                                        std::int64_t c, std::int64_t l,
                                        const std::vector<double>& k,
                                        std::int64_t o, std::int64_t kl,
                                        const std::vector<double>& bias,
                                        std::int64_t stride, std::int64_t pad,
                                        std::int64_t& ol) {
  ol = (l + 2 * pad - kl) / stride + 1;
  std::vector<double> y(o * ol, 0.0);
  for (std::int64_t f = 0; f < o; ++f) {
    for (std::int64_t j = 0; j < ol; ++j) {
      double acc = bias.empty() ? 0.0 : bias[f];
      for (std::int64_t cc = 0; cc < c; ++cc) {
        for (std::int64_t v = 0; v < kl; ++v) {
          const std::int64_t iw = j * stride - pad + v;
          if (iw >= 0 && iw < l) {
            acc += x[cc * l + iw] * k[(f * c + cc) * kl + v];
          }
        }
      }
      y[f * ol + j] = acc;
    }
  }
  return y;
}

// Explicit-loop pooling over [C,H,W]; window/stride square, no padding.
inline std::vector<double> naive_pool2d_max(const std::vector<double>& x,
                                            std::int64_t c, std::int64_t h,
                                            std::int64_t w, std::int64_t win,
                                            std::int64_t stride,
                                            std::int64_t& oh,
                                            std::int64_t& ow) {
  oh = (h - win) / stride + 1;
  ow = (w - win) / stride + 1;
  std::vector<double> y(c * oh * ow);
  for (std::int64_t cc = 0; cc < c; ++cc) {
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        double best = x[(cc * h + i * stride) * w + j * stride];
        for (std::int64_t u = 0; u < win; ++u) {
          for (std::int64_t v = 0; v < win; ++v) {
            best = std::max(best,
                            x[(cc * h + i * stride + u) * w + j * stride + v]);
          }
        }
        y[(cc * oh + i) * ow + j] = best;
      }
    }
  }
  return y;
}

inline std::vector<double> naive_pool2d_avg(const std::vector<double>& x,
                                            std::int64_t c, std::int64_t h,
                                            std::int64_t w, std::int64_t win,
                                            std::int64_t stride,
                                            std::int64_t& oh,
                                            std::int64_t& ow) {
  oh = (h - win) / stride + 1;
  ow = (w - win) / stride + 1;
  std::vector<double> y(c * oh * ow);
  for (std::int64_t cc = 0; cc < c; ++cc) {
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::int64_t u = 0; u < win; ++u) {
          for (std::int64_t v = 0; v < win; ++v) {
            acc += x[(cc * h + i * stride + u) * w + j * stride + v];
          }
        }
        y[(cc * oh + i) * ow + j] = acc / static_cast<double>(win * win);
      }
    }
  }
  return y;
}

// O(N^2) direct-summation DFT; returns the one-sided power spectrum of a
// real frame zero-padded to n.
inline std::vector<double> naive_power_spectrum(const std::vector<double>& frame,
                                                std::int64_t n) {
  const std::int64_t bins = n / 2 + 1;
  std::vector<double> p(bins, 0.0);
  for (std::int64_t k = 0; k < bins; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (std::int64_t t = 0; t < static_cast<std::int64_t>(frame.size()) && t < n;
         ++t) {
      const double ang = -2.0 * dynser::kPi * static_cast<double>(k) *
                         static_cast<double>(t) / static_cast<double>(n);
      acc += frame[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    p[k] = std::norm(acc);
  }
  return p;
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

inline double max_abs_diff(const Tensor& a, const std::vector<double>& b) {
  return max_abs_diff(a.values(), b);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  return max_abs_diff(a.values(), b.values());
}

}  // namespace oracle
