// Copyright 2026 The tensorpar Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "tp/errors.hpp"
#include "tp/rng.hpp"

namespace tp {

using Index = Eigen::Index;
using TokenId = std::int32_t;

/// Label value for positions that carry no loss.
inline constexpr TokenId kIgnoreLabel = -1;

template <class S>
concept Real = std::same_as<S, float> || std::same_as<S, double>;

/// Dense activations and weights. Leading axes are flattened into rows, so a
/// (batch, seq, hidden) activation is stored as (batch*seq) x hidden.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
using MatRef = Eigen::Ref<const Mat<S>>;

inline std::string shape_str(Index r, Index c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <class Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, std::string_view op) {
  if (!m.derived().allFinite()) {
    throw NumericError(std::string(op) + ": non-finite value in result " +
                       shape_str(m.rows(), m.cols()));
  }
}

namespace detail {

// C = A * B with every C(i,j) accumulated as ((0 + a0*b0) + a1*b1) + ...
// in ascending k. The value of an element depends only on its own row of A
// and column of B, so splitting B by columns never changes a bit.
template <class S, Index MR, Index NR>
inline void gemm_tile_full(Index k, const S* __restrict a, Index lda,
                           const S* __restrict b, Index ldb, S* __restrict c,
                           Index ldc) {
  S acc[MR][NR];
  for (Index r = 0; r < MR; ++r)
    for (Index j = 0; j < NR; ++j) acc[r][j] = S(0);
  for (Index p = 0; p < k; ++p) {
    const S* bp = b + p * ldb;
    S bv[NR];
    for (Index j = 0; j < NR; ++j) bv[j] = bp[j];
    for (Index r = 0; r < MR; ++r) {
      const S av = a[r * lda + p];
      for (Index j = 0; j < NR; ++j) acc[r][j] += av * bv[j];
    }
  }
  for (Index r = 0; r < MR; ++r)
    for (Index j = 0; j < NR; ++j) c[r * ldc + j] = acc[r][j];
}

template <class S, Index MR, Index NR>
inline void gemm_tile_edge(Index mr, Index nr, Index k, const S* a, Index lda,
                           const S* b, Index ldb, S* c, Index ldc) {
  S acc[MR][NR];
  for (Index r = 0; r < MR; ++r)
    for (Index j = 0; j < NR; ++j) acc[r][j] = S(0);
  for (Index p = 0; p < k; ++p) {
    const S* bp = b + p * ldb;
    for (Index r = 0; r < mr; ++r) {
      const S av = a[r * lda + p];
      for (Index j = 0; j < nr; ++j) acc[r][j] += av * bp[j];
    }
  }
  for (Index r = 0; r < mr; ++r)
    for (Index j = 0; j < nr; ++j) c[r * ldc + j] = acc[r][j];
}

template <class S>
void gemm_ascending(Index m, Index n, Index k, const S* a, Index lda, const S* b,
                    Index ldb, S* c, Index ldc) {
  constexpr Index MR = 4;
  constexpr Index NR = 16;
  for (Index j0 = 0; j0 < n; j0 += NR) {
    const Index nr = std::min(NR, n - j0);
    for (Index i0 = 0; i0 < m; i0 += MR) {
      const Index mr = std::min(MR, m - i0);
      const S* ap = a + i0 * lda;
      S* cp = c + i0 * ldc + j0;
      if (mr == MR && nr == NR) {
        gemm_tile_full<S, MR, NR>(k, ap, lda, b + j0, ldb, cp, ldc);
      } else {
        gemm_tile_edge<S, MR, NR>(mr, nr, k, ap, lda, b + j0, ldb, cp, ldc);
      }
    }
  }
}

}  // namespace detail

/// a * b with deterministic ascending-index summation.
template <Real S>
Mat<S> matmul(const MatRef<S>& a, const MatRef<S>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " +
                         shape_str(a.rows(), a.cols()) + " x " +
                         shape_str(b.rows(), b.cols()));
  }
  Mat<S> c(a.rows(), b.cols());
  if (c.size() == 0) return c;
  detail::gemm_ascending<S>(a.rows(), b.cols(), a.cols(), a.data(), a.outerStride(),
                            b.data(), b.outerStride(), c.data(), c.outerStride());
  return c;
}

/// transpose(a) * b
template <Real S>
Mat<S> matmul_tn(const MatRef<S>& a, const MatRef<S>& b) {
  const Mat<S> at = a.transpose();
  return matmul<S>(at, b);
}

/// a * transpose(b)
template <Real S>
Mat<S> matmul_nt(const MatRef<S>& a, const MatRef<S>& b) {
  const Mat<S> bt = b.transpose();
  return matmul<S>(a, bt);
}

/// Standard normal CDF.
template <Real S>
inline S normal_cdf(S x) {
  return S(0.5) * (S(1) + std::erf(x * S(std::numbers::sqrt2 / 2)));
}

/// x * Phi(x) with the exact error-function CDF.
template <Real S>
Mat<S> gelu(const MatRef<S>& x) {
  Mat<S> y = x.unaryExpr([](S v) { return v * normal_cdf(v); });
  require_finite(y, "gelu");
  return y;
}

/// Gradient of gelu: dy * (Phi(x) + x * phi(x)).
template <Real S>
Mat<S> gelu_backward(const MatRef<S>& x, const MatRef<S>& dy) {
  const S inv_sqrt_2pi = S(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  Mat<S> dx = x.binaryExpr(dy, [inv_sqrt_2pi](S v, S g) {
    return g * (normal_cdf(v) + v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v));
  });
  require_finite(dx, "gelu_backward");
  return dx;
}

template <Real S>
struct LayerNormCache {
  Mat<S> xhat;
  ColVec<S> rstd;

  Index stored_elements() const { return xhat.size() + rstd.size(); }
};

/// Normalizes each row over the hidden axis, then applies gain and bias.
/// Variance is the biased (population) estimate.
template <Real S>
Mat<S> layer_norm(const MatRef<S>& x, const MatRef<S>& gain, const MatRef<S>& bias,
                  S eps, LayerNormCache<S>* cache = nullptr) {
  const Index h = x.cols();
  if (h == 0) throw DimensionError("layer_norm: hidden size is zero");
  if (gain.size() != h || bias.size() != h) {
    throw DimensionError("layer_norm: gain/bias length differs from hidden " +
                         std::to_string(h));
  }
  Mat<S> xhat(x.rows(), h);
  ColVec<S> rstd(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    S mean = 0;
    for (Index j = 0; j < h; ++j) mean += x(r, j);
    mean /= S(h);
    S var = 0;
    for (Index j = 0; j < h; ++j) {
      const S d = x(r, j) - mean;
      var += d * d;
    }
    var /= S(h);
    rstd(r) = S(1) / std::sqrt(var + eps);
    for (Index j = 0; j < h; ++j) xhat(r, j) = (x(r, j) - mean) * rstd(r);
  }
  Mat<S> y(x.rows(), h);
  for (Index r = 0; r < x.rows(); ++r)
    for (Index j = 0; j < h; ++j) y(r, j) = xhat(r, j) * gain(0, j) + bias(0, j);
  require_finite(y, "layer_norm");
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

/// Returns dx and accumulates into dgain / dbias (each 1 x H).
template <Real S>
Mat<S> layer_norm_backward(const LayerNormCache<S>& cache, const MatRef<S>& gain,
                           const MatRef<S>& dy, Mat<S>& dgain, Mat<S>& dbias) {
  const Index rows = dy.rows();
  const Index h = dy.cols();
  Mat<S> dx(rows, h);
  std::vector<S> dxhat(static_cast<std::size_t>(h));
  for (Index r = 0; r < rows; ++r) {
    S mean_d = 0;
    S mean_dx = 0;
    for (Index j = 0; j < h; ++j) {
      dxhat[j] = dy(r, j) * gain(0, j);
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * cache.xhat(r, j);
    }
    mean_d /= S(h);
    mean_dx /= S(h);
    for (Index j = 0; j < h; ++j) {
      dx(r, j) = cache.rstd(r) * (dxhat[j] - mean_d - cache.xhat(r, j) * mean_dx);
    }
  }
  for (Index r = 0; r < rows; ++r) {
    for (Index j = 0; j < h; ++j) {
      dgain(0, j) += dy(r, j) * cache.xhat(r, j);
      dbias(0, j) += dy(r, j);
    }
  }
  require_finite(dx, "layer_norm_backward");
  return dx;
}

/// Column sums in ascending row order, as a 1 x cols matrix.
template <Real S>
Mat<S> column_sums(const MatRef<S>& x) {
  Mat<S> out = Mat<S>::Zero(1, x.cols());
  for (Index r = 0; r < x.rows(); ++r) out.row(0) += x.row(r);
  return out;
}

/// Row-wise softmax in place. Entries equal to lowest() act as masked.
template <Real S>
void softmax_rows_inplace(Mat<S>& x) {
  for (Index r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    S sum = 0;
    for (Index j = 0; j < x.cols(); ++j) {
      const S e = std::exp(x(r, j) - mx);
      x(r, j) = e;
      sum += e;
    }
    x.row(r) /= sum;
  }
}

/// Given p = softmax(z) and dL/dp, returns dL/dz.
template <Real S>
Mat<S> softmax_rows_backward(const MatRef<S>& p, const MatRef<S>& dp) {
  Mat<S> dz(p.rows(), p.cols());
  for (Index r = 0; r < p.rows(); ++r) {
    S dot = 0;
    for (Index j = 0; j < p.cols(); ++j) dot += p(r, j) * dp(r, j);
    for (Index j = 0; j < p.cols(); ++j) dz(r, j) = p(r, j) * (dp(r, j) - dot);
  }
  return dz;
}

template <Real S>
struct CrossEntropyResult {
  S loss = 0;
  Mat<S> grad;
};

/// Mean negative log-softmax of the target class. The gradient is
/// (softmax - onehot) / rows.
template <Real S>
CrossEntropyResult<S> softmax_cross_entropy(const MatRef<S>& logits,
                                            std::span<const TokenId> targets) {
  const Index rows = logits.rows();
  const Index v = logits.cols();
  if (static_cast<Index>(targets.size()) != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  for (TokenId t : targets) {
    if (t < 0 || t >= v) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                       " outside [0, " + std::to_string(v) + ")");
    }
  }
  CrossEntropyResult<S> out;
  out.grad.resize(rows, v);
  S total = 0;
  const S inv_rows = S(1) / S(rows);
  for (Index r = 0; r < rows; ++r) {
    const S mx = logits.row(r).maxCoeff();
    S sum = 0;
    for (Index j = 0; j < v; ++j) sum += std::exp(logits(r, j) - mx);
    const S lse = std::log(sum) + mx;
    total += lse - logits(r, targets[r]);
    for (Index j = 0; j < v; ++j) {
      out.grad(r, j) = std::exp(logits(r, j) - lse) * inv_rows;
    }
    out.grad(r, targets[r]) -= inv_rows;
  }
  out.loss = total * inv_rows;
  if (!std::isfinite(out.loss)) throw NumericError("softmax_cross_entropy: loss not finite");
  require_finite(out.grad, "softmax_cross_entropy");
  return out;
}

template <Real S>
struct DropoutResult {
  Mat<S> y;
  /// 0 for dropped entries, 1/(1-p) for survivors.
  Mat<S> mask;
};

/// Inverted dropout. With p == 0 no draws are consumed.
template <Real S>
DropoutResult<S> dropout(const MatRef<S>& x, double p, RngStream& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout: probability " + std::to_string(p) +
                         " outside [0, 1)");
  }
  DropoutResult<S> out;
  if (p == 0.0) {
    out.y = x;
    out.mask = Mat<S>::Ones(x.rows(), x.cols());
    return out;
  }
  const S keep_scale = S(1.0 / (1.0 - p));
  out.mask.resize(x.rows(), x.cols());
  for (Index i = 0; i < out.mask.size(); ++i) {
    out.mask.data()[i] = rng.uniform() >= p ? keep_scale : S(0);
  }
  out.y = x.cwiseProduct(out.mask);
  return out;
}

}  // namespace tp
