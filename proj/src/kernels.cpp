// SPDX-License-Identifier: Apache-2.0

#include "bflab/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "bflab/error.hpp"

namespace bflab::num {
namespace {

void require_matrix(const DenseTensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + " must be 2-D, got " +
                     shape_string(t.dims()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

typedef double V4 __attribute__((vector_size(32)));

inline V4 load4(const double* p) {
  V4 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, V4 v) { std::memcpy(p, &v, sizeof v); }

}  // namespace

void matmul_accumulate(const DenseTensor& a, const DenseTensor& b,
                       DenseTensor& out) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul inner dims disagree: " + shape_string(a.dims()) +
                     " x " + shape_string(b.dims()));
  }
  if (out.rows() != m || out.cols() != n) {
    throw ShapeError("matmul output shape mismatch");
  }
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  // Register tiles of kRows x (4 * kVecs) outputs. Every output element still
  // sums its products in increasing k, so the tiling does not change bits.
  constexpr std::size_t kRows = 4, kVecs = 4, kCols = 4 * kVecs;
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) {
    std::size_t j = 0;
    for (; j + kCols <= n; j += kCols) {
      V4 acc[kRows][kVecs];
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t c = 0; c < kVecs; ++c) acc[r][c] = load4(po + (i + r) * n + j + 4 * c);
      }
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double* brow = pb + kk * n + j;
        V4 bv[kVecs];
        for (std::size_t c = 0; c < kVecs; ++c) bv[c] = load4(brow + 4 * c);
        for (std::size_t r = 0; r < kRows; ++r) {
          const double av = pa[(i + r) * k + kk];
          const V4 a4 = {av, av, av, av};
          for (std::size_t c = 0; c < kVecs; ++c) acc[r][c] += a4 * bv[c];
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t c = 0; c < kVecs; ++c) store4(po + (i + r) * n + j + 4 * c, acc[r][c]);
      }
    }
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < kRows; ++r) {
        double s = po[(i + r) * n + j];
        for (std::size_t kk = 0; kk < k; ++kk) s += pa[(i + r) * k + kk] * pb[kk * n + j];
        po[(i + r) * n + j] = s;
      }
    }
  }
  for (; i < m; ++i) {
    double* orow = po + i * n;
    const double* arow = pa + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  if (b.rows() != a.cols()) {
    throw ShapeError("matmul inner dims disagree: " + shape_string(a.dims()) +
                     " x " + shape_string(b.dims()));
  }
  DenseTensor out({a.rows(), b.cols()});
  matmul_accumulate(a, b, out);
  return out;
}

void matmul_backward_a(const DenseTensor& grad_out, const DenseTensor& b,
                       DenseTensor& grad_a) {
  const std::size_t m = grad_out.rows(), n = grad_out.cols(), k = b.rows();
  const double* pg = grad_out.data();
  const double* pb = b.data();
  double* pa = grad_a.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = pg + i * n;
    double* arow = pa + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* brow = pb + kk * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      arow[kk] += s;
    }
  }
}

void matmul_backward_b(const DenseTensor& a, const DenseTensor& grad_out,
                       DenseTensor& grad_b) {
  const std::size_t m = a.rows(), k = a.cols(), n = grad_out.cols();
  const double* pa = a.data();
  const double* pg = grad_out.data();
  double* pb = grad_b.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    const double* grow = pg + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      double* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
    }
  }
}

DenseTensor add(const DenseTensor& a, const DenseTensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add shape mismatch: " + shape_string(a.dims()) + " vs " +
                     shape_string(b.dims()));
  }
  DenseTensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

void add_row_bias_inplace(DenseTensor& x, const DenseTensor& bias) {
  const std::size_t n = x.cols();
  if (bias.size() != n) throw ShapeError("bias width mismatch");
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* row = x.row(r);
    for (std::size_t j = 0; j < n; ++j) row[j] += bias[j];
  }
}

DenseTensor layernorm_rows(const DenseTensor& x, const DenseTensor& gain,
                           const DenseTensor& bias, LayerNormStats* stats) {
  const std::size_t rows = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layernorm parameter width mismatch");
  }
  DenseTensor out(x.dims());
  if (stats) {
    stats->mean.assign(rows, 0.0);
    stats->rstd.assign(rows, 0.0);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.row(r);
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = in[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    double* o = out.row(r);
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = (in[j] - mean) * rstd * gain[j] + bias[j];
    }
    if (stats) {
      stats->mean[r] = mean;
      stats->rstd[r] = rstd;
    }
  }
  return out;
}

void layernorm_rows_backward(const DenseTensor& x, const DenseTensor& gain,
                             const LayerNormStats& stats,
                             const DenseTensor& grad_out, DenseTensor& grad_x,
                             DenseTensor& grad_gain, DenseTensor& grad_bias) {
  const std::size_t rows = x.rows(), n = x.cols();
  std::vector<double> xhat(n), dxhat(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.row(r);
    const double* go = grad_out.row(r);
    const double mean = stats.mean[r], rstd = stats.rstd[r];
    double sum_d = 0.0, sum_dx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[j] = (in[j] - mean) * rstd;
      dxhat[j] = go[j] * gain[j];
      grad_gain[j] += go[j] * xhat[j];
      grad_bias[j] += go[j];
      sum_d += dxhat[j];
      sum_dx += dxhat[j] * xhat[j];
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    double* gx = grad_x.row(r);
    for (std::size_t j = 0; j < n; ++j) {
      gx[j] += rstd * (dxhat[j] - sum_d * inv_n - xhat[j] * sum_dx * inv_n);
    }
  }
}

double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

DenseTensor gelu(const DenseTensor& x) {
  DenseTensor out = x;
  gelu_inplace(out);
  return out;
}

void gelu_inplace(DenseTensor& x) {
  for (auto& v : x.storage()) v = gelu(v);
}

void gelu_backward(const DenseTensor& x, const DenseTensor& grad_out,
                   DenseTensor& grad_x) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    grad_x[i] += grad_out[i] * gelu_derivative(x[i]);
  }
}

void softmax_row(std::span<const double> in, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : in) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < in.size(); ++j) out[j] *= inv;
}

DenseTensor softmax_rows(const DenseTensor& x) {
  DenseTensor out(x.dims());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    softmax_row({x.row(r), n}, {out.row(r), n});
  }
  return out;
}

AttentionResult causal_attention(const DenseTensor& qkv, std::size_t n_head) {
  require_matrix(qkv, "attention input");
  const std::size_t T = qkv.rows(), width = qkv.cols();
  if (n_head == 0 || width % 3 != 0 || (width / 3) % n_head != 0) {
    throw ShapeError("attention input width not divisible into heads");
  }
  const std::size_t d = width / 3, dh = d / n_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionResult res;
  res.out = DenseTensor({T, d});
  res.probs.reserve(n_head);
  std::vector<double> scores(T);
  for (std::size_t h = 0; h < n_head; ++h) {
    DenseTensor probs({T, T});
    const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
    for (std::size_t t = 0; t < T; ++t) {
      const double* q = qkv.row(t) + qo;
      for (std::size_t p = 0; p <= t; ++p) {
        const double* k = qkv.row(p) + ko;
        double s = 0.0;
        for (std::size_t j = 0; j < dh; ++j) s += q[j] * k[j];
        scores[p] = s * scale;
      }
      softmax_row({scores.data(), t + 1}, {probs.row(t), t + 1});
      double* o = res.out.row(t) + qo;
      for (std::size_t p = 0; p <= t; ++p) {
        const double w = probs.at(t, p);
        const double* v = qkv.row(p) + vo;
        for (std::size_t j = 0; j < dh; ++j) o[j] += w * v[j];
      }
    }
    res.probs.push_back(std::move(probs));
  }
  return res;
}

void causal_attention_backward(const DenseTensor& qkv, std::size_t n_head,
                               const std::vector<DenseTensor>& probs,
                               const DenseTensor& grad_out,
                               const std::vector<DenseTensor>& grad_probs,
                               DenseTensor& grad_qkv) {
  const std::size_t T = qkv.rows(), d = qkv.cols() / 3, dh = d / n_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> dp(T), ds(T);
  for (std::size_t h = 0; h < n_head; ++h) {
    const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
    const DenseTensor& P = probs[h];
    const bool extra = !grad_probs.empty() && !grad_probs[h].empty();
    for (std::size_t t = 0; t < T; ++t) {
      const double* go = grad_out.row(t) + qo;
      // dP[t][p] = dO[t] . V[p]; dV[p] += P[t][p] dO[t]
      for (std::size_t p = 0; p <= t; ++p) {
        const double* v = qkv.row(p) + vo;
        double s = 0.0;
        for (std::size_t j = 0; j < dh; ++j) s += go[j] * v[j];
        if (extra) s += grad_probs[h].at(t, p);
        dp[p] = s;
        const double w = P.at(t, p);
        double* gv = grad_qkv.row(p) + vo;
        for (std::size_t j = 0; j < dh; ++j) gv[j] += w * go[j];
      }
      double dot = 0.0;
      for (std::size_t p = 0; p <= t; ++p) dot += dp[p] * P.at(t, p);
      for (std::size_t p = 0; p <= t; ++p) {
        ds[p] = P.at(t, p) * (dp[p] - dot) * scale;
      }
      const double* q = qkv.row(t) + qo;
      double* gq = grad_qkv.row(t) + qo;
      for (std::size_t p = 0; p <= t; ++p) {
        const double* k = qkv.row(p) + ko;
        double* gk = grad_qkv.row(p) + ko;
        const double w = ds[p];
        for (std::size_t j = 0; j < dh; ++j) {
          gq[j] += w * k[j];
          gk[j] += w * q[j];
        }
      }
    }
  }
}

DenseTensor embedding_lookup(const DenseTensor& table,
                             std::span<const int> ids) {
  require_matrix(table, "embedding table");
  const std::size_t n = table.cols();
  if (ids.empty()) throw ShapeError("embedding lookup of empty sequence");
  DenseTensor out({ids.size(), n});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= table.rows()) {
      throw IndexError("embedding id " + std::to_string(ids[r]) +
                       " out of range");
    }
    std::copy_n(table.row(static_cast<std::size_t>(ids[r])), n, out.row(r));
  }
  return out;
}

void embedding_backward(std::span<const int> ids, const DenseTensor& grad_out,
                        DenseTensor& grad_table) {
  const std::size_t n = grad_table.cols();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    double* g = grad_table.row(static_cast<std::size_t>(ids[r]));
    const double* go = grad_out.row(r);
    for (std::size_t j = 0; j < n; ++j) g[j] += go[j];
  }
}

double cross_entropy(std::span<const double> probs, std::size_t target) {
  if (target >= probs.size()) {
    throw IndexError("cross-entropy target " + std::to_string(target) +
                     " out of range for V=" + std::to_string(probs.size()));
  }
  return -std::log(std::max(probs[target], kLogClamp));
}

double cross_entropy(const DenseTensor& probs, std::size_t target) {
  return cross_entropy(probs.values(), target);
}

double cross_entropy_logits(std::span<const double> logits, std::size_t target,
                            std::span<double> grad, double weight) {
  if (target >= logits.size()) {
    throw IndexError("cross-entropy target " + std::to_string(target) +
                     " out of range for V=" + std::to_string(logits.size()));
  }
  std::vector<double> p(logits.size());
  softmax_row(logits, p);
  const double loss = cross_entropy(p, target);
  if (!grad.empty() && p[target] >= kLogClamp) {
    for (std::size_t j = 0; j < p.size(); ++j) grad[j] += weight * p[j];
    grad[target] -= weight;
  }
  return loss;
}

double mse_rows(const DenseTensor& x, const DenseTensor& ref) {
  if (!x.same_shape(ref)) throw ShapeError("mse shape mismatch");
  const std::size_t rows = x.rows(), n = x.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* a = x.row(r);
    const double* b = ref.row(r);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double dd = a[j] - b[j];
      s += dd * dd;
    }
    total += s;
  }
  return total / static_cast<double>(rows);
}

}  // namespace bflab::num
