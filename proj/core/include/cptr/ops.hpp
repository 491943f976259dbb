#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cptr/rng.hpp"
#include "cptr/tensor.hpp"

namespace cptr {

// Raw dense kernels. No tape interaction; backward closures call these
// directly so no second-order graph is ever built.
namespace kern {

template <class S>
void gemm_nn(int m, int k, int n, const S* a, const S* b, S* c) {
  for (int i = 0; i < m; ++i) {
    S* ci = c + static_cast<size_t>(i) * n;
    const S* ai = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S aip = ai[p];
      const S* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <class S>
void gemm_nt(int m, int k, int n, const S* a, const S* b, S* c) {
  for (int i = 0; i < m; ++i) {
    const S* ai = a + static_cast<size_t>(i) * k;
    S* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* bj = b + static_cast<size_t>(j) * k;
      S acc = 0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <class S>
void gemm_tn(int m, int k, int n, const S* a, const S* b, S* c) {
  for (int i = 0; i < m; ++i) {
    const S* ai = a + static_cast<size_t>(i) * k;
    const S* bi = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S aip = ai[p];
      S* cp = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace kern

namespace detail {

inline void require_rank2(const std::vector<int>& shape, const char* op) {
  if (shape.size() != 2) throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(shape));
}

inline int normalize_axis(int axis, int rank) {
  if (axis < 0 || axis >= rank)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return axis;
}

template <class S>
TensorT<S> matmul_nn_raw(const TensorT<S>& a, const TensorT<S>& b) {
  TensorT<S> c({a.dim(0), b.dim(1)});
  kern::gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), c.mutable_data());
  return c;
}

template <class S>
TensorT<S> matmul_nt_raw(const TensorT<S>& a, const TensorT<S>& b) {
  TensorT<S> c({a.dim(0), b.dim(0)});
  kern::gemm_nt(a.dim(0), a.dim(1), b.dim(0), a.data(), b.data(), c.mutable_data());
  return c;
}

template <class S>
TensorT<S> matmul_tn_raw(const TensorT<S>& a, const TensorT<S>& b) {
  TensorT<S> c({a.dim(1), b.dim(1)});
  kern::gemm_tn(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), c.mutable_data());
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: C = A * B, dA = dC * B^T, dB = A^T * dC
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> out = detail::matmul_nn_raw(a, b);
  detail::check_finite(out, "matmul");
  if (TapeT<S>* tp = detail::result_tape<S>({&a, &b})) {
    const int an = a.node(), bn = b.node();
    TensorT<S> as = a.detached(), bs = b.detached();
    int id = tp->record("matmul", {an, bn}, out.shape(), [an, bn, as, bs](TapeT<S>& t, const TensorT<S>& g) {
      if (an >= 0) t.accumulate(an, detail::matmul_nt_raw(g, bs));
      if (bn >= 0) t.accumulate(bn, detail::matmul_tn_raw(as, g));
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
template <class S>
TensorT<S> transpose(const TensorT<S>& x) {
  detail::require_rank2(x.shape(), "transpose");
  const int r = x.dim(0), c = x.dim(1);
  TensorT<S> out({c, r});
  const S* src = x.data();
  S* dst = out.mutable_data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) dst[static_cast<size_t>(j) * r + i] = src[static_cast<size_t>(i) * c + j];
  if (TapeT<S>* tp = detail::result_tape<S>({&x})) {
    const int xn = x.node();
    int id = tp->record("transpose", {xn}, out.shape(), [xn](TapeT<S>& t, const TensorT<S>& g) {
      t.accumulate(xn, transpose(g.detached()));
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.mutable_data();
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  detail::check_finite(out, "add");
  if (TapeT<S>* tp = detail::result_tape<S>({&a, &b})) {
    const int an = a.node(), bn = b.node();
    int id = tp->record("add", {an, bn}, out.shape(), [an, bn](TapeT<S>& t, const TensorT<S>& g) {
      t.accumulate(an, g);
      t.accumulate(bn, g);
    });
    out.attach(tp, id);
  }
  return out;
}

// Elementwise product.
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.mutable_data();
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  detail::check_finite(out, "mul");
  if (TapeT<S>* tp = detail::result_tape<S>({&a, &b})) {
    const int an = a.node(), bn = b.node();
    TensorT<S> as = a.detached(), bs = b.detached();
    int id = tp->record("mul", {an, bn}, out.shape(), [an, bn, as, bs](TapeT<S>& t, const TensorT<S>& g) {
      if (an >= 0) {
        TensorT<S> da(as.shape());
        const S* pg = g.data();
        const S* pb2 = bs.data();
        S* pd = da.mutable_data();
        for (long long i = 0; i < da.size(); ++i) pd[i] = pg[i] * pb2[i];
        t.accumulate(an, da);
      }
      if (bn >= 0) {
        TensorT<S> db(bs.shape());
        const S* pg = g.data();
        const S* pa2 = as.data();
        S* pd = db.mutable_data();
        for (long long i = 0; i < db.size(); ++i) pd[i] = pg[i] * pa2[i];
        t.accumulate(bn, db);
      }
    });
    out.attach(tp, id);
  }
  return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  TensorT<S> out(x.shape());
  const S* px = x.data();
  S* po = out.mutable_data();
  const long long n = x.size();
  for (long long i = 0; i < n; ++i) po[i] = px[i] * c;
  detail::check_finite(out, "scale");
  if (TapeT<S>* tp = detail::result_tape<S>({&x})) {
    const int xn = x.node();
    int id = tp->record("scale", {xn}, out.shape(), [xn, c](TapeT<S>& t, const TensorT<S>& g) {
      TensorT<S> dx(g.shape());
      const S* pg = g.data();
      S* pd = dx.mutable_data();
      for (long long i = 0; i < dx.size(); ++i) pd[i] = pg[i] * c;
      t.accumulate(xn, dx);
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax along `axis`, computed with max subtraction. Saves the output,
// which is all backward needs: dx = y * (g - sum(g*y)).
template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  axis = detail::normalize_axis(axis, x.rank());
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const long long n = x.dim(axis);
  TensorT<S> out(x.shape());
  const S* px = x.data();
  S* po = out.mutable_data();
  for (long long o = 0; o < outer; ++o) {
    for (long long in = 0; in < inner; ++in) {
      const long long base = o * n * inner + in;
      S mx = px[base];
      for (long long i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
      S sum = 0;
      for (long long i = 0; i < n; ++i) {
        const S e = std::exp(px[base + i * inner] - mx);
        po[base + i * inner] = e;
        sum += e;
      }
      const S inv = S(1) / sum;
      for (long long i = 0; i < n; ++i) po[base + i * inner] *= inv;
    }
  }
  detail::check_finite(out, "softmax");
  if (TapeT<S>* tp = detail::result_tape<S>({&x})) {
    const int xn = x.node();
    TensorT<S> ys = out.detached();
    int id = tp->record("softmax", {xn}, out.shape(), [xn, ys, outer, inner, n](TapeT<S>& t, const TensorT<S>& g) {
      TensorT<S> dx(ys.shape());
      const S* py = ys.data();
      const S* pg = g.data();
      S* pd = dx.mutable_data();
      for (long long o = 0; o < outer; ++o) {
        for (long long in = 0; in < inner; ++in) {
          const long long base = o * n * inner + in;
          S dot = 0;
          for (long long i = 0; i < n; ++i) dot += pg[base + i * inner] * py[base + i * inner];
          for (long long i = 0; i < n; ++i)
            pd[base + i * inner] = py[base + i * inner] * (pg[base + i * inner] - dot);
        }
      }
      t.accumulate(xn, dx);
    });
    out.attach(tp, id);
  }
  return out;
}

// log softmax along `axis`; dx = g - exp(y) * sum(g).
template <class S>
TensorT<S> log_softmax(const TensorT<S>& x, int axis) {
  axis = detail::normalize_axis(axis, x.rank());
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const long long n = x.dim(axis);
  TensorT<S> out(x.shape());
  const S* px = x.data();
  S* po = out.mutable_data();
  for (long long o = 0; o < outer; ++o) {
    for (long long in = 0; in < inner; ++in) {
      const long long base = o * n * inner + in;
      S mx = px[base];
      for (long long i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
      S sum = 0;
      for (long long i = 0; i < n; ++i) sum += std::exp(px[base + i * inner] - mx);
      const S lse = mx + std::log(sum);
      for (long long i = 0; i < n; ++i) po[base + i * inner] = px[base + i * inner] - lse;
    }
  }
  detail::check_finite(out, "log_softmax");
  if (TapeT<S>* tp = detail::result_tape<S>({&x})) {
    const int xn = x.node();
    TensorT<S> ys = out.detached();
    int id = tp->record("log_softmax", {xn}, out.shape(), [xn, ys, outer, inner, n](TapeT<S>& t, const TensorT<S>& g) {
      TensorT<S> dx(ys.shape());
      const S* py = ys.data();
      const S* pg = g.data();
      S* pd = dx.mutable_data();
      for (long long o = 0; o < outer; ++o) {
        for (long long in = 0; in < inner; ++in) {
          const long long base = o * n * inner + in;
          S gsum = 0;
          for (long long i = 0; i < n; ++i) gsum += pg[base + i * inner];
          for (long long i = 0; i < n; ++i)
            pd[base + i * inner] = pg[base + i * inner] - std::exp(py[base + i * inner]) * gsum;
        }
      }
      t.accumulate(xn, dx);
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis with affine gain/bias. A constant
// vector normalizes to zero through eps and the output is then just the bias.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps) {
  if (eps <= S(0)) throw ValueError("layer_norm eps must be positive");
  const int d = x.dim(x.rank() - 1);
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("layer_norm affine params must have length " + std::to_string(d));
  const long long rows = x.size() / d;
  TensorT<S> xhat(x.shape());
  std::vector<S> inv_std(static_cast<size_t>(rows));
  const S* px = x.data();
  S* ph = xhat.mutable_data();
  for (long long r = 0; r < rows; ++r) {
    const S* row = px + r * d;
    S mu = 0;
    for (int i = 0; i < d; ++i) mu += row[i];
    mu /= S(d);
    S var = 0;
    for (int i = 0; i < d; ++i) {
      const S c = row[i] - mu;
      var += c * c;
    }
    var /= S(d);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    S* hrow = ph + r * d;
    for (int i = 0; i < d; ++i) hrow[i] = (row[i] - mu) * is;
  }
  TensorT<S> out(x.shape());
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.mutable_data();
  for (long long r = 0; r < rows; ++r)
    for (int i = 0; i < d; ++i) po[r * d + i] = ph[r * d + i] * pg[i] + pb[i];
  detail::check_finite(out, "layer_norm");
  if (TapeT<S>* tp = detail::result_tape<S>({&x, &gain, &bias})) {
    const int xn = x.node(), gn = gain.node(), bn = bias.node();
    TensorT<S> hs = xhat.detached();
    TensorT<S> gs = gain.detached();
    int id = tp->record("layer_norm", {xn, gn, bn}, out.shape(),
                        [xn, gn, bn, hs, gs, inv_std, rows, d](TapeT<S>& t, const TensorT<S>& g) {
      const S* ph2 = hs.data();
      const S* pgain = gs.data();
      const S* pg2 = g.data();
      if (gn >= 0 || bn >= 0) {
        TensorT<S> dgain({d}), dbias({d});
        S* pdg = dgain.mutable_data();
        S* pdb = dbias.mutable_data();
        for (long long r = 0; r < rows; ++r) {
          for (int i = 0; i < d; ++i) {
            pdg[i] += pg2[r * d + i] * ph2[r * d + i];
            pdb[i] += pg2[r * d + i];
          }
        }
        if (gn >= 0) t.accumulate(gn, dgain);
        if (bn >= 0) t.accumulate(bn, dbias);
      }
      if (xn >= 0) {
        TensorT<S> dx(hs.shape());
        S* pdx = dx.mutable_data();
        for (long long r = 0; r < rows; ++r) {
          S mean_dh = 0, mean_dh_h = 0;
          for (int i = 0; i < d; ++i) {
            const S dh = pg2[r * d + i] * pgain[i];
            mean_dh += dh;
            mean_dh_h += dh * ph2[r * d + i];
          }
          mean_dh /= S(d);
          mean_dh_h /= S(d);
          const S is = inv_std[static_cast<size_t>(r)];
          for (int i = 0; i < d; ++i) {
            const S dh = pg2[r * d + i] * pgain[i];
            pdx[r * d + i] = is * (dh - mean_dh - ph2[r * d + i] * mean_dh_h);
          }
        }
        t.accumulate(xn, dx);
      }
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  TensorT<S> out(x.shape());
  const S* px = x.data();
  S* po = out.mutable_data();
  const long long n = x.size();
  for (long long i = 0; i < n; ++i) {
    const double v = static_cast<double>(px[i]);
    po[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  detail::check_finite(out, "gelu");
  if (TapeT<S>* tp = detail::result_tape<S>({&x})) {
    const int xn = x.node();
    TensorT<S> xs = x.detached();
    int id = tp->record("gelu", {xn}, out.shape(), [xn, xs](TapeT<S>& t, const TensorT<S>& g) {
      TensorT<S> dx(xs.shape());
      const S* px2 = xs.data();
      const S* pg = g.data();
      S* pd = dx.mutable_data();
      for (long long i = 0; i < dx.size(); ++i) {
        const double v = static_cast<double>(px2[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        pd[i] = pg[i] * static_cast<S>(cdf + v * pdf);
      }
      t.accumulate(xn, dx);
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
// Identity in eval mode. The byte mask is the saved activation.
template <class S>
TensorT<S> dropout(const TensorT<S>& x, double p, bool training, CounterRng& rng) {
  if (p < 0.0 || p >= 1.0) throw ValueError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  const long long n = x.size();
  std::vector<uint8_t> mask(static_cast<size_t>(n));
  for (long long i = 0; i < n; ++i) mask[static_cast<size_t>(i)] = rng.next_uniform() >= p ? 1 : 0;
  TensorT<S> out(x.shape());
  const S* px = x.data();
  S* po = out.mutable_data();
  for (long long i = 0; i < n; ++i) po[i] = mask[static_cast<size_t>(i)] ? px[i] * keep_scale : S(0);
  if (TapeT<S>* tp = detail::result_tape<S>({&x})) {
    const int xn = x.node();
    int id = tp->record("dropout", {xn}, out.shape(),
                        [xn, mask = std::move(mask), keep_scale](TapeT<S>& t, const TensorT<S>& g) {
      TensorT<S> dx(g.shape());
      const S* pg = g.data();
      S* pd = dx.mutable_data();
      for (long long i = 0; i < dx.size(); ++i) pd[i] = mask[static_cast<size_t>(i)] ? pg[i] * keep_scale : S(0);
      t.accumulate(xn, dx);
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: y = x * W + b with the bias broadcast over rows.
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  detail::require_rank2(x.shape(), "linear");
  detail::require_rank2(w.shape(), "linear");
  if (x.dim(1) != w.dim(0))
    throw ShapeError("linear shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (b.size() != w.dim(1)) throw ShapeError("linear bias must have length " + std::to_string(w.dim(1)));
  const int m = x.dim(0), out_d = w.dim(1);
  TensorT<S> out({m, out_d});
  S* po = out.mutable_data();
  const S* pb = b.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < out_d; ++j) po[static_cast<size_t>(i) * out_d + j] = pb[j];
  kern::gemm_nn(m, x.dim(1), out_d, x.data(), w.data(), po);
  detail::check_finite(out, "linear");
  if (TapeT<S>* tp = detail::result_tape<S>({&x, &w, &b})) {
    const int xn = x.node(), wn = w.node(), bn = b.node();
    TensorT<S> xs = x.detached(), ws = w.detached();
    int id = tp->record("linear", {xn, wn, bn}, out.shape(),
                        [xn, wn, bn, xs, ws, m, out_d](TapeT<S>& t, const TensorT<S>& g) {
      if (xn >= 0) t.accumulate(xn, detail::matmul_nt_raw(g, ws));
      if (wn >= 0) t.accumulate(wn, detail::matmul_tn_raw(xs, g));
      if (bn >= 0) {
        TensorT<S> db({out_d});
        S* pd = db.mutable_data();
        const S* pg = g.data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < out_d; ++j) pd[j] += pg[static_cast<size_t>(i) * out_d + j];
        t.accumulate(bn, db);
      }
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row gather from an embedding table; gradient scatter-adds into the rows.
template <class S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const std::vector<int>& ids) {
  detail::require_rank2(table.shape(), "embedding_lookup");
  if (ids.empty()) throw ValueError("embedding_lookup needs at least one id");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ValueError("embedding id " + std::to_string(id) + " out of range [0, " + std::to_string(v) + ")");
  const int t_len = static_cast<int>(ids.size());
  TensorT<S> out({t_len, d});
  const S* pt = table.data();
  S* po = out.mutable_data();
  for (int i = 0; i < t_len; ++i)
    std::copy_n(pt + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d, d, po + static_cast<size_t>(i) * d);
  if (TapeT<S>* tp = detail::result_tape<S>({&table})) {
    const int tn = table.node();
    int id = tp->record("embedding_lookup", {tn}, out.shape(),
                        [tn, ids, v, d](TapeT<S>& t, const TensorT<S>& g) {
      TensorT<S> dt({v, d});
      S* pd = dt.mutable_data();
      const S* pg = g.data();
      for (size_t i = 0; i < ids.size(); ++i) {
        S* row = pd + static_cast<size_t>(ids[i]) * d;
        const S* grow = pg + i * d;
        for (int j = 0; j < d; ++j) row[j] += grow[j];
      }
      t.accumulate(tn, dt);
    });
    out.attach(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
template <class S>
TensorT<S> slice_last_axis(const TensorT<S>& x, int start, int len) {
  detail::require_rank2(x.shape(), "slice_last_axis");
  const int r = x.dim(0), c = x.dim(1);
  if (start < 0 || len <= 0 || start + len > c)
    throw ShapeError("slice_last_axis [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range for " + shape_str(x.shape()));
  TensorT<S> out({r, len});
  const S* px = x.data();
  S* po = out.mutable_data();
  for (int i = 0; i < r; ++i)
    std::copy_n(px + static_cast<size_t>(i) * c + start, len, po + static_cast<size_t>(i) * len);
  if (TapeT<S>* tp = detail::result_tape<S>({&x})) {
    const int xn = x.node();
    int id = tp->record("slice_last_axis", {xn}, out.shape(),
                        [xn, r, c, start, len](TapeT<S>& t, const TensorT<S>& g) {
      TensorT<S> dx({r, c});
      S* pd = dx.mutable_data();
      const S* pg = g.data();
      for (int i = 0; i < r; ++i)
        std::copy_n(pg + static_cast<size_t>(i) * len, len, pd + static_cast<size_t>(i) * c + start);
      t.accumulate(xn, dx);
    });
    out.attach(tp, id);
  }
  return out;
}

template <class S>
TensorT<S> concat_last_axis(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ValueError("concat_last_axis of zero tensors");
  const int r = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p.shape(), "concat_last_axis");
    if (p.dim(0) != r) throw ShapeError("concat_last_axis row mismatch: " + shape_str(p.shape()));
    total += p.dim(1);
  }
  TensorT<S> out({r, total});
  S* po = out.mutable_data();
  int off = 0;
  for (const auto& p : parts) {
    const int c = p.dim(1);
    const S* pp = p.data();
    for (int i = 0; i < r; ++i)
      std::copy_n(pp + static_cast<size_t>(i) * c, c, po + static_cast<size_t>(i) * total + off);
    off += c;
  }
  TapeT<S>* tp = nullptr;
  for (const auto& p : parts) {
    if (!p.tape()) continue;
    if (tp && tp != p.tape()) throw Error("op inputs recorded on different tapes");
    tp = p.tape();
  }
  if (tp) {
    std::vector<int> in_nodes;
    std::vector<int> widths;
    in_nodes.reserve(parts.size());
    for (const auto& p : parts) {
      in_nodes.push_back(p.node());
      widths.push_back(p.dim(1));
    }
    int id = tp->record("concat_last_axis", in_nodes, out.shape(),
                        [in_nodes, widths, r, total](TapeT<S>& t, const TensorT<S>& g) {
      const S* pg = g.data();
      int off2 = 0;
      for (size_t k = 0; k < in_nodes.size(); ++k) {
        const int c = widths[k];
        if (in_nodes[k] >= 0) {
          TensorT<S> dp({r, c});
          S* pd = dp.mutable_data();
          for (int i = 0; i < r; ++i)
            std::copy_n(pg + static_cast<size_t>(i) * total + off2, c, pd + static_cast<size_t>(i) * c);
          t.accumulate(in_nodes[k], dp);
        }
        off2 += c;
      }
    });
    out.attach(tp, id);
  }
  return out;
}

// Reshape-transpose pair: [T x d] -> H tensors of [T x d/H] and back.
template <class S>
std::vector<TensorT<S>> split_heads(const TensorT<S>& x, int n_heads) {
  detail::require_rank2(x.shape(), "split_heads");
  if (n_heads <= 0 || x.dim(1) % n_heads != 0)
    throw ShapeError("split_heads: " + std::to_string(n_heads) + " heads do not divide width " +
                     std::to_string(x.dim(1)));
  const int dh = x.dim(1) / n_heads;
  std::vector<TensorT<S>> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) heads.push_back(slice_last_axis(x, h * dh, dh));
  return heads;
}

template <class S>
TensorT<S> merge_heads(const std::vector<TensorT<S>>& heads) {
  return concat_last_axis(heads);
}

// ---------------------------------------------------------------------------
template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  S acc = 0;
  const S* px = x.data();
  const long long n = x.size();
  for (long long i = 0; i < n; ++i) acc += px[i];
  TensorT<S> out = TensorT<S>::scalar(acc);
  if (TapeT<S>* tp = detail::result_tape<S>({&x})) {
    const int xn = x.node();
    const std::vector<int> xshape = x.shape();
    int id = tp->record("sum", {xn}, out.shape(), [xn, xshape](TapeT<S>& t, const TensorT<S>& g) {
      t.accumulate(xn, TensorT<S>::full(xshape, g.item()));
    });
    out.attach(tp, id);
  }
  return out;
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
  const S inv = S(1) / static_cast<S>(x.size());
  TensorT<S> s = sum(x);
  return scale(s, inv);
}

// ---------------------------------------------------------------------------
// Summed token-level negative log likelihood from raw logits. Optional byte
// mask (1 = keep) drops padding positions. Saves the softmax probabilities;
// d(logits[t]) = mask_t * (p_t - onehot(target_t)).
template <class S>
TensorT<S> cross_entropy_from_logits(const TensorT<S>& logits, const std::vector<int>& targets,
                                     const std::vector<uint8_t>* mask = nullptr) {
  detail::require_rank2(logits.shape(), "cross_entropy_from_logits");
  const int t_len = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t_len)
    throw ShapeError("cross_entropy length mismatch: " + std::to_string(t_len) + " logit rows vs " +
                     std::to_string(targets.size()) + " targets");
  if (mask && static_cast<int>(mask->size()) != t_len)
    throw ShapeError("cross_entropy mask length mismatch");
  for (int id : targets)
    if (id < 0 || id >= v) throw ValueError("target id " + std::to_string(id) + " out of vocab range");
  TensorT<S> probs({t_len, v});
  const S* pl = logits.data();
  S* pp = probs.mutable_data();
  S loss = 0;
  for (int t = 0; t < t_len; ++t) {
    const S* row = pl + static_cast<size_t>(t) * v;
    S mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S sum = 0;
    for (int j = 0; j < v; ++j) {
      const S e = std::exp(row[j] - mx);
      pp[static_cast<size_t>(t) * v + j] = e;
      sum += e;
    }
    const S inv = S(1) / sum;
    for (int j = 0; j < v; ++j) pp[static_cast<size_t>(t) * v + j] *= inv;
    if (!mask || (*mask)[static_cast<size_t>(t)]) {
      const S lse = mx + std::log(sum);
      loss += lse - row[targets[static_cast<size_t>(t)]];
    }
  }
  TensorT<S> out = TensorT<S>::scalar(loss);
  detail::check_finite(out, "cross_entropy_from_logits");
  if (TapeT<S>* tp = detail::result_tape<S>({&logits})) {
    const int ln = logits.node();
    TensorT<S> ps = probs.detached();
    std::vector<uint8_t> msk = mask ? *mask : std::vector<uint8_t>();
    int id = tp->record("cross_entropy_from_logits", {ln}, out.shape(),
                        [ln, ps, targets, msk, t_len, v](TapeT<S>& t, const TensorT<S>& g) {
      const S gs = g.item();
      TensorT<S> dl({t_len, v});
      S* pd = dl.mutable_data();
      const S* pp2 = ps.data();
      for (int tt = 0; tt < t_len; ++tt) {
        if (!msk.empty() && !msk[static_cast<size_t>(tt)]) continue;
        S* drow = pd + static_cast<size_t>(tt) * v;
        const S* prow = pp2 + static_cast<size_t>(tt) * v;
        for (int j = 0; j < v; ++j) drow[j] = gs * prow[j];
        drow[targets[static_cast<size_t>(tt)]] -= gs;
      }
      t.accumulate(ln, dl);
    });
    out.attach(tp, id);
  }
  return out;
}

}  // namespace cptr
