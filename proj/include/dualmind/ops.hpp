#pragma once
// The fixed differentiable operator set. Free functions over tensor<S>;
// shapes are validated eagerly and mismatches throw with both shapes in the
// message. There is no implicit broadcasting anywhere: rank changes are
// explicit (reshape/concat/slice) and the two broadcast-like conveniences
// (add_rowwise for biases, scatter/gather for row routing) state their shape
// contracts exactly. Eigen maps provide the GEMM kernels.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "dualmind/autodiff.hpp"
#include "dualmind/rng.hpp"

namespace dm {

template <class S>
using emat = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using cemat = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

template <class S>
inline bool want_node(const tensor<S>& a) {
  return recording<S>() && a.requires_grad();
}
template <class S>
inline bool want_node(const tensor<S>& a, const tensor<S>& b) {
  return recording<S>() && (a.requires_grad() || b.requires_grad());
}

inline std::int64_t outer_of(const shape_t& s, int axis) {
  std::int64_t o = 1;
  for (int i = 0; i < axis; ++i) o *= s[std::size_t(i)];
  return o;
}
inline std::int64_t inner_of(const shape_t& s, int axis) {
  std::int64_t in = 1;
  for (std::size_t i = std::size_t(axis) + 1; i < s.size(); ++i) in *= s[i];
  return in;
}

}  // namespace detail

// ---------------------------------------------------------------- matmul ---
// 2-D product with transpose flags folded in: C = op(A) * op(B).
template <class S>
tensor<S> matmul(const tensor<S>& a, const tensor<S>& b, bool ta = false, bool tb = false) {
  check(a.rank() == 2 && b.rank() == 2,
        "matmul: need rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = ta ? a.dim(1) : a.dim(0);
  const int k = ta ? a.dim(0) : a.dim(1);
  const int kb = tb ? b.dim(1) : b.dim(0);
  const int n = tb ? b.dim(0) : b.dim(1);
  check(k == kb, "matmul: inner dimensions disagree, " + shape_str(a.shape()) + (ta ? "^T" : "") +
                     " * " + shape_str(b.shape()) + (tb ? "^T" : ""));

  tensor<S> out = tensor<S>::zeros({m, n});
  {
    cemat<S> A(a.value().data(), a.dim(0), a.dim(1));
    cemat<S> B(b.value().data(), b.dim(0), b.dim(1));
    emat<S> C(out.value().data(), m, n);
    if (!ta && !tb)
      C.noalias() = A * B;
    else if (ta && !tb)
      C.noalias() = A.transpose() * B;
    else if (!ta && tb)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  if (detail::want_node(a, b)) {
    out.set_requires_grad(true);
    tensor<S> ac = a, bc = b, oc = out;
    record<S>("matmul", [ac, bc, oc, ta, tb]() mutable {
      if (!oc.has_grad()) return;
      cemat<S> G(oc.grad_view().data(), oc.dim(0), oc.dim(1));
      cemat<S> A(ac.value().data(), ac.dim(0), ac.dim(1));
      cemat<S> B(bc.value().data(), bc.dim(0), bc.dim(1));
      if (ac.requires_grad()) {
        emat<S> dA(ac.grad().data(), ac.dim(0), ac.dim(1));
        if (!ta)
          dA.noalias() += tb ? (G * B).eval() : (G * B.transpose()).eval();
        else
          dA.noalias() += tb ? (B.transpose() * G.transpose()).eval() : (B * G.transpose()).eval();
      }
      if (bc.requires_grad()) {
        emat<S> dB(bc.grad().data(), bc.dim(0), bc.dim(1));
        if (!tb)
          dB.noalias() += ta ? (A * G).eval() : (A.transpose() * G).eval();
        else
          dB.noalias() += ta ? (G.transpose() * A.transpose()).eval() : (G.transpose() * A).eval();
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------- bmm ---
// Rank-3 batched product: out[i] = op(a[i]) * op(b[i]) for each leading index.
template <class S>
tensor<S> bmm(const tensor<S>& a, const tensor<S>& b, bool ta = false, bool tb = false) {
  check(a.rank() == 3 && b.rank() == 3,
        "bmm: need rank-3 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  check(a.dim(0) == b.dim(0), "bmm: batch dimensions disagree, " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  const int nb = a.dim(0);
  const int m = ta ? a.dim(2) : a.dim(1);
  const int k = ta ? a.dim(1) : a.dim(2);
  const int kb = tb ? b.dim(2) : b.dim(1);
  const int n = tb ? b.dim(1) : b.dim(2);
  check(k == kb, "bmm: inner dimensions disagree, " + shape_str(a.shape()) + (ta ? "^T" : "") + " * " +
                     shape_str(b.shape()) + (tb ? "^T" : ""));

  tensor<S> out = tensor<S>::zeros({nb, m, n});
  const std::int64_t sa = std::int64_t(a.dim(1)) * a.dim(2);
  const std::int64_t sb = std::int64_t(b.dim(1)) * b.dim(2);
  const std::int64_t so = std::int64_t(m) * n;
  for (int i = 0; i < nb; ++i) {
    cemat<S> A(a.value().data() + i * sa, a.dim(1), a.dim(2));
    cemat<S> B(b.value().data() + i * sb, b.dim(1), b.dim(2));
    emat<S> C(out.value().data() + i * so, m, n);
    if (!ta && !tb)
      C.noalias() = A * B;
    else if (ta && !tb)
      C.noalias() = A.transpose() * B;
    else if (!ta && tb)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  if (detail::want_node(a, b)) {
    out.set_requires_grad(true);
    tensor<S> ac = a, bc = b, oc = out;
    record<S>("bmm", [ac, bc, oc, ta, tb, nb, m, n, sa, sb, so]() mutable {
      if (!oc.has_grad()) return;
      for (int i = 0; i < nb; ++i) {
        cemat<S> G(oc.grad_view().data() + i * so, m, n);
        cemat<S> A(ac.value().data() + i * sa, ac.dim(1), ac.dim(2));
        cemat<S> B(bc.value().data() + i * sb, bc.dim(1), bc.dim(2));
        if (ac.requires_grad()) {
          emat<S> dA(ac.grad().data() + i * sa, ac.dim(1), ac.dim(2));
          if (!ta)
            dA.noalias() += tb ? (G * B).eval() : (G * B.transpose()).eval();
          else
            dA.noalias() += tb ? (B.transpose() * G.transpose()).eval() : (B * G.transpose()).eval();
        }
        if (bc.requires_grad()) {
          emat<S> dB(bc.grad().data() + i * sb, bc.dim(1), bc.dim(2));
          if (!tb)
            dB.noalias() += ta ? (A * G).eval() : (A.transpose() * G).eval();
          else
            dB.noalias() += ta ? (G.transpose() * A.transpose()).eval() : (G.transpose() * A).eval();
        }
      }
    });
  }
  return out;
}

// ----------------------------------------------------------- elementwise ---
template <class S>
tensor<S> add(const tensor<S>& a, const tensor<S>& b) {
  check(a.shape() == b.shape(),
        "add: shapes disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  tensor<S> out = tensor<S>::zeros(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + b.value()[i];
  if (detail::want_node(a, b)) {
    out.set_requires_grad(true);
    tensor<S> ac = a, bc = b, oc = out;
    record<S>("add", [ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      if (ac.requires_grad()) {
        auto& da = ac.grad();
        for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (bc.requires_grad()) {
        auto& db = bc.grad();
        for (std::int64_t i = 0; i < n; ++i) db[i] += g[i];
      }
    });
  }
  return out;
}

template <class S>
tensor<S> scale(const tensor<S>& a, S c) {
  tensor<S> out = tensor<S>::zeros(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = c * a.value()[i];
  if (detail::want_node(a)) {
    out.set_requires_grad(true);
    tensor<S> ac = a, oc = out;
    record<S>("scale", [ac, oc, c, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      auto& da = ac.grad();
      for (std::int64_t i = 0; i < n; ++i) da[i] += c * g[i];
    });
  }
  return out;
}

template <class S>
tensor<S> mul(const tensor<S>& a, const tensor<S>& b) {
  check(a.shape() == b.shape(),
        "mul: shapes disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  tensor<S> out = tensor<S>::zeros(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * b.value()[i];
  if (detail::want_node(a, b)) {
    out.set_requires_grad(true);
    tensor<S> ac = a, bc = b, oc = out;
    record<S>("mul", [ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      if (ac.requires_grad()) {
        auto& da = ac.grad();
        for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * bc.value()[i];
      }
      if (bc.requires_grad()) {
        auto& db = bc.grad();
        for (std::int64_t i = 0; i < n; ++i) db[i] += g[i] * ac.value()[i];
      }
    });
  }
  return out;
}

template <class S>
tensor<S> sub(const tensor<S>& a, const tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

// Adds a rank-1 bias to every row of x ([..., d] + [d]); the only sanctioned
// bias-style broadcast, stated explicitly instead of implied.
template <class S>
tensor<S> add_rowwise(const tensor<S>& x, const tensor<S>& b) {
  check(x.rank() >= 1 && b.rank() == 1, "add_rowwise: need x rank>=1 and b rank 1, got " +
                                            shape_str(x.shape()) + " and " + shape_str(b.shape()));
  const int d = x.dim(x.rank() - 1);
  check(d == b.dim(0), "add_rowwise: last dimension of " + shape_str(x.shape()) +
                           " must match bias " + shape_str(b.shape()));
  tensor<S> out = tensor<S>::zeros(x.shape());
  const std::int64_t rows = x.numel() / d;
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out.value()[r * d + j] = x.value()[r * d + j] + b.value()[j];
  if (detail::want_node(x, b)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, bc = b, oc = out;
    record<S>("add_rowwise", [xc, bc, oc, rows, d]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      if (xc.requires_grad()) {
        auto& dx = xc.grad();
        const std::int64_t n = rows * d;
        for (std::int64_t i = 0; i < n; ++i) dx[i] += g[i];
      }
      if (bc.requires_grad()) {
        auto& db = bc.grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) db[j] += g[r * d + j];
      }
    });
  }
  return out;
}

// --------------------------------------------------------------- softmax ---
template <class S>
tensor<S> softmax(const tensor<S>& x, int axis) {
  check(axis >= 0 && axis < x.rank(),
        "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const std::int64_t outer = detail::outer_of(x.shape(), axis);
  const std::int64_t inner = detail::inner_of(x.shape(), axis);
  const int n = x.dim(axis);
  tensor<S> out = tensor<S>::zeros(x.shape());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      S mx = x.value()[base];
      for (int j = 1; j < n; ++j) mx = std::max(mx, x.value()[base + j * inner]);
      S z = S(0);
      for (int j = 0; j < n; ++j) {
        S e = std::exp(x.value()[base + j * inner] - mx);
        out.value()[base + j * inner] = e;
        z += e;
      }
      const S iz = S(1) / z;
      for (int j = 0; j < n; ++j) out.value()[base + j * inner] *= iz;
    }
  }
  if (detail::want_node(x)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, oc = out;
    record<S>("softmax", [xc, oc, outer, inner, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      const auto& y = oc.value();
      auto& dx = xc.grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          S dot = S(0);
          for (int j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (int j = 0; j < n; ++j) {
            const std::int64_t k = base + j * inner;
            dx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------ layer norm ---
// Normalizes the last axis, then applies the affine pair. Rows whose
// population variance is below 1e-12 normalize to exactly zero (so a constant
// row maps to beta), and contribute zero gradient to x and gamma.
template <class S>
tensor<S> layer_norm(const tensor<S>& x, const tensor<S>& gamma, const tensor<S>& beta,
                     S eps = S(1e-5)) {
  check(x.rank() >= 1, "layer_norm: need rank >= 1, got " + shape_str(x.shape()));
  const int d = x.dim(x.rank() - 1);
  check(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
        "layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
            " must be [" + std::to_string(d) + "]");
  const std::int64_t rows = x.numel() / d;
  tensor<S> out = tensor<S>::zeros(x.shape());
  std::vector<S> xhat(std::size_t(x.numel()));
  std::vector<S> invstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = x.value().data() + r * d;
    S mean = S(0);
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= S(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= S(d);
    S istd = var < S(1e-12) ? S(0) : S(1) / std::sqrt(var + eps);
    invstd[std::size_t(r)] = istd;
    for (int j = 0; j < d; ++j) {
      const S h = (xr[j] - mean) * istd;
      xhat[std::size_t(r * d + j)] = h;
      out.value()[r * d + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  if (recording<S>() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    out.set_requires_grad(true);
    tensor<S> xc = x, gc = gamma, bc = beta, oc = out;
    auto xh = std::make_shared<std::vector<S>>(std::move(xhat));
    auto is = std::make_shared<std::vector<S>>(std::move(invstd));
    record<S>("layer_norm", [xc, gc, bc, oc, xh, is, rows, d]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      for (std::int64_t r = 0; r < rows; ++r) {
        const S* gr = g.data() + r * d;
        const S* hr = xh->data() + r * d;
        if (gc.requires_grad()) {
          auto& dg = gc.grad();
          for (int j = 0; j < d; ++j) dg[j] += gr[j] * hr[j];
        }
        if (bc.requires_grad()) {
          auto& db = bc.grad();
          for (int j = 0; j < d; ++j) db[j] += gr[j];
        }
        if (xc.requires_grad()) {
          const S istd = (*is)[std::size_t(r)];
          if (istd == S(0)) continue;
          S m1 = S(0), m2 = S(0);
          for (int j = 0; j < d; ++j) {
            const S gl = gr[j] * gc.value()[j];
            m1 += gl;
            m2 += gl * hr[j];
          }
          m1 /= S(d);
          m2 /= S(d);
          auto& dx = xc.grad();
          for (int j = 0; j < d; ++j) {
            const S gl = gr[j] * gc.value()[j];
            dx[r * d + j] += istd * (gl - m1 - hr[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------ gelu ---
// Exact form x * Phi(x) with the Gaussian CDF.
template <class S>
tensor<S> gelu(const tensor<S>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  tensor<S> out = tensor<S>::zeros(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = double(x.value()[i]);
    out.value()[i] = S(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (detail::want_node(x)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, oc = out;
    record<S>("gelu", [xc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      auto& dx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        const double v = double(xc.value()[i]);
        const double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double dens = std::exp(-0.5 * v * v) * inv_sqrt_2pi;
        dx[i] += g[i] * S(phi + v * dens);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- gather ---
// Row gather (embedding lookup): out[i, :] = table[ids[i], :].
template <class S>
tensor<S> gather_rows(const tensor<S>& table, const std::vector<int>& ids) {
  check(table.rank() == 2, "gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    check(id >= 0 && id < v,
          "gather_rows: id " + std::to_string(id) + " outside table " + shape_str(table.shape()));
  tensor<S> out = tensor<S>::zeros({int(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.value().data() + std::int64_t(i) * d, table.value().data() + std::int64_t(ids[i]) * d,
                sizeof(S) * std::size_t(d));
  if (detail::want_node(table)) {
    out.set_requires_grad(true);
    tensor<S> tc = table, oc = out;
    auto idc = std::make_shared<std::vector<int>>(ids);
    record<S>("gather_rows", [tc, oc, idc, d]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      auto& dt = tc.grad();
      for (std::size_t i = 0; i < idc->size(); ++i) {
        S* dst = dt.data() + std::int64_t((*idc)[i]) * d;
        const S* src = g.data() + std::int64_t(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// --------------------------------------------------------------- scatter ---
// Row scatter-add, the assembly dual of gather_rows: each part is [n_i, d]
// and lands on the listed output rows; rows listed twice accumulate, rows
// never listed stay zero. Used to interleave state/action slots in one node.
template <class S>
tensor<S> scatter_rows(const std::vector<tensor<S>>& parts,
                       const std::vector<std::vector<int>>& rows, int total_rows) {
  check(!parts.empty() && parts.size() == rows.size(), "scatter_rows: parts/rows size mismatch");
  const int d = parts[0].dim(parts[0].rank() - 1);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    check(parts[p].rank() == 2 && parts[p].dim(1) == d,
          "scatter_rows: part " + std::to_string(p) + " has shape " + shape_str(parts[p].shape()) +
              ", want [*," + std::to_string(d) + "]");
    check(std::size_t(parts[p].dim(0)) == rows[p].size(),
          "scatter_rows: part " + std::to_string(p) + " row-count mismatch");
    for (int r : rows[p])
      check(r >= 0 && r < total_rows, "scatter_rows: row " + std::to_string(r) + " outside [0," +
                                          std::to_string(total_rows) + ")");
  }
  tensor<S> out = tensor<S>::zeros({total_rows, d});
  for (std::size_t p = 0; p < parts.size(); ++p)
    for (std::size_t i = 0; i < rows[p].size(); ++i) {
      S* dst = out.value().data() + std::int64_t(rows[p][i]) * d;
      const S* src = parts[p].value().data() + std::int64_t(i) * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (recording<S>() && any) {
    out.set_requires_grad(true);
    std::vector<tensor<S>> pc = parts;
    auto rc = std::make_shared<std::vector<std::vector<int>>>(rows);
    tensor<S> oc = out;
    record<S>("scatter_rows", [pc, rc, oc, d]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      for (std::size_t p = 0; p < pc.size(); ++p) {
        if (!pc[p].requires_grad()) continue;
        auto& dp = pc[p].grad();
        const auto& rws = (*rc)[p];
        for (std::size_t i = 0; i < rws.size(); ++i) {
          const S* src = g.data() + std::int64_t(rws[i]) * d;
          S* dst = dp.data() + std::int64_t(i) * d;
          for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------ concat and slice ---
template <class S>
tensor<S> concat(const std::vector<tensor<S>>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  const int r = xs[0].rank();
  check(axis >= 0 && axis < r,
        "concat: axis " + std::to_string(axis) + " out of range for " + shape_str(xs[0].shape()));
  shape_t out_shape = xs[0].shape();
  int total = 0;
  for (const auto& x : xs) {
    check(x.rank() == r, "concat: rank mismatch, " + shape_str(x.shape()) + " vs " +
                             shape_str(xs[0].shape()));
    for (int i = 0; i < r; ++i)
      if (i != axis)
        check(x.dim(i) == xs[0].dim(i), "concat: shapes disagree off-axis, " + shape_str(x.shape()) +
                                            " vs " + shape_str(xs[0].shape()));
    total += x.dim(axis);
  }
  out_shape[std::size_t(axis)] = total;
  tensor<S> out = tensor<S>::zeros(out_shape);
  const std::int64_t outer = detail::outer_of(out_shape, axis);
  const std::int64_t inner = detail::inner_of(out_shape, axis);
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const std::int64_t blk = std::int64_t(x.dim(axis)) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(out.value().data() + (o * total) * inner + off * inner,
                  x.value().data() + o * blk, sizeof(S) * std::size_t(blk));
    off += x.dim(axis);
  }
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (recording<S>() && any) {
    out.set_requires_grad(true);
    std::vector<tensor<S>> xc = xs;
    tensor<S> oc = out;
    record<S>("concat", [xc, oc, axis, outer, inner, total]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      std::int64_t off = 0;
      for (auto& x : xc) {
        const std::int64_t blk = std::int64_t(x.dim(axis)) * inner;
        if (x.requires_grad()) {
          auto& dx = x.grad();
          for (std::int64_t o = 0; o < outer; ++o) {
            const S* src = g.data() + (o * total + off) * inner;
            S* dst = dx.data() + o * blk;
            for (std::int64_t j = 0; j < blk; ++j) dst[j] += src[j];
          }
        }
        off += x.dim(axis);
      }
    });
  }
  return out;
}

template <class S>
tensor<S> slice(const tensor<S>& x, int axis, int start, int len) {
  check(axis >= 0 && axis < x.rank(),
        "slice: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  check(start >= 0 && len >= 1 && start + len <= x.dim(axis),
        "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
            ") outside axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  shape_t out_shape = x.shape();
  out_shape[std::size_t(axis)] = len;
  tensor<S> out = tensor<S>::zeros(out_shape);
  const std::int64_t outer = detail::outer_of(x.shape(), axis);
  const std::int64_t inner = detail::inner_of(x.shape(), axis);
  const int n = x.dim(axis);
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(out.value().data() + o * len * inner,
                x.value().data() + (o * n + start) * inner, sizeof(S) * std::size_t(len * inner));
  if (detail::want_node(x)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, oc = out;
    record<S>("slice", [xc, oc, outer, inner, n, start, len]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      auto& dx = xc.grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        const S* src = g.data() + o * len * inner;
        S* dst = dx.data() + (o * n + start) * inner;
        for (std::int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// --------------------------------------------------------------- reshape ---
template <class S>
tensor<S> reshape(const tensor<S>& x, shape_t new_shape) {
  check(shape_numel(new_shape) == x.numel(), "reshape: cannot view " + shape_str(x.shape()) +
                                                 " as " + shape_str(new_shape));
  tensor<S> out = tensor<S>::from(std::move(new_shape), x.value());
  if (detail::want_node(x)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, oc = out;
    record<S>("reshape", [xc, oc]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      auto& dx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }
  return out;
}

// ------------------------------------------------------------ reductions ---
template <class S>
tensor<S> sum_all(const tensor<S>& x) {
  S acc = S(0);
  for (S v : x.value()) acc += v;
  tensor<S> out = tensor<S>::scalar(acc);
  if (detail::want_node(x)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, oc = out;
    record<S>("sum_all", [xc, oc]() mutable {
      if (!oc.has_grad()) return;
      const S g = oc.grad_view()[0];
      auto& dx = xc.grad();
      for (auto& v : dx) v += g;
    });
  }
  return out;
}

template <class S>
tensor<S> mean_all(const tensor<S>& x) {
  check(x.numel() > 0, "mean_all: empty tensor");
  S acc = S(0);
  for (S v : x.value()) acc += v;
  const S inv = S(1) / S(double(x.numel()));
  tensor<S> out = tensor<S>::scalar(acc * inv);
  if (detail::want_node(x)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, oc = out;
    record<S>("mean_all", [xc, oc, inv]() mutable {
      if (!oc.has_grad()) return;
      const S g = oc.grad_view()[0] * inv;
      auto& dx = xc.grad();
      for (auto& v : dx) v += g;
    });
  }
  return out;
}

template <class S>
tensor<S> mean_axis(const tensor<S>& x, int axis) {
  check(axis >= 0 && axis < x.rank(),
        "mean_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const std::int64_t outer = detail::outer_of(x.shape(), axis);
  const std::int64_t inner = detail::inner_of(x.shape(), axis);
  const int n = x.dim(axis);
  shape_t out_shape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  tensor<S> out = tensor<S>::zeros(out_shape);
  const S inv = S(1) / S(n);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      S acc = S(0);
      for (int j = 0; j < n; ++j) acc += x.value()[(o * n + j) * inner + in];
      out.value()[o * inner + in] = acc * inv;
    }
  if (detail::want_node(x)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, oc = out;
    record<S>("mean_axis", [xc, oc, outer, inner, n, inv]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      auto& dx = xc.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
          const S gv = g[o * inner + in] * inv;
          for (int j = 0; j < n; ++j) dx[(o * n + j) * inner + in] += gv;
        }
    });
  }
  return out;
}

// ----------------------------------------------------------- masked fill ---
// Where mask is nonzero the output takes `value` and blocks the gradient;
// elsewhere it passes x through. mask length must equal numel(x).
template <class S>
tensor<S> masked_fill(const tensor<S>& x, std::shared_ptr<const std::vector<std::uint8_t>> mask,
                      S value) {
  check(mask && std::int64_t(mask->size()) == x.numel(),
        "masked_fill: mask length " + std::to_string(mask ? mask->size() : 0) +
            " must equal numel of " + shape_str(x.shape()));
  tensor<S> out = tensor<S>::zeros(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.value()[i] = (*mask)[i] ? value : x.value()[i];
  if (detail::want_node(x)) {
    out.set_requires_grad(true);
    tensor<S> xc = x, oc = out;
    record<S>("masked_fill", [xc, oc, mask, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      auto& dx = xc.grad();
      for (std::int64_t i = 0; i < n; ++i)
        if (!(*mask)[i]) dx[i] += g[i];
    });
  }
  return out;
}

template <class S>
tensor<S> masked_fill(const tensor<S>& x, const std::vector<std::uint8_t>& mask, S value) {
  return masked_fill(x, std::make_shared<const std::vector<std::uint8_t>>(mask), value);
}

// ----------------------------------------------------------- cross entropy ---
// Per-row softmax cross-entropy with integer targets: out[i] =
// logsumexp(logits[i,:]) - logits[i, ids[i]]. Gradient is p - onehot, scaled
// by the incoming row gradient.
template <class S>
tensor<S> cross_entropy_logits(const tensor<S>& logits, const std::vector<int>& ids) {
  check(logits.rank() == 2, "cross_entropy_logits: logits must be rank 2, got " +
                                shape_str(logits.shape()));
  const int n = logits.dim(0), c = logits.dim(1);
  check(int(ids.size()) == n, "cross_entropy_logits: " + std::to_string(ids.size()) +
                                  " targets for " + std::to_string(n) + " rows");
  for (int id : ids)
    check(id >= 0 && id < c, "cross_entropy_logits: target " + std::to_string(id) +
                                 " outside [0," + std::to_string(c) + ")");
  tensor<S> out = tensor<S>::zeros({n});
  std::vector<S> probs(std::size_t(n) * c);
  for (int i = 0; i < n; ++i) {
    const S* row = logits.value().data() + std::int64_t(i) * c;
    S mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    S z = S(0);
    for (int j = 0; j < c; ++j) {
      const S e = std::exp(row[j] - mx);
      probs[std::size_t(i) * c + j] = e;
      z += e;
    }
    const S iz = S(1) / z;
    for (int j = 0; j < c; ++j) probs[std::size_t(i) * c + j] *= iz;
    out.value()[i] = std::log(z) + mx - row[ids[std::size_t(i)]];
  }
  if (detail::want_node(logits)) {
    out.set_requires_grad(true);
    tensor<S> lc = logits, oc = out;
    auto pr = std::make_shared<std::vector<S>>(std::move(probs));
    auto idc = std::make_shared<std::vector<int>>(ids);
    record<S>("cross_entropy_logits", [lc, oc, pr, idc, n, c]() mutable {
      if (!oc.has_grad()) return;
      const auto& g = oc.grad_view();
      auto& dl = lc.grad();
      for (int i = 0; i < n; ++i) {
        const S gi = g[i];
        const S* p = pr->data() + std::int64_t(i) * c;
        S* d = dl.data() + std::int64_t(i) * c;
        for (int j = 0; j < c; ++j) d[j] += gi * p[j];
        d[(*idc)[std::size_t(i)]] -= gi;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------- conveniences ---
template <class S>
tensor<S> square(const tensor<S>& x) {
  return mul(x, x);
}

template <class S>
tensor<S> mse(const tensor<S>& pred, const tensor<S>& target) {
  return mean_all(square(sub(pred, target)));
}

// Inverted-scale dropout built from the fixed op set: the Bernoulli keep-mask
// is a constant tensor, so this introduces no new differentiable primitive.
template <class S>
tensor<S> dropout(const tensor<S>& x, double rate, rng& r) {
  if (rate <= 0.0) return x;
  check(rate < 1.0, "dropout: rate must be < 1");
  std::vector<S> m(std::size_t(x.numel()));
  const S keep = S(1.0 / (1.0 - rate));
  for (auto& v : m) v = r.uniform() < rate ? S(0) : keep;
  return mul(x, tensor<S>::from(x.shape(), std::move(m)));
}

}  // namespace dm
