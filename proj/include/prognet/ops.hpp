#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <span>
#include <vector>

#include "prognet/rng.hpp"
#include "prognet/tensor.hpp"

namespace prognet {

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<EMat<S>>;
template <typename S>
using CMapM = Eigen::Map<const EMat<S>>;

template <typename S>
inline bool tracked(const TapeT<S>* tape, const TensorT<S>& t) {
  return tape != nullptr && (t.requires_grad() || t.storage()->node_on(tape) >= 0);
}

// Node id of `t` on `tape`, registering it as a leaf when it wants gradients
// but has not been seen by this tape yet. Returns -1 for plain constants.
template <typename S>
inline int attach(TapeT<S>* tape, const TensorT<S>& t) {
  if (!tape) return -1;
  const int id = t.storage()->node_on(tape);
  if (id >= 0) return id;
  if (t.requires_grad()) return tape->add_leaf(t.storage());
  return -1;
}

template <typename S>
inline void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

template <typename S>
inline void check_finite(const char* op, const TensorT<S>& t) {
  if (!t.all_finite()) throw std::runtime_error(std::string(op) + ": non-finite input");
}

inline int normalize_axis(const char* op, int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for " + std::to_string(ndim) + "-d tensor");
  return axis;
}

struct AxisDecomp {
  int64_t outer, n, inner;
};

inline AxisDecomp decompose(const Shape& s, int axis) {
  AxisDecomp d{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) d.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) d.inner *= s[i];
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("add", a, b);
  TensorT<S> out(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  auto* tape = TapeT<S>::current();
  const bool ta = detail::tracked(tape, a), tb = detail::tracked(tape, b);
  if (ta || tb) {
    out.set_requires_grad(true);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a), detail::attach(tape, b)}, [=] {
      const auto& g = so->grad;
      if (ta) {
        sa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sa->grad[i] += g[i];
      }
      if (tb) {
        sb->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sb->grad[i] += g[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("sub", a, b);
  TensorT<S> out(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  auto* tape = TapeT<S>::current();
  const bool ta = detail::tracked(tape, a), tb = detail::tracked(tape, b);
  if (ta || tb) {
    out.set_requires_grad(true);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a), detail::attach(tape, b)}, [=] {
      const auto& g = so->grad;
      if (ta) {
        sa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sa->grad[i] += g[i];
      }
      if (tb) {
        sb->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sb->grad[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("mul", a, b);
  TensorT<S> out(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  auto* tape = TapeT<S>::current();
  const bool ta = detail::tracked(tape, a), tb = detail::tracked(tape, b);
  if (ta || tb) {
    out.set_requires_grad(true);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a), detail::attach(tape, b)}, [=] {
      const auto& g = so->grad;
      if (ta) {
        sa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sa->grad[i] += g[i] * sb->data[i];
      }
      if (tb) {
        sb->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sb->grad[i] += g[i] * sa->data[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = c * a.at(i);
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, a)) {
    out.set_requires_grad(true);
    auto sa = a.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a)}, [=] {
      sa->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += c * so->grad[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
  TensorT<S> out(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) > S(0) ? a.at(i) : S(0);
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, a)) {
    out.set_requires_grad(true);
    auto sa = a.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a)}, [=] {
      sa->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i)
        if (sa->data[i] > S(0)) sa->grad[i] += so->grad[i];
    });
  }
  return out;
}

// x * Phi(x) with the exact normal CDF (erf form, no tanh approximation).
template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  detail::check_finite("gelu", a);
  TensorT<S> out(a.shape());
  const int64_t n = out.numel();
  auto cdf = std::make_shared<std::vector<S>>(static_cast<size_t>(n));
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(a.at(i));
    const double phi = 0.5 * std::erfc(-x * inv_sqrt2);
    (*cdf)[static_cast<size_t>(i)] = static_cast<S>(phi);
    out.at(i) = static_cast<S>(x * phi);
  }
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, a)) {
    out.set_requires_grad(true);
    auto sa = a.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a)}, [=] {
      sa->ensure_grad();
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (size_t i = 0; i < so->grad.size(); ++i) {
        const double x = static_cast<double>(sa->data[i]);
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        sa->grad[i] += so->grad[i] * static_cast<S>(static_cast<double>((*cdf)[i]) + x * pdf);
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> exp_(const TensorT<S>& a) {
  TensorT<S> out(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = std::exp(a.at(i));
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, a)) {
    out.set_requires_grad(true);
    auto sa = a.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a)}, [=] {
      sa->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i] * so->data[i];
    });
  }
  return out;
}

// Inverted dropout: train mode zeroes elements with probability `rate` and
// rescales survivors by 1/(1-rate); eval mode is the identity (same tensor).
template <typename S>
TensorT<S> dropout(const TensorT<S>& a, double rate, bool train, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!train || rate == 0.0) return a;
  if (!rng) throw std::invalid_argument("dropout: train mode needs an rng");
  const S keep_inv = static_cast<S>(1.0 / (1.0 - rate));
  TensorT<S> out(a.shape());
  const int64_t n = out.numel();
  auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const bool keep = !rng->bernoulli(rate);
    (*mask)[static_cast<size_t>(i)] = keep;
    out.at(i) = keep ? a.at(i) * keep_inv : S(0);
  }
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, a)) {
    out.set_requires_grad(true);
    auto sa = a.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a)}, [=] {
      sa->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i)
        if ((*mask)[i]) sa->grad[i] += so->grad[i] * keep_inv;
    });
  }
  return out;
}

// Value copy with no tape attachment; gradients do not flow past it.
template <typename S>
TensorT<S> detach(const TensorT<S>& a) {
  return TensorT<S>::from_data(a.shape(), a.data());
}

// ---------------------------------------------------------------------------
// Broadcasts
// ---------------------------------------------------------------------------

// x[..., C] + v[C], broadcasting v over all leading dims.
template <typename S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& v) {
  const int64_t c = x.dim(x.ndim() - 1);
  if (v.ndim() != 1 || v.dim(0) != c)
    throw std::invalid_argument("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  TensorT<S> out(x.shape());
  const int64_t rows = x.numel() / c;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) out.at(r * c + j) = x.at(r * c + j) + v.at(j);
  auto* tape = TapeT<S>::current();
  const bool tx = detail::tracked(tape, x), tv = detail::tracked(tape, v);
  if (tx || tv) {
    out.set_requires_grad(true);
    auto sx = x.storage(), sv = v.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x), detail::attach(tape, v)}, [=] {
      const auto& g = so->grad;
      if (tx) {
        sx->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sx->grad[i] += g[i];
      }
      if (tv) {
        sv->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) sv->grad[static_cast<size_t>(j)] += g[static_cast<size_t>(r * c + j)];
      }
    });
  }
  return out;
}

// x[B,C,H,W] + v[C] broadcast over batch and spatial dims.
template <typename S>
TensorT<S> add_chanvec(const TensorT<S>& x, const TensorT<S>& v) {
  if (x.ndim() != 4 || v.ndim() != 1 || v.dim(0) != x.dim(1))
    throw std::invalid_argument("add_chanvec: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  TensorT<S> out(x.shape());
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const int64_t base = (bi * c + ci) * hw;
      const S bias = v.at(ci);
      for (int64_t p = 0; p < hw; ++p) out.at(base + p) = x.at(base + p) + bias;
    }
  auto* tape = TapeT<S>::current();
  const bool tx = detail::tracked(tape, x), tv = detail::tracked(tape, v);
  if (tx || tv) {
    out.set_requires_grad(true);
    auto sx = x.storage(), sv = v.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x), detail::attach(tape, v)}, [=] {
      const auto& g = so->grad;
      if (tx) {
        sx->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) sx->grad[i] += g[i];
      }
      if (tv) {
        sv->ensure_grad();
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t ci = 0; ci < c; ++ci) {
            const int64_t base = (bi * c + ci) * hw;
            S acc = S(0);
            for (int64_t p = 0; p < hw; ++p) acc += g[static_cast<size_t>(base + p)];
            sv->grad[static_cast<size_t>(ci)] += acc;
          }
      }
    });
  }
  return out;
}

// Tiles x to [batch, ...x.shape]; backward sums over the new axis.
template <typename S>
TensorT<S> broadcast_to_batch(const TensorT<S>& x, int64_t batch) {
  Shape out_shape{batch};
  for (int64_t d : x.shape()) out_shape.push_back(d);
  TensorT<S> out(out_shape);
  const int64_t n = x.numel();
  for (int64_t b = 0; b < batch; ++b)
    std::memcpy(out.data().data() + b * n, x.data().data(), sizeof(S) * static_cast<size_t>(n));
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < n; ++i)
          sx->grad[static_cast<size_t>(i)] += so->grad[static_cast<size_t>(b * n + i)];
    });
  }
  return out;
}

// x[B,C] replicated n times along a new middle axis -> [B,n,C].
template <typename S>
TensorT<S> repeat_token(const TensorT<S>& x, int64_t n) {
  if (x.ndim() != 2) throw std::invalid_argument("repeat_token: want [B,C], got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), c = x.dim(1);
  TensorT<S> out(Shape{b, n, c});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t k = 0; k < n; ++k)
      std::memcpy(out.data().data() + (bi * n + k) * c, x.data().data() + bi * c,
                  sizeof(S) * static_cast<size_t>(c));
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t k = 0; k < n; ++k)
          for (int64_t j = 0; j < c; ++j)
            sx->grad[static_cast<size_t>(bi * c + j)] += so->grad[static_cast<size_t>((bi * n + k) * c + j)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw std::invalid_argument("reshape: cannot reshape " + shape_str(x.shape()) + " to " +
                                shape_str(shape));
  TensorT<S> out = TensorT<S>::from_data(std::move(shape), x.data());
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) sx->grad[i] += so->grad[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> concat(const TensorT<S>& a, const TensorT<S>& b, int axis) {
  if (a.ndim() != b.ndim())
    throw std::invalid_argument("concat: rank mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  axis = detail::normalize_axis("concat", axis, a.ndim());
  for (int i = 0; i < a.ndim(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw std::invalid_argument("concat: shape mismatch " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()) + " on axis " + std::to_string(i));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] += b.dim(axis);
  TensorT<S> out(out_shape);
  const auto da = detail::decompose(a.shape(), axis);
  const int64_t na = da.n, nb = b.dim(axis), inner = da.inner;
  for (int64_t o = 0; o < da.outer; ++o) {
    std::memcpy(out.data().data() + o * (na + nb) * inner, a.data().data() + o * na * inner,
                sizeof(S) * static_cast<size_t>(na * inner));
    std::memcpy(out.data().data() + (o * (na + nb) + na) * inner, b.data().data() + o * nb * inner,
                sizeof(S) * static_cast<size_t>(nb * inner));
  }
  auto* tape = TapeT<S>::current();
  const bool ta = detail::tracked(tape, a), tb = detail::tracked(tape, b);
  if (ta || tb) {
    out.set_requires_grad(true);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    const int64_t outer = da.outer;
    tape->add_node(so, {detail::attach(tape, a), detail::attach(tape, b)}, [=] {
      const auto& g = so->grad;
      if (ta) {
        sa->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < na * inner; ++i)
            sa->grad[static_cast<size_t>(o * na * inner + i)] +=
                g[static_cast<size_t>(o * (na + nb) * inner + i)];
      }
      if (tb) {
        sb->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < nb * inner; ++i)
            sb->grad[static_cast<size_t>(o * nb * inner + i)] +=
                g[static_cast<size_t>((o * (na + nb) + na) * inner + i)];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> slice(const TensorT<S>& x, int axis, int64_t start, int64_t len) {
  axis = detail::normalize_axis("slice", axis, x.ndim());
  const int64_t n = x.dim(axis);
  if (start < 0 || len <= 0 || start + len > n)
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") invalid for axis of size " +
                                std::to_string(n));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  TensorT<S> out(out_shape);
  const auto d = detail::decompose(x.shape(), axis);
  for (int64_t o = 0; o < d.outer; ++o)
    std::memcpy(out.data().data() + o * len * d.inner,
                x.data().data() + (o * n + start) * d.inner,
                sizeof(S) * static_cast<size_t>(len * d.inner));
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    const int64_t outer = d.outer, inner = d.inner;
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < len * inner; ++i)
          sx->grad[static_cast<size_t>((o * n + start) * inner + i)] +=
              so->grad[static_cast<size_t>(o * len * inner + i)];
    });
  }
  return out;
}

// [B,N,C] -> [B*heads, N, C/heads], one group per (batch, head).
template <typename S>
TensorT<S> split_heads(const TensorT<S>& x, int heads) {
  if (x.ndim() != 3) throw std::invalid_argument("split_heads: want [B,N,C], got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), n = x.dim(1), c = x.dim(2);
  if (c % heads != 0)
    throw std::invalid_argument("split_heads: width " + std::to_string(c) + " not divisible by " +
                                std::to_string(heads) + " heads");
  const int64_t dh = c / heads;
  TensorT<S> out(Shape{b * heads, n, dh});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t ni = 0; ni < n; ++ni)
        std::memcpy(out.data().data() + (((bi * heads + h) * n) + ni) * dh,
                    x.data().data() + (bi * n + ni) * c + h * dh, sizeof(S) * static_cast<size_t>(dh));
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t j = 0; j < dh; ++j)
              sx->grad[static_cast<size_t>((bi * n + ni) * c + h * dh + j)] +=
                  so->grad[static_cast<size_t>((((bi * heads + h) * n) + ni) * dh + j)];
    });
  }
  return out;
}

// Inverse of split_heads: [B*heads, N, dh] -> [B, N, heads*dh].
template <typename S>
TensorT<S> merge_heads(const TensorT<S>& x, int heads) {
  if (x.ndim() != 3 || x.dim(0) % heads != 0)
    throw std::invalid_argument("merge_heads: bad input " + shape_str(x.shape()) + " for " +
                                std::to_string(heads) + " heads");
  const int64_t b = x.dim(0) / heads, n = x.dim(1), dh = x.dim(2), c = heads * dh;
  TensorT<S> out(Shape{b, n, c});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t ni = 0; ni < n; ++ni)
        std::memcpy(out.data().data() + (bi * n + ni) * c + h * dh,
                    x.data().data() + (((bi * heads + h) * n) + ni) * dh,
                    sizeof(S) * static_cast<size_t>(dh));
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t j = 0; j < dh; ++j)
              sx->grad[static_cast<size_t>((((bi * heads + h) * n) + ni) * dh + j)] +=
                  so->grad[static_cast<size_t>((bi * n + ni) * c + h * dh + j)];
    });
  }
  return out;
}

// Feature map to token sequence: [B,C,H,W] -> [B,H*W,C], tokens row-major
// over the spatial grid.
template <typename S>
TensorT<S> nchw_to_tokens(const TensorT<S>& x) {
  if (x.ndim() != 4) throw std::invalid_argument("nchw_to_tokens: want [B,C,H,W], got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  TensorT<S> out(Shape{b, hw, c});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t p = 0; p < hw; ++p)
        out.at((bi * hw + p) * c + ci) = x.at((bi * c + ci) * hw + p);
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci)
          for (int64_t p = 0; p < hw; ++p)
            sx->grad[static_cast<size_t>((bi * c + ci) * hw + p)] +=
                so->grad[static_cast<size_t>((bi * hw + p) * c + ci)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  S acc = S(0);
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.at(i);
  TensorT<S> out = TensorT<S>::scalar(acc);
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      const S g = so->grad[0];
      for (size_t i = 0; i < sx->grad.size(); ++i) sx->grad[i] += g;
    });
  }
  return out;
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x) {
  const S inv = static_cast<S>(1.0 / static_cast<double>(x.numel()));
  return scale(sum(x), inv);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Max-subtracted softmax along `axis`; lines sum to one.
template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis = -1) {
  detail::check_finite("softmax", x);
  axis = detail::normalize_axis("softmax", axis, x.ndim());
  const auto d = detail::decompose(x.shape(), axis);
  TensorT<S> out(x.shape());
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t in = 0; in < d.inner; ++in) {
      const int64_t base = o * d.n * d.inner + in;
      S m = x.at(base);
      for (int64_t j = 1; j < d.n; ++j) m = std::max(m, x.at(base + j * d.inner));
      S z = S(0);
      for (int64_t j = 0; j < d.n; ++j) {
        const S e = std::exp(x.at(base + j * d.inner) - m);
        out.at(base + j * d.inner) = e;
        z += e;
      }
      const S inv = S(1) / z;
      for (int64_t j = 0; j < d.n; ++j) out.at(base + j * d.inner) *= inv;
    }
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    auto sx = x.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x)}, [=] {
      sx->ensure_grad();
      for (int64_t o = 0; o < d.outer; ++o)
        for (int64_t in = 0; in < d.inner; ++in) {
          const int64_t base = o * d.n * d.inner + in;
          S dot = S(0);
          for (int64_t j = 0; j < d.n; ++j) {
            const size_t idx = static_cast<size_t>(base + j * d.inner);
            dot += so->grad[idx] * so->data[idx];
          }
          for (int64_t j = 0; j < d.n; ++j) {
            const size_t idx = static_cast<size_t>(base + j * d.inner);
            sx->grad[idx] += so->data[idx] * (so->grad[idx] - dot);
          }
        }
    });
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes the last axis to zero mean / unit variance (epsilon 1e-5), then
// applies the learnable affine map.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias) {
  const int64_t c = x.dim(x.ndim() - 1);
  if (c == 0) throw std::invalid_argument("layer_norm: normalized axis has size 0");
  if (gain.ndim() != 1 || gain.dim(0) != c || bias.ndim() != 1 || bias.dim(0) != c)
    throw std::invalid_argument("layer_norm: affine params " + shape_str(gain.shape()) + "/" +
                                shape_str(bias.shape()) + " do not match last axis of " +
                                shape_str(x.shape()));
  const int64_t rows = x.numel() / c;
  TensorT<S> out(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t base = r * c;
    S mu = S(0);
    for (int64_t j = 0; j < c; ++j) mu += x.at(base + j);
    mu /= static_cast<S>(c);
    S var = S(0);
    for (int64_t j = 0; j < c; ++j) {
      const S dxj = x.at(base + j) - mu;
      var += dxj * dxj;
    }
    var /= static_cast<S>(c);
    const S inv = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    (*inv_std)[static_cast<size_t>(r)] = inv;
    for (int64_t j = 0; j < c; ++j) {
      const S xh = (x.at(base + j) - mu) * inv;
      (*xhat)[static_cast<size_t>(base + j)] = xh;
      out.at(base + j) = xh * gain.at(j) + bias.at(j);
    }
  }
  auto* tape = TapeT<S>::current();
  const bool tx = detail::tracked(tape, x), tg = detail::tracked(tape, gain),
             tb = detail::tracked(tape, bias);
  if (tx || tg || tb) {
    out.set_requires_grad(true);
    auto sx = x.storage(), sg = gain.storage(), sb = bias.storage(), so = out.storage();
    tape->add_node(so,
                   {detail::attach(tape, x), detail::attach(tape, gain), detail::attach(tape, bias)},
                   [=] {
                     const auto& g = so->grad;
                     if (tg) sg->ensure_grad();
                     if (tb) sb->ensure_grad();
                     if (tx) sx->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r) {
                       const int64_t base = r * c;
                       if (tg || tb)
                         for (int64_t j = 0; j < c; ++j) {
                           const size_t idx = static_cast<size_t>(base + j);
                           if (tg) sg->grad[static_cast<size_t>(j)] += g[idx] * (*xhat)[idx];
                           if (tb) sb->grad[static_cast<size_t>(j)] += g[idx];
                         }
                       if (tx) {
                         S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
                         for (int64_t j = 0; j < c; ++j) {
                           const size_t idx = static_cast<size_t>(base + j);
                           const S dxh = g[idx] * sg->data[static_cast<size_t>(j)];
                           mean_dxhat += dxh;
                           mean_dxhat_xhat += dxh * (*xhat)[idx];
                         }
                         mean_dxhat /= static_cast<S>(c);
                         mean_dxhat_xhat /= static_cast<S>(c);
                         const S inv = (*inv_std)[static_cast<size_t>(r)];
                         for (int64_t j = 0; j < c; ++j) {
                           const size_t idx = static_cast<size_t>(base + j);
                           const S dxh = g[idx] * sg->data[static_cast<size_t>(j)];
                           sx->grad[idx] += inv * (dxh - mean_dxhat - (*xhat)[idx] * mean_dxhat_xhat);
                         }
                       }
                     }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// x[..., K] . w[K, N] -> [..., N]; leading dims are treated as rows.
template <typename S>
TensorT<S> matmul(const TensorT<S>& x, const TensorT<S>& w) {
  if (w.ndim() != 2 || x.ndim() < 1 || x.dim(x.ndim() - 1) != w.dim(0))
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
  const int64_t k = w.dim(0), n = w.dim(1), rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  TensorT<S> out(out_shape);
  {
    detail::CMapM<S> xm(x.data().data(), rows, k);
    detail::CMapM<S> wm(w.data().data(), k, n);
    detail::MapM<S> ym(out.data().data(), rows, n);
    ym.noalias() = xm * wm;
  }
  auto* tape = TapeT<S>::current();
  const bool tx = detail::tracked(tape, x), tw = detail::tracked(tape, w);
  if (tx || tw) {
    out.set_requires_grad(true);
    auto sx = x.storage(), sw = w.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x), detail::attach(tape, w)}, [=] {
      detail::CMapM<S> gm(so->grad.data(), rows, n);
      if (tx) {
        sx->ensure_grad();
        detail::CMapM<S> wm(sw->data.data(), k, n);
        detail::MapM<S> gx(sx->grad.data(), rows, k);
        gx.noalias() += gm * wm.transpose();
      }
      if (tw) {
        sw->ensure_grad();
        detail::CMapM<S> xm(sx->data.data(), rows, k);
        detail::MapM<S> gw(sw->grad.data(), k, n);
        gw.noalias() += xm.transpose() * gm;
      }
    });
  }
  return out;
}

// Batched product over matched leading groups: a[G,M,K] . b[G,K,N] -> [G,M,N].
// With transpose_b, b is [G,N,K] and a . b^T is computed per group.
template <typename S>
TensorT<S> matmul_batched(const TensorT<S>& a, const TensorT<S>& b, bool transpose_b = false) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("matmul_batched: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int64_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int64_t n = transpose_b ? b.dim(1) : b.dim(2);
  const int64_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (bk != k)
    throw std::invalid_argument("matmul_batched: inner dims of " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) + " do not match");
  TensorT<S> out(Shape{groups, m, n});
  for (int64_t g = 0; g < groups; ++g) {
    detail::CMapM<S> am(a.data().data() + g * m * k, m, k);
    detail::MapM<S> ym(out.data().data() + g * m * n, m, n);
    if (transpose_b) {
      detail::CMapM<S> bm(b.data().data() + g * n * k, n, k);
      ym.noalias() = am * bm.transpose();
    } else {
      detail::CMapM<S> bm(b.data().data() + g * k * n, k, n);
      ym.noalias() = am * bm;
    }
  }
  auto* tape = TapeT<S>::current();
  const bool ta = detail::tracked(tape, a), tb = detail::tracked(tape, b);
  if (ta || tb) {
    out.set_requires_grad(true);
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, a), detail::attach(tape, b)}, [=] {
      if (ta) sa->ensure_grad();
      if (tb) sb->ensure_grad();
      for (int64_t g = 0; g < groups; ++g) {
        detail::CMapM<S> gm(so->grad.data() + g * m * n, m, n);
        if (transpose_b) {
          detail::CMapM<S> bm(sb->data.data() + g * n * k, n, k);
          detail::CMapM<S> am(sa->data.data() + g * m * k, m, k);
          if (ta) {
            detail::MapM<S> ga(sa->grad.data() + g * m * k, m, k);
            ga.noalias() += gm * bm;
          }
          if (tb) {
            detail::MapM<S> gb(sb->grad.data() + g * n * k, n, k);
            gb.noalias() += gm.transpose() * am;
          }
        } else {
          detail::CMapM<S> bm(sb->data.data() + g * k * n, k, n);
          detail::CMapM<S> am(sa->data.data() + g * m * k, m, k);
          if (ta) {
            detail::MapM<S> ga(sa->grad.data() + g * m * k, m, k);
            ga.noalias() += gm * bm.transpose();
          }
          if (tb) {
            detail::MapM<S> gb(sb->grad.data() + g * k * n, k, n);
            gb.noalias() += am.transpose() * gm;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void im2col(const std::vector<S>& x, int64_t b, int64_t cin, int64_t h, int64_t w, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo, std::vector<S>& cols) {
  const int64_t patch = cin * kh * kw;
  cols.assign(static_cast<size_t>(b * ho * wo * patch), S(0));
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox) {
        S* dst = cols.data() + ((bi * ho + oy) * wo + ox) * patch;
        for (int64_t ci = 0; ci < cin; ++ci) {
          const S* src = x.data() + (bi * cin + ci) * h * w;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * stride - pad + ky;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * stride - pad + kx;
              if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                dst[(ci * kh + ky) * kw + kx] = src[iy * w + ix];
            }
          }
        }
      }
}

template <typename S>
void col2im_accumulate(const std::vector<S>& cols, int64_t b, int64_t cin, int64_t h, int64_t w,
                       int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
                       std::vector<S>& dx) {
  const int64_t patch = cin * kh * kw;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox) {
        const S* src = cols.data() + ((bi * ho + oy) * wo + ox) * patch;
        for (int64_t ci = 0; ci < cin; ++ci) {
          S* dst = dx.data() + (bi * cin + ci) * h * w;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * stride - pad + ky;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * stride - pad + kx;
              if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                dst[iy * w + ix] += src[(ci * kh + ky) * kw + kx];
            }
          }
        }
      }
}

}  // namespace detail

// x[B,Cin,H,W] * kernel[Cout,Cin,kh,kw], zero padding, floor output dims.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& kernel, int64_t stride = 1,
                  int64_t padding = 0) {
  if (x.ndim() != 4 || kernel.ndim() != 4 || x.dim(1) != kernel.dim(1))
    throw std::invalid_argument("conv2d: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(kernel.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: negative padding");
  const int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw std::invalid_argument("conv2d: kernel " + shape_str(kernel.shape()) +
                                " larger than padded input " + shape_str(x.shape()));
  const int64_t ho = (h + 2 * padding - kh) / stride + 1;
  const int64_t wo = (w + 2 * padding - kw) / stride + 1;
  const int64_t patch = cin * kh * kw, rows = b * ho * wo;

  auto cols = std::make_shared<std::vector<S>>();
  detail::im2col(x.data(), b, cin, h, w, kh, kw, stride, padding, ho, wo, *cols);

  std::vector<S> yrows(static_cast<size_t>(rows * cout));
  {
    detail::CMapM<S> cm(cols->data(), rows, patch);
    detail::CMapM<S> km(kernel.data().data(), cout, patch);
    detail::MapM<S> ym(yrows.data(), rows, cout);
    ym.noalias() = cm * km.transpose();
  }
  TensorT<S> out(Shape{b, cout, ho, wo});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t p = 0; p < ho * wo; ++p)
      for (int64_t co = 0; co < cout; ++co)
        out.at((bi * cout + co) * ho * wo + p) = yrows[static_cast<size_t>((bi * ho * wo + p) * cout + co)];

  auto* tape = TapeT<S>::current();
  const bool tx = detail::tracked(tape, x), tk = detail::tracked(tape, kernel);
  if (tx || tk) {
    out.set_requires_grad(true);
    auto sx = x.storage(), sk = kernel.storage(), so = out.storage();
    tape->add_node(so, {detail::attach(tape, x), detail::attach(tape, kernel)}, [=] {
      std::vector<S> grows(static_cast<size_t>(rows * cout));
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t p = 0; p < ho * wo; ++p)
          for (int64_t co = 0; co < cout; ++co)
            grows[static_cast<size_t>((bi * ho * wo + p) * cout + co)] =
                so->grad[static_cast<size_t>((bi * cout + co) * ho * wo + p)];
      detail::CMapM<S> gm(grows.data(), rows, cout);
      if (tk) {
        sk->ensure_grad();
        detail::CMapM<S> cm(cols->data(), rows, patch);
        detail::MapM<S> gk(sk->grad.data(), cout, patch);
        gk.noalias() += gm.transpose() * cm;
      }
      if (tx) {
        sx->ensure_grad();
        std::vector<S> dcols(static_cast<size_t>(rows * patch));
        detail::CMapM<S> km(sk->data.data(), cout, patch);
        detail::MapM<S> dcm(dcols.data(), rows, patch);
        dcm.noalias() = gm * km;
        detail::col2im_accumulate(dcols, b, cin, h, w, kh, kw, stride, padding, ho, wo, sx->grad);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

// Per-row -log softmax(logits)[target] via log-sum-exp. logits[..., C] with
// one target per row; target -1 marks a row to ignore (contributes exact 0).
template <typename S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, const std::vector<int>& targets) {
  detail::check_finite("cross_entropy", logits);
  const int64_t c = logits.dim(logits.ndim() - 1);
  const int64_t rows = logits.numel() / c;
  if (static_cast<int64_t>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(rows) + " rows");
  for (int t : targets)
    if (t < -1 || t >= c)
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                  " out of range for " + std::to_string(c) + " classes");
  Shape out_shape(logits.shape().begin(), logits.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  TensorT<S> out(out_shape);
  auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(logits.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t base = r * c;
    S m = logits.at(base);
    for (int64_t j = 1; j < c; ++j) m = std::max(m, logits.at(base + j));
    S z = S(0);
    for (int64_t j = 0; j < c; ++j) {
      const S e = std::exp(logits.at(base + j) - m);
      (*probs)[static_cast<size_t>(base + j)] = e;
      z += e;
    }
    const S inv = S(1) / z;
    for (int64_t j = 0; j < c; ++j) (*probs)[static_cast<size_t>(base + j)] *= inv;
    const int t = targets[static_cast<size_t>(r)];
    out.at(r) = t < 0 ? S(0) : (std::log(z) + m - logits.at(base + t));
  }
  auto* tape = TapeT<S>::current();
  if (detail::tracked(tape, logits)) {
    out.set_requires_grad(true);
    auto sl = logits.storage(), so = out.storage();
    auto tg = std::make_shared<std::vector<int>>(targets);
    tape->add_node(so, {detail::attach(tape, logits)}, [=] {
      sl->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const int t = (*tg)[static_cast<size_t>(r)];
        if (t < 0) continue;
        const S g = so->grad[static_cast<size_t>(r)];
        const int64_t base = r * c;
        for (int64_t j = 0; j < c; ++j)
          sl->grad[static_cast<size_t>(base + j)] += g * (*probs)[static_cast<size_t>(base + j)];
        sl->grad[static_cast<size_t>(base + t)] -= g;
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> cross_entropy_from_logits(const TensorT<S>& logits, int target) {
  if (logits.ndim() != 1)
    throw std::invalid_argument("cross_entropy_from_logits: want 1-d logits, got " +
                                shape_str(logits.shape()));
  if (target < 0 || target >= logits.dim(0))
    throw std::invalid_argument("cross_entropy_from_logits: target " + std::to_string(target) +
                                " out of range for " + std::to_string(logits.dim(0)) + " classes");
  return cross_entropy_rows(reshape(logits, Shape{1, logits.dim(0)}), {target});
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

// Argmax along the last axis, ties broken toward the lowest index.
template <typename S>
std::vector<int> argmax_last(const TensorT<S>& x) {
  const int64_t c = x.dim(x.ndim() - 1);
  const int64_t rows = x.numel() / c;
  std::vector<int> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    int best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (x.at(r * c + j) > x.at(r * c + best)) best = static_cast<int>(j);
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

template <typename S>
void backward(const TensorT<S>& loss, std::span<const TensorT<S>> extra_leaves = {}) {
  auto* tape = loss.storage()->tape;
  if (!tape) {
    auto* cur = TapeT<S>::current();
    if (!cur) throw std::runtime_error("backward: loss is not attached to any tape");
    tape = cur;
  }
  tape->backward(loss, extra_leaves);
}

}  // namespace prognet
