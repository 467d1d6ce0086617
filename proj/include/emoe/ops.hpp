#pragma once
// Differentiable operations on tape variables.
//
// Layout conventions: matrices are row-major; sequence tensors are
// channels-last ([..., L, C]) so that dense layers act on the trailing axis.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "emoe/special.hpp"
#include "emoe/tensor.hpp"

namespace emoe {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
using CStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CArr = Eigen::Map<const Eigen::ArrayXd>;
using MArr = Eigen::Map<Eigen::ArrayXd>;

inline CArr arr(std::span<const double> s) { return CArr(s.data(), static_cast<Eigen::Index>(s.size())); }
inline MArr arr(std::span<double> s) { return MArr(s.data(), static_cast<Eigen::Index>(s.size())); }
inline CArr arr(const Tensor& t) { return CArr(t.data(), static_cast<Eigen::Index>(t.size())); }

inline Tape& common_tape(std::initializer_list<Var> vars, const char* op) {
  Tape* tape = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw Error(std::string(op) + ": invalid variable");
    if (tape && tape != v.tape()) throw Error(std::string(op) + ": inputs on different tapes");
    tape = v.tape();
  }
  return *tape;
}

inline Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

// tanh through exp so that the array expression vectorizes.
template <class A>
auto fast_tanh(const A& u) {
  return 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class UnaryOp {
  relu,
  gelu,      // tanh approximation
  gelu_erf,  // exact x * Phi(x)
  sigmoid,
  tanh,
  softplus,
  softplus1,  // 1 + softplus, kept strictly above 1
  exp,
  log,
  abs,
  square,
  sqrt,
  neg,
  lgamma,
  digamma,
};

enum class BinaryOp { add, sub, mul, div };

inline Var elementwise(UnaryOp op, const Var& x) {
  using namespace detail;
  Tape& tape = common_tape({x}, "elementwise");
  const Tensor xv = x.value();
  const auto n = xv.size();
  Buffer out(n);
  MArr y(out.data(), idx(n));
  const CArr a = arr(xv);
  switch (op) {
    case UnaryOp::relu: y = a.max(0.0); break;
    case UnaryOp::gelu: y = 0.5 * a * (1.0 + fast_tanh(kGeluC * (a + kGeluA * a.cube()))); break;
    case UnaryOp::gelu_erf:
      for (std::size_t i = 0; i < n; ++i) y[idx(i)] = 0.5 * a[idx(i)] * std::erfc(-a[idx(i)] / std::numbers::sqrt2);
      break;
    case UnaryOp::sigmoid: y = 1.0 / (1.0 + (-a).exp()); break;
    case UnaryOp::tanh: y = fast_tanh(a); break;
    case UnaryOp::softplus: y = a.max(0.0) + (-a.abs()).exp().log1p(); break;
    case UnaryOp::softplus1:
      y = (1.0 + a.max(0.0) + (-a.abs()).exp().log1p()).max(std::nextafter(1.0, 2.0));
      break;
    case UnaryOp::exp: y = a.exp(); break;
    case UnaryOp::log:
      if ((a <= 0.0).any()) throw DomainError("log: non-positive argument");
      y = a.log();
      break;
    case UnaryOp::abs: y = a.abs(); break;
    case UnaryOp::square: y = a.square(); break;
    case UnaryOp::sqrt:
      if ((a < 0.0).any()) throw DomainError("sqrt: negative argument");
      y = a.sqrt();
      break;
    case UnaryOp::neg: y = -a; break;
    case UnaryOp::lgamma:
      for (std::size_t i = 0; i < n; ++i) out[i] = special::lgamma(xv[i]);
      break;
    case UnaryOp::digamma:
      for (std::size_t i = 0; i < n; ++i) out[i] = special::digamma(xv[i]);
      break;
  }
  Tensor result(xv.shape(), std::move(out));
  return tape.record("elementwise", {x}, result, [op, xv, result] {
    return [op, xv, result](std::span<const double> g, std::span<const std::span<double>> gin) {
      const CArr ga = arr(g);
      const CArr a = arr(xv);
      const CArr y = arr(result);
      MArr gx = arr(gin[0]);
      switch (op) {
        case UnaryOp::relu: gx += (a > 0.0).select(ga, 0.0); break;
        case UnaryOp::gelu: {
          const Eigen::ArrayXd t = fast_tanh(kGeluC * (a + kGeluA * a.cube()));
          gx += ga * (0.5 * (1.0 + t) +
                      0.5 * a * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * a.square()));
          break;
        }
        case UnaryOp::gelu_erf:
          for (Eigen::Index i = 0; i < a.size(); ++i) {
            const double cdf = 0.5 * std::erfc(-a[i] / std::numbers::sqrt2);
            const double pdf = std::exp(-0.5 * a[i] * a[i]) / std::sqrt(2.0 * std::numbers::pi);
            gx[i] += ga[i] * (cdf + a[i] * pdf);
          }
          break;
        case UnaryOp::sigmoid: gx += ga * y * (1.0 - y); break;
        case UnaryOp::tanh: gx += ga * (1.0 - y.square()); break;
        case UnaryOp::softplus:
        case UnaryOp::softplus1: gx += ga / (1.0 + (-a).exp()); break;
        case UnaryOp::exp: gx += ga * y; break;
        case UnaryOp::log: gx += ga / a; break;
        case UnaryOp::abs: gx += ga * a.sign(); break;
        case UnaryOp::square: gx += 2.0 * ga * a; break;
        case UnaryOp::sqrt: gx += 0.5 * ga / y; break;
        case UnaryOp::neg: gx -= ga; break;
        case UnaryOp::lgamma:
          for (Eigen::Index i = 0; i < a.size(); ++i) gx[i] += ga[i] * special::digamma(a[i]);
          break;
        case UnaryOp::digamma:
          for (Eigen::Index i = 0; i < a.size(); ++i) gx[i] += ga[i] * special::trigamma(a[i]);
          break;
      }
    };
  });
}

inline Var relu(const Var& x) { return elementwise(UnaryOp::relu, x); }
inline Var gelu(const Var& x, bool exact = false) {
  return elementwise(exact ? UnaryOp::gelu_erf : UnaryOp::gelu, x);
}
inline Var sigmoid(const Var& x) { return elementwise(UnaryOp::sigmoid, x); }
inline Var tanh(const Var& x) { return elementwise(UnaryOp::tanh, x); }
inline Var softplus(const Var& x) { return elementwise(UnaryOp::softplus, x); }
inline Var softplus1(const Var& x) { return elementwise(UnaryOp::softplus1, x); }
inline Var exp(const Var& x) { return elementwise(UnaryOp::exp, x); }
inline Var log(const Var& x) { return elementwise(UnaryOp::log, x); }
inline Var abs(const Var& x) { return elementwise(UnaryOp::abs, x); }
inline Var square(const Var& x) { return elementwise(UnaryOp::square, x); }
inline Var lgamma(const Var& x) { return elementwise(UnaryOp::lgamma, x); }
inline Var digamma(const Var& x) { return elementwise(UnaryOp::digamma, x); }

/// Numpy-style broadcast of two shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Calls f(i_out, i_a, i_b) over the broadcast of a and b.
template <class F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  auto strides = [&](const Shape& s) {
    std::vector<std::size_t> st(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
      const std::size_t oi = i + (r - s.size());
      st[oi] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  const auto sa = strides(a);
  const auto sb = strides(b);
  const std::size_t inner = out[r - 1];
  const std::size_t outer = numel(out) / std::max<std::size_t>(inner, 1);
  std::vector<std::size_t> counter(r, 0);
  std::size_t ia = 0, ib = 0, io = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) f(io + j, ia + j * sa[r - 1], ib + j * sb[r - 1]);
    io += inner;
    // advance the multi-index over the leading r-1 axes
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++counter[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (counter[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      counter[ax] = 0;
    }
  }
}

}  // namespace detail

inline Var elementwise(BinaryOp op, const Var& a, const Var& b) {
  using namespace detail;
  Tape& tape = common_tape({a, b}, "elementwise");
  const Tensor av = a.value();
  const Tensor bv = b.value();
  const Shape out_shape = broadcast_shape(av.shape(), bv.shape());
  Buffer out(numel(out_shape));
  const bool same = av.shape() == bv.shape();
  if (same) {
    MArr y(out.data(), idx(out.size()));
    switch (op) {
      case BinaryOp::add: y = arr(av) + arr(bv); break;
      case BinaryOp::sub: y = arr(av) - arr(bv); break;
      case BinaryOp::mul: y = arr(av) * arr(bv); break;
      case BinaryOp::div: y = arr(av) / arr(bv); break;
    }
  } else {
    const double* pa = av.data();
    const double* pb = bv.data();
    for_each_broadcast(out_shape, av.shape(), bv.shape(), [&](std::size_t io, std::size_t ia, std::size_t ib) {
      switch (op) {
        case BinaryOp::add: out[io] = pa[ia] + pb[ib]; break;
        case BinaryOp::sub: out[io] = pa[ia] - pb[ib]; break;
        case BinaryOp::mul: out[io] = pa[ia] * pb[ib]; break;
        case BinaryOp::div: out[io] = pa[ia] / pb[ib]; break;
      }
    });
  }
  Tensor result(out_shape, std::move(out));
  return tape.record("elementwise", {a, b}, result, [op, av, bv, out_shape, same] {
    return [op, av, bv, out_shape, same](std::span<const double> g, std::span<const std::span<double>> gin) {
      const auto ga = gin[0];
      const auto gb = gin[1];
      const double* pa = av.data();
      const double* pb = bv.data();
      if (same) {
        const CArr gg = arr(g);
        if (!ga.empty()) {
          MArr m = arr(ga);
          switch (op) {
            case BinaryOp::add:
            case BinaryOp::sub: m += gg; break;
            case BinaryOp::mul: m += gg * arr(bv); break;
            case BinaryOp::div: m += gg / arr(bv); break;
          }
        }
        if (!gb.empty()) {
          MArr m = arr(gb);
          switch (op) {
            case BinaryOp::add: m += gg; break;
            case BinaryOp::sub: m -= gg; break;
            case BinaryOp::mul: m += gg * arr(av); break;
            case BinaryOp::div: m -= gg * arr(av) / arr(bv).square(); break;
          }
        }
        return;
      }
      for_each_broadcast(out_shape, av.shape(), bv.shape(), [&](std::size_t io, std::size_t ia, std::size_t ib) {
        const double gv = g[io];
        switch (op) {
          case BinaryOp::add:
            if (!ga.empty()) ga[ia] += gv;
            if (!gb.empty()) gb[ib] += gv;
            break;
          case BinaryOp::sub:
            if (!ga.empty()) ga[ia] += gv;
            if (!gb.empty()) gb[ib] -= gv;
            break;
          case BinaryOp::mul:
            if (!ga.empty()) ga[ia] += gv * pb[ib];
            if (!gb.empty()) gb[ib] += gv * pa[ia];
            break;
          case BinaryOp::div:
            if (!ga.empty()) ga[ia] += gv / pb[ib];
            if (!gb.empty()) gb[ib] -= gv * pa[ia] / (pb[ib] * pb[ib]);
            break;
        }
      });
    };
  });
}

inline Var operator+(const Var& a, const Var& b) { return elementwise(BinaryOp::add, a, b); }
inline Var operator-(const Var& a, const Var& b) { return elementwise(BinaryOp::sub, a, b); }
inline Var operator*(const Var& a, const Var& b) { return elementwise(BinaryOp::mul, a, b); }
inline Var operator/(const Var& a, const Var& b) { return elementwise(BinaryOp::div, a, b); }

/// y = scale * x + shift
inline Var affine(const Var& x, double scale, double shift = 0.0) {
  using namespace detail;
  Tape& tape = common_tape({x}, "affine");
  Buffer out(x.size());
  arr(std::span<double>(out)) = scale * arr(x.value()) + shift;
  return tape.record("affine", {x}, Tensor(x.shape(), std::move(out)), [scale] {
    return [scale](std::span<const double> g, std::span<const std::span<double>> gin) {
      arr(gin[0]) += scale * arr(g);
    };
  });
}
inline Var operator*(double s, const Var& x) { return affine(x, s); }
inline Var operator+(const Var& x, double c) { return affine(x, 1.0, c); }

/// Huber_delta(r) = 0.5 r^2 for |r| <= delta, delta (|r| - delta/2) otherwise.
inline Var huber(const Var& r, double delta) {
  using namespace detail;
  if (!(delta > 0.0)) throw DomainError("huber: delta must be positive");
  Tape& tape = common_tape({r}, "huber");
  const Tensor rv = r.value();
  Buffer out(rv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = std::abs(rv[i]);
    out[i] = a <= delta ? 0.5 * rv[i] * rv[i] : delta * (a - 0.5 * delta);
  }
  return tape.record("huber", {r}, Tensor(rv.shape(), std::move(out)), [rv, delta] {
    return [rv, delta](std::span<const double> g, std::span<const std::span<double>> gin) {
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * std::clamp(rv[i], -delta, delta);
    };
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& x, Shape shape) {
  Tape& tape = detail::common_tape({x}, "reshape");
  Tensor out = x.value().reshaped(std::move(shape));
  return tape.record("reshape", {x}, out, [] {
    return [](std::span<const double> g, std::span<const std::span<double>> gin) {
      detail::arr(gin[0]) += detail::arr(g);
    };
  });
}

/// Stop-gradient: a constant copy of the current value.
inline Var detach(const Var& x) { return x.tape()->constant(x.value()); }

/// Elements [begin, end) along `axis`.
inline Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& tape = detail::common_tape({x}, "slice");
  const Shape& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = end - begin, full = s[axis];
  Shape os = s;
  os[axis] = len;
  Buffer out(outer * len * inner);
  const double* p = x.value().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(p + (o * full + begin) * inner, len * inner, out.data() + o * len * inner);
  }
  return tape.record("slice", {x}, Tensor(os, std::move(out)), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      for (std::size_t o = 0; o < outer; ++o) {
        double* dst = gin[0].data() + (o * full + begin) * inner;
        const double* src = g.data() + o * len * inner;
        for (std::size_t j = 0; j < len * inner; ++j) dst[j] += src[j];
      }
    };
  });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape& tape = *parts.front().tape();
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range for " + to_string(s0));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size() && p.tape() == &tape;
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: incompatible shape " + to_string(s) + " vs " + to_string(s0));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  Buffer out(outer * total * inner);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* p = parts[k].value().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p + o * lens[k] * inner, lens[k] * inner, out.data() + (o * total + off) * inner);
    }
    off += lens[k];
  }
  return tape.record("concat", parts, Tensor(os, std::move(out)), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < lens.size(); ++k) {
        if (!gin[k].empty()) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + (o * total + off) * inner;
            double* dst = gin[k].data() + o * lens[k] * inner;
            for (std::size_t j = 0; j < lens[k] * inner; ++j) dst[j] += src[j];
          }
        }
        off += lens[k];
      }
    };
  });
}

/// Swaps the last two axes (rank 2 or 3).
inline Var transpose(const Var& x) {
  using namespace detail;
  Tape& tape = common_tape({x}, "transpose");
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose expects rank 2 or 3, got " + to_string(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Buffer out(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    MMap(out.data() + b * m * n, idx(n), idx(m)) = CMap(x.value().data() + b * m * n, idx(m), idx(n)).transpose();
  }
  return tape.record("transpose", {x}, Tensor(os, std::move(out)), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      for (std::size_t b = 0; b < batch; ++b) {
        MMap(gin[0].data() + b * m * n, idx(m), idx(n)) += CMap(g.data() + b * m * n, idx(n), idx(m)).transpose();
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  Tape& tape = detail::common_tape({x}, "sum");
  const double s = detail::arr(x.value()).sum();
  return tape.record("sum", {x}, Tensor::scalar(s), [] {
    return [](std::span<const double> g, std::span<const std::span<double>> gin) {
      detail::arr(gin[0]) += g[0];
    };
  });
}

inline Var mean(const Var& x) { return affine(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Sum over one axis; the axis is removed from the shape.
inline Var sum_axis(const Var& x, std::size_t axis) {
  Tape& tape = detail::common_tape({x}, "sum_axis");
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("sum_axis: axis out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  Buffer out(outer * inner, 0.0);
  const double* p = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] += p[(o * len + k) * inner + j];
  return tape.record("sum_axis", {x}, Tensor(os, std::move(out)), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
          for (std::size_t j = 0; j < inner; ++j) gin[0][(o * len + k) * inner + j] += g[o * inner + j];
    };
  });
}

inline Var mean_axis(const Var& x, std::size_t axis) {
  if (axis >= x.shape().size() || x.shape()[axis] == 0) throw ShapeError("mean_axis over empty axis");
  return affine(sum_axis(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k]x[k,n], batched [B,m,k]x[B,k,n], or [B,m,k]x[k,n] with a shared rhs.
inline Var matmul(const Var& a, const Var& b) {
  using namespace detail;
  Tape& tape = common_tape({a, b}, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3 && sb.size() == 3;
  const bool shared = sa.size() == 3 && sb.size() == 2;
  if (!((sa.size() == 2 && sb.size() == 2) || batched || shared) ||
      sa.back() != sb[sb.size() - 2] || (batched && sa[0] != sb[0])) {
    throw ShapeError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = shared ? sa[0] * sa[1] : sa[sa.size() - 2];
  const std::size_t k = sa.back(), n = sb.back();
  Shape os = sa;
  os.back() = n;
  Buffer out(batch * m * n);
  const Tensor av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < batch; ++i) {
    MMap(out.data() + i * m * n, idx(m), idx(n)).noalias() =
        CMap(av.data() + i * m * k, idx(m), idx(k)) * CMap(bv.data() + i * k * n, idx(k), idx(n));
  }
  return tape.record("matmul", {a, b}, Tensor(os, std::move(out)), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      for (std::size_t i = 0; i < batch; ++i) {
        const CMap gm(g.data() + i * m * n, idx(m), idx(n));
        if (!gin[0].empty())
          MMap(gin[0].data() + i * m * k, idx(m), idx(k)).noalias() +=
              gm * CMap(bv.data() + i * k * n, idx(k), idx(n)).transpose();
        if (!gin[1].empty())
          MMap(gin[1].data() + i * k * n, idx(k), idx(n)).noalias() +=
              CMap(av.data() + i * m * k, idx(m), idx(k)).transpose() * gm;
      }
    };
  });
}

/// x[..., in] * W[in, out] + bias[out]
inline Var linear(const Var& x, const Var& w, const std::optional<Var>& bias = std::nullopt) {
  using namespace detail;
  Tape& tape = common_tape({x, w}, "linear");
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[0]) {
    throw ShapeError("linear: input " + to_string(sx) + " does not match weight " + to_string(sw));
  }
  if (bias && (bias->shape() != Shape{sw[1]} || bias->tape() != &tape)) {
    throw ShapeError("linear: bias shape " + to_string(bias->shape()) + " for weight " + to_string(sw));
  }
  const std::size_t in = sw[0], outd = sw[1], rows = x.size() / in;
  Shape os = sx;
  os.back() = outd;
  Buffer out(rows * outd);
  const Tensor xv = x.value(), wv = w.value();
  MMap y(out.data(), idx(rows), idx(outd));
  y.noalias() = CMap(xv.data(), idx(rows), idx(in)) * CMap(wv.data(), idx(in), idx(outd));
  std::vector<Var> inputs{x, w};
  if (bias) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->value().data(), idx(outd));
    inputs.push_back(*bias);
  }
  return tape.record("linear", inputs, Tensor(os, std::move(out)), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      const CMap gm(g.data(), idx(rows), idx(outd));
      if (!gin[0].empty())
        MMap(gin[0].data(), idx(rows), idx(in)).noalias() += gm * CMap(wv.data(), idx(in), idx(outd)).transpose();
      if (!gin[1].empty())
        MMap(gin[1].data(), idx(in), idx(outd)).noalias() += CMap(xv.data(), idx(rows), idx(in)).transpose() * gm;
      if (gin.size() > 2 && !gin[2].empty())
        Eigen::Map<Eigen::RowVectorXd>(gin[2].data(), idx(outd)) += gm.colwise().sum();
    };
  });
}

/// Same-padded 1-D convolution over channels-last sequences.
/// x: [..., L, C_in], kernels: [C_out, C_in, K] with K odd, bias: [C_out].
inline Var conv1d(const Var& x, const Var& kernels, const std::optional<Var>& bias = std::nullopt) {
  using namespace detail;
  Tape& tape = common_tape({x, kernels}, "conv1d");
  const Shape& sx = x.shape();
  const Shape& sk = kernels.shape();
  if (sk.size() != 3) throw ShapeError("conv1d: kernels must be [C_out, C_in, K], got " + to_string(sk));
  const std::size_t cout = sk[0], cin = sk[1], ksz = sk[2];
  if (ksz % 2 == 0) throw ShapeError("conv1d: kernel size must be odd for same padding, got " + std::to_string(ksz));
  if (sx.size() < 2 || sx.back() != cin) {
    throw ShapeError("conv1d: input " + to_string(sx) + " does not have " + std::to_string(cin) + " channels");
  }
  if (bias && bias->shape() != Shape{cout}) throw ShapeError("conv1d: bias must be [C_out]");
  const std::size_t len = sx[sx.size() - 2];
  const std::size_t batch = x.size() / (len * cin);
  const std::size_t pad = ksz / 2, cols = ksz * cin, rows = batch * len;
  const Tensor xv = x.value(), kv = kernels.value();

  // weight matrix [K*C_in, C_out] with row (k*C_in + c) holding kernel[:, c, k]
  RowMat wm(idx(cols), idx(cout));
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t k = 0; k < ksz; ++k) wm(idx(k * cin + c), idx(o)) = kv[(o * cin + c) * ksz + k];

  auto im2col = [=](const double* src) {
    RowMat col = RowMat::Zero(idx(rows), idx(cols));
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t k = 0; k < ksz; ++k) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
          if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
          std::copy_n(src + (b * len + static_cast<std::size_t>(s)) * cin, cin, &col(idx(b * len + t), idx(k * cin)));
        }
    return col;
  };

  Shape os = sx;
  os.back() = cout;
  Buffer out(rows * cout);
  MMap y(out.data(), idx(rows), idx(cout));
  y.noalias() = im2col(xv.data()) * wm;
  std::vector<Var> inputs{x, kernels};
  if (bias) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->value().data(), idx(cout));
    inputs.push_back(*bias);
  }
  return tape.record("conv1d", inputs, Tensor(os, std::move(out)), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      const CMap gm(g.data(), idx(rows), idx(cout));
      if (!gin[1].empty()) {
        const RowMat gw = im2col(xv.data()).transpose() * gm;
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t k = 0; k < ksz; ++k) gin[1][(o * cin + c) * ksz + k] += gw(idx(k * cin + c), idx(o));
      }
      if (!gin[0].empty()) {
        const RowMat gcol = gm * wm.transpose();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < len; ++t)
            for (std::size_t k = 0; k < ksz; ++k) {
              const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
              if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
              double* dst = gin[0].data() + (b * len + static_cast<std::size_t>(s)) * cin;
              const double* src = &gcol(idx(b * len + t), idx(k * cin));
              for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
            }
      }
      if (gin.size() > 2 && !gin[2].empty())
        Eigen::Map<Eigen::RowVectorXd>(gin[2].data(), idx(cout)) += gm.colwise().sum();
    };
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Numerically stable softmax along `axis` (max-subtracted).
inline Var softmax(const Var& x, std::size_t axis) {
  Tape& tape = detail::common_tape({x}, "softmax");
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const double* p = x.value().data();
  Buffer out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, p[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) z += out[base + k * inner] = std::exp(p[base + k * inner] - mx);
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  Tensor y(s, std::move(out));
  return tape.record("softmax", {x}, y, [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t base = o * len * inner + j;
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < len; ++k)
            gin[0][base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
        }
    };
  });
}

/// Layer normalization over the last axis with learned gain and shift.
inline Var layer_norm(const Var& x, const Var& gain, const Var& shift, double eps = 1e-5) {
  using namespace detail;
  Tape& tape = common_tape({x, gain, shift}, "layer_norm");
  const Shape& s = x.shape();
  if (s.empty() || gain.shape() != Shape{s.back()} || shift.shape() != Shape{s.back()}) {
    throw ShapeError("layer_norm: parameters do not match input " + to_string(s));
  }
  const std::size_t d = s.back(), rows = x.size() / d;
  const CMap xm(x.value().data(), idx(rows), idx(d));
  const Eigen::VectorXd mu = xm.rowwise().mean();
  auto xhat_ptr = std::make_shared<RowMat>(xm.colwise() - mu);
  RowMat& xhat = *xhat_ptr;
  const Eigen::ArrayXd inv = ((xhat.array().square().rowwise().sum() / static_cast<double>(d)) + eps).rsqrt();
  xhat.array().colwise() *= inv;
  const Eigen::Map<const Eigen::RowVectorXd> gv(gain.value().data(), idx(d));
  const Eigen::Map<const Eigen::RowVectorXd> bv(shift.value().data(), idx(d));
  Buffer out(x.size());
  MMap y(out.data(), idx(rows), idx(d));
  y = (xhat.array().rowwise() * gv.array()).matrix();
  y.rowwise() += bv;
  const Tensor saved_gain = gain.value();
  return tape.record("layer_norm", {x, gain, shift}, Tensor(s, std::move(out)),
                     [xhat_ptr, inv, saved_gain, rows, d] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      const RowMat& xhat = *xhat_ptr;
      const CMap gm(g.data(), idx(rows), idx(d));
      if (!gin[1].empty())
        Eigen::Map<Eigen::RowVectorXd>(gin[1].data(), idx(d)) += (gm.array() * xhat.array()).colwise().sum().matrix();
      if (!gin[2].empty()) Eigen::Map<Eigen::RowVectorXd>(gin[2].data(), idx(d)) += gm.colwise().sum();
      if (!gin[0].empty()) {
        const Eigen::Map<const Eigen::RowVectorXd> gv(saved_gain.data(), idx(d));
        const Eigen::ArrayXXd dxhat = gm.array().rowwise() * gv.array();
        const Eigen::ArrayXd m1 = dxhat.rowwise().mean();
        const Eigen::ArrayXd m2 = (dxhat * xhat.array()).rowwise().mean();
        MMap gx(gin[0].data(), idx(rows), idx(d));
        gx.array() += ((dxhat.colwise() - m1) - xhat.array().colwise() * m2).colwise() * inv;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product self-attention core on [B, L, H] (or [L, H])
/// projections; heads are contiguous slices of H. When `weights` is non-null
/// it receives the attention matrices [B, heads, L, L].
inline Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, Tensor* weights = nullptr) {
  using namespace detail;
  Tape& tape = common_tape({q, k, v}, "attention");
  const Shape& s = q.shape();
  if (s.size() < 2 || k.shape() != s || v.shape() != s) {
    throw ShapeError("attention: q/k/v shapes must match, got " + to_string(s));
  }
  const std::size_t hdim = s.back(), len = s[s.size() - 2], batch = q.size() / (hdim * len);
  if (heads == 0 || hdim % heads != 0) {
    throw ShapeError("attention: hidden size " + std::to_string(hdim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = hdim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor qv = q.value(), kv = k.value(), vv = v.value();
  Buffer probs(batch * heads * len * len);
  Buffer out(q.size());
  const Eigen::OuterStride<> stride(idx(hdim));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * len * hdim + h * dh;
      const CStrided qh(qv.data() + off, idx(len), idx(dh), stride);
      const CStrided kh(kv.data() + off, idx(len), idx(dh), stride);
      const CStrided vh(vv.data() + off, idx(len), idx(dh), stride);
      MMap p(probs.data() + (b * heads + h) * len * len, idx(len), idx(len));
      p.noalias() = scale * qh * kh.transpose();
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        auto row = p.row(r).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
      }
      MStrided(out.data() + off, idx(len), idx(dh), stride).noalias() = p * vh;
    }
  Tensor pt({batch, heads, len, len}, std::move(probs));
  if (weights) *weights = pt;
  return tape.record("attention", {q, k, v}, Tensor(s, std::move(out)), [=] {
    return [=](std::span<const double> g, std::span<const std::span<double>> gin) {
      RowMat dp(idx(len), idx(len));
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = b * len * hdim + h * dh;
          const CStrided qh(qv.data() + off, idx(len), idx(dh), stride);
          const CStrided kh(kv.data() + off, idx(len), idx(dh), stride);
          const CStrided vh(vv.data() + off, idx(len), idx(dh), stride);
          const CStrided go(g.data() + off, idx(len), idx(dh), stride);
          const CMap p(pt.data() + (b * heads + h) * len * len, idx(len), idx(len));
          if (!gin[2].empty()) MStrided(gin[2].data() + off, idx(len), idx(dh), stride).noalias() += p.transpose() * go;
          if (gin[0].empty() && gin[1].empty()) continue;
          dp.noalias() = go * vh.transpose();
          const Eigen::ArrayXd rs = (dp.array() * p.array()).rowwise().sum();
          dp.array() = p.array() * (dp.array().colwise() - rs);
          if (!gin[0].empty()) MStrided(gin[0].data() + off, idx(len), idx(dh), stride).noalias() += scale * dp * kh;
          if (!gin[1].empty())
            MStrided(gin[1].data() + off, idx(len), idx(dh), stride).noalias() += scale * dp.transpose() * qh;
        }
    };
  });
}

}  // namespace emoe
