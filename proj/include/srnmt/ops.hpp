#pragma once

// Tape primitives: exactly the dense ops the model equations need.
// Every op computes the forward value and, when a tape is supplied and an
// input carries gradient, records a closure implementing the analytic
// local derivative. No implicit broadcasting: the only shape coercions
// are the explicit ones below (scalar constants, a row-wise bias).

#include <algorithm>
#include <cstring>

#include "srnmt/tensor.hpp"

namespace srnmt {

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
inline bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// ----------------------------------------------------------------------
// matmul: [m,k] x [k,n] -> [m,n]; a may be rank 3 [B,t,k] (treated as
// (B*t) rows), in which case the output is [B,t,n].
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (b.shape().rank() != 2)
    throw ShapeError("matmul rhs must be rank 2, got " + b.shape().str());
  const int64_t k = a.shape().cols();
  const int64_t m = a.shape().rows();
  const int64_t n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul inner extents disagree: " + a.shape().str() +
                     " x " + b.shape().str());

  Shape out_shape = a.shape().rank() == 3 ? Shape{a.shape()[0], a.shape()[1], n}
                    : a.shape().rank() == 2 ? Shape{m, n}
                                            : Shape{n};
  Tensor<T> out = Tensor<T>::zeros(out_shape);

  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* po = out.values().data();
  for (int64_t i = 0; i < m; ++i) {
    T* orow = po + i * n;
    const T* arow = pa + i * k;
    for (int64_t l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = pb + l * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }

  if (needs_tape(tape, a, b)) {
    mark_output(tape, out);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record({a, b, out}, [an, bn, on, m, k, n]() {
      if (on->grad.empty()) return;
      const T* dout = on->grad.data();
      if (an->requires_grad) {
        T* da = grad_buf(*an).data();
        const T* pb = bn->values.data();
        for (int64_t i = 0; i < m; ++i) {
          const T* drow = dout + i * n;
          T* darow = da + i * k;
          for (int64_t l = 0; l < k; ++l) {
            const T* brow = pb + l * n;
            T acc = T(0);
            for (int64_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
            darow[l] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        T* db = grad_buf(*bn).data();
        const T* pa = an->values.data();
        for (int64_t i = 0; i < m; ++i) {
          const T* drow = dout + i * n;
          const T* arow = pa + i * k;
          for (int64_t l = 0; l < k; ++l) {
            const T av = arow[l];
            T* dbrow = db + l * n;
            for (int64_t j = 0; j < n; ++j) dbrow[j] += av * drow[j];
          }
        }
      }
    });
  }
  return out;
}

// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
template <typename T>
Tensor<T> bmm(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().rank() != 3 || b.shape().rank() != 3 ||
      a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1])
    throw ShapeError("bmm shapes disagree: " + a.shape().str() + " x " +
                     b.shape().str());
  const int64_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2],
                n = b.shape()[2];
  Tensor<T> out = Tensor<T>::zeros(Shape{B, m, n});

  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* po = out.values().data();
  for (int64_t bi = 0; bi < B; ++bi) {
    const T* ab = pa + bi * m * k;
    const T* bb = pb + bi * k * n;
    T* ob = po + bi * m * n;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t l = 0; l < k; ++l) {
        const T av = ab[i * k + l];
        for (int64_t j = 0; j < n; ++j) ob[i * n + j] += av * bb[l * n + j];
      }
  }

  if (needs_tape(tape, a, b)) {
    mark_output(tape, out);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record({a, b, out}, [an, bn, on, B, m, k, n]() {
      if (on->grad.empty()) return;
      const T* dout = on->grad.data();
      for (int64_t bi = 0; bi < B; ++bi) {
        const T* dob = dout + bi * m * n;
        if (an->requires_grad) {
          T* da = grad_buf(*an).data() + bi * m * k;
          const T* bb = bn->values.data() + bi * k * n;
          for (int64_t i = 0; i < m; ++i)
            for (int64_t l = 0; l < k; ++l) {
              T acc = T(0);
              for (int64_t j = 0; j < n; ++j)
                acc += dob[i * n + j] * bb[l * n + j];
              da[i * k + l] += acc;
            }
        }
        if (bn->requires_grad) {
          T* db = grad_buf(*bn).data() + bi * k * n;
          const T* ab = an->values.data() + bi * m * k;
          for (int64_t i = 0; i < m; ++i)
            for (int64_t l = 0; l < k; ++l) {
              const T av = ab[i * k + l];
              for (int64_t j = 0; j < n; ++j)
                db[l * n + j] += av * dob[i * n + j];
            }
        }
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------
// Elementwise ops
// ----------------------------------------------------------------------

namespace detail {

template <typename T>
inline void check_same_shape(const char* op, const Tensor<T>& a,
                             const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes disagree: " +
                     a.shape().str() + " vs " + b.shape().str());
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] + b.values()[i];
  if (needs_tape(tape, a, b)) {
    mark_output(tape, out);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record({a, b, out}, [an, bn, on, n]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        T* da = grad_buf(*an).data();
        for (int64_t i = 0; i < n; ++i) da[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        T* db = grad_buf(*bn).data();
        for (int64_t i = 0; i < n; ++i) db[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] - b.values()[i];
  if (needs_tape(tape, a, b)) {
    mark_output(tape, out);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record({a, b, out}, [an, bn, on, n]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        T* da = grad_buf(*an).data();
        for (int64_t i = 0; i < n; ++i) da[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        T* db = grad_buf(*bn).data();
        for (int64_t i = 0; i < n; ++i) db[i] -= on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] * b.values()[i];
  if (needs_tape(tape, a, b)) {
    mark_output(tape, out);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record({a, b, out}, [an, bn, on, n]() {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        T* da = grad_buf(*an).data();
        for (int64_t i = 0; i < n; ++i) da[i] += on->grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        T* db = grad_buf(*bn).data();
        for (int64_t i = 0; i < n; ++i) db[i] += on->grad[i] * an->values[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i)
    out.values()[i] = sigmoid_scalar(x.values()[i]);
  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on, n]() {
      if (on->grad.empty()) return;
      T* dx = grad_buf(*xn).data();
      for (int64_t i = 0; i < n; ++i) {
        const T s = on->values[i];
        dx[i] += on->grad[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.values()[i] = std::tanh(x.values()[i]);
  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on, n]() {
      if (on->grad.empty()) return;
      T* dx = grad_buf(*xn).data();
      for (int64_t i = 0; i < n; ++i) {
        const T t = on->values[i];
        dx[i] += on->grad[i] * (T(1) - t * t);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.values()[i] = x.values()[i] * c;
  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on, n, c]() {
      if (on->grad.empty()) return;
      T* dx = grad_buf(*xn).data();
      for (int64_t i = 0; i < n; ++i) dx[i] += on->grad[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> one_minus(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.values()[i] = T(1) - x.values()[i];
  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on, n]() {
      if (on->grad.empty()) return;
      T* dx = grad_buf(*xn).data();
      for (int64_t i = 0; i < n; ++i) dx[i] -= on->grad[i];
    });
  }
  return out;
}

// Explicit row-wise coercion: adds bias[n] to every row of x[..,n].
template <typename T>
Tensor<T> add_bias(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.shape().rank() != 1 || bias.shape()[0] != x.shape().cols())
    throw ShapeError("add_bias: bias " + bias.shape().str() +
                     " does not match row width of " + x.shape().str());
  const int64_t rows = x.shape().rows(), n = x.shape().cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.values()[i * n + j] = x.values()[i * n + j] + bias.values()[j];
  if (needs_tape(tape, x, bias)) {
    mark_output(tape, out);
    auto xn = x.node(), bn = bias.node(), on = out.node();
    tape->record({x, bias, out}, [xn, bn, on, rows, n]() {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        T* dx = grad_buf(*xn).data();
        for (int64_t i = 0; i < rows * n; ++i) dx[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        T* db = grad_buf(*bn).data();
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < n; ++j) db[j] += on->grad[i * n + j];
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------
// layer_norm: per-row standardization over the last axis, then an
// affine transform. Backward applies the full Jacobian.
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
  const int64_t k = x.shape().cols();
  if (k < 2)
    throw ConfigError("layer_norm: row width must be >= 2, got " +
                      std::to_string(k));
  if (gain.shape().rank() != 1 || gain.shape()[0] != k ||
      bias.shape().rank() != 1 || bias.shape()[0] != k)
    throw ShapeError("layer_norm: gain/bias must be rank-1 of width " +
                     std::to_string(k));
  const int64_t rows = x.shape().rows();

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  // Normalized rows and inverse stddevs are kept for the backward rule.
  auto xhat = std::make_shared<std::vector<T>>(x.values().size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));

  for (int64_t i = 0; i < rows; ++i) {
    const T* row = x.values().data() + i * k;
    T mean = T(0);
    for (int64_t j = 0; j < k; ++j) mean += row[j];
    mean /= static_cast<T>(k);
    T var = T(0);
    for (int64_t j = 0; j < k; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(k);
    const T inv = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = inv;
    for (int64_t j = 0; j < k; ++j) {
      const T xh = (row[j] - mean) * inv;
      (*xhat)[static_cast<size_t>(i * k + j)] = xh;
      out.values()[i * k + j] = xh * gain.values()[j] + bias.values()[j];
    }
  }

  if (needs_tape(tape, x, gain, bias)) {
    mark_output(tape, out);
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    tape->record({x, gain, bias, out}, [xn, gn, bn, on, xhat, inv_std, rows,
                                        k]() {
      if (on->grad.empty()) return;
      const T* dy = on->grad.data();
      for (int64_t i = 0; i < rows; ++i) {
        const T* dyr = dy + i * k;
        const T* xh = xhat->data() + i * k;
        if (gn->requires_grad) {
          T* dg = grad_buf(*gn).data();
          for (int64_t j = 0; j < k; ++j) dg[j] += dyr[j] * xh[j];
        }
        if (bn->requires_grad) {
          T* db = grad_buf(*bn).data();
          for (int64_t j = 0; j < k; ++j) db[j] += dyr[j];
        }
        if (xn->requires_grad) {
          const T inv = (*inv_std)[static_cast<size_t>(i)];
          T mean_h = T(0), mean_hx = T(0);
          for (int64_t j = 0; j < k; ++j) {
            const T h = dyr[j] * gn->values[j];
            mean_h += h;
            mean_hx += h * xh[j];
          }
          mean_h /= static_cast<T>(k);
          mean_hx /= static_cast<T>(k);
          T* dx = grad_buf(*xn).data() + i * k;
          for (int64_t j = 0; j < k; ++j) {
            const T h = dyr[j] * gn->values[j];
            dx[j] += inv * (h - mean_h - xh[j] * mean_hx);
          }
        }
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------
// softmax over the last axis, numerically stabilized by row-max
// subtraction. Positions with keep==false get probability exactly 0.
// Mask shapes: none, [n], [m,n] for rank-2 x, or [B,Ts] for rank-3
// x[B,Tt,Ts] (shared across the Tt axis).
// ----------------------------------------------------------------------

namespace detail {

inline const uint8_t* mask_row_for(const Mask* keep, const Shape& xs,
                                   int64_t row_index) {
  if (!keep) return nullptr;
  const int64_t n = xs.cols();
  if (keep->shape.rank() == 1) {
    if (keep->shape[0] != n)
      throw ShapeError("softmax mask width " + keep->shape.str() +
                       " does not match " + xs.str());
    return keep->keep.data();
  }
  if (xs.rank() == 2) {
    if (keep->shape[0] != xs[0] || keep->shape[1] != n)
      throw ShapeError("softmax mask " + keep->shape.str() +
                       " does not match " + xs.str());
    return keep->keep.data() + row_index * n;
  }
  // rank-3 scores [B,Tt,Ts] with mask [B,Ts]
  if (keep->shape[0] != xs[0] || keep->shape[1] != n)
    throw ShapeError("softmax mask " + keep->shape.str() +
                     " does not match " + xs.str());
  const int64_t b = row_index / xs[1];
  return keep->keep.data() + b * n;
}

}  // namespace detail

template <typename T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& x,
                       const Mask* keep = nullptr) {
  const int64_t rows = x.shape().rows(), n = x.shape().cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape());

  for (int64_t i = 0; i < rows; ++i) {
    const T* row = x.values().data() + i * n;
    T* orow = out.values().data() + i * n;
    const uint8_t* krow = detail::mask_row_for(keep, x.shape(), i);
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < n; ++j)
      if (!krow || krow[j]) mx = std::max(mx, row[j]);
    if (mx == -std::numeric_limits<T>::infinity())
      throw MaskError("softmax_rows: fully-masked row " + std::to_string(i));
    T z = T(0);
    for (int64_t j = 0; j < n; ++j) {
      if (krow && !krow[j]) {
        orow[j] = T(0);
        continue;
      }
      const T e = std::exp(row[j] - mx);
      orow[j] = e;
      z += e;
    }
    const T invz = T(1) / z;
    for (int64_t j = 0; j < n; ++j) orow[j] *= invz;
  }

  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on, rows, n]() {
      if (on->grad.empty()) return;
      T* dx = grad_buf(*xn).data();
      for (int64_t i = 0; i < rows; ++i) {
        const T* y = on->values.data() + i * n;
        const T* dy = on->grad.data() + i * n;
        T dot = T(0);
        for (int64_t j = 0; j < n; ++j) dot += y[j] * dy[j];
        for (int64_t j = 0; j < n; ++j) dx[i * n + j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------
// concat / split along an axis (all other extents must agree).
// split(concat(xs)) reproduces xs bit-exactly.
// ----------------------------------------------------------------------

namespace detail {

inline void axis_decomp(const Shape& s, int axis, int64_t& outer,
                        int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < s.rank(); ++i) inner *= s[i];
}

}  // namespace detail

template <typename T>
Tensor<T> concat(Tape<T>* tape, const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis < 0 || axis >= s0.rank())
    throw ShapeError("concat: axis " + std::to_string(axis) +
                     " out of range for " + s0.str());
  int64_t axis_total = 0;
  for (const auto& x : xs) {
    if (x.shape().rank() != s0.rank())
      throw ShapeError("concat: rank mismatch " + x.shape().str() + " vs " +
                       s0.str());
    for (int i = 0; i < s0.rank(); ++i)
      if (i != axis && x.shape()[i] != s0[i])
        throw ShapeError("concat: extents disagree off-axis: " +
                         x.shape().str() + " vs " + s0.str());
    axis_total += x.shape()[axis];
  }
  std::array<int64_t, 3> ext{};
  for (int i = 0; i < s0.rank(); ++i) ext[static_cast<size_t>(i)] = s0[i];
  ext[static_cast<size_t>(axis)] = axis_total;
  Shape out_shape = s0.rank() == 1   ? Shape{ext[0]}
                    : s0.rank() == 2 ? Shape{ext[0], ext[1]}
                                     : Shape{ext[0], ext[1], ext[2]};
  Tensor<T> out = Tensor<T>::zeros(out_shape);

  int64_t outer, inner;
  detail::axis_decomp(out_shape, axis, outer, inner);
  int64_t offset = 0;
  for (const auto& x : xs) {
    const int64_t ax = x.shape()[axis];
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(
          out.values().data() + (o * axis_total + offset) * inner,
          x.values().data() + o * ax * inner,
          static_cast<size_t>(ax * inner) * sizeof(T));
    offset += ax;
  }

  bool rec = tape != nullptr;
  bool any_grad = false;
  for (const auto& x : xs) any_grad = any_grad || x.requires_grad();
  if (rec && any_grad) {
    mark_output(tape, out);
    std::vector<std::shared_ptr<TensorData<T>>> in_nodes;
    std::vector<int64_t> axis_sizes;
    for (const auto& x : xs) {
      in_nodes.push_back(x.node());
      axis_sizes.push_back(x.shape()[axis]);
    }
    auto on = out.node();
    std::vector<Tensor<T>> touched = xs;
    touched.push_back(out);
    tape->record(std::move(touched), [in_nodes, axis_sizes, on, outer, inner,
                                      axis_total]() {
      if (on->grad.empty()) return;
      int64_t offset = 0;
      for (size_t idx = 0; idx < in_nodes.size(); ++idx) {
        const int64_t ax = axis_sizes[idx];
        auto& node = *in_nodes[idx];
        if (node.requires_grad) {
          T* dx = grad_buf(node).data();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = on->grad.data() + (o * axis_total + offset) * inner;
            T* dst = dx + o * ax * inner;
            for (int64_t t = 0; t < ax * inner; ++t) dst[t] += src[t];
          }
        }
        offset += ax;
      }
    });
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(Tape<T>* tape, const Tensor<T>& x,
                             const std::vector<int64_t>& sizes, int axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= s.rank())
    throw ShapeError("split: axis " + std::to_string(axis) +
                     " out of range for " + s.str());
  int64_t total = 0;
  for (int64_t sz : sizes) total += sz;
  if (total != s[axis])
    throw ShapeError("split: sizes sum to " + std::to_string(total) +
                     " but axis extent is " + std::to_string(s[axis]));

  int64_t outer, inner;
  detail::axis_decomp(s, axis, outer, inner);
  const int64_t axis_total = s[axis];

  std::vector<Tensor<T>> outs;
  int64_t offset = 0;
  for (int64_t sz : sizes) {
    std::array<int64_t, 3> ext{};
    for (int i = 0; i < s.rank(); ++i) ext[static_cast<size_t>(i)] = s[i];
    ext[static_cast<size_t>(axis)] = sz;
    Shape os = s.rank() == 1   ? Shape{ext[0]}
               : s.rank() == 2 ? Shape{ext[0], ext[1]}
                               : Shape{ext[0], ext[1], ext[2]};
    Tensor<T> piece = Tensor<T>::zeros(os);
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(piece.values().data() + o * sz * inner,
                  x.values().data() + (o * axis_total + offset) * inner,
                  static_cast<size_t>(sz * inner) * sizeof(T));
    offset += sz;
    outs.push_back(piece);
  }

  if (needs_tape(tape, x)) {
    auto xn = x.node();
    int64_t off = 0;
    for (size_t idx = 0; idx < outs.size(); ++idx) {
      mark_output(tape, outs[idx]);
      auto on = outs[idx].node();
      const int64_t sz = sizes[idx];
      const int64_t offset_now = off;
      tape->record({x, outs[idx]}, [xn, on, sz, offset_now, outer, inner,
                                    axis_total]() {
        if (on->grad.empty()) return;
        T* dx = grad_buf(*xn).data();
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = on->grad.data() + o * sz * inner;
          T* dst = dx + (o * axis_total + offset_now) * inner;
          for (int64_t t = 0; t < sz * inner; ++t) dst[t] += src[t];
        }
      });
      off += sz;
    }
  }
  return outs;
}

// ----------------------------------------------------------------------
// dropout: inverted (survivors scaled by 1/(1-p)), identity at inference.
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double p, bool training,
                  Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;

  const int64_t n = x.numel();
  auto keep = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
  const T inv_keep = T(1.0 / (1.0 - p));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (int64_t i = 0; i < n; ++i) {
    const bool k = uniform01(rng) >= p;
    (*keep)[static_cast<size_t>(i)] = k ? 1 : 0;
    out.values()[i] = k ? x.values()[i] * inv_keep : T(0);
  }
  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on, keep, n, inv_keep]() {
      if (on->grad.empty()) return;
      T* dx = grad_buf(*xn).data();
      for (int64_t i = 0; i < n; ++i)
        if ((*keep)[static_cast<size_t>(i)]) dx[i] += on->grad[i] * inv_keep;
    });
  }
  return out;
}

// ----------------------------------------------------------------------
// embed: gathers rows of an embedding table. ids laid out [T] (B==0) or
// row-major [B,T]. Backward scatter-adds into the table.
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> embed(Tape<T>* tape, const Tensor<T>& table,
                const std::vector<int32_t>& ids, int64_t B = 0) {
  if (table.shape().rank() != 2)
    throw ShapeError("embed: table must be rank 2, got " +
                     table.shape().str());
  const int64_t V = table.shape()[0], d = table.shape()[1];
  for (int32_t id : ids)
    if (id < 0 || id >= V)
      throw VocabError("embed: token id " + std::to_string(id) +
                       " out of range for vocabulary of size " +
                       std::to_string(V));
  const int64_t total = static_cast<int64_t>(ids.size());
  Shape out_shape =
      B > 0 ? Shape{B, total / B, d} : Shape{total, d};
  if (B > 0 && total % B != 0)
    throw ShapeError("embed: id count not divisible by batch size");
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  for (int64_t i = 0; i < total; ++i)
    std::memcpy(out.values().data() + i * d,
                table.values().data() + static_cast<int64_t>(ids[i]) * d,
                static_cast<size_t>(d) * sizeof(T));

  if (needs_tape(tape, table)) {
    mark_output(tape, out);
    auto tn = table.node(), on = out.node();
    auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
    tape->record({table, out}, [tn, on, ids_copy, d]() {
      if (on->grad.empty()) return;
      T* dt = grad_buf(*tn).data();
      for (size_t i = 0; i < ids_copy->size(); ++i) {
        const T* src = on->grad.data() + static_cast<int64_t>(i) * d;
        T* dst = dt + static_cast<int64_t>((*ids_copy)[i]) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------
// Reductions and small structural ops
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on]() {
      if (on->grad.empty()) return;
      const T d = on->grad[0];
      T* dx = grad_buf(*xn).data();
      for (size_t i = 0; i < xn->values.size(); ++i) dx[i] += d;
    });
  }
  return out;
}

// Copies values into a new shape with the same element count; gradients
// route 1:1.
template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape s) {
  if (s.numel() != x.numel())
    throw ShapeError("reshape: element count mismatch " + x.shape().str() +
                     " -> " + s.str());
  Tensor<T> out = Tensor<T>::from(s, x.values());
  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on]() {
      if (on->grad.empty()) return;
      T* dx = grad_buf(*xn).data();
      for (size_t i = 0; i < on->grad.size(); ++i) dx[i] += on->grad[i];
    });
  }
  return out;
}

// x[B,T,d] -> [B,d] at time t.
template <typename T>
Tensor<T> select_time(Tape<T>* tape, const Tensor<T>& x, int64_t t) {
  if (x.shape().rank() != 3)
    throw ShapeError("select_time: need rank-3 input, got " +
                     x.shape().str());
  const int64_t B = x.shape()[0], Tn = x.shape()[1], d = x.shape()[2];
  if (t < 0 || t >= Tn)
    throw ShapeError("select_time: t out of range");
  Tensor<T> out = Tensor<T>::zeros(Shape{B, d});
  for (int64_t b = 0; b < B; ++b)
    std::memcpy(out.values().data() + b * d,
                x.values().data() + (b * Tn + t) * d,
                static_cast<size_t>(d) * sizeof(T));
  if (needs_tape(tape, x)) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record({x, out}, [xn, on, B, Tn, d, t]() {
      if (on->grad.empty()) return;
      T* dx = grad_buf(*xn).data();
      for (int64_t b = 0; b < B; ++b) {
        const T* src = on->grad.data() + b * d;
        T* dst = dx + (b * Tn + t) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// steps[t] is [B,d]; result is [B,T,d].
template <typename T>
Tensor<T> stack_time(Tape<T>* tape, const std::vector<Tensor<T>>& steps) {
  if (steps.empty()) throw ShapeError("stack_time: no inputs");
  const int64_t B = steps[0].shape()[0], d = steps[0].shape()[1];
  const int64_t Tn = static_cast<int64_t>(steps.size());
  Tensor<T> out = Tensor<T>::zeros(Shape{B, Tn, d});
  for (int64_t t = 0; t < Tn; ++t) {
    if (steps[static_cast<size_t>(t)].shape() != Shape{B, d})
      throw ShapeError("stack_time: step shapes disagree");
    for (int64_t b = 0; b < B; ++b)
      std::memcpy(out.values().data() + (b * Tn + t) * d,
                  steps[static_cast<size_t>(t)].values().data() + b * d,
                  static_cast<size_t>(d) * sizeof(T));
  }
  bool any_grad = false;
  for (const auto& s : steps) any_grad = any_grad || s.requires_grad();
  if (tape && any_grad) {
    mark_output(tape, out);
    std::vector<std::shared_ptr<TensorData<T>>> in_nodes;
    for (const auto& s : steps) in_nodes.push_back(s.node());
    auto on = out.node();
    std::vector<Tensor<T>> touched = steps;
    touched.push_back(out);
    tape->record(std::move(touched), [in_nodes, on, B, Tn, d]() {
      if (on->grad.empty()) return;
      for (int64_t t = 0; t < Tn; ++t) {
        auto& node = *in_nodes[static_cast<size_t>(t)];
        if (!node.requires_grad) continue;
        T* dst = grad_buf(node).data();
        for (int64_t b = 0; b < B; ++b) {
          const T* src = on->grad.data() + (b * Tn + t) * d;
          for (int64_t j = 0; j < d; ++j) dst[b * d + j] += src[j];
        }
      }
    });
  }
  return out;
}

}  // namespace srnmt
