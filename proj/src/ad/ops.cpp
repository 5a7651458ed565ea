#include "stow/ad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>

#include "stow/common/errors.hpp"
#include "stow/kernels/kernels.hpp"

namespace stow::ad {

namespace {

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
std::shared_ptr<TensorNode<T>> make_node(Shape shape, std::vector<T> values) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return node;
}

template <typename T>
void check_finite(const TensorNode<T>& node, const char* op) {
  for (T v : node.value) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T, typename Backward>
Tensor<T> finish(std::shared_ptr<TensorNode<T>> out, const char* op, bool record, Backward&& backward) {
  check_finite(*out, op);
  if (record) {
    out->requires_grad = true;
    Tape<T>::active()->record(out, std::forward<Backward>(backward), op);
  }
  return Tensor<T>(std::move(out));
}

template <typename T>
std::vector<T>& grad_of(const std::shared_ptr<TensorNode<T>>& node) {
  node->ensure_grad();
  return node->grad;
}

void require(bool condition, const std::string& message) {
  if (!condition) throw DimensionError(message);
}

// ---- broadcasting ----

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  bc.out.assign(nd, 1);
  bc.stride_a.assign(nd, 0);
  bc.stride_b.assign(nd, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t d = 0; d < nd; ++d) {
    const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(d) - static_cast<std::ptrdiff_t>(nd - a.size());
    const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(d) - static_cast<std::ptrdiff_t>(nd - b.size());
    const std::size_t ea = ia >= 0 ? a[static_cast<std::size_t>(ia)] : 1;
    const std::size_t eb = ib >= 0 ? b[static_cast<std::size_t>(ib)] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(a) + " with " +
                           shape_to_string(b));
    }
    bc.out[d] = std::max(ea, eb);
    if (ea != 1) bc.stride_a[d] = sa[static_cast<std::size_t>(ia)];
    if (eb != 1) bc.stride_b[d] = sb[static_cast<std::size_t>(ib)];
  }
  return bc;
}

template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t n = shape_numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t nd = bc.out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

// Binary op with partial derivatives da(a, b, y) and db(a, b, y).
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd, Da da, Db db) {
  Broadcast bc = broadcast_shapes(a.shape(), b.shape(), op);
  std::vector<T> out(shape_numel(bc.out));
  const auto av = a.values();
  const auto bv = b.values();
  for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  auto node = make_node<T>(bc.out, std::move(out));
  const bool rec = recording<T>({&a, &b});
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), op, rec, [an, bn, on, bc = std::move(bc), da, db]() {
    const auto& g = on->grad;
    const auto& y = on->value;
    if (an->requires_grad) {
      auto& ga = grad_of(an);
      for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += g[i] * da(an->value[ia], bn->value[ib], y[i]);
      });
    }
    if (bn->requires_grad) {
      auto& gb = grad_of(bn);
      for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        gb[ib] += g[i] * db(an->value[ia], bn->value[ib], y[i]);
      });
    }
  });
}

// Unary op with derivative d(x, y).
template <typename T, typename Fwd, typename D>
Tensor<T> unary_op(const Tensor<T>& x, const char* op, Fwd fwd, D d) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto node = make_node<T>(x.shape(), std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), op, rec, [xn, on, d]() {
    auto& gx = grad_of(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * d(xn->value[i], on->value[i]);
  });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  require(axis < s.size(), std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                               shape_to_string(s));
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

template <typename T>
std::span<const T> cspan(const std::vector<T>& v) {
  return std::span<const T>(v.data(), v.size());
}

}  // namespace

// ---- linear algebra ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.dim() == 2 && b.dim() == 2, "matmul expects 2-D operands, got " + shape_to_string(a.shape()) + " and " +
                                            shape_to_string(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  require(b.extent(0) == k, "matmul inner extents disagree: " + shape_to_string(a.shape()) + " x " +
                                shape_to_string(b.shape()));
  std::vector<T> out(m * n);
  kernels::gemm<T>(kernels::Trans::none, kernels::Trans::none, m, k, n, a.values(), b.values(), out, false);
  auto node = make_node<T>({m, n}, std::move(out));
  const bool rec = recording<T>({&a, &b});
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "matmul", rec, [an, bn, on, m, k, n]() {
    if (an->requires_grad) {  // dA = G B^T
      kernels::gemm<T>(kernels::Trans::none, kernels::Trans::transpose, m, n, k, cspan(on->grad), cspan(bn->value),
                       grad_of(an), true);
    }
    if (bn->requires_grad) {  // dB = A^T G
      kernels::gemm<T>(kernels::Trans::transpose, kernels::Trans::none, k, m, n, cspan(an->value), cspan(on->grad),
                       grad_of(bn), true);
    }
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.dim() == 2 && b.dim() == 2, "matmul_nt expects 2-D operands");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  require(b.extent(1) == k, "matmul_nt inner extents disagree: " + shape_to_string(a.shape()) + " x " +
                                shape_to_string(b.shape()) + "^T");
  std::vector<T> out(m * n);
  kernels::gemm<T>(kernels::Trans::none, kernels::Trans::transpose, m, k, n, a.values(), b.values(), out, false);
  auto node = make_node<T>({m, n}, std::move(out));
  const bool rec = recording<T>({&a, &b});
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "matmul_nt", rec, [an, bn, on, m, k, n]() {
    if (an->requires_grad) {  // dA = G B
      kernels::gemm<T>(kernels::Trans::none, kernels::Trans::none, m, n, k, cspan(on->grad), cspan(bn->value),
                       grad_of(an), true);
    }
    if (bn->requires_grad) {  // dB = G^T A
      kernels::gemm<T>(kernels::Trans::transpose, kernels::Trans::none, n, m, k, cspan(on->grad), cspan(an->value),
                       grad_of(bn), true);
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require(x.dim() == 2, "transpose expects a 2-D tensor");
  const std::size_t r = x.extent(0), c = x.extent(1);
  std::vector<T> out(r * c);
  const auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  auto node = make_node<T>({c, r}, std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "transpose", rec, [xn, on, r, c]() {
    auto& gx = grad_of(xn);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += on->grad[j * r + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape " + shape_to_string(x.shape()) + " -> " + shape_to_string(shape) + " changes element count");
  auto node = make_node<T>(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "reshape", rec, [xn, on]() {
    auto& gx = grad_of(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i];
  });
}

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T out) { return -out / y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_op<T>(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return unary_op<T>(
      x, "add_scalar", [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op<T>(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary_op<T>(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op<T>(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_op<T>(
      x, "softplus", [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary_op<T>(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// ---- reductions ----

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.values()) total += v;
  auto node = make_node<T>({1}, {total});
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "sum", rec, [xn, on]() {
    auto& gx = grad_of(xn);
    const T g = on->grad[0];
    for (auto& v : gx) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis, "sum_axis");
  Shape out_shape;
  for (std::size_t i = 0; i < x.dim(); ++i)
    if (i != axis) out_shape.push_back(x.extent(i));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.len; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.len + k) * sp.inner + i];
  auto node = make_node<T>(std::move(out_shape), std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "sum_axis", rec, [xn, on, sp]() {
    auto& gx = grad_of(xn);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.len; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.len + k) * sp.inner + i] += on->grad[o * sp.inner + i];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis, "softmax");
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k) mx = std::max(mx, xv[base + k * sp.inner]);
      T z = T(0);
      for (std::size_t k = 0; k < sp.len; ++k) {
        const T e = std::exp(xv[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] /= z;
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "softmax", rec, [xn, on, sp]() {
    auto& gx = grad_of(xn);
    const auto& y = on->value;
    const auto& g = on->grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        T dot = T(0);
        for (std::size_t k = 0; k < sp.len; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.len; ++k) {
          const std::size_t idx = base + k * sp.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis, "log_softmax");
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k) mx = std::max(mx, xv[base + k * sp.inner]);
      T z = T(0);
      for (std::size_t k = 0; k < sp.len; ++k) z += std::exp(xv[base + k * sp.inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] = xv[base + k * sp.inner] - lse;
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "log_softmax", rec, [xn, on, sp]() {
    auto& gx = grad_of(xn);
    const auto& y = on->value;
    const auto& g = on->grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        T gsum = T(0);
        for (std::size_t k = 0; k < sp.len; ++k) gsum += g[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.len; ++k) {
          const std::size_t idx = base + k * sp.inner;
          gx[idx] += g[idx] - std::exp(y[idx]) * gsum;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.dim() >= 1, "layer_norm on 0-d tensor");
  const std::size_t d = x.shape().back();
  require(gamma.numel() == d && beta.numel() == d, "layer_norm: gamma/beta must have " + std::to_string(d) +
                                                       " entries");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out));
  const bool rec = recording<T>({&x, &gamma, &beta});
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "layer_norm", rec,
                   [xn, gn, bn, on, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
                     const auto& g = on->grad;
                     if (gn->requires_grad || bn->requires_grad) {
                       auto& gg = grad_of(gn);
                       auto& gb = grad_of(bn);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) {
                           gg[j] += g[r * d + j] * xhat[r * d + j];
                           gb[j] += g[r * d + j];
                         }
                     }
                     if (xn->requires_grad) {
                       auto& gx = grad_of(xn);
                       std::vector<T> dh(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         T mean_dh = T(0);
                         T mean_dh_h = T(0);
                         for (std::size_t j = 0; j < d; ++j) {
                           dh[j] = g[r * d + j] * gn->value[j];
                           mean_dh += dh[j];
                           mean_dh_h += dh[j] * xhat[r * d + j];
                         }
                         mean_dh /= static_cast<T>(d);
                         mean_dh_h /= static_cast<T>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  require(x.dim() >= 1, "l2_normalize on 0-d tensor");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::sqrt(s);
    const T denom = norms[r] + eps;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / denom;
  }
  auto node = make_node<T>(x.shape(), std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "l2_normalize", rec, [xn, on, d, rows, eps, norms = std::move(norms)]() {
    auto& gx = grad_of(xn);
    const auto& g = on->grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const T n = norms[r];
      const T denom = n + eps;
      T gdotx = T(0);
      for (std::size_t j = 0; j < d; ++j) gdotx += g[r * d + j] * xn->value[r * d + j];
      const T radial = n > T(0) ? gdotx / (denom * denom * n) : T(0);
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] / denom - xn->value[r * d + j] * radial;
    }
  });
}

// ---- structural ----

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  require(!parts.empty(), "concat of zero tensors");
  const Shape& ref = parts[0].shape();
  require(axis < ref.size(), "concat axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    require(p.dim() == ref.size(), "concat rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis) require(p.extent(i) == ref[i], "concat extent mismatch off the concat axis");
    lens.push_back(p.extent(axis));
    out_shape[axis] += p.extent(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  const std::size_t total_len = out_shape[axis];
  std::vector<T> out(outer * total_len * inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].values();
    const std::size_t block = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * block, block, out.data() + o * total_len * inner + offset * inner);
    offset += lens[p];
  }
  auto node = make_node<T>(std::move(out_shape), std::move(out));
  bool rec = false;
  if (Tape<T>::active()) {
    for (const auto& p : parts) rec = rec || p.requires_grad();
  }
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "concat", rec, [nodes = std::move(nodes), lens, on, outer, inner, total_len]() {
    std::size_t off = 0;
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      const std::size_t block = lens[p] * inner;
      if (nodes[p]->requires_grad) {
        auto& gp = grad_of(nodes[p]);
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = on->grad.data() + o * total_len * inner + off * inner;
          T* dst = gp.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      off += lens[p];
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit sp = split_axis(x.shape(), axis, "slice");
  require(length > 0 && start + length <= sp.len, "slice [" + std::to_string(start) + ", +" +
                                                       std::to_string(length) + ") outside axis of extent " +
                                                       std::to_string(sp.len));
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(sp.outer * length * sp.inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.data() + (o * sp.len + start) * sp.inner, length * sp.inner,
                out.data() + o * length * sp.inner);
  auto node = make_node<T>(std::move(out_shape), std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "slice", rec, [xn, on, sp, start, length]() {
    auto& gx = grad_of(xn);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      T* dst = gx.data() + (o * sp.len + start) * sp.inner;
      const T* src = on->grad.data() + o * length * sp.inner;
      for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  require(x.dim() >= 1, "gather_rows on 0-d tensor");
  require(!indices.empty(), "gather_rows with no indices");
  const std::size_t rows = x.extent(0);
  const std::size_t width = x.numel() / rows;
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  std::vector<T> out(indices.size() * width);
  const auto xv = x.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < rows, "gather_rows index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(xv.data() + indices[i] * width, width, out.data() + i * width);
  }
  auto node = make_node<T>(std::move(out_shape), std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return finish<T>(std::move(node), "gather_rows", rec, [xn, on, idx = std::move(idx), width]() {
    auto& gx = grad_of(xn);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) gx[idx[i] * width + j] += on->grad[i * width + j];
  });
}

// ---- spatial ----

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  require(x.dim() == 3, "conv2d input must be [C,H,W], got " + shape_to_string(x.shape()));
  require(weight.dim() == 4, "conv2d weight must be [C_out,C_in,k,k]");
  require(weight.extent(1) == x.extent(0), "conv2d channel mismatch: input " + shape_to_string(x.shape()) +
                                               ", weight " + shape_to_string(weight.shape()));
  require(weight.extent(2) == weight.extent(3), "conv2d expects square kernels");
  require(stride >= 1, "conv2d stride must be at least 1");
  kernels::ConvGeometry g;
  g.channels = x.extent(0);
  g.height = x.extent(1);
  g.width = x.extent(2);
  g.kernel = weight.extent(2);
  g.stride = stride;
  g.padding = padding;
  require(g.kernel <= g.height + 2 * padding && g.kernel <= g.width + 2 * padding,
          "conv2d kernel larger than padded input");
  require(padding < g.kernel, "conv2d padding must be smaller than the kernel");
  const std::size_t co = weight.extent(0);
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t spatial = oh * ow;
  const std::size_t patch = g.patch_size();
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == co, "conv2d bias must have C_out entries");

  std::vector<T> cols(patch * spatial);
  kernels::im2col<T>(g, x.values(), cols);
  std::vector<T> out(co * spatial);
  kernels::gemm<T>(kernels::Trans::none, kernels::Trans::none, co, patch, spatial, weight.values(), cspan(cols), out,
                   false);
  if (has_bias) {
    const auto bv = bias.values();
    for (std::size_t c = 0; c < co; ++c)
      for (std::size_t s = 0; s < spatial; ++s) out[c * spatial + s] += bv[c];
  }
  auto node = make_node<T>({co, oh, ow}, std::move(out));
  const bool rec = has_bias ? recording<T>({&x, &weight, &bias}) : recording<T>({&x, &weight});
  auto xn = x.node_ptr();
  auto wn = weight.node_ptr();
  auto bn = has_bias ? bias.node_ptr() : nullptr;
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "conv2d", rec, [xn, wn, bn, on, g, co, spatial, patch, cols = std::move(cols)]() {
    const auto& gout = on->grad;
    if (wn->requires_grad) {  // dW = G cols^T
      kernels::gemm<T>(kernels::Trans::none, kernels::Trans::transpose, co, spatial, patch, cspan(gout), cspan(cols),
                       grad_of(wn), true);
    }
    if (bn && bn->requires_grad) {
      auto& gb = grad_of(bn);
      for (std::size_t c = 0; c < co; ++c)
        for (std::size_t s = 0; s < spatial; ++s) gb[c] += gout[c * spatial + s];
    }
    if (xn->requires_grad) {  // dcols = W^T G, then scatter back
      std::vector<T> dcols(patch * spatial);
      kernels::gemm<T>(kernels::Trans::transpose, kernels::Trans::none, patch, co, spatial, cspan(wn->value),
                       cspan(gout), dcols, false);
      kernels::col2im<T>(g, cspan(dcols), grad_of(xn));
    }
  });
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Source taps for align-corners-false resizing of one axis.
std::vector<Tap> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<Tap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = Tap{i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
std::vector<T> bilinear_upsample_plane(std::span<const T> plane, std::size_t h, std::size_t w, std::size_t factor) {
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
  const std::size_t ow = w * factor;
  std::vector<T> out(h * factor * ow);
  for (std::size_t y = 0; y < ty.size(); ++y) {
    const T wy1 = static_cast<T>(ty[y].w1), wy0 = T(1) - wy1;
    for (std::size_t x = 0; x < tx.size(); ++x) {
      const T wx1 = static_cast<T>(tx[x].w1), wx0 = T(1) - wx1;
      out[y * ow + x] = wy0 * (wx0 * plane[ty[y].i0 * w + tx[x].i0] + wx1 * plane[ty[y].i0 * w + tx[x].i1]) +
                        wy1 * (wx0 * plane[ty[y].i1 * w + tx[x].i0] + wx1 * plane[ty[y].i1 * w + tx[x].i1]);
    }
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t factor) {
  require(x.dim() == 3, "bilinear_upsample expects [C,h,w]");
  require(factor >= 1, "bilinear_upsample factor must be a positive integer");
  const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  const std::size_t plane_in = h * w;
  const std::size_t plane_out = plane_in * factor * factor;
  std::vector<T> out(c * plane_out);
  const auto xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    auto p = bilinear_upsample_plane<T>(xv.subspan(ch * plane_in, plane_in), h, w, factor);
    std::copy(p.begin(), p.end(), out.begin() + static_cast<std::ptrdiff_t>(ch * plane_out));
  }
  auto node = make_node<T>({c, h * factor, w * factor}, std::move(out));
  const bool rec = recording<T>({&x});
  auto xn = x.node_ptr();
  TensorNode<T>* on = node.get();
  return finish<T>(std::move(node), "bilinear_upsample", rec, [xn, on, c, h, w, factor]() {
    const auto ty = bilinear_taps(h, factor);
    const auto tx = bilinear_taps(w, factor);
    const std::size_t ow = w * factor;
    auto& gx = grad_of(xn);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* gin = gx.data() + ch * h * w;
      const T* gout = on->grad.data() + ch * h * w * factor * factor;
      for (std::size_t y = 0; y < ty.size(); ++y) {
        const T wy1 = static_cast<T>(ty[y].w1), wy0 = T(1) - wy1;
        for (std::size_t xx = 0; xx < tx.size(); ++xx) {
          const T wx1 = static_cast<T>(tx[xx].w1), wx0 = T(1) - wx1;
          const T g = gout[y * ow + xx];
          gin[ty[y].i0 * w + tx[xx].i0] += g * wy0 * wx0;
          gin[ty[y].i0 * w + tx[xx].i1] += g * wy0 * wx1;
          gin[ty[y].i1 * w + tx[xx].i0] += g * wy1 * wx0;
          gin[ty[y].i1 * w + tx[xx].i1] += g * wy1 * wx1;
        }
      }
    }
  });
}

#define STOW_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> transpose(const Tensor<T>&);                                                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                          \
  template Tensor<T> log(const Tensor<T>&);                                                              \
  template Tensor<T> exp(const Tensor<T>&);                                                              \
  template Tensor<T> softplus(const Tensor<T>&);                                                         \
  template Tensor<T> square(const Tensor<T>&);                                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                              \
  template Tensor<T> mean(const Tensor<T>&);                                                             \
  template Tensor<T> sum_axis(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                \
  template Tensor<T> l2_normalize(const Tensor<T>&, T);                                                  \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                                    \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                     \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, std::size_t);                                   \
  template std::vector<T> bilinear_upsample_plane(std::span<const T>, std::size_t, std::size_t, std::size_t);

STOW_INSTANTIATE_OPS(float)
STOW_INSTANTIATE_OPS(double)

#undef STOW_INSTANTIATE_OPS

}  // namespace stow::ad
