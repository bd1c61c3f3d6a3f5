#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "xduct/errors.hpp"
#include "xduct/rng.hpp"
#include "xduct/tensor.hpp"

namespace xduct {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;
using ConstRowVec = Eigen::Map<const Eigen::RowVectorXd>;
using MutRowVec = Eigen::Map<Eigen::RowVectorXd>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

inline Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return Shape{1};
  return Shape(s.begin(), s.end() - 1);
}

inline std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::MutMap(out.data(), m, n).noalias() =
      detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), k, n);
  return detail::make_result("matmul", {m, n}, std::move(out), {&a, &b},
                             [m, k, n](const detail::Node& self) {
                               detail::ConstMap g(self.grad.data(), m, n);
                               const auto& av = self.parents[0]->value;
                               const auto& bv = self.parents[1]->value;
                               if (double* ga = detail::parent_grad(self, 0)) {
                                 detail::MutMap(ga, m, k).noalias() +=
                                     g * detail::ConstMap(bv.data(), k, n).transpose();
                               }
                               if (double* gb = detail::parent_grad(self, 1)) {
                                 detail::MutMap(gb, k, n).noalias() +=
                                     detail::ConstMap(av.data(), m, k).transpose() * g;
                               }
                             });
}

// y = x W^T (+ b) applied to the last axis of x. W is [out x in].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  if (weight.rank() != 2 || x.shape().back() != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(1), out_dim = weight.dim(0);
  const std::size_t rows = x.numel() / in;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  std::vector<double> out(rows * out_dim);
  detail::MutMap y(out.data(), rows, out_dim);
  y.noalias() = detail::ConstMap(x.data().data(), rows, in) *
                detail::ConstMap(weight.data().data(), out_dim, in).transpose();
  if (has_bias) y.rowwise() += detail::ConstRowVec(bias.data().data(), out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  auto fn = [rows, in, out_dim, has_bias](const detail::Node& self) {
    detail::ConstMap g(self.grad.data(), rows, out_dim);
    if (double* gx = detail::parent_grad(self, 0)) {
      detail::MutMap(gx, rows, in).noalias() +=
          g * detail::ConstMap(self.parents[1]->value.data(), out_dim, in);
    }
    if (double* gw = detail::parent_grad(self, 1)) {
      detail::MutMap(gw, out_dim, in).noalias() +=
          g.transpose() * detail::ConstMap(self.parents[0]->value.data(), rows, in);
    }
    if (has_bias) {
      if (double* gb = detail::parent_grad(self, 2)) {
        detail::MutRowVec(gb, out_dim) += g.colwise().sum();
      }
    }
  };
  if (has_bias) return detail::make_result("linear", shape, std::move(out), {&x, &weight, &bias}, fn);
  return detail::make_result("linear", shape, std::move(out), {&x, &weight}, fn);
}

// Batched product over the leading axis: [B,m,k] x [B,k,n] -> [B,m,n], or
// [B,m,k] x [B,n,k]^T when transpose_b is set.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw ShapeError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<double> out(batch * m * n);
  for (std::size_t s = 0; s < batch; ++s) {
    detail::ConstMap am(a.data().data() + s * m * k, m, k);
    detail::MutMap o(out.data() + s * m * n, m, n);
    if (transpose_b) {
      o.noalias() = am * detail::ConstMap(b.data().data() + s * n * k, n, k).transpose();
    } else {
      o.noalias() = am * detail::ConstMap(b.data().data() + s * k * n, k, n);
    }
  }
  return detail::make_result(
      "bmm", {batch, m, n}, std::move(out), {&a, &b},
      [batch, m, k, n, transpose_b](const detail::Node& self) {
        const double* av = self.parents[0]->value.data();
        const double* bv = self.parents[1]->value.data();
        double* ga = detail::parent_grad(self, 0);
        double* gb = detail::parent_grad(self, 1);
        for (std::size_t s = 0; s < batch; ++s) {
          detail::ConstMap g(self.grad.data() + s * m * n, m, n);
          if (transpose_b) {
            detail::ConstMap bm(bv + s * n * k, n, k);
            if (ga) detail::MutMap(ga + s * m * k, m, k).noalias() += g * bm;
            if (gb) {
              detail::MutMap(gb + s * n * k, n, k).noalias() +=
                  g.transpose() * detail::ConstMap(av + s * m * k, m, k);
            }
          } else {
            detail::ConstMap bm(bv + s * k * n, k, n);
            if (ga) detail::MutMap(ga + s * m * k, m, k).noalias() += g * bm.transpose();
            if (gb) {
              detail::MutMap(gb + s * k * n, k, n).noalias() +=
                  detail::ConstMap(av + s * m * k, m, k).transpose() * g;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Unary { Tanh, Sigmoid, Exp, Log };

inline const char* unary_name(Unary f) {
  switch (f) {
    case Unary::Tanh: return "tanh";
    case Unary::Sigmoid: return "sigmoid";
    case Unary::Exp: return "exp";
    case Unary::Log: return "log";
  }
  return "?";
}

inline Tensor apply_unary(const Tensor& x, Unary f) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  switch (f) {
    case Unary::Tanh:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::tanh(in[i]);
      break;
    case Unary::Sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-in[i]));
      break;
    case Unary::Exp:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
      break;
    case Unary::Log:
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (!(in[i] > 0.0)) {
          throw DomainError("log of non-positive value " + std::to_string(in[i]) +
                            " at flat index " + std::to_string(i));
        }
        out[i] = std::log(in[i]);
      }
      break;
  }
  return detail::make_result(unary_name(f), x.shape(), std::move(out), {&x},
                             [f](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               const auto& y = self.value;
                               const auto& g = self.grad;
                               const std::size_t n = y.size();
                               switch (f) {
                                 case Unary::Tanh:
                                   for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
                                   break;
                                 case Unary::Sigmoid:
                                   for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
                                   break;
                                 case Unary::Exp:
                                   for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i];
                                   break;
                                 case Unary::Log: {
                                   const auto& xv = self.parents[0]->value;
                                   for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / xv[i];
                                   break;
                                 }
                               }
                             });
}

inline Tensor tanh(const Tensor& x) { return apply_unary(x, Unary::Tanh); }
inline Tensor sigmoid(const Tensor& x) { return apply_unary(x, Unary::Sigmoid); }
inline Tensor exp(const Tensor& x) { return apply_unary(x, Unary::Exp); }
inline Tensor log(const Tensor& x) { return apply_unary(x, Unary::Log); }

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {&a, &b},
                             [](const detail::Node& self) {
                               const auto& g = self.grad;
                               for (std::size_t p = 0; p < 2; ++p) {
                                 if (double* gp = detail::parent_grad(self, p)) {
                                   for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
                                 }
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {&a, &b},
                             [](const detail::Node& self) {
                               const auto& g = self.grad;
                               if (double* ga = detail::parent_grad(self, 0)) {
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (double* gb = detail::parent_grad(self, 1)) {
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {&a, &b},
                             [](const detail::Node& self) {
                               const auto& g = self.grad;
                               const auto& av = self.parents[0]->value;
                               const auto& bv = self.parents[1]->value;
                               if (double* ga = detail::parent_grad(self, 0)) {
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                               }
                               if (double* gb = detail::parent_grad(self, 1)) {
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                               }
                             });
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return detail::make_result("scale", x.shape(), std::move(out), {&x},
                             [s](const detail::Node& self) {
                               if (double* gx = detail::parent_grad(self, 0)) {
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * s;
                               }
                             });
}

// Inverted dropout: kept entries are scaled by 1/(1-rate).
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ArgumentError("dropout rate must be < 1, got " + std::to_string(rate));
  const double keep = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep;
    out[i] = x[i] * mask[i];
  }
  return detail::make_result("dropout", x.shape(), std::move(out), {&x},
                             [mask = std::move(mask)](const detail::Node& self) {
                               if (double* gx = detail::parent_grad(self, 0)) {
                                 for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {&x},
                             [](const detail::Node& self) {
                               if (double* gx = detail::parent_grad(self, 0)) {
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                               }
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(first) +
                       " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = detail::prod(first, 0, axis);
  const std::size_t tail = detail::prod(first, axis + 1, first.size());
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(axis) * tail);
  const std::size_t row = out_shape[axis] * tail;
  std::vector<double> out(outer * row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const double* src = parts[k].data().data() + o * widths[k];
      std::copy(src, src + widths[k], out.data() + o * row + off);
      off += widths[k];
    }
  }
  return detail::make_result("concat", out_shape, std::move(out), parts,
                             [outer, row, widths](const detail::Node& self) {
                               for (std::size_t k = 0, off = 0; k < widths.size(); off += widths[k], ++k) {
                                 double* gk = detail::parent_grad(self, k);
                                 if (!gk) continue;
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   const double* g = self.grad.data() + o * row + off;
                                   for (std::size_t i = 0; i < widths[k]; ++i) gk[o * widths[k] + i] += g[i];
                                 }
                               }
                             });
}

inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) { return concat({a, b}, axis); }

// Stacks equally shaped tensors along a new axis.
inline Tensor stack(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("stack: no inputs");
  const Shape& first = parts.front().shape();
  if (axis > first.size()) throw ShapeError("stack: axis out of range for " + shape_str(first));
  for (const Tensor& p : parts) {
    if (p.shape() != first) {
      throw ShapeError("stack: " + shape_str(p.shape()) + " differs from " + shape_str(first));
    }
  }
  const std::size_t outer = detail::prod(first, 0, axis);
  const std::size_t inner = detail::prod(first, axis, first.size());
  const std::size_t n = parts.size();
  Shape out_shape = first;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  std::vector<double> out(outer * n * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const double* src = parts[k].data().data() + o * inner;
      std::copy(src, src + inner, out.data() + (o * n + k) * inner);
    }
  }
  return detail::make_result("stack", out_shape, std::move(out), parts,
                             [outer, inner, n](const detail::Node& self) {
                               for (std::size_t k = 0; k < n; ++k) {
                                 double* gk = detail::parent_grad(self, k);
                                 if (!gk) continue;
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   const double* g = self.grad.data() + (o * n + k) * inner;
                                   for (std::size_t i = 0; i < inner; ++i) gk[o * inner + i] += g[i];
                                 }
                               }
                             });
}

// Slice [start, start+length) along `axis`.
inline Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw ShapeError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") invalid on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t outer = detail::prod(s, 0, axis);
  const std::size_t tail = detail::prod(s, axis + 1, s.size());
  const std::size_t src_row = s[axis] * tail, dst_row = length * tail, off = start * tail;
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<double> out(outer * dst_row);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = x.data().data() + o * src_row + off;
    std::copy(src, src + dst_row, out.data() + o * dst_row);
  }
  return detail::make_result("narrow", out_shape, std::move(out), {&x},
                             [outer, src_row, dst_row, off](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const double* g = self.grad.data() + o * dst_row;
                                 double* d = gx + o * src_row + off;
                                 for (std::size_t i = 0; i < dst_row; ++i) d[i] += g[i];
                               }
                             });
}

// Row-wise select over the leading axis: row r comes from `a` when take_a[r]
// is non-zero, otherwise from `b`.
inline Tensor select_rows(const std::vector<char>& take_a, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("select_rows", a, b);
  const std::size_t rows = a.dim(0);
  if (take_a.size() != rows) throw ShapeError("select_rows: mask length differs from row count");
  const std::size_t width = a.numel() / rows;
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = (take_a[r] ? a : b).data().data() + r * width;
    std::copy(src, src + width, out.data() + r * width);
  }
  return detail::make_result("select_rows", a.shape(), std::move(out), {&a, &b},
                             [take_a, rows, width](const detail::Node& self) {
                               double* ga = detail::parent_grad(self, 0);
                               double* gb = detail::parent_grad(self, 1);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double* dst = take_a[r] ? ga : gb;
                                 if (!dst) continue;
                                 for (std::size_t i = 0; i < width; ++i) dst[r * width + i] += self.grad[r * width + i];
                               }
                             });
}

// Looks up rows of an embedding table [V x d].
inline Tensor embedding(const Tensor& table, std::span<const int> indices) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  if (indices.empty()) throw ArgumentError("embedding: empty index list");
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * width);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab) {
      throw EncodingError("symbol index " + std::to_string(idx[r]) + " outside vocabulary of size " +
                          std::to_string(vocab));
    }
    const double* src = table.data().data() + static_cast<std::size_t>(idx[r]) * width;
    std::copy(src, src + width, out.data() + r * width);
  }
  return detail::make_result("embedding", {idx.size(), width}, std::move(out), {&table},
                             [idx, width](const detail::Node& self) {
                               double* gt = detail::parent_grad(self, 0);
                               if (!gt) return;
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                 double* d = gt + static_cast<std::size_t>(idx[r]) * width;
                                 for (std::size_t i = 0; i < width; ++i) d[i] += self.grad[r * width + i];
                               }
                             });
}

// out[b,i,j,:] = a[b,i,:] + c[b,j,:]
inline Tensor pairwise_add(const Tensor& a, const Tensor& c) {
  if (a.rank() != 3 || c.rank() != 3 || a.dim(0) != c.dim(0) || a.dim(2) != c.dim(2)) {
    throw ShapeError("pairwise_add: " + shape_str(a.shape()) + " and " + shape_str(c.shape()));
  }
  const std::size_t batch = a.dim(0), ni = a.dim(1), nj = c.dim(1), d = a.dim(2);
  std::vector<double> out(batch * ni * nj * d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < ni; ++i) {
      const double* ar = a.data().data() + (b * ni + i) * d;
      for (std::size_t j = 0; j < nj; ++j) {
        const double* cr = c.data().data() + (b * nj + j) * d;
        double* o = out.data() + ((b * ni + i) * nj + j) * d;
        for (std::size_t k = 0; k < d; ++k) o[k] = ar[k] + cr[k];
      }
    }
  }
  return detail::make_result("pairwise_add", {batch, ni, nj, d}, std::move(out), {&a, &c},
                             [batch, ni, nj, d](const detail::Node& self) {
                               double* ga = detail::parent_grad(self, 0);
                               double* gc = detail::parent_grad(self, 1);
                               for (std::size_t b = 0; b < batch; ++b) {
                                 for (std::size_t i = 0; i < ni; ++i) {
                                   for (std::size_t j = 0; j < nj; ++j) {
                                     const double* g = self.grad.data() + ((b * ni + i) * nj + j) * d;
                                     if (ga) {
                                       double* dst = ga + (b * ni + i) * d;
                                       for (std::size_t k = 0; k < d; ++k) dst[k] += g[k];
                                     }
                                     if (gc) {
                                       double* dst = gc + (b * nj + j) * d;
                                       for (std::size_t k = 0; k < d; ++k) dst[k] += g[k];
                                     }
                                   }
                                 }
                               }
                             });
}

// Picks x[..., idx[r]] for every row r of the last axis.
inline Tensor gather_last(const Tensor& x, std::span<const int> indices) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  if (indices.size() != rows) {
    throw ShapeError("gather_last: " + std::to_string(indices.size()) + " indices for " +
                     std::to_string(rows) + " rows of " + shape_str(x.shape()));
  }
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= width) {
      throw EncodingError("gather_last: index " + std::to_string(idx[r]) + " out of range " +
                          std::to_string(width));
    }
    out[r] = x[r * width + static_cast<std::size_t>(idx[r])];
  }
  return detail::make_result("gather_last", detail::drop_last(x.shape()), std::move(out), {&x},
                             [idx, width](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                 gx[r * width + static_cast<std::size_t>(idx[r])] += self.grad[r];
                               }
                             });
}

// Replaces masked columns of x [B,I,J] with -inf; keep has length B*J.
inline Tensor mask_columns(const Tensor& x, const std::vector<char>& keep) {
  if (x.rank() != 3 || keep.size() != x.dim(0) * x.dim(2)) {
    throw ShapeError("mask_columns: mask of length " + std::to_string(keep.size()) +
                     " does not fit " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), ni = x.dim(1), nj = x.dim(2);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j)
        if (!keep[b * nj + j]) out[(b * ni + i) * nj + j] = detail::kNegInf;
  return detail::make_result("mask_columns", x.shape(), std::move(out), {&x},
                             [keep, batch, ni, nj](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t b = 0; b < batch; ++b)
                                 for (std::size_t i = 0; i < ni; ++i)
                                   for (std::size_t j = 0; j < nj; ++j)
                                     if (keep[b * nj + j]) {
                                       const std::size_t f = (b * ni + i) * nj + j;
                                       gx[f] += self.grad[f];
                                     }
                             });
}

// ---------------------------------------------------------------------------
// Normalizers and reductions. All sums run left to right.

namespace detail {

inline double row_max(const double* r, std::size_t n) {
  double m = kNegInf;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, r[i]);
  return m;
}

inline double row_logsumexp(const double* r, std::size_t n) {
  const double m = row_max(r, n);
  if (m == kNegInf) throw ContractError("normalizing a row with no unmasked entries");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(r[i] - m);
  return m + std::log(s);
}

}  // namespace detail

// Softmax over the last axis, max-shifted. -inf entries receive zero mass.
inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t width = x.shape().back(), rows = x.numel() / width;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * width;
    double* o = out.data() + r * width;
    const double m = detail::row_max(in, width);
    if (m == detail::kNegInf) throw ContractError("softmax over a fully masked row");
    double s = 0.0;
    for (std::size_t i = 0; i < width; ++i) s += (o[i] = std::exp(in[i] - m));
    for (std::size_t i = 0; i < width; ++i) o[i] /= s;
  }
  return detail::make_result("softmax_rows", x.shape(), std::move(out), {&x},
                             [rows, width](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = self.value.data() + r * width;
                                 const double* g = self.grad.data() + r * width;
                                 double dot = 0.0;
                                 for (std::size_t i = 0; i < width; ++i) dot += y[i] * g[i];
                                 for (std::size_t i = 0; i < width; ++i) gx[r * width + i] += y[i] * (g[i] - dot);
                               }
                             });
}

inline Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t width = x.shape().back(), rows = x.numel() / width;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * width;
    const double lse = detail::row_logsumexp(in, width);
    for (std::size_t i = 0; i < width; ++i) out[r * width + i] = in[i] - lse;
  }
  return detail::make_result("log_softmax_rows", x.shape(), std::move(out), {&x},
                             [rows, width](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = self.value.data() + r * width;
                                 const double* g = self.grad.data() + r * width;
                                 double total = 0.0;
                                 for (std::size_t i = 0; i < width; ++i) total += g[i];
                                 for (std::size_t i = 0; i < width; ++i) {
                                   gx[r * width + i] += g[i] - std::exp(y[i]) * total;
                                 }
                               }
                             });
}

// log sum exp over the last axis; output drops that axis.
inline Tensor logsumexp_rows(const Tensor& x) {
  const std::size_t width = x.shape().back(), rows = x.numel() / width;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = detail::row_logsumexp(x.data().data() + r * width, width);
  return detail::make_result("logsumexp_rows", detail::drop_last(x.shape()), std::move(out), {&x},
                             [rows, width](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               const auto& xv = self.parents[0]->value;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t i = 0; i < width; ++i) {
                                   gx[r * width + i] += self.grad[r] * std::exp(xv[r * width + i] - self.value[r]);
                                 }
                               }
                             });
}

// log sum exp over every entry of x.
inline Tensor logsumexp(const Tensor& x) {
  if (!x.defined() || x.numel() == 0) throw ArgumentError("logsumexp of an empty input");
  return logsumexp_rows(reshape(x, {x.numel()}));
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", {1}, {s}, {&x}, [](const detail::Node& self) {
    if (double* gx = detail::parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// Sum over the last axis with constant per-entry weights: x [B,I] -> [B].
inline Tensor weighted_row_sum(const Tensor& x, std::vector<double> weights) {
  if (weights.size() != x.numel()) throw ShapeError("weighted_row_sum: weight count mismatch");
  const std::size_t width = x.shape().back(), rows = x.numel() / width;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < width; ++i) {
      const double w = weights[r * width + i];
      if (w != 0.0) out[r] += w * x[r * width + i];
    }
  }
  return detail::make_result("weighted_row_sum", detail::drop_last(x.shape()), std::move(out), {&x},
                             [weights = std::move(weights), rows, width](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t i = 0; i < width; ++i)
                                   gx[r * width + i] += self.grad[r] * weights[r * width + i];
                             });
}

// Scalar sum_k w_k * x[flat_k]; repeated indices accumulate.
inline Tensor weighted_gather_sum(const Tensor& x, std::vector<std::size_t> flat,
                                  std::vector<double> weights) {
  if (flat.size() != weights.size()) throw ShapeError("weighted_gather_sum: index/weight count mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < flat.size(); ++k) {
    if (flat[k] >= x.numel()) throw ShapeError("weighted_gather_sum: index out of range");
    s += weights[k] * x[flat[k]];
  }
  return detail::make_result("weighted_gather_sum", {1}, {s}, {&x},
                             [flat = std::move(flat), weights = std::move(weights)](const detail::Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t k = 0; k < flat.size(); ++k) gx[flat[k]] += self.grad[0] * weights[k];
                             });
}

// ---------------------------------------------------------------------------
// Gradient utilities

// Scales all gradients so their joint L2 norm is at most max_norm. Returns the
// factor applied (1 when no clipping happened).
inline double clip_global_norm(std::span<Tensor> tensors, double max_norm) {
  if (!(max_norm > 0.0)) throw ArgumentError("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const Tensor& t : tensors) {
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  const double factor = max_norm / norm;
  for (Tensor& t : tensors) {
    if (!t.has_grad()) continue;
    for (double& g : t.mutable_grad()) g *= factor;
  }
  return factor;
}

inline double global_grad_norm(std::span<const Tensor> tensors) {
  double sq = 0.0;
  for (const Tensor& t : tensors) {
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

}  // namespace xduct
