#include "fmc/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fmc {

using detail::make_result;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

void require(bool ok, const std::string &msg) {
  if (!ok)
    throw std::invalid_argument(msg);
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

void require_rank(const Tensor &x, int rank, const char *op) {
  require(x.rank() == rank, std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got " +
                                shape_str(x.shape()));
}

// Accumulates into an input's grad if that input participates in autodiff.
double *grad_of(Node &self, std::size_t i) {
  Node &in = *self.inputs[i];
  return in.requires_grad ? in.ensure_grad().data() : nullptr;
}

const double *value_of(const Node &self, std::size_t i) {
  return self.inputs[i]->value.data();
}

template <typename F, typename DF>
Tensor unary(const Tensor &x, const char *name, F f, DF df) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double &v : out)
    v = f(v);
  detail::check_finite(out, name);
  return make_result(x.shape(), std::move(out), {x}, [df](Node &self) {
    double *gx = grad_of(self, 0);
    const double *xv = value_of(self, 0);
    for (std::size_t i = 0; i < self.value.size(); ++i)
      gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

} // namespace

Tensor add(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node &self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (double *g = grad_of(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] -= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node &self) {
    if (double *g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i];
    if (double *g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] *= bv[i];
  detail::check_finite(out, "mul");
  return make_result(a.shape(), std::move(out), {a, b}, [](Node &self) {
    const double *av = value_of(self, 0);
    const double *bv = value_of(self, 1);
    if (double *g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * bv[i];
    if (double *g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor &x, double s) {
  return unary(
      x, "scale", [s](double v) { return v * s; },
      [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor &x, double s) {
  return unary(
      x, "add_scalar", [s](double v) { return v + s; },
      [](double, double) { return 1.0; });
}

Tensor square(const Tensor &x) {
  return unary(
      x, "square", [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor &x) {
  return unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor &x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor sin(const Tensor &x) {
  return unary(
      x, "sin", [](double v) { return std::sin(v); },
      [](double v, double) { return std::cos(v); });
}

Tensor gelu(const Tensor &x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, "gelu",
      [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) +
               v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Tensor silu(const Tensor &x) {
  return unary(
      x, "silu", [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor sum(const Tensor &x) {
  double s = 0.0;
  for (double v : x.data())
    s += v;
  return make_result({}, {s}, {x}, [](Node &self) {
    double *g = grad_of(self, 0);
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i)
      g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor &x) {
  require(x.numel() > 0, "mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor matmul(const Tensor &a, const Tensor &b) {
  require(a.rank() >= 2 && a.rank() == b.rank(),
          "matmul: ranks must match and be >= 2, got " + shape_str(a.shape()) +
              " x " + shape_str(b.shape()));
  const Index m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  require(k == k2, "matmul: inner dimension mismatch " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
  Shape lead(a.shape().begin(), a.shape().end() - 2);
  require(lead == Shape(b.shape().begin(), b.shape().end() - 2),
          "matmul: batch dimensions differ");
  const Index batch = numel_of(lead);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<std::size_t>(batch * m * n));
  for (Index i = 0; i < batch; ++i) {
    CMatMap A(a.data().data() + i * m * k, m, k);
    CMatMap B(b.data().data() + i * k * n, k, n);
    MatMap(out.data() + i * m * n, m, n).noalias() = A * B;
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [batch, m, k, n](Node &self) {
                       double *ga = grad_of(self, 0);
                       double *gb = grad_of(self, 1);
                       for (Index i = 0; i < batch; ++i) {
                         CMatMap G(self.grad.data() + i * m * n, m, n);
                         if (ga)
                           MatMap(ga + i * m * k, m, k).noalias() +=
                               G * CMatMap(value_of(self, 1) + i * k * n, k, n)
                                       .transpose();
                         if (gb)
                           MatMap(gb + i * k * n, k, n).noalias() +=
                               CMatMap(value_of(self, 0) + i * m * k, m, k)
                                   .transpose() *
                               G;
                       }
                     });
}

Tensor transpose_last2(const Tensor &x) {
  require(x.rank() >= 2, "transpose_last2: rank < 2");
  const Index r = x.dim(-2), c = x.dim(-1);
  const Index batch = x.numel() / std::max<Index>(r * c, 1);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> out(x.data().size());
  for (Index i = 0; i < batch; ++i)
    MatMap(out.data() + i * r * c, c, r) =
        CMatMap(x.data().data() + i * r * c, r, c).transpose();
  return make_result(std::move(shape), std::move(out), {x},
                     [batch, r, c](Node &self) {
                       double *g = grad_of(self, 0);
                       for (Index i = 0; i < batch; ++i)
                         MatMap(g + i * r * c, r, c) +=
                             CMatMap(self.grad.data() + i * r * c, c, r)
                                 .transpose();
                     });
}

Tensor reshape(const Tensor &x, Shape shape) {
  require(numel_of(shape) == x.numel(), "reshape: cannot view " +
                                            shape_str(x.shape()) + " as " +
                                            shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node &self) {
    double *g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      g[i] += self.grad[i];
  });
}

Tensor concat_channels(const Tensor &a, const Tensor &b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  const Index B = a.dim(0), ca = a.dim(1), cb = b.dim(1), L = a.dim(2);
  require(b.dim(0) == B && b.dim(2) == L, "concat_channels: shape mismatch " +
                                              shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  const Index c = ca + cb;
  std::vector<double> out(static_cast<std::size_t>(B * c * L));
  for (Index i = 0; i < B; ++i) {
    std::copy_n(a.data().data() + i * ca * L, ca * L, out.data() + i * c * L);
    std::copy_n(b.data().data() + i * cb * L, cb * L,
                out.data() + i * c * L + ca * L);
  }
  return make_result({B, c, L}, std::move(out), {a, b},
                     [B, ca, cb, c, L](Node &self) {
                       double *ga = grad_of(self, 0);
                       double *gb = grad_of(self, 1);
                       for (Index i = 0; i < B; ++i) {
                         const double *g = self.grad.data() + i * c * L;
                         if (ga)
                           for (Index j = 0; j < ca * L; ++j)
                             ga[i * ca * L + j] += g[j];
                         if (gb)
                           for (Index j = 0; j < cb * L; ++j)
                             gb[i * cb * L + j] += g[ca * L + j];
                       }
                     });
}

Tensor slice_last(const Tensor &x, Index start, Index length) {
  const Index L = x.dim(-1);
  require(start >= 0 && length >= 0 && start + length <= L,
          "slice_last: range out of bounds");
  const Index rows = x.numel() / std::max<Index>(L, 1);
  Shape shape = x.shape();
  shape.back() = length;
  std::vector<double> out(static_cast<std::size_t>(rows * length));
  for (Index r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * L + start, length,
                out.data() + r * length);
  return make_result(std::move(shape), std::move(out), {x},
                     [rows, L, start, length](Node &self) {
                       double *g = grad_of(self, 0);
                       for (Index r = 0; r < rows; ++r)
                         for (Index j = 0; j < length; ++j)
                           g[r * L + start + j] += self.grad[r * length + j];
                     });
}

Tensor pad_edge_last(const Tensor &x, Index left, Index right) {
  const Index L = x.dim(-1);
  require(L >= 1 && left >= 0 && right >= 0, "pad_edge_last: invalid padding");
  const Index rows = x.numel() / L;
  const Index Lp = L + left + right;
  Shape shape = x.shape();
  shape.back() = Lp;
  auto src = [=](Index j) { return std::clamp<Index>(j - left, 0, L - 1); };
  std::vector<double> out(static_cast<std::size_t>(rows * Lp));
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < Lp; ++j)
      out[r * Lp + j] = x.data()[r * L + src(j)];
  return make_result(std::move(shape), std::move(out), {x},
                     [rows, L, Lp, src](Node &self) {
                       double *g = grad_of(self, 0);
                       for (Index r = 0; r < rows; ++r)
                         for (Index j = 0; j < Lp; ++j)
                           g[r * L + src(j)] += self.grad[r * Lp + j];
                     });
}

namespace {

// col[(ci * K + k), lo] = x[ci, lo * stride + k - padding], zero outside.
void im2col(const double *x, Index cin, Index L, Index K, Index stride,
            Index padding, Index Lout, double *col) {
  for (Index ci = 0; ci < cin; ++ci)
    for (Index k = 0; k < K; ++k) {
      double *row = col + (ci * K + k) * Lout;
      const double *xr = x + ci * L;
      for (Index lo = 0; lo < Lout; ++lo) {
        const Index li = lo * stride + k - padding;
        row[lo] = (li >= 0 && li < L) ? xr[li] : 0.0;
      }
    }
}

void col2im(const double *col, Index cin, Index L, Index K, Index stride,
            Index padding, Index Lout, double *x) {
  for (Index ci = 0; ci < cin; ++ci)
    for (Index k = 0; k < K; ++k) {
      const double *row = col + (ci * K + k) * Lout;
      double *xr = x + ci * L;
      for (Index lo = 0; lo < Lout; ++lo) {
        const Index li = lo * stride + k - padding;
        if (li >= 0 && li < L)
          xr[li] += row[lo];
      }
    }
}

} // namespace

Tensor conv1d(const Tensor &input, const Tensor &kernel, const Tensor &bias,
              Index stride, Index padding, Index groups) {
  require_rank(input, 3, "conv1d input");
  require_rank(kernel, 3, "conv1d kernel");
  const Index B = input.dim(0), cin = input.dim(1), L = input.dim(2);
  const Index cout = kernel.dim(0), cin_g = kernel.dim(1), K = kernel.dim(2);
  require(stride >= 1 && padding >= 0 && groups >= 1,
          "conv1d: invalid stride/padding/groups");
  require(cin % groups == 0 && cout % groups == 0,
          "conv1d: channels not divisible by groups");
  require(cin_g == cin / groups, "conv1d: kernel " + shape_str(kernel.shape()) +
                                     " does not match input " +
                                     shape_str(input.shape()));
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.shape() == Shape{cout}, "conv1d: bias shape mismatch");
  const Index span = L + 2 * padding - K;
  require(span >= 0, "conv1d: input shorter than kernel");
  const Index Lout = span / stride + 1;
  const Index cout_g = cout / groups;

  std::vector<double> out(static_cast<std::size_t>(B * cout * Lout), 0.0);
  std::vector<double> col(static_cast<std::size_t>(cin_g * K * Lout));
  for (Index b = 0; b < B; ++b)
    for (Index g = 0; g < groups; ++g) {
      im2col(input.data().data() + (b * cin + g * cin_g) * L, cin_g, L, K,
             stride, padding, Lout, col.data());
      MatMap Y(out.data() + (b * cout + g * cout_g) * Lout, cout_g, Lout);
      Y.noalias() = CMatMap(kernel.data().data() + g * cout_g * cin_g * K,
                            cout_g, cin_g * K) *
                    CMatMap(col.data(), cin_g * K, Lout);
      if (has_bias)
        for (Index c = 0; c < cout_g; ++c)
          Y.row(c).array() += bias.data()[g * cout_g + c];
    }

  std::vector<Tensor> inputs{input, kernel};
  if (has_bias)
    inputs.push_back(bias);
  return make_result(
      {B, cout, Lout}, std::move(out), std::move(inputs),
      [=](Node &self) {
        double *gx = grad_of(self, 0);
        double *gw = grad_of(self, 1);
        double *gb = has_bias ? grad_of(self, 2) : nullptr;
        const double *xv = value_of(self, 0);
        const double *wv = value_of(self, 1);
        std::vector<double> colv(static_cast<std::size_t>(cin_g * K * Lout));
        std::vector<double> dcol(colv.size());
        for (Index b = 0; b < B; ++b)
          for (Index g = 0; g < groups; ++g) {
            CMatMap G(self.grad.data() + (b * cout + g * cout_g) * Lout, cout_g,
                      Lout);
            if (gb)
              for (Index c = 0; c < cout_g; ++c)
                gb[g * cout_g + c] += G.row(c).sum();
            if (gw) {
              im2col(xv + (b * cin + g * cin_g) * L, cin_g, L, K, stride,
                     padding, Lout, colv.data());
              MatMap(gw + g * cout_g * cin_g * K, cout_g, cin_g * K)
                  .noalias() +=
                  G * CMatMap(colv.data(), cin_g * K, Lout).transpose();
            }
            if (gx) {
              MatMap(dcol.data(), cin_g * K, Lout).noalias() =
                  CMatMap(wv + g * cout_g * cin_g * K, cout_g, cin_g * K)
                      .transpose() *
                  G;
              col2im(dcol.data(), cin_g, L, K, stride, padding, Lout,
                     gx + (b * cin + g * cin_g) * L);
            }
          }
      });
}

Tensor conv_transpose1d(const Tensor &input, const Tensor &kernel,
                        const Tensor &bias, Index stride, Index padding) {
  require_rank(input, 3, "conv_transpose1d input");
  require_rank(kernel, 3, "conv_transpose1d kernel");
  const Index B = input.dim(0), cin = input.dim(1), L = input.dim(2);
  require(kernel.dim(0) == cin,
          "conv_transpose1d: kernel " + shape_str(kernel.shape()) +
              " does not match input " + shape_str(input.shape()));
  require(stride >= 1 && padding >= 0,
          "conv_transpose1d: invalid stride/padding");
  const Index cout = kernel.dim(1), K = kernel.dim(2);
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.shape() == Shape{cout}, "conv_transpose1d: bias shape mismatch");
  const Index Lout = (L - 1) * stride - 2 * padding + K;
  require(Lout >= 1, "conv_transpose1d: empty output");

  // The scatter pattern of a transposed conv is the adjoint of im2col with
  // output length L and "input" length Lout.
  std::vector<double> out(static_cast<std::size_t>(B * cout * Lout), 0.0);
  std::vector<double> cols(static_cast<std::size_t>(cout * K * L));
  for (Index b = 0; b < B; ++b) {
    MatMap(cols.data(), cout * K, L).noalias() =
        CMatMap(kernel.data().data(), cin, cout * K).transpose() *
        CMatMap(input.data().data() + b * cin * L, cin, L);
    col2im(cols.data(), cout, Lout, K, stride, padding, L,
           out.data() + b * cout * Lout);
    if (has_bias)
      for (Index c = 0; c < cout; ++c)
        for (Index l = 0; l < Lout; ++l)
          out[(b * cout + c) * Lout + l] += bias.data()[c];
  }
  std::vector<Tensor> inputs{input, kernel};
  if (has_bias)
    inputs.push_back(bias);
  return make_result(
      {B, cout, Lout}, std::move(out), std::move(inputs), [=](Node &self) {
        double *gx = grad_of(self, 0);
        double *gw = grad_of(self, 1);
        double *gb = has_bias ? grad_of(self, 2) : nullptr;
        std::vector<double> dcols(static_cast<std::size_t>(cout * K * L));
        for (Index b = 0; b < B; ++b) {
          const double *G = self.grad.data() + b * cout * Lout;
          if (gb)
            for (Index c = 0; c < cout; ++c)
              for (Index l = 0; l < Lout; ++l)
                gb[c] += G[c * Lout + l];
          im2col(G, cout, Lout, K, stride, padding, L, dcols.data());
          CMatMap D(dcols.data(), cout * K, L);
          if (gx)
            MatMap(gx + b * cin * L, cin, L).noalias() +=
                CMatMap(value_of(self, 1), cin, cout * K) * D;
          if (gw)
            MatMap(gw, cin, cout * K).noalias() +=
                CMatMap(value_of(self, 0) + b * cin * L, cin, L) *
                D.transpose();
        }
      });
}

Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias) {
  require_rank(x, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const Index B = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  require(weight.dim(1) == in, "linear: weight " + shape_str(weight.shape()) +
                                   " does not match input " +
                                   shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.shape() == Shape{out_dim}, "linear: bias shape mismatch");
  std::vector<double> out(static_cast<std::size_t>(B * out_dim));
  MatMap Y(out.data(), B, out_dim);
  Y.noalias() = CMatMap(x.data().data(), B, in) *
                CMatMap(weight.data().data(), out_dim, in).transpose();
  if (has_bias)
    for (Index i = 0; i < B; ++i)
      for (Index o = 0; o < out_dim; ++o)
        Y(i, o) += bias.data()[o];
  std::vector<Tensor> inputs{x, weight};
  if (has_bias)
    inputs.push_back(bias);
  return make_result({B, out_dim}, std::move(out), std::move(inputs),
                     [=](Node &self) {
                       CMatMap G(self.grad.data(), B, out_dim);
                       if (double *gx = grad_of(self, 0))
                         MatMap(gx, B, in).noalias() +=
                             G * CMatMap(value_of(self, 1), out_dim, in);
                       if (double *gw = grad_of(self, 1))
                         MatMap(gw, out_dim, in).noalias() +=
                             G.transpose() * CMatMap(value_of(self, 0), B, in);
                       if (has_bias)
                         if (double *gb = grad_of(self, 2))
                           for (Index o = 0; o < out_dim; ++o)
                             gb[o] += G.col(o).sum();
                     });
}

Tensor add_broadcast_time(const Tensor &x, const Tensor &v) {
  require_rank(x, 3, "add_broadcast_time");
  require_rank(v, 2, "add_broadcast_time");
  const Index B = x.dim(0), C = x.dim(1), L = x.dim(2);
  require(v.dim(0) == B && v.dim(1) == C,
          "add_broadcast_time: " + shape_str(v.shape()) + " vs " +
              shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  for (Index bc = 0; bc < B * C; ++bc)
    for (Index l = 0; l < L; ++l)
      out[bc * L + l] += v.data()[bc];
  return make_result(x.shape(), std::move(out), {x, v}, [=](Node &self) {
    if (double *gx = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        gx[i] += self.grad[i];
    if (double *gv = grad_of(self, 1))
      for (Index bc = 0; bc < B * C; ++bc)
        for (Index l = 0; l < L; ++l)
          gv[bc] += self.grad[bc * L + l];
  });
}

namespace {

// Shared normalization core: normalizes sets of channels [c0, c0 + cg) over
// all L positions (group norm), or per position over all C (layer norm).
struct NormGeometry {
  Index B, C, L;
  Index groups;    // group norm: number of channel groups
  bool per_column; // layer norm: statistics per (b, l)
};

Tensor normalize(const Tensor &x, const Tensor &gain, const Tensor &bias,
                 double eps, NormGeometry geo, const char *name) {
  const auto [B, C, L, groups, per_column] = geo;
  require(gain.shape() == Shape{C} && bias.shape() == Shape{C},
          std::string(name) + ": gain/bias must have shape [C]");
  const Index cg = per_column ? C : C / groups;
  // Each statistic set is enumerated as (outer, inner) index pairs.
  const Index sets = per_column ? B * L : B * groups;
  const Index set_size = per_column ? C : cg * L;
  auto element = [=](Index s, Index j) -> Index {
    if (per_column) {
      const Index b = s / L, l = s % L;
      return (b * C + j) * L + l;
    }
    const Index b = s / groups, g = s % groups;
    return (b * C + g * cg) * L + j;
  };
  auto channel = [=](Index s, Index j) -> Index {
    return per_column ? j : (s % groups) * cg + j / L;
  };

  std::vector<double> xhat(x.data().size());
  std::vector<double> inv_std(static_cast<std::size_t>(sets));
  std::vector<double> out(x.data().size());
  const double *xv = x.data().data();
  for (Index s = 0; s < sets; ++s) {
    double m = 0.0;
    for (Index j = 0; j < set_size; ++j)
      m += xv[element(s, j)];
    m /= static_cast<double>(set_size);
    double var = 0.0;
    for (Index j = 0; j < set_size; ++j) {
      const double d = xv[element(s, j)] - m;
      var += d * d;
    }
    var /= static_cast<double>(set_size);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[s] = is;
    for (Index j = 0; j < set_size; ++j) {
      const Index e = element(s, j);
      xhat[e] = (xv[e] - m) * is;
      const Index c = channel(s, j);
      out[e] = gain.data()[c] * xhat[e] + bias.data()[c];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node &self) {
        double *gx = grad_of(self, 0);
        double *gg = grad_of(self, 1);
        double *gb = grad_of(self, 2);
        const double *gamma = value_of(self, 1);
        const double *dy = self.grad.data();
        for (Index s = 0; s < sets; ++s) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (Index j = 0; j < set_size; ++j) {
            const Index e = element(s, j);
            const Index c = channel(s, j);
            const double d = dy[e] * gamma[c];
            mean_d += d;
            mean_dx += d * xhat[e];
            if (gg)
              gg[c] += dy[e] * xhat[e];
            if (gb)
              gb[c] += dy[e];
          }
          if (!gx)
            continue;
          mean_d /= static_cast<double>(set_size);
          mean_dx /= static_cast<double>(set_size);
          for (Index j = 0; j < set_size; ++j) {
            const Index e = element(s, j);
            const double d = dy[e] * gamma[channel(s, j)];
            gx[e] += inv_std[s] * (d - mean_d - xhat[e] * mean_dx);
          }
        }
      });
}

} // namespace

Tensor layer_norm_channels(const Tensor &x, const Tensor &gain,
                           const Tensor &bias, double eps) {
  require_rank(x, 3, "layer_norm_channels");
  return normalize(x, gain, bias, eps, {x.dim(0), x.dim(1), x.dim(2), 1, true},
                   "layer_norm_channels");
}

Tensor group_norm(const Tensor &x, Index groups, const Tensor &gain,
                  const Tensor &bias, double eps) {
  require_rank(x, 3, "group_norm");
  require(groups >= 1 && x.dim(1) % groups == 0,
          "group_norm: channels " + std::to_string(x.dim(1)) +
              " not divisible by " + std::to_string(groups) + " groups");
  return normalize(x, gain, bias, eps,
                   {x.dim(0), x.dim(1), x.dim(2), groups, false}, "group_norm");
}

Tensor grn(const Tensor &x, const Tensor &gain, const Tensor &bias,
           double eps) {
  require_rank(x, 3, "grn");
  const Index B = x.dim(0), C = x.dim(1), L = x.dim(2);
  require(gain.shape() == Shape{C} && bias.shape() == Shape{C},
          "grn: gain/bias must have shape [C]");
  const double *xv = x.data().data();
  std::vector<double> norms(static_cast<std::size_t>(B * C));
  std::vector<double> scales(static_cast<std::size_t>(B * C));
  std::vector<double> denom(static_cast<std::size_t>(B));
  std::vector<double> out(x.data().size());
  for (Index b = 0; b < B; ++b) {
    double total = 0.0;
    for (Index c = 0; c < C; ++c) {
      double s = 0.0;
      for (Index l = 0; l < L; ++l) {
        const double v = xv[(b * C + c) * L + l];
        s += v * v;
      }
      norms[b * C + c] = std::sqrt(s);
      total += norms[b * C + c];
    }
    denom[b] = total / static_cast<double>(C) + eps;
    for (Index c = 0; c < C; ++c) {
      const double n = norms[b * C + c] / denom[b];
      scales[b * C + c] = n;
      const double g = gain.data()[c], be = bias.data()[c];
      for (Index l = 0; l < L; ++l) {
        const Index e = (b * C + c) * L + l;
        out[e] = g * xv[e] * n + be + xv[e];
      }
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [=, norms = std::move(norms), scales = std::move(scales),
       denom = std::move(denom)](Node &self) {
        double *gx = grad_of(self, 0);
        double *gg = grad_of(self, 1);
        double *gb = grad_of(self, 2);
        const double *xv = value_of(self, 0);
        const double *gamma = value_of(self, 1);
        const double *dy = self.grad.data();
        std::vector<double> dn(static_cast<std::size_t>(C));
        for (Index b = 0; b < B; ++b) {
          double coupling = 0.0;
          for (Index c = 0; c < C; ++c) {
            double acc_n = 0.0, acc_g = 0.0, acc_b = 0.0;
            const double n = scales[b * C + c];
            for (Index l = 0; l < L; ++l) {
              const Index e = (b * C + c) * L + l;
              acc_n += dy[e] * xv[e];
              acc_g += dy[e] * xv[e] * n;
              acc_b += dy[e];
              if (gx)
                gx[e] += dy[e] * (gamma[c] * n + 1.0);
            }
            if (gg)
              gg[c] += acc_g;
            if (gb)
              gb[c] += acc_b;
            dn[c] = acc_n * gamma[c];
            coupling += dn[c] * norms[b * C + c];
          }
          if (!gx)
            continue;
          const double d = denom[b];
          coupling /= d * d * static_cast<double>(C);
          for (Index c = 0; c < C; ++c) {
            const double g = norms[b * C + c];
            if (g <= 0.0)
              continue;
            const double dnorm = dn[c] / d - coupling;
            for (Index l = 0; l < L; ++l) {
              const Index e = (b * C + c) * L + l;
              gx[e] += dnorm * xv[e] / g;
            }
          }
        }
      });
}

Tensor snakebeta(const Tensor &x, const Tensor &log_alpha,
                 const Tensor &log_beta) {
  require_rank(x, 3, "snakebeta");
  const Index B = x.dim(0), C = x.dim(1), L = x.dim(2);
  require(log_alpha.shape() == Shape{C} && log_beta.shape() == Shape{C},
          "snakebeta: parameters must have shape [C]");
  std::vector<double> out(x.data().size());
  const double *xv = x.data().data();
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      const double a = std::exp(log_alpha.data()[c]);
      const double inv_b = 1.0 / (std::exp(log_beta.data()[c]) + 1e-9);
      for (Index l = 0; l < L; ++l) {
        const Index e = (b * C + c) * L + l;
        const double s = std::sin(a * xv[e]);
        out[e] = xv[e] + inv_b * s * s;
      }
    }
  return make_result(x.shape(), std::move(out), {x, log_alpha, log_beta},
                     [=](Node &self) {
                       double *gx = grad_of(self, 0);
                       double *ga = grad_of(self, 1);
                       double *gbeta = grad_of(self, 2);
                       const double *xv = value_of(self, 0);
                       for (Index c = 0; c < C; ++c) {
                         const double a = std::exp(value_of(self, 1)[c]);
                         const double beta = std::exp(value_of(self, 2)[c]);
                         const double inv_b = 1.0 / (beta + 1e-9);
                         for (Index b = 0; b < B; ++b)
                           for (Index l = 0; l < L; ++l) {
                             const Index e = (b * C + c) * L + l;
                             const double ax = a * xv[e];
                             const double s = std::sin(ax);
                             const double s2 = std::sin(2.0 * ax);
                             const double dy = self.grad[e];
                             if (gx)
                               gx[e] += dy * (1.0 + a * s2 * inv_b);
                             if (ga)
                               ga[c] += dy * s2 * ax * inv_b;
                             if (gbeta)
                               gbeta[c] -= dy * s * s * beta * inv_b * inv_b;
                           }
                       }
                     });
}

Tensor softmax_last(const Tensor &x) {
  const Index n = x.dim(-1);
  const Index rows = x.numel() / std::max<Index>(n, 1);
  std::vector<double> out(x.data().size());
  for (Index r = 0; r < rows; ++r) {
    const double *xr = x.data().data() + r * n;
    double *yr = out.data() + r * n;
    const double m = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (Index j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - m);
      z += yr[j];
    }
    for (Index j = 0; j < n; ++j)
      yr[j] /= z;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, n](Node &self) {
    double *g = grad_of(self, 0);
    for (Index r = 0; r < rows; ++r) {
      const double *y = self.value.data() + r * n;
      const double *dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (Index j = 0; j < n; ++j)
        dot += dy[j] * y[j];
      for (Index j = 0; j < n; ++j)
        g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor dropout(const Tensor &x, double p, std::mt19937_64 &rng) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  if (p == 0.0)
    return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(x.data().size());
  for (double &m : mask)
    m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor reduce_loss(LossKind kind, const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "reduce_loss");
  Tensor diff = sub(a, b);
  return kind == LossKind::L1 ? mean(abs(diff)) : mean(square(diff));
}

Tensor l1_loss(const Tensor &a, const Tensor &b) {
  return reduce_loss(LossKind::L1, a, b);
}

Tensor mse_loss(const Tensor &a, const Tensor &b) {
  return reduce_loss(LossKind::MSE, a, b);
}

Tensor gather_rows(const Tensor &table, const std::vector<Index> &rows) {
  require_rank(table, 2, "gather_rows");
  const Index K = table.dim(0), C = table.dim(1);
  const Index N = static_cast<Index>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(N * C));
  for (Index n = 0; n < N; ++n) {
    const Index k = rows[static_cast<std::size_t>(n)];
    require(k >= 0 && k < K, "gather_rows: index out of range");
    std::copy_n(table.data().data() + k * C, C, out.data() + n * C);
  }
  return make_result({N, C}, std::move(out), {table},
                     [rows, C](Node &self) {
                       double *g = grad_of(self, 0);
                       for (std::size_t n = 0; n < rows.size(); ++n)
                         for (Index c = 0; c < C; ++c)
                           g[rows[n] * C + c] +=
                               self.grad[static_cast<Index>(n) * C + c];
                     });
}

Tensor straight_through(const Tensor &z, const Tensor &zq) {
  require_same_shape(z, zq, "straight_through");
  std::vector<double> out(zq.data().begin(), zq.data().end());
  return make_result(z.shape(), std::move(out), {z}, [](Node &self) {
    double *g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      g[i] += self.grad[i];
  });
}

} // namespace fmc
