#include "nptt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

NPTT_NAMESPACE_BEGIN

namespace {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

void require_finite(const Tensor& t, const char* op) {
  for (Real v : t.values()) {
    if (!std::isfinite(v)) throw TensorError(std::string(op) + ": non-finite input");
  }
}

// Shared plumbing for elementwise binary ops with scalar broadcast.
// `da`/`db` map (a, b, out_grad) to the partial derivative w.r.t. a / b.
template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const bool a_scalar = is_scalar(a) && !is_scalar(b);
  const bool b_scalar = is_scalar(b) && !is_scalar(a);
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw TensorError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto av = a.values();
  auto bv = b.values();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  return record_op(out_shape, std::move(out), {a, b},
                   [a, b, a_scalar, b_scalar, n, da, db](std::span<const Real> g) {
                     auto av = a.values();
                     auto bv = b.values();
                     auto ga = grad_sink(a);
                     auto gb = grad_sink(b);
                     for (std::size_t i = 0; i < n; ++i) {
                       const Real x = av[a_scalar ? 0 : i];
                       const Real y = bv[b_scalar ? 0 : i];
                       if (!ga.empty()) ga[a_scalar ? 0 : i] += da(x, y, g[i]);
                       if (!gb.empty()) gb[b_scalar ? 0 : i] += db(x, y, g[i]);
                     }
                   });
}

// Elementwise unary op whose derivative is expressed via input and output.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  auto av = a.values();
  std::vector<Real> out(av.size());
  std::transform(av.begin(), av.end(), out.begin(), fwd);
  auto result_values = out;
  return record_op(a.shape(), std::move(out), {a},
                   [a, y = std::move(result_values), deriv](std::span<const Real> g) {
                     auto ga = grad_sink(a);
                     auto av = a.values();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(av[i], y[i]);
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real, Real g) { return g; },
      [](Real, Real, Real g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real, Real g) { return g; },
      [](Real, Real, Real g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y, Real g) { return g * y; },
      [](Real x, Real, Real g) { return g * x; });
}

Tensor scale(const Tensor& a, Real factor) {
  return unary(
      a, [factor](Real x) { return x * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& a, Real offset) {
  return unary(
      a, [offset](Real x) { return x + offset; }, [](Real, Real) { return Real(1); });
}

Tensor neg(const Tensor& a) { return scale(a, Real(-1)); }

Tensor exp(const Tensor& a) {
  return unary(
      a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& a) {
  for (Real v : a.values()) {
    if (!(v > Real(0))) throw TensorError("log: input must be strictly positive");
  }
  return unary(
      a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](Real x) { return x > Real(0) ? x : Real(0); },
      [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](Real x) {
        if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor sum(const Tensor& a) {
  Real total = 0;
  for (Real v : a.values()) total += v;
  return record_op({}, {total}, {a}, [a](std::span<const Real> g) {
    for (auto& x : grad_sink(a)) x += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw TensorError("mean of an empty tensor");
  return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw TensorError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<Real> out(a.values().begin(), a.values().end());
  return record_op(std::move(shape), std::move(out), {a}, [a](std::span<const Real> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<Real> out(static_cast<std::size_t>(m * n));
  MatrixMap(out.data(), m, n).noalias() =
      ConstMatrixMap(a.values().data(), m, k) * ConstMatrixMap(b.values().data(), k, n);
  return record_op({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const Real> g) {
    ConstMatrixMap gm(g.data(), m, n);
    if (auto ga = grad_sink(a); !ga.empty()) {
      MatrixMap(ga.data(), m, k).noalias() += gm * ConstMatrixMap(b.values().data(), k, n).transpose();
    }
    if (auto gb = grad_sink(b); !gb.empty()) {
      MatrixMap(gb.data(), k, n).noalias() += ConstMatrixMap(a.values().data(), m, k).transpose() * gm;
    }
  });
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() == 0 || logits.shape().back() == 0) throw TensorError("softmax: last extent must be >= 1");
  require_finite(logits, "softmax");
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  auto x = logits.values();
  std::vector<Real> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = x.data() + r * k;
    Real* o = out.data() + r * k;
    const Real top = *std::max_element(in, in + k);
    Real total = 0;
    for (std::size_t j = 0; j < k; ++j) total += (o[j] = std::exp(in[j] - top));
    for (std::size_t j = 0; j < k; ++j) o[j] /= total;
  }
  auto y = out;
  return record_op(logits.shape(), std::move(out), {logits},
                   [logits, y = std::move(y), k, rows](std::span<const Real> g) {
                     auto gl = grad_sink(logits);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const std::size_t base = r * k;
                       Real dot = 0;
                       for (std::size_t j = 0; j < k; ++j) dot += g[base + j] * y[base + j];
                       for (std::size_t j = 0; j < k; ++j) gl[base + j] += y[base + j] * (g[base + j] - dot);
                     }
                   });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> index) {
  if (a.rank() != 2 || index.size() != a.dim(0)) {
    throw TensorError("pick: expected [N x K] input with N indices, got " + shape_str(a.shape()));
  }
  const std::size_t k = a.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<Real> out(idx.size());
  for (std::size_t n = 0; n < idx.size(); ++n) {
    if (idx[n] >= k) throw TensorError("pick: index " + std::to_string(idx[n]) + " out of range");
    out[n] = a.values()[n * k + idx[n]];
  }
  return record_op({idx.size()}, std::move(out), {a}, [a, idx, k](std::span<const Real> g) {
    auto ga = grad_sink(a);
    for (std::size_t n = 0; n < idx.size(); ++n) ga[n * k + idx[n]] += g[n];
  });
}

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
  if (stride == 0) throw TensorError("conv2d: stride must be >= 1");
  const std::size_t padded = input + 2 * padding;
  if (padded < kernel) return 0;
  return (padded - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch_size() const { return channels * kh * kw; }
  std::size_t out_area() const { return out_h * out_w; }
};

// cols is [C*kH*kW x outH*outW], row-major.
void im2col(const Real* image, const ConvGeometry& g, Real* cols) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Real* row = cols + ((c * g.kh + ki) * g.kw + kj) * area;
        for (std::size_t oi = 0; oi < g.out_h; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          for (std::size_t oj = 0; oj < g.out_w; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.padding);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(g.height) &&
                                jj < static_cast<long>(g.width);
            row[oi * g.out_w + oj] =
                inside ? image[(c * g.height + static_cast<std::size_t>(ii)) * g.width + static_cast<std::size_t>(jj)]
                       : Real(0);
          }
        }
      }
    }
  }
}

void col2im_add(const Real* cols, const ConvGeometry& g, Real* image) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Real* row = cols + ((c * g.kh + ki) * g.kw + kj) * area;
        for (std::size_t oi = 0; oi < g.out_h; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          if (ii < 0 || ii >= static_cast<long>(g.height)) continue;
          for (std::size_t oj = 0; oj < g.out_w; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.padding);
            if (jj < 0 || jj >= static_cast<long>(g.width)) continue;
            image[(c * g.height + static_cast<std::size_t>(ii)) * g.width + static_cast<std::size_t>(jj)] +=
                row[oi * g.out_w + oj];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw TensorError("conv2d: expected rank-4 input and kernel, got " + shape_str(input.shape()) + " and " +
                      shape_str(kernel.shape()));
  }
  if (input.dim(1) != kernel.dim(1)) {
    throw TensorError("conv2d: input has " + std::to_string(input.dim(1)) + " channels but kernel expects " +
                      std::to_string(kernel.dim(1)));
  }
  const std::size_t batch = input.dim(0);
  const std::size_t filters = kernel.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != filters)) {
    throw TensorError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                      std::to_string(filters) + " filters");
  }
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
  g.out_h = conv_output_extent(g.height, g.kh, stride, padding);
  g.out_w = conv_output_extent(g.width, g.kw, stride, padding);
  if (g.out_h == 0 || g.out_w == 0 || batch == 0 || filters == 0) {
    throw TensorError("conv2d: zero-sized output for input " + shape_str(input.shape()) + " and kernel " +
                      shape_str(kernel.shape()));
  }

  const auto patch = static_cast<Eigen::Index>(g.patch_size());
  const auto area = static_cast<Eigen::Index>(g.out_area());
  const auto nf = static_cast<Eigen::Index>(filters);
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = filters * g.out_area();

  std::vector<Real> cols(batch * g.patch_size() * g.out_area());
  std::vector<Real> out(batch * out_stride);
  ConstMatrixMap w(kernel.values().data(), nf, patch);
  for (std::size_t n = 0; n < batch; ++n) {
    Real* c = cols.data() + n * g.patch_size() * g.out_area();
    im2col(input.values().data() + n * in_stride, g, c);
    MatrixMap o(out.data() + n * out_stride, nf, area);
    o.noalias() = w * ConstMatrixMap(c, patch, area);
    if (bias.defined()) {
      for (Eigen::Index f = 0; f < nf; ++f) o.row(f).array() += bias.values()[static_cast<std::size_t>(f)];
    }
  }

  Shape out_shape{batch, filters, g.out_h, g.out_w};
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return record_op(std::move(out_shape), std::move(out), inputs,
                   [input, kernel, bias, g, cols = std::move(cols), batch, patch, area, nf, in_stride,
                    out_stride](std::span<const Real> grad_out) {
                     auto gi = grad_sink(input);
                     auto gk = grad_sink(kernel);
                     auto gb = bias.defined() ? grad_sink(bias) : std::span<Real>{};
                     ConstMatrixMap w(kernel.values().data(), nf, patch);
                     RowMatrix dcols(patch, area);
                     for (std::size_t n = 0; n < batch; ++n) {
                       ConstMatrixMap go(grad_out.data() + n * out_stride, nf, area);
                       ConstMatrixMap c(cols.data() + n * g.patch_size() * g.out_area(), patch, area);
                       if (!gk.empty()) MatrixMap(gk.data(), nf, patch).noalias() += go * c.transpose();
                       if (!gb.empty()) {
                         // Plain loop: Eigen reductions peel by address, which breaks run-to-run equality.
                         const Real* row = grad_out.data() + n * out_stride;
                         for (std::size_t f = 0; f < static_cast<std::size_t>(nf); ++f, row += area) {
                           gb[f] += std::accumulate(row, row + area, Real(0));
                         }
                       }
                       if (!gi.empty()) {
                         dcols.noalias() = w.transpose() * go;
                         col2im_add(dcols.data(), g, gi.data() + n * in_stride);
                       }
                     }
                   });
}

NPTT_NAMESPACE_END
