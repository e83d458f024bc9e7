#include "i3net/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace i3net::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// Strides of `shape` laid against `out` (right-aligned); broadcast axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    std::size_t in_axis = shape.size() - 1 - i;
    std::size_t out_axis = out.size() - 1 - i;
    strides[out_axis] = shape[in_axis] == 1 ? 0 : stride;
    stride *= shape[in_axis];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

// Calls fn(out_index, a_offset, b_offset) for every element of the broadcast result.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        Fn&& fn) {
  std::size_t n = numel(out);
  if (out.empty()) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t oa = 0, ob = 0;
  const std::size_t last = out.size() - 1;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, oa, ob);
    // increment the multi-index
    std::size_t axis = last;
    while (true) {
      ++idx[axis];
      oa += sa[axis];
      ob += sb[axis];
      if (idx[axis] < out[axis] || axis == 0) break;
      oa -= sa[axis] * out[axis];
      ob -= sb[axis] * out[axis];
      idx[axis] = 0;
      --axis;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

Tensor binary(const Tensor& a, const Tensor& b, BinOp kind, const char* name) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), name);
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  const auto& da = a.node()->data;
  const auto& db = b.node()->data;
  std::vector<double> result(numel(out));
  const bool same = a.shape() == b.shape();

  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinOp::kAdd: return x + y;
      case BinOp::kSub: return x - y;
      case BinOp::kMul: return x * y;
      case BinOp::kDiv: return x / y;
    }
    return 0.0;
  };
  if (same) {
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = apply(da[i], db[i]);
  } else {
    for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      result[o] = apply(da[ia], db[ib]);
    });
  }

  return make_result(out, std::move(result), {a, b}, name, [out, sa, sb, kind, same](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const auto& g = self.grad;
    const auto& xa = pa.data;
    const auto& xb = pb.data;
    double* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
    double* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
    auto step = [&](std::size_t o, std::size_t ia, std::size_t ib) {
      const double go = g[o];
      switch (kind) {
        case BinOp::kAdd:
          if (ga) ga[ia] += go;
          if (gb) gb[ib] += go;
          break;
        case BinOp::kSub:
          if (ga) ga[ia] += go;
          if (gb) gb[ib] -= go;
          break;
        case BinOp::kMul:
          if (ga) ga[ia] += go * xb[ib];
          if (gb) gb[ib] += go * xa[ia];
          break;
        case BinOp::kDiv:
          if (ga) ga[ia] += go / xb[ib];
          if (gb) gb[ib] -= go * xa[ia] / (xb[ib] * xb[ib]);
          break;
      }
    };
    if (same) {
      for (std::size_t i = 0; i < g.size(); ++i) step(i, i, i);
    } else {
      for_each_broadcast(out, sa, sb, step);
    }
  });
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx from input and output.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto& dx = x.node()->data;
  std::vector<double> y(dx.size());
  for (std::size_t i = 0; i < dx.size(); ++i) y[i] = fwd(dx[i]);
  return make_result(x.shape(), std::move(y), {x}, name, [deriv](Node& self) {
    Node& p = parent(self, 0);
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::pair<std::size_t, std::size_t> outer_inner(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, inner};
}

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(x.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kDiv, "div"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus", [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor smooth_l1(const Tensor& x) {
  return unary(
      x, "smooth_l1",
      [](double v) {
        const double a = std::abs(v);
        return a < 1.0 ? 0.5 * v * v : a - 0.5;
      },
      [](double v, double) {
        if (std::abs(v) < 1.0) return v;
        return v > 0 ? 1.0 : -1.0;
      });
}

Tensor gradient_reversal(const Tensor& x, double beta) {
  if (beta < 0) throw std::invalid_argument("gradient_reversal: beta must be non-negative");
  return unary(x, "gradient_reversal", [](double v) { return v; }, [beta](double, double) { return -beta; });
}

Tensor softmax(const Tensor& x, double temperature) {
  if (x.rank() == 0) throw ShapeError("softmax: scalar input");
  if (!(temperature > 0)) throw std::invalid_argument("softmax: temperature must be positive");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  const auto& dx = x.node()->data;
  std::vector<double> y(dx.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = dx.data() + r * cols;
    double* out = y.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = std::exp((in[c] - mx) / temperature);
      total += out[c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[c] /= total;
  }
  return make_result(x.shape(), std::move(y), {x}, "softmax", [rows, cols, temperature](Node& self) {
    auto& gp = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* s = self.data.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[c] * s[c];
      for (std::size_t c = 0; c < cols; ++c) gp[r * cols + c] += s[c] * (g[c] - dot) / temperature;
    }
  });
}

Tensor log_softmax(const Tensor& x, double temperature) {
  if (x.rank() == 0) throw ShapeError("log_softmax: scalar input");
  if (!(temperature > 0)) throw std::invalid_argument("log_softmax: temperature must be positive");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  const auto& dx = x.node()->data;
  std::vector<double> y(dx.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = dx.data() + r * cols;
    double* out = y.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp((in[c] - mx) / temperature);
    const double lse = std::log(total);
    for (std::size_t c = 0; c < cols; ++c) out[c] = (in[c] - mx) / temperature - lse;
  }
  return make_result(x.shape(), std::move(y), {x}, "log_softmax", [rows, cols, temperature](Node& self) {
    auto& gp = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* ls = self.data.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double gsum = 0;
      for (std::size_t c = 0; c < cols; ++c) gsum += g[c];
      for (std::size_t c = 0; c < cols; ++c) gp[r * cols + c] += (g[c] - std::exp(ls[c]) * gsum) / temperature;
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MapMat(out.data(), m, n).noalias() = ConstMapMat(a.node()->data.data(), m, k) * ConstMapMat(b.node()->data.data(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    ConstMapMat g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MapMat(pa.ensure_grad().data(), m, k).noalias() += g * ConstMapMat(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MapMat(pb.ensure_grad().data(), k, n).noalias() += ConstMapMat(pa.data.data(), m, k).transpose() * g;
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeometry& g, double* col) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* img) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions options) { return conv2d(x, weight, Tensor(), options); }

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions options) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (options.stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = options.stride;
  g.pad = options.padding;
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(g.cout) + " output channels");
  }

  const std::size_t p = g.positions();
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * p;
  std::vector<double> out(g.n * out_stride);
  std::vector<double> col(g.patch() * p);
  ConstMapMat wmat(weight.node()->data.data(), g.cout, g.patch());
  for (std::size_t i = 0; i < g.n; ++i) {
    im2col(x.node()->data.data() + i * in_stride, g, col.data());
    MapMat o(out.data() + i * out_stride, g.cout, p);
    o.noalias() = wmat * ConstMapMat(col.data(), g.patch(), p);
    if (has_bias) {
      for (std::size_t c = 0; c < g.cout; ++c) o.row(c).array() += bias.node()->data[c];
    }
  }

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result({g.n, g.cout, g.ho, g.wo}, std::move(out), inputs, "conv2d", [g, has_bias](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    const std::size_t p = g.positions();
    const std::size_t in_stride = g.cin * g.h * g.w;
    const std::size_t out_stride = g.cout * p;
    std::vector<double> col(g.patch() * p);
    ConstMapMat wmat(pw.data.data(), g.cout, g.patch());
    for (std::size_t i = 0; i < g.n; ++i) {
      ConstMapMat go(self.grad.data() + i * out_stride, g.cout, p);
      if (pw.requires_grad) {
        im2col(px.data.data() + i * in_stride, g, col.data());
        MapMat(pw.ensure_grad().data(), g.cout, g.patch()).noalias() +=
            go * ConstMapMat(col.data(), g.patch(), p).transpose();
      }
      if (px.requires_grad) {
        MapMat(col.data(), g.patch(), p).noalias() = wmat.transpose() * go;
        col2im(col.data(), g, px.ensure_grad().data() + i * in_stride);
      }
      if (has_bias) {
        Node& pb = parent(self, 2);
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t c = 0; c < g.cout; ++c) gb[c] += go.row(c).sum();
        }
      }
    }
  });
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("max_pool2d: expected N x C x H x W, got " + shape_str(x.shape()));
  if (kernel == 0 || stride == 0 || x.dim(2) < kernel || x.dim(3) < kernel) {
    throw ShapeError("max_pool2d: window " + std::to_string(kernel) + " does not fit input " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  const auto& dx = x.node()->data;
  std::vector<double> out(planes * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = pl * h * w + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t at = pl * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (dx[at] > dx[best]) best = at;
          }
        }
        const std::size_t o = (pl * ho + oy) * wo + ox;
        out[o] = dx[best];
        argmax[o] = best;
      }
    }
  }
  return make_result({x.dim(0), x.dim(1), ho, wo}, std::move(out), {x}, "max_pool2d",
                     [argmax = std::move(argmax)](Node& self) {
                       auto& gp = parent(self, 0).ensure_grad();
                       for (std::size_t o = 0; o < argmax.size(); ++o) gp[argmax[o]] += self.grad[o];
                     });
}

Tensor sum(const Tensor& x) {
  const auto& dx = x.node()->data;
  const double total = std::accumulate(dx.begin(), dx.end(), 0.0);
  return make_result({}, {total}, {x}, "sum", [](Node& self) {
    auto& gp = parent(self, 0).ensure_grad();
    const double g = self.grad[0];
    for (auto& v : gp) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "sum");
  const auto [outer, inner] = outer_inner(x.shape(), axis);
  const std::size_t len = x.dim(axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  const auto& dx = x.node()->data;
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t a = 0; a < len; ++a) {
      const double* src = dx.data() + (o * len + a) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return make_result(out_shape, std::move(out), {x}, "sum_axis", [outer, inner, len](Node& self) {
    auto& gp = parent(self, 0).ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t a = 0; a < len; ++a) {
        double* dst = gp.data() + (o * len + a) * inner;
        const double* src = self.grad.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "mean");
  if (x.dim(axis) == 0) throw ShapeError("mean: empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor l2_norm(const Tensor& x) {
  const auto& dx = x.node()->data;
  double ss = 0;
  for (double v : dx) ss += v * v;
  const double norm = std::sqrt(ss);
  return make_result({}, {norm}, {x}, "l2_norm", [](Node& self) {
    Node& p = parent(self, 0);
    const double n = self.data[0];
    if (n == 0.0) return;
    auto& gp = p.ensure_grad();
    const double g = self.grad[0] / n;
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * p.data[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_result(std::move(shape), x.node()->data, {x}, "reshape", [](Node& self) {
    auto& gp = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) throw ShapeError("permute: axes rank mismatch for shape " + shape_str(in));
  std::vector<bool> seen(in.size(), false);
  for (auto a : axes) {
    if (a >= in.size() || seen[a]) throw ShapeError("permute: invalid axes for shape " + shape_str(in));
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(in.size(), 1);
  for (std::size_t i = in.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(in.size());
  std::vector<std::size_t> strides(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    out[i] = in[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  // source offset of every output element
  std::vector<std::size_t> src(x.size());
  std::vector<std::size_t> zero(out.size(), 0);
  for_each_broadcast(out, strides, zero, [&](std::size_t o, std::size_t ia, std::size_t) { src[o] = ia; });
  std::vector<double> data(src.size());
  for (std::size_t o = 0; o < src.size(); ++o) data[o] = x.node()->data[src[o]];
  return make_result(out, std::move(data), {x}, "permute", [src = std::move(src)](Node& self) {
    auto& gp = parent(self, 0).ensure_grad();
    for (std::size_t o = 0; o < src.size(); ++o) gp[src[o]] += self.grad[o];
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis(x, axis, "slice");
  if (begin > end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of shape " + shape_str(x.shape()));
  }
  const auto [outer, inner] = outer_inner(x.shape(), axis);
  const std::size_t len = x.dim(axis), width = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = width;
  std::vector<double> out(outer * width * inner);
  const auto& dx = x.node()->data;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(dx.data() + (o * len + begin) * inner, width * inner, out.data() + o * width * inner);
  }
  return make_result(out_shape, std::move(out), {x}, "slice", [outer, inner, len, begin, width](Node& self) {
    auto& gp = parent(self, 0).ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      double* dst = gp.data() + (o * len + begin) * inner;
      const double* src = self.grad.data() + o * width * inner;
      for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  check_axis(parts[0], axis, "concat");
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) {
        throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(out_shape));
      }
    }
    widths.push_back(s[axis]);
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto [outer, inner] = outer_inner(out_shape, axis);
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k].node()->data;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * widths[k] * inner, widths[k] * inner, out.data() + (o * total + offset) * inner);
    }
    offset += widths[k];
  }
  return make_result(out_shape, std::move(out), parts, "concat", [outer = outer, inner = inner, total, widths](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& p = parent(self, k);
      if (p.requires_grad) {
        auto& gp = p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + (o * total + offset) * inner;
          double* dst = gp.data() + o * widths[k] * inner;
          for (std::size_t i = 0; i < widths[k] * inner; ++i) dst[i] += src[i];
        }
      }
      offset += widths[k];
    }
  });
}

Tensor pick(const Tensor& x, const std::vector<std::size_t>& indices) {
  if (x.rank() != 2 || indices.size() != x.dim(0)) {
    throw ShapeError("pick: expected M x C input with M indices, got " + shape_str(x.shape()) + " and " +
                     std::to_string(indices.size()) + " indices");
  }
  const std::size_t cols = x.dim(1);
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= cols) throw ShapeError("pick: index " + std::to_string(indices[i]) + " out of range");
    out[i] = x.node()->data[i * cols + indices[i]];
  }
  return make_result({indices.size()}, std::move(out), {x}, "pick", [indices, cols](Node& self) {
    auto& gp = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < indices.size(); ++i) gp[i * cols + indices[i]] += self.grad[i];
  });
}

}  // namespace i3net::ad
