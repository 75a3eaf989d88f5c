#include "dtmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dtmamba/errors.hpp"

namespace dtmamba::ops {
namespace {

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, Var x, std::size_t rank) {
  if (x.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

void require_single(const char* op, Var s) {
  if (s.value().size() != 1) {
    throw DimensionError(std::string(op) + ": expected one element, got " +
                         shape_str(s.shape()));
  }
}

template <typename F>
Var unary(Var x, F&& forward, double (*derivative)(double)) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = forward(xv[i]);
  return x.tape().record(std::move(out), {x},
                         [x, derivative](GradTape& t, const Tensor& g) {
    Tensor* gx = t.sink(x);
    if (!gx) return;
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      (*gx)[i] += g[i] * derivative(xv[i]);
    }
  });
}

}  // namespace

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax of an empty vector");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner extents " + shape_str(av.shape()) +
                         " x " + shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return a.tape().record(std::move(out), {a, b},
                         [a, b, m, k, n](GradTape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (Tensor* ga = t.sink(a)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = g.data() + i * n;
          const double* brow = bv.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          (*ga)[i * k + p] += s;
        }
      }
    }
    if (Tensor* gb = t.sink(b)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          double* dst = gb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += aip * grow[j];
        }
      }
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a, b},
                         [a, b](GradTape& t, const Tensor& g) {
    for (Var v : {a, b}) {
      if (Tensor* gv = t.sink(v)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gv)[i] += g[i];
      }
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record(std::move(out), {a, b},
                         [a, b](GradTape& t, const Tensor& g) {
    if (Tensor* ga = t.sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = t.sink(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b},
                         [a, b](GradTape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (Tensor* ga = t.sink(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = t.sink(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return x.tape().record(std::move(out), {x},
                         [x, factor](GradTape& t, const Tensor& g) {
    if (Tensor* gx = t.sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += factor * g[i];
    }
  });
}

Var scale_by(Var x, Var s) {
  require_single("scale_by", s);
  const double sv = s.value()[0];
  Tensor out = x.value();
  for (double& v : out.values()) v *= sv;
  return x.tape().record(std::move(out), {x, s},
                         [x, s](GradTape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const double sv = s.value()[0];
    if (Tensor* gx = t.sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += sv * g[i];
    }
    if (Tensor* gs = t.sink(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      (*gs)[0] += acc;
    }
  });
}

Var add_scalar(Var x, Var s) {
  require_single("add_scalar", s);
  const double sv = s.value()[0];
  Tensor out = x.value();
  for (double& v : out.values()) v += sv;
  return x.tape().record(std::move(out), {x, s},
                         [x, s](GradTape& t, const Tensor& g) {
    if (Tensor* gx = t.sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
    if (Tensor* gs = t.sink(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i];
      (*gs)[0] += acc;
    }
  });
}

Var softplus(Var x) {
  return unary(
      x, [](double v) { return softplus(v); },
      [](double v) { return sigmoid(v); });
}

Var sigmoid(Var x) {
  return unary(
      x, [](double v) { return sigmoid(v); },
      [](double v) {
        const double s = sigmoid(v);
        return s * (1.0 - s);
      });
}

Var silu(Var x) {
  return unary(
      x, [](double v) { return v * sigmoid(v); },
      [](double v) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Var softmax(Var logits) {
  const Tensor& lv = logits.value();
  Tensor out(lv.shape(), softmax(lv.values()));
  const std::size_t n = lv.size();
  return logits.tape().record(std::move(out), {logits},
                           [logits, n](GradTape& t, const Tensor& g) {
    Tensor* gl = t.sink(logits);
    if (!gl) return;
    const std::vector<double> p = softmax(logits.value().values());
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += g[i] * p[i];
    for (std::size_t i = 0; i < n; ++i) (*gl)[i] += p[i] * (g[i] - dot);
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record(Tensor::scalar(s), {x},
                         [x](GradTape& t, const Tensor& g) {
    if (Tensor* gx = t.sink(x)) {
      for (double& v : gx->values()) v += g[0];
    }
  });
}

Var select(Var x, std::size_t index) {
  if (index >= x.value().size()) {
    throw DimensionError("select: index " + std::to_string(index) +
                         " out of range for " + shape_str(x.shape()));
  }
  return x.tape().record(Tensor::scalar(x.value()[index]), {x},
                         [x, index](GradTape& t, const Tensor& g) {
    if (Tensor* gx = t.sink(x)) (*gx)[index] += g[0];
  });
}

Var cumsum(Var x) {
  Tensor out = x.value();
  for (std::size_t i = 1; i < out.size(); ++i) out[i] += out[i - 1];
  return x.tape().record(std::move(out), {x},
                         [x](GradTape& t, const Tensor& g) {
    Tensor* gx = t.sink(x);
    if (!gx) return;
    double acc = 0.0;
    for (std::size_t i = g.size(); i-- > 0;) {
      acc += g[i];
      (*gx)[i] += acc;
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x},
                         [x](GradTape& t, const Tensor& g) {
    if (Tensor* gx = t.sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  require_rank("slice_rows", x, 2);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (begin + count > rows) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") of " +
                         shape_str(xv.shape()));
  }
  Tensor out(Shape{count, cols});
  std::copy_n(xv.data() + begin * cols, count * cols, out.data());
  return x.tape().record(std::move(out), {x},
                         [x, begin, cols](GradTape& t, const Tensor& g) {
    if (Tensor* gx = t.sink(x)) {
      double* dst = gx->data() + begin * cols;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

Var add_row_bias(Var x, Var bias) {
  require_rank("add_row_bias", x, 2);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (bias.value().size() != rows) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) +
                         " for " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[r];
  }
  return x.tape().record(std::move(out), {x, bias},
                         [x, bias, rows, cols](GradTape& t, const Tensor& g) {
    if (Tensor* gx = t.sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
    if (Tensor* gb = t.sink(bias)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c];
        (*gb)[r] += acc;
      }
    }
  });
}

Var mul_rows(Var x, Var factors) {
  require_rank("mul_rows", x, 2);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (factors.value().size() != rows) {
    throw DimensionError("mul_rows: factors " + shape_str(factors.shape()) +
                         " for " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  const Tensor& fv = factors.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= fv[r];
  }
  return x.tape().record(std::move(out), {x, factors},
                         [x, factors, rows, cols](GradTape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& fv = factors.value();
    if (Tensor* gx = t.sink(x)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          (*gx)[r * cols + c] += g[r * cols + c] * fv[r];
        }
      }
    }
    if (Tensor* gf = t.sink(factors)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          acc += g[r * cols + c] * xv[r * cols + c];
        }
        (*gf)[r] += acc;
      }
    }
  });
}

Var gather_columns(Var x, std::span<const std::size_t> columns) {
  require_rank("gather_columns", x, 2);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.dim(0), cols = xv.dim(1), n = columns.size();
  for (std::size_t c : columns) {
    if (c >= cols) throw DimensionError("gather_columns: column out of range");
  }
  Tensor out(Shape{rows, n});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = xv[r * cols + columns[j]];
    }
  }
  std::vector<std::size_t> idx(columns.begin(), columns.end());
  return x.tape().record(std::move(out), {x},
                         [x, idx = std::move(idx), rows, cols](GradTape& t,
                                                               const Tensor& g) {
    Tensor* gx = t.sink(x);
    if (!gx) return;
    const std::size_t n = idx.size();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) {
        (*gx)[r * cols + idx[j]] += g[r * n + j];
      }
    }
  });
}

Var mask_columns(Var x, std::span<const std::uint8_t> keep) {
  require_rank("mask_columns", x, 2);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (keep.size() != cols) {
    throw DimensionError("mask_columns: mask of length " +
                         std::to_string(keep.size()) + " for " +
                         shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (!keep[c]) out[r * cols + c] = 0.0;
    }
  }
  std::vector<std::uint8_t> mask(keep.begin(), keep.end());
  return x.tape().record(std::move(out), {x},
                         [x, mask = std::move(mask), rows, cols](
                             GradTape& t, const Tensor& g) {
    Tensor* gx = t.sink(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (mask[c]) (*gx)[r * cols + c] += g[r * cols + c];
      }
    }
  });
}

Var rms_norm_columns(Var x, double eps) {
  require_rank("rms_norm_columns", x, 2);
  const Tensor& xv = x.value();
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  std::vector<double> inv(cols);
  for (std::size_t c = 0; c < cols; ++c) {
    double ms = 0.0;
    for (std::size_t r = 0; r < rows; ++r) ms += xv[r * cols + c] * xv[r * cols + c];
    inv[c] = 1.0 / std::sqrt(ms / static_cast<double>(rows) + eps);
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= inv[c];
  }
  return x.tape().record(std::move(out), {x},
                         [x, inv = std::move(inv), rows, cols](GradTape& t,
                                                               const Tensor& g) {
    Tensor* gx = t.sink(x);
    if (!gx) return;
    const Tensor& xv = x.value();
    const double m = static_cast<double>(rows);
    for (std::size_t c = 0; c < cols; ++c) {
      double dot = 0.0;
      for (std::size_t r = 0; r < rows; ++r) dot += g[r * cols + c] * xv[r * cols + c];
      const double k = dot * inv[c] * inv[c] * inv[c] / m;
      for (std::size_t r = 0; r < rows; ++r) {
        (*gx)[r * cols + c] += g[r * cols + c] * inv[c] - xv[r * cols + c] * k;
      }
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t d, T, H, W, kt, kh, kw;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& k) {
  if (x.rank() != 4 || k.rank() != 4) {
    throw DimensionError("conv3d_depthwise: need [d,T,H,W] input and "
                         "[d,kt,kh,kw] kernel, got " +
                         shape_str(x.shape()) + " and " + shape_str(k.shape()));
  }
  if (x.dim(0) != k.dim(0)) {
    throw DimensionError("conv3d_depthwise: channel count " +
                         std::to_string(x.dim(0)) + " vs kernel " +
                         std::to_string(k.dim(0)));
  }
  for (std::size_t a = 1; a < 4; ++a) {
    if (k.dim(a) % 2 == 0) {
      throw ConfigError("conv3d_depthwise: even kernel extent in " +
                        shape_str(k.shape()));
    }
  }
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(1), k.dim(2), k.dim(3)};
}

// Calls f(out_index, in_index, kernel_index) for every in-bounds tap.
template <typename F>
void for_each_tap(const ConvGeometry& gm, F&& f) {
  const long pt = static_cast<long>(gm.kt / 2);
  const long ph = static_cast<long>(gm.kh / 2);
  const long pw = static_cast<long>(gm.kw / 2);
  const long T = static_cast<long>(gm.T), H = static_cast<long>(gm.H),
             W = static_cast<long>(gm.W);
  const std::size_t vol = gm.T * gm.H * gm.W;
  const std::size_t kvol = gm.kt * gm.kh * gm.kw;
  for (std::size_t c = 0; c < gm.d; ++c) {
    const std::size_t xbase = c * vol;
    const std::size_t kbase = c * kvol;
    for (long t = 0; t < T; ++t) {
      for (long h = 0; h < H; ++h) {
        for (long w = 0; w < W; ++w) {
          const std::size_t o = xbase + static_cast<std::size_t>((t * H + h) * W + w);
          for (long a = 0; a < static_cast<long>(gm.kt); ++a) {
            const long ti = t + a - pt;
            if (ti < 0 || ti >= T) continue;
            for (long b = 0; b < static_cast<long>(gm.kh); ++b) {
              const long hi = h + b - ph;
              if (hi < 0 || hi >= H) continue;
              for (long e = 0; e < static_cast<long>(gm.kw); ++e) {
                const long wi = w + e - pw;
                if (wi < 0 || wi >= W) continue;
                f(o, xbase + static_cast<std::size_t>((ti * H + hi) * W + wi),
                  kbase + static_cast<std::size_t>(
                              (a * static_cast<long>(gm.kh) + b) *
                                  static_cast<long>(gm.kw) +
                              e));
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d_depthwise(const Tensor& x, const Tensor& kernel) {
  const ConvGeometry gm = conv_geometry(x, kernel);
  Tensor out(x.shape());
  for_each_tap(gm, [&](std::size_t o, std::size_t i, std::size_t k) {
    out[o] += kernel[k] * x[i];
  });
  return out;
}

Var conv3d_depthwise(Var x, Var kernel) {
  const ConvGeometry gm = conv_geometry(x.value(), kernel.value());
  Tensor out = conv3d_depthwise(x.value(), kernel.value());
  return x.tape().record(std::move(out), {x, kernel},
                         [x, kernel, gm](GradTape& t, const Tensor& g) {
    Tensor* gx = t.sink(x);
    Tensor* gk = t.sink(kernel);
    const Tensor& xv = x.value();
    const Tensor& kv = kernel.value();
    for_each_tap(gm, [&](std::size_t o, std::size_t i, std::size_t k) {
      if (gx) (*gx)[i] += kv[k] * g[o];
      if (gk) (*gk)[k] += xv[i] * g[o];
    });
  });
}

namespace {

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer, extent, inner;
  Shape reduced;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("reduction axis " + std::to_string(axis) +
                         " out of range for " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1, {}};
  for (std::size_t a = 0; a < shape.size(); ++a) {
    if (a < axis) s.outer *= shape[a];
    if (a > axis) s.inner *= shape[a];
    if (a != axis) s.reduced.push_back(shape[a]);
  }
  return s;
}

Var weighted_axis_mean(Var x, std::size_t axis, std::vector<std::uint8_t> mask) {
  const Tensor& xv = x.value();
  const AxisSplit s = split_axis(xv.shape(), axis);
  if (mask.size() != s.extent) {
    throw DimensionError("masked_mean: mask of length " +
                         std::to_string(mask.size()) + " for axis extent " +
                         std::to_string(s.extent));
  }
  const auto count = static_cast<std::size_t>(
      std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  if (count == 0) throw EmptyReductionError("masked_mean over an all-false mask");
  const double inv = 1.0 / static_cast<double>(count);
  Tensor out(s.reduced);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      if (!mask[e]) continue;
      const double* src = xv.data() + (o * s.extent + e) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  for (double& v : out.values()) v *= inv;
  return x.tape().record(std::move(out), {x},
                         [x, s, mask = std::move(mask), inv](GradTape& t,
                                                             const Tensor& g) {
    Tensor* gx = t.sink(x);
    if (!gx) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        if (!mask[e]) continue;
        double* dst = gx->data() + (o * s.extent + e) * s.inner;
        const double* src = g.data() + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i] * inv;
      }
    }
  });
}

}  // namespace

Var mean_axis(Var x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  return weighted_axis_mean(x, axis, std::vector<std::uint8_t>(s.extent, 1));
}

Var masked_mean(Var x, std::size_t axis, std::span<const std::uint8_t> mask) {
  return weighted_axis_mean(x, axis,
                            std::vector<std::uint8_t>(mask.begin(), mask.end()));
}

}  // namespace dtmamba::ops
