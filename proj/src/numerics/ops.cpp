#include "usage/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "usage/error.hpp"
#include "usage/numerics/kernels.hpp"

namespace usage::ad {
namespace {

const kernels::KernelTable& K() { return kernels::active(); }

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const char* op, Var a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
  }
}

Tensor transpose2d(const Tensor& a) {
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  }
  return out;
}

// c = a * b for rank-2 tensors.
Tensor gemm(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c(Shape{m, n});
  K().gemm(m, n, k, a.data(), b.data(), c.data(), false);
  return c;
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

std::uint64_t mask_token(const Tensor& a, double threshold) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < a.size(); ++i) {
    h ^= static_cast<std::uint64_t>(a[i] > threshold) + (i << 1);
    h *= 1099511628211ULL;
  }
  return h;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  K().axpy(out.size(), 1.0, b.value().data(), out.data());
  return a.tape().push("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  K().axpy(out.size(), -1.0, b.value().data(), out.data());
  return a.tape().push("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) K().axpy(g.size(), -1.0, g.data(), t.grad_buffer(b).data());
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  K().mul(out.size(), a.value().data(), b.value().data(), out.data());
  return a.tape().push("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    Tensor tmp(g.shape());
    if (t.requires_grad(a)) {
      K().mul(g.size(), g.data(), b.value().data(), tmp.data());
      t.accumulate(a, tmp);
    }
    if (t.requires_grad(b)) {
      K().mul(g.size(), g.data(), a.value().data(), tmp.data());
      t.accumulate(b, tmp);
    }
  });
}

Var div(Var a, Var b) {
  require_same_shape("div", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return a.tape().push("div", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = map(a.value(), [factor](double x) { return x * factor; });
  return a.tape().push("scale", std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    K().axpy(g.size(), factor, g.data(), t.grad_buffer(a).data());
  });
}

Var add_scalar(Var a, double offset) {
  Tensor out = map(a.value(), [offset](double x) { return x + offset; });
  return a.tape().push("add_scalar", std::move(out), {a},
                       [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

Var mul_const(Var a, const Tensor& factor) {
  if (a.shape() != factor.shape()) {
    throw ShapeError("mul_const: shape " + shape_string(a.shape()) + " vs " +
                     shape_string(factor.shape()));
  }
  Tensor out(a.shape());
  K().mul(out.size(), a.value().data(), factor.data(), out.data());
  return a.tape().push("mul_const", std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    Tensor tmp(g.shape());
    K().mul(g.size(), g.data(), factor.data(), tmp.data());
    t.accumulate(a, tmp);
  });
}

Var add_rows(Var x, Var bias) {
  require_rank("add_rows", x, 2);
  require_rank("add_rows", bias, 1);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (bias.shape()[0] != d) throw ShapeError("add_rows: bias length mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i) K().axpy(d, 1.0, bias.value().data(), out.data() + i * d);
  return x.tape().push("add_rows", std::move(out), {x, bias}, [x, bias, n, d](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.requires_grad(bias)) {
      Tensor& gb = t.grad_buffer(bias);
      for (std::size_t i = 0; i < n; ++i) K().axpy(d, 1.0, g.data() + i * d, gb.data());
    }
  });
}

Var mul_rows(Var x, Var gain) {
  require_rank("mul_rows", x, 2);
  require_rank("mul_rows", gain, 1);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (gain.shape()[0] != d) throw ShapeError("mul_rows: gain length mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    K().mul(d, x.value().data() + i * d, gain.value().data(), out.data() + i * d);
  }
  return x.tape().push("mul_rows", std::move(out), {x, gain}, [x, gain, n, d](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * gain.value()[j];
      }
    }
    if (t.requires_grad(gain)) {
      Tensor& gg = t.grad_buffer(gain);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * x.value()[i * d + j];
      }
    }
  });
}

Var mul_cols(Var x, Var gate) {
  require_rank("mul_cols", x, 2);
  require_rank("mul_cols", gate, 1);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (gate.shape()[0] != n) throw ShapeError("mul_cols: gate length mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.value()[i * d + j] * gate.value()[i];
  }
  return x.tape().push("mul_cols", std::move(out), {x, gate}, [x, gate, n, d](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < n; ++i) K().axpy(d, gate.value()[i], g.data() + i * d, gx.data() + i * d);
    }
    if (t.requires_grad(gate)) {
      Tensor& gg = t.grad_buffer(gate);
      for (std::size_t i = 0; i < n; ++i) gg[i] += K().dot(d, g.data() + i * d, x.value().data() + i * d);
    }
  });
}

Var broadcast_rows(Var v, std::size_t n) {
  require_rank("broadcast_rows", v, 1);
  const std::size_t d = v.shape()[0];
  Tensor out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(v.value().data(), d, out.data() + i * d);
  return v.tape().push("broadcast_rows", std::move(out), {v}, [v, n, d](Tape& t, const Tensor& g) {
    Tensor& gv = t.grad_buffer(v);
    for (std::size_t i = 0; i < n; ++i) K().axpy(d, 1.0, g.data() + i * d, gv.data());
  });
}

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out = gemm(a.value(), b.value());
  return a.tape().push("matmul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (t.requires_grad(a)) {
      const Tensor bt = transpose2d(b.value());
      K().gemm(m, k, n, g.data(), bt.data(), t.grad_buffer(a).data(), true);
    }
    if (t.requires_grad(b)) {
      const Tensor at = transpose2d(a.value());
      K().gemm(k, n, m, at.data(), g.data(), t.grad_buffer(b).data(), true);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  if (a.shape()[1] != b.shape()[1]) {
    throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  Tensor out = gemm(a.value(), transpose2d(b.value()));
  return a.tape().push("matmul_nt", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    if (t.requires_grad(a)) {
      K().gemm(m, k, n, g.data(), b.value().data(), t.grad_buffer(a).data(), true);
    }
    if (t.requires_grad(b)) {
      const Tensor gt = transpose2d(g);
      K().gemm(n, k, m, gt.data(), a.value().data(), t.grad_buffer(b).data(), true);
    }
  });
}

Var transpose(Var a) {
  require_rank("transpose", a, 2);
  return a.tape().push("transpose", transpose2d(a.value()), {a},
                       [a](Tape& t, const Tensor& g) { t.accumulate(a, transpose2d(g)); });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().push("reshape", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    K().axpy(g.size(), 1.0, g.data(), t.grad_buffer(a).data());
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  require_rank("slice_cols", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (count == 0 || start + count > d) throw ShapeError("slice_cols: range out of bounds");
  Tensor out(Shape{n, count});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.value().data() + i * d + start, count, out.data() + i * count);
  }
  return x.tape().push("slice_cols", std::move(out), {x}, [x, n, d, start, count](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) {
      K().axpy(count, 1.0, g.data() + i * count, gx.data() + i * d + start);
    }
  });
}

Var concat_cols(Var a, Var b) {
  require_rank("concat_cols", a, 2);
  require_rank("concat_cols", b, 2);
  const std::size_t n = a.shape()[0], da = a.shape()[1], db = b.shape()[1];
  if (b.shape()[0] != n) throw ShapeError("concat_cols: row count mismatch");
  Tensor out(Shape{n, da + db});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * da, da, out.data() + i * (da + db));
    std::copy_n(b.value().data() + i * db, db, out.data() + i * (da + db) + da);
  }
  return a.tape().push("concat_cols", std::move(out), {a, b}, [a, b, n, da, db](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < n; ++i) K().axpy(da, 1.0, g.data() + i * (da + db), ga.data() + i * da);
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i) {
        K().axpy(db, 1.0, g.data() + i * (da + db) + da, gb.data() + i * db);
      }
    }
  });
}

Var conv2d(Var x, Var kernel, Var bias, std::size_t stride, std::size_t padding) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", kernel, 4);
  require_rank("conv2d", bias, 1);
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t o = kernel.shape()[0], ks = kernel.shape()[2];
  if (kernel.shape()[1] != c || kernel.shape()[3] != ks || bias.shape()[0] != o || stride == 0) {
    throw ShapeError("conv2d: input " + shape_string(x.shape()) + " kernel " +
                     shape_string(kernel.shape()) + " bias " + shape_string(bias.shape()));
  }
  if (h + 2 * padding < ks || w + 2 * padding < ks) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t ho = (h + 2 * padding - ks) / stride + 1;
  const std::size_t wo = (w + 2 * padding - ks) / stride + 1;
  const std::size_t rows = c * ks * ks, pix = ho * wo;

  // im2col: cols[(ci, ky, kx), (oy, ox)]
  Tensor cols(Shape{rows, pix}, 0.0);
  const Tensor& xv = x.value();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < ks; ++ky) {
      for (std::size_t kx = 0; kx < ks; ++kx) {
        double* row = cols.data() + ((ci * ks + ky) * ks + kx) * pix;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[oy * wo + ox] = xv[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  Tensor out(Shape{o, ho, wo});
  K().gemm(o, pix, rows, kernel.value().data(), cols.data(), out.data(), false);
  for (std::size_t oc = 0; oc < o; ++oc) {
    const double b = bias.value()[oc];
    for (std::size_t p = 0; p < pix; ++p) out[oc * pix + p] += b;
  }

  return x.tape().push(
      "conv2d", std::move(out), {x, kernel, bias},
      [x, kernel, bias, cols = std::move(cols), c, h, w, o, ks, ho, wo, stride, padding](Tape& t, const Tensor& g) {
        const std::size_t rows = c * ks * ks, pix = ho * wo;
        if (t.requires_grad(bias)) {
          Tensor& gb = t.grad_buffer(bias);
          for (std::size_t oc = 0; oc < o; ++oc) gb[oc] += K().sum(pix, g.data() + oc * pix);
        }
        if (t.requires_grad(kernel)) {
          const Tensor colst = transpose2d(cols);
          K().gemm(o, rows, pix, g.data(), colst.data(), t.grad_buffer(kernel).data(), true);
        }
        if (t.requires_grad(x)) {
          const Tensor kt = transpose2d(kernel.value().reshaped(Shape{o, rows}));
          Tensor gcols(Shape{rows, pix});
          K().gemm(rows, pix, o, kt.data(), g.data(), gcols.data(), false);
          Tensor& gx = t.grad_buffer(x);
          for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t ky = 0; ky < ks; ++ky) {
              for (std::size_t kx = 0; kx < ks; ++kx) {
                const double* row = gcols.data() + ((ci * ks + ky) * ks + kx) * pix;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    gx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

Var exp(Var a) {
  Tensor out = map(a.value(), [](double x) { return std::exp(x); });
  Tensor y = out;
  return a.tape().push("exp", std::move(out), {a}, [a, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var log(Var a) {
  Tensor out = map(a.value(), [](double x) { return std::log(x); });
  return a.tape().push("log", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a.value()[i];
  });
}

Var log_floored(Var a) {
  if (a.tape().tracking_branches()) a.tape().note_branch(mask_token(a.value(), kPowFloor));
  Tensor out = map(a.value(), [](double x) { return std::log(std::max(x, kPowFloor)); });
  return a.tape().push("log_floored", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a.value()[i];
      if (x > kPowFloor) ga[i] += g[i] / x;
    }
  });
}

Var pow(Var a, double exponent) {
  if (a.tape().tracking_branches()) a.tape().note_branch(mask_token(a.value(), kPowFloor));
  Tensor out = map(a.value(), [exponent](double x) { return std::pow(std::max(x, kPowFloor), exponent); });
  return a.tape().push("pow", std::move(out), {a}, [a, exponent](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a.value()[i];
      if (x > kPowFloor) ga[i] += g[i] * exponent * std::pow(x, exponent - 1.0);
    }
  });
}

Var sigmoid(Var a) {
  Tensor out = map(a.value(), stable_sigmoid);
  return a.tape().push("sigmoid", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = stable_sigmoid(a.value()[i]);
      ga[i] += g[i] * s * (1.0 - s);
    }
  });
}

Var relu(Var a) {
  if (a.tape().tracking_branches()) a.tape().note_branch(mask_token(a.value(), 0.0));
  Tensor out = map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; });
  return a.tape().push("relu", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a.value()[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  Tensor out = map(a.value(), [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  return a.tape().push("gelu", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a.value()[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    }
  });
}

Var softmax_rows(Var x) {
  const std::size_t r = x.value().rank();
  if (r != 1 && r != 2) throw ShapeError("softmax_rows: expected rank 1 or 2, got " + shape_string(x.shape()));
  const std::size_t n = r == 1 ? 1 : x.shape()[0];
  const std::size_t d = x.shape()[r - 1];
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double* in = xv.data() + i * d;
    double* o = out.data() + i * d;
    const double m = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - m);
      z += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  Tensor y = out;
  return x.tape().push("softmax", std::move(out), {x}, [x, y = std::move(y), n, d](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) {
      const double* yi = y.data() + i * d;
      const double* gi = g.data() + i * d;
      const double inner = K().dot(d, gi, yi);
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += yi[j] * (gi[j] - inner);
    }
  });
}

Var layer_norm_rows(Var x, Var gain, Var offset, double eps) {
  require_rank("layer_norm", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (gain.shape() != Shape{d} || offset.shape() != Shape{d}) throw ShapeError("layer_norm: parameter length mismatch");
  Tensor xhat(x.shape());
  Tensor inv_std(Shape{n});
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * is;
      out[i * d + j] = xhat[i * d + j] * gain.value()[j] + offset.value()[j];
    }
  }
  return x.tape().push(
      "layer_norm", std::move(out), {x, gain, offset},
      [x, gain, offset, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](Tape& t, const Tensor& g) {
        if (t.requires_grad(gain)) {
          Tensor& gg = t.grad_buffer(gain);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
          }
        }
        if (t.requires_grad(offset)) {
          Tensor& go = t.grad_buffer(offset);
          for (std::size_t i = 0; i < n; ++i) K().axpy(d, 1.0, g.data() + i * d, go.data());
        }
        if (t.requires_grad(x)) {
          Tensor& gx = t.grad_buffer(x);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[i * d + j] * gain.value()[j];
              mean_g += gh;
              mean_gx += gh * xhat[i * d + j];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[i * d + j] * gain.value()[j];
              gx[i * d + j] += inv_std[i] * (gh - mean_g - xhat[i * d + j] * mean_gx);
            }
          }
        }
      });
}

Var sum(Var a) {
  const double s = K().sum(a.size(), a.value().data());
  return a.tape().push("sum", Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    const double gv = g[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gv;
  });
}

Var mean(Var a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  const double s = K().sum(a.size(), a.value().data()) * inv;
  return a.tape().push("mean", Tensor::scalar(s), {a}, [a, inv](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    const double gv = g[0] * inv;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gv;
  });
}

Var max(Var a) {
  const auto values = a.value().values();
  const std::size_t arg = static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
  if (a.tape().tracking_branches()) a.tape().note_branch(arg);
  return a.tape().push("max", Tensor::scalar(values[arg]), {a}, [a, arg](Tape& t, const Tensor& g) {
    t.grad_buffer(a)[arg] += g[0];
  });
}

Var sum_over_rows(Var x) {
  require_rank("sum_over_rows", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  Tensor out(Shape{d}, 0.0);
  for (std::size_t i = 0; i < n; ++i) K().axpy(d, 1.0, x.value().data() + i * d, out.data());
  return x.tape().push("sum_over_rows", std::move(out), {x}, [x, n, d](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) K().axpy(d, 1.0, g.data(), gx.data() + i * d);
  });
}

Var mean_over_rows(Var x) {
  require_rank("mean_over_rows", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  const double inv = 1.0 / static_cast<double>(n);
  Tensor out(Shape{d}, 0.0);
  for (std::size_t i = 0; i < n; ++i) K().axpy(d, 1.0, x.value().data() + i * d, out.data());
  for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
  return x.tape().push("mean_over_rows", std::move(out), {x}, [x, n, d, inv](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) K().axpy(d, inv, g.data(), gx.data() + i * d);
  });
}

Var mean_over_cols(Var x) {
  require_rank("mean_over_cols", x, 2);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  const double inv = 1.0 / static_cast<double>(d);
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) out[i] = K().sum(d, x.value().data() + i * d) * inv;
  return x.tape().push("mean_over_cols", std::move(out), {x}, [x, n, d, inv](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i] * inv;
    }
  });
}

Var bce_with_logits(Var scores, const Tensor& labels) {
  require_rank("bce_with_logits", scores, 1);
  if (labels.shape() != scores.shape()) {
    throw ShapeError("bce_with_logits: labels " + shape_string(labels.shape()) + " vs scores " +
                     shape_string(scores.shape()));
  }
  for (double y : labels.values()) {
    if (y != 0.0 && y != 1.0) throw ValueError("bce_with_logits: labels must be 0 or 1");
  }
  const std::size_t c = scores.size();
  double total = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const double s = scores.value()[i];
    total += labels[i] == 1.0 ? softplus(-s) : softplus(s);
  }
  const double inv = 1.0 / static_cast<double>(c);
  return scores.tape().push("bce_with_logits", Tensor::scalar(total * inv), {scores},
                            [scores, labels, c, inv](Tape& t, const Tensor& g) {
                              Tensor& gs = t.grad_buffer(scores);
                              for (std::size_t i = 0; i < c; ++i) {
                                gs[i] += g[0] * inv * (stable_sigmoid(scores.value()[i]) - labels[i]);
                              }
                            });
}

}  // namespace usage::ad
