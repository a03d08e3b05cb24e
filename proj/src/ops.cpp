#include "dssl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace dssl::ops {

namespace {

// Dense kernels. Every output element accumulates over the inner index in
// ascending order, so results do not depend on vector width or alignment.

template <std::size_t W>
void gemm_block(const double* arow, const double* b, double* crow, std::size_t k, std::size_t n, bool accumulate) {
  double acc[W] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double s = arow[p];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < W; ++j) acc[j] += s * brow[j];
  }
  for (std::size_t j = 0; j < W; ++j) crow[j] = accumulate ? crow[j] + acc[j] : acc[j];
}

// c[m, n] (+)= a[m, k] * b[k, n]
void gemm_kernel(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) gemm_block<16>(arow, b + j, crow + j, k, n, accumulate);
    if (j + 8 <= n) {
      gemm_block<8>(arow, b + j, crow + j, k, n, accumulate);
      j += 8;
    }
    if (j + 4 <= n) {
      gemm_block<4>(arow, b + j, crow + j, k, n, accumulate);
      j += 4;
    }
    for (; j < n; ++j) gemm_block<1>(arow, b + j, crow + j, k, n, accumulate);
  }
}

std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_kernel(a, b, c, m, k, n, false);
}

// ga[m, k] += g[m, n] * b[k, n]^T
void gemm_grad_lhs(const double* g, const double* b, double* ga, std::size_t m, std::size_t k, std::size_t n) {
  const auto bt = transposed(b, k, n);
  gemm_kernel(g, bt.data(), ga, m, n, k, true);
}

// gb[k, n] += a[m, k]^T * g[m, n]
void gemm_grad_rhs(const double* a, const double* g, double* gb, std::size_t m, std::size_t k, std::size_t n) {
  const auto at = transposed(a, m, k);
  gemm_kernel(at.data(), g, gb, k, m, n, true);
}

TensorNode& in(TensorNode& self, std::size_t i) { return *self.inputs[i]; }

bool wants_grad(TensorNode& self, std::size_t i) { return self.inputs[i]->requires_grad; }

void require_finite(std::initializer_list<const Tensor*> ts, const char* op) {
  for (const auto* t : ts) check_finite(*t, op);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// Right operand must equal the left shape or be a trailing suffix of it.
void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
                     " are not broadcast-compatible");
  }
}

template <class Fwd, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da da, Db db) {
  const Tensor& lhs = a;
  const Tensor& rhs = b;
  check_broadcast(lhs, rhs, name);
  require_finite({&lhs, &rhs}, name);
  const std::size_t n = lhs.numel();
  const std::size_t m = rhs.numel();
  const auto x = lhs.data();
  const auto y = rhs.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(x[i], y[i % m]);
  return make_result(lhs.shape(), std::move(out), {lhs, rhs}, [n, m, da, db](TensorNode& self) {
    const auto& xa = in(self, 0).data;
    const auto& xb = in(self, 1).data;
    if (wants_grad(self, 0)) {
      auto& g = in(self, 0).grad;
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * da(xa[i], xb[i % m], self.data[i]);
    }
    if (wants_grad(self, 1)) {
      auto& g = in(self, 1).grad;
      for (std::size_t i = 0; i < n; ++i) g[i % m] += self.grad[i] * db(xa[i], xb[i % m], self.data[i]);
    }
  });
}

template <class Fwd, class D>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, D d) {
  require_finite({&a}, name);
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(out), {a}, [d](TensorNode& self) {
    if (!wants_grad(self, 0)) return;
    auto& src = in(self, 0);
    for (std::size_t i = 0; i < self.data.size(); ++i) src.grad[i] += self.grad[i] * d(src.data[i], self.data[i]);
  });
}

std::size_t rows_of(const Tensor& t) { return t.numel() / t.shape().back(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  require_finite({&a, &b}, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(m * n);
  gemm(pa, pb, out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
    const double* g = self.grad.data();
    auto& na = in(self, 0);
    auto& nb = in(self, 1);
    if (na.requires_grad) gemm_grad_lhs(g, nb.data.data(), na.grad.data(), m, k, n);
    if (nb.requires_grad) gemm_grad_rhs(na.data.data(), g, nb.grad.data(), m, k, n);
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_result({c, r}, std::move(out), {a}, [r, c](TensorNode& self) {
    if (!wants_grad(self, 0)) return;
    auto& g = in(self, 0).grad;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw NumericError("div: division by zero");
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

// Ties route the gradient to the left operand.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return std::min(x, y); },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "maximum", [](double x, double y) { return std::max(x, y); },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary(
      a, "clamp_min", [lo](double x) { return std::max(x, lo); }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor logit(const Tensor& a, double eps) {
  return unary(
      a, "logit",
      [eps](double x) {
        const double c = std::clamp(x, eps, 1.0 - eps);
        return std::log(c / (1.0 - c));
      },
      [eps](double x, double) {
        if (x < eps || x > 1.0 - eps) return 0.0;
        return 1.0 / (x * (1.0 - x));
      });
}

Tensor softmax(const Tensor& a) {
  require_finite({&a}, "softmax");
  const std::size_t c = a.shape().back();
  const std::size_t r = rows_of(a);
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double* yi = out.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      z += yi[j];
    }
    for (std::size_t j = 0; j < c; ++j) yi[j] /= z;
  }
  return make_result(a.shape(), std::move(out), {a}, [r, c](TensorNode& self) {
    if (!wants_grad(self, 0)) return;
    auto& g = in(self, 0).grad;
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.data.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != c || beta.dim(0) != c) {
    throw ShapeError("layernorm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  require_finite({&x, &gamma, &beta}, "layernorm");
  const std::size_t r = rows_of(x);
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> out(xd.size());
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = xd.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xi[j] - mu) * is;
      out[i * c + j] = xhat[i * c + j] * gd[j] + bd[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& self) {
                       auto& nx = in(self, 0);
                       auto& ng = in(self, 1);
                       auto& nb = in(self, 2);
                       const double* gy = self.grad.data();
                       for (std::size_t i = 0; i < r; ++i) {
                         const double* gyi = gy + i * c;
                         const double* xh = xhat.data() + i * c;
                         if (ng.requires_grad)
                           for (std::size_t j = 0; j < c; ++j) ng.grad[j] += gyi[j] * xh[j];
                         if (nb.requires_grad)
                           for (std::size_t j = 0; j < c; ++j) nb.grad[j] += gyi[j];
                         if (nx.requires_grad) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < c; ++j) {
                             const double gxh = gyi[j] * ng.data[j];
                             s1 += gxh;
                             s2 += gxh * xh[j];
                           }
                           const double cn = static_cast<double>(c);
                           for (std::size_t j = 0; j < c; ++j) {
                             const double gxh = gyi[j] * ng.data[j];
                             nx.grad[i * c + j] += inv_std[i] * (gxh - s1 / cn - xh[j] * s2 / cn);
                           }
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "linear");
  require_rank(b, 1, "linear");
  const std::size_t k = x.shape().back();
  if (w.dim(0) != k || b.dim(0) != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()) + " and bias " + shape_str(b.shape()));
  }
  require_finite({&x, &w, &b}, "linear");
  const std::size_t m = rows_of(x), n = w.dim(1);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(m * n);
  gemm(px, pw, out.data(), m, k, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += pb[j];
  }
  Shape shape = x.shape();
  shape.back() = n;
  return make_result(std::move(shape), std::move(out), {x, w, b}, [m, k, n](TensorNode& self) {
    const double* g = self.grad.data();
    auto& nx = in(self, 0);
    auto& nw = in(self, 1);
    auto& nb = in(self, 2);
    if (nx.requires_grad) gemm_grad_lhs(g, nw.data.data(), nx.grad.data(), m, k, n);
    if (nw.requires_grad) gemm_grad_rhs(nx.data.data(), g, nw.grad.data(), m, k, n);
    if (nb.requires_grad) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) nb.grad[j] += g[i * n + j];
    }
  });
}

Tensor sum(const Tensor& a) {
  require_finite({&a}, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {a}, [](TensorNode& self) {
    if (!wants_grad(self, 0)) return;
    for (auto& g : in(self, 0).grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](TensorNode& self) {
    if (!wants_grad(self, 0)) return;
    auto& g = in(self, 0).grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() < 1 || begin >= end || end > a.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t row = a.numel() / a.dim(0);
  std::vector<double> out(a.data().begin() + begin * row, a.data().begin() + end * row);
  Shape shape = a.shape();
  shape[0] = end - begin;
  return make_result(std::move(shape), std::move(out), {a}, [begin, row](TensorNode& self) {
    if (!wants_grad(self, 0)) return;
    auto& g = in(self, 0).grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * row + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  if (begin >= end || end > a.dim(1)) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t r = a.dim(0), c = a.dim(1), w = end - begin;
  const auto x = a.data();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * c + begin + j];
  return make_result({r, w}, std::move(out), {a}, [r, c, w, begin](TensorNode& self) {
    if (!wants_grad(self, 0)) return;
    auto& g = in(self, 0).grad;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat_rows: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    rows += p.dim(0);
  }
  Shape shape = parts[0].shape();
  shape[0] = rows;
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result(std::move(shape), std::move(out), std::move(inputs), [offsets](TensorNode& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& src = *self.inputs[k];
      if (!src.requires_grad) continue;
      for (std::size_t i = 0; i < src.grad.size(); ++i) src.grad[i] += self.grad[offsets[k] + i];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::vector<std::size_t> widths, starts;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != r) throw ShapeError("concat_cols: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    starts.push_back(total);
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + starts[k] + j] = x[i * widths[k] + j];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result({r, total}, std::move(out), std::move(inputs), [r, total, widths, starts](TensorNode& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& src = *self.inputs[k];
      if (!src.requires_grad) continue;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j) src.grad[i * widths[k] + j] += self.grad[i * total + starts[k] + j];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t row = a.numel() / a.dim(0);
  std::vector<double> out;
  out.reserve(rows.size() * row);
  for (auto r : rows) {
    if (r >= a.dim(0)) throw ShapeError("gather_rows: index " + std::to_string(r) + " out of " + shape_str(a.shape()));
    out.insert(out.end(), a.data().begin() + r * row, a.data().begin() + (r + 1) * row);
  }
  Shape shape = a.shape();
  shape[0] = rows.size();
  return make_result(std::move(shape), std::move(out), {a},
                     [idx = std::vector<std::size_t>(rows.begin(), rows.end()), row](TensorNode& self) {
                       if (!wants_grad(self, 0)) return;
                       auto& g = in(self, 0).grad;
                       for (std::size_t k = 0; k < idx.size(); ++k)
                         for (std::size_t j = 0; j < row; ++j) g[idx[k] * row + j] += self.grad[k * row + j];
                     });
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < kernel) return 0;
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_rank(x, 3, "im2col");
  require_finite({&x}, "im2col");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t oh = conv_out_extent(h, kernel, stride, pad);
  const std::size_t ow = conv_out_extent(w, kernel, stride, pad);
  if (oh == 0 || ow == 0) throw ShapeError("im2col: kernel larger than padded input " + shape_str(x.shape()));
  const std::size_t cols = kernel * kernel * c;
  // Source offset per output element, or -1 for padding.
  std::vector<std::ptrdiff_t> src(oh * ow * cols, -1);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      std::ptrdiff_t* dst = src.data() + (oy * ow + ox) * cols;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          for (std::size_t ch = 0; ch < c; ++ch)
            dst[(ky * kernel + kx) * c + ch] = (iy * static_cast<std::ptrdiff_t>(w) + ix) * static_cast<std::ptrdiff_t>(c) +
                                              static_cast<std::ptrdiff_t>(ch);
        }
      }
    }
  const auto xd = x.data();
  std::vector<double> out(src.size(), 0.0);
  for (std::size_t i = 0; i < src.size(); ++i)
    if (src[i] >= 0) out[i] = xd[static_cast<std::size_t>(src[i])];
  return make_result({oh * ow, cols}, std::move(out), {x}, [src = std::move(src)](TensorNode& self) {
    if (!wants_grad(self, 0)) return;
    auto& g = in(self, 0).grad;
    for (std::size_t i = 0; i < src.size(); ++i)
      if (src[i] >= 0) g[static_cast<std::size_t>(src[i])] += self.grad[i];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, std::span<const double> weights) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t r = logits.dim(0), c = logits.dim(1);
  if (targets.size() != r || weights.size() != r) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " with " + std::to_string(targets.size()) +
                     " targets and " + std::to_string(weights.size()) + " weights");
  }
  require_finite({&logits}, "cross_entropy");
  const auto x = logits.data();
  std::vector<double> probs(r * c);
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] >= c) throw ShapeError("cross_entropy: target class out of range");
    const double* xi = x.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(xi[j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    total += weights[i] * -(xi[targets[i]] - mx - std::log(z));
  }
  return make_result({1}, {total}, {logits},
                     [r, c, probs = std::move(probs), t = std::vector<std::size_t>(targets.begin(), targets.end()),
                      w = std::vector<double>(weights.begin(), weights.end())](TensorNode& self) {
                       if (!wants_grad(self, 0)) return;
                       auto& g = in(self, 0).grad;
                       const double gy = self.grad[0];
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           g[i * c + j] += gy * w[i] * (probs[i * c + j] - (j == t[i] ? 1.0 : 0.0));
                     });
}

}  // namespace dssl::ops
