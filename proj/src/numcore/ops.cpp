#include "codis/numcore/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace codis::ops {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

// Gradient buffer of parent i, or nullptr when it takes no gradient.
double* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

const std::vector<double>& value_of(Node& self, std::size_t i) {
  return self.parents[i]->value;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_string(a.shape()));
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Elementwise unary op with derivative expressed through (x, y).
template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return detail::make_result(op, x.shape(), std::move(out), {x}, [deriv](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& xv = value_of(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      gx[i] += self.grad[i] * deriv(xv[i], self.value[i]);
    }
  });
}

Shape vector_shape(std::size_t n) { return Shape{n}; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::make_result("scale", a.shape(), std::move(out), {a}, [factor](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t n = a.cols();
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " for input " + shape_string(a.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % n];
  return detail::make_result("add_bias", a.shape(), std::move(out), {a, bias}, [n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

Tensor scale_rows(const Tensor& a, const Tensor& w) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (w.size() != m) {
    throw DimensionError("scale_rows: weights " + shape_string(w.shape()) +
                         " for input " + shape_string(a.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a[r * n + c] * w[r];
  }
  return detail::make_result("scale_rows", a.shape(), std::move(out), {a, w}, [m, n](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& wv = value_of(self, 1);
    double* ga = grad_of(self, 0);
    double* gw = grad_of(self, 1);
    for (std::size_t r = 0; r < m; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double g = self.grad[r * n + c];
        if (ga) ga[r * n + c] += g * wv[r];
        acc += g * av[r * n + c];
      }
      if (gw) gw[r] += acc;
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.values().data(), m, k) * MapC(b.values().data(), k, n);
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    MapC g(self.grad.data(), m, n);
    if (double* ga = grad_of(self, 0)) {
      Map(ga, m, k).noalias() += g * MapC(value_of(self, 1).data(), k, n).transpose();
    }
    if (double* gb = grad_of(self, 1)) {
      Map(gb, k, n).noalias() += MapC(value_of(self, 0).data(), m, k).transpose() * g;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_nt", a);
  require_matrix("matmul_nt", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: " + shape_string(a.shape()) + " * T(" +
                         shape_string(b.shape()) + ")");
  }
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() =
      MapC(a.values().data(), m, k) * MapC(b.values().data(), n, k).transpose();
  return detail::make_result("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    MapC g(self.grad.data(), m, n);
    if (double* ga = grad_of(self, 0)) {
      Map(ga, m, k).noalias() += g * MapC(value_of(self, 1).data(), n, k);
    }
    if (double* gb = grad_of(self, 1)) {
      Map(gb, n, k).noalias() += g.transpose() * MapC(value_of(self, 0).data(), m, k);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_matrix("linear", x);
  require_matrix("linear", w);
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k || bias.size() != n) {
    throw DimensionError("linear: x " + shape_string(x.shape()) + ", w " +
                         shape_string(w.shape()) + ", bias " + shape_string(bias.shape()));
  }
  std::vector<double> out(m * n);
  Map y(out.data(), m, n);
  y.noalias() = MapC(x.values().data(), m, k) * MapC(w.values().data(), k, n);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), n);
  return detail::make_result("linear", {m, n}, std::move(out), {x, w, bias}, [m, k, n](Node& self) {
    MapC g(self.grad.data(), m, n);
    if (double* gx = grad_of(self, 0)) {
      Map(gx, m, k).noalias() += g * MapC(value_of(self, 1).data(), k, n).transpose();
    }
    if (double* gw = grad_of(self, 1)) {
      Map(gw, k, n).noalias() += MapC(value_of(self, 0).data(), m, k).transpose() * g;
    }
    if (double* gb = grad_of(self, 2)) {
      Eigen::Map<Eigen::RowVectorXd>(gb, n) += g.colwise().sum();
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoid_scalar,
               [](double, double y) { return y * (1.0 - y); });
}

Tensor swish(const Tensor& x) {
  return unary("swish", x, [](double v) { return v * sigmoid_scalar(v); },
               [](double v, double) {
                 const double s = sigmoid_scalar(v);
                 return s + v * s * (1.0 - s);
               });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}

Tensor log_clamped(const Tensor& x, double floor) {
  return unary("log", x, [floor](double v) { return std::log(std::max(v, floor)); },
               [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return detail::make_result("sum", {}, {total}, {x}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
  require_same_shape("row_dot", a, b);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r] += a[r * n + c] * b[r * n + c];
  }
  return detail::make_result("row_dot", vector_shape(m), std::move(out), {a, b}, [m, n](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    double* ga = grad_of(self, 0);
    double* gb = grad_of(self, 1);
    for (std::size_t r = 0; r < m; ++r) {
      const double g = self.grad[r];
      for (std::size_t c = 0; c < n; ++c) {
        if (ga) ga[r * n + c] += g * bv[r * n + c];
        if (gb) gb[r * n + c] += g * av[r * n + c];
      }
    }
  });
}

Tensor mean_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (m == 0) throw DimensionError("mean_rows of an empty tensor");
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[c] += x[r * n + c];
  }
  for (double& v : out) v /= static_cast<double>(m);
  return detail::make_result("mean_rows", vector_shape(n), std::move(out), {x}, [m, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[c] * inv;
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(parts[p].values().data() + r * widths[p], widths[p],
                  out.data() + r * total + offset);
    }
    offset += widths[p];
  }
  return detail::make_result("concat_cols", {m, total}, std::move(out), parts,
                             [m, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      if (double* g = grad_of(self, p)) {
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < widths[p]; ++c) {
            g[r * widths[p] + c] += self.grad[r * total + off + c];
          }
        }
      }
      off += widths[p];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column count mismatch");
    m += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return detail::make_result("concat_rows", {m, n}, std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t len = self.parents[p]->value.size();
      if (double* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t m = x.rows(), n = x.cols();
  if (begin > end || end > n) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") of " + shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(x.values().data() + r * n + begin, w, out.data() + r * w);
  }
  return detail::make_result("slice_cols", {m, w}, std::move(out), {x}, [m, n, w, begin](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < w; ++c) g[r * n + begin + c] += self.grad[r * w + c];
      }
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t m = x.rows(), n = x.cols();
  if (begin > end || end > m) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") of " + shape_string(x.shape()));
  }
  std::vector<double> out(x.values().begin() + begin * n, x.values().begin() + end * n);
  return detail::make_result("slice_rows", {end - begin, n}, std::move(out), {x}, [begin, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  const std::size_t rows = table.rows(), n = table.cols();
  std::vector<double> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(table.values().data() + ids[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> index(ids.begin(), ids.end());
  return detail::make_result("gather_rows", {ids.size(), n}, std::move(out), {table},
                             [index = std::move(index), n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < index.size(); ++i) {
        double* dst = g + index[i] * n;
        const double* src = self.grad.data() + i * n;
        for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.values().data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) acc += std::exp(row[c] - mx);
    const double lse = mx + std::log(acc);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = row[c] - lse;
  }
  return detail::make_result("log_softmax", x.shape(), std::move(out), {x}, [m, n](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < m; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < n; ++c) total += self.grad[r * n + c];
      for (std::size_t c = 0; c < n; ++c) {
        g[r * n + c] += self.grad[r * n + c] - std::exp(self.value[r * n + c]) * total;
      }
    }
  });
}

Tensor softmax(const Tensor& x) {
  return masked_softmax(x, Mask(x.cols(), 1));
}

Tensor masked_softmax(const Tensor& scores, const Mask& mask) {
  const std::size_t m = scores.rows(), n = scores.cols();
  const bool broadcast = mask.size() == n;
  if (!broadcast && mask.size() != m * n) {
    throw DimensionError("masked_softmax: mask of " + std::to_string(mask.size()) +
                         " entries for scores " + shape_string(scores.shape()));
  }
  std::vector<double> out(scores.size(), 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const std::uint8_t* mrow = mask.data() + (broadcast ? 0 : r * n);
    const double* row = scores.values().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (mrow[c]) mx = std::max(mx, row[c]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw std::invalid_argument("masked_softmax: row " + std::to_string(r) +
                                  " has an all-zero mask");
    }
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (mrow[c]) acc += (out[r * n + c] = std::exp(row[c] - mx));
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= acc;
  }
  return detail::make_result("masked_softmax", scores.shape(), std::move(out), {scores}, [m, n](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < m; ++r) {
      const double* y = self.value.data() + r * n;
      const double* up = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += up[c] * y[c];
      // y == 0 exactly on masked entries, so they receive exactly zero.
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += y[c] * (up[c] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias size mismatch for " + shape_string(x.shape()));
  }
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(m);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * inv_std[r];
      out[r * n + c] = gain[c] * xhat[r * n + c] + bias[c];
    }
  }
  return detail::make_result("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                             [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    const auto& gv = value_of(self, 1);
    double* gx = grad_of(self, 0);
    double* gg = grad_of(self, 1);
    double* gb = grad_of(self, 2);
    std::vector<double> dxhat(n);
    for (std::size_t r = 0; r < m; ++r) {
      const double* up = self.grad.data() + r * n;
      const double* xh = xhat.data() + r * n;
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        if (gg) gg[c] += up[c] * xh[c];
        if (gb) gb[c] += up[c];
        dxhat[c] = up[c] * gv[c];
        mean_d += dxhat[c];
        mean_dx += dxhat[c] * xh[c];
      }
      if (!gx) continue;
      mean_d /= static_cast<double>(n);
      mean_dx /= static_cast<double>(n);
      for (std::size_t c = 0; c < n; ++c) {
        gx[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
      }
    }
  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout rate must be in [0, 1)");
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factor(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    factor[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = x[i] * factor[i];
  }
  return detail::make_result("dropout", x.shape(), std::move(out), {x},
                             [factor = std::move(factor)](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < factor.size(); ++i) g[i] += self.grad[i] * factor[i];
    }
  });
}

Tensor grad_reverse(const Tensor& x, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("grad_reverse: lambda must be >= 0");
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result("grad_reverse", x.shape(), std::move(out), {x}, [lambda](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += -lambda * self.grad[i];
    }
  });
}

Tensor stop_gradient(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result("stop_gradient", x.shape(), std::move(out), {}, nullptr);
}

Tensor kl_categorical(const Tensor& p, const Tensor& q, double eps) {
  const std::size_t m = p.rows(), n = p.cols();
  const bool broadcast = q.rows() == 1 && m != 1;
  if (q.cols() != n || (!broadcast && q.rows() != m)) {
    throw DimensionError("kl_categorical: p " + shape_string(p.shape()) + " vs q " +
                         shape_string(q.shape()));
  }
  auto check_simplex = [n](const Tensor& t, const char* name) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double v = t[r * n + c];
        if (v < 0.0 || !std::isfinite(v)) {
          throw std::invalid_argument(std::string("kl_categorical: ") + name +
                                      " has a negative or non-finite entry");
        }
        total += v;
      }
      if (std::abs(total - 1.0) > 1e-6) {
        throw std::invalid_argument(std::string("kl_categorical: ") + name +
                                    " row does not sum to 1");
      }
    }
  };
  check_simplex(p, "p");
  check_simplex(q, "q");
  std::vector<double> out(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t qr = broadcast ? 0 : r;
    for (std::size_t c = 0; c < n; ++c) {
      const double pv = p[r * n + c];
      const double qv = q[qr * n + c];
      out[r] += pv * (std::log(std::max(pv, eps)) - std::log(std::max(qv, eps)));
    }
  }
  return detail::make_result("kl_categorical", vector_shape(m), std::move(out), {p, q},
                             [m, n, eps, broadcast](Node& self) {
    const auto& pv = value_of(self, 0);
    const auto& qv = value_of(self, 1);
    double* gp = grad_of(self, 0);
    double* gq = grad_of(self, 1);
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t qr = broadcast ? 0 : r;
      const double up = self.grad[r];
      for (std::size_t c = 0; c < n; ++c) {
        const double a = pv[r * n + c];
        const double b = qv[qr * n + c];
        if (gp) {
          gp[r * n + c] += up * (std::log(std::max(a, eps)) - std::log(std::max(b, eps)) +
                                 (a > eps ? 1.0 : 0.0));
        }
        if (gq && b > eps) gq[qr * n + c] -= up * a / b;
      }
    }
  });
}

Tensor kl_diag_gaussian_to_std(const Tensor& mu, const Tensor& log_var) {
  require_same_shape("kl_diag_gaussian_to_std", mu, log_var);
  const std::size_t m = mu.rows(), n = mu.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double u = mu[r * n + c];
      const double lv = log_var[r * n + c];
      out[r] += 0.5 * (u * u + std::exp(lv) - 1.0 - lv);
    }
  }
  return detail::make_result("kl_diag_gaussian", vector_shape(m), std::move(out), {mu, log_var},
                             [m, n](Node& self) {
    const auto& mv = value_of(self, 0);
    const auto& lv = value_of(self, 1);
    double* gm = grad_of(self, 0);
    double* gl = grad_of(self, 1);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const std::size_t i = r * n + c;
        if (gm) gm[i] += self.grad[r] * mv[i];
        if (gl) gl[i] += self.grad[r] * 0.5 * (std::exp(lv[i]) - 1.0);
      }
    }
  });
}

Tensor reparameterize(const Tensor& mu, const Tensor& log_var, Rng& rng, bool zero_noise) {
  require_same_shape("reparameterize", mu, log_var);
  std::vector<double> noise(mu.size(), 0.0);
  if (!zero_noise) {
    for (double& e : noise) e = rng.normal();
  }
  std::vector<double> out(mu.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = mu[i] + std::exp(0.5 * log_var[i]) * noise[i];
  }
  return detail::make_result("reparameterize", mu.shape(), std::move(out), {mu, log_var},
                             [noise = std::move(noise)](Node& self) {
    const auto& lv = value_of(self, 1);
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < noise.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < noise.size(); ++i) {
        g[i] += self.grad[i] * 0.5 * std::exp(0.5 * lv[i]) * noise[i];
      }
    }
  });
}

Tensor binary_cross_entropy(const Tensor& p, std::span<const double> target, double eps) {
  const std::size_t m = p.size();
  if (target.size() != m) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(target.size()) +
                         " targets for " + std::to_string(m) + " probabilities");
  }
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double y = target[i];
    out[i] = -(y * std::log(std::max(p[i], eps)) + (1.0 - y) * std::log(std::max(1.0 - p[i], eps)));
  }
  std::vector<double> y(target.begin(), target.end());
  return detail::make_result("binary_cross_entropy", vector_shape(m), std::move(out), {p},
                             [y = std::move(y), eps](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    const auto& pv = value_of(self, 0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      double d = 0.0;
      if (pv[i] > eps) d -= y[i] / pv[i];
      if (1.0 - pv[i] > eps) d += (1.0 - y[i]) / (1.0 - pv[i]);
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t batch, std::size_t steps, std::size_t heads,
                        const Mask& key_valid) {
  require_same_shape("causal_attention", q, k);
  require_same_shape("causal_attention", q, v);
  const std::size_t width = q.cols();
  if (q.rows() != batch * steps || key_valid.size() != batch * steps || heads == 0 ||
      width % heads != 0) {
    throw DimensionError("causal_attention: inconsistent batch/steps/heads for " +
                         shape_string(q.shape()));
  }
  const std::size_t dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[((b*heads + h)*steps + t)*steps + s]
  std::vector<double> probs(batch * heads * steps * steps, 0.0);
  std::vector<double> out(q.size(), 0.0);
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < steps; ++t) {
        double* a = probs.data() + ((b * heads + h) * steps + t) * steps;
        const double* qt = qv + (b * steps + t) * width + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          if (!key_valid[b * steps + s]) continue;
          const double* ks = kv + (b * steps + s) * width + h * dh;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qt[c] * ks[c];
          a[s] = dot * inv_sqrt;
          mx = std::max(mx, a[s]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double acc = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          if (key_valid[b * steps + s]) acc += (a[s] = std::exp(a[s] - mx));
        }
        double* ot = out.data() + (b * steps + t) * width + h * dh;
        for (std::size_t s = 0; s <= t; ++s) {
          if (!key_valid[b * steps + s]) continue;
          a[s] /= acc;
          const double* vs = vv + (b * steps + s) * width + h * dh;
          for (std::size_t c = 0; c < dh; ++c) ot[c] += a[s] * vs[c];
        }
      }
    }
  }
  return detail::make_result("causal_attention", q.shape(), std::move(out), {q, k, v},
                             [batch, steps, heads, dh, width, inv_sqrt, probs = std::move(probs),
                              key_valid](Node& self) {
    const double* qv = self.parents[0]->value.data();
    const double* kv = self.parents[1]->value.data();
    const double* vv = self.parents[2]->value.data();
    double* gq = grad_of(self, 0);
    double* gk = grad_of(self, 1);
    double* gv = grad_of(self, 2);
    std::vector<double> da(steps);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < steps; ++t) {
          const double* a = probs.data() + ((b * heads + h) * steps + t) * steps;
          const double* up = self.grad.data() + (b * steps + t) * width + h * dh;
          double weighted = 0.0;
          for (std::size_t s = 0; s <= t; ++s) {
            if (a[s] == 0.0) {
              da[s] = 0.0;
              continue;
            }
            const std::size_t row = (b * steps + s) * width + h * dh;
            double dot = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              dot += up[c] * vv[row + c];
              if (gv) gv[row + c] += a[s] * up[c];
            }
            da[s] = dot;
            weighted += a[s] * dot;
          }
          const std::size_t qrow = (b * steps + t) * width + h * dh;
          for (std::size_t s = 0; s <= t; ++s) {
            if (a[s] == 0.0) continue;
            const double ds = a[s] * (da[s] - weighted) * inv_sqrt;
            const std::size_t krow = (b * steps + s) * width + h * dh;
            for (std::size_t c = 0; c < dh; ++c) {
              if (gq) gq[qrow + c] += ds * kv[krow + c];
              if (gk) gk[krow + c] += ds * qv[qrow + c];
            }
          }
        }
      }
    }
  });
}

Tensor causal_prefix_mean(const Tensor& x, std::size_t batch, std::size_t steps, const Mask& valid) {
  const std::size_t n = x.cols();
  if (x.rows() != batch * steps || valid.size() != batch * steps) {
    throw DimensionError("causal_prefix_mean: inconsistent batch/steps for " + shape_string(x.shape()));
  }
  std::vector<double> out(x.size(), 0.0);
  std::vector<double> inv_count(batch * steps, 0.0);
  std::vector<double> running(n);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(running.begin(), running.end(), 0.0);
    std::size_t count = 0;
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t row = b * steps + t;
      if (valid[row]) {
        ++count;
        for (std::size_t c = 0; c < n; ++c) running[c] += x[row * n + c];
      }
      if (count == 0) continue;
      inv_count[row] = 1.0 / static_cast<double>(count);
      for (std::size_t c = 0; c < n; ++c) out[row * n + c] = running[c] * inv_count[row];
    }
  }
  return detail::make_result("causal_prefix_mean", x.shape(), std::move(out), {x},
                             [batch, steps, n, valid, inv_count = std::move(inv_count)](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    std::vector<double> suffix(n);
    for (std::size_t b = 0; b < batch; ++b) {
      std::fill(suffix.begin(), suffix.end(), 0.0);
      for (std::size_t t = steps; t-- > 0;) {
        const std::size_t row = b * steps + t;
        for (std::size_t c = 0; c < n; ++c) suffix[c] += self.grad[row * n + c] * inv_count[row];
        if (!valid[row]) continue;
        for (std::size_t c = 0; c < n; ++c) g[row * n + c] += suffix[c];
      }
    }
  });
}

Tensor router_scores(const Tensor& embeddings, const Tensor& contexts) {
  require_matrix("router_scores", embeddings);
  require_matrix("router_scores", contexts);
  const std::size_t m = embeddings.rows(), h = embeddings.cols(), experts = contexts.rows();
  if (contexts.cols() != h * (h + 1)) {
    throw DimensionError("router_scores: context rows have " + std::to_string(contexts.cols()) +
                         " entries, expected h(h+1) = " + std::to_string(h * (h + 1)));
  }
  std::vector<double> out(m * experts);
  MapC e(embeddings.values().data(), m, h);
  RowMat pre(m, h);
  for (std::size_t n = 0; n < experts; ++n) {
    const double* row = contexts.values().data() + n * h * (h + 1);
    pre.noalias() = e * MapC(row, h, h).transpose();
    Eigen::Map<const Eigen::VectorXd> a(row + h * h, h);
    for (std::size_t t = 0; t < m; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < h; ++i) {
        const double x = pre(t, i);
        s += a[i] * x * sigmoid_scalar(x);
      }
      out[t * experts + n] = s;
    }
  }
  return detail::make_result("router_scores", {m, experts}, std::move(out), {embeddings, contexts},
                             [m, h, experts](Node& self) {
    const auto& ev = value_of(self, 0);
    const auto& cv = value_of(self, 1);
    double* ge = grad_of(self, 0);
    double* gc = grad_of(self, 1);
    MapC e(ev.data(), m, h);
    RowMat pre(m, h);
    RowMat dpre(m, h);
    for (std::size_t n = 0; n < experts; ++n) {
      const double* row = cv.data() + n * h * (h + 1);
      pre.noalias() = e * MapC(row, h, h).transpose();
      const double* a = row + h * h;
      double* ga = gc ? gc + n * h * (h + 1) + h * h : nullptr;
      for (std::size_t t = 0; t < m; ++t) {
        const double up = self.grad[t * experts + n];
        for (std::size_t i = 0; i < h; ++i) {
          const double x = pre(t, i);
          const double s = sigmoid_scalar(x);
          if (ga) ga[i] += up * x * s;
          dpre(t, i) = up * a[i] * (s + x * s * (1.0 - s));
        }
      }
      if (ge) Map(ge, m, h).noalias() += dpre * MapC(row, h, h);
      if (gc) Map(gc + n * h * (h + 1), h, h).noalias() += dpre.transpose() * e;
    }
  });
}

Tensor info_nce_rows(const Tensor& queries, const Tensor& table,
                     std::span<const std::size_t> candidates, std::size_t per_row, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("info_nce: temperature must be positive");
  const std::size_t rows = queries.rows(), h = queries.cols();
  if (table.cols() != h || per_row == 0 || candidates.size() != rows * per_row) {
    throw DimensionError("info_nce_rows: queries " + shape_string(queries.shape()) + ", table " +
                         shape_string(table.shape()) + ", " + std::to_string(candidates.size()) +
                         " candidates");
  }
  for (std::size_t id : candidates) {
    if (id >= table.rows()) throw std::out_of_range("info_nce_rows: candidate id out of range");
  }
  std::vector<double> probs(rows * per_row);
  std::vector<double> out(rows);
  const double* qv = queries.values().data();
  const double* tv = table.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* logits = probs.data() + r * per_row;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < per_row; ++c) {
      const double* e = tv + candidates[r * per_row + c] * h;
      double dot = 0.0;
      for (std::size_t i = 0; i < h; ++i) dot += qv[r * h + i] * e[i];
      logits[c] = dot / tau;
      mx = std::max(mx, logits[c]);
    }
    double acc = 0.0;
    for (std::size_t c = 0; c < per_row; ++c) acc += std::exp(logits[c] - mx);
    const double lse = mx + std::log(acc);
    out[r] = lse - logits[0];
    for (std::size_t c = 0; c < per_row; ++c) logits[c] = std::exp(logits[c] - lse);
  }
  std::vector<std::size_t> ids(candidates.begin(), candidates.end());
  return detail::make_result("info_nce", vector_shape(rows), std::move(out), {queries, table},
                             [rows, h, per_row, tau, probs = std::move(probs), ids = std::move(ids)](Node& self) {
    const double* qv = self.parents[0]->value.data();
    const double* tv = self.parents[1]->value.data();
    double* gq = grad_of(self, 0);
    double* gt = grad_of(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double up = self.grad[r] / tau;
      if (up == 0.0) continue;
      for (std::size_t c = 0; c < per_row; ++c) {
        const double d = up * (probs[r * per_row + c] - (c == 0 ? 1.0 : 0.0));
        const std::size_t id = ids[r * per_row + c];
        for (std::size_t i = 0; i < h; ++i) {
          if (gq) gq[r * h + i] += d * tv[id * h + i];
          if (gt) gt[id * h + i] += d * qv[r * h + i];
        }
      }
    }
  });
}

}  // namespace codis::ops
