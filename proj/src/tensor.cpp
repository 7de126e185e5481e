#include "crossformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "crossformer/error.hpp"

namespace crossformer {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t rows_of(const Shape& s) { return s.size() >= 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) {
  if (s.empty()) return 1;
  if (s.size() == 1) return s[0];
  return shape_size(s) / s[0];
}

}  // namespace

Array::Array(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Array::Array(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("array of shape " + shape_str(shape) + " given " +
                     std::to_string(data.size()) + " values");
  }
}

std::size_t Array::rows() const { return rows_of(shape); }
std::size_t Array::cols() const { return cols_of(shape); }

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddTiled: return "add_tiled";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::ColSlice: return "col_slice";
    case Op::ConcatCols: return "concat_cols";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::Gelu: return "gelu";
    case Op::LayerNorm: return "layer_norm";
    case Op::GroupNorm: return "group_norm";
    case Op::DepthwiseConv1d: return "depthwise_conv1d";
    case Op::BlockMatMulNT: return "block_matmul_nt";
    case Op::BlockMatMul: return "block_matmul";
    case Op::WeightedPool: return "weighted_pool";
    case Op::RowNorms: return "row_norms";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
  }
  return "unknown";
}

// ---- Tensor ---------------------------------------------------------------

const Shape& Tensor::shape() const { return graph_->node(id_).shape; }
std::size_t Tensor::rows() const { return rows_of(shape()); }
std::size_t Tensor::cols() const { return cols_of(shape()); }
std::size_t Tensor::size() const { return graph_->node(id_).value.size(); }
std::span<const double> Tensor::data() const { return graph_->node(id_).value; }
bool Tensor::requires_grad() const { return graph_->node(id_).requires_grad; }
std::span<const double> Tensor::grad() const { return graph_->node(id_).grad; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

Array Tensor::to_array() const {
  const auto& n = graph_->node(id_);
  return Array(n.shape, n.value);
}

// ---- Graph ----------------------------------------------------------------

Tensor Graph::leaf(Array value, bool requires_grad) {
  Node n;
  n.op = Op::Leaf;
  n.shape = std::move(value.shape);
  n.value = std::move(value.data);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Graph::record(Op op, std::vector<NodeId> inputs, Shape shape,
                     std::vector<double> value, BackwardFn fn) {
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.value = std::move(value);
  if (grad_enabled_) {
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [&](NodeId i) { return nodes_[i].requires_grad; });
  }
  if (n.requires_grad) n.backward = std::move(fn);
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

std::span<double> Graph::grad_of(NodeId id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  for (auto& n : nodes_) {
    if (n.requires_grad && n.op == Op::Leaf) n.grad.assign(n.value.size(), 0.0);
  }
  if (!nodes_[loss.id()].requires_grad) return;
  grad_of(loss.id())[0] = 1.0;
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    if (fault_ && fault_->op == n.op) {
      for (double& g : n.grad) g *= fault_->scale;
    }
    n.backward(*this, id);
  }
}

// ---- helpers --------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

std::size_t checked_segment(std::size_t total, std::size_t segment, const char* op) {
  if (segment == 0) return total;
  if (total % segment != 0) {
    throw ShapeError(std::string(op) + ": length " + std::to_string(total) +
                     " is not a multiple of segment " + std::to_string(segment));
  }
  return segment;
}

}  // namespace

// ---- elementwise & structural ops ---------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (a.shape().size() != 2 || b.shape().size() != 2 || b.rows() != k) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  auto A = a.data(), B = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A[i * k + t];
      if (av == 0.0) continue;
      const double* brow = B.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  const NodeId ia = a.id(), ib = b.id();
  return a.graph().record(Op::MatMul, {ia, ib}, {m, n}, std::move(out),
      [ia, ib, m, k, n](Graph& g, NodeId self) {
        auto dC = g.grad_of(self);
        auto A = g.value_of(ia), B = g.value_of(ib);
        if (auto dA = g.grad_of(ia); !dA.empty()) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < k; ++t) {
              double acc = 0.0;
              const double* dc = dC.data() + i * n;
              const double* brow = B.data() + t * n;
              for (std::size_t j = 0; j < n; ++j) acc += dc[j] * brow[j];
              dA[i * k + t] += acc;
            }
        }
        if (auto dB = g.grad_of(ib); !dB.empty()) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < k; ++t) {
              const double av = A[i * k + t];
              if (av == 0.0) continue;
              const double* dc = dC.data() + i * n;
              double* db = dB.data() + t * n;
              for (std::size_t j = 0; j < n; ++j) db[j] += av * dc[j];
            }
        }
      });
}

namespace {

template <class Fwd, class DA, class DB>
Tensor binary_elementwise(Op op, const Tensor& a, const Tensor& b, const char* name,
                          Fwd fwd, DA da, DB db) {
  require_same_shape(a, b, name);
  auto A = a.data(), B = b.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i], B[i]);
  const NodeId ia = a.id(), ib = b.id();
  return a.graph().record(op, {ia, ib}, a.shape(), std::move(out),
      [ia, ib, da, db](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto A = g.value_of(ia), B = g.value_of(ib);
        if (auto gA = g.grad_of(ia); !gA.empty())
          for (std::size_t i = 0; i < d.size(); ++i) gA[i] += da(A[i], B[i]) * d[i];
        if (auto gB = g.grad_of(ib); !gB.empty())
          for (std::size_t i = 0; i < d.size(); ++i) gB[i] += db(A[i], B[i]) * d[i];
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      Op::Add, a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      Op::Sub, a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      Op::Mul, a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  const NodeId ia = a.id();
  return a.graph().record(Op::Scale, {ia}, a.shape(), std::move(out),
      [ia, s](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto gA = g.grad_of(ia);
        for (std::size_t i = 0; i < d.size(); ++i) gA[i] += s * d[i];
      });
}

Tensor add_tiled(const Tensor& x, const Tensor& table) {
  const std::size_t n = x.rows(), c = x.cols();
  const std::size_t p = table.rows();
  if (table.cols() != c || n % p != 0) {
    throw ShapeError("add_tiled: cannot tile " + shape_str(table.shape()) + " over " +
                     shape_str(x.shape()));
  }
  auto X = x.data(), T = table.data();
  std::vector<double> out(X.begin(), X.end());
  for (std::size_t r = 0; r < n; ++r) {
    const double* trow = T.data() + (r % p) * c;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += trow[j];
  }
  const NodeId ix = x.id(), it = table.id();
  return x.graph().record(Op::AddTiled, {ix, it}, x.shape(), std::move(out),
      [ix, it, n, c, p](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        if (auto gx = g.grad_of(ix); !gx.empty())
          for (std::size_t i = 0; i < d.size(); ++i) gx[i] += d[i];
        if (auto gt = g.grad_of(it); !gt.empty())
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) gt[(r % p) * c + j] += d[r * c + j];
      });
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  auto A = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  const NodeId ia = a.id();
  return a.graph().record(Op::Transpose, {ia}, {n, m}, std::move(out),
      [ia, m, n](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto gA = g.grad_of(ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gA[i * n + j] += d[j * m + i];
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const NodeId ia = a.id();
  return a.graph().record(Op::Reshape, {ia}, std::move(shape), std::move(out),
      [ia](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto gA = g.grad_of(ia);
        for (std::size_t i = 0; i < d.size(); ++i) gA[i] += d[i];
      });
}

Tensor col_slice(const Tensor& a, std::size_t start, std::size_t count) {
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > n) {
    throw ShapeError("col_slice: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + shape_str(a.shape()));
  }
  auto A = a.data();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(A.data() + i * n + start, count, out.data() + i * count);
  const NodeId ia = a.id();
  return a.graph().record(Op::ColSlice, {ia}, {m, count}, std::move(out),
      [ia, m, n, start, count](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto gA = g.grad_of(ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < count; ++j) gA[i * n + start + j] += d[i * count + j];
      });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    ids.push_back(p.id());
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto P = p.data();
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(P.data() + i * w, w, out.data() + i * total + offset);
    offset += w;
  }
  return parts[0].graph().record(Op::ConcatCols, ids, {m, total}, std::move(out),
      [ids, widths, m, total](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const std::size_t w = widths[k];
          if (auto gp = g.grad_of(ids[k]); !gp.empty())
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += d[i * total + offset + j];
          offset += w;
        }
      });
}

// ---- nonlinearities & normalization -------------------------------------

Tensor softmax_rows(const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  auto M = m.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = M.data() + i * c;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("softmax_rows: non-finite input");
      mx = std::max(mx, row[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  const NodeId im = m.id();
  return m.graph().record(Op::SoftmaxRows, {im}, m.shape(), std::move(out),
      [im, r, c](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto y = g.value_of(self);
        auto gM = g.grad_of(im);
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += d[i * c + j] * y[i * c + j];
          for (std::size_t j = 0; j < c; ++j) gM[i * c + j] += y[i * c + j] * (d[i * c + j] - dot);
        }
      });
}

Tensor gelu(const Tensor& x) {
  auto X = x.data();
  std::vector<double> out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i)
    out[i] = 0.5 * X[i] * (1.0 + std::erf(X[i] / std::sqrt(2.0)));
  const NodeId ix = x.id();
  return x.graph().record(Op::Gelu, {ix}, x.shape(), std::move(out),
      [ix](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto X = g.value_of(ix);
        auto gX = g.grad_of(ix);
        constexpr double kInvSqrt2Pi = 0.39894228040143267794;
        for (std::size_t i = 0; i < d.size(); ++i) {
          const double v = X[i];
          const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          gX[i] += d[i] * (cdf + v * pdf);
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: affine " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " for input " + shape_str(x.shape()));
  }
  auto X = x.data(), G = gamma.data(), B = beta.data();
  std::vector<double> out(n * d), xhat(n * d), inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = G[j] * xhat[r * d + j] + B[j];
    }
  }
  const NodeId ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().record(Op::LayerNorm, {ix, ig, ib}, x.shape(), std::move(out),
      [ix, ig, ib, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, NodeId self) {
        auto dy = g.grad_of(self);
        auto G = g.value_of(ig);
        if (auto gG = g.grad_of(ig); !gG.empty())
          for (std::size_t i = 0; i < n * d; ++i) gG[i % d] += dy[i] * xhat[i];
        if (auto gB = g.grad_of(ib); !gB.empty())
          for (std::size_t i = 0; i < n * d; ++i) gB[i % d] += dy[i];
        if (auto gX = g.grad_of(ix); !gX.empty()) {
          for (std::size_t r = 0; r < n; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = dy[r * d + j] * G[j];
              m1 += gh;
              m2 += gh * xhat[r * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = dy[r * d + j] * G[j];
              gX[r * d + j] += inv_std[r] * (gh - m1 - xhat[r * d + j] * m2);
            }
          }
        }
      });
}

Tensor group_norm(const Tensor& z, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps, std::size_t segment) {
  const std::size_t C = z.rows(), L = z.cols();
  if (groups == 0 || C % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                      std::to_string(C) + " channels");
  }
  if (gamma.size() != C || beta.size() != C) {
    throw ShapeError("group_norm: affine " + shape_str(gamma.shape()) + " for " +
                     std::to_string(C) + " channels");
  }
  const std::size_t seg = checked_segment(L, segment, "group_norm");
  const std::size_t nseg = L / seg, cg = C / groups;
  const double count = static_cast<double>(cg * seg);
  auto Z = z.data(), G = gamma.data(), B = beta.data();
  std::vector<double> out(C * L), xhat(C * L), inv_std(nseg * groups);
  for (std::size_t s = 0; s < nseg; ++s) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      double mu = 0.0;
      for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c)
        for (std::size_t p = s * seg; p < (s + 1) * seg; ++p) mu += Z[c * L + p];
      mu /= count;
      double var = 0.0;
      for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c)
        for (std::size_t p = s * seg; p < (s + 1) * seg; ++p)
          var += (Z[c * L + p] - mu) * (Z[c * L + p] - mu);
      var /= count;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[s * groups + gi] = is;
      for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c)
        for (std::size_t p = s * seg; p < (s + 1) * seg; ++p) {
          xhat[c * L + p] = (Z[c * L + p] - mu) * is;
          out[c * L + p] = G[c] * xhat[c * L + p] + B[c];
        }
    }
  }
  const NodeId iz = z.id(), ig = gamma.id(), ib = beta.id();
  return z.graph().record(Op::GroupNorm, {iz, ig, ib}, z.shape(), std::move(out),
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, NodeId self) {
        auto dy = g.grad_of(self);
        auto G = g.value_of(ig);
        if (auto gG = g.grad_of(ig); !gG.empty())
          for (std::size_t i = 0; i < C * L; ++i) gG[i / L] += dy[i] * xhat[i];
        if (auto gB = g.grad_of(ib); !gB.empty())
          for (std::size_t i = 0; i < C * L; ++i) gB[i / L] += dy[i];
        auto gZ = g.grad_of(iz);
        if (gZ.empty()) return;
        for (std::size_t s = 0; s < nseg; ++s) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c)
              for (std::size_t p = s * seg; p < (s + 1) * seg; ++p) {
                const double gh = dy[c * L + p] * G[c];
                m1 += gh;
                m2 += gh * xhat[c * L + p];
              }
            m1 /= count;
            m2 /= count;
            const double is = inv_std[s * groups + gi];
            for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c)
              for (std::size_t p = s * seg; p < (s + 1) * seg; ++p) {
                const double gh = dy[c * L + p] * G[c];
                gZ[c * L + p] += is * (gh - m1 - xhat[c * L + p] * m2);
              }
          }
        }
      });
}

Tensor depthwise_conv1d(const Tensor& z, const Tensor& kernels, const Tensor& bias,
                        std::size_t segment) {
  const std::size_t C = z.rows(), L = z.cols();
  const std::size_t k = kernels.cols();
  if (k % 2 == 0) {
    throw ConfigError("depthwise_conv1d: kernel size " + std::to_string(k) + " must be odd");
  }
  if (kernels.rows() != C || bias.size() != C) {
    throw ShapeError("depthwise_conv1d: kernels " + shape_str(kernels.shape()) + " / bias " +
                     shape_str(bias.shape()) + " for input " + shape_str(z.shape()));
  }
  const std::size_t seg = checked_segment(L, segment, "depthwise_conv1d");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t sseg = static_cast<std::ptrdiff_t>(seg);
  auto Z = z.data(), K = kernels.data(), Bv = bias.data();
  std::vector<double> out(C * L);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t base = 0; base < L; base += seg)
      for (std::ptrdiff_t p = 0; p < sseg; ++p) {
        double acc = Bv[c];
        for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(k); ++j) {
          const std::ptrdiff_t q = p + j - half;
          if (q < 0 || q >= sseg) continue;
          acc += K[c * k + j] * Z[c * L + base + q];
        }
        out[c * L + base + p] = acc;
      }
  const NodeId iz = z.id(), ik = kernels.id(), ib = bias.id();
  return z.graph().record(Op::DepthwiseConv1d, {iz, ik, ib}, z.shape(), std::move(out),
      [=](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto Z = g.value_of(iz), K = g.value_of(ik);
        auto gZ = g.grad_of(iz), gK = g.grad_of(ik), gB = g.grad_of(ib);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t base = 0; base < L; base += seg)
            for (std::ptrdiff_t p = 0; p < sseg; ++p) {
              const double dv = d[c * L + base + p];
              if (!gB.empty()) gB[c] += dv;
              for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(k); ++j) {
                const std::ptrdiff_t q = p + j - half;
                if (q < 0 || q >= sseg) continue;
                if (!gK.empty()) gK[c * k + j] += dv * Z[c * L + base + q];
                if (!gZ.empty()) gZ[c * L + base + q] += dv * K[c * k + j];
              }
            }
      });
}

// ---- segmented products ----------------------------------------------------

Tensor block_matmul_nt(const Tensor& a, const Tensor& b, std::size_t segment) {
  require_same_shape(a, b, "block_matmul_nt");
  const std::size_t N = a.rows(), d = a.cols();
  const std::size_t P = checked_segment(N, segment, "block_matmul_nt");
  auto A = a.data(), B = b.data();
  std::vector<double> out(N * P, 0.0);
  for (std::size_t base = 0; base < N; base += P)
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) {
        double acc = 0.0;
        const double* ar = A.data() + (base + i) * d;
        const double* br = B.data() + (base + j) * d;
        for (std::size_t t = 0; t < d; ++t) acc += ar[t] * br[t];
        out[(base + i) * P + j] = acc;
      }
  const NodeId ia = a.id(), ib = b.id();
  return a.graph().record(Op::BlockMatMulNT, {ia, ib}, {N, P}, std::move(out),
      [=](Graph& g, NodeId self) {
        auto dO = g.grad_of(self);
        auto A = g.value_of(ia), B = g.value_of(ib);
        auto gA = g.grad_of(ia), gB = g.grad_of(ib);
        for (std::size_t base = 0; base < N; base += P)
          for (std::size_t i = 0; i < P; ++i)
            for (std::size_t j = 0; j < P; ++j) {
              const double dv = dO[(base + i) * P + j];
              if (dv == 0.0) continue;
              if (!gA.empty())
                for (std::size_t t = 0; t < d; ++t) gA[(base + i) * d + t] += dv * B[(base + j) * d + t];
              if (!gB.empty())
                for (std::size_t t = 0; t < d; ++t) gB[(base + j) * d + t] += dv * A[(base + i) * d + t];
            }
      });
}

Tensor block_matmul(const Tensor& s, const Tensor& v, std::size_t segment) {
  const std::size_t N = s.rows(), P = segment, d = v.cols();
  if (P == 0 || s.cols() != P || v.rows() != N || N % P != 0) {
    throw ShapeError("block_matmul: scores " + shape_str(s.shape()) + " with values " +
                     shape_str(v.shape()) + " at segment " + std::to_string(segment));
  }
  auto S = s.data(), V = v.data();
  std::vector<double> out(N * d, 0.0);
  for (std::size_t base = 0; base < N; base += P)
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) {
        const double w = S[(base + i) * P + j];
        if (w == 0.0) continue;
        const double* vr = V.data() + (base + j) * d;
        double* orow = out.data() + (base + i) * d;
        for (std::size_t t = 0; t < d; ++t) orow[t] += w * vr[t];
      }
  const NodeId is = s.id(), iv = v.id();
  return s.graph().record(Op::BlockMatMul, {is, iv}, {N, d}, std::move(out),
      [=](Graph& g, NodeId self) {
        auto dO = g.grad_of(self);
        auto S = g.value_of(is), V = g.value_of(iv);
        auto gS = g.grad_of(is), gV = g.grad_of(iv);
        for (std::size_t base = 0; base < N; base += P)
          for (std::size_t i = 0; i < P; ++i)
            for (std::size_t j = 0; j < P; ++j) {
              const double* dr = dO.data() + (base + i) * d;
              if (!gS.empty()) {
                double acc = 0.0;
                for (std::size_t t = 0; t < d; ++t) acc += dr[t] * V[(base + j) * d + t];
                gS[(base + i) * P + j] += acc;
              }
              if (!gV.empty()) {
                const double w = S[(base + i) * P + j];
                for (std::size_t t = 0; t < d; ++t) gV[(base + j) * d + t] += w * dr[t];
              }
            }
      });
}

Tensor weighted_pool(const Tensor& z, const Tensor& weights) {
  const std::size_t N = z.rows(), C = z.cols(), P = weights.size();
  if (P == 0 || N % P != 0) {
    throw ShapeError("weighted_pool: " + std::to_string(P) + " weights over " +
                     shape_str(z.shape()));
  }
  const std::size_t S = N / P;
  auto Z = z.data(), W = weights.data();
  std::vector<double> out(S * C, 0.0);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t f = 0; f < P; ++f)
      for (std::size_t c = 0; c < C; ++c) out[s * C + c] += W[f] * Z[(s * P + f) * C + c];
  const NodeId iz = z.id(), iw = weights.id();
  return z.graph().record(Op::WeightedPool, {iz, iw}, {S, C}, std::move(out),
      [=](Graph& g, NodeId self) {
        auto dO = g.grad_of(self);
        auto Z = g.value_of(iz), W = g.value_of(iw);
        auto gZ = g.grad_of(iz), gW = g.grad_of(iw);
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t f = 0; f < P; ++f)
            for (std::size_t c = 0; c < C; ++c) {
              const double dv = dO[s * C + c];
              if (!gZ.empty()) gZ[(s * P + f) * C + c] += W[f] * dv;
              if (!gW.empty()) gW[f] += dv * Z[(s * P + f) * C + c];
            }
      });
}

Tensor row_norms(const Tensor& x) {
  const std::size_t n = x.rows(), c = x.cols();
  auto X = x.data();
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += X[r * c + j] * X[r * c + j];
    out[r] = std::sqrt(acc);
  }
  const NodeId ix = x.id();
  return x.graph().record(Op::RowNorms, {ix}, {n, 1}, std::move(out),
      [ix, n, c](Graph& g, NodeId self) {
        auto d = g.grad_of(self);
        auto X = g.value_of(ix);
        auto norms = g.value_of(self);
        auto gX = g.grad_of(ix);
        for (std::size_t r = 0; r < n; ++r) {
          if (norms[r] == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) gX[r * c + j] += d[r] * X[r * c + j] / norms[r];
        }
      });
}

Tensor sum(const Tensor& x) {
  auto X = x.data();
  double acc = 0.0;
  for (double v : X) acc += v;
  const NodeId ix = x.id();
  return x.graph().record(Op::Sum, {ix}, {1, 1}, {acc}, [ix](Graph& g, NodeId self) {
    const double d = g.grad_of(self)[0];
    for (double& v : g.grad_of(ix)) v += d;
  });
}

Tensor mean(const Tensor& x) {
  auto X = x.data();
  double acc = 0.0;
  for (double v : X) acc += v;
  const double n = static_cast<double>(X.size());
  const NodeId ix = x.id();
  return x.graph().record(Op::Mean, {ix}, {1, 1}, {acc / n}, [ix, n](Graph& g, NodeId self) {
    const double d = g.grad_of(self)[0] / n;
    for (double& v : g.grad_of(ix)) v += d;
  });
}

// ---- finite differences ----------------------------------------------------

namespace {

double evaluate_scalar(const ScalarFn& f, const std::vector<Array>& params) {
  Graph g;
  g.set_grad_enabled(false);
  std::vector<Tensor> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(g.leaf(p, false));
  const double v = f(g, leaves).item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
  return v;
}

}  // namespace

FiniteDiffReport finite_diff_check(const ScalarFn& f, std::vector<Array> params, double eps,
                                   std::optional<BackwardFault> fault) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    g.inject_fault(fault);
    std::vector<Tensor> leaves;
    for (const auto& p : params) leaves.push_back(g.leaf(p, true));
    Tensor loss = f(g, leaves);
    if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite loss");
    g.backward(loss);
    for (const auto& t : leaves) analytic.emplace_back(t.grad().begin(), t.grad().end());
  }
  FiniteDiffReport report;
  report.per_param.assign(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].data.size(); ++j) {
      const double orig = params[i].data[j];
      auto at = [&](double offset) {
        params[i].data[j] = orig + offset;
        return evaluate_scalar(f, params);
      };
      // five-point central stencil, O(eps^4)
      const double fd = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      params[i].data[j] = orig;
      const double ad = analytic[i][j];
      const double rel = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
      report.per_param[i] = std::max(report.per_param[i], rel);
    }
    report.max_rel_error = std::max(report.max_rel_error, report.per_param[i]);
  }
  return report;
}

}  // namespace crossformer
