#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Graph is an append-only tape. Every op appends one node holding its
// forward value and a closure that pushes the node's gradient into its
// inputs. Nodes are created after their inputs, so walking the tape
// backwards from the loss is a valid reverse topological order.
//
// Most ops work on rank-2 values. Several take a `segment` length: the rows
// (or columns, for the channel-major conv/norm ops) are split into
// contiguous segments of that length and the op is applied to each segment
// independently. This is how a batch of frames or windows shares one node.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crossformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Plain value storage for parameters, datasets and gradients.
struct Array {
  Shape shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(Shape s, double fill = 0.0);
  Array(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool operator==(const Array&) const = default;
};

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddTiled,
  Transpose,
  Reshape,
  ColSlice,
  ConcatCols,
  SoftmaxRows,
  Gelu,
  LayerNorm,
  GroupNorm,
  DepthwiseConv1d,
  BlockMatMulNT,
  BlockMatMul,
  WeightedPool,
  RowNorms,
  Sum,
  Mean,
};

const char* op_name(Op op);

using NodeId = std::size_t;
class Graph;

// Handle to one node of a Graph. Cheap to copy; valid while the graph lives.
class Tensor {
 public:
  Tensor() = default;

  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Shape& shape() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;
  std::span<const double> data() const;
  bool requires_grad() const;
  // Empty until backward() reaches this node; zeros for unused leaves.
  std::span<const double> grad() const;
  double item() const;
  Array to_array() const;

 private:
  friend class Graph;
  Tensor(Graph* g, NodeId id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

// Test fixture: scales the output gradient an op passes to its inputs.
struct BackwardFault {
  Op op;
  double scale;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor leaf(Array value, bool requires_grad);
  Tensor constant(Array value) { return leaf(std::move(value), false); }

  // Reverse pass from a 1x1 (or single-element) loss. Every leaf created
  // with requires_grad gets a gradient buffer, zero if the loss ignores it.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[id]; }

  // With gradients disabled no backward closures are stored.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  void inject_fault(std::optional<BackwardFault> fault) { fault_ = fault; }

  // Used by op implementations.
  Tensor record(Op op, std::vector<NodeId> inputs, Shape shape,
                std::vector<double> value, BackwardFn fn);
  // Gradient accumulator of an input, or an empty span if it needs none.
  std::span<double> grad_of(NodeId id);
  std::span<const double> value_of(NodeId id) const { return nodes_[id].value; }

 private:
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  std::optional<BackwardFault> fault_;
};

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// out[r] = x[r] + table[r % table.rows()]; a 1xC table is a broadcast bias.
Tensor add_tiled(const Tensor& x, const Tensor& table);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor col_slice(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);

Tensor softmax_rows(const Tensor& m);
Tensor gelu(const Tensor& x);

// Row-wise layer normalization (1/d variance) with per-column affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Channel-major C x L input. Channels form `groups` contiguous groups; each
// group is normalized over its channels and the positions of one segment.
Tensor group_norm(const Tensor& z, std::size_t groups, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5,
                  std::size_t segment = 0);

// Channel-major C x L input, C x k kernels (k odd), zero same-padding at
// segment edges, cross-correlation. segment 0 means the whole row.
Tensor depthwise_conv1d(const Tensor& z, const Tensor& kernels,
                        const Tensor& bias, std::size_t segment = 0);

// For every segment s of `segment` rows: A_s * B_s^T, stacked to N x segment.
Tensor block_matmul_nt(const Tensor& a, const Tensor& b, std::size_t segment);
// For every segment s: S_s * V_s with S_s segment x segment, stacked N x d.
Tensor block_matmul(const Tensor& s, const Tensor& v, std::size_t segment);

// Collapses each segment of rows into sum_f w[f] * z[s*segment + f].
Tensor weighted_pool(const Tensor& z, const Tensor& weights);

// N x c -> N x 1 Euclidean row norms. The gradient at a zero row is zero.
Tensor row_norms(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- finite differences ----------------------------------------------------

using ScalarFn =
    std::function<Tensor(Graph&, const std::vector<Tensor>& params)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::vector<double> per_param;  // max relative error of each parameter
};

// Compares autodiff gradients of f against five-point central differences
// for every entry of every parameter. Relative error is
// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
FiniteDiffReport finite_diff_check(
    const ScalarFn& f, std::vector<Array> params, double eps = 1e-4,
    std::optional<BackwardFault> fault = std::nullopt);

}  // namespace crossformer
