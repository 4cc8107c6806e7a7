#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "toxattr/tensor.hpp"

namespace toxattr::autodiff {

using NodeId = std::uint32_t;

enum class OpKind {
  kLeaf,
  kConstant,
  kMatMul,
  kAdd,
  kMul,
  kAddBias,
  kRelu,
  kSoftmax,
  kLayerNorm,
  kEmbeddingGather,
  kMaskedMeanPool,
  kSoftmaxCrossEntropy,
  kSelect,
  kSliceCols,
  kConcatCols,
};

const char* op_kind_name(OpKind kind);

struct Node {
  OpKind kind;
  std::vector<NodeId> inputs;
  std::vector<std::size_t> shape;
  std::string name;

  // Per-op attributes; unused fields stay at defaults.
  bool transpose_a = false;
  bool transpose_b = false;
  double epsilon = 0.0;                // layer norm
  std::vector<std::uint32_t> indices;  // gather ids / CE target / select index
  std::vector<double> mask;            // masked mean pool
  std::size_t col_begin = 0;           // slice
  std::size_t col_end = 0;
  Tensor value;                        // constants only
};

// A recorded computation over tensors. Built once per forward pass; leaves are
// placeholders whose values are bound at evaluation time, so one recording can
// be re-evaluated under different bindings. Ops validate shapes eagerly and
// errors name the offending node.
class Graph {
 public:
  NodeId leaf(std::vector<std::size_t> shape, std::string name);
  NodeId constant(Tensor value, std::string name = "");

  NodeId matmul(NodeId a, NodeId b, bool transpose_a = false, bool transpose_b = false,
                std::string name = "");
  NodeId add(NodeId a, NodeId b, std::string name = "");
  NodeId mul(NodeId a, NodeId b, std::string name = "");
  // x: [m,n], bias: [n]; bias added to every row.
  NodeId add_bias(NodeId x, NodeId bias, std::string name = "");
  NodeId relu(NodeId x, std::string name = "");
  // Softmax over the last axis; rank 1 or 2.
  NodeId softmax(NodeId x, std::string name = "");
  // Per-row normalization over the last axis, then y = gamma * xhat + beta.
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double epsilon, std::string name = "");
  // table: [V,d]; result row i is table[ids[i], :].
  NodeId embedding_gather(NodeId table, std::vector<std::uint32_t> ids, std::string name = "");
  // x: [S,d], mask of length S with entries 0/1; mean over rows with mask 1 -> [1,d].
  NodeId masked_mean_pool(NodeId x, std::vector<double> mask, std::string name = "");
  // logits: [C] or [1,C]; scalar -log softmax(logits)[target].
  NodeId softmax_cross_entropy(NodeId logits, std::uint32_t target, std::string name = "");
  // Scalar read of one element by multi-index.
  NodeId select(NodeId x, std::vector<std::uint32_t> index, std::string name = "");
  NodeId slice_cols(NodeId x, std::size_t begin, std::size_t end, std::string name = "");
  NodeId concat_cols(const std::vector<NodeId>& xs, std::string name = "");

  // The designated scalar output gradients are taken from.
  void set_output(NodeId id);
  NodeId output() const;
  bool has_output() const { return has_output_; }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[id]; }
  const std::vector<NodeId>& leaves() const { return leaves_; }
  const std::vector<std::size_t>& shape_of(NodeId id) const { return nodes_[id].shape; }
  std::string node_label(NodeId id) const;

 private:
  NodeId push(Node node, std::string name);
  const Node& checked(NodeId id, const char* op) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> leaves_;
  NodeId output_ = 0;
  bool has_output_ = false;
};

using LeafBindings = std::vector<std::pair<NodeId, const Tensor*>>;

struct EvalResult {
  double output = 0.0;
  std::map<NodeId, Tensor> gradients;
};

// Owns per-node value and adjoint buffers for one graph; reusable across
// evaluations with different bindings. Not thread-safe; make one per thread.
class Evaluator {
 public:
  explicit Evaluator(const Graph& graph);

  double forward(const LeafBindings& bindings);
  EvalResult run(const LeafBindings& bindings, const std::vector<NodeId>& wrt);

  // Value of any node after the most recent forward/run.
  const Tensor& value(NodeId id) const;
  const Graph& graph() const { return *graph_; }

 private:
  void bind(const LeafBindings& bindings);
  void compute_forward();
  void compute_node(NodeId id);
  void backward(const std::vector<NodeId>& wrt);
  void backward_node(NodeId id);
  const Tensor& val(NodeId id) const;

  const Graph* graph_;
  std::vector<const Tensor*> bound_;
  std::vector<Tensor> values_;
  std::vector<Tensor> adjoints_;
  std::vector<char> active_;
};

struct GradCheckReport {
  double max_abs_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double step_size = 0.0;
};

// Forward value and d(output)/d(leaf) for every leaf in wrt.
EvalResult evaluate_with_gradient(const Graph& graph, const LeafBindings& bindings,
                                  const std::vector<NodeId>& wrt);

// Central-difference check of the analytic gradient w.r.t. one leaf.
// Reported error is max over coordinates of
//   |analytic - central| / max(|analytic|, |central|, 1e-12).
GradCheckReport finite_difference_check(const Graph& graph, const LeafBindings& bindings,
                                        NodeId wrt, double step);

// Same comparison against a caller-supplied gradient tensor.
GradCheckReport compare_gradient_to_finite_difference(const Graph& graph,
                                                      const LeafBindings& bindings, NodeId wrt,
                                                      double step, const Tensor& analytic);

}  // namespace toxattr::autodiff
