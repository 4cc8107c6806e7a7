#include "toxattr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace toxattr::autodiff {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw std::invalid_argument(where + ": " + what);
}

// C += effA * effB where effX is X transposed when the flag is set.
// Loop orders chosen for sequential access on the inner dimension.
void gemm_accum(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& c) {
  const std::size_t m = c.shape[0];
  const std::size_t n = c.shape[1];
  const std::size_t k = ta ? a.shape[0] : a.shape[1];
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  const std::size_t lda = a.shape[1];
  const std::size_t ldb = b.shape[1];

  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = pc + i * n;
      const double* arow = pa + i * lda;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = pb + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = pc + i * n;
      const double* arow = pa + i * lda;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = pb + j * ldb;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = pa + p * lda;
      const double* brow = pb + p * ldb;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = arow[i];
        double* crow = pc + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += pa[p * lda + i] * pb[j * ldb + p];
        crow[j] += acc;
      }
    }
  }
}

void softmax_row(const double* x, double* y, std::size_t n) {
  double m = x[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - m);
    sum += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
}

}  // namespace

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kEmbeddingGather: return "embedding_gather";
    case OpKind::kMaskedMeanPool: return "masked_mean_pool";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kSelect: return "select";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatCols: return "concat_cols";
  }
  return "?";
}

std::string Graph::node_label(NodeId id) const {
  const Node& n = nodes_[id];
  std::string label = std::string(op_kind_name(n.kind)) + "#" + std::to_string(id);
  if (!n.name.empty()) label += "(" + n.name + ")";
  return label;
}

NodeId Graph::push(Node node, std::string name) {
  node.name = std::move(name);
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Node& Graph::checked(NodeId id, const char* op) const {
  if (id >= nodes_.size()) fail(op, "input node id " + std::to_string(id) + " out of range");
  return nodes_[id];
}

NodeId Graph::leaf(std::vector<std::size_t> shape, std::string name) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.shape = std::move(shape);
  NodeId id = push(std::move(n), std::move(name));
  leaves_.push_back(id);
  return id;
}

NodeId Graph::constant(Tensor value, std::string name) {
  if (!value.all_finite()) fail("constant", "non-finite value in constant '" + name + "'");
  Node n;
  n.kind = OpKind::kConstant;
  n.shape = value.shape;
  n.value = std::move(value);
  return push(std::move(n), std::move(name));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_a, bool transpose_b, std::string name) {
  const Node& na = checked(a, "matmul");
  const Node& nb = checked(b, "matmul");
  if (na.shape.size() != 2 || nb.shape.size() != 2)
    fail("matmul", "rank-2 inputs required at node '" + name + "' (got " +
                       std::to_string(na.shape.size()) + " and " +
                       std::to_string(nb.shape.size()) + ")");
  std::size_t m = transpose_a ? na.shape[1] : na.shape[0];
  std::size_t ka = transpose_a ? na.shape[0] : na.shape[1];
  std::size_t kb = transpose_b ? nb.shape[1] : nb.shape[0];
  std::size_t nn = transpose_b ? nb.shape[0] : nb.shape[1];
  if (ka != kb)
    fail("matmul", "inner dimensions disagree at node '" + name + "': " + std::to_string(ka) +
                       " vs " + std::to_string(kb));
  Node n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a, b};
  n.shape = {m, nn};
  n.transpose_a = transpose_a;
  n.transpose_b = transpose_b;
  return push(std::move(n), std::move(name));
}

NodeId Graph::add(NodeId a, NodeId b, std::string name) {
  const Node& na = checked(a, "add");
  const Node& nb = checked(b, "add");
  if (na.shape != nb.shape)
    fail("add", "shape mismatch at node '" + name + "'");
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.shape = na.shape;
  return push(std::move(n), std::move(name));
}

NodeId Graph::mul(NodeId a, NodeId b, std::string name) {
  const Node& na = checked(a, "mul");
  const Node& nb = checked(b, "mul");
  if (na.shape != nb.shape)
    fail("mul", "shape mismatch at node '" + name + "'");
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  n.shape = na.shape;
  return push(std::move(n), std::move(name));
}

NodeId Graph::add_bias(NodeId x, NodeId bias, std::string name) {
  const Node& nx = checked(x, "add_bias");
  const Node& nb = checked(bias, "add_bias");
  if (nx.shape.size() != 2 || nb.shape.size() != 1 || nb.shape[0] != nx.shape[1])
    fail("add_bias", "expected [m,n] and [n] at node '" + name + "'");
  Node n;
  n.kind = OpKind::kAddBias;
  n.inputs = {x, bias};
  n.shape = nx.shape;
  return push(std::move(n), std::move(name));
}

NodeId Graph::relu(NodeId x, std::string name) {
  const Node& nx = checked(x, "relu");
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {x};
  n.shape = nx.shape;
  return push(std::move(n), std::move(name));
}

NodeId Graph::softmax(NodeId x, std::string name) {
  const Node& nx = checked(x, "softmax");
  if (nx.shape.empty() || nx.shape.size() > 2)
    fail("softmax", "rank 1 or 2 input required at node '" + name + "'");
  Node n;
  n.kind = OpKind::kSoftmax;
  n.inputs = {x};
  n.shape = nx.shape;
  return push(std::move(n), std::move(name));
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta, double epsilon, std::string name) {
  const Node& nx = checked(x, "layer_norm");
  const Node& ng = checked(gamma, "layer_norm");
  const Node& nb = checked(beta, "layer_norm");
  if (nx.shape.empty() || nx.shape.size() > 2)
    fail("layer_norm", "rank 1 or 2 input required at node '" + name + "'");
  std::size_t width = nx.shape.back();
  if (ng.shape != std::vector<std::size_t>{width} || nb.shape != std::vector<std::size_t>{width})
    fail("layer_norm", "gamma/beta must have shape [" + std::to_string(width) + "] at node '" +
                           name + "'");
  if (epsilon <= 0.0) fail("layer_norm", "epsilon must be positive at node '" + name + "'");
  Node n;
  n.kind = OpKind::kLayerNorm;
  n.inputs = {x, gamma, beta};
  n.shape = nx.shape;
  n.epsilon = epsilon;
  return push(std::move(n), std::move(name));
}

NodeId Graph::embedding_gather(NodeId table, std::vector<std::uint32_t> ids, std::string name) {
  const Node& nt = checked(table, "embedding_gather");
  if (nt.shape.size() != 2) fail("embedding_gather", "table must be rank 2 at node '" + name + "'");
  if (ids.empty()) fail("embedding_gather", "empty id list at node '" + name + "'");
  for (std::uint32_t id : ids)
    if (id >= nt.shape[0])
      fail("embedding_gather", "id " + std::to_string(id) + " out of range at node '" + name + "'");
  Node n;
  n.kind = OpKind::kEmbeddingGather;
  n.inputs = {table};
  n.shape = {ids.size(), nt.shape[1]};
  n.indices = std::move(ids);
  return push(std::move(n), std::move(name));
}

NodeId Graph::masked_mean_pool(NodeId x, std::vector<double> mask, std::string name) {
  const Node& nx = checked(x, "masked_mean_pool");
  if (nx.shape.size() != 2) fail("masked_mean_pool", "rank-2 input required at node '" + name + "'");
  if (mask.size() != nx.shape[0])
    fail("masked_mean_pool", "mask length " + std::to_string(mask.size()) +
                                 " does not match rows at node '" + name + "'");
  double count = 0.0;
  for (double v : mask) {
    if (v != 0.0 && v != 1.0) fail("masked_mean_pool", "mask entries must be 0 or 1 at node '" + name + "'");
    count += v;
  }
  if (count == 0.0) fail("masked_mean_pool", "all-zero mask at node '" + name + "'");
  Node n;
  n.kind = OpKind::kMaskedMeanPool;
  n.inputs = {x};
  n.shape = {1, nx.shape[1]};
  n.mask = std::move(mask);
  return push(std::move(n), std::move(name));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::uint32_t target, std::string name) {
  const Node& nl = checked(logits, "softmax_cross_entropy");
  std::size_t classes = 0;
  if (nl.shape.size() == 1) {
    classes = nl.shape[0];
  } else if (nl.shape.size() == 2 && nl.shape[0] == 1) {
    classes = nl.shape[1];
  } else {
    fail("softmax_cross_entropy", "logits must be [C] or [1,C] at node '" + name + "'");
  }
  if (target >= classes)
    fail("softmax_cross_entropy", "target " + std::to_string(target) + " out of range at node '" +
                                      name + "'");
  Node n;
  n.kind = OpKind::kSoftmaxCrossEntropy;
  n.inputs = {logits};
  n.shape = {};
  n.indices = {target};
  return push(std::move(n), std::move(name));
}

NodeId Graph::select(NodeId x, std::vector<std::uint32_t> index, std::string name) {
  const Node& nx = checked(x, "select");
  if (index.size() != nx.shape.size())
    fail("select", "index rank mismatch at node '" + name + "'");
  for (std::size_t i = 0; i < index.size(); ++i)
    if (index[i] >= nx.shape[i]) fail("select", "index out of range at node '" + name + "'");
  Node n;
  n.kind = OpKind::kSelect;
  n.inputs = {x};
  n.shape = {};
  n.indices = std::move(index);
  return push(std::move(n), std::move(name));
}

NodeId Graph::slice_cols(NodeId x, std::size_t begin, std::size_t end, std::string name) {
  const Node& nx = checked(x, "slice_cols");
  if (nx.shape.size() != 2) fail("slice_cols", "rank-2 input required at node '" + name + "'");
  if (begin >= end || end > nx.shape[1])
    fail("slice_cols", "bad column range [" + std::to_string(begin) + "," + std::to_string(end) +
                           ") at node '" + name + "'");
  Node n;
  n.kind = OpKind::kSliceCols;
  n.inputs = {x};
  n.shape = {nx.shape[0], end - begin};
  n.col_begin = begin;
  n.col_end = end;
  return push(std::move(n), std::move(name));
}

NodeId Graph::concat_cols(const std::vector<NodeId>& xs, std::string name) {
  if (xs.empty()) fail("concat_cols", "no inputs at node '" + name + "'");
  std::size_t rows = 0, cols = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Node& nx = checked(xs[i], "concat_cols");
    if (nx.shape.size() != 2) fail("concat_cols", "rank-2 inputs required at node '" + name + "'");
    if (i == 0) rows = nx.shape[0];
    if (nx.shape[0] != rows) fail("concat_cols", "row mismatch at node '" + name + "'");
    cols += nx.shape[1];
  }
  Node n;
  n.kind = OpKind::kConcatCols;
  n.inputs = xs;
  n.shape = {rows, cols};
  return push(std::move(n), std::move(name));
}

void Graph::set_output(NodeId id) {
  const Node& n = checked(id, "set_output");
  if (!n.shape.empty())
    fail("set_output", "output must be a scalar, node " + node_label(id) + " has shape " +
                           Tensor(n.shape).shape_str());
  output_ = id;
  has_output_ = true;
}

NodeId Graph::output() const {
  if (!has_output_) fail("output", "no output node designated");
  return output_;
}

// ---------------------------------------------------------------------------

Evaluator::Evaluator(const Graph& graph) : graph_(&graph) {
  std::size_t n = graph.size();
  bound_.assign(n, nullptr);
  values_.resize(n);
  adjoints_.resize(n);
  active_.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Node& node = graph.node(static_cast<NodeId>(i));
    if (node.kind != OpKind::kLeaf && node.kind != OpKind::kConstant)
      values_[i] = Tensor(node.shape);
  }
}

const Tensor& Evaluator::val(NodeId id) const {
  const Node& node = graph_->node(id);
  if (node.kind == OpKind::kLeaf) return *bound_[id];
  if (node.kind == OpKind::kConstant) return node.value;
  return values_[id];
}

const Tensor& Evaluator::value(NodeId id) const { return val(id); }

void Evaluator::bind(const LeafBindings& bindings) {
  for (const auto& [id, tensor] : bindings) {
    if (id >= graph_->size() || graph_->node(id).kind != OpKind::kLeaf)
      fail("evaluate", "binding for non-leaf node " + std::to_string(id));
    if (tensor == nullptr) fail("evaluate", "null binding for " + graph_->node_label(id));
    if (tensor->shape != graph_->node(id).shape)
      fail("evaluate", "bound tensor shape " + tensor->shape_str() + " does not match leaf " +
                           graph_->node_label(id) + " " + Tensor(graph_->node(id).shape).shape_str());
    if (!tensor->all_finite())
      fail("evaluate", "non-finite value bound to " + graph_->node_label(id));
    bound_[id] = tensor;
  }
  for (NodeId id : graph_->leaves())
    if (bound_[id] == nullptr) fail("evaluate", "unbound leaf " + graph_->node_label(id));
}

double Evaluator::forward(const LeafBindings& bindings) {
  bind(bindings);
  compute_forward();
  return val(graph_->output()).data[0];
}

void Evaluator::compute_forward() {
  for (NodeId id = 0; id < graph_->size(); ++id) {
    const Node& node = graph_->node(id);
    if (node.kind == OpKind::kLeaf || node.kind == OpKind::kConstant) continue;
    compute_node(id);
    if (!values_[id].all_finite())
      throw std::runtime_error("evaluate: non-finite value at node " + graph_->node_label(id));
  }
}

void Evaluator::compute_node(NodeId id) {
  const Node& node = graph_->node(id);
  Tensor& out = values_[id];

  switch (node.kind) {
    case OpKind::kMatMul: {
      std::fill(out.data.begin(), out.data.end(), 0.0);
      gemm_accum(val(node.inputs[0]), node.transpose_a, val(node.inputs[1]), node.transpose_b, out);
      break;
    }
    case OpKind::kAdd: {
      const Tensor& a = val(node.inputs[0]);
      const Tensor& b = val(node.inputs[1]);
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
      break;
    }
    case OpKind::kMul: {
      const Tensor& a = val(node.inputs[0]);
      const Tensor& b = val(node.inputs[1]);
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
      break;
    }
    case OpKind::kAddBias: {
      const Tensor& x = val(node.inputs[0]);
      const Tensor& b = val(node.inputs[1]);
      std::size_t rows = x.shape[0], cols = x.shape[1];
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out.data[i * cols + j] = x.data[i * cols + j] + b.data[j];
      break;
    }
    case OpKind::kRelu: {
      const Tensor& x = val(node.inputs[0]);
      for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
      break;
    }
    case OpKind::kSoftmax: {
      const Tensor& x = val(node.inputs[0]);
      std::size_t cols = x.shape.back();
      std::size_t rows = x.numel() / cols;
      for (std::size_t i = 0; i < rows; ++i)
        softmax_row(x.data.data() + i * cols, out.data.data() + i * cols, cols);
      break;
    }
    case OpKind::kLayerNorm: {
      const Tensor& x = val(node.inputs[0]);
      const Tensor& gamma = val(node.inputs[1]);
      const Tensor& beta = val(node.inputs[2]);
      std::size_t cols = x.shape.back();
      std::size_t rows = x.numel() / cols;
      for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = x.data.data() + i * cols;
        double* yr = out.data.data() + i * cols;
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + node.epsilon);
        for (std::size_t j = 0; j < cols; ++j)
          yr[j] = gamma.data[j] * ((xr[j] - mean) * inv) + beta.data[j];
      }
      break;
    }
    case OpKind::kEmbeddingGather: {
      const Tensor& table = val(node.inputs[0]);
      std::size_t d = table.shape[1];
      for (std::size_t i = 0; i < node.indices.size(); ++i) {
        const double* src = table.data.data() + static_cast<std::size_t>(node.indices[i]) * d;
        std::copy(src, src + d, out.data.data() + i * d);
      }
      break;
    }
    case OpKind::kMaskedMeanPool: {
      const Tensor& x = val(node.inputs[0]);
      std::size_t rows = x.shape[0], cols = x.shape[1];
      double count = 0.0;
      for (double v : node.mask) count += v;
      std::fill(out.data.begin(), out.data.end(), 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        if (node.mask[i] == 0.0) continue;
        const double* xr = x.data.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) out.data[j] += xr[j];
      }
      for (std::size_t j = 0; j < cols; ++j) out.data[j] /= count;
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      const Tensor& logits = val(node.inputs[0]);
      std::size_t c = logits.numel();
      const double* xr = logits.data.data();
      double m = xr[0];
      for (std::size_t j = 1; j < c; ++j) m = std::max(m, xr[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) sum += std::exp(xr[j] - m);
      out.data[0] = m + std::log(sum) - xr[node.indices[0]];
      break;
    }
    case OpKind::kSelect: {
      const Tensor& x = val(node.inputs[0]);
      std::size_t flat = 0;
      for (std::size_t i = 0; i < node.indices.size(); ++i)
        flat = flat * x.shape[i] + node.indices[i];
      out.data[0] = x.data[flat];
      break;
    }
    case OpKind::kSliceCols: {
      const Tensor& x = val(node.inputs[0]);
      std::size_t rows = x.shape[0], cols = x.shape[1], width = node.col_end - node.col_begin;
      for (std::size_t i = 0; i < rows; ++i)
        std::copy(x.data.data() + i * cols + node.col_begin,
                  x.data.data() + i * cols + node.col_end, out.data.data() + i * width);
      break;
    }
    case OpKind::kConcatCols: {
      std::size_t rows = node.shape[0], total = node.shape[1];
      std::size_t offset = 0;
      for (NodeId in : node.inputs) {
        const Tensor& x = val(in);
        std::size_t cols = x.shape[1];
        for (std::size_t i = 0; i < rows; ++i)
          std::copy(x.data.data() + i * cols, x.data.data() + (i + 1) * cols,
                    out.data.data() + i * total + offset);
        offset += cols;
      }
      break;
    }
    case OpKind::kLeaf:
    case OpKind::kConstant:
      break;
  }
}

EvalResult Evaluator::run(const LeafBindings& bindings, const std::vector<NodeId>& wrt) {
  EvalResult result;
  result.output = forward(bindings);
  backward(wrt);
  for (NodeId id : wrt) result.gradients[id] = adjoints_[id];
  return result;
}

void Evaluator::backward(const std::vector<NodeId>& wrt) {
  std::fill(active_.begin(), active_.end(), 0);
  for (NodeId id : wrt) {
    if (id >= graph_->size() || graph_->node(id).kind != OpKind::kLeaf)
      fail("evaluate", "gradient requested for non-leaf node " + std::to_string(id));
    active_[id] = 1;
  }
  for (NodeId id = 0; id < graph_->size(); ++id) {
    const Node& node = graph_->node(id);
    for (NodeId in : node.inputs)
      if (active_[in]) {
        active_[id] = 1;
        break;
      }
  }

  for (NodeId id = 0; id < graph_->size(); ++id) {
    if (!active_[id]) continue;
    if (adjoints_[id].shape != graph_->node(id).shape) adjoints_[id] = Tensor(graph_->node(id).shape);
    std::fill(adjoints_[id].data.begin(), adjoints_[id].data.end(), 0.0);
  }

  NodeId out = graph_->output();
  if (!active_[out]) return;  // output does not depend on any wrt leaf
  adjoints_[out].data[0] = 1.0;

  for (NodeId id = out + 1; id-- > 0;) {
    if (!active_[id]) continue;
    backward_node(id);
  }
}

void Evaluator::backward_node(NodeId id) {
  const Node& node = graph_->node(id);
  const Tensor& grad = adjoints_[id];

  auto adj = [&](std::size_t slot) -> Tensor* {
    NodeId in = node.inputs[slot];
    return active_[in] ? &adjoints_[in] : nullptr;
  };

  switch (node.kind) {
    case OpKind::kMatMul: {
      const Tensor& a = val(node.inputs[0]);
      const Tensor& b = val(node.inputs[1]);
      bool ta = node.transpose_a, tb = node.transpose_b;
      if (Tensor* da = adj(0)) {
        if (!ta && !tb) gemm_accum(grad, false, b, true, *da);
        else if (ta && !tb) gemm_accum(b, false, grad, true, *da);
        else if (!ta && tb) gemm_accum(grad, false, b, false, *da);
        else gemm_accum(b, true, grad, true, *da);
      }
      if (Tensor* db = adj(1)) {
        if (!ta && !tb) gemm_accum(a, true, grad, false, *db);
        else if (ta && !tb) gemm_accum(a, false, grad, false, *db);
        else if (!ta && tb) gemm_accum(grad, true, a, false, *db);
        else gemm_accum(grad, true, a, true, *db);
      }
      break;
    }
    case OpKind::kAdd: {
      for (std::size_t s = 0; s < 2; ++s)
        if (Tensor* d = adj(s))
          for (std::size_t i = 0; i < grad.data.size(); ++i) d->data[i] += grad.data[i];
      break;
    }
    case OpKind::kMul: {
      const Tensor& a = val(node.inputs[0]);
      const Tensor& b = val(node.inputs[1]);
      if (Tensor* da = adj(0))
        for (std::size_t i = 0; i < grad.data.size(); ++i) da->data[i] += grad.data[i] * b.data[i];
      if (Tensor* db = adj(1))
        for (std::size_t i = 0; i < grad.data.size(); ++i) db->data[i] += grad.data[i] * a.data[i];
      break;
    }
    case OpKind::kAddBias: {
      std::size_t rows = node.shape[0], cols = node.shape[1];
      if (Tensor* dx = adj(0))
        for (std::size_t i = 0; i < grad.data.size(); ++i) dx->data[i] += grad.data[i];
      if (Tensor* db = adj(1))
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) db->data[j] += grad.data[i * cols + j];
      break;
    }
    case OpKind::kRelu: {
      const Tensor& x = val(node.inputs[0]);
      if (Tensor* dx = adj(0))
        for (std::size_t i = 0; i < grad.data.size(); ++i)
          if (x.data[i] > 0.0) dx->data[i] += grad.data[i];
      break;
    }
    case OpKind::kSoftmax: {
      const Tensor& y = values_[id];
      if (Tensor* dx = adj(0)) {
        std::size_t cols = y.shape.back();
        std::size_t rows = y.numel() / cols;
        for (std::size_t i = 0; i < rows; ++i) {
          const double* yr = y.data.data() + i * cols;
          const double* gr = grad.data.data() + i * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
          double* dr = dx->data.data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
      }
      break;
    }
    case OpKind::kLayerNorm: {
      const Tensor& x = val(node.inputs[0]);
      const Tensor& gamma = val(node.inputs[1]);
      Tensor* dx = adj(0);
      Tensor* dgamma = adj(1);
      Tensor* dbeta = adj(2);
      std::size_t cols = x.shape.back();
      std::size_t rows = x.numel() / cols;
      std::vector<double> xhat(cols), dxhat(cols);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = x.data.data() + i * cols;
        const double* gr = grad.data.data() + i * cols;
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + node.epsilon);
        for (std::size_t j = 0; j < cols; ++j) xhat[j] = (xr[j] - mean) * inv;
        if (dbeta)
          for (std::size_t j = 0; j < cols; ++j) dbeta->data[j] += gr[j];
        if (dgamma)
          for (std::size_t j = 0; j < cols; ++j) dgamma->data[j] += gr[j] * xhat[j];
        if (dx) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            dxhat[j] = gr[j] * gamma.data[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
          }
          mean_dxhat /= static_cast<double>(cols);
          mean_dxhat_xhat /= static_cast<double>(cols);
          double* dr = dx->data.data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j)
            dr[j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
      }
      break;
    }
    case OpKind::kEmbeddingGather: {
      if (Tensor* dt = adj(0)) {
        std::size_t d = dt->shape[1];
        for (std::size_t i = 0; i < node.indices.size(); ++i) {
          double* dst = dt->data.data() + static_cast<std::size_t>(node.indices[i]) * d;
          const double* src = grad.data.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
      break;
    }
    case OpKind::kMaskedMeanPool: {
      if (Tensor* dx = adj(0)) {
        std::size_t rows = dx->shape[0], cols = dx->shape[1];
        double count = 0.0;
        for (double v : node.mask) count += v;
        for (std::size_t i = 0; i < rows; ++i) {
          if (node.mask[i] == 0.0) continue;
          double* dr = dx->data.data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j) dr[j] += grad.data[j] / count;
        }
      }
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      if (Tensor* dl = adj(0)) {
        const Tensor& logits = val(node.inputs[0]);
        std::size_t c = logits.numel();
        std::vector<double> p(c);
        softmax_row(logits.data.data(), p.data(), c);
        double g = grad.data[0];
        for (std::size_t j = 0; j < c; ++j)
          dl->data[j] += g * (p[j] - (j == node.indices[0] ? 1.0 : 0.0));
      }
      break;
    }
    case OpKind::kSelect: {
      if (Tensor* dx = adj(0)) {
        const Tensor& x = val(node.inputs[0]);
        std::size_t flat = 0;
        for (std::size_t i = 0; i < node.indices.size(); ++i)
          flat = flat * x.shape[i] + node.indices[i];
        dx->data[flat] += grad.data[0];
      }
      break;
    }
    case OpKind::kSliceCols: {
      if (Tensor* dx = adj(0)) {
        std::size_t rows = dx->shape[0], cols = dx->shape[1], width = node.col_end - node.col_begin;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < width; ++j)
            dx->data[i * cols + node.col_begin + j] += grad.data[i * width + j];
      }
      break;
    }
    case OpKind::kConcatCols: {
      std::size_t rows = node.shape[0], total = node.shape[1];
      std::size_t offset = 0;
      for (std::size_t s = 0; s < node.inputs.size(); ++s) {
        std::size_t cols = graph_->node(node.inputs[s]).shape[1];
        if (Tensor* dx = adj(s)) {
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
              dx->data[i * cols + j] += grad.data[i * total + offset + j];
        }
        offset += cols;
      }
      break;
    }
    case OpKind::kLeaf:
    case OpKind::kConstant:
      break;
  }
}

// ---------------------------------------------------------------------------

EvalResult evaluate_with_gradient(const Graph& graph, const LeafBindings& bindings,
                                  const std::vector<NodeId>& wrt) {
  Evaluator evaluator(graph);
  return evaluator.run(bindings, wrt);
}

GradCheckReport compare_gradient_to_finite_difference(const Graph& graph,
                                                      const LeafBindings& bindings, NodeId wrt,
                                                      double step, const Tensor& analytic) {
  if (step <= 0.0) fail("finite_difference_check", "step must be positive");

  const Tensor* original = nullptr;
  for (const auto& [id, tensor] : bindings)
    if (id == wrt) original = tensor;
  if (original == nullptr) fail("finite_difference_check", "wrt leaf is not bound");
  if (analytic.shape != original->shape)
    fail("finite_difference_check", "analytic gradient shape mismatch");

  Tensor perturbed = *original;
  LeafBindings local = bindings;
  for (auto& [id, tensor] : local)
    if (id == wrt) tensor = &perturbed;

  Evaluator evaluator(graph);
  GradCheckReport report;
  report.step_size = step;
  for (std::size_t i = 0; i < perturbed.data.size(); ++i) {
    const double saved = perturbed.data[i];
    perturbed.data[i] = saved + step;
    double up = evaluator.forward(local);
    perturbed.data[i] = saved - step;
    double down = evaluator.forward(local);
    perturbed.data[i] = saved;
    double central = (up - down) / (2.0 * step);
    double a = analytic.data[i];
    double rel = std::abs(a - central) / std::max({std::abs(a), std::abs(central), 1e-12});
    if (rel > report.max_abs_rel_error) {
      report.max_abs_rel_error = rel;
      report.worst_coordinate = i;
    }
  }
  return report;
}

GradCheckReport finite_difference_check(const Graph& graph, const LeafBindings& bindings,
                                        NodeId wrt, double step) {
  EvalResult result = evaluate_with_gradient(graph, bindings, {wrt});
  return compare_gradient_to_finite_difference(graph, bindings, wrt, step,
                                               result.gradients.at(wrt));
}

}  // namespace toxattr::autodiff
