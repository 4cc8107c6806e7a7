#include "support/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "toxattr/autodiff.hpp"
#include "toxattr/rng.hpp"

namespace toxattr::testsupport {

namespace ad = toxattr::autodiff;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double kink_margin = 0.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) {
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (kink_margin > 0.0 && std::abs(v) < kink_margin);
  }
  return t;
}

std::vector<std::uint32_t> random_index(Rng& rng, const std::vector<std::size_t>& shape) {
  std::vector<std::uint32_t> index;
  for (std::size_t dim : shape) index.push_back(static_cast<std::uint32_t>(rng.below(dim)));
  return index;
}

struct Case {
  ad::Graph graph;
  std::vector<std::pair<ad::NodeId, Tensor>> inputs;  // leaves to check

  void finish(ad::NodeId result, Rng& rng) {
    graph.set_output(graph.select(result, random_index(rng, graph.shape_of(result))));
  }

  double worst_error(double step) {
    ad::LeafBindings bindings;
    for (auto& [id, tensor] : inputs) bindings.emplace_back(id, &tensor);
    double worst = 0.0;
    for (auto& [id, tensor] : inputs) {
      ad::GradCheckReport report = ad::finite_difference_check(graph, bindings, id, step);
      worst = std::max(worst, report.max_abs_rel_error);
    }
    return worst;
  }
};

std::size_t dim(Rng& rng) { return 1 + rng.below(5); }
std::size_t dim2(Rng& rng) { return 2 + rng.below(4); }

}  // namespace

std::vector<OpCheckResult> check_all_primitive_ops(std::size_t cases_per_op, std::uint64_t seed,
                                                   double step) {
  Rng rng(seed);
  std::vector<OpCheckResult> results;

  auto sweep = [&](const std::string& name, auto&& build) {
    OpCheckResult result;
    result.op = name;
    result.cases = cases_per_op;
    for (std::size_t c = 0; c < cases_per_op; ++c) {
      Case cs;
      build(cs);
      result.worst_rel_error = std::max(result.worst_rel_error, cs.worst_error(step));
    }
    results.push_back(result);
  };

  sweep("matmul", [&](Case& cs) {
    std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    bool ta = rng.below(2) == 1, tb = rng.below(2) == 1;
    Tensor a = random_tensor(rng, ta ? std::vector<std::size_t>{k, m} : std::vector<std::size_t>{m, k});
    Tensor b = random_tensor(rng, tb ? std::vector<std::size_t>{n, k} : std::vector<std::size_t>{k, n});
    ad::NodeId la = cs.graph.leaf(a.shape, "a");
    ad::NodeId lb = cs.graph.leaf(b.shape, "b");
    cs.inputs = {{la, a}, {lb, b}};
    cs.finish(cs.graph.matmul(la, lb, ta, tb), rng);
  });

  sweep("add", [&](Case& cs) {
    std::vector<std::size_t> shape{dim(rng), dim(rng)};
    Tensor a = random_tensor(rng, shape), b = random_tensor(rng, shape);
    ad::NodeId la = cs.graph.leaf(shape, "a"), lb = cs.graph.leaf(shape, "b");
    cs.inputs = {{la, a}, {lb, b}};
    cs.finish(cs.graph.add(la, lb), rng);
  });

  sweep("mul", [&](Case& cs) {
    std::vector<std::size_t> shape{dim(rng), dim(rng)};
    Tensor a = random_tensor(rng, shape), b = random_tensor(rng, shape);
    ad::NodeId la = cs.graph.leaf(shape, "a"), lb = cs.graph.leaf(shape, "b");
    cs.inputs = {{la, a}, {lb, b}};
    cs.finish(cs.graph.mul(la, lb), rng);
  });

  sweep("add_bias", [&](Case& cs) {
    std::size_t m = dim(rng), n = dim(rng);
    Tensor x = random_tensor(rng, {m, n});
    Tensor b = random_tensor(rng, {n});
    ad::NodeId lx = cs.graph.leaf(x.shape, "x"), lb = cs.graph.leaf(b.shape, "b");
    cs.inputs = {{lx, x}, {lb, b}};
    cs.finish(cs.graph.add_bias(lx, lb), rng);
  });

  sweep("relu", [&](Case& cs) {
    // keep sample points away from the kink so central differences are valid
    Tensor x = random_tensor(rng, {dim(rng), dim(rng)}, 1e-3);
    ad::NodeId lx = cs.graph.leaf(x.shape, "x");
    cs.inputs = {{lx, x}};
    cs.finish(cs.graph.relu(lx), rng);
  });

  sweep("softmax", [&](Case& cs) {
    Tensor x = random_tensor(rng, {dim(rng), dim2(rng)});
    ad::NodeId lx = cs.graph.leaf(x.shape, "x");
    cs.inputs = {{lx, x}};
    cs.finish(cs.graph.softmax(lx), rng);
  });

  sweep("layer_norm", [&](Case& cs) {
    std::size_t n = dim2(rng);
    Tensor x = random_tensor(rng, {dim(rng), n});
    Tensor gamma = random_tensor(rng, {n});
    Tensor beta = random_tensor(rng, {n});
    ad::NodeId lx = cs.graph.leaf(x.shape, "x");
    ad::NodeId lg = cs.graph.leaf(gamma.shape, "gamma");
    ad::NodeId lb = cs.graph.leaf(beta.shape, "beta");
    cs.inputs = {{lx, x}, {lg, gamma}, {lb, beta}};
    cs.finish(cs.graph.layer_norm(lx, lg, lb, 1e-5), rng);
  });

  sweep("embedding_gather", [&](Case& cs) {
    std::size_t v = dim2(rng), d = dim(rng), s = dim(rng);
    Tensor table = random_tensor(rng, {v, d});
    std::vector<std::uint32_t> ids;
    for (std::size_t i = 0; i < s; ++i) ids.push_back(static_cast<std::uint32_t>(rng.below(v)));
    ad::NodeId lt = cs.graph.leaf(table.shape, "table");
    cs.inputs = {{lt, table}};
    cs.finish(cs.graph.embedding_gather(lt, ids), rng);
  });

  sweep("masked_mean_pool", [&](Case& cs) {
    std::size_t s = dim(rng), d = dim(rng);
    Tensor x = random_tensor(rng, {s, d});
    std::vector<double> mask(s, 0.0);
    mask[rng.below(s)] = 1.0;
    for (double& m : mask)
      if (rng.below(2) == 1) m = 1.0;
    ad::NodeId lx = cs.graph.leaf(x.shape, "x");
    cs.inputs = {{lx, x}};
    cs.finish(cs.graph.masked_mean_pool(lx, mask), rng);
  });

  sweep("softmax_cross_entropy", [&](Case& cs) {
    std::size_t c = dim2(rng);
    Tensor logits = random_tensor(rng, {c});
    ad::NodeId ll = cs.graph.leaf(logits.shape, "logits");
    cs.inputs = {{ll, logits}};
    ad::NodeId loss =
        cs.graph.softmax_cross_entropy(ll, static_cast<std::uint32_t>(rng.below(c)));
    cs.graph.set_output(loss);
  });

  sweep("select", [&](Case& cs) {
    Tensor x = random_tensor(rng, {dim(rng), dim(rng)});
    ad::NodeId lx = cs.graph.leaf(x.shape, "x");
    cs.inputs = {{lx, x}};
    cs.graph.set_output(cs.graph.select(lx, random_index(rng, x.shape)));
  });

  sweep("slice_cols", [&](Case& cs) {
    std::size_t m = dim(rng), n = dim2(rng);
    Tensor x = random_tensor(rng, {m, n});
    std::size_t begin = rng.below(n - 1);
    std::size_t end = begin + 1 + rng.below(n - begin);
    ad::NodeId lx = cs.graph.leaf(x.shape, "x");
    cs.inputs = {{lx, x}};
    cs.finish(cs.graph.slice_cols(lx, begin, end), rng);
  });

  sweep("concat_cols", [&](Case& cs) {
    std::size_t m = dim(rng);
    std::size_t parts = 2 + rng.below(3);
    std::vector<ad::NodeId> nodes;
    for (std::size_t p = 0; p < parts; ++p) {
      Tensor x = random_tensor(rng, {m, dim(rng)});
      ad::NodeId lx = cs.graph.leaf(x.shape, "x" + std::to_string(p));
      cs.inputs.emplace_back(lx, std::move(x));
      nodes.push_back(lx);
    }
    cs.finish(cs.graph.concat_cols(nodes), rng);
  });

  return results;
}

double check_model_gradients(const model::ModelConfig& config, std::size_t n_examples,
                             std::uint64_t seed, double step) {
  Rng rng(seed);
  model::ModelParams params = model::init_model(config);
  // Check at a well-scaled random parameter point. The timid training init
  // (zero head, +-0.05 weights) leaves some gradient coordinates near 1e-9,
  // where central differences are pure rounding noise relative to tolerance.
  model::for_each_tensor(params, [&](const std::string& name, Tensor& tensor) {
    if (name.ends_with("_gamma")) {
      for (double& v : tensor.data) v = 1.0 + rng.uniform(-0.2, 0.2);
    } else {
      for (double& v : tensor.data) v = rng.uniform(-0.6, 0.6);
    }
  });

  // Random short examples with labels.
  std::vector<text::EncodedExample> examples(n_examples);
  for (text::EncodedExample& example : examples) {
    example.ids.assign(config.max_len, text::Vocabulary::kPadId);
    example.mask.assign(config.max_len, 0);
    std::size_t len = 1 + rng.below(config.max_len);
    for (std::size_t i = 0; i < len; ++i) {
      example.ids[i] = static_cast<std::uint32_t>(rng.below(config.vocab_size));
      example.mask[i] = 1;
    }
    example.label_index = static_cast<int>(rng.below(config.n_classes));
  }

  std::vector<const text::EncodedExample*> batch;
  for (const text::EncodedExample& e : examples) batch.push_back(&e);
  model::ForwardGraph fg = model::build_loss_graph(config, params, batch);

  double worst = 0.0;
  for (const auto& [name, leaf] : fg.param_leaves) {
    ad::GradCheckReport report =
        ad::finite_difference_check(fg.graph, fg.param_bindings, leaf, step);
    worst = std::max(worst, report.max_abs_rel_error);
  }
  return worst;
}

}  // namespace toxattr::testsupport
