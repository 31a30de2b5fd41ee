#include "lgaf/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <stdexcept>

#include "lgaf/gradcheck.hpp"
#include "lgaf/margin.hpp"
#include "lgaf/model.hpp"
#include "lgaf/ops.hpp"
#include "lgaf/rng.hpp"

namespace lgaf {

namespace {

using D = Tensor<double>;

struct Case {
  std::function<D()> fn;
  std::vector<D> inputs;
};

class Maker {
 public:
  explicit Maker(std::uint64_t seed)
      : rng_(RngStream(seed).substream("gradcheck_suite")), weights_(RngStream(seed).substream("weights")) {}

  D uniform(Shape shape, double lo, double hi, bool grad = true) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = lo + (hi - lo) * rng_.uniform();
    return D(std::move(shape), std::move(v), grad);
  }

  // Magnitudes in [0.2, 1] with random sign, away from the relu kink.
  D nonzero(Shape shape) {
    auto t = uniform(std::move(shape), 0.2, 1.0);
    for (auto& x : t.mutable_data()) x = rng_.uniform() < 0.5 ? -x : x;
    return t;
  }

  // Random positive output weights so no op is checked through a plain sum.
  // They depend only on the output shape, so repeated evaluations agree.
  D weigh(const D& y) const {
    RngStream r = weights_.substream("shape", static_cast<std::uint64_t>(y.numel()));
    std::vector<double> w(static_cast<std::size_t>(y.numel()));
    for (auto& v : w) v = 0.5 + r.uniform();
    return sum(mul(y, D(y.shape(), std::move(w))));
  }

 private:
  RngStream rng_;
  RngStream weights_;
};

using CaseFactory = std::function<Case(Maker&)>;


std::vector<std::pair<std::string, CaseFactory>> op_cases() {
  std::vector<std::pair<std::string, CaseFactory>> cases;
  auto add_case = [&](std::string name, CaseFactory f) { cases.emplace_back(std::move(name), std::move(f)); };

  add_case("conv2d", [](Maker& m) {
    auto x = m.uniform({2, 3, 5, 5}, -1, 1), w = m.uniform({2, 3, 3, 3}, -1, 1), b = m.uniform({2}, -1, 1);
    return Case{[=] { return m.weigh(conv2d(x, w, b, 2, 1)); }, {x, w, b}};
  });
  add_case("matmul", [](Maker& m) {
    auto a = m.uniform({3, 4}, -1, 1), b = m.uniform({4, 5}, -1, 1);
    return Case{[=] { return m.weigh(matmul(a, b)); }, {a, b}};
  });
  add_case("linear", [](Maker& m) {
    auto x = m.uniform({3, 4}, -1, 1), w = m.uniform({4, 5}, -1, 1), b = m.uniform({5}, -1, 1);
    return Case{[=] { return m.weigh(linear(x, w, b)); }, {x, w, b}};
  });
  add_case("global_avg_pool", [](Maker& m) {
    auto x = m.uniform({2, 3, 4, 4}, -1, 1);
    return Case{[=] { return m.weigh(global_avg_pool(x)); }, {x}};
  });
  add_case("relu", [](Maker& m) {
    auto x = m.nonzero({3, 4});
    return Case{[=] { return m.weigh(relu(x)); }, {x}};
  });
  add_case("sigmoid", [](Maker& m) {
    auto x = m.uniform({3, 4}, -2, 2);
    return Case{[=] { return m.weigh(sigmoid(x)); }, {x}};
  });
  add_case("l2_norm", [](Maker& m) {
    auto x = m.nonzero({3, 4});
    return Case{[=] { return m.weigh(l2_norm(x)); }, {x}};
  });
  add_case("l2_normalize", [](Maker& m) {
    auto x = m.nonzero({3, 4});
    return Case{[=] { return add(m.weigh(l2_normalize(x, 1)), m.weigh(l2_normalize(x, 0))); }, {x}};
  });
  add_case("concat", [](Maker& m) {
    auto a = m.uniform({2, 3}, -1, 1), b = m.uniform({2, 2}, -1, 1);
    return Case{[=] { return m.weigh(concat(std::vector<D>{a, b}, 1)); }, {a, b}};
  });
  add_case("add", [](Maker& m) {
    auto a = m.uniform({3, 4}, -1, 1), b = m.uniform({3, 4}, -1, 1);
    return Case{[=] { return m.weigh(add(a, b)); }, {a, b}};
  });
  add_case("mul", [](Maker& m) {
    auto a = m.uniform({3, 4}, -1, 1), b = m.uniform({3, 4}, -1, 1);
    return Case{[=] { return m.weigh(mul(a, b)); }, {a, b}};
  });
  add_case("scale", [](Maker& m) {
    auto x = m.uniform({3, 4}, -1, 1);
    return Case{[=] { return m.weigh(scale(x, -1.7)); }, {x}};
  });
  add_case("sum", [](Maker& m) {
    auto x = m.uniform({3, 4}, -1, 1);
    return Case{[=] { return sum(mul(x, x)); }, {x}};
  });
  add_case("reshape", [](Maker& m) {
    auto x = m.uniform({2, 3, 2}, -1, 1);
    return Case{[=] { return m.weigh(reshape(x, Shape{3, 4})); }, {x}};
  });
  add_case("spatial_gate", [](Maker& m) {
    auto x = m.uniform({2, 3, 4, 4}, -1, 1), g = m.uniform({2, 1, 4, 4}, 0.1, 0.9);
    return Case{[=] { return m.weigh(spatial_gate(x, g)); }, {x, g}};
  });
  add_case("channel_gate", [](Maker& m) {
    auto x = m.uniform({2, 3, 4, 4}, -1, 1), g = m.uniform({2, 3}, 0.1, 0.9);
    return Case{[=] { return m.weigh(channel_gate(x, g)); }, {x, g}};
  });
  add_case("row_scale", [](Maker& m) {
    auto x = m.uniform({3, 4}, -1, 1), s = m.uniform({3}, -1, 1);
    return Case{[=] { return m.weigh(row_scale(x, s)); }, {x, s}};
  });
  add_case("batch_norm_1d", [](Maker& m) {
    auto x = m.uniform({6, 4}, -2, 2), g = m.uniform({4}, 0.5, 1.5), b = m.uniform({4}, -1, 1);
    auto state = std::make_shared<BatchNormState>(4);
    return Case{[=] { return m.weigh(batch_norm_1d(x, g, b, *state, Mode::train)); }, {x, g, b}};
  });
  add_case("batch_norm_2d", [](Maker& m) {
    auto x = m.uniform({2, 3, 4, 4}, -1, 1), g = m.uniform({3}, 0.5, 1.5), b = m.uniform({3}, -1, 1);
    auto state = std::make_shared<BatchNormState>(3);
    return Case{[=] { return m.weigh(batch_norm_2d(x, g, b, *state, Mode::train)); }, {x, g, b}};
  });
  add_case("softmax_cross_entropy", [](Maker& m) {
    auto logits = m.uniform({3, 5}, -2, 2);
    return Case{[=] { return softmax_cross_entropy(logits, std::vector<int>{0, 4, 2}); }, {logits}};
  });
  add_case("cosface_logits", [](Maker& m) {
    auto c = m.uniform({3, 4}, -0.9, 0.9);
    return Case{[=] { return m.weigh(cosface_logits(c, std::vector<int>{1, 0, 3}, 8.0, 0.4)); }, {c}};
  });
  add_case("arcface_logits", [](Maker& m) {
    // Targets on both sides of the fallback threshold, clear of the crossing.
    auto c = m.uniform({4, 3}, -0.6, 0.9);
    auto cd = c.mutable_data();
    cd[2 * 3 + 2] = -0.95;
    cd[3 * 3 + 0] = -0.85;
    return Case{[=] { return m.weigh(arcface_logits(c, std::vector<int>{1, 0, 2, 0}, 8.0, 0.5)); }, {c}};
  });
  return cases;
}

ModelConfig pipeline_model(FusionMode mode, MarginKind kind, bool batch_norm) {
  ModelConfig c;
  c.backbone.input_height = 16;
  c.backbone.input_width = 16;
  c.backbone.channel_widths = {4, 8};
  c.backbone.blocks_per_stage = 1;
  c.backbone.batch_norm = batch_norm;
  c.mhms.scales = {1, 3};
  c.mhms.heads = 2;
  c.mhms.embedding_dim = 8;
  c.mhms.lanet_reduction = 4;
  c.mhms.se_reduction = 4;
  c.mhms.batch_norm = batch_norm;
  c.gfe_batch_norm = batch_norm;
  c.margin = {kind, 8.0, default_margin(kind)};
  c.n_classes = 3;
  c.fusion_mode = mode;
  return c;
}

struct PipelineSpec {
  std::string name;
  FusionMode mode;
  MarginKind kind;
  bool batch_norm;
};

}  // namespace

bool GradSuiteReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradSuiteEntry& e) { return e.passed; });
}

std::vector<std::string> GradSuiteReport::failures() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.passed) out.push_back(e.name);
  return out;
}

const std::vector<std::string>& differentiable_ops() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& c : op_cases()) v.push_back(c.first);
    return v;
  }();
  return names;
}

GradSuiteReport run_gradcheck_suite(const GradSuiteOptions& options) {
  if (options.seeds < 1) throw std::invalid_argument("run_gradcheck_suite: seeds must be >= 1");
  GradSuiteReport report;
  report.tolerance = options.tolerance;
  GradCheckOptions gc;
  gc.eps = options.eps;

  for (const auto& [name, factory] : op_cases()) {
    GradSuiteEntry entry;
    entry.name = name;
    for (int seed = 0; seed < options.seeds; ++seed) {
      Maker maker(static_cast<std::uint64_t>(seed));
      Case c = factory(maker);
      entry.graph_ops.merge(graph_ops(c.fn()));
      gc.seed = static_cast<std::uint64_t>(seed);
      entry.max_rel_error = std::max(entry.max_rel_error, grad_check(c.fn, c.inputs, gc).max_rel_error);
      ++entry.seeds;
    }
    entry.passed = entry.max_rel_error <= options.tolerance && entry.graph_ops.count(name) == 1;
    report.entries.push_back(std::move(entry));
  }

  if (!options.pipeline) return report;
  const PipelineSpec pipelines[] = {
      {"pipeline/lgf/cosface", FusionMode::lgf, MarginKind::cosface, false},
      {"pipeline/lgf/arcface/bn", FusionMode::lgf, MarginKind::arcface, true},
      {"pipeline/direct_add/cosface", FusionMode::direct_add, MarginKind::cosface, false},
  };
  gc.max_coords_per_input = options.pipeline_coords;
  for (const auto& p : pipelines) {
    GradSuiteEntry entry;
    entry.name = p.name;
    entry.pipeline = true;
    // Train-mode batch norm makes the bias of the layer before it exactly
    // gradient-free, which central differences only see as roundoff. The
    // pipeline runs on running statistics; train-mode batch norm is covered by
    // the op checks. Fusion weights come from the eval forward, held fixed.
    const Mode mode = Mode::eval;
    const std::int64_t batch = p.batch_norm ? 4 : 2;
    for (int seed = 0; seed < options.seeds; ++seed) {
      Model<double> model(pipeline_model(p.mode, p.kind, p.batch_norm), static_cast<std::uint64_t>(seed));
      Maker maker(1000 + static_cast<std::uint64_t>(seed));
      RngStream stats = RngStream(static_cast<std::uint64_t>(seed)).substream("running_stats");
      for (auto& b : model.buffers()) {
        for (auto& v : b.state->running_mean) v = stats.uniform(-0.2, 0.2);
        for (auto& v : b.state->running_var) v = stats.uniform(0.5, 1.5);
      }
      auto x = maker.uniform({batch, 3, 16, 16}, 0.0, 1.0);
      const std::vector<int> labels = batch == 4 ? std::vector<int>{1, 2, 0, 1} : std::vector<int>{1, 2};
      std::vector<double> gamma;
      {
        NoGradGuard guard;
        gamma = model.embed(x, Mode::eval).gamma_local;
      }
      std::vector<D> inputs{x};
      for (auto& param : model.parameters()) inputs.push_back(param.tensor);
      auto fn = [&] { return model.forward(x, labels, mode, &gamma).loss; };
      entry.graph_ops.merge(graph_ops(fn()));
      gc.seed = static_cast<std::uint64_t>(seed);
      entry.max_rel_error = std::max(entry.max_rel_error, grad_check(fn, inputs, gc).max_rel_error);
      ++entry.seeds;
    }
    entry.passed = entry.max_rel_error <= options.tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace lgaf
