#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "lgaf/backbone.hpp"
#include "lgaf/gradcheck.hpp"
#include "lgaf/ops.hpp"
#include "test_util.hpp"

using namespace lgaf;
using lgaf::testing::random_tensor;

namespace {

template <typename T>
std::vector<Parameter<T>> params_of(Backbone<T>& net) {
  std::vector<Parameter<T>> params;
  std::vector<Buffer> buffers;
  net.collect("backbone", params, buffers);
  return params;
}

BackboneConfig small_config() {
  BackboneConfig cfg;
  cfg.input_height = 16;
  cfg.input_width = 16;
  cfg.channel_widths = {4, 6};
  cfg.blocks_per_stage = 1;
  return cfg;
}

}  // namespace

TEST_CASE("build_backbone is deterministic in the seed") {
  Backbone<float> a(BackboneConfig{}, RngStream(0));
  Backbone<float> b(BackboneConfig{}, RngStream(0));
  Backbone<float> c(BackboneConfig{}, RngStream(1));
  auto pa = params_of(a), pb = params_of(b), pc = params_of(c);
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    auto da = pa[i].tensor.data(), db = pb[i].tensor.data(), dc = pc[i].tensor.data();
    REQUIRE(da.size() == db.size());
    CHECK(std::memcmp(da.data(), db.data(), da.size() * sizeof(float)) == 0);
    if (std::memcmp(da.data(), dc.data(), da.size() * sizeof(float)) != 0) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("parameter names are unique") {
  BackboneConfig cfg;
  cfg.batch_norm = true;
  Backbone<float> net(cfg, RngStream(0));
  auto params = params_of(net);
  std::set<std::string> names;
  for (const auto& p : params) CHECK(names.insert(p.name).second);
}

TEST_CASE("default config maps 32x32 to 4x4x64") {
  BackboneConfig cfg;
  auto s = cfg.output_shape();
  CHECK(s[0] == 64);
  CHECK(s[1] == 4);
  CHECK(s[2] == 4);
  Backbone<float> net(cfg, RngStream(0));
  auto out = net.forward(random_tensor<float>({2, 3, 32, 32}, 1, 0.0, 1.0), Mode::eval);
  CHECK(out.shape() == Shape{2, 64, 4, 4});
}

TEST_CASE("output shape matches the analytic shape across configs") {
  for (int size : {16, 20, 24, 31, 32}) {
    for (int stages = 1; stages <= 3; ++stages) {
      BackboneConfig cfg;
      cfg.input_height = size;
      cfg.input_width = size + 2;
      cfg.channel_widths.assign(static_cast<std::size_t>(stages), 4);
      cfg.blocks_per_stage = 1;
      auto s = cfg.output_shape();
      if (s[1] < 4 || s[2] < 4) {
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
        continue;
      }
      Backbone<float> net(cfg, RngStream(3));
      auto out = net.forward(random_tensor<float>({1, 3, size, size + 2}, 2), Mode::eval);
      CHECK(out.shape() == Shape{1, s[0], s[1], s[2]});
    }
  }
}

TEST_CASE("degenerate configs are rejected") {
  BackboneConfig cfg;
  cfg.blocks_per_stage = 0;
  CHECK_THROWS_AS(Backbone<float>(cfg, RngStream(0)), std::invalid_argument);
  BackboneConfig tiny;
  tiny.input_height = 8;
  tiny.input_width = 8;
  CHECK_THROWS_AS(Backbone<float>(tiny, RngStream(0)), std::invalid_argument);
}

TEST_CASE("wrong input size is rejected") {
  Backbone<float> net(BackboneConfig{}, RngStream(0));
  CHECK_THROWS_AS(net.forward(Tensor<float>::zeros({1, 3, 28, 28}), Mode::eval), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor<float>::zeros({1, 1, 32, 32}), Mode::eval), ShapeError);
}

TEST_CASE("zero image with zero biases gives zero output") {
  Backbone<float> net(BackboneConfig{}, RngStream(0));
  auto out = net.forward(Tensor<float>::zeros({2, 3, 32, 32}), Mode::eval);
  for (float v : out.data()) CHECK(v == 0.0f);
}

TEST_CASE("eval forward is pure and permutation-equivariant over the batch") {
  Backbone<float> net(BackboneConfig{}, RngStream(0));
  auto a = random_tensor<float>({1, 3, 32, 32}, 11, 0.0, 1.0);
  auto b = random_tensor<float>({1, 3, 32, 32}, 12, 0.0, 1.0);
  auto ab = concat(std::vector<Tensor<float>>{a, b, a}, 0);
  auto ba = concat(std::vector<Tensor<float>>{b, a, b}, 0);
  auto out_ab = net.forward(ab, Mode::eval);
  auto out_ba = net.forward(ba, Mode::eval);
  const auto row = out_ab.numel() / 3;
  auto d1 = out_ab.data(), d2 = out_ba.data();
  for (std::int64_t i = 0; i < row; ++i) {
    CHECK(d1[i] == d1[2 * row + i]);
    CHECK(d1[i] == d2[row + i]);
    CHECK(d1[row + i] == d2[i]);
  }
}

TEST_CASE("batch-norm variant trains and evaluates") {
  BackboneConfig cfg = small_config();
  cfg.batch_norm = true;
  Backbone<float> net(cfg, RngStream(0));
  auto x = random_tensor<float>({4, 3, 16, 16}, 5, 0.0, 1.0);
  auto train_out = net.forward(x, Mode::train);
  auto eval1 = net.forward(x, Mode::eval);
  auto eval2 = net.forward(x, Mode::eval);
  CHECK(train_out.shape() == eval1.shape());
  CHECK(lgaf::testing::max_abs_diff(eval1.data(), eval2.data()) == 0.0);
}

TEST_CASE("backbone gradient w.r.t. input and parameters passes grad_check") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Backbone<double> net(small_config(), RngStream(seed));
    auto x = random_tensor<double>({2, 3, 16, 16}, 100 + seed, 0.0, 1.0, true);
    auto params = params_of(net);
    std::vector<Tensor<double>> inputs{x, params[0].tensor, params[2].tensor, params.back().tensor};
    GradCheckOptions opts;
    opts.max_coords_per_input = 40;
    opts.seed = seed;
    auto report = grad_check([&] { return sum(net.forward(x, Mode::eval)); }, inputs, opts);
    CAPTURE(seed);
    CHECK(report.max_rel_error <= 1e-4);
  }
}
