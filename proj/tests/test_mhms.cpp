#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lgaf/gfe.hpp"
#include "lgaf/gradcheck.hpp"
#include "lgaf/mhms.hpp"
#include "lgaf/ops.hpp"
#include "test_util.hpp"

using namespace lgaf;
using lgaf::testing::max_abs_diff;
using lgaf::testing::random_tensor;

namespace {

MHMSConfig small_config() {
  MHMSConfig c;
  c.scales = {1, 3};
  c.heads = 2;
  c.embedding_dim = 8;
  c.lanet_reduction = 4;
  c.se_reduction = 4;
  return c;
}

template <typename T>
std::vector<Parameter<T>> params_of(MSNetHead<T>& head) {
  std::vector<Parameter<T>> params;
  std::vector<Buffer> buffers;
  head.collect("head", params, buffers);
  return params;
}

template <typename T>
void fill(Tensor<T>& t, T value) {
  for (auto& v : t.mutable_data()) v = value;
}

}  // namespace

TEST_CASE("config validation") {
  MHMSConfig c;
  CHECK_NOTHROW(c.validate(64));
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(64), std::invalid_argument);
  c = MHMSConfig{};
  c.scales = {1, 2};
  CHECK_THROWS_AS(c.validate(64), std::invalid_argument);
  c = MHMSConfig{};
  CHECK_THROWS_AS(c.validate(4), std::invalid_argument);  // C < r_l
  c.lanet_reduction = 2;
  CHECK_THROWS_AS(c.validate(4), std::invalid_argument);  // 3*4 channels < r_s
}

TEST_CASE("lanet with a zero gate convolution halves the input") {
  RngStream rng(1);
  LANetParams<float> p{ConvParams<float>(rng, "r", 8, 2, 1), ConvParams<float>(rng, "g", 2, 1, 1)};
  fill(p.gate.weight, 0.0f);
  auto x = random_tensor<float>({2, 8, 4, 4}, 3);
  Tensor<float> a;
  auto y = lanet(p, x, {}, &a);
  for (float v : a.data()) CHECK(v == 0.5f);
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == 0.5f * x.data()[i]);
}

TEST_CASE("lanet forced to 1 is the identity") {
  RngStream rng(1);
  LANetParams<float> p{ConvParams<float>(rng, "r", 8, 2, 1), ConvParams<float>(rng, "g", 2, 1, 1)};
  auto x = random_tensor<float>({2, 8, 4, 4}, 3);
  auto y = lanet(p, x, 1.0);
  CHECK(max_abs_diff(x.data(), y.data()) == 0.0);
}

TEST_CASE("lanet maps are strictly inside (0,1) even for extreme inputs") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed);
    LANetParams<float> p{ConvParams<float>(rng, "r", 8, 2, 1), ConvParams<float>(rng, "g", 2, 1, 1)};
    for (double range : {1.0, 1e3}) {
      auto x = random_tensor<float>({3, 8, 5, 5}, 10 + seed, -range, range);
      Tensor<float> a;
      lanet(p, x, {}, &a);
      CHECK(a.shape() == Shape{3, 1, 5, 5});
      for (float v : a.data()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
      }
    }
  }
}

TEST_CASE("lanet rejects a channel mismatch") {
  RngStream rng(1);
  LANetParams<float> p{ConvParams<float>(rng, "r", 8, 2, 1), ConvParams<float>(rng, "g", 2, 1, 1)};
  CHECK_THROWS_AS(lanet(p, Tensor<float>::zeros({1, 4, 3, 3}), {}), ShapeError);
}

TEST_CASE("se gate forced to 1 and 0") {
  RngStream rng(2);
  SEParams<float> p{LinearParams<float>(rng, "s", 8, 2), LinearParams<float>(rng, "e", 2, 8)};
  auto x = random_tensor<float>({2, 8, 3, 3}, 4);
  CHECK(max_abs_diff(se_gate(p, x, 1.0).data(), x.data()) == 0.0);
  auto closed = se_gate(p, x, 0.0);
  for (float v : closed.data()) CHECK(v == 0.0f);
}

TEST_CASE("se gate scales each channel by a spatially constant factor") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed);
    SEParams<double> p{LinearParams<double>(rng, "s", 8, 2), LinearParams<double>(rng, "e", 2, 8)};
    auto x = lgaf::testing::away_from_zero({2, 8, 4, 4}, 20 + seed, 0.1, 1.0);
    Tensor<double> g;
    auto y = se_gate(p, x, {}, &g);
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t c = 0; c < 8; ++c) {
        const double ratio0 = y.at({n, c, 0, 0}) / x.at({n, c, 0, 0});
        CHECK(ratio0 > 0.0);
        CHECK(ratio0 < 1.0);
        CHECK(std::abs(ratio0 - g.at({n, c})) <= 1e-12);
        for (std::int64_t i = 0; i < 4; ++i)
          for (std::int64_t j = 0; j < 4; ++j) CHECK(std::abs(y.at({n, c, i, j}) / x.at({n, c, i, j}) - ratio0) <= 1e-6);
      }
  }
}

TEST_CASE("msnet with every gate open and identity maps returns the flattened input slice") {
  MHMSConfig c;
  c.scales = {1};
  c.heads = 1;
  c.embedding_dim = 10;
  c.lanet_reduction = 2;
  c.se_reduction = 2;
  MSNetHead<float> head(c, 4, 3, 3, RngStream(0), "h");
  auto& conv = head.scale_convs()[0];
  fill(conv.weight, 0.0f);
  for (std::int64_t k = 0; k < 4; ++k) conv.weight.mutable_data()[static_cast<std::size_t>(k * 4 + k)] = 1.0f;
  auto& proj = head.projection();
  fill(proj.weight, 0.0f);
  for (std::int64_t j = 0; j < 10; ++j) proj.weight.mutable_data()[static_cast<std::size_t>((j + 5) * 10 + j)] = 1.0f;
  head.overrides.lanet = 1.0;
  head.overrides.se = 1.0;
  auto x = random_tensor<float>({2, 4, 3, 3}, 7);
  auto y = head.forward(x, Mode::eval);
  REQUIRE(y.shape() == Shape{2, 10});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t j = 0; j < 10; ++j) CHECK(y.at({n, j}) == x.data()[static_cast<std::size_t>(n * 36 + j + 5)]);
}

TEST_CASE("msnet maps a zero feature map to zero") {
  MSNetHead<float> head(MHMSConfig{}, 64, 4, 4, RngStream(0), "h");
  auto y = head.forward(Tensor<float>::zeros({2, 64, 4, 4}), Mode::eval);
  CHECK(y.shape() == Shape{2, 16});
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("every per-scale map keeps the feature-map size") {
  MHMSConfig c;
  c.scales = {1, 3, 5, 7};
  MSNetHead<float> head(c, 64, 5, 6, RngStream(0), "h");
  HeadTrace<float> trace;
  head.forward(random_tensor<float>({2, 64, 5, 6}, 1), Mode::eval, &trace);
  REQUIRE(trace.scale_outputs.size() == 4);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(trace.scale_outputs[j].shape() == Shape{2, 64, 5, 6});
    CHECK(trace.attention[j].shape() == Shape{2, 1, 5, 6});
    CHECK(trace.gated[j].shape() == Shape{2, 64, 5, 6});
  }
  CHECK(trace.se_gates.shape() == Shape{2, 256});
}

TEST_CASE("output dimension is D for valid configs") {
  for (int heads : {1, 2, 4, 8}) {
    for (int d : {16, 32, 64}) {
      MHMSConfig c;
      c.heads = heads;
      c.embedding_dim = d;
      c.scale_channels = 16;
      auto hs = build_mhms<float>(c, 32, 4, 4, RngStream(0));
      auto y = mhms_forward(hs, random_tensor<float>({2, 32, 4, 4}, 2), Mode::eval, static_cast<std::size_t>(heads));
      CHECK(y.shape() == Shape{2, d});
    }
  }
}

TEST_CASE("mhms concatenates head outputs in head order") {
  MHMSConfig c;
  auto heads = build_mhms<float>(c, 64, 4, 4, RngStream(5));
  auto x = random_tensor<float>({3, 64, 4, 4}, 6);
  auto y = mhms_forward(heads, x, Mode::eval, 4);
  REQUIRE(y.shape() == Shape{3, 64});
  std::vector<Tensor<float>> per_head;
  for (auto& h : heads) per_head.push_back(h.forward(x, Mode::eval));
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t k = 0; k < 4; ++k)
      for (std::int64_t j = 0; j < 16; ++j) CHECK(y.at({n, k * 16 + j}) == per_head[static_cast<std::size_t>(k)].at({n, j}));

  std::vector<MSNetHead<float>> permuted{heads[2], heads[0], heads[3], heads[1]};
  const int order[4] = {2, 0, 3, 1};
  auto yp = mhms_forward(permuted, x, Mode::eval, 4);
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t k = 0; k < 4; ++k)
      for (std::int64_t j = 0; j < 16; ++j) CHECK(yp.at({n, k * 16 + j}) == y.at({n, order[k] * 16 + j}));

  std::vector<MSNetHead<float>> one{heads[0]};
  auto y1 = mhms_forward(one, x, Mode::eval, 1);
  CHECK(max_abs_diff(y1.data(), per_head[0].data()) == 0.0);

  CHECK_THROWS_AS(mhms_forward(heads, x, Mode::eval, 3), std::invalid_argument);
}

TEST_CASE("gates forced to 1 collapse to the plain conv-concat-project pipeline") {
  MHMSConfig c;
  auto heads = build_mhms<double>(c, 64, 4, 4, RngStream(9));
  auto x = random_tensor<double>({2, 64, 4, 4}, 10);
  for (auto& h : heads) {
    h.overrides.lanet = 1.0;
    h.overrides.se = 1.0;
  }
  auto gated = mhms_forward(heads, x, Mode::eval, 4);
  std::vector<Tensor<double>> outs;
  for (auto& h : heads) {
    std::vector<Tensor<double>> maps;
    for (std::size_t j = 0; j < h.scales().size(); ++j) {
      const auto& conv = h.scale_convs()[j];
      maps.push_back(conv2d(x, conv.weight, conv.bias, 1, (h.scales()[j] - 1) / 2));
    }
    outs.push_back(linear(flatten(concat(maps, 1)), h.projection().weight, h.projection().bias));
  }
  CHECK(max_abs_diff(gated.data(), concat(outs, 1).data()) <= 1e-5);
}

TEST_CASE("msnet gradient passes grad_check") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MSNetHead<double> head(small_config(), 8, 4, 4, RngStream(seed), "h");
    auto x = random_tensor<double>({2, 8, 4, 4}, 30 + seed, -1.0, 1.0, true);
    auto params = params_of(head);
    std::vector<Tensor<double>> inputs{x};
    for (auto& p : params) inputs.push_back(p.tensor);
    GradCheckOptions opts;
    opts.max_coords_per_input = 24;
    opts.seed = seed;
    auto report = grad_check([&] { return sum(scale(head.forward(x, Mode::eval), 0.5)); }, inputs, opts);
    CAPTURE(seed);
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("full mhms gradient passes grad_check on a 2-sample batch") {
  auto heads = build_mhms<double>(small_config(), 8, 4, 4, RngStream(3));
  auto x = random_tensor<double>({2, 8, 4, 4}, 40, -1.0, 1.0, true);
  auto w = random_tensor<double>({8}, 41);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GradCheckOptions opts;
    opts.seed = seed;
    auto report = grad_check(
        [&] {
          auto y = mhms_forward(heads, x, Mode::eval, 2);
          return sum(mul(y, concat(std::vector<Tensor<double>>{reshape(w, {1, 8}), reshape(w, {1, 8})}, 0)));
        },
        {x}, opts);
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("attention dump matches the forward pass") {
  auto heads = build_mhms<float>(MHMSConfig{}, 64, 4, 4, RngStream(11));
  auto x = random_tensor<float>({2, 64, 4, 4}, 12);
  auto dump1 = dump_attention_maps(heads, x);
  auto dump2 = dump_attention_maps(heads, x);
  REQUIRE(dump1.size() == 4 * 4);
  for (std::size_t i = 0; i < dump1.size(); ++i) {
    CHECK(dump1[i].values == dump2[i].values);
    CHECK(dump1[i].offset == dump2[i].offset);
  }
  std::size_t offset = 0;
  for (const auto& r : dump1) {
    CHECK(r.offset == offset);
    CHECK(static_cast<std::int64_t>(r.values.size()) == shape_numel(r.shape));
    offset += r.values.size();
  }

  // Replay: the dumped map times the scale output reproduces the gated map.
  HeadTrace<float> trace;
  heads[1].forward(x, Mode::eval, &trace);
  for (std::size_t j = 0; j < 3; ++j) {
    const auto& rec = dump1[4 + j];
    CHECK(rec.head == 1);
    CHECK(rec.kind == "lanet");
    CHECK(rec.scale == heads[1].scales()[j]);
    const auto& l = trace.scale_outputs[j];
    double err = 0.0;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t ch = 0; ch < 64; ++ch)
        for (std::int64_t p = 0; p < 16; ++p) {
          const auto li = static_cast<std::size_t>((n * 64 + ch) * 16 + p);
          const double replay = static_cast<double>(l.data()[li]) * rec.values[static_cast<std::size_t>(n * 16 + p)];
          err = std::max(err, std::abs(replay - trace.gated[j].data()[li]));
        }
    CHECK(err <= 1e-6);
  }
  CHECK(dump1[7].kind == "se");
  CHECK(dump1[7].values == std::vector<float>(trace.se_gates.data().begin(), trace.se_gates.data().end()));
}

TEST_CASE("forced gates show up in the dump") {
  auto heads = build_mhms<float>(MHMSConfig{}, 64, 4, 4, RngStream(11));
  for (auto& h : heads) h.overrides = {0.5, 0.5};
  for (const auto& r : dump_attention_maps(heads, random_tensor<float>({1, 64, 4, 4}, 1)))
    for (float v : r.values) CHECK(v == 0.5f);
}

TEST_CASE("attention dump files round-trip") {
  auto heads = build_mhms<float>(MHMSConfig{}, 64, 4, 4, RngStream(11));
  auto records = dump_attention_maps(heads, random_tensor<float>({2, 64, 4, 4}, 12));
  const auto dir = std::filesystem::temp_directory_path() / "lgaf_test_attention";
  std::filesystem::create_directories(dir);
  write_attention_dump(records, dir / "maps");
  std::ifstream js(dir / "maps.json");
  auto manifest = nlohmann::json::parse(js);
  REQUIRE(manifest["arrays"].size() == records.size());
  std::ifstream bin(dir / "maps.bin", std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::size_t total = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& a = manifest["arrays"][i];
    CHECK(a["offset"].get<std::size_t>() == records[i].offset);
    CHECK(a["shape"].get<Shape>() == records[i].shape);
    std::vector<float> values(records[i].values.size());
    std::memcpy(values.data(), bytes.data() + 4 * records[i].offset, 4 * values.size());
    CHECK(values == records[i].values);
    total += values.size();
  }
  CHECK(bytes.size() == 4 * total);
  std::filesystem::remove_all(dir);
}

TEST_CASE("global head") {
  SUBCASE("zero map gives zero embedding") {
    GlobalHead<float> g(8, 4, 4, 16, false, RngStream(0));
    auto y = g.forward(Tensor<float>::zeros({2, 8, 4, 4}), Mode::eval);
    for (float v : y.data()) CHECK(v == 0.0f);
  }
  SUBCASE("identity weights return the flattened map") {
    GlobalHead<float> g(2, 2, 2, 8, false, RngStream(0));
    fill(g.projection().weight, 0.0f);
    for (int i = 0; i < 8; ++i) g.projection().weight.mutable_data()[static_cast<std::size_t>(i * 8 + i)] = 1.0f;
    auto x = random_tensor<float>({3, 2, 2, 2}, 5);
    CHECK(max_abs_diff(g.forward(x, Mode::eval).data(), x.data()) == 0.0);
  }
  SUBCASE("matches the naive matmul oracle") {
    GlobalHead<float> g(8, 4, 4, 16, false, RngStream(3));
    auto x = random_tensor<float>({3, 8, 4, 4}, 6);
    auto y = g.forward(x, Mode::eval);
    auto oracle = lgaf::testing::naive_linear(flatten(x), g.projection().weight, &g.projection().bias);
    CHECK(max_abs_diff(y.data(), oracle) <= 1e-6);
  }
  SUBCASE("linear without bias and batch norm") {
    GlobalHead<double> g(8, 4, 4, 16, false, RngStream(3));
    auto x = random_tensor<double>({2, 8, 4, 4}, 7);
    auto y = g.forward(x, Mode::eval);
    auto y3 = g.forward(scale(x, 3.0), Mode::eval);
    for (std::size_t i = 0; i < y.data().size(); ++i) CHECK(std::abs(3.0 * y.data()[i] - y3.data()[i]) <= 1e-12);
  }
  SUBCASE("generic inputs give non-zero norms") {
    GlobalHead<float> g(8, 4, 4, 16, true, RngStream(3));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto y = g.forward(random_tensor<float>({4, 8, 4, 4}, seed), Mode::train);
      auto norms = l2_norm(y);
      for (float z : norms.data()) CHECK(z > 0.0f);
    }
  }
  SUBCASE("shape mismatch") {
    GlobalHead<float> g(8, 4, 4, 16, false, RngStream(3));
    CHECK_THROWS_AS(g.forward(Tensor<float>::zeros({1, 8, 4, 5}), Mode::eval), ShapeError);
  }
}
