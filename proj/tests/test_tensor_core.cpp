#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "lgaf/gradcheck.hpp"
#include "lgaf/ops.hpp"
#include "lgaf/rng.hpp"
#include "lgaf/tensor.hpp"
#include "test_util.hpp"

using namespace lgaf;
using lgaf::testing::away_from_zero;
using lgaf::testing::max_abs_diff;
using lgaf::testing::naive_conv2d;
using lgaf::testing::naive_linear;
using lgaf::testing::random_tensor;

TEST_CASE("rng stream matches the documented splitmix64 counter construction") {
  // Golden values computed independently from the documented formula.
  RngStream a(0);
  CHECK(a.next_u64() == 0xa706dd2f4d197e6fULL);
  CHECK(a.next_u64() == 0xb382a305f4414f5eULL);
  CHECK(a.next_u64() == 0x631a9154fbabf717ULL);
  RngStream b(42);
  CHECK(b.uniform() == 0.34329192209867343);
  CHECK(b.next_u64() == 0xf4abd143feb24055ULL);

  RngStream c(42, 1);
  RngStream d(42);
  d.next_u64();
  CHECK(c.next_u64() == d.next_u64());

  auto s1 = RngStream(7).substream("backbone", 3);
  auto s2 = RngStream(7).substream("backbone", 3);
  auto s3 = RngStream(7).substream("backbone", 4);
  CHECK(s1.next_u64() == s2.next_u64());
  CHECK(RngStream(7).substream("backbone", 3).next_u64() != s3.next_u64());
}

TEST_CASE("conv2d") {
  SUBCASE("1x1 channel-identity kernel reproduces the input") {
    auto x = random_tensor<double>({2, 3, 4, 5}, 1);
    std::vector<double> w(9, 0.0);
    for (int i = 0; i < 3; ++i) w[static_cast<std::size_t>(i * 3 + i)] = 1.0;
    Tensor<double> weight({3, 3, 1, 1}, w);
    auto y = conv2d(x, weight, Tensor<double>::zeros({3}), 1, 0);
    CHECK(y.shape() == x.shape());
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
  }
  SUBCASE("constant field under an all-ones 3x3 kernel gives 9v in the interior") {
    const double v = 0.7;
    auto x = Tensor<double>::full({1, 1, 5, 5}, v);
    auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, w, Tensor<double>::zeros({1}), 1, 1);
    CHECK(y.at({0, 0, 2, 2}) == doctest::Approx(9 * v).epsilon(1e-15));
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(4 * v).epsilon(1e-15));
  }
  SUBCASE("random case matches the direct summation oracle") {
    auto x = random_tensor<float>({2, 3, 5, 5}, 11);
    auto w = random_tensor<float>({4, 3, 3, 3}, 12);
    auto b = random_tensor<float>({4}, 13);
    auto y = conv2d(x, w, b, 1, 1);
    CHECK(y.shape() == Shape{2, 4, 5, 5});
    CHECK(max_abs_diff(y.data(), naive_conv2d(x, w, b, 1, 1)) <= 1e-6);
  }
  SUBCASE("property: oracle agreement over small shapes, strides and paddings") {
    RngStream rng(99);
    for (int trial = 0; trial < 60; ++trial) {
      std::int64_t n = 1 + rng.below(4), c = 1 + rng.below(4), k_out = 1 + rng.below(4);
      std::int64_t h = 3 + rng.below(6), w = 3 + rng.below(6);
      std::int64_t k = std::vector<std::int64_t>{1, 3}[rng.below(2)];
      int stride = 1 + static_cast<int>(rng.below(2));
      int pad = static_cast<int>(rng.below(2));
      auto seed = rng.next_u64();
      auto xf = random_tensor<float>({n, c, h, w}, seed);
      auto wf = random_tensor<float>({k_out, c, k, k}, seed + 1);
      auto bf = random_tensor<float>({k_out}, seed + 2);
      CHECK(max_abs_diff(conv2d(xf, wf, bf, stride, pad).data(), naive_conv2d(xf, wf, bf, stride, pad)) <= 1e-6);
      auto xd = random_tensor<double>({n, c, h, w}, seed);
      auto wd = random_tensor<double>({k_out, c, k, k}, seed + 1);
      auto bd = random_tensor<double>({k_out}, seed + 2);
      CHECK(max_abs_diff(conv2d(xd, wd, bd, stride, pad).data(), naive_conv2d(xd, wd, bd, stride, pad)) <= 1e-12);
    }
  }
  SUBCASE("output size follows (H + 2p - k)/s + 1") {
    auto y = conv2d(random_tensor<float>({1, 2, 32, 32}, 3), random_tensor<float>({4, 2, 3, 3}, 4),
                    Tensor<float>(), 2, 1);
    CHECK(y.shape() == Shape{1, 4, 16, 16});
  }
  SUBCASE("channel mismatch names the offending dimension") {
    auto x = random_tensor<float>({1, 3, 4, 4}, 1);
    auto w = random_tensor<float>({2, 2, 3, 3}, 2);
    try {
      conv2d(x, w, Tensor<float>(), 1, 1);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("dim 1") != std::string::npos);
    }
  }
}

TEST_CASE("linear") {
  auto x = random_tensor<double>({3, 4}, 5);
  SUBCASE("identity weight and zero bias") {
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 5)] = 1.0;
    auto y = linear(x, Tensor<double>({4, 4}, eye), Tensor<double>::zeros({4}));
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
  }
  SUBCASE("zero input broadcasts the bias") {
    auto b = random_tensor<double>({2}, 6);
    auto y = linear(Tensor<double>::zeros({3, 4}), random_tensor<double>({4, 2}, 7), b);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 2; ++j) CHECK(y.at({i, j}) == b.data()[static_cast<std::size_t>(j)]);
  }
  SUBCASE("random 3x4 by 4x2 matches the loop oracle") {
    auto w = random_tensor<double>({4, 2}, 8);
    auto b = random_tensor<double>({2}, 9);
    CHECK(max_abs_diff(linear(x, w, b).data(), naive_linear(x, w, &b)) <= 1e-9);
  }
  SUBCASE("inner dimension mismatch") {
    CHECK_THROWS_AS(linear(x, random_tensor<double>({3, 2}, 1), Tensor<double>()), ShapeError);
  }
}

TEST_CASE("global_avg_pool") {
  CHECK(global_avg_pool(Tensor<double>::full({2, 3, 4, 4}, 1.25)).data()[5] == 1.25);
  auto one = random_tensor<double>({2, 3, 1, 1}, 1);
  CHECK(max_abs_diff(global_avg_pool(one).data(), one.data()) == 0.0);
  CHECK(global_avg_pool(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4})).item() == 2.5);
}

TEST_CASE("activation") {
  CHECK(sigmoid(Tensor<double>::scalar(0.0)).item() == 0.5);
  CHECK(relu(Tensor<double>::scalar(-3.0)).item() == 0.0);
  CHECK(sigmoid(Tensor<double>::scalar(2.0)).item() == doctest::Approx(0.8807970779778823).epsilon(1e-15));
  auto big = sigmoid(Tensor<float>({2}, {60.f, -200.f}));
  CHECK(big.data()[0] < 1.0f);
  CHECK(big.data()[1] > 0.0f);
}

TEST_CASE("l2_norm") {
  CHECK(l2_norm(Tensor<double>({1, 2}, {3, 4})).item() == 5.0);
  auto z = Tensor<double>::zeros({1, 3}, true);
  auto nz = l2_norm(z);
  CHECK(nz.item() == 0.0);
  backward(sum(nz));
  for (double g : z.grad()) CHECK(g == 0.0);
  CHECK(l2_norm(Tensor<double>({1, 4}, {1, 1, 1, 1})).item() == 2.0);
}

TEST_CASE("concat") {
  auto a = random_tensor<double>({2, 3}, 1);
  std::vector<Tensor<double>> one{a};
  CHECK(max_abs_diff(concat(one, 1).data(), a.data()) == 0.0);

  auto b = random_tensor<double>({2, 3}, 2);
  auto ab = concat(std::vector<Tensor<double>>{a, b}, 1);
  CHECK(ab.shape() == Shape{2, 6});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      CHECK(ab.at({i, j}) == a.at({i, j}));
      CHECK(ab.at({i, j + 3}) == b.at({i, j}));
    }

  std::vector<Tensor<double>> three{random_tensor<double>({1, 2}, 3), random_tensor<double>({1, 2}, 4),
                                    random_tensor<double>({1, 2}, 5)};
  auto c = concat(three, 1);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 2; ++j) CHECK(c.at({0, 2 * k + j}) == three[static_cast<std::size_t>(k)].at({0, j}));

  CHECK_THROWS_AS(concat(std::vector<Tensor<double>>{a, random_tensor<double>({3, 3}, 6)}, 1), ShapeError);
}

TEST_CASE("batch_norm_1d") {
  auto gamma = Tensor<double>::full({2}, 1.0);
  auto beta = Tensor<double>::zeros({2});
  SUBCASE("standardized batch passes through") {
    BatchNormState st(2);
    auto x = Tensor<double>({4, 2}, {1, -1, -1, 1, 1, 1, -1, -1});
    auto y = batch_norm_1d(x, gamma, beta, st, Mode::train);
    CHECK(max_abs_diff(y.data(), x.data()) <= 1e-5);
  }
  SUBCASE("constant column normalizes to zero") {
    BatchNormState st(2);
    auto x = Tensor<double>({3, 2}, {5, 1, 5, 2, 5, 3});
    auto y = batch_norm_1d(x, gamma, beta, st, Mode::train);
    for (int i = 0; i < 3; ++i) CHECK(y.at({i, 0}) == 0.0);
  }
  SUBCASE("random batch has zero mean and unit variance per column") {
    BatchNormState st(2);
    auto x = random_tensor<double>({16, 2}, 3, -4.0, 9.0);
    auto y = batch_norm_1d(x, gamma, beta, st, Mode::train);
    for (int j = 0; j < 2; ++j) {
      double m = 0, v = 0;
      for (int i = 0; i < 16; ++i) m += y.at({i, j});
      m /= 16;
      for (int i = 0; i < 16; ++i) v += (y.at({i, j}) - m) * (y.at({i, j}) - m);
      v /= 16;
      CHECK(std::abs(m) <= 1e-4);
      CHECK(std::abs(v - 1.0) <= 1e-4);
    }
    CHECK(st.running_mean[0] != 0.0);
  }
  SUBCASE("single sample in training mode is rejected") {
    BatchNormState st(2);
    CHECK_THROWS(batch_norm_1d(random_tensor<double>({1, 2}, 1), gamma, beta, st, Mode::train));
  }
  SUBCASE("eval mode uses and preserves running statistics") {
    BatchNormState st(2);
    st.running_mean = {1.0, -1.0};
    st.running_var = {4.0, 1.0};
    auto y = batch_norm_1d(Tensor<double>({1, 2}, {3.0, 0.0}), gamma, beta, st, Mode::eval);
    CHECK(y.at({0, 0}) == doctest::Approx(2.0 / std::sqrt(4.0 + 1e-5)));
    CHECK(st.running_mean[0] == 1.0);
  }
}

TEST_CASE("softmax_cross_entropy") {
  std::vector<int> labels{0, 3};
  CHECK(softmax_cross_entropy(Tensor<double>::zeros({2, 5}), labels).item() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-14));
  std::vector<int> l0{0};
  CHECK(softmax_cross_entropy(Tensor<double>({1, 3}, {20, 0, 0}), l0).item() < 1e-3);
  std::vector<int> l2{2};
  CHECK(softmax_cross_entropy(Tensor<double>({1, 3}, {1, 2, 3}), l2).item() ==
        doctest::Approx(0.4076059644443803).epsilon(1e-14));
  std::vector<int> bad{3};
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor<double>::zeros({1, 3}), bad), std::out_of_range);
}

TEST_CASE("backward") {
  SUBCASE("sum gives an all-ones gradient") {
    auto x = random_tensor<double>({2, 3, 4}, 1, -1, 1, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("zero-scaled loss gives a zero gradient") {
    auto x = random_tensor<double>({5}, 2, -1, 1, true);
    backward(scale(sum(mul(x, x)), 0.0));
    for (double g : x.grad()) CHECK(g == 0.0);
  }
  SUBCASE("sum of squares at (1,-2,3)") {
    Tensor<double> x({3}, {1, -2, 3}, true);
    backward(sum(mul(x, x)));
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2, -4, 6});
  }
  SUBCASE("non-scalar loss is rejected") {
    auto x = random_tensor<double>({3}, 3, -1, 1, true);
    CHECK_THROWS_AS(backward(scale(x, 2.0)), ShapeError);
  }
  SUBCASE("two backward calls accumulate exactly twice") {
    auto x = random_tensor<double>({2, 3}, 4, -1, 1, true);
    auto w = random_tensor<double>({3, 2}, 5, -1, 1, true);
    auto loss = sum(mul(linear(x, w, Tensor<double>()), linear(x, w, Tensor<double>())));
    backward(loss);
    std::vector<double> once(w.grad().begin(), w.grad().end());
    backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == 2.0 * once[i]);
  }
  SUBCASE("no graph is recorded under NoGradGuard") {
    auto x = random_tensor<double>({3}, 6, -1, 1, true);
    NoGradGuard guard;
    auto y = sum(x);
    CHECK(!y.requires_grad());
  }
}

TEST_CASE("grad_check") {
  SUBCASE("linear function is exact up to rounding") {
    auto x = random_tensor<double>({2, 3}, 1, -1, 1, true);
    auto w = random_tensor<double>({3, 2}, 2);
    auto r = grad_check([&] { return sum(linear(x, w, Tensor<double>())); }, {x});
    CHECK(r.max_rel_error <= 1e-10);
  }
  SUBCASE("detached input is reported as an intentional-detach case") {
    auto x = random_tensor<double>({4}, 3, 0.5, 1.0, true);
    auto y = random_tensor<double>({4}, 4, 0.5, 1.0, true);
    GradCheckOptions opt;
    opt.expect_detached = {false, true};
    auto r = grad_check([&] { return sum(mul(x, y.detach())); }, {x, y}, opt);
    CHECK(r.max_rel_error <= 1e-9);
    CHECK(r.inputs[1].detached);
    CHECK(r.inputs[1].detach_confirmed);
    CHECK(r.inputs[1].max_abs_analytic == 0.0);
    CHECK(r.inputs[1].max_abs_numeric > 0.0);
  }
  SUBCASE("conv -> relu -> l2_norm pipeline over five seeds") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto x = random_tensor<double>({2, 2, 5, 5}, 100 + seed, -1, 1, true);
      auto w = random_tensor<double>({3, 2, 3, 3}, 200 + seed, -1, 1, true);
      auto b = random_tensor<double>({3}, 300 + seed, -0.1, 0.1, true);
      auto fn = [&] { return sum(l2_norm(flatten(relu(conv2d(x, w, b, 1, 1))))); };
      CHECK(grad_check(fn, {x, w, b}).max_rel_error <= 1e-4);
    }
  }
  SUBCASE("an injected gradient fault is detected") {
    auto x = random_tensor<double>({2, 3}, 1, -1, 1, true);
    auto w = random_tensor<double>({3, 2}, 2, -1, 1, true);
    set_gradient_fault("linear");
    auto r = grad_check([&] { return sum(mul(linear(x, w, Tensor<double>()), linear(x, w, Tensor<double>()))); }, {x, w});
    set_gradient_fault("");
    CHECK(r.max_rel_error > 0.1);
  }
}

TEST_CASE("property: every differentiable op passes finite differences over five seeds") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    // Random positive weights on the outputs avoid accidental cancellation.
    auto weigh = [seed](const Tensor<double>& y) {
      auto r = random_tensor<double>(y.shape(), 7000 + seed, 0.5, 1.5);
      return sum(mul(y, r));
    };
    auto x4 = random_tensor<double>({2, 3, 4, 4}, seed, -1, 1, true);
    auto w4 = random_tensor<double>({2, 3, 3, 3}, seed + 10, -1, 1, true);
    auto b4 = random_tensor<double>({2}, seed + 20, -1, 1, true);
    CHECK(grad_check([&] { return weigh(conv2d(x4, w4, b4, 2, 1)); }, {x4, w4, b4}).max_rel_error <= 1e-4);

    auto x2 = random_tensor<double>({3, 4}, seed + 30, -1, 1, true);
    auto w2 = random_tensor<double>({4, 5}, seed + 40, -1, 1, true);
    auto b2 = random_tensor<double>({5}, seed + 50, -1, 1, true);
    CHECK(grad_check([&] { return weigh(linear(x2, w2, b2)); }, {x2, w2, b2}).max_rel_error <= 1e-4);
    CHECK(grad_check([&] { return weigh(matmul(x2, w2)); }, {x2, w2}).max_rel_error <= 1e-4);
    CHECK(grad_check([&] { return weigh(global_avg_pool(x4)); }, {x4}).max_rel_error <= 1e-4);

    auto xa = away_from_zero({3, 4}, seed + 60);
    CHECK(grad_check([&] { return weigh(relu(xa)); }, {xa}).max_rel_error <= 1e-4);
    CHECK(grad_check([&] { return weigh(sigmoid(xa)); }, {xa}).max_rel_error <= 1e-4);
    CHECK(grad_check([&] { return weigh(l2_norm(xa)); }, {xa}).max_rel_error <= 1e-4);
    CHECK(grad_check([&] { return weigh(l2_normalize(xa, 1)); }, {xa}).max_rel_error <= 1e-4);
    CHECK(grad_check([&] { return weigh(l2_normalize(xa, 0)); }, {xa}).max_rel_error <= 1e-4);

    auto c1 = random_tensor<double>({2, 3}, seed + 70, -1, 1, true);
    auto c2 = random_tensor<double>({2, 2}, seed + 80, -1, 1, true);
    CHECK(grad_check([&] { return weigh(concat(std::vector<Tensor<double>>{c1, c2}, 1)); }, {c1, c2}).max_rel_error <= 1e-4);

    auto g = random_tensor<double>({2, 1, 4, 4}, seed + 90, 0.1, 0.9, true);
    CHECK(grad_check([&] { return weigh(spatial_gate(x4, g)); }, {x4, g}).max_rel_error <= 1e-4);
    auto cg = random_tensor<double>({2, 3}, seed + 100, 0.1, 0.9, true);
    CHECK(grad_check([&] { return weigh(channel_gate(x4, cg)); }, {x4, cg}).max_rel_error <= 1e-4);
    auto rs = random_tensor<double>({3}, seed + 110, -1, 1, true);
    CHECK(grad_check([&] { return weigh(row_scale(x2, rs)); }, {x2, rs}).max_rel_error <= 1e-4);

    auto gamma = random_tensor<double>({4}, seed + 120, 0.5, 1.5, true);
    auto beta = random_tensor<double>({4}, seed + 130, -1, 1, true);
    auto xb = random_tensor<double>({6, 4}, seed + 140, -2, 2, true);
    BatchNormState st1(4);
    CHECK(grad_check([&] { return weigh(batch_norm_1d(xb, gamma, beta, st1, Mode::train)); }, {xb, gamma, beta})
              .max_rel_error <= 1e-4);
    auto gamma3 = random_tensor<double>({3}, seed + 150, 0.5, 1.5, true);
    auto beta3 = random_tensor<double>({3}, seed + 160, -1, 1, true);
    BatchNormState st2(3);
    CHECK(grad_check([&] { return weigh(batch_norm_2d(x4, gamma3, beta3, st2, Mode::train)); }, {x4, gamma3, beta3})
              .max_rel_error <= 1e-4);

    auto logits = random_tensor<double>({3, 5}, seed + 170, -2, 2, true);
    std::vector<int> labels{0, 4, 2};
    CHECK(grad_check([&] { return softmax_cross_entropy(logits, labels); }, {logits}).max_rel_error <= 1e-4);
  }
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
  auto run = [] {
    auto x = random_tensor<float>({2, 3, 8, 8}, 5);
    auto w = random_tensor<float>({4, 3, 3, 3}, 6);
    auto y = conv2d(x, w, Tensor<float>::zeros({4}), 1, 1);
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  CHECK(run() == run());
}
