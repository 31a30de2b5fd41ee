#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lgaf/degradation.hpp"
#include "lgaf/train_eval.hpp"

using namespace lgaf;

namespace {

Image filled(float v, int c = 3, int h = 32, int w = 32) {
  Image im(c, h, w);
  for (auto& x : im.data) x = v;
  return im;
}

// Pearson via standardized scores in long double.
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  long double vx = 0, vy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  const long double sx = std::sqrt(vx / n), sy = std::sqrt(vy / n);
  long double r = 0;
  for (std::size_t i = 0; i < x.size(); ++i) r += ((x[i] - mx) / sx) * ((y[i] - my) / sy);
  return static_cast<double>(r / n);
}

ModelConfig tiny_model(FusionMode mode) {
  ModelConfig c;
  c.backbone.input_height = 16;
  c.backbone.input_width = 16;
  c.backbone.channel_widths = {4, 8};
  c.backbone.blocks_per_stage = 1;
  c.mhms.scales = {1, 3};
  c.mhms.heads = 2;
  c.mhms.embedding_dim = 8;
  c.mhms.lanet_reduction = 4;
  c.mhms.se_reduction = 4;
  c.n_classes = 4;
  c.fusion_mode = mode;
  return c;
}

}  // namespace

TEST_CASE("degradation specs") {
  CHECK(parse_degradation_kind("blur") == DegradationKind::blur);
  CHECK(to_string(DegradationKind::deformation) == "deformation");
  CHECK_THROWS_AS(parse_degradation_kind("noise"), std::invalid_argument);
  DegradationSpec blur;
  CHECK(blur.levels == std::vector<double>{0, 6, 12, 18});
  CHECK_NOTHROW(blur.validate());
  CHECK_THROWS(DegradationSpec{DegradationKind::blur, {0, 12, 6}}.validate());
  CHECK_THROWS(DegradationSpec{DegradationKind::occlusion, {0, 0.8}}.validate());
  CHECK_THROWS(DegradationSpec{DegradationKind::deformation, {-1, 0}}.validate());
}

TEST_CASE("every kind is the identity at level zero") {
  auto faces = gen_synthetic_faces(2, 3, 32, 32, 4);
  for (const auto& im : faces.images)
    for (auto kind : {DegradationKind::occlusion, DegradationKind::deformation, DegradationKind::blur})
      CHECK(degrade(im, kind, 0.0, RngStream(1), true) == im);
}

TEST_CASE("occlusion") {
  auto ones = filled(1.0f);
  auto half = apply_occlusion(ones, 0.5);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) CHECK(half.at(1, y, x) == (x < 16 ? 0.0f : 1.0f));
  CHECK(apply_occlusion(ones, 0.1).at(0, 0, 3) == 0.0f);
  CHECK(apply_occlusion(ones, 0.1).at(0, 0, 4) == 1.0f);
  CHECK_THROWS_AS(apply_occlusion(ones, 0.61), std::invalid_argument);
  CHECK_THROWS_AS(apply_occlusion(ones, -0.1), std::invalid_argument);

  auto face = gen_synthetic_faces(2, 2, 32, 32, 9).images[0];
  double previous = face.mean();
  for (double f = 0.05; f <= 0.6; f += 0.05) {
    const double m = apply_occlusion(face, f).mean();
    CHECK(m <= previous);
    previous = m;
  }

  int right = 0;
  for (std::uint64_t i = 0; i < 40; ++i) {
    RngStream side = RngStream(i);
    auto o = apply_occlusion(ones, 0.25, &side);
    if (o.at(0, 0, 31) == 0.0f) {
      ++right;
      CHECK(o.at(0, 0, 0) == 1.0f);
    }
    RngStream again = RngStream(i);
    CHECK(apply_occlusion(ones, 0.25, &again) == o);
  }
  CHECK(right > 0);
  CHECK(right < 40);
}

TEST_CASE("deformation") {
  auto faces = gen_synthetic_faces(4, 5, 32, 32, 11);
  SUBCASE("deterministic for a seed") {
    const auto& im = faces.images[0];
    CHECK(apply_deformation(im, 3.0, RngStream(5)) == apply_deformation(im, 3.0, RngStream(5)));
    CHECK_FALSE(apply_deformation(im, 3.0, RngStream(5)) == apply_deformation(im, 3.0, RngStream(6)));
    CHECK_FALSE(apply_deformation(im, 3.0, RngStream(5)) == im);
  }
  SUBCASE("confined to a window of at most 30% of the area") {
    for (std::size_t i = 0; i < faces.images.size(); ++i) {
      const auto& im = faces.images[i];
      auto d = apply_deformation(im, 4.0, RngStream(i));
      int changed = 0;
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          bool any = false;
          for (int c = 0; c < 3; ++c) any = any || d.at(c, y, x) != im.at(c, y, x);
          changed += any;
        }
      CHECK(changed <= static_cast<int>(0.3 * 32 * 32));
    }
  }
  SUBCASE("means are approximately preserved") {
    for (double mag : {1.0, 2.0, 4.0})
      for (std::size_t i = 0; i < faces.images.size(); ++i) {
        const double m0 = faces.images[i].mean();
        const double m1 = apply_deformation(faces.images[i], mag, RngStream(100 + i)).mean();
        CHECK(std::abs(m1 - m0) <= 0.02 * m0);
      }
  }
  SUBCASE("larger magnitudes move more") {
    const auto& im = faces.images[3];
    double previous = 0.0;
    for (double mag : {0.5, 1.0, 2.0, 4.0}) {
      auto d = apply_deformation(im, mag, RngStream(7));
      double diff = 0.0;
      for (std::size_t k = 0; k < im.data.size(); ++k) diff += std::abs(d.data[k] - im.data[k]);
      CHECK(diff > previous);
      previous = diff;
    }
  }
  CHECK_THROWS_AS(apply_deformation(faces.images[0], -1.0, RngStream(1)), std::invalid_argument);
}

TEST_CASE("motion blur") {
  auto face = gen_synthetic_faces(2, 2, 32, 32, 3).images[1];
  CHECK(apply_motion_blur(face, 0) == face);
  CHECK(apply_motion_blur(face, 1) == face);
  CHECK_THROWS_AS(apply_motion_blur(face, -1), std::invalid_argument);
  for (float v : {0.0f, 0.3f, 0.7071f, 1.0f})
    for (int len : {2, 6, 12, 18}) CHECK(apply_motion_blur(filled(v), len) == filled(v));

  Image dot = filled(0.0f, 1, 5, 20);
  dot.at(0, 2, 10) = 1.0f;
  auto b = apply_motion_blur(dot, 6);
  int lit = 0;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 20; ++x) {
      const float v = b.at(0, y, x);
      if (v != 0.0f) {
        ++lit;
        CHECK(y == 2);
        CHECK(std::abs(v - 1.0f / 6.0f) <= 1e-7f);
      }
    }
  CHECK(lit == 6);

  // Face crops at the size the blur lengths are defined for.
  auto faces = gen_synthetic_faces(5, 4, 112, 112, 8);
  for (const auto& im : faces.images)
    for (int len : {6, 12, 18}) CHECK(std::abs(apply_motion_blur(im, len).mean() - im.mean()) <= 0.01 * im.mean());
}

TEST_CASE("pearson") {
  std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> up, down;
  for (double v : x) {
    up.push_back(2 * v + 1);
    down.push_back(-v);
  }
  CHECK(std::abs(pearson(x, up) - 1.0) <= 1e-15);
  CHECK(std::abs(pearson(x, down) + 1.0) <= 1e-15);
  CHECK(std::abs(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2}) - 0.5) <= 1e-15);
  CHECK_THROWS_AS(pearson(x, std::vector<double>(5, 2.0)), std::invalid_argument);
  CHECK_THROWS_AS(pearson(std::vector<double>{1, 2}, std::vector<double>{2, 1}), std::invalid_argument);
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 2}), std::invalid_argument);

  RngStream rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.below(200);
    std::vector<double> a(n), b(n);
    const double shift = rng.uniform(-100, 100);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal() + shift;
      b[i] = 0.3 * a[i] + rng.normal();
    }
    CHECK(std::abs(pearson(a, b) - pearson_oracle(a, b)) <= 1e-12);
  }
}

TEST_CASE("norm correlation") {
  auto probes = gen_synthetic_faces(4, 5, 16, 16, 12).images;
  Model<float> model(tiny_model(FusionMode::lgf), 3);
  SUBCASE("report contents") {
    DegradationSpec spec{DegradationKind::blur, {0, 2, 4, 6}};
    auto r = norm_correlation(model, probes, spec, 1);
    CHECK(r.untrained);
    CHECK(r.n == 80);
    REQUIRE(r.levels.size() == 4);
    CHECK(r.levels[2].count == 20);
    REQUIRE(r.r_local);
    REQUIRE(r.r_global);
    CHECK(std::abs(*r.r_local) <= 1.0);
    auto clean = embed_dataset(model, probes);
    double m = 0.0;
    for (double z : clean.z_local) m += z;
    CHECK(std::abs(r.levels[0].mean_zl - m / 20.0) <= 1e-12);
    auto again = norm_correlation(model, probes, spec, 1);
    CHECK(*again.r_local == *r.r_local);
    CHECK(*again.r_global == *r.r_global);
    CHECK(model.fusion_state().step == 0);
  }
  SUBCASE("clean-only ladder has no correlation") {
    CHECK_THROWS_AS(norm_correlation(model, probes, {DegradationKind::blur, {0}}, 1), std::invalid_argument);
  }
  SUBCASE("byte-identical levels give zero correlation") {
    auto r = norm_correlation(model, probes, {DegradationKind::blur, {0, 1}}, 1);
    CHECK(std::abs(*r.r_local) <= 1e-12);
    CHECK(r.levels[0].mean_zg == r.levels[1].mean_zg);
  }
  SUBCASE("single-branch models report one branch") {
    Model<float> local(tiny_model(FusionMode::local_only), 3);
    auto r = norm_correlation(local, probes, {DegradationKind::occlusion, {0, 0.2, 0.4}}, 1);
    CHECK(r.r_local);
    CHECK_FALSE(r.r_global);
  }
  SUBCASE("too few probes") {
    std::vector<Image> few(probes.begin(), probes.begin() + 19);
    CHECK_THROWS_AS(norm_correlation(model, few, {}, 1), std::invalid_argument);
  }
  SUBCASE("written reports") {
    auto r = norm_correlation(model, probes, {DegradationKind::deformation, {0, 1, 2}}, 4);
    const auto dir = std::filesystem::temp_directory_path();
    write_correlation_csv(r, dir / "lgaf_corr.csv");
    write_correlation_summary(r, dir / "lgaf_corr.json");
    std::ifstream csv(dir / "lgaf_corr.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "kind,level,mean_Zl,std_Zl,mean_Zg,std_Zg");
    std::getline(csv, line);
    CHECK(line.rfind("deformation,0,", 0) == 0);
    auto j = nlohmann::json::parse(std::ifstream(dir / "lgaf_corr.json"));
    CHECK(j["r_local"].get<double>() == *r.r_local);
    CHECK(j["n"] == 60);
    CHECK(j["seed"] == 4);
    CHECK(j["untrained"] == true);
    std::filesystem::remove(dir / "lgaf_corr.csv");
    std::filesystem::remove(dir / "lgaf_corr.json");
  }
}

TEST_CASE("synthetic faces") {
  auto a = gen_synthetic_faces(20, 50, 32, 32, 1);
  CHECK(a.size() == 1000);
  CHECK(a.n_classes == 20);
  std::vector<int> counts(20, 0);
  for (int y : a.labels) ++counts[y];
  for (int c : counts) CHECK(c == 50);
  for (const auto& im : a.images) {
    CHECK(im.channels == 3);
    CHECK(im.height == 32);
    for (float v : im.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  auto b = gen_synthetic_faces(20, 50, 32, 32, 1);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK_FALSE(gen_synthetic_faces(20, 50, 32, 32, 2).images == a.images);

  auto small = gen_synthetic_faces(6, 6, 32, 32, 5);
  double intra = 0.0, inter = 0.0;
  int n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < small.size(); ++i)
    for (std::size_t j = i + 1; j < small.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < small.images[i].data.size(); ++k) {
        const double t = small.images[i].data[k] - small.images[j].data[k];
        d += t * t;
      }
      d = std::sqrt(d);
      if (small.labels[i] == small.labels[j]) {
        intra += d;
        ++n_intra;
      } else {
        inter += d;
        ++n_inter;
      }
    }
  CHECK(intra / n_intra < inter / n_inter);

  CHECK_THROWS_AS(gen_synthetic_faces(1, 5, 32, 32, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_synthetic_faces(5, 1, 32, 32, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_synthetic_faces(5, 5, 4, 4, 1), std::invalid_argument);
}
