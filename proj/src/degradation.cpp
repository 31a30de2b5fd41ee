#include "lgaf/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

#include "lgaf/train_eval.hpp"

namespace lgaf {

DegradationKind parse_degradation_kind(const std::string& name) {
  if (name == "occlusion") return DegradationKind::occlusion;
  if (name == "deformation") return DegradationKind::deformation;
  if (name == "blur") return DegradationKind::blur;
  throw std::invalid_argument("unknown degradation kind '" + name + "' (expected occlusion, deformation or blur)");
}

std::string to_string(DegradationKind kind) {
  switch (kind) {
    case DegradationKind::occlusion: return "occlusion";
    case DegradationKind::deformation: return "deformation";
    case DegradationKind::blur: return "blur";
  }
  return "blur";
}

void DegradationSpec::validate() const {
  if (levels.empty()) throw std::invalid_argument("degradation: no levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double v = levels[i];
    if (i > 0 && v < levels[i - 1]) throw std::invalid_argument("degradation: levels must be ascending");
    if (kind == DegradationKind::occlusion && (v < 0.0 || v > 0.6)) {
      throw std::invalid_argument("degradation: occlusion fraction " + std::to_string(v) + " outside [0, 0.6]");
    }
    if (kind == DegradationKind::deformation && v < 0.0) {
      throw std::invalid_argument("degradation: deformation magnitude must be >= 0");
    }
    if (kind == DegradationKind::blur && (v < 0.0 || v != std::floor(v))) {
      throw std::invalid_argument("degradation: blur length must be a non-negative integer");
    }
  }
}

Image apply_occlusion(const Image& image, double fraction, RngStream* side_rng) {
  if (!(fraction >= 0.0 && fraction <= 0.6)) {
    throw std::invalid_argument("apply_occlusion: fraction " + std::to_string(fraction) + " outside [0, 0.6]");
  }
  Image out = image;
  const int cols = static_cast<int>(std::ceil(fraction * image.width - 1e-9));
  const bool right = side_rng != nullptr && side_rng->bernoulli(0.5);
  for (int c = 0; c < out.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int k = 0; k < cols; ++k) out.at(c, y, right ? out.width - 1 - k : k) = 0.0f;
  return out;
}

namespace {

// Separable Gaussian smoothing with edge replication.
std::vector<double> smooth(const std::vector<double>& f, int h, int w, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (int k = -r; k <= r; ++k) total += kernel[static_cast<std::size_t>(k + r)] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (auto& v : kernel) v /= total;
  std::vector<double> tmp(f.size()), out(f.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) s += kernel[static_cast<std::size_t>(k + r)] * f[static_cast<std::size_t>(y * w + std::clamp(x + k, 0, w - 1))];
      tmp[static_cast<std::size_t>(y * w + x)] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) s += kernel[static_cast<std::size_t>(k + r)] * tmp[static_cast<std::size_t>(std::clamp(y + k, 0, h - 1) * w + x)];
      out[static_cast<std::size_t>(y * w + x)] = s;
    }
  return out;
}

float sample_bilinear(const Image& im, int c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(im.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(im.width - 1));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, im.height - 1), x1 = std::min(x0 + 1, im.width - 1);
  const double wy = y - y0, wx = x - x0;
  const double top = im.at(c, y0, x0) * (1 - wx) + im.at(c, y0, x1) * wx;
  const double bottom = im.at(c, y1, x0) * (1 - wx) + im.at(c, y1, x1) * wx;
  return static_cast<float>(top * (1 - wy) + bottom * wy);
}

}  // namespace

Image apply_deformation(const Image& image, double magnitude, const RngStream& rng) {
  if (magnitude < 0.0) throw std::invalid_argument("apply_deformation: magnitude must be >= 0");
  if (magnitude == 0.0) return image;
  const int h = image.height, w = image.width;
  RngStream r = rng.substream("deformation");
  // Square window covering 30% of the area, placed at random.
  const int side_h = std::max(1, static_cast<int>(std::floor(std::sqrt(0.3) * h)));
  const int side_w = std::max(1, static_cast<int>(std::floor(std::sqrt(0.3) * w)));
  const int y0 = static_cast<int>(r.below(static_cast<std::uint64_t>(h - side_h + 1)));
  const int x0 = static_cast<int>(r.below(static_cast<std::uint64_t>(w - side_w + 1)));
  const auto n = static_cast<std::size_t>(h) * w;
  // The displacement is the curl of a smoothed random stream function, so it
  // is divergence free and moves content around without compressing it.
  std::vector<double> psi(n);
  for (auto& v : psi) v = r.normal();
  const double sigma = std::max(1.0, std::min(side_h, side_w) / 4.0);
  psi = smooth(psi, h, w, sigma);
  auto inside = [&](int y, int x) { return y >= y0 && y < y0 + side_h && x >= x0 && x < x0 + side_w; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double taper = 0.0;
      if (inside(y, x)) {
        const double u = (y - y0 + 0.5) / side_h, v = (x - x0 + 0.5) / side_w;
        taper = std::sin(std::numbers::pi * u) * std::sin(std::numbers::pi * v);
      }
      psi[static_cast<std::size_t>(y * w + x)] *= taper * taper;
    }
  auto at = [&](int y, int x) { return psi[static_cast<std::size_t>(std::clamp(y, 0, h - 1) * w + std::clamp(x, 0, w - 1))]; };
  std::vector<double> dx(n, 0.0), dy(n, 0.0);
  double peak = 0.0;
  for (int y = y0; y < y0 + side_h; ++y)
    for (int x = x0; x < x0 + side_w; ++x) {
      const auto i = static_cast<std::size_t>(y * w + x);
      dx[i] = 0.5 * (at(y + 1, x) - at(y - 1, x));
      dy[i] = -0.5 * (at(y, x + 1) - at(y, x - 1));
      peak = std::max(peak, std::hypot(dx[i], dy[i]));
    }
  if (peak == 0.0) return image;
  const double gain = magnitude / peak;
  Image out(image.channels, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y * w + x);
      for (int c = 0; c < image.channels; ++c) {
        out.at(c, y, x) = dx[i] == 0.0 && dy[i] == 0.0 ? image.at(c, y, x)
                                                         : sample_bilinear(image, c, y + gain * dy[i], x + gain * dx[i]);
      }
    }
  return out;
}

Image apply_motion_blur(const Image& image, int length) {
  if (length < 0) throw std::invalid_argument("apply_motion_blur: length must be >= 0");
  if (length <= 1) return image;
  Image out(image.channels, image.height, image.width);
  const int left = length / 2;
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        double s = 0.0;
        for (int k = 0; k < length; ++k) s += image.at(c, y, std::clamp(x - left + k, 0, image.width - 1));
        out.at(c, y, x) = static_cast<float>(s / length);
      }
  return out;
}

Image degrade(const Image& image, DegradationKind kind, double level, const RngStream& rng, bool randomize_side) {
  switch (kind) {
    case DegradationKind::occlusion: {
      RngStream side = rng.substream("occlusion-side");
      return apply_occlusion(image, level, randomize_side ? &side : nullptr);
    }
    case DegradationKind::deformation: return apply_deformation(image, level, rng);
    case DegradationKind::blur: return apply_motion_blur(image, static_cast<int>(level));
  }
  return image;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pearson: sequences differ in length");
  if (xs.size() < 3) throw std::invalid_argument("pearson: need at least 3 points");
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: undefined for a constant sequence");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

std::pair<double, double> mean_std(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

}  // namespace

CorrelationReport norm_correlation(Model<float>& model, std::span<const Image> probes, const DegradationSpec& spec,
                                   std::uint64_t seed) {
  spec.validate();
  if (probes.size() < 20) throw std::invalid_argument("norm_correlation: need at least 20 probe images");
  CorrelationReport report;
  report.kind = spec.kind;
  report.seed = seed;
  report.untrained = model.steps_trained() == 0;
  const RngStream base = RngStream(seed).substream(to_string(spec.kind));
  std::vector<double> xs, zl, zg;
  for (double level : spec.levels) {
    std::vector<Image> degraded;
    degraded.reserve(probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i) degraded.push_back(degrade(probes[i], spec.kind, level, base.substream("image", i)));
    auto set = embed_dataset(model, degraded);
    LevelStats st;
    st.level = level;
    st.count = probes.size();
    if (model.config().uses_local()) std::tie(st.mean_zl, st.std_zl) = mean_std(set.z_local);
    if (model.config().uses_global()) std::tie(st.mean_zg, st.std_zg) = mean_std(set.z_global);
    report.levels.push_back(st);
    xs.insert(xs.end(), probes.size(), level);
    zl.insert(zl.end(), set.z_local.begin(), set.z_local.end());
    zg.insert(zg.end(), set.z_global.begin(), set.z_global.end());
  }
  report.n = xs.size();
  if (model.config().uses_local()) report.r_local = pearson(xs, zl);
  if (model.config().uses_global()) report.r_global = pearson(xs, zg);
  return report;
}

void write_correlation_csv(const CorrelationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "kind,level,mean_Zl,std_Zl,mean_Zg,std_Zg\n" << std::setprecision(17);
  for (const auto& l : report.levels) {
    out << to_string(report.kind) << ',' << l.level << ',' << l.mean_zl << ',' << l.std_zl << ',' << l.mean_zg << ','
        << l.std_zg << '\n';
  }
}

void write_correlation_summary(const CorrelationReport& report, const std::filesystem::path& path) {
  nlohmann::json j;
  j["kind"] = to_string(report.kind);
  j["r_local"] = report.r_local ? nlohmann::json(*report.r_local) : nlohmann::json(nullptr);
  j["r_global"] = report.r_global ? nlohmann::json(*report.r_global) : nlohmann::json(nullptr);
  j["n"] = report.n;
  j["seed"] = report.seed;
  j["untrained"] = report.untrained;
  auto& levels = j["levels"] = nlohmann::json::array();
  for (const auto& l : report.levels) levels.push_back(l.level);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

namespace {

struct Blob {
  double cy, cx, ry, rx;  // fractions of the image size
  double angle;
  double color[3];
};

struct FaceLayout {
  double skin[3];
  double face_cy, face_cx, face_ry, face_rx;
  std::vector<Blob> parts;
  double tex_fy[2], tex_fx[2], tex_phase[2], tex_amp;
};

FaceLayout random_layout(RngStream& r) {
  FaceLayout f;
  const double tone = r.uniform(0.45, 0.85);
  f.skin[0] = tone + r.uniform(0.0, 0.1);
  f.skin[1] = tone * r.uniform(0.75, 0.9);
  f.skin[2] = tone * r.uniform(0.55, 0.8);
  f.face_cy = 0.52;
  f.face_cx = 0.5;
  f.face_ry = r.uniform(0.36, 0.46);
  f.face_rx = r.uniform(0.28, 0.38);
  const double eye_y = r.uniform(0.34, 0.44), eye_dx = r.uniform(0.11, 0.19), eye_r = r.uniform(0.035, 0.07);
  const double iris[3] = {r.uniform(0.0, 0.35), r.uniform(0.0, 0.35), r.uniform(0.0, 0.35)};
  const double brow_dy = r.uniform(0.06, 0.1), brow_tilt = r.uniform(-0.4, 0.4), brow_w = r.uniform(0.05, 0.09);
  const double brow_shade = r.uniform(0.05, 0.3);
  for (int side : {-1, 1}) {
    f.parts.push_back({eye_y, 0.5 + side * eye_dx, eye_r * r.uniform(0.7, 1.0), eye_r, 0.0,
                       {iris[0], iris[1], iris[2]}});
    f.parts.push_back({eye_y - brow_dy, 0.5 + side * eye_dx, 0.018, brow_w, side * brow_tilt,
                       {brow_shade, brow_shade * 0.8, brow_shade * 0.6}});
  }
  const double nose_len = r.uniform(0.07, 0.14);
  f.parts.push_back({r.uniform(0.52, 0.58), 0.5, nose_len, r.uniform(0.025, 0.05), 0.0,
                     {f.skin[0] * 0.7, f.skin[1] * 0.65, f.skin[2] * 0.65}});
  f.parts.push_back({r.uniform(0.68, 0.78), 0.5, r.uniform(0.02, 0.045), r.uniform(0.09, 0.18), r.uniform(-0.15, 0.15),
                     {r.uniform(0.5, 0.8), r.uniform(0.1, 0.3), r.uniform(0.1, 0.3)}});
  for (int k = 0; k < 2; ++k) {
    f.tex_fy[k] = r.uniform(-0.4, 0.4);
    f.tex_fx[k] = r.uniform(-0.4, 0.4);
    f.tex_phase[k] = r.uniform(0.0, 2 * std::numbers::pi);
  }
  f.tex_amp = r.uniform(0.03, 0.08);
  return f;
}

// Soft inside-ness of an ellipse: ~1 inside, ~0 outside, smooth edge.
double soft_ellipse(double y, double x, double cy, double cx, double ry, double rx, double angle, double edge) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = ((x - cx) * c + (y - cy) * s) / rx;
  const double v = (-(x - cx) * s + (y - cy) * c) / ry;
  const double d = std::sqrt(u * u + v * v);
  return 1.0 / (1.0 + std::exp((d - 1.0) / edge));
}

Image render(const FaceLayout& f, int h, int w, RngStream& r) {
  const double ty = r.uniform(-0.1, 0.1), tx = r.uniform(-0.1, 0.1);
  const double brightness = r.uniform(-0.1, 0.1);
  const double background = r.uniform(0.15, 0.45);
  Image im(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double py = (y + 0.5) / h - ty, px = (x + 0.5) / w - tx;
      const double face = soft_ellipse(py, px, f.face_cy, f.face_cx, f.face_ry, f.face_rx, 0.0, 0.06);
      double tex = 0.0;
      for (int k = 0; k < 2; ++k) tex += std::sin(2 * std::numbers::pi * (f.tex_fy[k] * py * h + f.tex_fx[k] * px * w) + f.tex_phase[k]);
      double rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = background * (1 - face) + (f.skin[c] + f.tex_amp * tex) * face;
      for (const auto& b : f.parts) {
        const double a = soft_ellipse(py, px, b.cy, b.cx, b.ry, b.rx, b.angle, 0.12) * face;
        for (int c = 0; c < 3; ++c) rgb[c] = rgb[c] * (1 - a) + b.color[c] * a;
      }
      for (int c = 0; c < 3; ++c) {
        im.at(c, y, x) = static_cast<float>(std::clamp(rgb[c] + brightness + r.normal(0.0, 0.02), 0.0, 1.0));
      }
    }
  return im;
}

}  // namespace

Dataset gen_synthetic_faces(int n_ids, int n_per_id, int height, int width, std::uint64_t seed) {
  if (n_ids < 2 || n_per_id < 2) throw std::invalid_argument("gen_synthetic_faces: need n_ids >= 2 and n_per_id >= 2");
  if (height < 8 || width < 8) throw std::invalid_argument("gen_synthetic_faces: image size must be at least 8x8");
  Dataset d;
  d.n_classes = n_ids;
  const RngStream root(seed);
  for (int id = 0; id < n_ids; ++id) {
    RngStream layout_rng = root.substream("identity", static_cast<std::uint64_t>(id));
    const FaceLayout layout = random_layout(layout_rng);
    for (int k = 0; k < n_per_id; ++k) {
      RngStream image_rng = root.substream("image", static_cast<std::uint64_t>(id) * static_cast<std::uint64_t>(n_per_id) + k);
      d.images.push_back(render(layout, height, width, image_rng));
      d.labels.push_back(id);
    }
  }
  return d;
}

}  // namespace lgaf
