#include "lgaf/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "lgaf/ops.hpp"

namespace lgaf {

Image augment(const Image& image, RngStream& rng, const AugmentConfig& config) {
  Image out = image;
  const int h = image.height, w = image.width;
  if (rng.bernoulli(config.probability)) {
    const double area = rng.uniform(0.0, config.max_crop_area) * h * w;
    const double aspect = std::exp(rng.uniform(std::log(1.0 / 3.0), std::log(3.0)));
    int rh = std::min(h, static_cast<int>(std::sqrt(area * aspect)));
    int rw = std::min(w, static_cast<int>(std::sqrt(area / aspect)));
    while (rh > 0 && rw > 0 && rh * rw > config.max_crop_area * h * w) --rh;
    const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - rh + 1)));
    const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - rw + 1)));
    for (int c = 0; c < out.channels; ++c)
      for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) out.at(c, y, x) = 0.0f;
  }
  if (rng.bernoulli(config.probability)) {
    const double brightness = rng.uniform(-config.jitter, config.jitter);
    const double contrast = 1.0 + rng.uniform(-config.jitter, config.jitter);
    const double mean = out.mean();
    for (float& v : out.data) {
      v = static_cast<float>(std::clamp(v * contrast + (1.0 - contrast) * mean + brightness, 0.0, 1.0));
    }
  }
  if (rng.bernoulli(config.probability)) {
    const double fraction = rng.uniform(config.min_rescale, 1.0);
    const int sh = std::max(1, static_cast<int>(std::lround(fraction * h)));
    const int sw = std::max(1, static_cast<int>(std::lround(fraction * w)));
    if (sh != h || sw != w) out = resize_bilinear(resize_bilinear(out, sh, sw), h, w);
  }
  return out;
}

std::vector<int> default_schedule(int total_epochs) {
  std::vector<int> out;
  for (int m : {12, 20, 24}) {
    int e = static_cast<int>(std::lround(m * static_cast<double>(total_epochs) / 24.0));
    e = std::min(e, total_epochs - 2);
    if (e < 1 || e > total_epochs - 1) continue;
    if (!out.empty() && e <= out.back()) continue;
    out.push_back(e);
  }
  return out;
}

std::vector<int> TrainConfig::resolved_schedule() const {
  return schedule.empty() ? default_schedule(epochs) : schedule;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("train: batch_size must be >= 2");
  if (lr < 0.0) throw std::invalid_argument("train: lr must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train: momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (augment.probability < 0.0 || augment.probability > 1.0) {
    throw std::invalid_argument("train: aug_probability must be in [0, 1]");
  }
  if (workers < 1) throw std::invalid_argument("train: workers must be >= 1");
  int previous = -1;
  for (int e : schedule) {
    if (e <= previous || e < 0 || e >= epochs) {
      throw std::invalid_argument("train: schedule must be strictly increasing within [0, epochs)");
    }
    previous = e;
  }
}

double learning_rate_at(const TrainConfig& config, int epoch) {
  double lr = config.lr;
  for (int e : config.resolved_schedule()) {
    if (epoch >= e) lr /= 10.0;
  }
  return lr;
}

namespace {

template <typename T>
bool all_finite(const Tensor<T>& t) {
  if (!t.defined()) return true;
  for (T v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string first_non_finite(Model<float>& model, const Model<float>::Output& out) {
  const std::pair<const char*, const Tensor<float>*> stages[] = {{"f_local", &out.bundle.f_local},
                                                                 {"f_global", &out.bundle.f_global},
                                                                 {"kappa", &out.bundle.kappa},
                                                                 {"cosines", &out.cosines},
                                                                 {"logits", &out.logits}};
  for (auto& p : model.parameters()) {
    if (!all_finite(p.tensor)) return "parameter " + p.name;
  }
  for (const auto& [name, t] : stages) {
    if (!all_finite(*t)) return name;
  }
  return "loss";
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream rng = RngStream(seed).substream("shuffle", static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<Image> augment_batch(const Dataset& data, std::span<const std::size_t> indices, const TrainConfig& config,
                                 int epoch) {
  std::vector<Image> out(indices.size());
  const RngStream base = RngStream(config.seed).substream("augment", static_cast<std::uint64_t>(epoch));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      RngStream rng = base.substream("sample", indices[i]);
      out[i] = augment(data.images[indices[i]], rng, config.augment);
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config.workers), indices.size());
  if (workers <= 1) {
    work(0, indices.size());
    return out;
  }
  std::vector<std::thread> threads;
  const std::size_t chunk = (indices.size() + workers - 1) / workers;
  for (std::size_t t = 0; t < workers; ++t) {
    const std::size_t begin = t * chunk, end = std::min(indices.size(), begin + chunk);
    if (begin < end) threads.emplace_back(work, begin, end);
  }
  for (auto& th : threads) th.join();
  return out;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

TrainResult train(Model<float>& model, const Dataset& data, const TrainConfig& config,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  if (data.size() < 2) throw std::invalid_argument("train: dataset needs at least 2 images");
  for (int y : data.labels) {
    if (y < 0 || y >= model.config().n_classes) {
      throw std::out_of_range("train: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(model.config().n_classes) + ")");
    }
  }
  auto params = model.parameters();
  std::vector<std::vector<float>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(params[i].tensor.data().size(), 0.0f);

  TrainResult result;
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate_at(config, epoch);
    const auto order = epoch_order(data.size(), config.seed, epoch);
    double loss_sum = 0.0, zl_sum = 0.0, zg_sum = 0.0, gl_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto images = augment_batch(data, idx, config, epoch);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(data.labels[i]);
      auto out = model.forward(stack_images<float>(images), labels, Mode::train);
      const double loss = out.loss.item();
      if (!std::isfinite(loss)) {
        throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(result.steps) + "; first non-finite tensor: " +
                             first_non_finite(model, out));
      }
      for (auto& p : params) p.tensor.zero_grad();
      backward(out.loss);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].tensor.mutable_data();
        if (!params[i].tensor.has_grad()) continue;
        auto g = params[i].tensor.grad();
        auto& v = velocity[i];
        const auto mom = static_cast<float>(config.momentum), wd = static_cast<float>(config.weight_decay),
                   step = static_cast<float>(lr);
        for (std::size_t k = 0; k < w.size(); ++k) {
          v[k] = mom * v[k] + (g[k] + wd * w[k]);
          w[k] -= step * v[k];
        }
      }
      ++result.steps;
      model.set_steps_trained(model.steps_trained() + 1);
      result.final_loss = loss;

      const auto n = idx.size();
      const auto k = static_cast<std::size_t>(out.cosines.dim(1));
      auto cos = out.cosines.data();
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = cos.subspan(i * k, k);
        const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        if (pred == labels[i]) ++correct;
      }
      loss_sum += loss * static_cast<double>(n);
      zl_sum += mean_of(out.bundle.z_local) * static_cast<double>(n);
      zg_sum += mean_of(out.bundle.z_global) * static_cast<double>(n);
      gl_sum += mean_of(out.bundle.gamma_local) * static_cast<double>(n);
      seen += n;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    const auto denom = static_cast<double>(std::max<std::size_t>(seen, 1));
    m.loss = loss_sum / denom;
    m.train_acc = static_cast<double>(correct) / denom;
    m.mean_zl = zl_sum / denom;
    m.mean_zg = zg_sum / denom;
    m.mean_gamma_l = gl_sum / denom;
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

void write_metrics_csv(const std::vector<EpochMetrics>& metrics, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,loss,train_acc,lr,mean_Zl,mean_Zg,mean_gamma_l\n";
  out << std::setprecision(17);
  for (const auto& m : metrics) {
    out << m.epoch << ',' << m.loss << ',' << m.train_acc << ',' << m.lr << ',' << m.mean_zl << ',' << m.mean_zg
        << ',' << m.mean_gamma_l << '\n';
  }
}

EmbeddingSet embed_dataset(Model<float>& model, std::span<const Image> images, int batch_size) {
  NoGradGuard no_grad;
  EmbeddingSet set;
  set.dim = model.config().embedding_dim();
  const auto d = static_cast<std::size_t>(set.dim);
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
    auto b = model.embed(stack_images<float>(images.subspan(start, end - start)), Mode::eval);
    auto kappa = b.kappa.data();
    set.kappa.insert(set.kappa.end(), kappa.begin(), kappa.end());
    if (b.f_local.defined()) set.f_local.insert(set.f_local.end(), b.f_local.data().begin(), b.f_local.data().end());
    if (b.f_global.defined()) {
      set.f_global.insert(set.f_global.end(), b.f_global.data().begin(), b.f_global.data().end());
    }
    const auto n = end - start;
    auto append = [n](std::vector<double>& dst, const std::vector<double>& src) {
      if (src.empty()) dst.insert(dst.end(), n, std::nan(""));
      else dst.insert(dst.end(), src.begin(), src.end());
    };
    append(set.z_local, b.z_local);
    append(set.z_global, b.z_global);
    append(set.gamma_local, b.gamma_local);
    append(set.gamma_global, b.gamma_global);
  }
  set.kappa_hat.resize(set.kappa.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(set.kappa[i * d + j]) * set.kappa[i * d + j];
    const double norm = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) set.kappa_hat[i * d + j] = norm > 0.0 ? set.kappa[i * d + j] / norm : 0.0;
  }
  return set;
}

namespace {

std::vector<double> unit_rows(std::span<const double> x, int dim) {
  const auto d = static_cast<std::size_t>(dim);
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i * d < out.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += out[i * d + j] * out[i * d + j];
    const double norm = std::sqrt(s);
    if (norm > 0.0)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= norm;
  }
  return out;
}

double dot_rows(const std::vector<double>& a, std::size_t i, const std::vector<double>& b, std::size_t j,
                std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[j * d + k];
  return s;
}

}  // namespace

double verify(std::span<const Pair> pairs, std::span<const double> embeddings, int dim, int folds) {
  if (folds < 2) throw std::invalid_argument("verify: folds must be >= 2");
  if (pairs.size() < static_cast<std::size_t>(folds)) {
    throw std::invalid_argument("verify: " + std::to_string(pairs.size()) + " pairs is fewer than " +
                                std::to_string(folds) + " folds");
  }
  if (dim < 1 || embeddings.size() % static_cast<std::size_t>(dim) != 0) {
    throw ShapeError("verify: embedding buffer is not a multiple of dim");
  }
  const auto d = static_cast<std::size_t>(dim);
  const auto rows = unit_rows(embeddings, dim);
  const std::size_t n_rows = rows.size() / d;
  const std::size_t n = pairs.size();
  std::vector<double> sim(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (pairs[i].a >= n_rows || pairs[i].b >= n_rows) throw std::out_of_range("verify: pair index out of range");
    sim[i] = dot_rows(rows, pairs[i].a, rows, pairs[i].b, d);
  }
  auto fold_of = [&](std::size_t i) { return static_cast<int>(i * static_cast<std::size_t>(folds) / n); };

  double total = 0.0;
  for (int f = 0; f < folds; ++f) {
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < n; ++i)
      if (fold_of(i) != f) train.push_back(i);
    std::sort(train.begin(), train.end(), [&](std::size_t a, std::size_t b) {
      return sim[a] < sim[b] || (sim[a] == sim[b] && a < b);
    });
    // Threshold below everything: all pairs predicted same.
    long correct = 0;
    for (std::size_t i : train) correct += pairs[i].same ? 1 : 0;
    long best = correct;
    double threshold = train.empty() ? 0.0 : sim[train.front()] - 1.0;
    for (std::size_t k = 0; k < train.size();) {
      std::size_t g = k;
      while (g < train.size() && sim[train[g]] == sim[train[k]]) {
        correct += pairs[train[g]].same ? -1 : 1;
        ++g;
      }
      if (correct > best) {
        best = correct;
        threshold = g < train.size() ? 0.5 * (sim[train[k]] + sim[train[g]]) : sim[train[k]] + 1.0;
      }
      k = g;
    }
    std::size_t held = 0, right = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of(i) != f) continue;
      ++held;
      if ((sim[i] > threshold) == pairs[i].same) ++right;
    }
    total += static_cast<double>(right) / static_cast<double>(held);
  }
  return total / folds;
}

std::vector<double> identify(std::span<const double> gallery, std::span<const int> gallery_ids,
                             std::span<const double> probes, std::span<const int> probe_ids, int dim,
                             std::span<const int> ks) {
  const auto d = static_cast<std::size_t>(dim);
  if (dim < 1 || gallery.size() != gallery_ids.size() * d || probes.size() != probe_ids.size() * d) {
    throw ShapeError("identify: embedding buffers do not match ids and dim");
  }
  std::map<int, std::size_t> slot;
  std::vector<int> identities;
  for (int id : gallery_ids) {
    if (slot.emplace(id, identities.size()).second) identities.push_back(id);
  }
  for (int id : probe_ids) {
    if (!slot.count(id)) throw std::invalid_argument("identify: probe identity " + std::to_string(id) +
                                                     " is not in the gallery");
  }
  const auto g = unit_rows(gallery, dim);
  const auto p = unit_rows(probes, dim);
  std::vector<std::size_t> hits(ks.size(), 0);
  std::vector<double> best(identities.size());
  std::vector<std::size_t> best_index(identities.size());
  for (std::size_t q = 0; q < probe_ids.size(); ++q) {
    std::fill(best.begin(), best.end(), -std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < gallery_ids.size(); ++j) {
      const double s = dot_rows(p, q, g, j, d);
      const std::size_t id = slot[gallery_ids[j]];
      if (s > best[id]) {
        best[id] = s;
        best_index[id] = j;
      }
    }
    const std::size_t truth = slot[probe_ids[q]];
    int rank = 1;
    for (std::size_t id = 0; id < identities.size(); ++id) {
      if (id == truth) continue;
      if (best[id] > best[truth] || (best[id] == best[truth] && best_index[id] < best_index[truth])) ++rank;
    }
    for (std::size_t k = 0; k < ks.size(); ++k)
      if (rank <= ks[k]) ++hits[k];
  }
  std::vector<double> rates(ks.size());
  for (std::size_t k = 0; k < ks.size(); ++k)
    rates[k] = probe_ids.empty() ? 0.0 : static_cast<double>(hits[k]) / static_cast<double>(probe_ids.size());
  return rates;
}

}  // namespace lgaf
