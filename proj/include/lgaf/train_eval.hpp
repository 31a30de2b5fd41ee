#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lgaf/image.hpp"
#include "lgaf/model.hpp"
#include "lgaf/rng.hpp"

namespace lgaf {

struct AugmentConfig {
  /// Each operation is applied independently with this probability.
  double probability = 0.2;
  /// Upper bound on the zeroed rectangle's share of the image area.
  double max_crop_area = 0.4;
  /// Brightness offset and contrast factor deviation are drawn from [-jitter, jitter].
  double jitter = 0.3;
  /// Downscale fraction is drawn from [min_rescale, 1).
  double min_rescale = 0.25;
};

/// Random rectangle erase, brightness/contrast jitter and down-up rescaling.
Image augment(const Image& image, RngStream& rng, const AugmentConfig& config);

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 30;
  /// Epochs (0-based) at which the learning rate is divided by 10. Empty means
  /// default_schedule(epochs).
  std::vector<int> schedule;
  int batch_size = 64;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  /// Threads used for augmentation. Results do not depend on it.
  int workers = 1;

  std::vector<int> resolved_schedule() const;
  void validate() const;
};

/// {12, 20, 24} out of 24 scaled to total epochs and rounded, kept strictly
/// increasing inside [1, total - 1].
std::vector<int> default_schedule(int total_epochs);

/// Learning rate in effect during a 0-based epoch.
double learning_rate_at(const TrainConfig& config, int epoch);

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double lr = 0.0;
  double mean_zl = 0.0;
  double mean_zg = 0.0;
  double mean_gamma_l = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  /// Loss of the last optimization step.
  double final_loss = 0.0;
  std::int64_t steps = 0;
};

/// Raised when a step produces a non-finite loss.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mini-batch SGD with momentum and weight decay, step learning-rate decay
/// and per-sample augmentation. Deterministic given config.seed.
TrainResult train(Model<float>& model, const Dataset& data, const TrainConfig& config,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

void write_metrics_csv(const std::vector<EpochMetrics>& metrics, const std::filesystem::path& path);

/// Eval-mode embeddings of a set of images, one row per image.
struct EmbeddingSet {
  int dim = 0;
  std::vector<float> kappa;
  /// Rows of kappa scaled to unit length.
  std::vector<double> kappa_hat;
  std::vector<float> f_local;
  std::vector<float> f_global;
  std::vector<double> z_local;
  std::vector<double> z_global;
  std::vector<double> gamma_local;
  std::vector<double> gamma_global;

  std::size_t size() const { return dim == 0 ? 0 : kappa.size() / static_cast<std::size_t>(dim); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(kappa_hat).subspan(i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
  }
};

EmbeddingSet embed_dataset(Model<float>& model, std::span<const Image> images, int batch_size = 128);

struct Pair {
  std::size_t a = 0;
  std::size_t b = 0;
  bool same = false;
};

/// K-fold verification accuracy on cosine similarity of the embedding rows.
/// Each held-out fold uses the threshold that maximizes accuracy on the other
/// folds. embeddings is row-major [n, dim].
double verify(std::span<const Pair> pairs, std::span<const double> embeddings, int dim, int folds = 10);

/// Closed-set identification: identities are ranked by their best cosine
/// similarity to the probe, ties going to the lower gallery index. Returns the
/// fraction of probes whose identity ranks within k, for each k.
std::vector<double> identify(std::span<const double> gallery, std::span<const int> gallery_ids,
                             std::span<const double> probes, std::span<const int> probe_ids, int dim,
                             std::span<const int> ks);

}  // namespace lgaf
