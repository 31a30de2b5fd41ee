#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lgaf/image.hpp"
#include "lgaf/model.hpp"
#include "lgaf/rng.hpp"

namespace lgaf {

enum class DegradationKind { occlusion, deformation, blur };

DegradationKind parse_degradation_kind(const std::string& name);
std::string to_string(DegradationKind kind);

struct DegradationSpec {
  DegradationKind kind = DegradationKind::blur;
  std::vector<double> levels{0, 6, 12, 18};

  /// Levels must be ascending and valid for the kind.
  void validate() const;
};

/// Zeroes the leftmost ceil(fraction * W) columns, or the rightmost ones when
/// side_rng is given and its coin flip says so. fraction in [0, 0.6].
Image apply_occlusion(const Image& image, double fraction, RngStream* side_rng = nullptr);

/// Local elastic warp: a divergence-free displacement field derived from a
/// Gaussian-smoothed random stream function, confined to a window covering
/// at most 30% of the image, scaled so the largest displacement is
/// `magnitude` pixels, applied with bilinear resampling.
Image apply_deformation(const Image& image, double magnitude, const RngStream& rng);

/// Horizontal box blur of `length` pixels with edge replication. Lengths 0
/// and 1 are the identity.
Image apply_motion_blur(const Image& image, int length);

/// Applies one level of a degradation. rng seeds occlusion side (when
/// randomize_side) and the warp field.
Image degrade(const Image& image, DegradationKind kind, double level, const RngStream& rng,
              bool randomize_side = false);

/// Pearson product-moment correlation. Throws on mismatched lengths, fewer
/// than 3 points or a constant sequence.
double pearson(std::span<const double> xs, std::span<const double> ys);

struct LevelStats {
  double level = 0.0;
  std::size_t count = 0;
  double mean_zl = 0.0;
  double std_zl = 0.0;
  double mean_zg = 0.0;
  double std_zg = 0.0;
};

struct CorrelationReport {
  DegradationKind kind = DegradationKind::blur;
  std::vector<LevelStats> levels;
  /// Absent when the model has no such branch.
  std::optional<double> r_local;
  std::optional<double> r_global;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  bool untrained = false;
};

/// Degrades every probe at every level, embeds in eval mode and correlates
/// the level value with the per-image branch norms.
CorrelationReport norm_correlation(Model<float>& model, std::span<const Image> probes, const DegradationSpec& spec,
                                   std::uint64_t seed);

void write_correlation_csv(const CorrelationReport& report, const std::filesystem::path& path);
void write_correlation_summary(const CorrelationReport& report, const std::filesystem::path& path);

/// Identities are random layouts of smooth face-like blobs; each image adds
/// translation, brightness jitter and pixel noise. Labels are balanced and
/// grouped by identity.
Dataset gen_synthetic_faces(int n_ids, int n_per_id, int height, int width, std::uint64_t seed);

}  // namespace lgaf
