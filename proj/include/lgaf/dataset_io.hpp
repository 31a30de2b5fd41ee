#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "lgaf/image.hpp"

namespace lgaf {

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManifestEntry {
  std::filesystem::path path;
  int identity = 0;
};

struct PairEntry {
  std::filesystem::path a;
  std::filesystem::path b;
  bool same = false;
};

/// CSV rows "path,identity"; an optional header row is skipped. Relative paths
/// resolve against the manifest's directory.
std::vector<ManifestEntry> read_image_manifest(const std::filesystem::path& csv);

/// CSV rows "pathA,pathB,same" with same in {0,1}; optional header.
std::vector<PairEntry> read_pairs(const std::filesystem::path& csv);

/// Loads every image, resized to (height, width) when it differs. Labels are
/// the identities remapped to 0..K-1 in ascending identity order.
Dataset load_dataset(const std::vector<ManifestEntry>& entries, int height, int width);

Image load_image(const std::filesystem::path& path, int height, int width);

struct GeneratedData {
  std::filesystem::path manifest;
  std::filesystem::path gallery;
  std::filesystem::path probes;
  std::filesystem::path pairs;
  std::size_t images = 0;
  std::size_t pair_count = 0;
};

/// Writes a dataset as PPM files plus manifest.csv (all images), gallery.csv
/// (first image of each identity), probes.csv (the rest) and pairs.csv
/// (n_pairs balanced pairs drawn with seed). Paths are relative to out_dir.
GeneratedData write_dataset(const Dataset& data, const std::filesystem::path& out_dir, std::size_t n_pairs,
                            std::uint64_t seed);

}  // namespace lgaf
