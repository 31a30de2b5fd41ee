#include "lgaf/dataset_io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "lgaf/rng.hpp"

namespace lgaf {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  return out;
}

bool parse_int(const std::string& s, int& value) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, value);
  return ec == std::errc() && ptr == end;
}

// Calls row(fields, line_no) for every non-empty data row. A first row whose
// field `numeric` does not parse as an integer is taken as a header.
template <typename Row>
void read_csv(const fs::path& csv, std::size_t columns, std::size_t numeric, Row row) {
  std::ifstream in(csv);
  if (!in) throw ManifestError("cannot open " + csv.string());
  std::string line;
  int line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_row(line);
    int probe = 0;
    if (first && fields.size() == columns && !parse_int(fields[numeric], probe)) {
      first = false;
      continue;
    }
    first = false;
    if (fields.size() != columns) {
      throw ManifestError(csv.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(columns) +
                          " fields, got " + std::to_string(fields.size()));
    }
    row(fields, line_no);
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

std::vector<ManifestEntry> read_image_manifest(const fs::path& csv) {
  std::vector<ManifestEntry> out;
  const auto base = csv.parent_path();
  read_csv(csv, 2, 1, [&](const std::vector<std::string>& f, int line_no) {
    ManifestEntry e;
    e.path = resolve(base, f[0]);
    if (!parse_int(f[1], e.identity) || e.identity < 0) {
      throw ManifestError(csv.string() + ":" + std::to_string(line_no) + ": identity '" + f[1] +
                          "' is not a non-negative integer");
    }
    out.push_back(std::move(e));
  });
  if (out.empty()) throw ManifestError(csv.string() + ": no images listed");
  return out;
}

std::vector<PairEntry> read_pairs(const fs::path& csv) {
  std::vector<PairEntry> out;
  const auto base = csv.parent_path();
  read_csv(csv, 3, 2, [&](const std::vector<std::string>& f, int line_no) {
    int same = 0;
    if (!parse_int(f[2], same) || (same != 0 && same != 1)) {
      throw ManifestError(csv.string() + ":" + std::to_string(line_no) + ": same must be 0 or 1, got '" + f[2] + "'");
    }
    out.push_back({resolve(base, f[0]), resolve(base, f[1]), same == 1});
  });
  if (out.empty()) throw ManifestError(csv.string() + ": no pairs listed");
  return out;
}

Image load_image(const fs::path& path, int height, int width) {
  Image img = read_pnm(path);
  if (img.channels != 3) throw ManifestError(path.string() + ": expected a 3-channel image");
  if (img.height != height || img.width != width) img = resize_bilinear(img, height, width);
  return img;
}

Dataset load_dataset(const std::vector<ManifestEntry>& entries, int height, int width) {
  std::map<int, int> remap;
  for (const auto& e : entries) remap.emplace(e.identity, 0);
  int next = 0;
  for (auto& [id, label] : remap) label = next++;
  Dataset d;
  d.n_classes = next;
  for (const auto& e : entries) {
    d.images.push_back(load_image(e.path, height, width));
    d.labels.push_back(remap.at(e.identity));
  }
  return d;
}

GeneratedData write_dataset(const Dataset& data, const fs::path& out_dir, std::size_t n_pairs, std::uint64_t seed) {
  fs::create_directories(out_dir / "images");
  GeneratedData g;
  g.manifest = out_dir / "manifest.csv";
  g.gallery = out_dir / "gallery.csv";
  g.probes = out_dir / "probes.csv";
  g.pairs = out_dir / "pairs.csv";

  std::vector<std::string> rel(data.size());
  std::map<int, std::vector<std::size_t>> by_id;
  std::ofstream manifest(g.manifest), gallery(g.gallery), probes(g.probes);
  manifest << "path,identity\n";
  gallery << "path,identity\n";
  probes << "path,identity\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "images/%04d_%05zu.ppm", data.labels[i], i);
    rel[i] = name;
    write_pnm(data.images[i], out_dir / rel[i]);
    const bool first = by_id[data.labels[i]].empty();
    by_id[data.labels[i]].push_back(i);
    manifest << rel[i] << ',' << data.labels[i] << '\n';
    (first ? gallery : probes) << rel[i] << ',' << data.labels[i] << '\n';
  }
  g.images = data.size();

  std::vector<int> ids;
  for (const auto& [id, members] : by_id) ids.push_back(id);
  std::ofstream pairs(g.pairs);
  pairs << "path_a,path_b,same\n";
  RngStream rng = RngStream(seed).substream("pairs");
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const bool same = p % 2 == 0;
    const int ia = ids[rng.below(ids.size())];
    const auto& ma = by_id[ia];
    std::size_t a = ma[rng.below(ma.size())], b = a;
    if (same) {
      if (ma.size() < 2) throw std::invalid_argument("write_dataset: same pairs need two images per identity");
      while (b == a) b = ma[rng.below(ma.size())];
    } else {
      if (ids.size() < 2) throw std::invalid_argument("write_dataset: different pairs need two identities");
      int ib = ia;
      while (ib == ia) ib = ids[rng.below(ids.size())];
      const auto& mb = by_id[ib];
      b = mb[rng.below(mb.size())];
    }
    pairs << rel[a] << ',' << rel[b] << ',' << (same ? 1 : 0) << '\n';
  }
  g.pair_count = n_pairs;
  return g;
}

}  // namespace lgaf
