#include "lgaf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <zlib.h>

#include "lgaf/config.hpp"

namespace lgaf {

namespace {

std::filesystem::path strip(const std::filesystem::path& stem) {
  auto p = stem;
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p;
}

template <typename U, typename V>
void append_le(std::vector<unsigned char>& out, V value) {
  auto bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

template <typename U, typename V>
V read_le(const unsigned char* p) {
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<V>(bits);
}

std::uint32_t crc_of(const std::vector<unsigned char>& blob) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < blob.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(blob.size() - pos, 1u << 30));
    crc = crc32(crc, blob.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

nlohmann::json stats_json(const BranchStats& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"updates", s.updates}};
}

BranchStats stats_from(const nlohmann::json& j) {
  BranchStats s;
  j.at("mean").get_to(s.mean);
  j.at("stddev").get_to(s.stddev);
  j.at("updates").get_to(s.updates);
  return s;
}

}  // namespace

std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& stem) {
  auto p = strip(stem);
  p += ".json";
  return p;
}

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& stem) {
  auto p = strip(stem);
  p += ".bin";
  return p;
}

void save_checkpoint(Model<float>& model, const std::filesystem::path& stem, const CheckpointInfo& info) {
  std::vector<unsigned char> blob;
  auto tensors = nlohmann::json::array();
  auto record = [&](const std::string& name, const char* dtype, const Shape& shape, std::size_t begin) {
    tensors.push_back({{"name", name}, {"dtype", dtype}, {"shape", shape}, {"offset", begin},
                       {"bytes", blob.size() - begin}});
  };
  for (const auto& p : model.parameters()) {
    const std::size_t begin = blob.size();
    for (float v : p.tensor.data()) append_le<std::uint32_t>(blob, v);
    record(p.name, "float32", p.tensor.shape(), begin);
  }
  for (const auto& b : model.buffers()) {
    const Shape shape{static_cast<std::int64_t>(b.state->running_mean.size())};
    std::size_t begin = blob.size();
    for (double v : b.state->running_mean) append_le<std::uint64_t>(blob, v);
    record(b.name + ".running_mean", "float64", shape, begin);
    begin = blob.size();
    for (double v : b.state->running_var) append_le<std::uint64_t>(blob, v);
    record(b.name + ".running_var", "float64", shape, begin);
  }
  const FusionState& f = model.fusion_state();
  nlohmann::json manifest = {
      {"format_version", kCheckpointFormatVersion},
      {"blob", checkpoint_blob_path(stem).filename().string()},
      {"blob_bytes", blob.size()},
      {"crc32", crc_of(blob)},
      {"model", model_config_to_json(model.config())},
      {"fusion_state",
       {{"local", stats_json(f.local)},
        {"global", stats_json(f.global)},
        {"alpha", f.alpha},
        {"h", f.h},
        {"eps", f.eps},
        {"step", f.step}}},
      {"steps_trained", model.steps_trained()},
      {"epoch", info.epoch},
      {"dataset_seed", info.dataset_seed},
      {"extra", info.extra},
      {"tensors", tensors}};
  std::ofstream bin(checkpoint_blob_path(stem), std::ios::binary);
  if (!bin) throw CheckpointError("cannot write " + checkpoint_blob_path(stem).string());
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  std::ofstream js(checkpoint_manifest_path(stem));
  if (!js) throw CheckpointError("cannot write " + checkpoint_manifest_path(stem).string());
  js << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem) {
  const auto manifest_path = checkpoint_manifest_path(stem);
  std::ifstream js(manifest_path);
  if (!js) throw CheckpointError("cannot open checkpoint manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError(manifest_path.string() + ": unsupported format_version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointFormatVersion) + ")");
  }
  const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw CheckpointError("cannot open checkpoint blob " + blob_path.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const auto expected_bytes = manifest.at("blob_bytes").get<std::size_t>();
  const auto expected_crc = manifest.at("crc32").get<std::uint32_t>();
  const auto actual_crc = crc_of(blob);
  if (blob.size() != expected_bytes || actual_crc != expected_crc) {
    std::ostringstream msg;
    msg << blob_path.string() << ": checksum mismatch (crc32 " << actual_crc << " over " << blob.size()
        << " bytes, manifest expects " << expected_crc << " over " << expected_bytes << " bytes)";
    throw CheckpointError(msg.str());
  }

  LoadedCheckpoint out{Model<float>(model_config_from_json(manifest.at("model")), 0), manifest};
  Model<float>& model = out.model;
  std::map<std::string, const nlohmann::json*> index;
  for (const auto& t : manifest.at("tensors")) index[t.at("name").get<std::string>()] = &t;
  auto locate = [&](const std::string& name, const char* dtype, std::size_t count) {
    auto it = index.find(name);
    if (it == index.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
    const auto& t = *it->second;
    const std::size_t width = std::string(dtype) == "float32" ? 4 : 8;
    if (t.at("dtype").get<std::string>() != dtype || t.at("bytes").get<std::size_t>() != count * width) {
      throw CheckpointError("checkpoint tensor '" + name + "' has the wrong dtype or size");
    }
    const auto offset = t.at("offset").get<std::size_t>();
    if (offset + count * width > blob.size()) throw CheckpointError("checkpoint tensor '" + name + "' overruns the blob");
    return blob.data() + offset;
  };
  auto params = model.parameters();
  if (params.size() + 2 * model.buffers().size() != index.size()) {
    throw CheckpointError("checkpoint tensor set does not match the model");
  }
  for (auto& p : params) {
    auto data = p.tensor.mutable_data();
    const unsigned char* src = locate(p.name, "float32", data.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_le<std::uint32_t, float>(src + 4 * i);
  }
  for (auto& b : model.buffers()) {
    for (auto [suffix, vec] : {std::pair{".running_mean", &b.state->running_mean},
                               std::pair{".running_var", &b.state->running_var}}) {
      const unsigned char* src = locate(b.name + suffix, "float64", vec->size());
      for (std::size_t i = 0; i < vec->size(); ++i) (*vec)[i] = read_le<std::uint64_t, double>(src + 8 * i);
    }
  }
  const auto& fs = manifest.at("fusion_state");
  FusionState& f = model.fusion_state();
  f.local = stats_from(fs.at("local"));
  f.global = stats_from(fs.at("global"));
  fs.at("alpha").get_to(f.alpha);
  fs.at("h").get_to(f.h);
  fs.at("eps").get_to(f.eps);
  fs.at("step").get_to(f.step);
  model.set_steps_trained(manifest.at("steps_trained").get<std::int64_t>());
  return out;
}

}  // namespace lgaf
