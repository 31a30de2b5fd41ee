#include "lgaf/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

namespace lgaf {

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data_manifest.empty() && (data_ids < 2 || data_per_id < 2)) {
    throw std::invalid_argument("data_ids and data_per_id must be >= 2");
  }
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "seed",           "fusion_mode",      "workers",         "out_dir",        "input_height",
      "input_width",    "channel_widths",   "blocks_per_stage", "backbone_batch_norm", "scales",
      "heads",          "embedding_dim",    "lanet_reduction", "se_reduction",   "scale_channels",
      "head_batch_norm", "gfe_batch_norm",  "lgf_h",           "lgf_alpha",      "lgf_eps",
      "margin_kind",    "margin_scale",     "margin_m",        "lr",             "momentum",
      "weight_decay",   "epochs",           "schedule",        "batch_size",     "aug_probability",
      "aug_max_crop_area", "aug_jitter",    "aug_min_rescale", "data_manifest",  "data_ids",
      "data_per_id",    "data_seed"};
  return keys;
}

class Reader {
 public:
  Reader(const toml::table& table, std::string source) : table_(table), source_(std::move(source)) {}

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(source_ + ": key '" + key + "': " + what);
  }

  template <typename T>
  void get(const std::string& key, T& out) const {
    const toml::node* node = table_.get(key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = node->value_exact<bool>();
      if (!v) fail(key, "expected a boolean");
      out = *v;
    } else if constexpr (std::is_integral_v<T>) {
      auto v = node->value_exact<std::int64_t>();
      if (!v) fail(key, "expected an integer");
      if (std::is_unsigned_v<T> && *v < 0) fail(key, "must be non-negative");
      out = static_cast<T>(*v);
    } else if constexpr (std::is_floating_point_v<T>) {
      auto v = node->value<double>();
      if (!v) fail(key, "expected a number");
      out = static_cast<T>(*v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      auto v = node->value_exact<std::string>();
      if (!v) fail(key, "expected a string");
      out = *v;
    } else {
      const toml::array* arr = node->as_array();
      if (!arr) fail(key, "expected an array of integers");
      out.clear();
      for (const auto& e : *arr) {
        auto v = e.value_exact<std::int64_t>();
        if (!v) fail(key, "expected an array of integers");
        out.push_back(static_cast<int>(*v));
      }
    }
  }

  bool has(const std::string& key) const { return table_.contains(key); }

 private:
  const toml::table& table_;
  std::string source_;
};

}  // namespace

RunConfig parse_run_config(const std::string& toml_text, const std::string& source) {
  toml::table table;
  try {
    table = toml::parse(toml_text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source << ": " << e.description() << " (line " << e.source().begin.line << ")";
    throw ConfigError(msg.str());
  }
  for (const auto& [k, v] : table) {
    if (!known_keys().count(std::string(k.str()))) {
      throw ConfigError(source + ": unknown key '" + std::string(k.str()) + "'");
    }
  }
  Reader r(table, source);
  RunConfig c;
  auto& m = c.model;
  auto& t = c.train;
  std::string fusion = to_string(m.fusion_mode), kind = to_string(m.margin.kind);
  r.get("seed", c.seed);
  r.get("fusion_mode", fusion);
  r.get("workers", t.workers);
  r.get("out_dir", c.out_dir);
  r.get("input_height", m.backbone.input_height);
  r.get("input_width", m.backbone.input_width);
  r.get("channel_widths", m.backbone.channel_widths);
  r.get("blocks_per_stage", m.backbone.blocks_per_stage);
  r.get("backbone_batch_norm", m.backbone.batch_norm);
  r.get("scales", m.mhms.scales);
  r.get("heads", m.mhms.heads);
  r.get("embedding_dim", m.mhms.embedding_dim);
  r.get("lanet_reduction", m.mhms.lanet_reduction);
  r.get("se_reduction", m.mhms.se_reduction);
  r.get("scale_channels", m.mhms.scale_channels);
  r.get("head_batch_norm", m.mhms.batch_norm);
  r.get("gfe_batch_norm", m.gfe_batch_norm);
  r.get("lgf_h", m.lgf_h);
  r.get("lgf_alpha", m.lgf_alpha);
  r.get("lgf_eps", m.lgf_eps);
  r.get("margin_kind", kind);
  r.get("margin_scale", m.margin.scale);
  r.get("lr", t.lr);
  r.get("momentum", t.momentum);
  r.get("weight_decay", t.weight_decay);
  r.get("epochs", t.epochs);
  r.get("schedule", t.schedule);
  r.get("batch_size", t.batch_size);
  r.get("aug_probability", t.augment.probability);
  r.get("aug_max_crop_area", t.augment.max_crop_area);
  r.get("aug_jitter", t.augment.jitter);
  r.get("aug_min_rescale", t.augment.min_rescale);
  r.get("data_manifest", c.data_manifest);
  r.get("data_ids", c.data_ids);
  r.get("data_per_id", c.data_per_id);
  r.get("data_seed", c.data_seed);
  try {
    m.fusion_mode = parse_fusion_mode(fusion);
  } catch (const std::invalid_argument& e) {
    r.fail("fusion_mode", e.what());
  }
  try {
    m.margin.kind = parse_margin_kind(kind);
  } catch (const std::invalid_argument& e) {
    r.fail("margin_kind", e.what());
  }
  m.margin.margin = default_margin(m.margin.kind);
  r.get("margin_m", m.margin.margin);
  t.seed = c.seed;
  if (t.schedule.empty()) t.schedule = default_schedule(t.epochs);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path.string());
}

namespace {

toml::array int_array(const std::vector<int>& v) {
  toml::array a;
  for (int x : v) a.push_back(static_cast<std::int64_t>(x));
  return a;
}

}  // namespace

std::string to_toml(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  toml::table table;
  table.insert("seed", static_cast<std::int64_t>(c.seed));
  table.insert("fusion_mode", to_string(m.fusion_mode));
  table.insert("workers", static_cast<std::int64_t>(t.workers));
  table.insert("out_dir", c.out_dir);
  table.insert("input_height", static_cast<std::int64_t>(m.backbone.input_height));
  table.insert("input_width", static_cast<std::int64_t>(m.backbone.input_width));
  table.insert("channel_widths", int_array(m.backbone.channel_widths));
  table.insert("blocks_per_stage", static_cast<std::int64_t>(m.backbone.blocks_per_stage));
  table.insert("backbone_batch_norm", m.backbone.batch_norm);
  table.insert("scales", int_array(m.mhms.scales));
  table.insert("heads", static_cast<std::int64_t>(m.mhms.heads));
  table.insert("embedding_dim", static_cast<std::int64_t>(m.mhms.embedding_dim));
  table.insert("lanet_reduction", static_cast<std::int64_t>(m.mhms.lanet_reduction));
  table.insert("se_reduction", static_cast<std::int64_t>(m.mhms.se_reduction));
  table.insert("scale_channels", static_cast<std::int64_t>(m.mhms.scale_channels));
  table.insert("head_batch_norm", m.mhms.batch_norm);
  table.insert("gfe_batch_norm", m.gfe_batch_norm);
  table.insert("lgf_h", m.lgf_h);
  table.insert("lgf_alpha", m.lgf_alpha);
  table.insert("lgf_eps", m.lgf_eps);
  table.insert("margin_kind", to_string(m.margin.kind));
  table.insert("margin_scale", m.margin.scale);
  table.insert("margin_m", m.margin.margin);
  table.insert("lr", t.lr);
  table.insert("momentum", t.momentum);
  table.insert("weight_decay", t.weight_decay);
  table.insert("epochs", static_cast<std::int64_t>(t.epochs));
  table.insert("schedule", int_array(t.resolved_schedule()));
  table.insert("batch_size", static_cast<std::int64_t>(t.batch_size));
  table.insert("aug_probability", t.augment.probability);
  table.insert("aug_max_crop_area", t.augment.max_crop_area);
  table.insert("aug_jitter", t.augment.jitter);
  table.insert("aug_min_rescale", t.augment.min_rescale);
  table.insert("data_manifest", c.data_manifest);
  table.insert("data_ids", static_cast<std::int64_t>(c.data_ids));
  table.insert("data_per_id", static_cast<std::int64_t>(c.data_per_id));
  table.insert("data_seed", static_cast<std::int64_t>(c.data_seed));
  std::ostringstream out;
  out << table << '\n';
  return out.str();
}

nlohmann::json model_config_to_json(const ModelConfig& m) {
  return {{"input_channels", m.backbone.input_channels},
          {"input_height", m.backbone.input_height},
          {"input_width", m.backbone.input_width},
          {"channel_widths", m.backbone.channel_widths},
          {"blocks_per_stage", m.backbone.blocks_per_stage},
          {"backbone_batch_norm", m.backbone.batch_norm},
          {"scales", m.mhms.scales},
          {"heads", m.mhms.heads},
          {"embedding_dim", m.mhms.embedding_dim},
          {"lanet_reduction", m.mhms.lanet_reduction},
          {"se_reduction", m.mhms.se_reduction},
          {"scale_channels", m.mhms.scale_channels},
          {"head_batch_norm", m.mhms.batch_norm},
          {"gfe_batch_norm", m.gfe_batch_norm},
          {"lgf_h", m.lgf_h},
          {"lgf_alpha", m.lgf_alpha},
          {"lgf_eps", m.lgf_eps},
          {"margin_kind", to_string(m.margin.kind)},
          {"margin_scale", m.margin.scale},
          {"margin_m", m.margin.margin},
          {"n_classes", m.n_classes},
          {"fusion_mode", to_string(m.fusion_mode)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  j.at("input_channels").get_to(m.backbone.input_channels);
  j.at("input_height").get_to(m.backbone.input_height);
  j.at("input_width").get_to(m.backbone.input_width);
  j.at("channel_widths").get_to(m.backbone.channel_widths);
  j.at("blocks_per_stage").get_to(m.backbone.blocks_per_stage);
  j.at("backbone_batch_norm").get_to(m.backbone.batch_norm);
  j.at("scales").get_to(m.mhms.scales);
  j.at("heads").get_to(m.mhms.heads);
  j.at("embedding_dim").get_to(m.mhms.embedding_dim);
  j.at("lanet_reduction").get_to(m.mhms.lanet_reduction);
  j.at("se_reduction").get_to(m.mhms.se_reduction);
  j.at("scale_channels").get_to(m.mhms.scale_channels);
  j.at("head_batch_norm").get_to(m.mhms.batch_norm);
  j.at("gfe_batch_norm").get_to(m.gfe_batch_norm);
  j.at("lgf_h").get_to(m.lgf_h);
  j.at("lgf_alpha").get_to(m.lgf_alpha);
  j.at("lgf_eps").get_to(m.lgf_eps);
  m.margin.kind = parse_margin_kind(j.at("margin_kind").get<std::string>());
  j.at("margin_scale").get_to(m.margin.scale);
  j.at("margin_m").get_to(m.margin.margin);
  j.at("n_classes").get_to(m.n_classes);
  m.fusion_mode = parse_fusion_mode(j.at("fusion_mode").get<std::string>());
  return m;
}

}  // namespace lgaf
