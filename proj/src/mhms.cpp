#include "lgaf/mhms.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "lgaf/ops.hpp"

namespace lgaf {

void MHMSConfig::validate(int feature_channels) const {
  if (heads < 1) throw std::invalid_argument("mhms: heads must be >= 1");
  if (embedding_dim < 1 || embedding_dim % heads != 0) {
    throw std::invalid_argument("mhms: embedding_dim " + std::to_string(embedding_dim) +
                                " is not divisible by heads " + std::to_string(heads));
  }
  if (scales.empty()) throw std::invalid_argument("mhms: scales must not be empty");
  for (int k : scales) {
    if (k < 1 || k % 2 == 0) throw std::invalid_argument("mhms: scale " + std::to_string(k) + " is not odd");
  }
  const int cs = resolved_scale_channels(feature_channels);
  if (lanet_reduction < 1 || cs < lanet_reduction || cs % lanet_reduction != 0) {
    throw std::invalid_argument("mhms: lanet_reduction " + std::to_string(lanet_reduction) +
                                " does not divide scale channels " + std::to_string(cs));
  }
  const int cat = cs * static_cast<int>(scales.size());
  if (se_reduction < 1 || cat < se_reduction || cat % se_reduction != 0) {
    throw std::invalid_argument("mhms: se_reduction " + std::to_string(se_reduction) +
                                " does not divide concatenated channels " + std::to_string(cat));
  }
}

template <typename T>
Tensor<T> lanet(const LANetParams<T>& params, const Tensor<T>& fmap, std::optional<double> forced,
                Tensor<T>* attention) {
  if (fmap.rank() != 4) throw ShapeError("lanet: fmap must be [N,C,H,W], got " + shape_str(fmap.shape()));
  if (fmap.dim(1) != params.reduce.weight.dim(1)) {
    throw ShapeError("lanet: fmap dim 1 (channels) is " + std::to_string(fmap.dim(1)) + ", expected " +
                     std::to_string(params.reduce.weight.dim(1)));
  }
  Tensor<T> a;
  if (forced) {
    a = Tensor<T>::full({fmap.dim(0), 1, fmap.dim(2), fmap.dim(3)}, static_cast<T>(*forced));
  } else {
    Tensor<T> h = relu(conv2d(fmap, params.reduce.weight, params.reduce.bias, 1, 0));
    a = sigmoid(conv2d(h, params.gate.weight, params.gate.bias, 1, 0));
  }
  if (attention) *attention = a;
  return spatial_gate(fmap, a);
}

template <typename T>
Tensor<T> se_gate(const SEParams<T>& params, const Tensor<T>& fmap, std::optional<double> forced,
                  Tensor<T>* gates) {
  if (fmap.rank() != 4) throw ShapeError("se_gate: fmap must be [N,C,H,W], got " + shape_str(fmap.shape()));
  if (fmap.dim(1) != params.squeeze.weight.dim(0)) {
    throw ShapeError("se_gate: fmap dim 1 (channels) is " + std::to_string(fmap.dim(1)) + ", expected " +
                     std::to_string(params.squeeze.weight.dim(0)));
  }
  Tensor<T> g;
  if (forced) {
    g = Tensor<T>::full({fmap.dim(0), fmap.dim(1)}, static_cast<T>(*forced));
  } else {
    Tensor<T> z = relu(linear(global_avg_pool(fmap), params.squeeze.weight, params.squeeze.bias));
    g = sigmoid(linear(z, params.excite.weight, params.excite.bias));
  }
  if (gates) *gates = g;
  return channel_gate(fmap, g);
}

template <typename T>
MSNetHead<T>::MSNetHead(const MHMSConfig& config, int feature_channels, int feature_height, int feature_width,
                        const RngStream& rng, const std::string& name)
    : scales_(config.scales),
      feature_channels_(feature_channels),
      feature_height_(feature_height),
      feature_width_(feature_width) {
  config.validate(feature_channels);
  const int cs = config.resolved_scale_channels(feature_channels);
  const int reduced = cs / config.lanet_reduction;
  for (int k : scales_) {
    const std::string s = name + ".scale" + std::to_string(k);
    convs_.emplace_back(rng, s + ".conv", feature_channels, cs, k);
    lanets_.push_back({ConvParams<T>(rng, s + ".lanet.reduce", cs, reduced, 1),
                       ConvParams<T>(rng, s + ".lanet.gate", reduced, 1, 1)});
  }
  const int cat = cs * static_cast<int>(scales_.size());
  se_ = {LinearParams<T>(rng, name + ".se.squeeze", cat, cat / config.se_reduction),
         LinearParams<T>(rng, name + ".se.excite", cat / config.se_reduction, cat)};
  projection_ = LinearParams<T>(rng, name + ".proj", static_cast<std::int64_t>(cat) * feature_height * feature_width,
                                config.head_dim());
  if (config.batch_norm) bn_.emplace(config.head_dim());
}

template <typename T>
Tensor<T> MSNetHead<T>::forward(const Tensor<T>& fmap, Mode mode, HeadTrace<T>* trace) {
  if (fmap.rank() != 4) throw ShapeError("msnet: fmap must be [N,C,H,W], got " + shape_str(fmap.shape()));
  const std::int64_t expected[3] = {feature_channels_, feature_height_, feature_width_};
  for (int i = 0; i < 3; ++i) {
    if (fmap.dim(i + 1) != expected[i]) {
      throw ShapeError("msnet: fmap dim " + std::to_string(i + 1) + " is " + std::to_string(fmap.dim(i + 1)) +
                       ", expected " + std::to_string(expected[i]));
    }
  }
  if (trace) *trace = HeadTrace<T>{};
  std::vector<Tensor<T>> per_scale;
  per_scale.reserve(scales_.size());
  for (std::size_t j = 0; j < scales_.size(); ++j) {
    Tensor<T> l = conv2d(fmap, convs_[j].weight, convs_[j].bias, 1, (scales_[j] - 1) / 2);
    Tensor<T> a;
    per_scale.push_back(lanet(lanets_[j], l, overrides.lanet, &a));
    if (trace) {
      trace->scale_outputs.push_back(l);
      trace->attention.push_back(a);
      trace->gated.push_back(per_scale.back());
    }
  }
  Tensor<T> gates;
  Tensor<T> s = se_gate(se_, concat(per_scale, 1), overrides.se, &gates);
  if (trace) trace->se_gates = gates;
  Tensor<T> y = linear(flatten(s), projection_.weight, projection_.bias);
  if (bn_) y = batch_norm_1d(y, bn_->gamma, bn_->beta, bn_->state, mode);
  return y;
}

template <typename T>
void MSNetHead<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& params,
                           std::vector<Buffer>& buffers) {
  for (std::size_t j = 0; j < scales_.size(); ++j) {
    const std::string s = prefix + ".scale" + std::to_string(scales_[j]);
    convs_[j].collect(s + ".conv", params);
    lanets_[j].reduce.collect(s + ".lanet.reduce", params);
    lanets_[j].gate.collect(s + ".lanet.gate", params);
  }
  se_.squeeze.collect(prefix + ".se.squeeze", params);
  se_.excite.collect(prefix + ".se.excite", params);
  projection_.collect(prefix + ".proj", params);
  if (bn_) bn_->collect(prefix + ".bn", params, buffers);
}

template <typename T>
Tensor<T> mhms_forward(std::vector<MSNetHead<T>>& heads, const Tensor<T>& fmap, Mode mode,
                       std::size_t expected_heads) {
  if (heads.size() != expected_heads) {
    throw std::invalid_argument("mhms: got " + std::to_string(heads.size()) + " heads, expected " +
                                std::to_string(expected_heads));
  }
  std::vector<Tensor<T>> outs;
  outs.reserve(heads.size());
  for (auto& head : heads) outs.push_back(head.forward(fmap, mode));
  return concat(outs, 1);
}

template <typename T>
std::vector<MSNetHead<T>> build_mhms(const MHMSConfig& config, int feature_channels, int feature_height,
                                     int feature_width, const RngStream& rng) {
  config.validate(feature_channels);
  std::vector<MSNetHead<T>> heads;
  for (int k = 0; k < config.heads; ++k) {
    heads.emplace_back(config, feature_channels, feature_height, feature_width, rng,
                       "mhms.head" + std::to_string(k));
  }
  return heads;
}

namespace {

template <typename T>
AttentionRecord make_record(int head, int scale, std::string kind, const Tensor<T>& t) {
  AttentionRecord r;
  r.head = head;
  r.scale = scale;
  r.kind = std::move(kind);
  r.shape = t.shape();
  r.values.assign(t.data().begin(), t.data().end());
  return r;
}

}  // namespace

template <typename T>
std::vector<AttentionRecord> dump_attention_maps(std::vector<MSNetHead<T>>& heads, const Tensor<T>& fmap) {
  NoGradGuard no_grad;
  std::vector<AttentionRecord> records;
  for (std::size_t k = 0; k < heads.size(); ++k) {
    HeadTrace<T> trace;
    heads[k].forward(fmap, Mode::eval, &trace);
    for (std::size_t j = 0; j < trace.attention.size(); ++j) {
      records.push_back(make_record(static_cast<int>(k), heads[k].scales()[j], "lanet", trace.attention[j]));
    }
    records.push_back(make_record(static_cast<int>(k), 0, "se", trace.se_gates));
  }
  std::size_t offset = 0;
  for (auto& r : records) {
    r.offset = offset;
    offset += r.values.size();
  }
  return records;
}

void write_attention_dump(const std::vector<AttentionRecord>& records, const std::filesystem::path& stem) {
  nlohmann::json manifest;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["blob"] = stem.filename().string() + ".bin";
  auto& arrays = manifest["arrays"] = nlohmann::json::array();
  std::ofstream blob(stem.string() + ".bin", std::ios::binary);
  if (!blob) throw std::runtime_error("cannot write " + stem.string() + ".bin");
  for (const auto& r : records) {
    arrays.push_back({{"head", r.head}, {"scale", r.scale}, {"kind", r.kind}, {"shape", r.shape},
                      {"offset", r.offset}, {"count", r.values.size()}});
    for (float v : r.values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      const unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                      static_cast<unsigned char>(bits >> 16),
                                      static_cast<unsigned char>(bits >> 24)};
      blob.write(reinterpret_cast<const char*>(bytes), 4);
    }
  }
  std::ofstream(stem.string() + ".json") << manifest.dump(2) << '\n';
}

#define LGAF_INSTANTIATE(T)                                                                                  \
  template Tensor<T> lanet(const LANetParams<T>&, const Tensor<T>&, std::optional<double>, Tensor<T>*);      \
  template Tensor<T> se_gate(const SEParams<T>&, const Tensor<T>&, std::optional<double>, Tensor<T>*);       \
  template class MSNetHead<T>;                                                                               \
  template Tensor<T> mhms_forward(std::vector<MSNetHead<T>>&, const Tensor<T>&, Mode, std::size_t);          \
  template std::vector<MSNetHead<T>> build_mhms(const MHMSConfig&, int, int, int, const RngStream&);        \
  template std::vector<AttentionRecord> dump_attention_maps(std::vector<MSNetHead<T>>&, const Tensor<T>&);

LGAF_INSTANTIATE(float)
LGAF_INSTANTIATE(double)

}  // namespace lgaf
