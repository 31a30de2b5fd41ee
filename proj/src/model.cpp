#include "lgaf/model.hpp"

#include <stdexcept>

#include "lgaf/ops.hpp"

namespace lgaf {

FusionMode parse_fusion_mode(const std::string& name) {
  if (name == "local_only") return FusionMode::local_only;
  if (name == "global_only") return FusionMode::global_only;
  if (name == "direct_add") return FusionMode::direct_add;
  if (name == "lgf") return FusionMode::lgf;
  throw std::invalid_argument("unknown fusion mode '" + name +
                              "' (expected local_only, global_only, direct_add or lgf)");
}

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::local_only: return "local_only";
    case FusionMode::global_only: return "global_only";
    case FusionMode::direct_add: return "direct_add";
    case FusionMode::lgf: return "lgf";
  }
  return "lgf";
}

void ModelConfig::validate() const {
  backbone.validate();
  const auto f = backbone.output_shape();
  mhms.validate(f[0]);
  if (n_classes < 2) throw std::invalid_argument("model: n_classes must be >= 2");
  if (margin.scale <= 0.0) throw std::invalid_argument("model: margin scale must be positive");
  if (margin.margin < 0.0) throw std::invalid_argument("model: margin must be >= 0");
  if (lgf_alpha <= 0.0 || lgf_alpha > 1.0) throw std::invalid_argument("model: lgf alpha must be in (0, 1]");
  if (lgf_h <= 0.0) throw std::invalid_argument("model: lgf h must be positive");
  if (lgf_eps <= 0.0) throw std::invalid_argument("model: lgf eps must be positive");
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)), backbone_(config.backbone, RngStream(seed)) {
  const RngStream rng(seed);
  const auto f = config_.backbone.output_shape();
  if (config_.uses_local()) heads_ = build_mhms<T>(config_.mhms, f[0], f[1], f[2], rng);
  if (config_.uses_global()) {
    gfe_.emplace(f[0], f[1], f[2], config_.embedding_dim(), config_.gfe_batch_norm, rng);
  }
  margin_ = MarginHead<T>(config_.margin, config_.embedding_dim(), config_.n_classes, rng);
  fusion_.alpha = config_.lgf_alpha;
  fusion_.h = config_.lgf_h;
  fusion_.eps = config_.lgf_eps;
}

template <typename T>
EmbeddingBundle<T> Model<T>::embed(const Tensor<T>& images, Mode mode,
                                   const std::vector<double>* frozen_gamma_local) {
  Tensor<T> fmap = backbone_.forward(images, mode);
  const auto n = static_cast<std::size_t>(images.dim(0));
  Tensor<T> f_local, f_global;
  if (config_.uses_local()) f_local = mhms_forward(heads_, fmap, mode, static_cast<std::size_t>(config_.mhms.heads));
  if (config_.uses_global()) f_global = gfe_->forward(fmap, mode);

  EmbeddingBundle<T> b;
  switch (config_.fusion_mode) {
    case FusionMode::local_only:
      b.f_local = f_local;
      b.z_local = feature_quality(f_local);
      b.gamma_local.assign(n, 1.0);
      b.gamma_global.assign(n, 0.0);
      b.kappa = f_local;
      return b;
    case FusionMode::global_only:
      b.f_global = f_global;
      b.z_global = feature_quality(f_global);
      b.gamma_local.assign(n, 0.0);
      b.gamma_global.assign(n, 1.0);
      b.kappa = f_global;
      return b;
    case FusionMode::direct_add:
      b.f_local = f_local;
      b.f_global = f_global;
      b.z_local = feature_quality(f_local);
      b.z_global = feature_quality(f_global);
      b.gamma_local.assign(n, 0.5);
      b.gamma_global.assign(n, 0.5);
      break;
    case FusionMode::lgf:
      fusion_.mode = mode;
      b = lgf_forward(f_local, f_global, fusion_);
      break;
  }
  if (frozen_gamma_local) {
    if (frozen_gamma_local->size() != n) throw ShapeError("model: frozen gamma has the wrong length");
    b.gamma_local = *frozen_gamma_local;
    for (std::size_t i = 0; i < n; ++i) b.gamma_global[i] = 1.0 - b.gamma_local[i];
  }
  b.kappa = fuse(b.f_local, b.f_global, b.gamma_local, b.gamma_global);
  return b;
}

template <typename T>
Tensor<T> Model<T>::cosines(const Tensor<T>& kappa) const {
  return cosine_logits(kappa, margin_.weight);
}

template <typename T>
typename Model<T>::Output Model<T>::forward(const Tensor<T>& images, std::span<const int> labels, Mode mode,
                                            const std::vector<double>* frozen_gamma_local) {
  Output out;
  out.bundle = embed(images, mode, frozen_gamma_local);
  out.cosines = cosines(out.bundle.kappa);
  out.logits = margin_logits(out.cosines, labels, config_.margin);
  out.loss = classification_loss(out.logits, labels);
  return out;
}

template <typename T>
std::vector<Parameter<T>> Model<T>::parameters() {
  std::vector<Parameter<T>> params;
  std::vector<Buffer> buffers;
  backbone_.collect("backbone", params, buffers);
  for (std::size_t k = 0; k < heads_.size(); ++k) heads_[k].collect("mhms.head" + std::to_string(k), params, buffers);
  if (gfe_) gfe_->collect("gfe", params, buffers);
  margin_.collect("margin", params);
  return params;
}

template <typename T>
std::vector<Buffer> Model<T>::buffers() {
  std::vector<Parameter<T>> params;
  std::vector<Buffer> buffers;
  backbone_.collect("backbone", params, buffers);
  for (std::size_t k = 0; k < heads_.size(); ++k) heads_[k].collect("mhms.head" + std::to_string(k), params, buffers);
  if (gfe_) gfe_->collect("gfe", params, buffers);
  return buffers;
}

template <typename T>
Model<T> assemble_model(const ModelConfig& config, const std::string& fusion_mode, std::uint64_t seed) {
  ModelConfig c = config;
  c.fusion_mode = parse_fusion_mode(fusion_mode);
  return Model<T>(c, seed);
}

template class Model<float>;
template class Model<double>;
template Model<float> assemble_model(const ModelConfig&, const std::string&, std::uint64_t);
template Model<double> assemble_model(const ModelConfig&, const std::string&, std::uint64_t);

}  // namespace lgaf
