#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lgaf/backbone.hpp"
#include "lgaf/gfe.hpp"
#include "lgaf/lgf.hpp"
#include "lgaf/margin.hpp"
#include "lgaf/mhms.hpp"

namespace lgaf {

/// Which branches feed the margin head and how they are combined.
enum class FusionMode { local_only, global_only, direct_add, lgf };

FusionMode parse_fusion_mode(const std::string& name);
std::string to_string(FusionMode mode);

struct ModelConfig {
  BackboneConfig backbone;
  /// Also carries the embedding dimension D shared by both branches.
  MHMSConfig mhms;
  bool gfe_batch_norm = false;
  double lgf_h = 0.333;
  double lgf_alpha = 0.01;
  double lgf_eps = 1e-6;
  MarginConfig margin;
  int n_classes = 20;
  FusionMode fusion_mode = FusionMode::lgf;

  int embedding_dim() const { return mhms.embedding_dim; }
  bool uses_local() const { return fusion_mode != FusionMode::global_only; }
  bool uses_global() const { return fusion_mode != FusionMode::local_only; }
  void validate() const;
};

/// Backbone, the branches selected by the fusion mode, the fusion path and the
/// margin head. Every parameter is drawn from a substream named after it, so
/// parameters shared between modes are identical for one seed.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Embeds a batch. Missing branches are left undefined with gamma 1/0 on the
  /// present one; direct_add uses gamma 0.5 each. A frozen_gamma_local
  /// replaces the computed weights (gamma_g = 1 - gamma_l) for the fused modes.
  EmbeddingBundle<T> embed(const Tensor<T>& images, Mode mode,
                           const std::vector<double>* frozen_gamma_local = nullptr);

  /// Cosine logits of kappa against the class weights, [N, n_classes].
  Tensor<T> cosines(const Tensor<T>& kappa) const;

  struct Output {
    EmbeddingBundle<T> bundle;
    Tensor<T> cosines;
    Tensor<T> logits;
    Tensor<T> loss;
  };
  Output forward(const Tensor<T>& images, std::span<const int> labels, Mode mode,
                 const std::vector<double>* frozen_gamma_local = nullptr);

  /// Trainable parameters in a fixed order with hierarchical names.
  std::vector<Parameter<T>> parameters();
  std::vector<Buffer> buffers();

  FusionState& fusion_state() { return fusion_; }
  const FusionState& fusion_state() const { return fusion_; }
  Backbone<T>& backbone() { return backbone_; }
  std::vector<MSNetHead<T>>& heads() { return heads_; }
  GlobalHead<T>& global_head() { return *gfe_; }
  MarginHead<T>& margin_head() { return margin_; }

  /// Optimization steps applied so far; 0 for a freshly initialized model.
  std::int64_t steps_trained() const { return steps_trained_; }
  void set_steps_trained(std::int64_t steps) { steps_trained_ = steps; }

 private:
  ModelConfig config_;
  Backbone<T> backbone_;
  std::vector<MSNetHead<T>> heads_;
  std::optional<GlobalHead<T>> gfe_;
  MarginHead<T> margin_;
  FusionState fusion_;
  std::int64_t steps_trained_ = 0;
};

template <typename T>
Model<T> assemble_model(const ModelConfig& config, const std::string& fusion_mode, std::uint64_t seed);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace lgaf
