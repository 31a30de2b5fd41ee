#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lgaf/parameter.hpp"
#include "lgaf/rng.hpp"
#include "lgaf/tensor.hpp"

namespace lgaf {

struct MHMSConfig {
  std::vector<int> scales{1, 3, 5};
  int heads = 4;
  int embedding_dim = 64;
  int lanet_reduction = 8;
  int se_reduction = 16;
  /// Output channels of each per-scale convolution; 0 means c_f.
  int scale_channels = 0;
  /// Batch norm on each head's projected output.
  bool batch_norm = false;

  int head_dim() const { return embedding_dim / heads; }
  int resolved_scale_channels(int feature_channels) const {
    return scale_channels > 0 ? scale_channels : feature_channels;
  }
  void validate(int feature_channels) const;
};

/// Two 1x1 convolutions computing a single-channel spatial attention map:
/// C -> C/r with relu, then C/r -> 1 with sigmoid.
template <typename T>
struct LANetParams {
  ConvParams<T> reduce;
  ConvParams<T> gate;
};

/// Squeeze-and-excitation: GAP, then C -> C/r (relu) -> C (sigmoid).
template <typename T>
struct SEParams {
  LinearParams<T> squeeze;
  LinearParams<T> excite;
};

/// Forces gates to a constant, bypassing the learned attention. Used for
/// structural checks and attention-map inspection.
struct GateOverrides {
  std::optional<double> lanet;
  std::optional<double> se;
};

/// fmap [N,C,H,W] -> fmap * A with A [N,1,H,W] in (0,1). The computed map is
/// written to *attention when given.
template <typename T>
Tensor<T> lanet(const LANetParams<T>& params, const Tensor<T>& fmap, std::optional<double> forced = {},
                Tensor<T>* attention = nullptr);

/// fmap [N,C,H,W] scaled per channel by gates [N,C] in (0,1). The gates are
/// written to *gates when given.
template <typename T>
Tensor<T> se_gate(const SEParams<T>& params, const Tensor<T>& fmap, std::optional<double> forced = {},
                  Tensor<T>* gates = nullptr);

/// Intermediate values of one head's forward pass.
template <typename T>
struct HeadTrace {
  std::vector<Tensor<T>> scale_outputs;  // conv_j(fmap), per scale
  std::vector<Tensor<T>> attention;      // LANet map, per scale, [N,1,H,W]
  std::vector<Tensor<T>> gated;          // scale output times its LANet map
  Tensor<T> se_gates;                    // [N, |scales| * c_s]
};

/// One MSNet head: per-scale same-padded convolution with LANet spatial
/// attention, channel concatenation, SE channel attention, and a projection
/// of the flattened result to d_h.
template <typename T>
class MSNetHead {
 public:
  MSNetHead() = default;
  MSNetHead(const MHMSConfig& config, int feature_channels, int feature_height, int feature_width,
            const RngStream& rng, const std::string& name);

  /// fmap [N,c_f,h_f,w_f] -> [N,d_h].
  Tensor<T> forward(const Tensor<T>& fmap, Mode mode, HeadTrace<T>* trace = nullptr);

  void collect(const std::string& prefix, std::vector<Parameter<T>>& params, std::vector<Buffer>& buffers);

  const std::vector<int>& scales() const { return scales_; }
  std::vector<ConvParams<T>>& scale_convs() { return convs_; }
  std::vector<LANetParams<T>>& lanets() { return lanets_; }
  SEParams<T>& se() { return se_; }
  LinearParams<T>& projection() { return projection_; }

  GateOverrides overrides;

 private:
  std::vector<int> scales_;
  int feature_channels_ = 0;
  int feature_height_ = 0;
  int feature_width_ = 0;
  std::vector<ConvParams<T>> convs_;
  std::vector<LANetParams<T>> lanets_;
  SEParams<T> se_;
  LinearParams<T> projection_;
  std::optional<BatchNormParams<T>> bn_;
};

/// b parallel heads; output is the concatenation of the head outputs in head
/// order, [N, b * d_h].
template <typename T>
Tensor<T> mhms_forward(std::vector<MSNetHead<T>>& heads, const Tensor<T>& fmap, Mode mode,
                       std::size_t expected_heads);

template <typename T>
std::vector<MSNetHead<T>> build_mhms(const MHMSConfig& config, int feature_channels, int feature_height,
                                     int feature_width, const RngStream& rng);

/// One array in an attention dump.
struct AttentionRecord {
  int head = 0;
  int scale = 0;     // kernel size; 0 for SE gates
  std::string kind;  // "lanet" or "se"
  Shape shape;
  std::size_t offset = 0;  // in float32 elements from the start of the blob
  std::vector<float> values;
};

/// Runs every head on fmap (eval mode, no graph) and returns the LANet maps
/// and SE gates exactly as used in the forward pass.
template <typename T>
std::vector<AttentionRecord> dump_attention_maps(std::vector<MSNetHead<T>>& heads, const Tensor<T>& fmap);

/// Writes <stem>.json (manifest: head, scale, kind, shape, offset) and
/// <stem>.bin (little-endian float32, records back to back).
void write_attention_dump(const std::vector<AttentionRecord>& records, const std::filesystem::path& stem);

extern template class MSNetHead<float>;
extern template class MSNetHead<double>;

}  // namespace lgaf
