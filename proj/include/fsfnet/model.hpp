#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fsfnet/autodiff.hpp"
#include "fsfnet/ops.hpp"
#include "fsfnet/tensor.hpp"

namespace fsfnet {

struct ModelConfig {
  int num_layers = 4;
  std::vector<int> channel_widths = {16, 32, 64, 128};
  int num_classes = 0;
  bool use_scrf = true;
  bool use_dfp = true;
  int input_size = 64;

  void validate() const;
};

/// Named parameter leaves plus non-learned buffers (batch-norm running
/// statistics), keyed by canonical dotted paths. std::map keeps iteration
/// sorted, which fixes checkpoint and optimizer ordering.
template <typename T>
class ParamStore {
 public:
  // Creates a parameter initialized from a per-path random stream derived
  // from (seed ^ hash(path)), so adding or removing other parameters never
  // shifts an existing one's initial values. fan_in <= 0 means zero init.
  Value<T>& create_param(const std::string& path, const Shape& shape,
                         std::uint64_t seed, std::int64_t fan_in);
  Value<T>& create_const_param(const std::string& path, const Shape& shape,
                               T fill);
  std::shared_ptr<Tensor<T>> create_buffer(const std::string& path,
                                           const Shape& shape, T fill);

  Value<T>& param(const std::string& path);
  const Value<T>& param(const std::string& path) const;
  Tensor<T>& buffer(const std::string& path);

  const std::map<std::string, Value<T>>& params() const { return params_; }
  const std::map<std::string, std::shared_ptr<Tensor<T>>>& buffers() const {
    return buffers_;
  }
  std::map<std::string, std::shared_ptr<Tensor<T>>>& buffers() {
    return buffers_;
  }

 private:
  std::map<std::string, Value<T>> params_;
  std::map<std::string, std::shared_ptr<Tensor<T>>> buffers_;
};

/// 3x3 convolution (stride 1, padding 1) + batch norm + ReLU; the f_conv
/// building block used by the fusion branch and the decoder.
template <typename T>
struct ConvBnRelu {
  Value<T> w, b, gamma, beta;
  std::shared_ptr<Tensor<T>> running_mean, running_var;

  Value<T> apply(const Value<T>& x, bool training) const {
    return relu(batch_norm(conv2d(x, w, b, 1, 1), gamma, beta, *running_mean,
                           *running_var, training));
  }
};

/// Modality feature selection: a 1x1 stride-1 convolution preserving the
/// channel count.
template <typename T>
Value<T> scrf_select(const Value<T>& f, const Value<T>& w, const Value<T>& b);

/// One direction of the symmetric residual fusion: f_conv applied to the
/// sum of a modality's own features and the other modality's selection.
template <typename T>
Value<T> cross_modal_residual(const Value<T>& f_own, const Value<T>& s_other,
                              const ConvBnRelu<T>& fconv, bool training);

/// Fused feature of encoder layer `layer` (1-based): channel concatenation
/// of [downsampled previous fusion, f_conv(s_hha + f_rgb),
/// f_conv(s_rgb + f_hha)] — the first item only for layer >= 2 — followed
/// by a 1x1 projection to the layer's configured width.
template <typename T>
Value<T> scrf_fuse(const Value<T>& s_hha, const Value<T>& f_rgb,
                   const Value<T>& s_rgb, const Value<T>& f_hha,
                   const Value<T>* f_fuse_prev, int layer,
                   const ConvBnRelu<T>& res_rgb, const ConvBnRelu<T>& res_hha,
                   const Value<T>& proj_w, const Value<T>& proj_b,
                   bool training);

/// Spatial attention gate: mean+max channel pooling -> 1x1 convolution ->
/// sigmoid, broadcast-multiplied over the input feature.
template <typename T>
Value<T> dfp_select(const Value<T>& f_enc, const Value<T>& attn_w,
                    const Value<T>& attn_b);

/// Concatenates [selected, f_dec] and projects back to f_dec's channel
/// count with a 1x1 convolution.
template <typename T>
Value<T> dfp_fuse(const Value<T>& selected, const Value<T>& f_dec,
                  const Value<T>& proj_w, const Value<T>& proj_b);

template <typename T>
struct EncoderFeatures {
  std::vector<Value<T>> rgb;   // F_rgb^j, j = 1..4, stride 2^j
  std::vector<Value<T>> hha;   // F_hha^j
  std::vector<Value<T>> fuse;  // F_fuse^j (SCRF cascade or elementwise sum)
};

template <typename T>
struct ForwardOutput {
  Value<T> main_logits;               // input resolution
  std::vector<Value<T>> side_logits;  // [1/2, 1/4, 1/8] of input
  std::map<std::string, Value<T>> intermediates;
};

template <typename T>
class FsfNet {
 public:
  FsfNet(const ModelConfig& cfg, std::uint64_t seed);

  EncoderFeatures<T> encoder_forward(const Value<T>& rgb, const Value<T>& hha,
                                     bool training);
  ForwardOutput<T> forward(const Value<T>& rgb, const Value<T>& hha,
                           bool training);
  ForwardOutput<T> forward(const Tensor<T>& rgb, const Tensor<T>& hha,
                           bool training);

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

 private:
  struct ResidualBlock {
    Value<T> w1, b1, g1, be1;
    Value<T> w2, b2, g2, be2;
    std::shared_ptr<Tensor<T>> m1, v1, m2, v2;
    // Projection shortcut, present when stride or width changes.
    bool has_proj = false;
    Value<T> wp, bp, gp, bep;
    std::shared_ptr<Tensor<T>> mp, vp;
    int stride = 1;

    Value<T> apply(const Value<T>& x, bool training) const;
  };

  struct Stage {
    ResidualBlock block1, block2;
  };

  struct FusionStage {
    Value<T> sel_rgb_w, sel_rgb_b, sel_hha_w, sel_hha_b;
    ConvBnRelu<T> res_rgb, res_hha;
    Value<T> proj_w, proj_b;
  };

  struct DfpPath {
    Value<T> attn_w, attn_b;
    Value<T> proj_w, proj_b;
  };

  struct DecoderStage {
    ConvBnRelu<T> conv;
    Value<T> head_w, head_b;
  };

  ResidualBlock make_block(const std::string& path, int in_c, int out_c,
                           int stride);
  ConvBnRelu<T> make_conv_bn_relu(const std::string& path, int in_c, int out_c);

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  ParamStore<T> store_;
  std::vector<Stage> enc_rgb_, enc_hha_;
  std::vector<FusionStage> fusion_;    // empty when use_scrf is false
  std::map<int, DfpPath> dfp_;         // keyed by encoder layer (2 and 3)
  std::vector<DecoderStage> decoder_;  // stages at 1/8, 1/4, 1/2
};

}  // namespace fsfnet
