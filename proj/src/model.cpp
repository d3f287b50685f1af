#include "fsfnet/model.hpp"

#include <cmath>

#include "fsfnet/rng.hpp"

namespace fsfnet {

void ModelConfig::validate() const {
  if (num_layers != 4) {
    fail("ModelConfig: num_layers must be 4, got " + std::to_string(num_layers));
  }
  if (static_cast<int>(channel_widths.size()) != num_layers) {
    fail("ModelConfig: need " + std::to_string(num_layers) +
         " channel widths, got " + std::to_string(channel_widths.size()));
  }
  for (int w : channel_widths) {
    if (w < 1) fail("ModelConfig: channel widths must be >= 1");
  }
  if (num_classes < 2) {
    fail("ModelConfig: num_classes must be >= 2, got " +
         std::to_string(num_classes));
  }
  const int div = 1 << num_layers;
  if (input_size < div || input_size % div != 0) {
    fail("ModelConfig: input_size " + std::to_string(input_size) +
         " must be a positive multiple of " + std::to_string(div));
  }
}

template <typename T>
Value<T>& ParamStore<T>::create_param(const std::string& path,
                                      const Shape& shape, std::uint64_t seed,
                                      std::int64_t fan_in) {
  if (params_.count(path)) fail("parameter created twice: " + path);
  Tensor<T> t(shape);
  if (fan_in > 0) {
    Rng rng(seed ^ fnv1a(path));
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      t.data()[i] = static_cast<T>(rng.normal(0.0, sigma));
    }
  }
  return params_.emplace(path, Value<T>::param(std::move(t))).first->second;
}

template <typename T>
Value<T>& ParamStore<T>::create_const_param(const std::string& path,
                                            const Shape& shape, T fill) {
  if (params_.count(path)) fail("parameter created twice: " + path);
  Tensor<T> t(shape);
  t.fill(fill);
  return params_.emplace(path, Value<T>::param(std::move(t))).first->second;
}

template <typename T>
std::shared_ptr<Tensor<T>> ParamStore<T>::create_buffer(const std::string& path,
                                                        const Shape& shape,
                                                        T fill) {
  if (buffers_.count(path)) fail("buffer created twice: " + path);
  auto t = std::make_shared<Tensor<T>>(shape);
  t->fill(fill);
  buffers_.emplace(path, t);
  return t;
}

template <typename T>
Value<T>& ParamStore<T>::param(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) fail("no such parameter: " + path);
  return it->second;
}

template <typename T>
const Value<T>& ParamStore<T>::param(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) fail("no such parameter: " + path);
  return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::buffer(const std::string& path) {
  auto it = buffers_.find(path);
  if (it == buffers_.end()) fail("no such buffer: " + path);
  return *it->second;
}

namespace {

// Convolutions feeding straight into batch norm get a fixed zero bias
// instead of a parameter: the normalization subtracts any per-channel
// constant, so a learnable bias there could never receive gradient.
template <typename T>
Value<T> fixed_zero_bias(int out_c) {
  return Value<T>::constant(Tensor<T>(Shape{1, 1, 1, out_c}));
}

}  // namespace

template <typename T>
Value<T> scrf_select(const Value<T>& f, const Value<T>& w, const Value<T>& b) {
  return conv2d(f, w, b, 1, 0);
}

template <typename T>
Value<T> cross_modal_residual(const Value<T>& f_own, const Value<T>& s_other,
                              const ConvBnRelu<T>& fconv, bool training) {
  if (f_own.shape() != s_other.shape()) {
    fail("cross_modal_residual: extent mismatch " + f_own.shape().str() +
         " vs " + s_other.shape().str());
  }
  return fconv.apply(add(s_other, f_own), training);
}

template <typename T>
Value<T> scrf_fuse(const Value<T>& s_hha, const Value<T>& f_rgb,
                   const Value<T>& s_rgb, const Value<T>& f_hha,
                   const Value<T>* f_fuse_prev, int layer,
                   const ConvBnRelu<T>& res_rgb, const ConvBnRelu<T>& res_hha,
                   const Value<T>& proj_w, const Value<T>& proj_b,
                   bool training) {
  const Shape s = f_rgb.shape();
  if (s_hha.shape() != s || s_rgb.shape() != s || f_hha.shape() != s) {
    fail("scrf_fuse layer " + std::to_string(layer) +
         ": modality map extents disagree (" + s_hha.shape().str() + ", " +
         s.str() + ", " + s_rgb.shape().str() + ", " + f_hha.shape().str() +
         ")");
  }
  if (layer == 1) {
    if (f_fuse_prev) {
      fail("scrf_fuse layer 1 takes no previous fusion feature");
    }
  } else {
    if (!f_fuse_prev) {
      fail("scrf_fuse layer " + std::to_string(layer) +
           " needs the previous fusion feature");
    }
    const Shape ps = f_fuse_prev->shape();
    if (ps.n != s.n || ps.h != 2 * s.h || ps.w != 2 * s.w) {
      fail("scrf_fuse layer " + std::to_string(layer) +
           ": previous fusion feature " + ps.str() +
           " is not at twice the extent of " + s.str());
    }
  }
  std::vector<Value<T>> parts;
  if (f_fuse_prev) parts.push_back(downsample_max(*f_fuse_prev, 2));
  parts.push_back(cross_modal_residual(f_rgb, s_hha, res_rgb, training));
  parts.push_back(cross_modal_residual(f_hha, s_rgb, res_hha, training));
  return conv2d(concat_channels(parts), proj_w, proj_b, 1, 0);
}

template <typename T>
Value<T> dfp_select(const Value<T>& f_enc, const Value<T>& attn_w,
                    const Value<T>& attn_b) {
  auto pooled = channel_pool_mean_max(f_enc);
  auto attention = sigmoid(conv2d(pooled, attn_w, attn_b, 1, 0));
  return mul_spatial(f_enc, attention);
}

template <typename T>
Value<T> dfp_fuse(const Value<T>& selected, const Value<T>& f_dec,
                  const Value<T>& proj_w, const Value<T>& proj_b) {
  const Shape a = selected.shape();
  const Shape d = f_dec.shape();
  if (a.n != d.n || a.h != d.h || a.w != d.w) {
    fail("dfp_fuse: extent mismatch " + a.str() + " vs " + d.str());
  }
  return conv2d(concat_channels<T>({selected, f_dec}), proj_w, proj_b, 1, 0);
}

template <typename T>
Value<T> FsfNet<T>::ResidualBlock::apply(const Value<T>& x,
                                         bool training) const {
  auto h = relu(batch_norm(conv2d(x, w1, b1, stride, 1), g1, be1, *m1, *v1,
                           training));
  h = batch_norm(conv2d(h, w2, b2, 1, 1), g2, be2, *m2, *v2, training);
  Value<T> shortcut = x;
  if (has_proj) {
    shortcut = batch_norm(conv2d(x, wp, bp, stride, 0), gp, bep, *mp, *vp,
                          training);
  }
  return relu(add(h, shortcut));
}

template <typename T>
typename FsfNet<T>::ResidualBlock FsfNet<T>::make_block(const std::string& path,
                                                        int in_c, int out_c,
                                                        int stride) {
  ResidualBlock blk;
  blk.stride = stride;
  blk.w1 = store_.create_param(path + ".conv1.weight",
                               Shape{out_c, in_c, 3, 3}, seed_, 9 * in_c);
  blk.b1 = fixed_zero_bias<T>(out_c);
  blk.g1 = store_.create_const_param(path + ".bn1.gamma", Shape{1, 1, 1, out_c},
                                     T(1));
  blk.be1 = store_.create_const_param(path + ".bn1.beta", Shape{1, 1, 1, out_c},
                                      T(0));
  blk.m1 = store_.create_buffer(path + ".bn1.running_mean",
                                Shape{1, 1, 1, out_c}, T(0));
  blk.v1 = store_.create_buffer(path + ".bn1.running_var",
                                Shape{1, 1, 1, out_c}, T(1));
  blk.w2 = store_.create_param(path + ".conv2.weight",
                               Shape{out_c, out_c, 3, 3}, seed_, 9 * out_c);
  blk.b2 = fixed_zero_bias<T>(out_c);
  blk.g2 = store_.create_const_param(path + ".bn2.gamma", Shape{1, 1, 1, out_c},
                                     T(1));
  blk.be2 = store_.create_const_param(path + ".bn2.beta", Shape{1, 1, 1, out_c},
                                      T(0));
  blk.m2 = store_.create_buffer(path + ".bn2.running_mean",
                                Shape{1, 1, 1, out_c}, T(0));
  blk.v2 = store_.create_buffer(path + ".bn2.running_var",
                                Shape{1, 1, 1, out_c}, T(1));
  if (stride != 1 || in_c != out_c) {
    blk.has_proj = true;
    blk.wp = store_.create_param(path + ".proj.weight", Shape{out_c, in_c, 1, 1},
                                 seed_, in_c);
    blk.bp = fixed_zero_bias<T>(out_c);
    blk.gp = store_.create_const_param(path + ".proj_bn.gamma",
                                       Shape{1, 1, 1, out_c}, T(1));
    blk.bep = store_.create_const_param(path + ".proj_bn.beta",
                                        Shape{1, 1, 1, out_c}, T(0));
    blk.mp = store_.create_buffer(path + ".proj_bn.running_mean",
                                  Shape{1, 1, 1, out_c}, T(0));
    blk.vp = store_.create_buffer(path + ".proj_bn.running_var",
                                  Shape{1, 1, 1, out_c}, T(1));
  }
  return blk;
}

template <typename T>
ConvBnRelu<T> FsfNet<T>::make_conv_bn_relu(const std::string& path, int in_c,
                                           int out_c) {
  ConvBnRelu<T> c;
  c.w = store_.create_param(path + ".conv.weight", Shape{out_c, in_c, 3, 3},
                            seed_, 9 * in_c);
  c.b = fixed_zero_bias<T>(out_c);
  c.gamma = store_.create_const_param(path + ".bn.gamma", Shape{1, 1, 1, out_c},
                                      T(1));
  c.beta = store_.create_const_param(path + ".bn.beta", Shape{1, 1, 1, out_c},
                                     T(0));
  c.running_mean = store_.create_buffer(path + ".bn.running_mean",
                                        Shape{1, 1, 1, out_c}, T(0));
  c.running_var = store_.create_buffer(path + ".bn.running_var",
                                       Shape{1, 1, 1, out_c}, T(1));
  return c;
}

template <typename T>
FsfNet<T>::FsfNet(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  const auto& cw = cfg_.channel_widths;

  for (const char* branch : {"rgb", "hha"}) {
    auto& stages = branch[0] == 'r' ? enc_rgb_ : enc_hha_;
    int in_c = 3;
    for (int i = 0; i < cfg_.num_layers; ++i) {
      const std::string path =
          std::string("encoder.") + branch + ".stage" + std::to_string(i + 1);
      Stage st;
      st.block1 = make_block(path + ".block1", in_c, cw[i], 2);
      st.block2 = make_block(path + ".block2", cw[i], cw[i], 1);
      stages.push_back(std::move(st));
      in_c = cw[i];
    }
  }

  if (cfg_.use_scrf) {
    for (int i = 0; i < cfg_.num_layers; ++i) {
      const std::string path = "fusion.stage" + std::to_string(i + 1);
      FusionStage fs;
      fs.sel_rgb_w = store_.create_param(path + ".select.rgb.weight",
                                         Shape{cw[i], cw[i], 1, 1}, seed_, cw[i]);
      fs.sel_rgb_b = store_.create_const_param(path + ".select.rgb.bias",
                                               Shape{1, 1, 1, cw[i]}, T(0));
      fs.sel_hha_w = store_.create_param(path + ".select.hha.weight",
                                         Shape{cw[i], cw[i], 1, 1}, seed_, cw[i]);
      fs.sel_hha_b = store_.create_const_param(path + ".select.hha.bias",
                                               Shape{1, 1, 1, cw[i]}, T(0));
      fs.res_rgb = make_conv_bn_relu(path + ".res.rgb", cw[i], cw[i]);
      fs.res_hha = make_conv_bn_relu(path + ".res.hha", cw[i], cw[i]);
      const int concat_c = (i == 0 ? 2 * cw[i] : cw[i - 1] + 2 * cw[i]);
      fs.proj_w = store_.create_param(path + ".proj.weight",
                                      Shape{cw[i], concat_c, 1, 1}, seed_,
                                      concat_c);
      fs.proj_b = store_.create_const_param(path + ".proj.bias",
                                            Shape{1, 1, 1, cw[i]}, T(0));
      fusion_.push_back(std::move(fs));
    }
  }

  if (cfg_.use_dfp) {
    for (int layer : {2, 3}) {
      const std::string path = "dfp.layer" + std::to_string(layer);
      const int c = cw[layer - 1];
      DfpPath dp;
      dp.attn_w = store_.create_param(path + ".attn.weight", Shape{1, 2, 1, 1},
                                      seed_, 2);
      dp.attn_b = store_.create_const_param(path + ".attn.bias",
                                            Shape{1, 1, 1, 1}, T(0));
      dp.proj_w = store_.create_param(path + ".proj.weight",
                                      Shape{c, 2 * c, 1, 1}, seed_, 2 * c);
      dp.proj_b = store_.create_const_param(path + ".proj.bias",
                                            Shape{1, 1, 1, c}, T(0));
      dfp_.emplace(layer, std::move(dp));
    }
  }

  // Decoder stages run coarse to fine: 1/16 -> 1/8 -> 1/4 -> 1/2.
  const int dec_in[3] = {cw[3], cw[2], cw[1]};
  const int dec_out[3] = {cw[2], cw[1], cw[0]};
  for (int s = 0; s < 3; ++s) {
    const std::string path = "decoder.stage" + std::to_string(s + 1);
    DecoderStage ds;
    ds.conv = make_conv_bn_relu(path, dec_in[s], dec_out[s]);
    ds.head_w = store_.create_param(path + ".head.weight",
                                    Shape{cfg_.num_classes, dec_out[s], 1, 1},
                                    seed_, dec_out[s]);
    ds.head_b = store_.create_const_param(path + ".head.bias",
                                          Shape{1, 1, 1, cfg_.num_classes},
                                          T(0));
    decoder_.push_back(std::move(ds));
  }
}

template <typename T>
EncoderFeatures<T> FsfNet<T>::encoder_forward(const Value<T>& rgb,
                                              const Value<T>& hha,
                                              bool training) {
  const Shape rs = rgb.shape();
  if (rs != hha.shape()) {
    fail("encoder_forward: rgb " + rs.str() + " and hha " + hha.shape().str() +
         " disagree");
  }
  if (rs.c != 3) {
    fail("encoder_forward: inputs must have 3 channels, got " +
         std::to_string(rs.c));
  }
  const int div = 1 << cfg_.num_layers;
  if (rs.h % div != 0 || rs.w % div != 0) {
    fail("encoder_forward: input extent " + rs.str() +
         " not divisible by " + std::to_string(div));
  }

  EncoderFeatures<T> feats;
  Value<T> r = rgb;
  Value<T> h = hha;
  for (int i = 0; i < cfg_.num_layers; ++i) {
    r = enc_rgb_[i].block2.apply(enc_rgb_[i].block1.apply(r, training),
                                 training);
    h = enc_hha_[i].block2.apply(enc_hha_[i].block1.apply(h, training),
                                 training);
    feats.rgb.push_back(r);
    feats.hha.push_back(h);
    if (cfg_.use_scrf) {
      const FusionStage& fs = fusion_[i];
      auto s_rgb = scrf_select(r, fs.sel_rgb_w, fs.sel_rgb_b);
      auto s_hha = scrf_select(h, fs.sel_hha_w, fs.sel_hha_b);
      const Value<T>* prev = i == 0 ? nullptr : &feats.fuse.back();
      feats.fuse.push_back(scrf_fuse(s_hha, r, s_rgb, h, prev, i + 1,
                                     fs.res_rgb, fs.res_hha, fs.proj_w,
                                     fs.proj_b, training));
    } else {
      feats.fuse.push_back(add(r, h));
    }
  }
  return feats;
}

template <typename T>
ForwardOutput<T> FsfNet<T>::forward(const Value<T>& rgb, const Value<T>& hha,
                                    bool training) {
  auto feats = encoder_forward(rgb, hha, training);

  ForwardOutput<T> out;
  for (int i = 0; i < cfg_.num_layers; ++i) {
    const std::string j = std::to_string(i + 1);
    out.intermediates.emplace("rgb" + j, feats.rgb[i]);
    out.intermediates.emplace("hha" + j, feats.hha[i]);
    out.intermediates.emplace("fuse" + j, feats.fuse[i]);
  }

  Value<T> d = feats.fuse[3];
  std::vector<Value<T>> heads;  // coarse to fine: 1/8, 1/4, 1/2
  for (int s = 0; s < 3; ++s) {
    d = decoder_[s].conv.apply(upsample(d, 2, UpsampleMode::kBilinear),
                               training);
    if (cfg_.use_dfp && s < 2) {
      const int enc_layer = 3 - s;  // stage 1 <- layer 3, stage 2 <- layer 2
      const DfpPath& dp = dfp_.at(enc_layer);
      auto selected = dfp_select(feats.fuse[enc_layer - 1], dp.attn_w,
                                 dp.attn_b);
      out.intermediates.emplace("dfp_selected" + std::to_string(enc_layer),
                                selected);
      d = dfp_fuse(selected, d, dp.proj_w, dp.proj_b);
    }
    out.intermediates.emplace("dec" + std::to_string(s + 1), d);
    heads.push_back(conv2d(d, decoder_[s].head_w, decoder_[s].head_b, 1, 0));
  }

  out.side_logits = {heads[2], heads[1], heads[0]};  // 1/2, 1/4, 1/8
  out.main_logits = upsample(heads[2], 2, UpsampleMode::kBilinear);
  return out;
}

template <typename T>
ForwardOutput<T> FsfNet<T>::forward(const Tensor<T>& rgb, const Tensor<T>& hha,
                                    bool training) {
  return forward(Value<T>::constant(rgb), Value<T>::constant(hha), training);
}

#define FSFNET_INSTANTIATE_MODEL(T)                                           \
  template class ParamStore<T>;                                               \
  template class FsfNet<T>;                                                   \
  template Value<T> scrf_select<T>(const Value<T>&, const Value<T>&,          \
                                   const Value<T>&);                          \
  template Value<T> cross_modal_residual<T>(const Value<T>&, const Value<T>&, \
                                            const ConvBnRelu<T>&, bool);      \
  template Value<T> scrf_fuse<T>(const Value<T>&, const Value<T>&,            \
                                 const Value<T>&, const Value<T>&,            \
                                 const Value<T>*, int, const ConvBnRelu<T>&,  \
                                 const ConvBnRelu<T>&, const Value<T>&,       \
                                 const Value<T>&, bool);                      \
  template Value<T> dfp_select<T>(const Value<T>&, const Value<T>&,           \
                                  const Value<T>&);                           \
  template Value<T> dfp_fuse<T>(const Value<T>&, const Value<T>&,             \
                                const Value<T>&, const Value<T>&);

FSFNET_INSTANTIATE_MODEL(float)
FSFNET_INSTANTIATE_MODEL(double)

#undef FSFNET_INSTANTIATE_MODEL

}  // namespace fsfnet
