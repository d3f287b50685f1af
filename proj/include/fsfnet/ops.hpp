#pragma once

#include <span>
#include <vector>

#include "fsfnet/autodiff.hpp"
#include "fsfnet/tensor.hpp"

namespace fsfnet {

enum class UpsampleMode { kNearest, kBilinear };

/// 2-D convolution over NHWC input with kernel (out_c, in_c, k_h, k_w) and
/// bias (1,1,1,out_c). Zero padding, standard output arithmetic
/// out = (in + 2*padding - k) / stride + 1. Differentiable in x, w and b.
template <typename T>
Value<T> conv2d(const Value<T>& x, const Value<T>& w, const Value<T>& b,
                int stride, int padding);

/// Max pooling with window = stride = factor. Spatial extents must divide.
template <typename T>
Value<T> downsample_max(const Value<T>& x, int factor);

/// Nearest replication or half-pixel-centers bilinear interpolation.
template <typename T>
Value<T> upsample(const Value<T>& x, int factor, UpsampleMode mode);

template <typename T>
Value<T> sigmoid(const Value<T>& x);

template <typename T>
Value<T> relu(const Value<T>& x);

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b);

template <typename T>
Value<T> scale(const Value<T>& a, T s);

template <typename T>
Value<T> concat_channels(const std::vector<Value<T>>& xs);

/// Broadcast multiply of x (n,h,w,c) by a single-channel map (n,h,w,1).
template <typename T>
Value<T> mul_spatial(const Value<T>& x, const Value<T>& a);

/// Per-pixel channel descriptor: output (n,h,w,2) holding the channel mean
/// and channel max of the input.
template <typename T>
Value<T> channel_pool_mean_max(const Value<T>& x);

/// Batch normalization over (n,h,w) per channel. gamma/beta are (1,1,1,c).
/// Training mode normalizes with biased batch statistics and updates the
/// running buffers in place; eval mode normalizes with the buffers.
template <typename T>
Value<T> batch_norm(const Value<T>& x, const Value<T>& gamma,
                    const Value<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, bool training,
                    T momentum = T(0.1), T eps = T(1e-5));

/// Mean over non-ignored pixels of class_weights[label] * (-log softmax
/// probability of the label). Scalar-shaped (1,1,1,1) result; zero when every
/// pixel is ignored. Labels outside [0, channels) that are not ignore_index
/// are rejected.
template <typename T>
Value<T> weighted_cross_entropy(const Value<T>& logits, const LabelMap& labels,
                                std::span<const T> class_weights,
                                int ignore_index = kIgnoreLabel);

/// Per-pixel argmax over channels.
LabelMap argmax_channels(const Tensor<float>& logits);

}  // namespace fsfnet
