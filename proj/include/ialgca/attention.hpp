#pragma once

#include "ialgca/param.hpp"
#include "ialgca/tape.hpp"

namespace ialgca {

// Channel-attention variants. All three share the squeeze MLP layout:
// W1 (C/r x C) then ReLU then W2 (C x C/r) then sigmoid, applied per frame.
// They differ in how the channel descriptor Z is pooled and in the range of
// the resulting weights: SE and the CBAM channel module gate in (0,1), the
// global-convolution block rescales in (0,2) and can amplify.

inline int bottleneck_dim(int channels, int r) {
  if (r < 1) throw ContractError(cat("reduction ratio must be >= 1, got ", r));
  int b = channels / r;
  if (b < 1)
    throw ContractError(
        cat("reduction ratio ", r, " leaves no bottleneck for ", channels, " channels"));
  return b;
}

template <class S>
struct SEBlock {
  Tensor<S> w1;  // (C/r, C)
  Tensor<S> w2;  // (C, C/r)
  int r = 1;
};

template <class S>
struct GCABlock {
  Tensor<S> w1;
  Tensor<S> w2;
  Tensor<S> kernel;  // (C, H, W), one spatial kernel per channel
  int r = 1;
};

template <class S>
struct CBAMChannelBlock {
  Tensor<S> w1;  // shared MLP
  Tensor<S> w2;
  int r = 1;
};

template <class S>
SEBlock<S> se_block_init(int channels, int r, Rng& rng) {
  int b = bottleneck_dim(channels, r);
  SEBlock<S> blk;
  blk.r = r;
  blk.w1 = Tensor<S>::randn({b, channels}, rng, std::sqrt(2.0 / channels));
  blk.w2 = Tensor<S>::randn({channels, b}, rng, std::sqrt(1.0 / b));
  return blk;
}

template <class S>
CBAMChannelBlock<S> cbam_block_init(int channels, int r, Rng& rng) {
  auto se = se_block_init<S>(channels, r, rng);
  return {std::move(se.w1), std::move(se.w2), r};
}

// Kernel starts at uniform averaging plus small noise, so the block opens
// near the identity rescaling (s ~ 0.5, weights ~ 1).
template <class S>
GCABlock<S> gca_block_init(int channels, int h, int w, int r, Rng& rng,
                           double kernel_noise = 0.01) {
  int b = bottleneck_dim(channels, r);
  GCABlock<S> blk;
  blk.r = r;
  blk.w1 = Tensor<S>::randn({b, channels}, rng, std::sqrt(2.0 / channels));
  blk.w2 = Tensor<S>::randn({channels, b}, rng, std::sqrt(1.0 / b));
  blk.kernel = Tensor<S>::zeros({channels, h, w});
  S base = S(1) / static_cast<S>(h * w);
  for (int64_t i = 0; i < blk.kernel.numel(); ++i)
    blk.kernel.data[i] = base + static_cast<S>(kernel_noise * rng.gauss());
  return blk;
}

// Exact-identity configuration: uniform kernel, zero MLP. With these weights
// s = 0.5 everywhere and the rescaling factor is exactly 1.
template <class S>
GCABlock<S> gca_block_identity(int channels, int h, int w, int r) {
  GCABlock<S> blk;
  blk.r = r;
  int b = bottleneck_dim(channels, r);
  blk.w1 = Tensor<S>::zeros({b, channels});
  blk.w2 = Tensor<S>::zeros({channels, b});
  blk.kernel = Tensor<S>::full({channels, h, w}, S(1) / static_cast<S>(h * w));
  return blk;
}

namespace detail {
template <class S>
void check_feature(Val<S> x, const char* who) {
  const auto& t = x.t();
  if (t.rank() != 4)
    throw ShapeError(cat(who, ": expected a T x C x H x W feature, got ",
                         shape_str(t.shape)));
  if (t.dim(2) * t.dim(3) == 0)
    throw ShapeError(cat(who, ": empty feature map ", shape_str(t.shape)));
}

// sigma(W2 relu(W1 z)) for a batch of per-frame descriptors z (T x C).
template <class S>
Val<S> squeeze_mlp(Val<S> z, Val<S> w1, Val<S> w2) {
  return sigmoid(matmul(relu(matmul(z, w1, false, true)), w2, false, true));
}
}  // namespace detail

template <class S>
struct AttentionOut {
  Val<S> x_tilde;
  Val<S> weights;  // per-frame channel weights, T x C
};

// SE: global average pooled descriptor, gate in (0,1).
template <class S>
AttentionOut<S> se_attention_graph(Val<S> x, Val<S> w1, Val<S> w2) {
  detail::check_feature(x, "se_attention");
  Val<S> z = mean_axis(mean_axis(x, 3), 2);  // T x C
  Val<S> s = detail::squeeze_mlp(z, w1, w2);
  return {scale_channels(x, s), s};
}

// GCA: per-channel global convolution descriptor, then per-frame gates s are
// coupled across time through their temporal mean and mapped to
// 2*sqrt(s * mean_t(s)) in (0,2).
template <class S>
AttentionOut<S> gca_attention_graph(Val<S> x, Val<S> w1, Val<S> w2, Val<S> kernel) {
  detail::check_feature(x, "gca_attention");
  Val<S> z = weighted_spatial_sum(x, kernel);  // T x C
  Val<S> s = detail::squeeze_mlp(z, w1, w2);
  Val<S> gap_t = mean_axis(s, 0);  // C
  Val<S> s_gca = scalar_mul(sqrt(mul_bcast_last(s, gap_t)), 2.0);
  return {scale_channels(x, s_gca), s_gca};
}

// CBAM channel module: shared MLP over average- and max-pooled descriptors.
template <class S>
AttentionOut<S> cbam_attention_graph(Val<S> x, Val<S> w1, Val<S> w2) {
  detail::check_feature(x, "cbam_channel_attention");
  const auto& xs = x.t().shape;
  Val<S> z_avg = mean_axis(mean_axis(x, 3), 2);
  Val<S> z_max = reshape(max_last(reshape(x, {xs[0] * xs[1], xs[2] * xs[3]})), {xs[0], xs[1]});
  auto mlp = [&](Val<S> z) { return matmul(relu(matmul(z, w1, false, true)), w2, false, true); };
  Val<S> s = sigmoid(add(mlp(z_avg), mlp(z_max)));
  return {scale_channels(x, s), s};
}

// Convenience single-shot forms running on a private tape.

template <class S>
std::pair<Tensor<S>, Tensor<S>> se_attention(const Tensor<S>& x, const SEBlock<S>& blk) {
  Tape<S> tape;
  auto out = se_attention_graph(constant(tape, x), constant(tape, blk.w1),
                                constant(tape, blk.w2));
  return {out.x_tilde.t(), out.weights.t()};
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> gca_attention(const Tensor<S>& x, const GCABlock<S>& blk) {
  Tape<S> tape;
  auto out = gca_attention_graph(constant(tape, x), constant(tape, blk.w1),
                                 constant(tape, blk.w2), constant(tape, blk.kernel));
  return {out.x_tilde.t(), out.weights.t()};
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> cbam_channel_attention(const Tensor<S>& x,
                                                       const CBAMChannelBlock<S>& blk) {
  Tape<S> tape;
  auto out = cbam_attention_graph(constant(tape, x), constant(tape, blk.w1),
                                  constant(tape, blk.w2));
  return {out.x_tilde.t(), out.weights.t()};
}

}  // namespace ialgca
