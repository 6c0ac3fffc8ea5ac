#include "multiformer/attention.hpp"

#include <cmath>
#include <limits>

#include "multiformer/errors.hpp"

namespace multiformer {

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t dim, int64_t heads, int64_t kv_dim)
    : dim_(dim), heads_(heads), head_dim_(dim / heads) {
  if (dim % heads != 0) throw ShapeError("attention width must be divisible by head count");
  q_proj_ = register_module("q_proj", torch::nn::Linear(dim, dim));
  k_proj_ = register_module("k_proj", torch::nn::Linear(kv_dim, dim));
  v_proj_ = register_module("v_proj", torch::nn::Linear(kv_dim, dim));
  out_proj_ = register_module("out_proj", torch::nn::Linear(dim, dim));
}

AttentionOutput MultiHeadAttentionImpl::forward(const torch::Tensor& query,
                                                const torch::Tensor& key,
                                                const torch::Tensor& value,
                                                const std::optional<torch::Tensor>& allowed) {
  const int64_t B = query.size(0), Nq = query.size(1), Nk = key.size(1);
  auto split = [&](const torch::Tensor& t, int64_t n) {
    return t.view({B, n, heads_, head_dim_}).transpose(1, 2);  // [B, h, n, d]
  };
  auto q = split(q_proj_(query), Nq);
  auto k = split(k_proj_(key), Nk);
  auto v = split(v_proj_(value), Nk);
  auto logits = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim_));
  if (allowed) {
    if (allowed->size(0) != B || allowed->size(1) != Nq || allowed->size(2) != Nk)
      throw ShapeError("attention mask shape does not match [B, Nq, Nk]");
    logits = logits.masked_fill(allowed->logical_not().unsqueeze(1),
                                -std::numeric_limits<double>::infinity());
  }
  auto weights = torch::softmax(logits, -1);
  auto out = torch::matmul(weights, v).transpose(1, 2).reshape({B, Nq, dim_});
  return {out_proj_(out), weights};
}

CrossAttentionLayerImpl::CrossAttentionLayerImpl(int64_t dim, int64_t heads, int64_t kv_dim) {
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", MultiHeadAttention(dim, heads, kv_dim));
}

AttentionOutput CrossAttentionLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& key,
                                                 const torch::Tensor& value,
                                                 const std::optional<torch::Tensor>& allowed) {
  auto r = attn_(norm_(x), key, value, allowed);
  r.out = x + r.out;
  return r;
}

SelfAttentionLayerImpl::SelfAttentionLayerImpl(int64_t dim, int64_t heads) {
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", MultiHeadAttention(dim, heads, dim));
}

torch::Tensor SelfAttentionLayerImpl::forward(const torch::Tensor& x) {
  auto n = norm_(x);
  return x + attn_(n, n, n).out;
}

FeedForwardLayerImpl::FeedForwardLayerImpl(int64_t dim) {
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, 4 * dim));
  fc2_ = register_module("fc2", torch::nn::Linear(4 * dim, dim));
}

torch::Tensor FeedForwardLayerImpl::forward(const torch::Tensor& x) {
  return x + fc2_(torch::relu(fc1_(norm_(x))));
}

torch::Tensor sine_position_encoding(int64_t h, int64_t w, int64_t channels,
                                     const torch::TensorOptions& opts) {
  // Half the channels encode y, half encode x; odd remainder stays zero.
  const int64_t half = channels / 2;
  const double two_pi = 2.0 * M_PI;
  auto ys = (torch::arange(h, opts) + 0.5) / static_cast<double>(h) * two_pi;
  auto xs = (torch::arange(w, opts) + 0.5) / static_cast<double>(w) * two_pi;
  auto idx = torch::arange(half, opts);
  auto freq = torch::pow(10000.0, 2.0 * torch::floor(idx / 2.0) / std::max<int64_t>(half, 1));
  auto even = (torch::remainder(idx, 2.0) == 0);
  auto enc = [&](const torch::Tensor& coord) {  // [n] -> [n, half]
    auto a = coord.unsqueeze(1) / freq.unsqueeze(0);
    return torch::where(even.unsqueeze(0), torch::sin(a), torch::cos(a));
  };
  auto ey = enc(ys).unsqueeze(1).expand({h, w, half});
  auto ex = enc(xs).unsqueeze(0).expand({h, w, half});
  auto pos = torch::zeros({h, w, channels}, opts);
  pos.narrow(2, 0, half).copy_(ey);
  pos.narrow(2, half, half).copy_(ex);
  return pos.view({h * w, channels});
}

torch::Tensor flatten_spatial(const torch::Tensor& x) {
  return x.flatten(2).transpose(1, 2);
}

}  // namespace multiformer
