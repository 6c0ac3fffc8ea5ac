#pragma once

#include <optional>

#include <torch/torch.h>

namespace multiformer {

struct AttentionOutput {
  torch::Tensor out;      // [B, Nq, D]
  torch::Tensor weights;  // [B, heads, Nq, Nk], softmax probabilities
};

/// Multi-head scaled dot-product attention with separate key/value width.
/// `allowed` is a bool [B, Nq, Nk] mask; false positions get -inf logits.
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int64_t dim, int64_t heads, int64_t kv_dim);

  AttentionOutput forward(const torch::Tensor& query, const torch::Tensor& key,
                          const torch::Tensor& value,
                          const std::optional<torch::Tensor>& allowed = std::nullopt);

  int64_t dim() const { return dim_; }

 private:
  int64_t dim_, heads_, head_dim_;
  torch::nn::Linear q_proj_{nullptr}, k_proj_{nullptr}, v_proj_{nullptr}, out_proj_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

/// Pre-norm cross-attention sub-layer: x + Attn(LN(x), key, value).
class CrossAttentionLayerImpl : public torch::nn::Module {
 public:
  CrossAttentionLayerImpl(int64_t dim, int64_t heads, int64_t kv_dim);
  AttentionOutput forward(const torch::Tensor& x, const torch::Tensor& key,
                          const torch::Tensor& value,
                          const std::optional<torch::Tensor>& allowed = std::nullopt);

 private:
  torch::nn::LayerNorm norm_{nullptr};
  MultiHeadAttention attn_{nullptr};
};
TORCH_MODULE(CrossAttentionLayer);

/// Pre-norm self-attention sub-layer. No positional term across queries.
class SelfAttentionLayerImpl : public torch::nn::Module {
 public:
  SelfAttentionLayerImpl(int64_t dim, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::LayerNorm norm_{nullptr};
  MultiHeadAttention attn_{nullptr};
};
TORCH_MODULE(SelfAttentionLayer);

/// Pre-norm feedforward sub-layer with hidden width 4*dim.
class FeedForwardLayerImpl : public torch::nn::Module {
 public:
  explicit FeedForwardLayerImpl(int64_t dim);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(FeedForwardLayer);

/// Sinusoidal 2D positional encoding, [h*w, channels], normalized coordinates.
torch::Tensor sine_position_encoding(int64_t h, int64_t w, int64_t channels,
                                     const torch::TensorOptions& opts);

/// [B, C, h, w] -> [B, h*w, C]
torch::Tensor flatten_spatial(const torch::Tensor& x);

}  // namespace multiformer
