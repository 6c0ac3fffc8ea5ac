#pragma once

#include <functional>
#include <vector>

#include <torch/torch.h>

#include "multiformer/attention.hpp"
#include "multiformer/config.hpp"
#include "multiformer/feature_net.hpp"
#include "multiformer/heads.hpp"

namespace multiformer {

/// Feature level attended by block b (1-based): k = P - (b-1) mod (P-1).
int level_for_block(int b, int P);

/// Thresholds soft masks [B,Q,h,w] (resized to out_h x out_w) at 0.5 -> bool [B,Q,out_h*out_w].
torch::Tensor attention_mask_from_masks(const torch::Tensor& masks, int64_t out_h, int64_t out_w);

/// One decoder branch: masked cross-attention, then self-attention + FFN.
class DecoderBlockImpl : public torch::nn::Module {
 public:
  DecoderBlockImpl(int64_t dim, int64_t heads, int64_t kv_dim);

  /// `allowed` is bool [B, Q, Nk]. Queries with no allowed position attend everywhere.
  AttentionOutput masked_attention(const torch::Tensor& q, const torch::Tensor& key,
                                   const torch::Tensor& value, const torch::Tensor& allowed);
  torch::Tensor block_update(const torch::Tensor& q_hat);
  torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& key,
                        const torch::Tensor& value, const torch::Tensor& allowed);

  CrossAttentionLayer& cross() { return cross_; }

 private:
  CrossAttentionLayer cross_{nullptr};
  SelfAttentionLayer self_{nullptr};
  FeedForwardLayer ffn_{nullptr};
};
TORCH_MODULE(DecoderBlock);

/// Two transformer-decoder layers aligning learnable queries with the context feature.
class ContextAdapterImpl : public torch::nn::Module {
 public:
  ContextAdapterImpl(int64_t dim, int64_t heads);
  torch::Tensor forward(const torch::Tensor& q_l, const torch::Tensor& f_ctx);

 private:
  std::vector<DecoderBlock> layers_;
};
TORCH_MODULE(ContextAdapter);

/// Learnable linear split of shared queries into mask and depth queries.
class QuerySplitImpl : public torch::nn::Module {
 public:
  explicit QuerySplitImpl(int64_t dim);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& q_shared);

  torch::nn::Linear& mask() { return mask_; }
  torch::nn::Linear& depth() { return depth_; }

 private:
  torch::nn::Linear mask_{nullptr}, depth_{nullptr};
};
TORCH_MODULE(QuerySplit);

/// Q_b = L2-normalize(f_mask(Q^mask) + f_depth(Q^depth)), norm floored at 1e-8.
class QueryFuseImpl : public torch::nn::Module {
 public:
  explicit QueryFuseImpl(int64_t dim);
  torch::Tensor forward(const torch::Tensor& q_mask, const torch::Tensor& q_depth);

  torch::nn::Linear& mask() { return mask_; }
  torch::nn::Linear& depth() { return depth_; }

 private:
  torch::nn::Linear mask_{nullptr}, depth_{nullptr};
};
TORCH_MODULE(QueryFuse);

torch::Tensor l2_normalize_rows(const torch::Tensor& x, double eps = 1e-8);

/// Produces the predictions of one block from (mask, depth, class) queries.
using BlockPredictor = std::function<PerQueryPredictions(
    const torch::Tensor& q_mask, const torch::Tensor& q_depth, const torch::Tensor& q_class, int block)>;

struct DecoderOutput {
  std::vector<PerQueryPredictions> blocks;  // block 0 .. N_B
  torch::Tensor q0;                         // [B, N_Q, N_D] initial queries
  torch::Tensor final_queries;              // [B, N_Q, N_D] queries used for tracking
};

/// All five decoder designs behind one interface.
class QueryDecoderImpl : public torch::nn::Module {
 public:
  explicit QueryDecoderImpl(const ModelConfig& cfg);

  /// Q_l as stored; identical across calls.
  torch::Tensor init_queries() const { return query_embed_; }
  /// Q_0 for a batch; Q_l broadcast unchanged when the adapter is disabled.
  torch::Tensor context_adapt(const torch::Tensor& q_l, const torch::Tensor& f_ctx);

  DecoderOutput forward(const PixelFeatures& px, const TaskFeatures& tf,
                        const BlockPredictor& predict);

  DecoderVariant variant() const { return variant_; }
  bool adapter_enabled() const { return !adapter_.is_empty(); }

  std::vector<DecoderBlock>& mask_blocks() { return mask_blocks_; }
  std::vector<DecoderBlock>& depth_blocks() { return depth_blocks_; }
  std::vector<QuerySplit>& splits() { return splits_; }
  std::vector<QueryFuse>& fuses() { return fuses_; }

 private:
  struct LevelMemory {
    torch::Tensor key, value;
    int64_t h, w;
  };
  LevelMemory memory_for_block(const PixelFeatures& px, int b);

  DecoderVariant variant_;
  int P_, N_B_, N_Q_, N_D_;
  torch::Tensor query_embed_;
  torch::Tensor level_embed_;
  ContextAdapter adapter_{nullptr};
  // unified and concat use mask_blocks_ only.
  std::vector<DecoderBlock> mask_blocks_;
  std::vector<DecoderBlock> depth_blocks_;
  std::vector<QuerySplit> splits_;
  std::vector<QueryFuse> fuses_;
  std::vector<torch::nn::Linear> injections_;
};
TORCH_MODULE(QueryDecoder);

}  // namespace multiformer
