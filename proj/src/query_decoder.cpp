#include "multiformer/query_decoder.hpp"

#include <cmath>

#include "multiformer/errors.hpp"

namespace multiformer {

namespace F = torch::nn::functional;

int level_for_block(int b, int P) {
  if (b < 1 || P < 2) throw ConfigError("level_for_block requires b >= 1 and P >= 2");
  return P - (b - 1) % (P - 1);
}

torch::Tensor attention_mask_from_masks(const torch::Tensor& masks, int64_t out_h,
                                        int64_t out_w) {
  torch::NoGradGuard ng;
  auto resized = F::interpolate(masks.detach(), F::InterpolateFuncOptions()
                                                    .size(std::vector<int64_t>{out_h, out_w})
                                                    .mode(torch::kBilinear)
                                                    .align_corners(false));
  return (resized >= 0.5).flatten(2);
}

torch::Tensor l2_normalize_rows(const torch::Tensor& x, double eps) {
  return x / x.norm(2, -1, /*keepdim=*/true).clamp_min(eps);
}

DecoderBlockImpl::DecoderBlockImpl(int64_t dim, int64_t heads, int64_t kv_dim) {
  cross_ = register_module("cross", CrossAttentionLayer(dim, heads, kv_dim));
  self_ = register_module("self", SelfAttentionLayer(dim, heads));
  ffn_ = register_module("ffn", FeedForwardLayer(dim));
}

AttentionOutput DecoderBlockImpl::masked_attention(const torch::Tensor& q,
                                                   const torch::Tensor& key,
                                                   const torch::Tensor& value,
                                                   const torch::Tensor& allowed) {
  if (allowed.dim() != 3 || allowed.size(0) != q.size(0) || allowed.size(1) != q.size(1) ||
      allowed.size(2) != key.size(1))
    throw ShapeError("masked_attention: mask [" + std::to_string(allowed.size(-1)) +
                     " positions] does not match pixel features [" + std::to_string(key.size(1)) +
                     " positions]");
  auto empty_rows = allowed.logical_not().all(-1, /*keepdim=*/true);
  auto effective = allowed.logical_or(empty_rows);
  return cross_(q, key, value, effective);
}

torch::Tensor DecoderBlockImpl::block_update(const torch::Tensor& q_hat) {
  return ffn_(self_(q_hat));
}

torch::Tensor DecoderBlockImpl::forward(const torch::Tensor& q, const torch::Tensor& key,
                                        const torch::Tensor& value, const torch::Tensor& allowed) {
  return block_update(masked_attention(q, key, value, allowed).out);
}

ContextAdapterImpl::ContextAdapterImpl(int64_t dim, int64_t heads) {
  for (int i = 0; i < 2; ++i)
    layers_.push_back(register_module("layer" + std::to_string(i), DecoderBlock(dim, heads, dim)));
}

torch::Tensor ContextAdapterImpl::forward(const torch::Tensor& q_l, const torch::Tensor& f_ctx) {
  const int64_t h = f_ctx.size(2), w = f_ctx.size(3);
  auto value = flatten_spatial(f_ctx);
  auto key = value + sine_position_encoding(h, w, f_ctx.size(1), f_ctx.options()).unsqueeze(0);
  auto allowed = torch::ones({q_l.size(0), q_l.size(1), h * w},
                             torch::TensorOptions().dtype(torch::kBool).device(f_ctx.device()));
  torch::Tensor q = q_l;
  for (auto& layer : layers_) q = layer(q, key, value, allowed);
  return q;
}

QuerySplitImpl::QuerySplitImpl(int64_t dim) {
  mask_ = register_module("mask", torch::nn::Linear(dim, dim));
  depth_ = register_module("depth", torch::nn::Linear(dim, dim));
}

std::pair<torch::Tensor, torch::Tensor> QuerySplitImpl::forward(const torch::Tensor& q_shared) {
  return {mask_(q_shared), depth_(q_shared)};
}

QueryFuseImpl::QueryFuseImpl(int64_t dim) {
  mask_ = register_module("mask", torch::nn::Linear(dim, dim));
  depth_ = register_module("depth", torch::nn::Linear(dim, dim));
}

torch::Tensor QueryFuseImpl::forward(const torch::Tensor& q_mask, const torch::Tensor& q_depth) {
  return l2_normalize_rows(mask_(q_mask) + depth_(q_depth), 1e-8);
}

QueryDecoderImpl::QueryDecoderImpl(const ModelConfig& cfg)
    : variant_(cfg.variant), P_(cfg.P), N_B_(cfg.N_B), N_Q_(cfg.N_Q), N_D_(cfg.N_D) {
  const int64_t d = cfg.N_D;
  query_embed_ = register_parameter(
      "query_embed", torch::randn({cfg.N_Q, d}) * std::sqrt(cfg.query_init_variance));
  level_embed_ = register_parameter("level_embed", torch::randn({cfg.P - 1, d}) * 0.02);
  if (cfg.context_adapter) adapter_ = register_module("context_adapter", ContextAdapter(d, cfg.heads));

  auto add_block = [&](std::vector<DecoderBlock>& list, const std::string& prefix, int b,
                       int64_t width) {
    list.push_back(register_module(prefix + std::to_string(b), DecoderBlock(width, cfg.heads, d)));
  };
  switch (variant_) {
    case DecoderVariant::kUnified:
      for (int b = 1; b <= N_B_; ++b) add_block(mask_blocks_, "block", b, d);
      break;
    case DecoderVariant::kParallel:
      splits_.push_back(register_module("split", QuerySplit(d)));
      for (int b = 1; b <= N_B_; ++b) {
        add_block(mask_blocks_, "mask_block", b, d);
        add_block(depth_blocks_, "depth_block", b, d);
      }
      break;
    case DecoderVariant::kConcat:
      splits_.push_back(register_module("split", QuerySplit(d)));
      for (int b = 1; b <= N_B_; ++b) add_block(mask_blocks_, "concat_block", b, 2 * d);
      break;
    case DecoderVariant::kSequential:
      splits_.push_back(register_module("split", QuerySplit(d)));
      for (int b = 1; b <= N_B_; ++b) {
        add_block(mask_blocks_, "mask_block", b, d);
        add_block(depth_blocks_, "depth_block", b, d);
        injections_.push_back(
            register_module("inject" + std::to_string(b), torch::nn::Linear(d, d)));
      }
      break;
    case DecoderVariant::kHybrid:
      for (int b = 1; b <= N_B_; ++b) {
        splits_.push_back(register_module("split" + std::to_string(b), QuerySplit(d)));
        add_block(mask_blocks_, "mask_block", b, d);
        add_block(depth_blocks_, "depth_block", b, d);
        fuses_.push_back(register_module("fuse" + std::to_string(b), QueryFuse(d)));
      }
      break;
  }
}

torch::Tensor QueryDecoderImpl::context_adapt(const torch::Tensor& q_l, const torch::Tensor& f_ctx) {
  auto batched = q_l.dim() == 2 ? q_l.unsqueeze(0).expand({f_ctx.size(0), q_l.size(0), q_l.size(1)})
                                : q_l;
  if (adapter_.is_empty()) return batched;
  return adapter_(batched, f_ctx);
}

QueryDecoderImpl::LevelMemory QueryDecoderImpl::memory_for_block(const PixelFeatures& px, int b) {
  const int k = level_for_block(b, P_);
  const auto& f = px.level(k);
  LevelMemory m;
  m.h = f.size(2);
  m.w = f.size(3);
  m.value = flatten_spatial(f);
  m.key = m.value + sine_position_encoding(m.h, m.w, f.size(1), f.options()).unsqueeze(0) +
          level_embed_[k - 2].view({1, 1, -1});
  return m;
}

DecoderOutput QueryDecoderImpl::forward(const PixelFeatures& px, const TaskFeatures& tf,
                                        const BlockPredictor& predict) {
  DecoderOutput out;
  out.q0 = context_adapt(query_embed_, tf.f_ctx);
  const torch::Tensor& q0 = out.q0;

  auto allowed_for = [&](const PerQueryPredictions& prev, const LevelMemory& mem) {
    return attention_mask_from_masks(prev.masks(), mem.h, mem.w);
  };

  switch (variant_) {
    case DecoderVariant::kUnified: {
      torch::Tensor q = q0;
      out.blocks.push_back(predict(q, q, q, 0));
      for (int b = 1; b <= N_B_; ++b) {
        auto mem = memory_for_block(px, b);
        q = mask_blocks_[b - 1](q, mem.key, mem.value, allowed_for(out.blocks.back(), mem));
        out.blocks.push_back(predict(q, q, q, b));
      }
      out.final_queries = q;
      break;
    }
    case DecoderVariant::kParallel: {
      auto [qm, qd] = splits_[0](q0);
      out.blocks.push_back(predict(qm, qd, qm, 0));
      for (int b = 1; b <= N_B_; ++b) {
        auto mem = memory_for_block(px, b);
        auto allowed = allowed_for(out.blocks.back(), mem);
        qm = mask_blocks_[b - 1](qm, mem.key, mem.value, allowed);
        qd = depth_blocks_[b - 1](qd, mem.key, mem.value, allowed);
        out.blocks.push_back(predict(qm, qd, qm, b));
      }
      out.final_queries = qm;
      break;
    }
    case DecoderVariant::kConcat: {
      auto [qm0, qd0] = splits_[0](q0);
      torch::Tensor q = torch::cat({qm0, qd0}, -1);
      out.blocks.push_back(predict(qm0, qd0, qm0, 0));
      for (int b = 1; b <= N_B_; ++b) {
        auto mem = memory_for_block(px, b);
        q = mask_blocks_[b - 1](q, mem.key, mem.value, allowed_for(out.blocks.back(), mem));
        auto qm = q.narrow(-1, 0, N_D_), qd = q.narrow(-1, N_D_, N_D_);
        out.blocks.push_back(predict(qm, qd, qm, b));
      }
      out.final_queries = q.narrow(-1, 0, N_D_);
      break;
    }
    case DecoderVariant::kSequential: {
      auto [qm, qd] = splits_[0](q0);
      out.blocks.push_back(predict(qm, qd, qm, 0));
      for (int b = 1; b <= N_B_; ++b) {
        auto mem = memory_for_block(px, b);
        auto allowed = allowed_for(out.blocks.back(), mem);
        qm = mask_blocks_[b - 1](qm, mem.key, mem.value, allowed);
        qd = depth_blocks_[b - 1](qd + injections_[b - 1](qm), mem.key, mem.value, allowed);
        out.blocks.push_back(predict(qm, qd, qm, b));
      }
      out.final_queries = qm;
      break;
    }
    case DecoderVariant::kHybrid: {
      torch::Tensor q = q0;
      out.blocks.push_back(predict(q, q, q, 0));
      for (int b = 1; b <= N_B_; ++b) {
        auto mem = memory_for_block(px, b);
        auto allowed = allowed_for(out.blocks.back(), mem);
        auto [qm, qd] = splits_[b - 1](q);
        qm = mask_blocks_[b - 1](qm, mem.key, mem.value, allowed);
        qd = depth_blocks_[b - 1](qd, mem.key, mem.value, allowed);
        q = fuses_[b - 1](qm, qd);
        out.blocks.push_back(predict(qm, qd, q, b));
      }
      out.final_queries = q;
      break;
    }
  }
  return out;
}

}  // namespace multiformer
