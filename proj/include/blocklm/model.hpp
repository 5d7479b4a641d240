#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "blocklm/config.hpp"
#include "blocklm/data.hpp"
#include "blocklm/params.hpp"
#include "blocklm/transformer.hpp"

namespace blocklm {

// Per-component forward MAC counters. The engine and the cost-model checks
// read these; they are only fed while a MacScope is active.
struct ComponentMacs {
  MacCounter embedder, block_decoder, token_decoder;

  uint64_t total() const { return embedder.macs + block_decoder.macs + token_decoder.macs; }
  void reset() {
    embedder.reset();
    block_decoder.reset();
    token_decoder.reset();
  }
};

struct LossResult {
  Tensor loss;                         // scalar mean over masked-in positions
  double mean = 0.0;
  int64_t count = 0;
  // Sums and counts per within-block position (length L_B; block models only).
  std::vector<double> position_sum;
  std::vector<int64_t> position_count;
  std::vector<float> row_loss;         // per prediction, 0 where masked out
};

// Vanilla decoder-only LM or the embedder -> block decoder -> token decoder
// hierarchy, selected by ModelConfig::kind. Parameters are registered under
// fixed names: emb.*, block_dec.layer{i}.*, tok_dec.layer{i}.*, tok_emb,
// proj.prefix / proj.sum / proj.cross, cls_head.
class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  bool is_block() const { return cfg_.kind == ModelKind::block; }

  // ids: [batch, n] with n a multiple of L_B -> [batch, n / L_B, D].
  Tensor embed_blocks(std::span<const int32_t> ids, int64_t batch, int64_t n) const;
  // [batch, N, D] block embeddings -> [batch, N, D]; output i is the context
  // used to decode block i + 1.
  Tensor block_decoder_forward(const Tensor& block_embs, AttentionTrace* trace = nullptr) const;
  // ctx: [M, D]; tokens: M * L_B ids of the blocks being decoded -> [M, L_B, V].
  Tensor token_decoder_logits(const Tensor& ctx, std::span<const int32_t> tokens,
                              AttentionTrace* trace = nullptr) const;
  // ids: [batch, T] -> [batch, T, V]; logits at t predict token t + 1.
  Tensor vanilla_logits(std::span<const int32_t> ids, int64_t batch, int64_t t, AttentionTrace* trace = nullptr) const;

  // Mean cross-entropy over loss_mask. Block models predict blocks 1..N-1 of
  // every row; vanilla predicts tokens 1..T-1. Throws if nothing is masked in.
  LossResult lm_loss(const PackedBatch& batch) const;

  // Context injection for the token decoder: ctx [M, D] -> [M, S, D_tok]
  // with S = P (prefix) or L_B (summation, cross-attention).
  Tensor inject(const Tensor& ctx) const;
  // Token-decoder inputs for the first slots of a block: the P prefix rows
  // (prefix variant) or the start slot (others). inj from inject().
  Tensor token_seed_inputs(const Tensor& inj) const;
  // Input at `slot` carrying `tokens` [M] (the previous token of the block).
  Tensor token_slot_inputs(const Tensor& inj, int64_t slot, std::span<const int32_t> tokens) const;
  // Decoder hidden [..., D_tok] -> logits [..., V].
  Tensor classify(const Tensor& hidden) const;

  // Cached incremental passes, attributed to their component counters.
  Tensor block_decoder_step(const Tensor& x, StackCache& cache) const;
  Tensor token_decoder_step(const Tensor& x, StackCache& cache) const;
  // Precomputes cross-attention K/V from inject() output (cross variant).
  void set_token_cross_context(StackCache& cache, const Tensor& inj) const;

  const TransformerStack& block_decoder() const { return block_dec_; }
  const TransformerStack& token_decoder() const { return tok_dec_; }
  TransformerStack& block_decoder() { return block_dec_; }
  TransformerStack& token_decoder() { return tok_dec_; }
  const Tensor& token_embedding() const { return tok_emb_; }

  // Optional MAC attribution per component (nullptr disables).
  void set_mac_counters(ComponentMacs* macs) const { macs_ = macs; }
  ComponentMacs* mac_counters() const { return macs_; }

 private:
  void build(uint64_t seed);
  Tensor encode_blocks(std::span<const int32_t> ids, int64_t batch, int64_t n) const;
  std::vector<int32_t> shifted_tokens(std::span<const int32_t> tokens) const;

  ModelConfig cfg_;
  ParamList params_;
  // embedder
  Tensor emb_table_, emb_proj_, emb_proj_b_, cls_slots_;
  TransformerStack encoder_;
  TransformerStack block_dec_;
  TransformerStack tok_dec_;
  Tensor tok_emb_, inj_w_, inj_b_, cls_head_;
  mutable ComponentMacs* macs_ = nullptr;
};

// Named-tensor checkpoint with the config in the manifest metadata and in a
// "<path>.json" sidecar.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
ModelConfig checkpoint_config(const std::filesystem::path& path);

// Uptraining: first half of the vanilla layers -> block decoder, second half
// -> token decoder; the lookup embedder averages the vanilla embeddings of a
// block, and every prefix slot (or summation slot) starts as the context.
// The block config must use the lookup embedder with embed_dim = D.
Model init_from_vanilla(const Model& vanilla, const ModelConfig& block_cfg, uint64_t seed);

}  // namespace blocklm
