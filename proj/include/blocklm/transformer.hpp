#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blocklm/instrument.hpp"
#include "blocklm/ops.hpp"
#include "blocklm/random.hpp"
#include "blocklm/tensor.hpp"

namespace blocklm {

class ParamList;

// Pre-norm decoder layer: x += Attn(LN1(x)); [x += XAttn(LNx(x), ctx)];
// x += W_down GELU(W_up LN2(x)).
struct DecoderLayer {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor lnx_g, lnx_b;  // cross-attention, present iff the stack has cross weights
  Tensor xq, xbq, xk, xbk, xv, xbv, xo, xbo;
  Tensor ln2_g, ln2_b;
  Tensor w_up, b_up, w_down, b_down;
};

// K/V rows of one layer, laid out [batch, heads, capacity, head_dim].
class LayerKVState {
 public:
  LayerKVState() = default;
  LayerKVState(int64_t batch, int64_t heads, int64_t head_dim, int64_t capacity);

  int64_t length() const noexcept { return length_; }
  int64_t capacity() const noexcept { return capacity_; }
  int64_t batch() const noexcept { return batch_; }

  // k/v: [batch, heads, T, head_dim]; throws CapacityError on overflow.
  void append(const Tensor& k, const Tensor& v);
  void reset() noexcept { length_ = 0; }

  const float* keys(int64_t b, int64_t h) const { return k_.data() + (b * heads_ + h) * capacity_ * head_dim_; }
  const float* vals(int64_t b, int64_t h) const { return v_.data() + (b * heads_ + h) * capacity_ * head_dim_; }

 private:
  int64_t batch_ = 0, heads_ = 0, head_dim_ = 0, capacity_ = 0, length_ = 0;
  FloatBuffer k_, v_;
};

class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Cache for a whole stack. Cross-attention K/V are static per context and
// live alongside the self-attention states.
struct StackCache {
  std::vector<LayerKVState> layers;
  std::vector<Tensor> cross_k, cross_v;
  int64_t cross_len = 0;
  int64_t peak_length = 0;

  int64_t length() const { return layers.empty() ? 0 : layers.front().length(); }
  int64_t capacity() const { return layers.empty() ? 0 : layers.front().capacity(); }
  // Self-attention entries plus cross-attention entries.
  int64_t entries() const { return length() + cross_len; }
  void reset();
};

// Per-layer self-attention probabilities captured during forward.
struct AttentionTrace {
  std::vector<AttentionProbs> layers;
};

enum class AttentionMode { causal, bidirectional };

// A stack of DecoderLayers followed by a final layer norm. Positions are
// rotary-encoded from 0 for forward(); step() continues from the cache
// length.
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(int64_t layers, int64_t dim, int64_t heads, bool cross);

  void init(Rng& rng, double std);
  void register_params(ParamList& params, const std::string& prefix);

  int64_t num_layers() const { return static_cast<int64_t>(layers_.size()); }
  int64_t dim() const { return dim_; }
  int64_t heads() const { return heads_; }
  int64_t head_dim() const { return dim_ / heads_; }
  bool has_cross() const { return cross_; }
  std::vector<DecoderLayer>& layers() { return layers_; }
  const std::vector<DecoderLayer>& layers() const { return layers_; }
  Tensor& final_gain() { return lnf_g_; }
  Tensor& final_bias() { return lnf_b_; }

  // x: [B, T, D]; cross_context: [B, Tc, D] (cross stacks only).
  Tensor forward(const Tensor& x, AttentionMode mode, const Tensor* cross_context = nullptr,
                 AttentionTrace* trace = nullptr) const;

  StackCache make_cache(int64_t batch, int64_t capacity) const;
  // Precomputes cross-attention K/V for the cached path.
  void set_cross_context(StackCache& cache, const Tensor& cross_context) const;
  // Causal incremental pass over T new positions (T >= 1); appends their
  // K/V and returns the normalized outputs [B, T, D].
  Tensor step(const Tensor& x, StackCache& cache) const;

 private:
  Tensor attention_block(const DecoderLayer& l, const Tensor& h, AttentionMode mode, AttentionProbs* probs) const;
  Tensor cross_block(const DecoderLayer& l, const Tensor& h, const Tensor& ctx) const;
  Tensor feed_forward(const DecoderLayer& l, const Tensor& x) const;

  std::vector<DecoderLayer> layers_;
  Tensor lnf_g_, lnf_b_;
  int64_t dim_ = 0, heads_ = 1;
  bool cross_ = false;
};

// Rotation tables for absolute positions offset .. offset + length - 1.
RotaryTable rotary_positions(int64_t head_dim, int64_t offset, int64_t length);

// Inference kernel: q [B, H, T, d] attends the first length() cached rows
// causally, query i sitting at absolute position length() - T + i.
Tensor attend_cached(const Tensor& q, const LayerKVState& kv);

}  // namespace blocklm
