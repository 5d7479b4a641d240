#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "blocklm/model.hpp"

namespace blocklm {

struct PaddedPrompt {
  std::vector<int32_t> ids;
  int64_t pad = 0;
};

// Prepends a = (L_B - |p| mod L_B) mod L_B PAD tokens. Throws
// std::invalid_argument for an empty prompt or one longer than L - L_B.
PaddedPrompt pad_prompt(std::span<const int32_t> prompt, int64_t block_length, int64_t context_length);

struct Sampler {
  enum class Kind { greedy, temperature, top_k };
  Kind kind = Kind::greedy;
  double temperature = 1.0;
  int64_t top_k = 0;

  static Sampler greedy() { return {}; }
  static Sampler with_temperature(double t) { return {Kind::temperature, t, 0}; }
  static Sampler with_top_k(int64_t k, double t = 1.0) { return {Kind::top_k, t, k}; }
};

// Picks a token from one row of logits; greedy takes the lowest-index maximum.
int32_t sample_token(std::span<const float> logits, const Sampler& sampler, Rng& rng);

struct EngineCounters {
  ComponentMacs prefill;
  ComponentMacs decode;
  int64_t block_decoder_steps = 0;   // incremental block-decoder passes during decode
  int64_t token_decoder_steps = 0;   // incremental token-decoder passes during decode
  int64_t local_resets = 0;
};

// Generation state for a batch of streams sharing one block cadence.
struct GenState {
  int64_t batch = 0;
  int64_t position = 0;         // absolute position of the next token
  int64_t block_index = 0;      // blocks held in the block cache
  int64_t tokens_in_block = 0;  // tokens of the current block emitted so far
  std::vector<int64_t> pads;    // left padding applied to each prompt
  bool stop_at_eos = true;
  StackCache block_cache;       // block models only
  StackCache local_cache;       // token decoder (vanilla: the full cache)
  Tensor context;               // latest context embedding [B, D]
  Tensor inj;                   // its token-decoder injection [B, S, D_tok]
  bool seeded = false;          // local cache holds the block's first slots
  std::optional<Tensor> next_logits;  // [B, V]
  std::vector<std::vector<int32_t>> sequences;  // padded prompt + generated
  std::vector<std::vector<int32_t>> generated;
  std::vector<uint8_t> finished;
  std::vector<Rng> rngs;
  bool exhausted = false;

  // Peaks over the run, per stream. Block models count block + local
  // entries simultaneously present; cross-attention K/V count as local.
  int64_t peak_block_entries = 0;
  int64_t peak_local_entries = 0;
  int64_t peak_entries = 0;
  int64_t peak_bytes = 0;  // per stream, 4-byte elements
  EngineCounters counters;

  bool done() const;
};

class ContextExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Block models: embedder and block decoder over all prompt blocks in one
// parallel pass; the token decoder does no prompt work and its local cache
// is seeded by the first decode step. Vanilla: one full-prompt pass.
// Prompts of different lengths are left-padded to a common block boundary.
GenState prefill(const Model& model, const std::vector<std::vector<int32_t>>& prompts, uint64_t seed = 0);

// Logits for the next token of every stream [B, V] (computed lazily).
const Tensor& next_logits(const Model& model, GenState& state);

// Emits one token per stream (PAD for finished streams) and advances the
// caches. Throws ContextExhausted when no position is left.
std::vector<int32_t> decode_step(const Model& model, GenState& state, const Sampler& sampler);

struct GenerateOptions {
  int64_t max_new = 32;
  Sampler sampler;
  uint64_t seed = 0;
  bool stop_at_eos = true;
};

struct GenerateResult {
  std::vector<std::vector<int32_t>> tokens;  // generated ids per stream
  GenState state;
  double prefill_seconds = 0.0;
  double decode_seconds = 0.0;
};

GenerateResult generate(const Model& model, const std::vector<std::vector<int32_t>>& prompts,
                        const GenerateOptions& options);

// Stateless oracle: logits for the token following `sequence` (a padded
// prompt plus generated tokens) from a full training-style forward.
std::vector<float> reference_next_logits(const Model& model, std::span<const int32_t> sequence);

// Cache entries per stream predicted for a run that fills the context:
// block models L/L_B + local, vanilla L.
int64_t predicted_peak_entries(const ModelConfig& cfg);
int64_t local_cache_entries(const ModelConfig& cfg);
// Matching per-stream bytes with 4-byte elements.
int64_t predicted_peak_bytes(const ModelConfig& cfg);

}  // namespace blocklm
