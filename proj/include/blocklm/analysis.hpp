#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blocklm/engine.hpp"
#include "blocklm/model.hpp"

namespace blocklm {

struct BenchScenario {
  std::string name;
  int64_t prompt_len = 256;
  int64_t gen_len = 64;
  int64_t batch_size = 1;
  int64_t repetitions = 3;
  int64_t warmup = 1;
  int64_t memory_budget_bytes = 0;  // cache bytes allowed; 0 = unlimited
};

// Prefill-heavy 256/64 and decode-heavy 64/256.
std::vector<BenchScenario> default_scenarios(int64_t batch_size);

struct BenchResult {
  std::string scenario;
  int64_t batch = 0, prompt_len = 0, gen_len = 0;
  double tokens_per_sec = 0.0;  // generated tokens / median decode seconds
  double prefill_seconds = 0.0; // medians
  double decode_seconds = 0.0;
  int64_t peak_cache_entries = 0;  // per stream
  int64_t peak_cache_bytes = 0;    // whole batch, 4-byte elements
  bool deterministic = true;       // identical tokens in every repetition
  std::vector<std::vector<int32_t>> tokens;
};

// Allocation or budget failure while running a scenario.
class BenchError : public std::runtime_error {
 public:
  BenchError(const std::string& what, int64_t batch) : std::runtime_error(what), batch_(batch) {}
  int64_t batch_size() const { return batch_; }

 private:
  int64_t batch_;
};

// Greedy decoding of random byte prompts; median over repetitions after
// warmup runs. Timers cover prefill and decode only.
BenchResult run_benchmark(const Model& model, const BenchScenario& scenario, uint64_t seed = 0);

void write_bench_csv_header(std::ostream& os);
void write_bench_csv_row(std::ostream& os, const std::string& model_name, const BenchResult& r);

struct PositionLoss {
  std::vector<double> loss;      // mean per within-block position, length L_B
  std::vector<int64_t> count;
  double mean = 0.0;             // scalar lm_loss over the same positions
};

// Block models only; aggregates every non-first block of every batch.
PositionLoss position_wise_loss(const Model& model, const std::vector<PackedBatch>& batches);

// Mean loss per absolute position within a row (0 where nothing is counted).
std::vector<double> absolute_position_loss(const Model& model, const std::vector<PackedBatch>& batches);

struct AttentionSummary {
  int64_t rows = 0;
  double max_row_error = 0.0;     // max |sum - 1| over rows
  double max_masked_weight = 0.0; // largest weight above the causal diagonal
  std::vector<double> sink_mass;  // block decoder (vanilla: decoder) mean mass on position 0, per layer
  double sink_mean = 0.0;
};

// Writes long-format CSV rows (decoder, layer, head, q, k, weight) for the
// block decoder (first `truncate` positions) and for the token decoder on
// block `token_block` (-1 selects the last block). Vanilla models dump their
// single decoder. `ids` must be a whole number of blocks.
AttentionSummary dump_attention(const Model& model, std::span<const int32_t> ids, std::ostream& csv,
                                int64_t truncate = 64, int64_t token_block = -1);

struct NearestToken {
  int64_t slot = 0;
  int64_t rank = 0;
  int32_t token = 0;
  float score = 0.0f;
};

// Top-k rows of `table` by dot product with `probe`, ranks 1..k.
std::vector<NearestToken> nearest_rows(const Tensor& table, std::span<const float> probe, int64_t k);
// For each prefix slot projected from `context` [D]: top-k E_tok rows.
std::vector<NearestToken> nearest_tokens(const Model& model, std::span<const float> context, int64_t k);
void write_nearest_csv(std::ostream& os, const std::vector<NearestToken>& rows);

// Context embeddings [N, D] for one sequence of ids (a whole number of blocks).
Tensor context_embeddings(const Model& model, std::span<const int32_t> ids);

}  // namespace blocklm
