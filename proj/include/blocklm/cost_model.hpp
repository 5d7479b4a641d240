#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "blocklm/config.hpp"

namespace blocklm {

enum class Scenario { train, prefill, decode };
std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

// Per-component split; totals are the sum of the three parts. Vanilla
// models report everything under token_decoder.
struct ComponentCost {
  double embedder = 0.0;
  double block_decoder = 0.0;
  double token_decoder = 0.0;

  double total() const { return embedder + block_decoder + token_decoder; }
};

struct CostQuery {
  Scenario scenario = Scenario::decode;
  int64_t context = 0;      // train: tokens per sequence (0 selects L)
  int64_t prompt_len = 0;   // prefill/decode: prompt tokens (before block padding)
  int64_t gen_len = 0;      // decode: generated tokens
  int64_t batch = 1;
  int64_t bytes_per_elem = 2;
};

struct ReductionFactors {
  double block_kv_size = 1.0;  // L_B
  double block_kv_io = 1.0;    // L_B^2
  double token_kv_size_vs_vanilla = 1.0;  // R = L / L_B
};

struct CostReport {
  Scenario scenario = Scenario::decode;
  CostQuery query;
  ComponentCost flops;
  double flops_total = 0.0;
  double param_bytes = 0.0;
  ComponentCost kv_bytes;   // peak, whole batch
  double kv_bytes_peak = 0.0;
  ComponentCost kv_io;      // bytes read from KV caches, whole batch
  double kv_io_bytes_total = 0.0;
  ReductionFactors reduction;
  std::string note;
};

// 2 x params x tokens: the dense part of a forward pass.
double dense_flops(double params, double tokens);

// Forward FLOPs over `tokens` tokens per sequence (train uses 3x forward).
// Counts every weight multiply (including the classifier) plus exact causal
// attention sums, matching the instrumented kernels.
ComponentCost forward_flops(const ModelConfig& cfg, int64_t tokens, int64_t batch);
double flops(const ModelConfig& cfg, const CostQuery& query);

// Cache bytes: vanilla 2 * layers * D * L * batch * bytes; block models add
// the block-decoder term over L/L_B entries and the local term.
ComponentCost kv_cache_footprint(const ModelConfig& cfg, int64_t context, int64_t batch, int64_t bytes_per_elem);
// Bytes read from KV caches while generating gen_len tokens after a prompt.
ComponentCost kv_io_total(const ModelConfig& cfg, int64_t prompt_len, int64_t gen_len, int64_t batch,
                          int64_t bytes_per_elem = 2);

ReductionFactors reduction_factors(const ModelConfig& cfg);
CostReport cost_report(const ModelConfig& cfg, const CostQuery& query);

struct IsoflopBudget {
  double steps = 0.0;
  int64_t rounded_steps = 0;
  double flops_per_step_reference = 0.0;
  double flops_per_step_candidate = 0.0;
};

// Steps for the candidate so that its training FLOPs equal the reference's
// over reference_steps (sequences of L tokens, equal batch).
IsoflopBudget isoflop_budget(const ModelConfig& reference, const ModelConfig& candidate, int64_t reference_steps,
                             int64_t batch = 1);

// Token-decoder and block-decoder MAC totals the engine performs for one
// stream during decode (exact schedule, see engine).
ComponentCost decode_macs(const ModelConfig& cfg, int64_t prompt_len, int64_t gen_len);
ComponentCost prefill_macs(const ModelConfig& cfg, int64_t prompt_len);

void write_cost_csv_header(std::ostream& os);
void write_cost_csv_row(std::ostream& os, const std::string& name, const CostReport& report);

}  // namespace blocklm
