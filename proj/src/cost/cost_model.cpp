#include "blocklm/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "blocklm/csv.hpp"

namespace blocklm {

namespace {

using i64 = int64_t;

// MACs of one decoder layer processing `fresh` new positions after `cached`
// earlier ones (causal), including the attention sums.
double causal_layer_macs(i64 d, i64 cached, i64 fresh) {
  double attn = 0.0;
  for (i64 i = 0; i < fresh; ++i) attn += 2.0 * static_cast<double>(cached + i + 1) * static_cast<double>(d);
  return static_cast<double>(fresh) * 12.0 * static_cast<double>(d * d) + attn;
}

double full_layer_macs(i64 d, i64 t) {
  return static_cast<double>(t) * 12.0 * static_cast<double>(d * d) + 2.0 * static_cast<double>(t * t * d);
}

// Cross-attention extras per layer: query/output projections and attention
// over tc context rows for `fresh` queries.
double cross_query_macs(i64 d, i64 tc, i64 fresh) {
  return static_cast<double>(fresh) * (2.0 * static_cast<double>(d * d) + 2.0 * static_cast<double>(tc * d));
}

double cross_context_macs(i64 d, i64 tc) { return 2.0 * static_cast<double>(tc * d * d); }

bool is_cross(const ModelConfig& c) {
  return c.kind == ModelKind::block && c.token_decoder == TokenDecoderVariant::cross_attention;
}

i64 injection_slots(const ModelConfig& c) {
  return c.token_decoder == TokenDecoderVariant::prefix ? c.prefix_length : c.block_length;
}

double embedder_macs(const ModelConfig& c, i64 blocks) {
  const double n = static_cast<double>(blocks);
  const i64 e = c.encoder_dim;
  switch (c.embedder) {
    case EmbedderVariant::lookup:
      return c.lookup_has_projection() ? n * static_cast<double>(c.block_length * c.lookup_dim() * c.model_dim) : 0.0;
    case EmbedderVariant::encoder:
      return n * (static_cast<double>(c.encoder_layers) * full_layer_macs(e, c.block_length) +
                  static_cast<double>(c.block_length * e * c.model_dim));
    case EmbedderVariant::cls:
      return n * (static_cast<double>(c.encoder_layers) * full_layer_macs(e, c.n_cls + c.block_length) +
                  static_cast<double>(c.n_cls * e * c.model_dim));
  }
  return 0.0;
}

double block_step_macs(const ModelConfig& c, i64 cached, i64 fresh) {
  return static_cast<double>(c.n_layers_block) * causal_layer_macs(c.model_dim, cached, fresh);
}

double token_step_macs(const ModelConfig& c, i64 cached, i64 fresh) {
  double m = static_cast<double>(c.n_layers_token) * causal_layer_macs(c.token_dim, cached, fresh);
  if (is_cross(c)) m += static_cast<double>(c.n_layers_token) * cross_query_macs(c.token_dim, c.block_length, fresh);
  return m;
}

double classifier_macs(const ModelConfig& c, i64 rows) {
  return static_cast<double>(rows * c.token_dim * c.vocab_size);
}

double injection_macs(const ModelConfig& c) {
  double m = static_cast<double>(c.model_dim * injection_slots(c) * c.token_dim);
  if (is_cross(c)) m += static_cast<double>(c.n_layers_token) * cross_context_macs(c.token_dim, c.block_length);
  return m;
}

i64 padded_prompt(const ModelConfig& c, i64 prompt_len) {
  const i64 lb = c.block_length;
  return prompt_len + (lb - prompt_len % lb) % lb;
}

ComponentCost scaled(ComponentCost c, double f) {
  c.embedder *= f;
  c.block_decoder *= f;
  c.token_decoder *= f;
  return c;
}

}  // namespace

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::train: return "train";
    case Scenario::prefill: return "prefill";
    case Scenario::decode: return "decode";
  }
  return "?";
}

Scenario scenario_from_string(const std::string& s) {
  if (s == "train") return Scenario::train;
  if (s == "prefill") return Scenario::prefill;
  if (s == "decode") return Scenario::decode;
  throw std::invalid_argument("unknown scenario '" + s + "' (expected train, prefill or decode)");
}

double dense_flops(double params, double tokens) { return 2.0 * params * tokens; }

ComponentCost forward_flops(const ModelConfig& c, i64 tokens, i64 batch) {
  ComponentCost macs;
  if (c.kind == ModelKind::vanilla) {
    macs.token_decoder = static_cast<double>(c.n_layers_token) * causal_layer_macs(c.model_dim, 0, tokens) +
                         classifier_macs(c, tokens);
  } else {
    if (tokens % c.block_length != 0) {
      throw std::invalid_argument("forward_flops: " + std::to_string(tokens) + " tokens is not a whole number of blocks");
    }
    const i64 n = tokens / c.block_length;
    const i64 sl = c.token_seq_len();
    macs.embedder = embedder_macs(c, n);
    macs.block_decoder = block_step_macs(c, 0, n);
    macs.token_decoder = static_cast<double>(n) * (injection_macs(c) + token_step_macs(c, 0, sl) +
                                                   classifier_macs(c, c.block_length));
  }
  return scaled(macs, 2.0 * static_cast<double>(batch));
}

ComponentCost prefill_macs(const ModelConfig& c, i64 prompt_len) {
  ComponentCost macs;
  if (c.kind == ModelKind::vanilla) {
    macs.token_decoder = static_cast<double>(c.n_layers_token) * causal_layer_macs(c.model_dim, 0, prompt_len) +
                         classifier_macs(c, 1);
    return macs;
  }
  const i64 n = padded_prompt(c, prompt_len) / c.block_length;
  macs.embedder = embedder_macs(c, n);
  macs.block_decoder = block_step_macs(c, 0, n);
  return macs;
}

ComponentCost decode_macs(const ModelConfig& c, i64 prompt_len, i64 gen_len) {
  ComponentCost macs;
  if (c.kind == ModelKind::vanilla) {
    i64 len = prompt_len;
    for (i64 g = 0; g < gen_len && len < c.context_length; ++g) {
      macs.token_decoder += token_step_macs(c, len, 1);
      ++len;
      if (len < c.context_length) macs.token_decoder += classifier_macs(c, 1);
    }
    return macs;
  }
  const i64 lb = c.block_length, sl = c.token_seq_len(), first = c.first_logit_slot();
  const i64 seed = c.token_decoder == TokenDecoderVariant::prefix ? c.prefix_length : 1;
  i64 blocks = padded_prompt(c, prompt_len) / lb;
  i64 in_block = 0;
  bool seeded = false;
  for (i64 g = 0; g < gen_len && blocks < c.num_blocks(); ++g) {
    if (!seeded) {
      macs.token_decoder += injection_macs(c) + token_step_macs(c, 0, seed) + classifier_macs(c, 1);
      seeded = true;
    }
    ++in_block;
    const i64 slot = first + in_block;
    if (slot < sl) {
      macs.token_decoder += token_step_macs(c, slot, 1);
      if (in_block < lb) macs.token_decoder += classifier_macs(c, 1);
    }
    if (in_block == lb) {
      macs.embedder += embedder_macs(c, 1);
      macs.block_decoder += block_step_macs(c, blocks, 1);
      ++blocks;
      in_block = 0;
      seeded = false;
    }
  }
  return macs;
}

double flops(const ModelConfig& c, const CostQuery& q) {
  switch (q.scenario) {
    case Scenario::train:
      return 3.0 * forward_flops(c, q.context > 0 ? q.context : c.context_length, q.batch).total();
    case Scenario::prefill:
      return q.prompt_len == 0 ? 0.0 : 2.0 * static_cast<double>(q.batch) * prefill_macs(c, q.prompt_len).total();
    case Scenario::decode:
      return 2.0 * static_cast<double>(q.batch) * decode_macs(c, q.prompt_len, q.gen_len).total();
  }
  return 0.0;
}

ComponentCost kv_cache_footprint(const ModelConfig& c, i64 context, i64 batch, i64 bytes) {
  ComponentCost kv;
  const double scale = 2.0 * static_cast<double>(batch * bytes);
  if (c.kind == ModelKind::vanilla) {
    kv.token_decoder = scale * static_cast<double>(c.n_layers_token * c.model_dim * context);
    return kv;
  }
  const i64 local = c.token_decoder == TokenDecoderVariant::prefix ? c.prefix_length + c.block_length
                    : c.token_decoder == TokenDecoderVariant::summation ? c.block_length
                                                                        : 2 * c.block_length;
  kv.block_decoder = scale * static_cast<double>(c.n_layers_block * c.model_dim * (context / c.block_length));
  kv.token_decoder = scale * static_cast<double>(c.n_layers_token * c.token_dim * local);
  return kv;
}

ComponentCost kv_io_total(const ModelConfig& c, i64 prompt_len, i64 gen_len, i64 batch, i64 bytes) {
  ComponentCost io;
  if (gen_len <= 0) return io;
  const double scale = 2.0 * static_cast<double>(batch * bytes);
  if (c.kind == ModelKind::vanilla) {
    // token t reads the cached positions 0..t-1
    double entries = 0.0;
    for (i64 t = prompt_len; t < prompt_len + gen_len; ++t) entries += static_cast<double>(t);
    io.token_decoder = scale * static_cast<double>(c.n_layers_token * c.model_dim) * entries;
    return io;
  }
  const i64 lb = c.block_length, start = padded_prompt(c, prompt_len);
  // the context for block k reads blocks 0..k-1 once
  double block_entries = 0.0;
  for (i64 k = start / lb; k <= (start + gen_len - 1) / lb; ++k) block_entries += static_cast<double>(k);
  // token j of a block reads the local slots up to its logit slot
  double local_entries = 0.0;
  for (i64 t = start; t < start + gen_len; ++t) {
    const i64 j = t % lb;
    local_entries += static_cast<double>(c.first_logit_slot() + j + 1);
    if (is_cross(c)) local_entries += static_cast<double>(lb);
  }
  io.block_decoder = scale * static_cast<double>(c.n_layers_block * c.model_dim) * block_entries;
  io.token_decoder = scale * static_cast<double>(c.n_layers_token * c.token_dim) * local_entries;
  return io;
}

ReductionFactors reduction_factors(const ModelConfig& c) {
  ReductionFactors r;
  if (c.kind == ModelKind::vanilla) return r;
  const auto lb = static_cast<double>(c.block_length);
  r.block_kv_size = lb;
  r.block_kv_io = lb * lb;
  r.token_kv_size_vs_vanilla = static_cast<double>(c.context_length) / lb;
  return r;
}

CostReport cost_report(const ModelConfig& c, const CostQuery& q) {
  CostReport r;
  r.scenario = q.scenario;
  r.query = q;
  const double b = static_cast<double>(q.batch);
  switch (q.scenario) {
    case Scenario::train:
      r.flops = scaled(forward_flops(c, q.context > 0 ? q.context : c.context_length, q.batch), 3.0);
      break;
    case Scenario::prefill:
      r.flops = scaled(prefill_macs(c, q.prompt_len), 2.0 * b);
      if (c.kind == ModelKind::vanilla) {
        r.kv_bytes = kv_cache_footprint(c, q.prompt_len, q.batch, q.bytes_per_elem);
      } else {
        r.kv_bytes.block_decoder =
            kv_cache_footprint(c, padded_prompt(c, q.prompt_len), q.batch, q.bytes_per_elem).block_decoder;
      }
      break;
    case Scenario::decode: {
      r.flops = scaled(decode_macs(c, q.prompt_len, q.gen_len), 2.0 * b);
      const i64 end = c.kind == ModelKind::vanilla ? q.prompt_len + q.gen_len : padded_prompt(c, q.prompt_len) + q.gen_len;
      const i64 filled = std::min(end, c.context_length);
      r.kv_bytes = kv_cache_footprint(c, filled, q.batch, q.bytes_per_elem);
      r.kv_io = kv_io_total(c, q.prompt_len, q.gen_len, q.batch, q.bytes_per_elem);
      break;
    }
  }
  r.flops_total = r.flops.total();
  r.kv_bytes_peak = r.kv_bytes.total();
  r.kv_io_bytes_total = r.kv_io.total();
  r.param_bytes = static_cast<double>(param_count(c).total * q.bytes_per_elem);
  r.reduction = reduction_factors(c);
  if (c.kind == ModelKind::block) {
    r.note = "R = L/L_B = " + std::to_string(c.context_length / c.block_length) +
             " (L=2048, L_B=4 gives 512, not 256)";
  }
  return r;
}

IsoflopBudget isoflop_budget(const ModelConfig& reference, const ModelConfig& candidate, i64 reference_steps,
                             i64 batch) {
  IsoflopBudget b;
  b.flops_per_step_reference = flops(reference, {Scenario::train, 0, 0, 0, batch});
  b.flops_per_step_candidate = flops(candidate, {Scenario::train, 0, 0, 0, batch});
  if (!(b.flops_per_step_candidate > 0.0)) throw std::invalid_argument("isoflop_budget: candidate has zero training FLOPs");
  b.steps = static_cast<double>(reference_steps) * b.flops_per_step_reference / b.flops_per_step_candidate;
  b.rounded_steps = static_cast<i64>(std::llround(b.steps));
  return b;
}

void write_cost_csv_header(std::ostream& os) {
  CsvWriter(os).row({"config", "scenario", "context", "batch", "prompt_len", "gen_len", "bytes_per_elem",
                     "flops_total", "flops_embedder", "flops_block_decoder", "flops_token_decoder", "param_bytes",
                     "kv_bytes_peak", "kv_bytes_block_decoder", "kv_bytes_token_decoder", "kv_io_bytes_total",
                     "kv_io_block_decoder", "kv_io_token_decoder", "r_block_kv_size", "r_block_kv_io",
                     "r_token_kv_vs_vanilla", "note"});
}

void write_cost_csv_row(std::ostream& os, const std::string& name, const CostReport& r) {
  CsvWriter(os).values(name, to_string(r.scenario), r.query.context, r.query.batch, r.query.prompt_len,
                       r.query.gen_len, r.query.bytes_per_elem, r.flops_total, r.flops.embedder,
                       r.flops.block_decoder, r.flops.token_decoder, r.param_bytes, r.kv_bytes_peak,
                       r.kv_bytes.block_decoder, r.kv_bytes.token_decoder, r.kv_io_bytes_total, r.kv_io.block_decoder,
                       r.kv_io.token_decoder, r.reduction.block_kv_size, r.reduction.block_kv_io,
                       r.reduction.token_kv_size_vs_vanilla, r.note);
}

}  // namespace blocklm
