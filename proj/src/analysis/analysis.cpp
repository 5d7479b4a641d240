#include "blocklm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <new>
#include <numeric>

#include "blocklm/csv.hpp"

namespace blocklm {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::vector<int32_t>> random_prompts(int64_t batch, int64_t len, uint64_t seed) {
  std::vector<std::vector<int32_t>> prompts;
  for (int64_t i = 0; i < batch; ++i) {
    Rng rng(derive_seed(seed, "bench-prompt", static_cast<uint64_t>(i)));
    std::uniform_int_distribution<int32_t> byte(32, 126);
    std::vector<int32_t> p(static_cast<size_t>(len));
    for (auto& t : p) t = byte(rng);
    prompts.push_back(std::move(p));
  }
  return prompts;
}

// Writes one probability matrix set and folds it into the summary.
void emit_trace(const std::string& decoder, const AttentionTrace& trace, int64_t batch_index, int64_t truncate,
                std::ostream& csv, AttentionSummary& s, bool sink) {
  CsvWriter w(csv);
  for (size_t l = 0; l < trace.layers.size(); ++l) {
    const AttentionProbs& p = trace.layers[l];
    const int64_t heads = p.shape[1], tq = p.shape[2], tk = p.shape[3];
    const int64_t lim = truncate > 0 ? std::min(truncate, tq) : tq;
    double mass = 0.0;
    for (int64_t h = 0; h < heads; ++h) {
      const float* m = p.values.data() + ((batch_index * heads + h) * tq) * tk;
      for (int64_t q = 0; q < tq; ++q) {
        double total = 0.0;
        for (int64_t k = 0; k < tk; ++k) {
          const float wgt = m[q * tk + k];
          total += wgt;
          if (k > q + (tk - tq)) s.max_masked_weight = std::max(s.max_masked_weight, static_cast<double>(std::abs(wgt)));
          if (q < lim && k < lim) w.values(decoder, static_cast<int64_t>(l), h, q, k, wgt);
        }
        s.max_row_error = std::max(s.max_row_error, std::abs(total - 1.0));
        ++s.rows;
        mass += m[q * tk];
      }
    }
    if (sink) s.sink_mass.push_back(mass / static_cast<double>(heads * tq));
  }
}

}  // namespace

std::vector<BenchScenario> default_scenarios(int64_t batch_size) {
  return {{"prefill_heavy", 256, 64, batch_size, 3, 1, 0}, {"decode_heavy", 64, 256, batch_size, 3, 1, 0}};
}

BenchResult run_benchmark(const Model& model, const BenchScenario& sc, uint64_t seed) {
  const ModelConfig& c = model.config();
  if (sc.gen_len <= 0) throw std::invalid_argument("scenario '" + sc.name + "': gen_len must be >= 1 (tokens/sec undefined)");
  if (sc.repetitions < 3) throw std::invalid_argument("scenario '" + sc.name + "': repetitions must be >= 3");
  if (sc.warmup < 1) throw std::invalid_argument("scenario '" + sc.name + "': warmup must be >= 1");
  if (sc.batch_size < 1) throw std::invalid_argument("scenario '" + sc.name + "': batch_size must be >= 1");
  const int64_t padded = sc.prompt_len + (c.block_length - sc.prompt_len % c.block_length) % c.block_length;
  if (sc.prompt_len < 1 || padded + sc.gen_len > c.context_length) {
    throw std::invalid_argument("scenario '" + sc.name + "': prompt " + std::to_string(sc.prompt_len) + " + gen " +
                                std::to_string(sc.gen_len) + " does not fit the context of " +
                                std::to_string(c.context_length));
  }
  if (sc.memory_budget_bytes > 0) {
    const int64_t need = predicted_peak_bytes(c) * sc.batch_size;
    if (need > sc.memory_budget_bytes) {
      throw BenchError("scenario '" + sc.name + "': batch size " + std::to_string(sc.batch_size) + " needs up to " +
                           std::to_string(need) + " cache bytes, over the budget of " +
                           std::to_string(sc.memory_budget_bytes),
                       sc.batch_size);
    }
  }

  const auto prompts = random_prompts(sc.batch_size, sc.prompt_len, seed);
  GenerateOptions opt;
  opt.max_new = sc.gen_len;
  opt.stop_at_eos = false;
  opt.seed = seed;

  BenchResult r;
  r.scenario = sc.name;
  r.batch = sc.batch_size;
  r.prompt_len = sc.prompt_len;
  r.gen_len = sc.gen_len;
  std::vector<double> pre, dec;
  try {
    for (int64_t i = 0; i < sc.warmup + sc.repetitions; ++i) {
      GenerateResult g = generate(model, prompts, opt);
      if (i < sc.warmup) continue;
      pre.push_back(g.prefill_seconds);
      dec.push_back(g.decode_seconds);
      if (r.tokens.empty()) {
        r.tokens = g.tokens;
        r.peak_cache_entries = g.state.peak_entries;
        r.peak_cache_bytes = g.state.peak_bytes * sc.batch_size;
      } else if (g.tokens != r.tokens) {
        r.deterministic = false;
      }
    }
  } catch (const std::bad_alloc&) {
    throw BenchError("scenario '" + sc.name + "': allocation failed at batch size " + std::to_string(sc.batch_size),
                     sc.batch_size);
  }
  r.prefill_seconds = median(pre);
  r.decode_seconds = median(dec);
  r.tokens_per_sec = static_cast<double>(sc.batch_size * sc.gen_len) / r.decode_seconds;
  return r;
}

void write_bench_csv_header(std::ostream& os) {
  CsvWriter(os).row({"model", "scenario", "batch", "prompt_len", "gen_len", "tokens_per_sec", "prefill_seconds",
                     "decode_seconds", "peak_cache_entries", "peak_cache_bytes", "deterministic"});
}

void write_bench_csv_row(std::ostream& os, const std::string& model_name, const BenchResult& r) {
  CsvWriter(os).values(model_name, r.scenario, r.batch, r.prompt_len, r.gen_len, r.tokens_per_sec, r.prefill_seconds,
                       r.decode_seconds, r.peak_cache_entries, r.peak_cache_bytes,
                       std::string(r.deterministic ? "true" : "false"));
}

PositionLoss position_wise_loss(const Model& model, const std::vector<PackedBatch>& batches) {
  if (!model.is_block()) throw std::invalid_argument("position-wise loss needs a block model (vanilla has no blocks)");
  NoGradGuard no_grad;
  const int64_t lb = model.config().block_length;
  PositionLoss out;
  std::vector<double> sum(static_cast<size_t>(lb), 0.0);
  out.count.assign(static_cast<size_t>(lb), 0);
  double total = 0.0;
  int64_t n = 0;
  for (const auto& b : batches) {
    LossResult r = model.lm_loss(b);
    for (int64_t j = 0; j < lb; ++j) {
      sum[j] += r.position_sum[j];
      out.count[j] += r.position_count[j];
    }
    total += r.mean * static_cast<double>(r.count);
    n += r.count;
  }
  out.loss.resize(static_cast<size_t>(lb));
  for (int64_t j = 0; j < lb; ++j) out.loss[j] = out.count[j] ? sum[j] / static_cast<double>(out.count[j]) : 0.0;
  out.mean = n ? total / static_cast<double>(n) : 0.0;
  return out;
}

std::vector<double> absolute_position_loss(const Model& model, const std::vector<PackedBatch>& batches) {
  NoGradGuard no_grad;
  const ModelConfig& c = model.config();
  if (batches.empty()) return {};
  const int64_t len = batches.front().length;
  const int64_t skip = model.is_block() ? c.block_length : 1;
  std::vector<double> sum(static_cast<size_t>(len), 0.0);
  std::vector<int64_t> count(static_cast<size_t>(len), 0);
  for (const auto& b : batches) {
    LossResult r = model.lm_loss(b);
    const int64_t per_row = len - skip;
    for (int64_t row = 0; row < b.batch; ++row) {
      for (int64_t i = 0; i < per_row; ++i) {
        const int64_t pos = skip + i;
        if (!b.loss_mask[row * len + pos]) continue;
        sum[pos] += r.row_loss[row * per_row + i];
        ++count[pos];
      }
    }
  }
  for (int64_t i = 0; i < len; ++i) sum[i] = count[i] ? sum[i] / static_cast<double>(count[i]) : 0.0;
  return sum;
}

Tensor context_embeddings(const Model& model, std::span<const int32_t> ids) {
  if (!model.is_block()) throw std::invalid_argument("context embeddings need a block model");
  NoGradGuard no_grad;
  const auto n = static_cast<int64_t>(ids.size());
  Tensor out = model.block_decoder_forward(model.embed_blocks(ids, 1, n));
  return out.reshape({out.dim(1), out.dim(2)});
}

AttentionSummary dump_attention(const Model& model, std::span<const int32_t> ids, std::ostream& csv, int64_t truncate,
                                int64_t token_block) {
  NoGradGuard no_grad;
  const ModelConfig& c = model.config();
  const auto n = static_cast<int64_t>(ids.size());
  AttentionSummary s;
  CsvWriter(csv).row({"decoder", "layer", "head", "q", "k", "weight"});
  if (!model.is_block()) {
    AttentionTrace trace;
    model.vanilla_logits(ids, 1, n, &trace);
    emit_trace("decoder", trace, 0, truncate, csv, s, true);
  } else {
    const int64_t lb = c.block_length, nb = n / lb;
    if (n % lb != 0 || nb < 1) throw std::invalid_argument("dump_attention: input must be a whole number of blocks");
    AttentionTrace block_trace;
    Tensor out = model.block_decoder_forward(model.embed_blocks(ids, 1, n), &block_trace);
    emit_trace("block_decoder", block_trace, 0, truncate, csv, s, true);
    // the token decoder decodes block i from context i - 1
    const int64_t target = token_block < 0 ? nb - 1 : token_block;
    if (target >= 1 && target < nb) {
      Tensor ctx = slice_seq(out, target - 1, 1).reshape({1, c.model_dim});
      AttentionTrace tok_trace;
      model.token_decoder_logits(ctx, ids.subspan(target * lb, lb), &tok_trace);
      emit_trace("token_decoder", tok_trace, 0, 0, csv, s, false);
    }
  }
  if (!s.sink_mass.empty()) {
    s.sink_mean = std::accumulate(s.sink_mass.begin(), s.sink_mass.end(), 0.0) / static_cast<double>(s.sink_mass.size());
  }
  return s;
}

std::vector<NearestToken> nearest_rows(const Tensor& table, std::span<const float> probe, int64_t k) {
  const int64_t v = table.dim(0), d = table.dim(1);
  if (static_cast<int64_t>(probe.size()) != d) {
    throw ShapeError("nearest_rows: probe of " + std::to_string(probe.size()) + " values against rows of " +
                     std::to_string(d));
  }
  k = std::clamp<int64_t>(k, 1, v);
  std::vector<float> score(static_cast<size_t>(v));
  for (int64_t t = 0; t < v; ++t) {
    double acc = 0.0;
    for (int64_t i = 0; i < d; ++i) acc += static_cast<double>(table.data()[t * d + i]) * probe[i];
    score[t] = static_cast<float>(acc);
  }
  std::vector<int32_t> order(static_cast<size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int32_t a, int32_t b) { return score[a] > score[b]; });
  std::vector<NearestToken> out;
  for (int64_t r = 0; r < k; ++r) out.push_back({0, r + 1, order[r], score[order[r]]});
  return out;
}

std::vector<NearestToken> nearest_tokens(const Model& model, std::span<const float> context, int64_t k) {
  const ModelConfig& c = model.config();
  if (!model.is_block() || c.token_decoder != TokenDecoderVariant::prefix) {
    throw std::invalid_argument("nearest-token probe needs a prefix token decoder");
  }
  NoGradGuard no_grad;
  Tensor ctx({1, c.model_dim}, std::vector<float>(context.begin(), context.end()));
  Tensor inj = model.inject(ctx);
  std::vector<NearestToken> out;
  for (int64_t p = 0; p < c.prefix_length; ++p) {
    auto rows = nearest_rows(model.token_embedding(), inj.values().subspan(p * c.token_dim, c.token_dim), k);
    for (auto& r : rows) {
      r.slot = p;
      out.push_back(r);
    }
  }
  return out;
}

void write_nearest_csv(std::ostream& os, const std::vector<NearestToken>& rows) {
  CsvWriter w(os);
  w.row({"slot", "rank", "token", "text", "score"});
  for (const auto& r : rows) {
    const int32_t id = r.token;
    std::string text = id == kBos ? "<bos>" : id == kEos ? "<eos>" : id == kPad ? "<pad>" : detokenize({&id, 1});
    w.values(r.slot, r.rank, r.token, text, r.score);
  }
}

}  // namespace blocklm
