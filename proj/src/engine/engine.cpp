#include "blocklm/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace blocklm {

namespace {

// Routes the model's component MAC attribution into `macs` for a scope.
class CounterBinding {
 public:
  CounterBinding(const Model& model, ComponentMacs& macs) : model_(model), previous_(model.mac_counters()) {
    model_.set_mac_counters(&macs);
  }
  ~CounterBinding() { model_.set_mac_counters(previous_); }
  CounterBinding(const CounterBinding&) = delete;
  CounterBinding& operator=(const CounterBinding&) = delete;

 private:
  const Model& model_;
  ComponentMacs* previous_;
};

Tensor last_slot(const Tensor& h) { return slice_seq(h, h.dim(1) - 1, 1).reshape({h.dim(0), h.dim(2)}); }

void track_peaks(const Model& model, GenState& s) {
  const ModelConfig& c = model.config();
  const int64_t block = s.block_cache.length();
  const int64_t local = s.local_cache.entries();
  s.peak_block_entries = std::max(s.peak_block_entries, block);
  s.peak_local_entries = std::max(s.peak_local_entries, local);
  s.peak_entries = std::max(s.peak_entries, block + local);
  const int64_t bytes = 2 * 4 * (block * c.n_layers_block * c.model_dim + local * c.n_layers_token * c.token_dim);
  s.peak_bytes = std::max(s.peak_bytes, bytes);
}

}  // namespace

bool GenState::done() const {
  return exhausted || std::all_of(finished.begin(), finished.end(), [](uint8_t f) { return f != 0; });
}

PaddedPrompt pad_prompt(std::span<const int32_t> prompt, int64_t block_length, int64_t context_length) {
  if (prompt.empty()) throw std::invalid_argument("prompt is empty");
  const auto n = static_cast<int64_t>(prompt.size());
  if (n > context_length - block_length) {
    throw std::invalid_argument("prompt of " + std::to_string(n) + " tokens leaves no room to generate (limit " +
                                std::to_string(context_length - block_length) + ")");
  }
  PaddedPrompt out;
  out.pad = (block_length - n % block_length) % block_length;
  out.ids.assign(static_cast<size_t>(out.pad), kPad);
  out.ids.insert(out.ids.end(), prompt.begin(), prompt.end());
  return out;
}

int32_t sample_token(std::span<const float> logits, const Sampler& sampler, Rng& rng) {
  const auto v = static_cast<int64_t>(logits.size());
  if (sampler.kind == Sampler::Kind::greedy) {
    return static_cast<int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  if (!(sampler.temperature > 0.0)) throw std::invalid_argument("sampler temperature must be > 0");
  std::vector<int32_t> ids(static_cast<size_t>(v));
  std::iota(ids.begin(), ids.end(), 0);
  int64_t keep = v;
  if (sampler.kind == Sampler::Kind::top_k) {
    if (sampler.top_k < 1) throw std::invalid_argument("top-k sampler needs k >= 1");
    keep = std::min(v, sampler.top_k);
    std::partial_sort(ids.begin(), ids.begin() + keep, ids.end(),
                      [&](int32_t a, int32_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
  }
  double mx = -INFINITY;
  for (int64_t i = 0; i < keep; ++i) mx = std::max(mx, static_cast<double>(logits[ids[i]]));
  std::vector<double> w(static_cast<size_t>(keep));
  for (int64_t i = 0; i < keep; ++i) w[i] = std::exp((logits[ids[i]] - mx) / sampler.temperature);
  std::discrete_distribution<int64_t> dist(w.begin(), w.end());
  return ids[static_cast<size_t>(dist(rng))];
}

GenState prefill(const Model& model, const std::vector<std::vector<int32_t>>& prompts, uint64_t seed) {
  const ModelConfig& c = model.config();
  if (prompts.empty()) throw std::invalid_argument("prefill: no prompts");
  const int64_t lb = c.block_length, len = c.context_length;
  int64_t padded = 0;
  for (const auto& p : prompts) padded = std::max<int64_t>(padded, pad_prompt(p, lb, len).ids.size());

  GenState s;
  s.batch = static_cast<int64_t>(prompts.size());
  std::vector<int32_t> flat;
  for (size_t i = 0; i < prompts.size(); ++i) {
    const int64_t pad = padded - static_cast<int64_t>(prompts[i].size());
    std::vector<int32_t> seq(static_cast<size_t>(pad), kPad);
    seq.insert(seq.end(), prompts[i].begin(), prompts[i].end());
    flat.insert(flat.end(), seq.begin(), seq.end());
    s.pads.push_back(pad);
    s.sequences.push_back(std::move(seq));
    s.rngs.emplace_back(derive_seed(seed, "sample", i));
  }
  s.generated.resize(prompts.size());
  s.finished.assign(prompts.size(), 0);
  s.position = padded;

  NoGradGuard no_grad;
  CounterBinding bind(model, s.counters.prefill);
  if (model.is_block()) {
    s.block_cache = model.block_decoder().make_cache(s.batch, c.num_blocks());
    s.local_cache = model.token_decoder().make_cache(s.batch, c.token_seq_len());
    Tensor out = model.block_decoder_step(model.embed_blocks(flat, s.batch, padded), s.block_cache);
    s.context = last_slot(out);
    s.block_index = padded / lb;
  } else {
    s.local_cache = model.token_decoder().make_cache(s.batch, len);
    Tensor x = embedding(model.token_embedding(), flat, {s.batch, padded});
    s.next_logits = model.classify(last_slot(model.token_decoder_step(x, s.local_cache)));
  }
  track_peaks(model, s);
  return s;
}

const Tensor& next_logits(const Model& model, GenState& s) {
  if (s.next_logits) return *s.next_logits;
  if (s.exhausted) throw ContextExhausted("context of " + std::to_string(model.config().context_length) + " tokens is full");
  NoGradGuard no_grad;
  CounterBinding bind(model, s.counters.decode);
  // First slots of a block: seed the local cache from the current context.
  s.inj = model.inject(s.context);
  if (model.config().token_decoder == TokenDecoderVariant::cross_attention) {
    model.set_token_cross_context(s.local_cache, s.inj);
  }
  Tensor h = model.token_decoder_step(model.token_seed_inputs(s.inj), s.local_cache);
  ++s.counters.token_decoder_steps;
  s.seeded = true;
  s.next_logits = model.classify(last_slot(h));
  track_peaks(model, s);
  return *s.next_logits;
}

std::vector<int32_t> decode_step(const Model& model, GenState& s, const Sampler& sampler) {
  const ModelConfig& c = model.config();
  if (s.exhausted) throw ContextExhausted("context of " + std::to_string(c.context_length) + " tokens is full");
  if (s.done()) throw std::logic_error("decode_step: every stream has finished");
  const Tensor& logits = next_logits(model, s);
  const int64_t v = c.vocab_size;

  std::vector<int32_t> toks(static_cast<size_t>(s.batch));
  for (int64_t i = 0; i < s.batch; ++i) {
    if (s.finished[i]) {
      toks[i] = kPad;
    } else {
      toks[i] = sample_token(logits.values().subspan(i * v, v), sampler, s.rngs[i]);
      s.generated[i].push_back(toks[i]);
      if (s.stop_at_eos && toks[i] == kEos) s.finished[i] = 1;
    }
    s.sequences[i].push_back(toks[i]);
  }
  ++s.position;
  s.next_logits.reset();
  if (s.done()) return toks;

  NoGradGuard no_grad;
  CounterBinding bind(model, s.counters.decode);
  if (!model.is_block()) {
    Tensor x = embedding(model.token_embedding(), toks, {s.batch, 1});
    Tensor h = model.token_decoder_step(x, s.local_cache);
    ++s.counters.token_decoder_steps;
    track_peaks(model, s);
    if (s.local_cache.length() >= c.context_length) {
      s.exhausted = true;
    } else {
      s.next_logits = model.classify(last_slot(h));
    }
    return toks;
  }

  ++s.tokens_in_block;
  const int64_t slot = c.first_logit_slot() + s.tokens_in_block;
  const bool block_done = s.tokens_in_block == c.block_length;
  if (slot < c.token_seq_len()) {
    Tensor h = model.token_decoder_step(model.token_slot_inputs(s.inj, slot, toks), s.local_cache);
    ++s.counters.token_decoder_steps;
    if (!block_done) s.next_logits = model.classify(last_slot(h));
    track_peaks(model, s);
  }
  if (block_done) {
    std::vector<int32_t> block;
    for (const auto& seq : s.sequences) block.insert(block.end(), seq.end() - c.block_length, seq.end());
    Tensor out = model.block_decoder_step(model.embed_blocks(block, s.batch, c.block_length), s.block_cache);
    ++s.counters.block_decoder_steps;
    ++s.block_index;
    s.context = last_slot(out);
    track_peaks(model, s);
    s.local_cache.reset();
    ++s.counters.local_resets;
    s.seeded = false;
    s.tokens_in_block = 0;
    if (s.block_index >= c.num_blocks()) s.exhausted = true;
  }
  return toks;
}

GenerateResult generate(const Model& model, const std::vector<std::vector<int32_t>>& prompts,
                        const GenerateOptions& options) {
  if (options.max_new < 1) throw std::invalid_argument("max_new must be >= 1");
  using clock = std::chrono::steady_clock;
  GenerateResult r;
  auto t0 = clock::now();
  r.state = prefill(model, prompts, options.seed);
  r.state.stop_at_eos = options.stop_at_eos;
  auto t1 = clock::now();
  for (int64_t i = 0; i < options.max_new && !r.state.done(); ++i) decode_step(model, r.state, options.sampler);
  auto t2 = clock::now();
  r.prefill_seconds = std::chrono::duration<double>(t1 - t0).count();
  r.decode_seconds = std::chrono::duration<double>(t2 - t1).count();
  r.tokens = r.state.generated;
  return r;
}

std::vector<float> reference_next_logits(const Model& model, std::span<const int32_t> seq) {
  const ModelConfig& c = model.config();
  const auto n = static_cast<int64_t>(seq.size());
  if (n < 1 || n >= c.context_length) {
    throw std::invalid_argument("reference_next_logits: sequence length " + std::to_string(n) + " outside [1, " +
                                std::to_string(c.context_length) + ")");
  }
  NoGradGuard no_grad;
  const int64_t v = c.vocab_size;
  if (!model.is_block()) {
    Tensor logits = model.vanilla_logits(seq, 1, n);
    auto vals = logits.values().subspan((n - 1) * v, v);
    return {vals.begin(), vals.end()};
  }
  const int64_t lb = c.block_length, nc = n / lb, j = n % lb;
  if (nc < 1) throw std::invalid_argument("reference_next_logits: no complete block to condition on");
  Tensor out = model.block_decoder_forward(model.embed_blocks(seq.first(nc * lb), 1, nc * lb));
  Tensor ctx = slice_seq(out, nc - 1, 1).reshape({1, c.model_dim});
  std::vector<int32_t> block(seq.begin() + nc * lb, seq.end());
  block.resize(static_cast<size_t>(lb), kPad);
  Tensor logits = model.token_decoder_logits(ctx, block);
  auto vals = logits.values().subspan(j * v, v);
  return {vals.begin(), vals.end()};
}

int64_t local_cache_entries(const ModelConfig& c) {
  if (c.kind == ModelKind::vanilla) return c.context_length;
  switch (c.token_decoder) {
    case TokenDecoderVariant::prefix: return c.prefix_length + c.block_length;
    case TokenDecoderVariant::summation: return c.block_length;
    case TokenDecoderVariant::cross_attention: return 2 * c.block_length;
  }
  return 0;
}

int64_t predicted_peak_entries(const ModelConfig& c) {
  if (c.kind == ModelKind::vanilla) return c.context_length;
  return c.num_blocks() + local_cache_entries(c);
}

int64_t predicted_peak_bytes(const ModelConfig& c) {
  if (c.kind == ModelKind::vanilla) return 2 * 4 * c.context_length * c.n_layers_token * c.model_dim;
  return 2 * 4 * (c.num_blocks() * c.n_layers_block * c.model_dim + local_cache_entries(c) * c.n_layers_token * c.token_dim);
}

}  // namespace blocklm
