// Runs the twelve acceptance criteria and prints one PASS/FAIL line each.
// Arguments select a subset by number; no arguments runs all of them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "blocklm/analysis.hpp"
#include "blocklm/cost_model.hpp"
#include "blocklm/engine.hpp"
#include "blocklm/train.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace blocklm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const double kLnV = std::log(259.0);

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::vector<std::vector<int32_t>> synthetic_docs(size_t bytes, uint64_t seed) {
  std::vector<std::vector<int32_t>> docs;
  for (const auto& d : synthesize_corpus(bytes, seed)) docs.push_back(tokenize(d));
  return docs;
}

// The synthetic lexicon depends on the seed, so held-out text must come from
// the same corpus: its trailing documents, at least `held_bytes` of them.
struct Split {
  std::vector<std::vector<int32_t>> train, held;
};

Split split_docs(size_t train_bytes, size_t held_bytes, uint64_t seed) {
  Split s;
  s.train = synthetic_docs(train_bytes + held_bytes, seed);
  size_t taken = 0;
  while (taken < held_bytes && s.train.size() > 1) {
    taken += s.train.back().size();
    s.held.insert(s.held.begin(), std::move(s.train.back()));
    s.train.pop_back();
  }
  return s;
}

const TokenDecoderVariant kDecoders[] = {TokenDecoderVariant::prefix, TokenDecoderVariant::summation,
                                         TokenDecoderVariant::cross_attention};
const EmbedderVariant kEmbedders[] = {EmbedderVariant::lookup, EmbedderVariant::encoder, EmbedderVariant::cls};

std::string variant_name(const ModelConfig& c) { return to_string(c.embedder) + "/" + to_string(c.token_decoder); }

// Criterion 1 on one model: 128 greedy steps against full recomputation.
bool decode_equivalent(const Model& m, uint64_t seed, const int64_t prompt_len, double& worst, int64_t& mismatches) {
  const auto r = testing::compare_decode(m, testing::random_prompt(prompt_len, seed), 128);
  worst = std::max(worst, r.max_logit_diff);
  mismatches += r.token_mismatches;
  return r.steps == 128 && r.token_mismatches == 0 && r.max_logit_diff < 1e-3;
}

Outcome c1_decode_equivalence() {
  Rng rng(101);
  std::uniform_int_distribution<int> pick(0, 2);
  const int64_t lbs[] = {1, 2, 4, 8, 4};
  double worst = 0.0;
  int64_t mismatches = 0;
  bool ok = true;
  std::string names;
  for (int i = 0; i < 5; ++i) {
    ModelConfig c;
    c.block_length = lbs[i];
    c.context_length = 160;
    c.prefix_length = 1 + pick(rng);
    c.model_dim = 16 * (2 + pick(rng));
    c.token_dim = 16 * (2 + pick(rng));
    c.n_heads = 2;
    c.n_layers_block = 1 + pick(rng);
    c.n_layers_token = 1 + pick(rng);
    c.embedder = kEmbedders[pick(rng)];
    c.token_decoder = kDecoders[i % 3];
    c.encoder_dim = 32;
    c.encoder_layers = 1;
    c.encoder_heads = 2;
    c.init_std = 0.2;
    Model m(c, 200 + i);
    ok = decode_equivalent(m, 300 + i, 1 + pick(rng) * 5, worst, mismatches) && ok;
    names += (i ? " " : "") + std::string("L_B=") + std::to_string(c.block_length) + ":" + variant_name(c);
  }
  return {ok, names + "; max |dlogit| " + fmt("%.2e", worst) + ", token mismatches " + std::to_string(mismatches)};
}

Outcome c2_prefill_skip() {
  ModelConfig b;
  Model blk(b, 1);
  ModelConfig v = ModelConfig::vanilla_defaults();
  v.n_layers_token = 8;
  Model van(v, 1);
  const auto prompt = testing::random_prompt(128, 2);
  const GenState sb = prefill(blk, {prompt});
  const GenState sv = prefill(van, {prompt});
  const int64_t tb = sb.counters.prefill.token_decoder.macs;
  const int64_t tv = sv.counters.prefill.token_decoder.macs;
  return {tb == 0 && tv > 0, "token-decoder prefill MACs: block " + std::to_string(tb) + ", vanilla " + std::to_string(tv)};
}

Outcome c3_cache_size() {
  ModelConfig b;
  b.context_length = 256;
  b.block_length = 4;
  b.prefix_length = 2;
  b.model_dim = b.token_dim = 32;
  b.n_layers_block = b.n_layers_token = 2;
  b.n_heads = 2;
  ModelConfig v = ModelConfig::vanilla_defaults();
  v.context_length = 256;
  v.model_dim = v.token_dim = 32;
  v.n_layers_token = 4;
  v.n_heads = 2;
  GenerateOptions opt;
  opt.max_new = 256;
  opt.stop_at_eos = false;
  const auto rb = generate(Model(b, 3), {testing::random_prompt(4, 4)}, opt);
  const auto rv = generate(Model(v, 3), {testing::random_prompt(4, 4)}, opt);
  const int64_t mb = rb.state.peak_entries, mv = rv.state.peak_entries;
  const bool entries = mb == 256 / 4 + 2 + 4 && mv == 256;
  const bool predicted = mb == predicted_peak_entries(b) && mv == predicted_peak_entries(v);
  const bool bytes = static_cast<double>(rb.state.peak_bytes) == kv_cache_footprint(b, 256, 1, 4).total() &&
                     static_cast<double>(rv.state.peak_bytes) == kv_cache_footprint(v, 256, 1, 4).total();
  return {entries && predicted && bytes, "measured peak entries " + std::to_string(mb) + " vs " + std::to_string(mv) +
                                             ", predicted " + std::to_string(predicted_peak_entries(b)) + " vs " +
                                             std::to_string(predicted_peak_entries(v)) +
                                             (bytes ? ", bytes match" : ", bytes differ")};
}

Outcome c4_cost_case_study() {
  ModelConfig c = ModelConfig::vanilla_defaults();
  c.n_layers_token = 32;
  c.model_dim = c.token_dim = 4096;
  c.n_heads = 32;
  c.context_length = 2048;
  c.vocab_size = 32000;
  const double f = dense_flops(7e9, 1.0);
  const double kv1 = kv_cache_footprint(c, 1, 1, 2).total();
  const double kv = kv_cache_footprint(c, 2048, 16, 2).total();
  const bool ok = std::abs(f - 14e9) <= 0.01 * 14e9 && kv1 == 512.0 * 1024.0 && kv == 16.0 * 1024 * 1024 * 1024;
  return {ok, fmt("%.4g FLOPs/token, ", f) + fmt("%.0f bytes KV/token, ", kv1) + fmt("%.4g GiB", kv / (1 << 30))};
}

Outcome c5_param_counts() {
  ModelConfig a = ModelConfig::vanilla_defaults(), b = ModelConfig::vanilla_defaults();
  a.n_layers_token = 12;
  a.model_dim = a.token_dim = 768;
  a.n_heads = 12;
  b.n_layers_token = 24;
  b.model_dim = b.token_dim = 1024;
  b.n_heads = 16;
  const double pa = static_cast<double>(param_count(a).non_embedding);
  const double pb = static_cast<double>(param_count(b).non_embedding);
  const bool ok = std::abs(pa - 85e6) <= 0.02 * 85e6 && std::abs(pb - 302e6) <= 0.02 * 302e6;
  return {ok, fmt("12L/768D %.4gM", pa / 1e6) + fmt(", 24L/1024D %.4gM", pb / 1e6)};
}

bool locality(const Model& m, uint64_t seed, std::string& detail) {
  const auto r = testing::locality_splice(m, 100, seed);
  detail = std::to_string(r.identical) + "/" + std::to_string(r.trials) + " bit-identical" +
           (r.matches_training_path ? "" : ", differs from the training path");
  return r.trials == 100 && r.identical == 100 && r.matches_training_path;
}

Outcome c6_locality() {
  ModelConfig c;
  c.model_dim = c.token_dim = 64;
  c.n_layers_block = c.n_layers_token = 2;
  c.init_std = 0.2;
  bool ok = true;
  std::string all;
  for (auto dec : kDecoders) {
    c.token_decoder = dec;
    std::string d;
    ok = locality(Model(c, 6), 60, d) && ok;
    all += (all.empty() ? "" : "; ") + to_string(dec) + " " + d;
  }
  return {ok, all};
}

Outcome c7_packing() {
  Rng rng(70);
  std::uniform_int_distribution<int> len(1, 400);
  std::uniform_int_distribution<int32_t> byte(0, 255);
  std::vector<std::vector<int32_t>> docs(10000);
  for (auto& d : docs) {
    d.resize(static_cast<size_t>(len(rng)));
    for (auto& t : d) t = byte(rng);
  }
  ModelConfig c;
  const PackedCorpus pc = pack_corpus(docs, c, 71);
  const int64_t lb = c.block_length;
  std::vector<double> hist(static_cast<size_t>(lb), 0.0);
  for (int32_t a : pc.pad_lengths) hist.at(static_cast<size_t>(a)) += 1.0;
  const double expect = static_cast<double>(pc.pad_lengths.size()) / static_cast<double>(lb);
  double chi2 = 0.0;
  for (double h : hist) chi2 += (h - expect) * (h - expect) / expect;
  int64_t spanning = 0;
  for (size_t b = 0; b < pc.ids.size(); b += static_cast<size_t>(lb)) {
    for (int64_t j = 1; j < lb; ++j) {
      if (pc.doc_ids[b + j] != pc.doc_ids[b]) {
        ++spanning;
        break;
      }
    }
  }
  // chi-square critical value for 3 degrees of freedom at p = 0.01
  const bool ok = pc.pad_lengths.size() == 10000 && chi2 < 11.3449 && spanning == 0;
  return {ok, std::to_string(pc.pad_lengths.size()) + " documents, chi2 " + fmt("%.3f", chi2) +
                  " (critical 11.345), blocks spanning two documents " + std::to_string(spanning)};
}

Outcome c8_training_signal() {
  ModelConfig c;
  TrainConfig t;
  t.total_steps = 2000;
  const Split docs = split_docs(5'000'000, 200'000, 80);
  const PackedCorpus train = pack_corpus(docs.train, c, 81);
  const PackedCorpus held = pack_corpus(docs.held, c, 83);
  Model m(c, 84);
  const auto trace = train_model(m, train, t, t.total_steps);
  const auto batches = sequential_batches(held, 8, 16);
  const PositionLoss pl = position_wise_loss(m, batches);
  double tail = 0.0;
  for (size_t i = trace.size() - 50; i < trace.size(); ++i) tail += trace[i].loss;
  tail /= 50.0;
  const bool ok = pl.mean <= 0.7 * kLnV && pl.loss[0] > pl.loss[1];
  std::string pos;
  for (double l : pl.loss) pos += fmt(" %.3f", l);
  return {ok, fmt("held-out loss %.3f", pl.mean) + fmt(" (target <= %.3f)", 0.7 * kLnV) +
                  fmt(", last-50 train loss %.3f", tail) + ", position loss" + pos + ", tokens seen " +
                  std::to_string(trace.back().tokens_seen)};
}

Outcome c9_uptraining() {
  ModelConfig v = ModelConfig::vanilla_defaults();
  v.context_length = 128;
  v.n_layers_token = 8;
  ModelConfig b;
  b.context_length = 128;
  b.embed_dim = b.model_dim;
  const Split docs = split_docs(1'000'000, 100'000, 90);
  const PackedCorpus vcorp = pack_corpus(docs.train, v, 91);
  const PackedCorpus bcorp = pack_corpus(docs.train, b, 91);
  const PackedCorpus held = pack_corpus(docs.held, b, 93);
  const auto eval = sequential_batches(held, 8, 8);

  TrainConfig tv;
  tv.total_steps = 500;
  Model van(v, 94);
  train_model(van, vcorp, tv, 500);

  TrainConfig tb;
  tb.total_steps = 200;
  tb.warmup_steps = 20;
  Model up = init_from_vanilla(van, b, 95);
  Model rnd(b, 95);
  const double up0 = evaluate_loss(up, eval), rnd0 = evaluate_loss(rnd, eval);
  train_model(up, bcorp, tb, 200);
  train_model(rnd, bcorp, tb, 200);
  const double up200 = evaluate_loss(up, eval), rnd200 = evaluate_loss(rnd, eval);
  return {up0 < rnd0 && up200 < rnd200, fmt("step 0: uptrained %.3f", up0) + fmt(" vs random %.3f", rnd0) +
                                            fmt("; step 200: uptrained %.3f", up200) + fmt(" vs random %.3f", rnd200)};
}

Outcome c10_throughput() {
  ModelConfig b;
  b.context_length = 512;
  ModelConfig v = ModelConfig::vanilla_defaults();
  v.context_length = 512;
  v.n_layers_token = b.n_layers_block + b.n_layers_token;
  const BenchScenario s = default_scenarios(32).at(1);
  const BenchResult rb = run_benchmark(Model(b, 100), s, 101);
  const BenchResult rv = run_benchmark(Model(v, 100), s, 101);
  const double mem = static_cast<double>(rv.peak_cache_bytes) / static_cast<double>(rb.peak_cache_bytes);
  const bool ok = rb.tokens_per_sec >= rv.tokens_per_sec && mem >= 3.0;
  return {ok, s.name + " batch 32: block " + fmt("%.0f tok/s", rb.tokens_per_sec) + fmt(" vs vanilla %.0f tok/s", rv.tokens_per_sec) +
                  fmt(" (%.2fx)", rb.tokens_per_sec / rv.tokens_per_sec) + "; peak cache bytes " +
                  std::to_string(rb.peak_cache_bytes) + " vs " + std::to_string(rv.peak_cache_bytes) + fmt(" (%.2fx)", mem)};
}

PackedBatch random_batch(const ModelConfig& c, uint64_t seed) {
  PackedBatch b;
  b.batch = 1;
  b.length = c.context_length;
  Rng rng(seed);
  std::uniform_int_distribution<int32_t> byte(0, 255);
  for (int64_t i = 0; i < b.length; ++i) {
    b.ids.push_back(byte(rng));
    b.doc_start.push_back(i == 0);
    b.loss_mask.push_back(i >= c.block_length);
  }
  return b;
}

Outcome c11_gradients_and_attention() {
  ModelConfig b;
  b.context_length = 16;
  b.model_dim = b.token_dim = 16;
  b.n_layers_block = b.n_layers_token = 2;
  b.n_heads = 2;
  b.init_std = 0.3;
  ModelConfig v = ModelConfig::vanilla_defaults();
  v.context_length = 16;
  v.model_dim = v.token_dim = 16;
  v.n_layers_token = 2;
  v.n_heads = 2;
  v.init_std = 0.3;
  double worst_grad = 0.0;
  for (const ModelConfig& c : {b, v}) {
    Model m(c, 110);
    const PackedBatch batch = random_batch(c, 111);
    std::vector<Tensor*> leaves;
    for (auto& [name, t] : m.params().items()) leaves.push_back(&t);
    worst_grad = std::max(worst_grad, testing::gradient_check([&] { return m.lm_loss(batch).loss; }, leaves, 1e-3f, 8));
  }

  double row_err = 0.0, masked = 0.0;
  int64_t rows = 0;
  ModelConfig ab;
  ab.model_dim = ab.token_dim = 64;
  ModelConfig av = ModelConfig::vanilla_defaults();
  av.model_dim = av.token_dim = 64;
  for (const ModelConfig& c : {ab, av}) {
    std::ostringstream sink;
    const AttentionSummary s = dump_attention(Model(c, 112), testing::random_prompt(256, 113), sink, 0);
    row_err = std::max(row_err, s.max_row_error);
    masked = std::max(masked, s.max_masked_weight);
    rows += s.rows;
  }
  const bool ok = worst_grad < 1e-2 && row_err <= 1e-5 && masked == 0.0;
  return {ok, fmt("gradient rel err %.2e", worst_grad) + ", " + std::to_string(rows) + " attention rows" +
                  fmt(", max |row sum - 1| %.2e", row_err) + fmt(", max weight above diagonal %.1g", masked)};
}

Outcome c12_variant_parity() {
  const PackedCorpus corpus = [] {
    ModelConfig c;
    c.context_length = 160;
    return pack_corpus(synthetic_docs(600'000, 120), c, 121);
  }();
  bool ok = true;
  std::string failures;
  double worst = 0.0;
  int64_t mismatches = 0;
  double worst_final = 0.0;
  for (auto emb : kEmbedders) {
    for (auto dec : kDecoders) {
      ModelConfig c;
      c.context_length = 160;
      c.model_dim = c.token_dim = 64;
      c.n_layers_block = c.n_layers_token = 2;
      c.embedder = emb;
      c.token_decoder = dec;
      c.encoder_dim = 64;
      c.encoder_layers = 1;
      c.encoder_heads = 2;
      TrainConfig t;
      t.total_steps = 200;
      t.warmup_steps = 20;
      t.learning_rate = 2e-3;
      Model m(c, 122);
      bool this_ok = true;
      std::vector<StepMetrics> trace;
      try {
        trace = train_model(m, corpus, t, 200);
      } catch (const NonFiniteLossError&) {
        this_ok = false;
      }
      if (this_ok) {
        this_ok = trace.size() == 200 && trace.back().loss < trace.front().loss;
        worst_final = std::max(worst_final, trace.back().loss);
        this_ok = decode_equivalent(m, 123, 9, worst, mismatches) && this_ok;
        std::string d;
        this_ok = locality(m, 124, d) && this_ok;
      }
      if (!this_ok) failures += " " + variant_name(c);
      ok = ok && this_ok;
    }
  }
  return {ok, "9 variants trained 200 steps (worst final loss " + fmt("%.3f", worst_final) + ")" +
                  fmt(", max |dlogit| %.2e", worst) + ", token mismatches " + std::to_string(mismatches) +
                  (failures.empty() ? ", locality exact for all" : ", failing:" + failures)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"incremental/full decode equivalence", c1_decode_equivalence},
      {"prefill skip", c2_prefill_skip},
      {"cache-size law", c3_cache_size},
      {"cost-model case study", c4_cost_case_study},
      {"parameter counts", c5_param_counts},
      {"locality of the token decoder", c6_locality},
      {"packing law", c7_packing},
      {"desk training signal", c8_training_signal},
      {"uptraining benefit", c9_uptraining},
      {"directional throughput", c10_throughput},
      {"gradient and normalization suite", c11_gradients_and_attention},
      {"variant parity harness", c12_variant_parity},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << fmt(" [%.1fs]", secs) << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
