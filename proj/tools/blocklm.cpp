// blocklm: command-line front end for packing, training, evaluation,
// generation, benchmarking, cost accounting, uptraining and analysis.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "blocklm/analysis.hpp"
#include "blocklm/config.hpp"
#include "blocklm/cost_model.hpp"
#include "blocklm/csv.hpp"
#include "blocklm/data.hpp"
#include "blocklm/engine.hpp"
#include "blocklm/model.hpp"
#include "blocklm/train.hpp"

namespace fs = std::filesystem;
using namespace blocklm;

namespace {

// Bad input from the caller: exit code 1.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("BLOCKLM_LOG");
  if (!env) return LogLevel::info;
  const std::string v = env;
  if (v == "error") return LogLevel::error;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

void log(LogLevel level, const std::string& msg) {
  static const LogLevel threshold = log_level();
  if (level > threshold) return;
  static const char* names[] = {"error", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UserError(what + " '" + p.string() + "' does not exist");
}

Model open_checkpoint(const fs::path& p) {
  require_exists(p, "checkpoint");
  try {
    return load_checkpoint(p);
  } catch (const TensorFileError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::runtime_error& e) {
    throw UserError(e.what());
  }
}

ConfigBundle open_config(const std::string& path, const std::vector<std::string>& overrides) {
  if (path.empty()) return parse_config(nlohmann::json::object(), overrides);
  require_exists(path, "config file");
  return load_config(path, overrides);
}

std::vector<std::vector<int32_t>> tokenize_all(const std::vector<std::string>& docs) {
  std::vector<std::vector<int32_t>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(tokenize(d));
  return out;
}

// A packed shard (.blkt) or raw text (file or directory of documents).
PackedCorpus load_corpus(const std::string& data, int64_t synthetic_bytes, const ModelConfig& cfg, uint64_t seed) {
  if (data.empty()) {
    if (synthetic_bytes <= 0) throw UserError("no training data: pass --data PATH or --synthetic-bytes N");
    log(LogLevel::info, "synthesizing " + std::to_string(synthetic_bytes) + " bytes of text");
    return pack_corpus(tokenize_all(synthesize_corpus(static_cast<size_t>(synthetic_bytes), seed)), cfg, seed);
  }
  require_exists(data, "data path");
  if (fs::path(data).extension() == ".blkt") {
    PackedCorpus c = packed_from_file(load_tensors(data));
    if (c.row_length != cfg.context_length || c.block_length != cfg.block_length) {
      throw UserError("shard '" + data + "' was packed for L=" + std::to_string(c.row_length) + ", L_B=" +
                      std::to_string(c.block_length) + " but the model needs L=" + std::to_string(cfg.context_length) +
                      ", L_B=" + std::to_string(cfg.block_length));
    }
    return c;
  }
  return pack_corpus(tokenize_all(read_documents(data)), cfg, derive_seed(seed, "corpus"));
}

fs::path ensure_dir(const std::string& dir) {
  fs::path p = dir.empty() ? fs::path(".") : fs::path(dir);
  fs::create_directories(p);
  return p;
}

std::string model_label(const fs::path& p) { return p.stem().string(); }

// ---- subcommands -----------------------------------------------------------

struct Common {
  uint64_t seed = 0;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, bool with_set = true) {
  cmd->add_option("--seed", c.seed, "Seed for all randomness (per-component seeds are derived from it)");
  cmd->add_option("--out", c.out, "Output directory or file");
  if (with_set) cmd->add_option("--set", c.sets, "Config override key=value (repeatable), e.g. model.block_length=8");
}

int run_synth(int64_t bytes, const Common& c) {
  if (c.out.empty()) throw UserError("synth needs --out FILE");
  const auto docs = synthesize_corpus(static_cast<size_t>(bytes), c.seed);
  auto out = open_output(c.out);
  for (size_t i = 0; i < docs.size(); ++i) {
    if (i) out << "\n" << kDocumentSeparator << "\n";
    out << docs[i];
  }
  out << "\n";
  log(LogLevel::info, "wrote " + std::to_string(docs.size()) + " documents to " + c.out);
  return 0;
}

int run_pack(const std::string& input, const std::string& config, const Common& c) {
  if (c.out.empty()) throw UserError("pack needs --out FILE");
  require_exists(input, "input");
  const ConfigBundle cfg = open_config(config, c.sets);
  PackedCorpus corpus = pack_corpus(tokenize_all(read_documents(input)), cfg.model, c.seed);
  fs::path out(c.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_tensors(out, packed_to_file(corpus));
  log(LogLevel::info, "packed " + std::to_string(corpus.pad_lengths.size()) + " documents into " +
                          std::to_string(corpus.rows) + " rows of " + std::to_string(corpus.row_length));
  return 0;
}

struct TrainArgs {
  std::string config, data, init;
  int64_t steps = -1;
  int64_t synthetic_bytes = 0;
  int64_t eval_batches = 8;
  int64_t log_every = 50;
};

int run_train(const TrainArgs& a, Common c) {
  c.sets.push_back("train.seed=" + std::to_string(c.seed));
  if (a.steps > 0) c.sets.push_back("train.total_steps=" + std::to_string(a.steps));
  ConfigBundle cfg = open_config(a.config, c.sets);
  const fs::path dir = ensure_dir(c.out);
  save_config(dir / "config.json", cfg);

  PackedCorpus corpus = load_corpus(a.data, a.synthetic_bytes, cfg.model, c.seed);
  std::optional<Model> model;
  if (!a.init.empty()) {
    model.emplace(open_checkpoint(a.init));
    if (!(model->config() == cfg.model)) throw UserError("--init checkpoint config differs from the training config");
  } else {
    model.emplace(cfg.model, derive_seed(c.seed, "model"));
  }
  log(LogLevel::info, "training " + to_string(cfg.model.kind) + " model with " +
                          std::to_string(model->params().element_count()) + " parameters on " +
                          std::to_string(corpus.rows) + " rows");

  auto csv = open_output(dir / "loss.csv");
  CsvWriter w(csv);
  w.row({"step", "loss", "grad_norm", "lr", "tokens_seen"});
  train_model(*model, corpus, cfg.train, cfg.train.total_steps, [&](const StepMetrics& m) {
    w.values(m.step, m.loss, m.grad_norm, m.lr, m.tokens_seen);
    if (a.log_every > 0 && (m.step % a.log_every == 0 || m.step + 1 == cfg.train.total_steps)) {
      std::ostringstream s;
      s << "step " << m.step << " loss " << m.loss << " lr " << m.lr;
      log(LogLevel::info, s.str());
    }
  });
  save_checkpoint(*model, dir / "model.blkt");
  const double eval = evaluate_loss(*model, sequential_batches(corpus, cfg.train.batch_size, a.eval_batches));
  log(LogLevel::info, "final loss on the first " + std::to_string(a.eval_batches) + " batches: " + std::to_string(eval));
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, int64_t max_batches, int64_t batch, const Common& c) {
  Model model = open_checkpoint(ckpt);
  PackedCorpus corpus = load_corpus(data, 0, model.config(), c.seed);
  const auto batches = sequential_batches(corpus, batch, max_batches);
  const double loss = evaluate_loss(model, batches);
  CsvWriter out(std::cout);
  out.row({"metric", "value"});
  out.values(std::string("loss"), loss);
  if (model.is_block()) {
    PositionLoss pl = position_wise_loss(model, batches);
    for (size_t j = 0; j < pl.loss.size(); ++j) out.values("position_" + std::to_string(j), pl.loss[j]);
    if (!c.out.empty()) {
      auto f = open_output(ensure_dir(c.out) / "position_loss.csv");
      CsvWriter w(f);
      w.row({"position", "loss", "count"});
      for (size_t j = 0; j < pl.loss.size(); ++j) w.values(static_cast<int64_t>(j), pl.loss[j], pl.count[j]);
    }
  }
  if (!c.out.empty()) {
    auto f = open_output(ensure_dir(c.out) / "absolute_position_loss.csv");
    CsvWriter w(f);
    w.row({"position", "loss"});
    const auto abs = absolute_position_loss(model, batches);
    for (size_t i = 0; i < abs.size(); ++i) w.values(static_cast<int64_t>(i), abs[i]);
  }
  return 0;
}

struct GenArgs {
  std::string ckpt, prompt;
  int64_t max_new = 32;
  bool greedy = false;
  double temperature = 0.0;
  int64_t top_k = 0;
};

int run_generate(const GenArgs& a, const Common& c) {
  Model model = open_checkpoint(a.ckpt);
  if (a.prompt.empty()) throw UserError("--prompt must not be empty");
  GenerateOptions opt;
  opt.max_new = a.max_new;
  opt.seed = c.seed;
  if (a.top_k > 0) {
    opt.sampler = Sampler::with_top_k(a.top_k, a.temperature > 0 ? a.temperature : 1.0);
  } else if (a.temperature > 0 && !a.greedy) {
    opt.sampler = Sampler::with_temperature(a.temperature);
  }
  if (opt.max_new < 1) throw UserError("--max-new must be >= 1");
  GenerateResult r = generate(model, {tokenize(a.prompt)}, opt);
  std::cout << detokenize(r.tokens[0]) << "\n";
  return 0;
}

struct BenchArgs {
  std::vector<std::string> ckpts, configs;
  std::string scenario = "all";
  int64_t batch = 1;
  int64_t prompt_len = -1, gen_len = -1;
  int64_t repetitions = 3, warmup = 1;
  int64_t budget = 0;
};

int run_bench(const BenchArgs& a, const Common& c) {
  std::vector<std::pair<std::string, Model>> models;
  for (const auto& p : a.ckpts) models.emplace_back(model_label(p), open_checkpoint(p));
  for (const auto& p : a.configs) models.emplace_back(model_label(p), Model(open_config(p, c.sets).model, c.seed));
  if (models.empty()) throw UserError("bench needs at least one --ckpt or --config");

  std::vector<BenchScenario> scenarios;
  for (auto sc : default_scenarios(a.batch)) {
    if (a.scenario != "all" && a.scenario != sc.name) continue;
    scenarios.push_back(sc);
  }
  if (a.scenario == "custom") scenarios.push_back({"custom", 64, 64, a.batch, 3, 1, 0});
  if (scenarios.empty()) throw UserError("unknown scenario '" + a.scenario + "' (prefill_heavy, decode_heavy, custom, all)");
  for (auto& sc : scenarios) {
    if (a.prompt_len > 0) sc.prompt_len = a.prompt_len;
    if (a.gen_len >= 0) sc.gen_len = a.gen_len;
    sc.repetitions = a.repetitions;
    sc.warmup = a.warmup;
    sc.memory_budget_bytes = a.budget;
  }

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!c.out.empty()) {
    file = open_output(ensure_dir(c.out) / "bench.csv");
    os = &file;
  }
  write_bench_csv_header(*os);
  for (const auto& [name, model] : models) {
    for (const auto& sc : scenarios) {
      log(LogLevel::info, "bench " + name + " / " + sc.name + " batch " + std::to_string(sc.batch_size));
      write_bench_csv_row(*os, name, run_benchmark(model, sc, c.seed));
    }
  }
  return 0;
}

struct CostArgs {
  std::vector<std::string> configs;
  std::string scenario = "all";
  int64_t prompt_len = 64, gen_len = 256, batch = 1, bytes = 2, context = 0;
};

int run_cost(const CostArgs& a, const Common& c) {
  std::vector<Scenario> scenarios;
  if (a.scenario == "all") {
    scenarios = {Scenario::train, Scenario::prefill, Scenario::decode};
  } else {
    try {
      scenarios = {scenario_from_string(a.scenario)};
    } catch (const std::invalid_argument& e) {
      throw UserError(e.what());
    }
  }
  std::vector<std::pair<std::string, ModelConfig>> cfgs;
  for (const auto& p : a.configs) cfgs.emplace_back(model_label(p), open_config(p, c.sets).model);
  if (cfgs.empty()) cfgs.emplace_back("default", open_config("", c.sets).model);

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!c.out.empty()) {
    file = open_output(ensure_dir(c.out) / "cost.csv");
    os = &file;
  }
  write_cost_csv_header(*os);
  for (const auto& [name, cfg] : cfgs) {
    for (Scenario s : scenarios) {
      CostQuery q{s, a.context, a.prompt_len, a.gen_len, a.batch, a.bytes};
      write_cost_csv_row(*os, name, cost_report(cfg, q));
    }
  }
  return 0;
}

int run_uptrain(const std::string& vanilla, const std::string& config, const Common& c) {
  if (c.out.empty()) throw UserError("uptrain-init needs --out FILE");
  Model src = open_checkpoint(vanilla);
  ConfigBundle cfg = open_config(config, c.sets);
  Model block = init_from_vanilla(src, cfg.model, derive_seed(c.seed, "model"));
  fs::path out(c.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(block, out);
  log(LogLevel::info, "wrote uptrained block checkpoint to " + c.out);
  return 0;
}

struct AnalyzeArgs {
  std::string what, ckpt, input, text;
  int64_t truncate = 64, block = -1, k = 3;
};

int run_analyze(const AnalyzeArgs& a, const Common& c) {
  Model model = open_checkpoint(a.ckpt);
  std::string text = a.text;
  if (!a.input.empty()) {
    require_exists(a.input, "input");
    std::ifstream in(a.input, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    text = s.str();
  }
  if (text.empty()) throw UserError("analyze needs --input FILE or --text STRING");
  const ModelConfig& cfg = model.config();
  std::vector<int32_t> ids = eval_left_pad(tokenize(text), cfg.block_length);
  ids.resize(std::min<size_t>(ids.size(), static_cast<size_t>(cfg.context_length)));
  ids.resize(ids.size() - ids.size() % static_cast<size_t>(cfg.block_length));
  if (ids.empty()) throw UserError("input is shorter than one block");
  const fs::path dir = ensure_dir(c.out);

  if (a.what == "attention") {
    auto f = open_output(dir / "attention.csv");
    AttentionSummary s = dump_attention(model, ids, f, a.truncate, a.block);
    CsvWriter out(std::cout);
    out.row({"metric", "value"});
    out.values(std::string("rows"), s.rows);
    out.values(std::string("max_row_error"), s.max_row_error);
    out.values(std::string("max_masked_weight"), s.max_masked_weight);
    for (size_t l = 0; l < s.sink_mass.size(); ++l) out.values("sink_mass_layer_" + std::to_string(l), s.sink_mass[l]);
    out.values(std::string("sink_mass_mean"), s.sink_mean);
    return 0;
  }
  if (a.what == "nearest") {
    Tensor ctx = context_embeddings(model, ids);
    const int64_t nb = ctx.dim(0);
    const int64_t b = a.block < 0 ? nb - 1 : a.block;
    if (b >= nb) throw UserError("--block " + std::to_string(b) + " outside the " + std::to_string(nb) + " blocks of the input");
    auto rows = nearest_tokens(model, ctx.values().subspan(b * cfg.model_dim, cfg.model_dim), a.k);
    auto f = open_output(dir / "nearest_tokens.csv");
    write_nearest_csv(f, rows);
    write_nearest_csv(std::cout, rows);
    return 0;
  }
  throw UserError("unknown analysis '" + a.what + "' (attention, nearest)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-structured language model toolkit"};
  app.require_subcommand(1);
  Common common;

  int64_t synth_bytes = 5'000'000;
  auto* synth = app.add_subcommand("synth", "Write a deterministic synthetic text corpus");
  synth->add_option("--bytes", synth_bytes, "Approximate corpus size in bytes");
  add_common(synth, common, false);

  std::string pack_input, pack_config;
  auto* pack = app.add_subcommand("pack", "Tokenize and pack a corpus into a shard");
  pack->add_option("--input", pack_input, "Text file (documents separated by <|endoftext|> lines) or directory")->required();
  pack->add_option("--config", pack_config, "Config JSON (model section gives L and L_B)");
  add_common(pack, common);

  TrainArgs targs;
  auto* train = app.add_subcommand("train", "Train a model; writes loss.csv, model.blkt and config.json");
  train->add_option("--config", targs.config, "Config JSON");
  train->add_option("--data", targs.data, "Packed shard (.blkt), text file or directory");
  train->add_option("--synthetic-bytes", targs.synthetic_bytes, "Train on a synthetic corpus of this size");
  train->add_option("--steps", targs.steps, "Override train.total_steps");
  train->add_option("--init", targs.init, "Start from this checkpoint (e.g. uptrain-init output)");
  train->add_option("--eval-batches", targs.eval_batches, "Batches in the final loss report");
  train->add_option("--log-every", targs.log_every, "Log interval in steps");
  add_common(train, common);

  std::string eval_ckpt, eval_data;
  int64_t eval_batches = 16, eval_batch = 8;
  auto* eval = app.add_subcommand("eval", "Loss and position-wise loss of a checkpoint");
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval->add_option("--data", eval_data, "Packed shard, text file or directory")->required();
  eval->add_option("--batches", eval_batches, "Maximum number of batches");
  eval->add_option("--batch-size", eval_batch, "Rows per batch");
  add_common(eval, common, false);

  GenArgs gargs;
  auto* gen = app.add_subcommand("generate", "Generate a continuation of a prompt");
  gen->add_option("--ckpt", gargs.ckpt, "Checkpoint")->required();
  gen->add_option("--prompt", gargs.prompt, "Prompt text")->required();
  gen->add_option("--max-new", gargs.max_new, "Tokens to generate");
  gen->add_flag("--greedy", gargs.greedy, "Greedy decoding (default)");
  gen->add_option("--temperature", gargs.temperature, "Sampling temperature");
  gen->add_option("--top-k", gargs.top_k, "Top-k sampling");
  add_common(gen, common, false);

  BenchArgs bargs;
  auto* bench = app.add_subcommand("bench", "Throughput and cache benchmark; CSV output");
  bench->add_option("--ckpt", bargs.ckpts, "Checkpoint(s) to benchmark");
  bench->add_option("--config", bargs.configs, "Config(s) benchmarked with random weights");
  bench->add_option("--scenario", bargs.scenario, "prefill_heavy, decode_heavy, custom or all");
  bench->add_option("--batch", bargs.batch, "Streams per batch");
  bench->add_option("--prompt-len", bargs.prompt_len, "Override the prompt length");
  bench->add_option("--gen-len", bargs.gen_len, "Override the generation length");
  bench->add_option("--repetitions", bargs.repetitions, "Timed repetitions (>= 3)");
  bench->add_option("--warmup", bargs.warmup, "Warmup runs (>= 1)");
  bench->add_option("--memory-budget", bargs.budget, "Cache byte budget; larger batches fail");
  add_common(bench, common);

  CostArgs cargs;
  auto* cost = app.add_subcommand("cost", "Analytical cost report; CSV output");
  cost->add_option("--config", cargs.configs, "Config(s)");
  cost->add_option("--scenario", cargs.scenario, "train, prefill, decode or all");
  cost->add_option("--prompt-len", cargs.prompt_len, "Prompt tokens");
  cost->add_option("--gen-len", cargs.gen_len, "Generated tokens");
  cost->add_option("--batch", cargs.batch, "Batch size");
  cost->add_option("--bytes", cargs.bytes, "Bytes per element");
  cost->add_option("--context", cargs.context, "Training sequence length (default L)");
  add_common(cost, common);

  std::string up_vanilla, up_config;
  auto* up = app.add_subcommand("uptrain-init", "Initialize a block model from a vanilla checkpoint");
  up->add_option("--vanilla", up_vanilla, "Vanilla checkpoint")->required();
  up->add_option("--config", up_config, "Block config JSON")->required();
  add_common(up, common);

  AnalyzeArgs aargs;
  auto* analyze = app.add_subcommand("analyze", "Attention dumps and nearest-token probes");
  analyze->add_option("what", aargs.what, "attention or nearest")->required();
  analyze->add_option("--ckpt", aargs.ckpt, "Checkpoint")->required();
  analyze->add_option("--input", aargs.input, "Input text file");
  analyze->add_option("--text", aargs.text, "Input text");
  analyze->add_option("--truncate", aargs.truncate, "Block-decoder positions kept in the dump");
  analyze->add_option("--block", aargs.block, "Block index (default: last)");
  analyze->add_option("--k", aargs.k, "Nearest tokens per prefix slot");
  add_common(analyze, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return run_synth(synth_bytes, common);
    if (*pack) return run_pack(pack_input, pack_config, common);
    if (*train) return run_train(targs, common);
    if (*eval) return run_eval(eval_ckpt, eval_data, eval_batches, eval_batch, common);
    if (*gen) return run_generate(gargs, common);
    if (*bench) return run_bench(bargs, common);
    if (*cost) return run_cost(cargs, common);
    if (*up) return run_uptrain(up_vanilla, up_config, common);
    if (*analyze) return run_analyze(aargs, common);
  } catch (const ConfigError& e) {
    log(LogLevel::error, e.what());
    return 1;
  } catch (const UserError& e) {
    log(LogLevel::error, e.what());
    return 1;
  } catch (const TensorFileError& e) {
    log(LogLevel::error, e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    log(LogLevel::error, e.what());
    return 1;
  } catch (const BenchError& e) {
    log(LogLevel::error, e.what());
    return 1;
  } catch (const std::exception& e) {
    log(LogLevel::error, std::string("internal error: ") + e.what());
    return 2;
  }
  return 2;
}
