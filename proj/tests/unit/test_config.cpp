#include "doctest.h"

#include <filesystem>

#include "blocklm/config.hpp"
#include "blocklm/model.hpp"

using namespace blocklm;
using nlohmann::json;

namespace {

bool mentions(const ConfigError& e, const std::string& needle) {
  for (const auto& p : e.problems()) {
    if (p.find(needle) != std::string::npos) return true;
  }
  return false;
}

std::vector<std::string> errors_for(const json& model) {
  try {
    parse_config({{"model", model}});
  } catch (const ConfigError& e) {
    return e.problems();
  }
  return {};
}

// 12 d^2 weights plus 13 d bias/norm terms per layer, plus a final norm.
int64_t vanilla_non_embedding(int64_t layers, int64_t d) { return layers * (12 * d * d + 13 * d) + 2 * d; }

}  // namespace

TEST_CASE("the 302M block row is valid") {
  const json model = {{"kind", "block"},         {"context_length", 2048}, {"block_length", 4},
                      {"prefix_length", 2},      {"model_dim", 1024},      {"token_dim", 1024},
                      {"n_layers_block", 12},    {"n_layers_token", 12},   {"n_heads", 16},
                      {"token_decoder", "prefix"}, {"embedder", "lookup"}, {"vocab_size", 50304}};
  ConfigBundle b = parse_config({{"model", model}});
  CHECK(b.model.num_blocks() == 512);
  CHECK(b.model.lookup_dim() == 256);
  CHECK(b.model.token_seq_len() == 6);
  CHECK(b.model.first_logit_slot() == 1);
}

TEST_CASE("block_length 0 is rejected by name") {
  const auto problems = errors_for({{"block_length", 0}});
  REQUIRE(problems.size() >= 1);
  CHECK(problems[0] == "block_length must be >= 1");
}

TEST_CASE("D=1022 with L_B=4 fails divisibility") {
  const auto problems = errors_for({{"model_dim", 1022}, {"token_dim", 1024}, {"n_heads", 1}, {"block_length", 4}});
  REQUIRE(problems.size() == 1);
  CHECK(problems[0].find("model_dim (1022) must be divisible by block_length (4)") != std::string::npos);
}

TEST_CASE("every violated constraint is listed") {
  try {
    parse_config({{"model", {{"context_length", 30}, {"model_dim", 100}, {"n_heads", 3}, {"token_decoder", "prefix"},
                             {"prefix_length", 0}, {"bogus", 1}}},
                  {"train", {{"batch_size", 0}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(mentions(e, "unknown field 'model.bogus'"));
  }
  try {
    parse_config({{"model", {{"context_length", 30}, {"model_dim", 100}, {"n_heads", 3}, {"prefix_length", 0}}},
                  {"train", {{"batch_size", 0}, {"warmup_steps", 10}, {"total_steps", 5}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(mentions(e, "context_length (30) must be divisible by block_length (4)"));
    CHECK(mentions(e, "model_dim (100) must be divisible by n_heads (3)"));
    CHECK(mentions(e, "prefix_length must be >= 1"));
    CHECK(mentions(e, "batch_size must be >= 1"));
    CHECK(mentions(e, "total_steps must exceed warmup_steps"));
  }
}

TEST_CASE("vanilla kind forces L_B=1, P=0 and no block layers") {
  ConfigBundle b = parse_config({{"model", {{"kind", "vanilla"}}}});
  CHECK(b.model.block_length == 1);
  CHECK(b.model.prefix_length == 0);
  CHECK(b.model.n_layers_block == 0);
  const auto problems = errors_for({{"kind", "vanilla"}, {"block_length", 4}, {"n_layers_block", 2}});
  CHECK(problems.size() == 2);
}

TEST_CASE("overrides apply before validation") {
  ConfigBundle b = parse_config(json::object(), {"model.block_length=8", "learning_rate=0.005", "model.token_decoder=summation"});
  CHECK(b.model.block_length == 8);
  CHECK(b.train.learning_rate == 0.005);
  CHECK(b.model.token_decoder == TokenDecoderVariant::summation);
  CHECK_THROWS_AS(parse_config(json::object(), {"model.block_length=0"}), ConfigError);
  CHECK_THROWS_AS(parse_config(json::object(), {"nonsense"}), ConfigError);
}

TEST_CASE("config round-trips field for field through disk") {
  ConfigBundle b;
  b.model.block_length = 8;
  b.model.embedder = EmbedderVariant::cls;
  b.model.token_decoder = TokenDecoderVariant::cross_attention;
  b.model.init_std = 0.037;
  b.train.learning_rate = 3e-4;
  b.train.seed = 12345678901ULL;
  b.train.lr_schedule = "constant";
  const auto path = std::filesystem::temp_directory_path() / "blocklm_test_cfg.json";
  save_config(path, b);
  ConfigBundle back = load_config(path);
  CHECK(back.model == b.model);
  CHECK(back.train == b.train);
  std::filesystem::remove(path);
}

TEST_CASE("vanilla non-embedding counts match 85M and 302M") {
  ModelConfig small = ModelConfig::vanilla_defaults();
  small.n_layers_token = 12;
  small.model_dim = small.token_dim = 768;
  small.n_heads = 12;
  const ParamCount a = param_count(small);
  CHECK(a.non_embedding == vanilla_non_embedding(12, 768));
  CHECK(std::abs(a.non_embedding - 85e6) / 85e6 < 0.02);
  CHECK(std::abs(a.non_embedding - 12 * 12 * 768.0 * 768.0) / (12 * 12 * 768.0 * 768.0) < 0.02);

  ModelConfig large = small;
  large.n_layers_token = 24;
  large.model_dim = large.token_dim = 1024;
  large.n_heads = 16;
  const ParamCount b = param_count(large);
  CHECK(b.non_embedding == vanilla_non_embedding(24, 1024));
  CHECK(std::abs(b.non_embedding - 302e6) / 302e6 < 0.02);
}

TEST_CASE("zero layers leave the projections and final norms") {
  ModelConfig c;
  c.n_layers_block = 0;
  c.n_layers_token = 0;
  const ParamCount pc = param_count(c);
  const int64_t injection = c.model_dim * c.prefix_length * c.token_dim + c.prefix_length * c.token_dim;
  CHECK(pc.parts.injection == injection);
  CHECK(pc.non_embedding == injection + 2 * c.model_dim + 2 * c.token_dim);
}

TEST_CASE("param_count equals the instantiated model's element count") {
  for (auto emb : {EmbedderVariant::lookup, EmbedderVariant::encoder, EmbedderVariant::cls}) {
    for (auto dec : {TokenDecoderVariant::prefix, TokenDecoderVariant::summation, TokenDecoderVariant::cross_attention}) {
      ModelConfig c;
      c.context_length = 32;
      c.model_dim = 32;
      c.token_dim = 16;
      c.n_heads = 2;
      c.n_layers_block = 2;
      c.n_layers_token = 1;
      c.embedder = emb;
      c.token_decoder = dec;
      c.encoder_dim = 16;
      c.encoder_layers = 1;
      c.encoder_heads = 2;
      CAPTURE(to_string(emb));
      CAPTURE(to_string(dec));
      CHECK(Model(c, 1).params().element_count() == param_count(c).total);
    }
  }
  ModelConfig v = ModelConfig::vanilla_defaults();
  v.n_layers_token = 3;
  CHECK(Model(v, 1).params().element_count() == param_count(v).total);
  ModelConfig proj;
  proj.embed_dim = 24;
  CHECK(proj.lookup_has_projection());
  CHECK(Model(proj, 1).params().element_count() == param_count(proj).total);
}

TEST_CASE("a missing config file raises") {
  CHECK_THROWS(load_config("/nonexistent/blocklm.json"));
}
