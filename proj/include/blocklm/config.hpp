#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace blocklm {

enum class ModelKind { vanilla, block };
enum class EmbedderVariant { lookup, encoder, cls };
enum class TokenDecoderVariant { prefix, summation, cross_attention };

std::string to_string(ModelKind kind);
std::string to_string(EmbedderVariant variant);
std::string to_string(TokenDecoderVariant variant);

// All model hyperparameters. Desk-scale defaults: byte vocabulary plus
// BOS/EOS/PAD, L=256, L_B=4, P=2, D=128, 4+4 layers, 4 heads.
struct ModelConfig {
  ModelKind kind = ModelKind::block;
  int64_t vocab_size = 259;
  int64_t context_length = 256;
  int64_t block_length = 4;
  int64_t prefix_length = 2;
  int64_t model_dim = 128;
  int64_t token_dim = 128;
  int64_t n_layers_block = 4;
  int64_t n_layers_token = 4;
  int64_t n_heads = 4;
  EmbedderVariant embedder = EmbedderVariant::lookup;
  TokenDecoderVariant token_decoder = TokenDecoderVariant::prefix;
  // Lookup embedder per-token width; 0 selects model_dim / block_length.
  // Any other width adds a projection from block_length * embed_dim to D.
  int64_t embed_dim = 0;
  int64_t encoder_dim = 256;
  int64_t encoder_layers = 3;
  int64_t encoder_heads = 4;
  int64_t n_cls = 3;
  double init_std = 0.02;

  static ModelConfig vanilla_defaults();

  int64_t num_blocks() const { return context_length / block_length; }
  int64_t lookup_dim() const { return embed_dim > 0 ? embed_dim : model_dim / block_length; }
  bool lookup_has_projection() const { return lookup_dim() * block_length != model_dim; }
  // Slots in one token-decoder sequence: P + L_B for the prefix variant,
  // L_B (start slot + first L_B - 1 tokens) otherwise.
  int64_t token_seq_len() const;
  // Slot whose output predicts the first token of a block.
  int64_t first_logit_slot() const;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int64_t warmup_steps = 100;
  int64_t total_steps = 2000;
  int64_t batch_size = 8;
  uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  double min_lr_ratio = 0.1;
  std::string lr_schedule = "cosine";

  bool operator==(const TrainConfig&) const = default;
};

// Lists every violated constraint, one per line.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

std::vector<std::string> validate(const ModelConfig& cfg);
std::vector<std::string> validate(const TrainConfig& cfg);

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
// Strict parsing: unknown fields and constraint violations throw ConfigError.
// A model object with "kind": "vanilla" starts from vanilla defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct ConfigBundle {
  ModelConfig model;
  TrainConfig train;
};

// Reads {"model": {...}, "train": {...}}; overrides are "section.key=value"
// (or a bare key unique across sections) applied before validation.
ConfigBundle load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
ConfigBundle parse_config(const nlohmann::json& doc, const std::vector<std::string>& overrides = {});
void save_config(const std::filesystem::path& path, const ConfigBundle& bundle);

struct ParamBreakdown {
  int64_t embedder = 0;        // non-embedding part (encoder layers, projections)
  int64_t block_decoder = 0;
  int64_t token_decoder = 0;   // decoder layers and final norm
  int64_t injection = 0;       // prefix / summation / cross projection
  int64_t embeddings = 0;      // E_emb, E_tok, encoder tables, CLS slots
  int64_t classifier = 0;
};

struct ParamCount {
  int64_t total = 0;
  int64_t non_embedding = 0;
  ParamBreakdown parts;
};

int64_t decoder_layer_params(int64_t dim, bool cross);
int64_t stack_params(int64_t layers, int64_t dim, bool cross);
ParamCount param_count(const ModelConfig& cfg);

}  // namespace blocklm
