#include "blocklm/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace blocklm {

using nlohmann::json;

std::string to_string(ModelKind kind) { return kind == ModelKind::vanilla ? "vanilla" : "block"; }

std::string to_string(EmbedderVariant variant) {
  switch (variant) {
    case EmbedderVariant::lookup: return "lookup";
    case EmbedderVariant::encoder: return "encoder";
    case EmbedderVariant::cls: return "cls";
  }
  return "?";
}

std::string to_string(TokenDecoderVariant variant) {
  switch (variant) {
    case TokenDecoderVariant::prefix: return "prefix";
    case TokenDecoderVariant::summation: return "summation";
    case TokenDecoderVariant::cross_attention: return "cross_attention";
  }
  return "?";
}

ModelConfig ModelConfig::vanilla_defaults() {
  ModelConfig cfg;
  cfg.kind = ModelKind::vanilla;
  cfg.block_length = 1;
  cfg.prefix_length = 0;
  cfg.n_layers_block = 0;
  cfg.n_layers_token = 8;
  return cfg;
}

int64_t ModelConfig::token_seq_len() const {
  if (kind == ModelKind::vanilla) return context_length;
  return token_decoder == TokenDecoderVariant::prefix ? prefix_length + block_length : block_length;
}

int64_t ModelConfig::first_logit_slot() const {
  return kind == ModelKind::block && token_decoder == TokenDecoderVariant::prefix ? prefix_length - 1 : 0;
}

static std::string join_lines(const std::vector<std::string>& problems) {
  std::string out = "invalid configuration:";
  for (const auto& p : problems) out += "\n  - " + p;
  return out;
}

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_lines(problems)), problems_(std::move(problems)) {}

std::vector<std::string> validate(const ModelConfig& c) {
  std::vector<std::string> p;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) p.push_back(msg);
  };
  need(c.vocab_size >= 1, "vocab_size must be >= 1");
  need(c.context_length >= 1, "context_length must be >= 1");
  need(c.block_length >= 1, "block_length must be >= 1");
  need(c.model_dim >= 1, "model_dim must be >= 1");
  need(c.token_dim >= 1, "token_dim must be >= 1");
  need(c.n_heads >= 1, "n_heads must be >= 1");
  need(c.n_layers_token >= 0 && c.n_layers_block >= 0, "layer counts must be >= 0");
  need(c.init_std > 0.0, "init_std must be > 0");
  if (!p.empty()) return p;

  need(c.context_length % c.block_length == 0,
       "context_length (" + std::to_string(c.context_length) + ") must be divisible by block_length (" +
           std::to_string(c.block_length) + ")");
  need(c.model_dim % c.n_heads == 0, "model_dim (" + std::to_string(c.model_dim) + ") must be divisible by n_heads (" +
                                         std::to_string(c.n_heads) + ")");
  need(c.token_dim % c.n_heads == 0, "token_dim (" + std::to_string(c.token_dim) + ") must be divisible by n_heads (" +
                                         std::to_string(c.n_heads) + ")");
  if (c.model_dim % c.n_heads == 0) need((c.model_dim / c.n_heads) % 2 == 0, "model_dim / n_heads must be even (rotary pairs)");
  if (c.token_dim % c.n_heads == 0) need((c.token_dim / c.n_heads) % 2 == 0, "token_dim / n_heads must be even (rotary pairs)");

  if (c.kind == ModelKind::vanilla) {
    need(c.block_length == 1, "vanilla models require block_length = 1");
    need(c.prefix_length == 0, "vanilla models require prefix_length = 0");
    need(c.n_layers_block == 0, "vanilla models require n_layers_block = 0");
    need(c.token_dim == c.model_dim, "vanilla models require token_dim = model_dim");
    return p;
  }

  if (c.embedder == EmbedderVariant::lookup) {
    if (c.embed_dim == 0) {
      need(c.model_dim % c.block_length == 0, "model_dim (" + std::to_string(c.model_dim) +
                                                  ") must be divisible by block_length (" +
                                                  std::to_string(c.block_length) + ") for the lookup embedder");
    } else {
      need(c.embed_dim > 0, "embed_dim must be >= 0");
    }
  } else {
    need(c.encoder_dim >= 1 && c.encoder_layers >= 1 && c.encoder_heads >= 1,
         "encoder_dim, encoder_layers and encoder_heads must be >= 1");
    if (c.encoder_dim >= 1 && c.encoder_heads >= 1) {
      need(c.encoder_dim % c.encoder_heads == 0 && (c.encoder_dim / c.encoder_heads) % 2 == 0,
           "encoder_dim / encoder_heads must be an even integer");
    }
    if (c.embedder == EmbedderVariant::cls) need(c.n_cls >= 1, "n_cls must be >= 1 for the cls embedder");
  }
  if (c.token_decoder == TokenDecoderVariant::prefix) {
    need(c.prefix_length >= 1, "prefix_length must be >= 1 for the prefix token decoder");
  } else {
    need(c.prefix_length >= 0, "prefix_length must be >= 0");
  }
  return p;
}

std::vector<std::string> validate(const TrainConfig& c) {
  std::vector<std::string> p;
  if (!(c.learning_rate > 0.0)) p.push_back("learning_rate must be > 0");
  if (c.warmup_steps < 0) p.push_back("warmup_steps must be >= 0");
  if (c.total_steps <= c.warmup_steps) p.push_back("total_steps must exceed warmup_steps");
  if (c.batch_size < 1) p.push_back("batch_size must be >= 1");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) p.push_back("betas must lie in [0, 1)");
  if (!(c.eps > 0.0)) p.push_back("eps must be > 0");
  if (c.weight_decay < 0.0) p.push_back("weight_decay must be >= 0");
  if (c.grad_clip < 0.0) p.push_back("grad_clip must be >= 0 (0 disables clipping)");
  if (!(c.min_lr_ratio >= 0.0 && c.min_lr_ratio <= 1.0)) p.push_back("min_lr_ratio must lie in [0, 1]");
  if (c.lr_schedule != "cosine" && c.lr_schedule != "constant") p.push_back("lr_schedule must be 'cosine' or 'constant'");
  return p;
}

json to_json(const ModelConfig& c) {
  return json{{"kind", to_string(c.kind)},
              {"vocab_size", c.vocab_size},
              {"context_length", c.context_length},
              {"block_length", c.block_length},
              {"prefix_length", c.prefix_length},
              {"model_dim", c.model_dim},
              {"token_dim", c.token_dim},
              {"n_layers_block", c.n_layers_block},
              {"n_layers_token", c.n_layers_token},
              {"n_heads", c.n_heads},
              {"embedder", to_string(c.embedder)},
              {"token_decoder", to_string(c.token_decoder)},
              {"embed_dim", c.embed_dim},
              {"encoder_dim", c.encoder_dim},
              {"encoder_layers", c.encoder_layers},
              {"encoder_heads", c.encoder_heads},
              {"n_cls", c.n_cls},
              {"init_std", c.init_std}};
}

json to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate}, {"warmup_steps", c.warmup_steps},
              {"total_steps", c.total_steps},     {"batch_size", c.batch_size},
              {"seed", c.seed},                   {"beta1", c.beta1},
              {"beta2", c.beta2},                 {"eps", c.eps},
              {"weight_decay", c.weight_decay},   {"grad_clip", c.grad_clip},
              {"min_lr_ratio", c.min_lr_ratio},   {"lr_schedule", c.lr_schedule}};
}

namespace {

using Setter = std::function<void(const json&)>;

template <typename T>
Setter bind(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

template <typename E>
Setter bind_enum(E& field, std::vector<std::pair<std::string, E>> names) {
  return [&field, names](const json& v) {
    const auto s = v.get<std::string>();
    for (const auto& [name, value] : names) {
      if (name == s) {
        field = value;
        return;
      }
    }
    std::string allowed;
    for (const auto& [name, value] : names) allowed += (allowed.empty() ? "" : ", ") + name;
    throw std::invalid_argument("'" + s + "' is not one of {" + allowed + "}");
  };
}

void apply_fields(const json& j, const std::map<std::string, Setter>& fields, const std::string& section,
                  std::vector<std::string>& problems) {
  if (!j.is_object()) {
    problems.push_back(section + " must be a JSON object");
    return;
  }
  for (const auto& [key, value] : j.items()) {
    auto it = fields.find(key);
    if (it == fields.end()) {
      problems.push_back("unknown field '" + section + "." + key + "'");
      continue;
    }
    try {
      it->second(value);
    } catch (const std::exception& ex) {
      problems.push_back("field '" + section + "." + key + "': " + ex.what());
    }
  }
}

std::map<std::string, Setter> model_fields(ModelConfig& c) {
  return {{"kind", bind_enum(c.kind, {{"vanilla", ModelKind::vanilla}, {"block", ModelKind::block}})},
          {"vocab_size", bind(c.vocab_size)},
          {"context_length", bind(c.context_length)},
          {"block_length", bind(c.block_length)},
          {"prefix_length", bind(c.prefix_length)},
          {"model_dim", bind(c.model_dim)},
          {"token_dim", bind(c.token_dim)},
          {"n_layers_block", bind(c.n_layers_block)},
          {"n_layers_token", bind(c.n_layers_token)},
          {"n_heads", bind(c.n_heads)},
          {"embedder", bind_enum(c.embedder, {{"lookup", EmbedderVariant::lookup},
                                              {"encoder", EmbedderVariant::encoder},
                                              {"cls", EmbedderVariant::cls}})},
          {"token_decoder", bind_enum(c.token_decoder, {{"prefix", TokenDecoderVariant::prefix},
                                                        {"summation", TokenDecoderVariant::summation},
                                                        {"cross_attention", TokenDecoderVariant::cross_attention}})},
          {"embed_dim", bind(c.embed_dim)},
          {"encoder_dim", bind(c.encoder_dim)},
          {"encoder_layers", bind(c.encoder_layers)},
          {"encoder_heads", bind(c.encoder_heads)},
          {"n_cls", bind(c.n_cls)},
          {"init_std", bind(c.init_std)}};
}

std::map<std::string, Setter> train_fields(TrainConfig& c) {
  return {{"learning_rate", bind(c.learning_rate)}, {"warmup_steps", bind(c.warmup_steps)},
          {"total_steps", bind(c.total_steps)},     {"batch_size", bind(c.batch_size)},
          {"seed", bind(c.seed)},                   {"beta1", bind(c.beta1)},
          {"beta2", bind(c.beta2)},                 {"eps", bind(c.eps)},
          {"weight_decay", bind(c.weight_decay)},   {"grad_clip", bind(c.grad_clip)},
          {"min_lr_ratio", bind(c.min_lr_ratio)},   {"lr_schedule", bind(c.lr_schedule)}};
}

ModelConfig parse_model(const json& j, std::vector<std::string>& problems) {
  ModelConfig c;
  if (j.is_object() && j.contains("kind") && j["kind"] == "vanilla") c = ModelConfig::vanilla_defaults();
  apply_fields(j, model_fields(c), "model", problems);
  return c;
}

TrainConfig parse_train(const json& j, std::vector<std::string>& problems) {
  TrainConfig c;
  apply_fields(j, train_fields(c), "train", problems);
  return c;
}

json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  std::vector<std::string> problems;
  ModelConfig c = parse_model(j, problems);
  if (problems.empty()) problems = validate(c);
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  std::vector<std::string> problems;
  TrainConfig c = parse_train(j, problems);
  if (problems.empty()) problems = validate(c);
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

ConfigBundle parse_config(const json& input, const std::vector<std::string>& overrides) {
  std::vector<std::string> problems;
  json doc = input.is_null() ? json::object() : input;
  if (!doc.is_object()) throw ConfigError({"configuration root must be a JSON object"});
  for (const auto& [key, value] : doc.items()) {
    if (key != "model" && key != "train") problems.push_back("unknown section '" + key + "'");
  }
  if (!doc.contains("model")) doc["model"] = json::object();
  if (!doc.contains("train")) doc["train"] = json::object();

  ModelConfig model_probe;
  TrainConfig train_probe;
  const auto model_keys = model_fields(model_probe);
  const auto train_keys = train_fields(train_probe);
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) {
      problems.push_back("override '" + ov + "' is not key=value");
      continue;
    }
    std::string key = ov.substr(0, eq);
    const json value = parse_override_value(ov.substr(eq + 1));
    std::string section;
    if (const auto dot = key.find('.'); dot != std::string::npos) {
      section = key.substr(0, dot);
      key = key.substr(dot + 1);
    } else {
      const bool in_model = model_keys.count(key) > 0, in_train = train_keys.count(key) > 0;
      if (in_model && in_train) {
        problems.push_back("override key '" + key + "' is ambiguous; prefix it with model. or train.");
        continue;
      }
      section = in_train ? "train" : "model";
    }
    if (section != "model" && section != "train") {
      problems.push_back("override '" + ov + "' names unknown section '" + section + "'");
      continue;
    }
    doc[section][key] = value;
  }

  ConfigBundle bundle;
  bundle.model = parse_model(doc["model"], problems);
  bundle.train = parse_train(doc["train"], problems);
  if (problems.empty()) {
    for (auto& p : validate(bundle.model)) problems.push_back(p);
    for (auto& p : validate(bundle.train)) problems.push_back(p);
  }
  if (!problems.empty()) throw ConfigError(problems);
  return bundle;
}

ConfigBundle load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file '" + path.string() + "'"});
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& ex) {
    throw ConfigError({"config file '" + path.string() + "' is not valid JSON: " + ex.what()});
  }
  return parse_config(doc, overrides);
}

void save_config(const std::filesystem::path& path, const ConfigBundle& bundle) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write config file '" + path.string() + "'");
  out << json{{"model", to_json(bundle.model)}, {"train", to_json(bundle.train)}}.dump(2) << "\n";
}

int64_t decoder_layer_params(int64_t d, bool cross) {
  // attention 4d^2 + 4d, feedforward d*4d + 4d + 4d*d + d, two norms 4d
  int64_t n = 12 * d * d + 13 * d;
  if (cross) n += 4 * d * d + 4 * d + 2 * d;
  return n;
}

int64_t stack_params(int64_t layers, int64_t dim, bool cross) {
  return layers * decoder_layer_params(dim, cross) + 2 * dim;
}

ParamCount param_count(const ModelConfig& c) {
  ParamCount pc;
  auto& b = pc.parts;
  const int64_t v = c.vocab_size;
  if (c.kind == ModelKind::vanilla) {
    b.token_decoder = stack_params(c.n_layers_token, c.model_dim, false);
    b.embeddings = v * c.model_dim;
    b.classifier = c.model_dim * v;
  } else {
    switch (c.embedder) {
      case EmbedderVariant::lookup:
        b.embeddings += v * c.lookup_dim();
        if (c.lookup_has_projection()) b.embedder = c.block_length * c.lookup_dim() * c.model_dim + c.model_dim;
        break;
      case EmbedderVariant::encoder:
        b.embeddings += v * c.encoder_dim;
        b.embedder = stack_params(c.encoder_layers, c.encoder_dim, false) +
                     c.block_length * c.encoder_dim * c.model_dim + c.model_dim;
        break;
      case EmbedderVariant::cls:
        b.embeddings += v * c.encoder_dim + c.n_cls * c.encoder_dim;
        b.embedder = stack_params(c.encoder_layers, c.encoder_dim, false) +
                     c.n_cls * c.encoder_dim * c.model_dim + c.model_dim;
        break;
    }
    b.block_decoder = stack_params(c.n_layers_block, c.model_dim, false);
    const bool cross = c.token_decoder == TokenDecoderVariant::cross_attention;
    b.token_decoder = stack_params(c.n_layers_token, c.token_dim, cross);
    const int64_t slots = c.token_decoder == TokenDecoderVariant::prefix ? c.prefix_length : c.block_length;
    b.injection = c.model_dim * slots * c.token_dim + slots * c.token_dim;
    b.embeddings += v * c.token_dim;
    b.classifier = c.token_dim * v;
  }
  pc.non_embedding = b.embedder + b.block_decoder + b.token_decoder + b.injection;
  pc.total = pc.non_embedding + b.embeddings + b.classifier;
  return pc;
}

}  // namespace blocklm
