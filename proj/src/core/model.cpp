#include "blocklm/model.hpp"

#include <fstream>
#include <optional>
#include <stdexcept>

namespace blocklm {

namespace {

// Activates the counter for one component when attribution is enabled.
class ComponentScope {
 public:
  explicit ComponentScope(MacCounter* counter) {
    if (counter) scope_.emplace(*counter);
  }

 private:
  std::optional<MacScope> scope_;
};

MacCounter* pick(ComponentMacs* macs, MacCounter ComponentMacs::*member) { return macs ? &(macs->*member) : nullptr; }

// [copies * d, d]: `copies` stacked blocks of value * I.
Tensor identity_stack(int64_t copies, int64_t d, float value) {
  Tensor t({copies * d, d});
  for (int64_t c = 0; c < copies; ++c) {
    for (int64_t i = 0; i < d; ++i) t.data()[(c * d + i) * d + i] = value;
  }
  return t;
}

// [d, copies * d]: x -> [x, x, ..., x]
Tensor replicate_map(int64_t d, int64_t copies) {
  Tensor t({d, copies * d});
  for (int64_t i = 0; i < d; ++i) {
    for (int64_t c = 0; c < copies; ++c) t.data()[i * copies * d + c * d + i] = 1.0f;
  }
  return t;
}

}  // namespace

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  if (auto problems = validate(cfg_); !problems.empty()) throw ConfigError(std::move(problems));
  build(seed);
}

void Model::build(uint64_t seed) {
  Rng rng(derive_seed(seed, "model-init"));
  const double sd = cfg_.init_std;
  const int64_t v = cfg_.vocab_size, d = cfg_.model_dim, dt = cfg_.token_dim;

  if (is_block()) {
    switch (cfg_.embedder) {
      case EmbedderVariant::lookup:
        emb_table_ = normal_tensor({v, cfg_.lookup_dim()}, rng, sd);
        params_.add("emb.table", emb_table_);
        if (cfg_.lookup_has_projection()) {
          emb_proj_ = normal_tensor({cfg_.block_length * cfg_.lookup_dim(), d}, rng, sd);
          emb_proj_b_ = Tensor({d});
          params_.add("emb.proj", emb_proj_);
          params_.add("emb.proj_b", emb_proj_b_);
        }
        break;
      case EmbedderVariant::encoder:
      case EmbedderVariant::cls: {
        const int64_t e = cfg_.encoder_dim;
        emb_table_ = normal_tensor({v, e}, rng, sd);
        params_.add("emb.table", emb_table_);
        if (cfg_.embedder == EmbedderVariant::cls) {
          cls_slots_ = normal_tensor({cfg_.n_cls, e}, rng, sd);
          params_.add("emb.cls", cls_slots_);
        }
        encoder_ = TransformerStack(cfg_.encoder_layers, e, cfg_.encoder_heads, false);
        encoder_.init(rng, sd);
        encoder_.register_params(params_, "emb.enc");
        const int64_t rows = cfg_.embedder == EmbedderVariant::cls ? cfg_.n_cls : cfg_.block_length;
        emb_proj_ = normal_tensor({rows * e, d}, rng, sd);
        emb_proj_b_ = Tensor({d});
        params_.add("emb.proj", emb_proj_);
        params_.add("emb.proj_b", emb_proj_b_);
        break;
      }
    }
    block_dec_ = TransformerStack(cfg_.n_layers_block, d, cfg_.n_heads, false);
    block_dec_.init(rng, sd);
    block_dec_.register_params(params_, "block_dec");
  }

  const bool cross = is_block() && cfg_.token_decoder == TokenDecoderVariant::cross_attention;
  tok_emb_ = normal_tensor({v, dt}, rng, sd);
  params_.add("tok_emb", tok_emb_);
  tok_dec_ = TransformerStack(cfg_.n_layers_token, dt, cfg_.n_heads, cross);
  tok_dec_.init(rng, sd);
  tok_dec_.register_params(params_, "tok_dec");

  if (is_block()) {
    const int64_t slots = cfg_.token_decoder == TokenDecoderVariant::prefix ? cfg_.prefix_length : cfg_.block_length;
    const char* name = cfg_.token_decoder == TokenDecoderVariant::prefix ? "proj.prefix"
                       : cfg_.token_decoder == TokenDecoderVariant::summation ? "proj.sum"
                                                                              : "proj.cross";
    inj_w_ = normal_tensor({d, slots * dt}, rng, sd);
    inj_b_ = Tensor({slots * dt});
    params_.add(name, inj_w_);
    params_.add(std::string(name) + "_b", inj_b_);
  }
  cls_head_ = normal_tensor({dt, v}, rng, sd);
  params_.add("cls_head", cls_head_);
}

Tensor Model::encode_blocks(std::span<const int32_t> ids, int64_t batch, int64_t n) const {
  const int64_t lb = cfg_.block_length, nb = n / lb, m = batch * nb, e = cfg_.encoder_dim;
  Tensor tokens = embedding(emb_table_, ids, {m, lb});
  if (cfg_.embedder == EmbedderVariant::encoder) {
    Tensor h = encoder_.forward(tokens, AttentionMode::bidirectional);
    return h.reshape({batch, nb, lb * e});
  }
  Tensor seq = concat_seq(expand_rows(cls_slots_, m), tokens);
  Tensor h = encoder_.forward(seq, AttentionMode::bidirectional);
  return slice_seq(h, 0, cfg_.n_cls).reshape({batch, nb, cfg_.n_cls * e});
}

Tensor Model::embed_blocks(std::span<const int32_t> ids, int64_t batch, int64_t n) const {
  if (!is_block()) throw std::logic_error("embed_blocks: vanilla model has no embedder");
  const int64_t lb = cfg_.block_length;
  if (n % lb != 0 || static_cast<int64_t>(ids.size()) != batch * n) {
    throw ShapeError("embed_blocks: " + std::to_string(ids.size()) + " ids for batch " + std::to_string(batch) +
                     " x " + std::to_string(n) + " (block length " + std::to_string(lb) + ")");
  }
  ComponentScope scope(pick(macs_, &ComponentMacs::embedder));
  Tensor flat;
  if (cfg_.embedder == EmbedderVariant::lookup) {
    flat = embedding(emb_table_, ids, {batch, n}).reshape({batch, n / lb, lb * cfg_.lookup_dim()});
    if (!cfg_.lookup_has_projection()) return flat;
  } else {
    flat = encode_blocks(ids, batch, n);
  }
  return linear(flat, emb_proj_, emb_proj_b_);
}

Tensor Model::block_decoder_forward(const Tensor& block_embs, AttentionTrace* trace) const {
  if (block_embs.dim(1) > cfg_.num_blocks()) {
    throw ShapeError("block decoder: " + std::to_string(block_embs.dim(1)) + " blocks exceed the context of " +
                     std::to_string(cfg_.num_blocks()));
  }
  ComponentScope scope(pick(macs_, &ComponentMacs::block_decoder));
  return block_dec_.forward(block_embs, AttentionMode::causal, nullptr, trace);
}

Tensor Model::inject(const Tensor& ctx) const {
  if (!is_block()) throw std::logic_error("inject: vanilla model has no context injection");
  const int64_t m = ctx.numel() / cfg_.model_dim;
  const int64_t slots = cfg_.token_decoder == TokenDecoderVariant::prefix ? cfg_.prefix_length : cfg_.block_length;
  ComponentScope scope(pick(macs_, &ComponentMacs::token_decoder));
  return linear(ctx.reshape({m, cfg_.model_dim}), inj_w_, inj_b_).reshape({m, slots, cfg_.token_dim});
}

Tensor Model::token_seed_inputs(const Tensor& inj) const {
  const int64_t m = inj.dim(0);
  if (cfg_.token_decoder == TokenDecoderVariant::prefix) return inj;
  std::vector<int32_t> bos(static_cast<size_t>(m), kBos);
  Tensor x = embedding(tok_emb_, bos, {m, 1});
  if (cfg_.token_decoder == TokenDecoderVariant::summation) x = add(x, slice_seq(inj, 0, 1));
  return x;
}

Tensor Model::token_slot_inputs(const Tensor& inj, int64_t slot, std::span<const int32_t> tokens) const {
  const int64_t m = inj.dim(0);
  Tensor x = embedding(tok_emb_, tokens, {m, 1});
  if (cfg_.token_decoder == TokenDecoderVariant::summation) x = add(x, slice_seq(inj, slot, 1));
  return x;
}

Tensor Model::classify(const Tensor& hidden) const {
  ComponentScope scope(pick(macs_, &ComponentMacs::token_decoder));
  return matmul(hidden, cls_head_);
}

Tensor Model::block_decoder_step(const Tensor& x, StackCache& cache) const {
  ComponentScope scope(pick(macs_, &ComponentMacs::block_decoder));
  return block_dec_.step(x, cache);
}

Tensor Model::token_decoder_step(const Tensor& x, StackCache& cache) const {
  ComponentScope scope(pick(macs_, &ComponentMacs::token_decoder));
  return tok_dec_.step(x, cache);
}

void Model::set_token_cross_context(StackCache& cache, const Tensor& inj) const {
  ComponentScope scope(pick(macs_, &ComponentMacs::token_decoder));
  tok_dec_.set_cross_context(cache, inj);
}

std::vector<int32_t> Model::shifted_tokens(std::span<const int32_t> tokens) const {
  const int64_t lb = cfg_.block_length;
  std::vector<int32_t> out(tokens.size());
  for (size_t r = 0; r < tokens.size() / lb; ++r) {
    out[r * lb] = kBos;
    for (int64_t j = 1; j < lb; ++j) out[r * lb + j] = tokens[r * lb + j - 1];
  }
  return out;
}

Tensor Model::token_decoder_logits(const Tensor& ctx, std::span<const int32_t> tokens, AttentionTrace* trace) const {
  if (!is_block()) throw std::logic_error("token_decoder_logits: vanilla model");
  const int64_t lb = cfg_.block_length;
  const int64_t m = ctx.numel() / cfg_.model_dim;
  if (static_cast<int64_t>(tokens.size()) != m * lb) {
    throw ShapeError("token decoder: " + std::to_string(tokens.size()) + " tokens for " + std::to_string(m) +
                     " contexts of block length " + std::to_string(lb));
  }
  Tensor inj = inject(ctx);
  ComponentScope scope(pick(macs_, &ComponentMacs::token_decoder));
  Tensor h;
  switch (cfg_.token_decoder) {
    case TokenDecoderVariant::prefix: {
      Tensor x = concat_seq(inj, embedding(tok_emb_, tokens, {m, lb}));
      h = slice_seq(tok_dec_.forward(x, AttentionMode::causal, nullptr, trace), cfg_.prefix_length - 1, lb);
      break;
    }
    case TokenDecoderVariant::summation: {
      const auto shifted = shifted_tokens(tokens);
      Tensor x = add(embedding(tok_emb_, shifted, {m, lb}), inj);
      h = tok_dec_.forward(x, AttentionMode::causal, nullptr, trace);
      break;
    }
    case TokenDecoderVariant::cross_attention: {
      const auto shifted = shifted_tokens(tokens);
      h = tok_dec_.forward(embedding(tok_emb_, shifted, {m, lb}), AttentionMode::causal, &inj, trace);
      break;
    }
  }
  return classify(h);
}

Tensor Model::vanilla_logits(std::span<const int32_t> ids, int64_t batch, int64_t t, AttentionTrace* trace) const {
  if (is_block()) throw std::logic_error("vanilla_logits: block model");
  if (t > cfg_.context_length) {
    throw ShapeError("vanilla forward: " + std::to_string(t) + " tokens exceed the context of " +
                     std::to_string(cfg_.context_length));
  }
  ComponentScope scope(pick(macs_, &ComponentMacs::token_decoder));
  Tensor x = embedding(tok_emb_, ids, {batch, t});
  return classify(tok_dec_.forward(x, AttentionMode::causal, nullptr, trace));
}

LossResult Model::lm_loss(const PackedBatch& batch) const {
  const int64_t b = batch.batch, len = batch.length, v = cfg_.vocab_size;
  LossResult out;
  std::vector<int32_t> targets;
  std::vector<uint8_t> mask;
  Tensor logits;
  int64_t lb = 1;
  if (is_block()) {
    lb = cfg_.block_length;
    const int64_t nb = len / lb;
    if (nb < 2) throw std::invalid_argument("lm_loss: a row needs at least two blocks");
    Tensor ctx = slice_seq(block_decoder_forward(embed_blocks(batch.ids, b, len)), 0, nb - 1);
    for (int64_t r = 0; r < b; ++r) {
      targets.insert(targets.end(), batch.ids.begin() + r * len + lb, batch.ids.begin() + (r + 1) * len);
      mask.insert(mask.end(), batch.loss_mask.begin() + r * len + lb, batch.loss_mask.begin() + (r + 1) * len);
    }
    logits = token_decoder_logits(ctx, targets);
  } else {
    logits = slice_seq(vanilla_logits(batch.ids, b, len), 0, len - 1);
    for (int64_t r = 0; r < b; ++r) {
      targets.insert(targets.end(), batch.ids.begin() + r * len + 1, batch.ids.begin() + (r + 1) * len);
      mask.insert(mask.end(), batch.loss_mask.begin() + r * len + 1, batch.loss_mask.begin() + (r + 1) * len);
    }
  }
  CrossEntropy ce = cross_entropy(logits.reshape({static_cast<int64_t>(targets.size()), v}), targets, mask);
  out.loss = ce.loss;
  out.mean = ce.loss.item();
  out.count = ce.count;
  out.row_loss = std::move(ce.row_loss);
  if (is_block()) {
    out.position_sum.assign(static_cast<size_t>(lb), 0.0);
    out.position_count.assign(static_cast<size_t>(lb), 0);
    for (size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      out.position_sum[i % lb] += out.row_loss[i];
      ++out.position_count[i % lb];
    }
  }
  return out;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  TensorFile f = model.params().to_file();
  f.metadata["model_config"] = to_json(model.config());
  save_tensors(path, f);
  std::ofstream sidecar(path.string() + ".json");
  sidecar << to_json(model.config()).dump(2) << "\n";
  if (!sidecar) throw std::runtime_error("cannot write " + path.string() + ".json");
}

ModelConfig checkpoint_config(const std::filesystem::path& path) {
  TensorFile f = load_tensors(path);
  if (!f.metadata.contains("model_config")) {
    throw std::runtime_error(path.string() + ": checkpoint has no embedded model_config");
  }
  return model_config_from_json(f.metadata["model_config"]);
}

Model load_checkpoint(const std::filesystem::path& path) {
  TensorFile f = load_tensors(path);
  if (!f.metadata.contains("model_config")) {
    throw std::runtime_error(path.string() + ": checkpoint has no embedded model_config");
  }
  Model model(model_config_from_json(f.metadata["model_config"]), 0);
  model.params().load(f);
  return model;
}

Model init_from_vanilla(const Model& vanilla, const ModelConfig& cfg, uint64_t seed) {
  const ModelConfig& vc = vanilla.config();
  std::vector<std::string> problems;
  if (vc.kind != ModelKind::vanilla) problems.push_back("source checkpoint is not a vanilla model");
  if (cfg.kind != ModelKind::block) problems.push_back("target config is not a block model");
  if (vc.n_layers_token % 2 != 0) {
    problems.push_back("vanilla layer count " + std::to_string(vc.n_layers_token) + " is odd");
  }
  const int64_t half = vc.n_layers_token / 2;
  if (cfg.n_layers_block != half || cfg.n_layers_token != half) {
    problems.push_back("block config has " + std::to_string(cfg.n_layers_block) + "+" +
                       std::to_string(cfg.n_layers_token) + " layers, expected " + std::to_string(half) + "+" +
                       std::to_string(half));
  }
  if (cfg.model_dim != vc.model_dim) {
    problems.push_back("model_dim " + std::to_string(cfg.model_dim) + " != vanilla " + std::to_string(vc.model_dim));
  }
  if (cfg.token_dim != vc.model_dim) {
    problems.push_back("token_dim " + std::to_string(cfg.token_dim) + " != vanilla " + std::to_string(vc.model_dim));
  }
  if (cfg.n_heads != vc.n_heads) {
    problems.push_back("n_heads " + std::to_string(cfg.n_heads) + " != vanilla " + std::to_string(vc.n_heads));
  }
  if (cfg.vocab_size != vc.vocab_size) {
    problems.push_back("vocab_size " + std::to_string(cfg.vocab_size) + " != vanilla " + std::to_string(vc.vocab_size));
  }
  if (cfg.embedder != EmbedderVariant::lookup) problems.push_back("embedder must be lookup");
  if (cfg.lookup_dim() != vc.model_dim) {
    problems.push_back("embed_dim " + std::to_string(cfg.lookup_dim()) + " != vanilla model_dim " +
                       std::to_string(vc.model_dim));
  }
  if (cfg.token_decoder == TokenDecoderVariant::cross_attention) {
    problems.push_back("token_decoder must be prefix or summation");
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));

  Model block(cfg, seed);
  const int64_t d = cfg.model_dim;
  auto copy = [](const Tensor& from, Tensor& to) {
    if (from.shape() != to.shape()) throw ShapeError("uptraining copy: " + shape_str(from.shape()) + " vs " + shape_str(to.shape()));
    std::copy(from.values().begin(), from.values().end(), to.values().begin());
  };
  const ParamList& src = vanilla.params();
  ParamList& dst = block.params();
  for (const auto& [name, t] : src.items()) {
    const std::string layer_prefix = "tok_dec.layer";
    if (name.rfind(layer_prefix, 0) == 0) {
      const size_t dot = name.find('.', layer_prefix.size());
      const int64_t i = std::stoll(name.substr(layer_prefix.size(), dot - layer_prefix.size()));
      const std::string rest = name.substr(dot);
      const std::string target = i < half ? "block_dec.layer" + std::to_string(i) + rest
                                          : "tok_dec.layer" + std::to_string(i - half) + rest;
      copy(t, dst.at(target));
    } else if (name == "tok_dec.ln_f.g" || name == "tok_dec.ln_f.b" || name == "tok_emb" || name == "cls_head") {
      copy(t, dst.at(name));
    }
  }
  copy(src.at("tok_emb"), dst.at("emb.table"));
  if (cfg.lookup_has_projection()) {
    copy(identity_stack(cfg.block_length, d, 1.0f / static_cast<float>(cfg.block_length)), dst.at("emb.proj"));
    std::fill(dst.at("emb.proj_b").values().begin(), dst.at("emb.proj_b").values().end(), 0.0f);
  }
  const bool prefix = cfg.token_decoder == TokenDecoderVariant::prefix;
  const std::string inj = prefix ? "proj.prefix" : "proj.sum";
  copy(replicate_map(d, prefix ? cfg.prefix_length : cfg.block_length), dst.at(inj));
  std::fill(dst.at(inj + "_b").values().begin(), dst.at(inj + "_b").values().end(), 0.0f);
  return block;
}

}  // namespace blocklm
