#include "doctest.h"

#include <cmath>
#include <cstring>

#include "blocklm/model.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace blocklm;

namespace {

ModelConfig tiny_block(int64_t lb = 4, int64_t p = 2) {
  ModelConfig c;
  c.context_length = 32;
  c.block_length = lb;
  c.prefix_length = p;
  c.model_dim = 16;
  c.token_dim = 16;
  c.n_layers_block = 2;
  c.n_layers_token = 2;
  c.n_heads = 2;
  c.encoder_dim = 16;
  c.encoder_layers = 1;
  c.encoder_heads = 2;
  return c;
}

ModelConfig tiny_vanilla(int64_t layers = 2) {
  ModelConfig c = ModelConfig::vanilla_defaults();
  c.context_length = 32;
  c.model_dim = 16;
  c.token_dim = 16;
  c.n_layers_token = layers;
  c.n_heads = 2;
  return c;
}

PackedBatch random_batch(const ModelConfig& c, int64_t batch, uint64_t seed, bool with_pads = true) {
  PackedBatch b;
  b.batch = batch;
  b.length = c.context_length;
  Rng rng(seed);
  std::uniform_int_distribution<int32_t> byte(0, 255);
  for (int64_t i = 0; i < b.tokens(); ++i) {
    const int64_t pos = i % b.length;
    const bool pad = with_pads && pos >= c.block_length && pos < 2 * c.block_length && pos % 2 == 1;
    b.ids.push_back(pad ? kPad : byte(rng));
    b.doc_start.push_back(pos == 0);
    b.loss_mask.push_back(!pad && pos >= c.block_length);
  }
  return b;
}

bool bit_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

double log_softmax_at(std::span<const float> row, int32_t target) {
  double mx = -1e30;
  for (float v : row) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (float v : row) z += std::exp(v - mx);
  return row[target] - mx - std::log(z);
}

}  // namespace

TEST_CASE("L_B=1 lookup embeddings equal the table rows") {
  ModelConfig c = tiny_block(1, 1);
  Model m(c, 1);
  const std::vector<int32_t> ids = {3, 250, 7};
  NoGradGuard g;
  const Tensor e = m.embed_blocks(ids, 1, 3);
  const Tensor& table = m.params().at("emb.table");
  for (int i = 0; i < 3; ++i) {
    CHECK(bit_equal(e.values().subspan(i * 16, 16), table.values().subspan(ids[i] * 16, 16)));
  }
}

TEST_CASE("lookup width is D / L_B") {
  ModelConfig c;
  c.model_dim = 1024;
  c.block_length = 4;
  CHECK(c.lookup_dim() == 256);
  CHECK_FALSE(c.lookup_has_projection());
}

TEST_CASE("block embeddings depend only on their own block") {
  for (auto emb : {EmbedderVariant::lookup, EmbedderVariant::encoder, EmbedderVariant::cls}) {
    CAPTURE(to_string(emb));
    ModelConfig c = tiny_block();
    c.embedder = emb;
    Model m(c, 2);
    std::vector<int32_t> a = testing::random_prompt(16, 3), b = testing::random_prompt(16, 4);
    std::copy_n(a.begin() + 8, 4, b.begin() + 8);
    NoGradGuard g;
    const Tensor ea = m.embed_blocks(a, 1, 16), eb = m.embed_blocks(b, 1, 16);
    CHECK(bit_equal(ea.values().subspan(2 * 16, 16), eb.values().subspan(2 * 16, 16)));
    CHECK_FALSE(bit_equal(ea.values().subspan(0, 16), eb.values().subspan(0, 16)));
  }
}

TEST_CASE("out-of-range ids are rejected by the embedder") {
  Model m(tiny_block(), 1);
  NoGradGuard g;
  CHECK_THROWS(m.embed_blocks(std::vector<int32_t>{1, 2, 3, 259}, 1, 4));
}

TEST_CASE("editing block j leaves the contexts for blocks up to j unchanged") {
  Model m(tiny_block(), 5);
  const auto a = testing::random_prompt(32, 6);
  NoGradGuard g;
  const Tensor base = m.block_decoder_forward(m.embed_blocks(a, 1, 32));
  CHECK(base.shape() == Shape{1, 8, 16});
  for (int64_t j : {0, 3, 7}) {
    auto b = a;
    b[j * 4 + 1] = (b[j * 4 + 1] + 1) % 256;
    const Tensor out = m.block_decoder_forward(m.embed_blocks(b, 1, 32));
    CHECK(bit_equal(base.values().subspan(0, j * 16), out.values().subspan(0, j * 16)));
    CHECK_FALSE(bit_equal(base.values().subspan(j * 16, 16), out.values().subspan(j * 16, 16)));
  }
}

TEST_CASE("one block in gives one context out") {
  Model m(tiny_block(), 5);
  NoGradGuard g;
  CHECK(m.block_decoder_forward(m.embed_blocks(testing::random_prompt(4, 1), 1, 4)).shape() == Shape{1, 1, 16});
  ModelConfig big;
  big.context_length = 2048;
  big.block_length = 4;
  CHECK(big.num_blocks() == 512);
}

TEST_CASE("token-decoder slot layout") {
  SUBCASE("P=2, L_B=4: six slots, logits from slots 1..4") {
    ModelConfig c = tiny_block(4, 2);
    CHECK(c.token_seq_len() == 6);
    CHECK(c.first_logit_slot() == 1);
    Model m(c, 7);
    Rng rng(8);
    Tensor ctx = normal_tensor({1, 16}, rng, 1.0);
    const std::vector<int32_t> toks = {10, 20, 30, 40};
    NoGradGuard g;
    const Tensor base = m.token_decoder_logits(ctx, toks);
    CHECK(base.shape() == Shape{1, 4, 259});
    // logits for t_j see t_0..t_{j-1} only
    for (int j = 0; j < 4; ++j) {
      auto edited = toks;
      edited[j] = 99;
      const Tensor out = m.token_decoder_logits(ctx, edited);
      for (int q = 0; q < 4; ++q) {
        const bool same = bit_equal(base.values().subspan(q * 259, 259), out.values().subspan(q * 259, 259));
        CHECK(same == (q <= j));
      }
    }
  }
  SUBCASE("P=1, L_B=1: one prediction from the prefix slot") {
    ModelConfig c = tiny_block(1, 1);
    CHECK(c.token_seq_len() == 2);
    CHECK(c.first_logit_slot() == 0);
    Model m(c, 9);
    Rng rng(10);
    Tensor ctx = normal_tensor({2, 16}, rng, 1.0);
    NoGradGuard g;
    const Tensor a = m.token_decoder_logits(ctx, std::vector<int32_t>{1, 2});
    const Tensor b = m.token_decoder_logits(ctx, std::vector<int32_t>{200, 201});
    CHECK(a.shape() == Shape{2, 1, 259});
    CHECK(bit_equal(a.values(), b.values()));
  }
}

TEST_CASE("with a zero context the first prefix logits depend only on the projection bias") {
  Model m(tiny_block(), 11);
  Tensor zero = Tensor::full({1, 16}, 0.0f);
  const std::vector<int32_t> toks = {1, 2, 3, 4};
  Tensor base, scrambled, biased;
  NoGradGuard g;
  base = m.token_decoder_logits(zero, toks);
  for (float& w : m.params().at("proj.prefix").values()) w = -w * 3.0f + 0.5f;
  scrambled = m.token_decoder_logits(zero, toks);
  CHECK(bit_equal(base.values().subspan(0, 259), scrambled.values().subspan(0, 259)));
  m.params().at("proj.prefix_b").values()[0] += 1.0f;
  biased = m.token_decoder_logits(zero, toks);
  CHECK_FALSE(bit_equal(base.values().subspan(0, 259), biased.values().subspan(0, 259)));
}

TEST_CASE("uniform logits give loss ln V") {
  for (bool vanilla : {false, true}) {
    Model m(vanilla ? tiny_vanilla() : tiny_block(), 12);
    for (float& w : m.params().at("cls_head").values()) w = 0.0f;
    NoGradGuard g;
    const LossResult r = m.lm_loss(random_batch(m.config(), 2, 13));
    CHECK(r.mean == doctest::Approx(std::log(259.0)).epsilon(1e-6));
  }
  Model fresh(tiny_block(), 14);
  NoGradGuard g;
  CHECK(fresh.lm_loss(random_batch(fresh.config(), 2, 15)).mean == doctest::Approx(std::log(259.0)).epsilon(0.01));
}

TEST_CASE("lm_loss matches a handwritten cross-entropy oracle") {
  SUBCASE("vanilla") {
    Model m(tiny_vanilla(), 16);
    const PackedBatch b = random_batch(m.config(), 2, 17, false);
    NoGradGuard g;
    const LossResult r = m.lm_loss(b);
    const Tensor logits = m.vanilla_logits(b.ids, 2, 32);
    double total = 0.0;
    int64_t n = 0;
    for (int64_t row = 0; row < 2; ++row) {
      for (int64_t t = 1; t < 32; ++t) {
        if (!b.loss_mask[row * 32 + t]) continue;
        total -= log_softmax_at(logits.values().subspan((row * 32 + t - 1) * 259, 259), b.ids[row * 32 + t]);
        ++n;
      }
    }
    CHECK(r.count == n);
    CHECK(r.mean == doctest::Approx(total / n).epsilon(1e-6));
  }
  SUBCASE("block, L_B=1, P=1") {
    Model m(tiny_block(1, 1), 18);
    const PackedBatch b = random_batch(m.config(), 2, 19, false);
    NoGradGuard g;
    const LossResult r = m.lm_loss(b);
    const Tensor ctx = m.block_decoder_forward(m.embed_blocks(b.ids, 2, 32));
    double total = 0.0;
    int64_t n = 0;
    for (int64_t row = 0; row < 2; ++row) {
      for (int64_t t = 1; t < 32; ++t) {
        if (!b.loss_mask[row * 32 + t]) continue;
        Tensor c({1, 16}, std::vector<float>(ctx.values().begin() + (row * 32 + t - 1) * 16,
                                              ctx.values().begin() + (row * 32 + t) * 16));
        const Tensor l = m.token_decoder_logits(c, std::vector<int32_t>{b.ids[row * 32 + t]});
        total -= log_softmax_at(l.values(), b.ids[row * 32 + t]);
        ++n;
      }
    }
    CHECK(r.count == n);
    CHECK(r.mean == doctest::Approx(total / n).epsilon(1e-6));
  }
  SUBCASE("block, L_B=4 position sums average back to the mean") {
    Model m(tiny_block(), 20);
    NoGradGuard g;
    const LossResult r = m.lm_loss(random_batch(m.config(), 3, 21));
    REQUIRE(r.position_sum.size() == 4);
    double total = 0.0;
    int64_t n = 0;
    for (int j = 0; j < 4; ++j) {
      total += r.position_sum[j];
      n += r.position_count[j];
    }
    CHECK(n == r.count);
    CHECK(total / n == doctest::Approx(r.mean).epsilon(1e-6));
  }
}

TEST_CASE("PAD positions contribute nothing") {
  Model m(tiny_vanilla(), 22);
  const PackedBatch b = random_batch(m.config(), 2, 23);
  NoGradGuard g;
  const LossResult r = m.lm_loss(b);
  for (int64_t row = 0; row < 2; ++row) {
    for (int64_t t = 1; t < 32; ++t) {
      if (b.ids[row * 32 + t] == kPad) CHECK(r.row_loss[row * 31 + t - 1] == 0.0f);
    }
  }
  // perturbing the logits of PAD targets leaves the loss bit-identical
  Tensor logits = m.vanilla_logits(b.ids, 2, 32);
  std::vector<int32_t> targets;
  std::vector<uint8_t> mask;
  std::vector<float> rows;
  for (int64_t row = 0; row < 2; ++row) {
    for (int64_t t = 1; t < 32; ++t) {
      targets.push_back(b.ids[row * 32 + t]);
      mask.push_back(b.loss_mask[row * 32 + t]);
      const auto l = logits.values().subspan((row * 32 + t - 1) * 259, 259);
      rows.insert(rows.end(), l.begin(), l.end());
    }
  }
  Tensor clean({62, 259}, rows);
  for (size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) {
      for (int v = 0; v < 259; ++v) rows[i * 259 + v] += static_cast<float>((v * 7919 + i) % 13) - 6.0f;
    }
  }
  Tensor dirty({62, 259}, rows);
  CHECK(cross_entropy(clean, targets, mask).loss.item() == cross_entropy(dirty, targets, mask).loss.item());
  CHECK(cross_entropy(clean, targets, mask).loss.item() == doctest::Approx(r.mean).epsilon(1e-6));
}

TEST_CASE("an all-masked batch is an error") {
  Model m(tiny_block(), 24);
  PackedBatch b = random_batch(m.config(), 1, 25);
  std::fill(b.loss_mask.begin(), b.loss_mask.end(), 0);
  CHECK_THROWS(m.lm_loss(b));
}

TEST_CASE("every parameter receives gradient") {
  for (auto emb : {EmbedderVariant::lookup, EmbedderVariant::encoder, EmbedderVariant::cls}) {
    for (auto dec : {TokenDecoderVariant::prefix, TokenDecoderVariant::summation, TokenDecoderVariant::cross_attention}) {
      ModelConfig c = tiny_block();
      c.embedder = emb;
      c.token_decoder = dec;
      c.init_std = 0.2;
      Model m(c, 26);
      backward(m.lm_loss(random_batch(c, 2, 27, false)).loss);
      for (const auto& [name, t] : m.params().items()) {
        CAPTURE(to_string(emb));
        CAPTURE(to_string(dec));
        CAPTURE(name);
        double norm = 0.0;
        for (float gv : t.grad()) norm += std::abs(gv);
        CHECK(norm > 0.0);
      }
    }
  }
}

TEST_CASE("full-model gradient matches central differences") {
  ModelConfig c = tiny_block();
  c.context_length = 16;
  c.init_std = 0.3;
  Model m(c, 28);
  const PackedBatch b = random_batch(c, 1, 29, false);
  std::vector<Tensor*> leaves;
  for (auto& [name, t] : m.params().items()) leaves.push_back(&t);
  const double err = testing::gradient_check([&] { return m.lm_loss(b).loss; }, leaves, 1e-3f, 8);
  CHECK(err < 1e-2);

  Model v(tiny_vanilla(), 30);
  const PackedBatch vb = random_batch(v.config(), 1, 31, false);
  std::vector<Tensor*> vleaves;
  for (auto& [name, t] : v.params().items()) vleaves.push_back(&t);
  CHECK(testing::gradient_check([&] { return v.lm_loss(vb).loss; }, vleaves, 1e-3f, 8) < 1e-2);
}

TEST_CASE("uptraining initialization") {
  Model vanilla(tiny_vanilla(2), 32);
  ModelConfig bc = tiny_block();
  bc.n_layers_block = 1;
  bc.n_layers_token = 1;
  bc.embed_dim = 16;
  Model block = init_from_vanilla(vanilla, bc, 33);

  SUBCASE("layers split in half") {
    const auto& vp = vanilla.params();
    const auto& bp = block.params();
    CHECK(bit_equal(vp.at("tok_dec.layer0.attn.q").values(), bp.at("block_dec.layer0.attn.q").values()));
    CHECK(bit_equal(vp.at("tok_dec.layer1.mlp.down").values(), bp.at("tok_dec.layer0.mlp.down").values()));
    CHECK(bit_equal(vp.at("tok_emb").values(), bp.at("tok_emb").values()));
    CHECK(bit_equal(vp.at("cls_head").values(), bp.at("cls_head").values()));
  }
  SUBCASE("block embedding is the mean of the token embeddings") {
    const std::vector<int32_t> ids = {5, 77, 130, 255};
    NoGradGuard g;
    const Tensor e = block.embed_blocks(ids, 1, 4);
    const Tensor& table = vanilla.params().at("tok_emb");
    double worst = 0.0;
    for (int d = 0; d < 16; ++d) {
      double mean = 0.0;
      for (int32_t id : ids) mean += table.values()[id * 16 + d];
      worst = std::max(worst, std::abs(mean / 4.0 - e.values()[d]));
    }
    CHECK(worst < 1e-6);
  }
  SUBCASE("every prefix slot starts as the context") {
    Rng rng(34);
    Tensor ctx = normal_tensor({2, 16}, rng, 1.0);
    NoGradGuard g;
    const Tensor inj = block.inject(ctx);
    CHECK(inj.shape() == Shape{2, 2, 16});
    for (int64_t b = 0; b < 2; ++b) {
      for (int64_t s = 0; s < 2; ++s) {
        CHECK(bit_equal(inj.values().subspan((b * 2 + s) * 16, 16), ctx.values().subspan(b * 16, 16)));
      }
    }
  }
  SUBCASE("a 24-layer vanilla model splits 12 + 12") {
    Model deep(tiny_vanilla(24), 35);
    ModelConfig dc = bc;
    dc.n_layers_block = 12;
    dc.n_layers_token = 12;
    Model split = init_from_vanilla(deep, dc, 36);
    CHECK(bit_equal(deep.params().at("tok_dec.layer11.attn.o").values(),
                    split.params().at("block_dec.layer11.attn.o").values()));
    CHECK(bit_equal(deep.params().at("tok_dec.layer12.attn.o").values(),
                    split.params().at("tok_dec.layer0.attn.o").values()));
  }
  SUBCASE("incompatible shapes list every mismatch") {
    ModelConfig bad = bc;
    bad.model_dim = bad.token_dim = 32;
    bad.n_layers_block = 2;
    try {
      init_from_vanilla(vanilla, bad, 37);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.problems().size() >= 2);
    }
    Model odd(tiny_vanilla(3), 38);
    CHECK_THROWS_AS(init_from_vanilla(odd, bc, 39), ConfigError);
  }
}

TEST_CASE("models are deterministic per seed") {
  Model a(tiny_block(), 40), b(tiny_block(), 40), c(tiny_block(), 41);
  CHECK(bit_equal(a.params().at("tok_emb").values(), b.params().at("tok_emb").values()));
  CHECK_FALSE(bit_equal(a.params().at("tok_emb").values(), c.params().at("tok_emb").values()));
}
