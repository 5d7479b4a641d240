#include "doctest.h"

#include <cmath>

#include "blocklm/config.hpp"
#include "blocklm/params.hpp"
#include "blocklm/transformer.hpp"

using namespace blocklm;

namespace {

TransformerStack make_stack(int64_t layers, int64_t dim, int64_t heads, bool cross, uint64_t seed) {
  TransformerStack s(layers, dim, heads, cross);
  Rng rng(seed);
  s.init(rng, 0.2);
  return s;
}

Tensor random_input(Shape shape, uint64_t seed) {
  Rng rng(seed);
  return normal_tensor(std::move(shape), rng, 1.0);
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  float m = 0.0f;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("causal outputs before a perturbed position are bit-unchanged") {
  const auto stack = make_stack(2, 16, 2, false, 1);
  Tensor x = random_input({2, 8, 16}, 2);
  NoGradGuard g;
  const Tensor base = stack.forward(x, AttentionMode::causal);
  for (int64_t t : {0, 3, 7}) {
    Tensor y = x.detach();
    for (int64_t b = 0; b < 2; ++b) y.values()[(b * 8 + t) * 16 + 5] += 1.0f;
    const Tensor out = stack.forward(y, AttentionMode::causal);
    for (int64_t b = 0; b < 2; ++b) {
      for (int64_t p = 0; p < 8; ++p) {
        const auto a = base.values().subspan((b * 8 + p) * 16, 16);
        const auto c = out.values().subspan((b * 8 + p) * 16, 16);
        if (p < t) {
          CHECK(std::equal(a.begin(), a.end(), c.begin()));
        } else if (p == t) {
          CHECK(max_abs_diff(a, c) > 0.0f);
        }
      }
    }
  }
}

TEST_CASE("bidirectional mode propagates position 0 to the last position") {
  const auto stack = make_stack(1, 16, 2, false, 3);
  Tensor x = random_input({1, 6, 16}, 4);
  NoGradGuard g;
  const Tensor base = stack.forward(x, AttentionMode::bidirectional);
  Tensor y = x.detach();
  y.values()[0] += 1.0f;
  const Tensor out = stack.forward(y, AttentionMode::bidirectional);
  CHECK(max_abs_diff(base.values().subspan(5 * 16, 16), out.values().subspan(5 * 16, 16)) > 1e-6f);
}

TEST_CASE("single-position causal forward is well defined") {
  const auto stack = make_stack(2, 16, 4, false, 5);
  NoGradGuard g;
  const Tensor out = stack.forward(random_input({3, 1, 16}, 6), AttentionMode::causal);
  CHECK(out.shape() == Shape{3, 1, 16});
  for (float v : out.values()) CHECK(std::isfinite(v));
}

TEST_CASE("incremental steps equal a full forward") {
  for (bool cross : {false, true}) {
    CAPTURE(cross);
    const auto stack = make_stack(2, 16, 2, cross, 7);
    Tensor x = random_input({2, 16, 16}, 8);
    Tensor ctx = random_input({2, 3, 16}, 9);
    NoGradGuard g;
    const Tensor full = stack.forward(x, AttentionMode::causal, cross ? &ctx : nullptr);
    StackCache cache = stack.make_cache(2, 16);
    if (cross) stack.set_cross_context(cache, ctx);
    float worst = 0.0f;
    for (int64_t t = 0; t < 16; ++t) {
      Tensor xt({2, 1, 16});
      for (int64_t b = 0; b < 2; ++b) {
        std::copy_n(x.values().begin() + (b * 16 + t) * 16, 16, xt.values().begin() + b * 16);
      }
      const Tensor out = stack.step(xt, cache);
      CHECK(cache.length() == t + 1);
      for (int64_t b = 0; b < 2; ++b) {
        worst = std::max(worst, max_abs_diff(out.values().subspan(b * 16, 16), full.values().subspan((b * 16 + t) * 16, 16)));
      }
    }
    CHECK(worst < 1e-4f);
  }
}

TEST_CASE("a multi-position step continues rotary positions from the cache length") {
  const auto stack = make_stack(2, 16, 2, false, 10);
  Tensor x = random_input({1, 10, 16}, 11);
  NoGradGuard g;
  const Tensor full = stack.forward(x, AttentionMode::causal);
  StackCache cache = stack.make_cache(1, 10);
  Tensor head({1, 4, 16}, std::vector<float>(x.values().begin(), x.values().begin() + 64));
  Tensor tail({1, 6, 16}, std::vector<float>(x.values().begin() + 64, x.values().end()));
  stack.step(head, cache);
  const Tensor out = stack.step(tail, cache);
  CHECK(max_abs_diff(out.values(), full.values().subspan(64)) < 1e-4f);
}

TEST_CASE("an empty cache plus one input equals a T=1 forward") {
  const auto stack = make_stack(1, 16, 2, false, 12);
  Tensor x = random_input({1, 1, 16}, 13);
  NoGradGuard g;
  StackCache cache = stack.make_cache(1, 4);
  CHECK(max_abs_diff(stack.step(x, cache).values(), stack.forward(x, AttentionMode::causal).values()) < 1e-6f);
}

TEST_CASE("stepping past capacity throws") {
  const auto stack = make_stack(1, 16, 2, false, 14);
  StackCache cache = stack.make_cache(1, 2);
  NoGradGuard g;
  stack.step(random_input({1, 2, 16}, 15), cache);
  CHECK_THROWS_AS(stack.step(random_input({1, 1, 16}, 16), cache), CapacityError);
  cache.reset();
  CHECK(cache.length() == 0);
  CHECK_NOTHROW(stack.step(random_input({1, 1, 16}, 17), cache));
}

TEST_CASE("cross context on a stack without cross weights is an error") {
  const auto stack = make_stack(1, 16, 2, false, 18);
  Tensor ctx = random_input({1, 2, 16}, 19);
  NoGradGuard g;
  CHECK_THROWS(stack.forward(random_input({1, 3, 16}, 20), AttentionMode::causal, &ctx));
  const auto cross = make_stack(1, 16, 2, true, 21);
  CHECK_THROWS(cross.forward(random_input({1, 3, 16}, 22), AttentionMode::causal));
}

TEST_CASE("attention traces are row-stochastic with exact causal zeros") {
  const auto stack = make_stack(2, 16, 2, false, 23);
  AttentionTrace trace;
  NoGradGuard g;
  stack.forward(random_input({1, 6, 16}, 24), AttentionMode::causal, nullptr, &trace);
  REQUIRE(trace.layers.size() == 2);
  for (const auto& p : trace.layers) {
    const int64_t t = p.shape[3];
    for (size_t row = 0; row < p.values.size() / t; ++row) {
      const int64_t i = static_cast<int64_t>(row) % p.shape[2];
      double total = 0.0;
      for (int64_t j = 0; j < t; ++j) {
        total += p.values[row * t + j];
        if (j > i) CHECK(p.values[row * t + j] == 0.0f);
      }
      CHECK(std::abs(total - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("registered parameters match the per-layer count") {
  for (bool cross : {false, true}) {
    auto stack = make_stack(3, 16, 2, cross, 25);
    ParamList params;
    stack.register_params(params, "s");
    CHECK(params.element_count() == stack_params(3, 16, cross));
    CHECK(params.find("s.layer0.attn.q") != nullptr);
    CHECK(params.find("s.ln_f.g") != nullptr);
    CHECK((params.find("s.layer2.xattn.q") != nullptr) == cross);
  }
}
