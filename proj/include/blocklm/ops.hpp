#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "blocklm/tensor.hpp"

namespace blocklm {

// [..., K] x [K, N] -> [..., N]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [..., in] · w [in, out] (+ bias [out])
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor sum(const Tensor& a);

// Softmax over the last axis.
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

// Row gather: out[i, :] = table[ids[i], :]; output shape is ids_shape + [d].
Tensor embedding(const Tensor& table, std::span<const int32_t> ids, const Shape& ids_shape);

// cos/sin tables for the half-split (NeoX) rotary scheme: the pair
// (i, i + head_dim/2) of a vector at position p is rotated by
// p * base^(-2i/head_dim).
struct RotaryTable {
  int head_dim = 0;
  int64_t offset = 0;
  int64_t length = 0;
  std::vector<float> cos;  // [length, head_dim/2]
  std::vector<float> sin;
};

RotaryTable make_rotary_table(int head_dim, int64_t offset, int64_t length, float base = 10000.0f);
// x [B, H, T, head_dim] with T == table.length.
Tensor rotary(const Tensor& x, const RotaryTable& table);

enum class AttentionMask { causal, full };

// Optional capture of attention probabilities [B, H, Tq, Tk].
struct AttentionProbs {
  Shape shape;
  std::vector<float> values;
};

// Scaled dot-product attention; q [B, H, Tq, d], k/v [B, H, Tk, d].
// Causal mode aligns the last query with the last key: query i may attend
// keys j <= i + (Tk - Tq).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, AttentionMask mask,
                 AttentionProbs* record = nullptr);

// [B, T, H*d] <-> [B, H, T, d]
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x);

// Sequence-axis helpers on [M, T, d] tensors.
Tensor concat_seq(const Tensor& a, const Tensor& b);
Tensor slice_seq(const Tensor& x, int64_t start, int64_t length);
// [P, d] -> [M, P, d]; gradient sums over M.
Tensor expand_rows(const Tensor& rows, int64_t m);

struct CrossEntropy {
  Tensor loss;                   // scalar mean over unmasked rows
  std::vector<float> row_loss;   // per-row loss, 0 where masked out
  int64_t count = 0;             // unmasked rows
};

// logits [N, V]; mask entries of 0 exclude a row. Throws if every row is masked.
CrossEntropy cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                           std::span<const uint8_t> mask);

}  // namespace blocklm
