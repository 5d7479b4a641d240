#include "blocklm/transformer.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "blocklm/params.hpp"

namespace blocklm {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

AttentionMask to_mask(AttentionMode mode) {
  return mode == AttentionMode::causal ? AttentionMask::causal : AttentionMask::full;
}

}  // namespace

LayerKVState::LayerKVState(int64_t batch, int64_t heads, int64_t head_dim, int64_t capacity)
    : batch_(batch), heads_(heads), head_dim_(head_dim), capacity_(capacity) {
  const auto n = static_cast<size_t>(batch * heads * capacity * head_dim);
  k_.assign(n, 0.0f);
  v_.assign(n, 0.0f);
}

void LayerKVState::append(const Tensor& k, const Tensor& v) {
  const Shape expect{batch_, heads_, k.rank() == 4 ? k.dim(2) : -1, head_dim_};
  if (k.shape() != expect || v.shape() != k.shape()) {
    throw ShapeError("kv append: k" + shape_str(k.shape()) + " v" + shape_str(v.shape()) +
                     " do not match cache [" + std::to_string(batch_) + "," + std::to_string(heads_) + ",T," +
                     std::to_string(head_dim_) + "]");
  }
  const int64_t t = k.dim(2);
  if (length_ + t > capacity_) {
    throw CapacityError("kv cache capacity exceeded: " + std::to_string(length_) + " + " + std::to_string(t) + " > " +
                        std::to_string(capacity_));
  }
  for (int64_t bh = 0; bh < batch_ * heads_; ++bh) {
    std::copy_n(k.data() + bh * t * head_dim_, t * head_dim_, k_.data() + (bh * capacity_ + length_) * head_dim_);
    std::copy_n(v.data() + bh * t * head_dim_, t * head_dim_, v_.data() + (bh * capacity_ + length_) * head_dim_);
  }
  length_ += t;
}

void StackCache::reset() {
  for (auto& l : layers) l.reset();
  cross_k.clear();
  cross_v.clear();
  cross_len = 0;
}

RotaryTable rotary_positions(int64_t head_dim, int64_t offset, int64_t length) {
  return make_rotary_table(static_cast<int>(head_dim), offset, length);
}

Tensor attend_cached(const Tensor& q, const LayerKVState& kv) {
  const int64_t bsz = q.dim(0), heads = q.dim(1), t = q.dim(2), d = q.dim(3);
  const int64_t len = kv.length();
  if (bsz != kv.batch() || t > len) {
    throw ShapeError("attend_cached: q" + shape_str(q.shape()) + " against cache of length " + std::to_string(len));
  }
  const float sc = 1.0f / std::sqrt(static_cast<float>(d));
  Tensor out(q.shape());
  RowMat scores(t, len);
  uint64_t macs = 0;
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t bh = b * heads + h;
      ConstMatMap qm(q.data() + bh * t * d, t, d);
      ConstMatMap km(kv.keys(b, h), len, d);
      ConstMatMap vm(kv.vals(b, h), len, d);
      scores.noalias() = (qm * km.transpose()) * sc;
      for (int64_t i = 0; i < t; ++i) {
        const int64_t limit = len - t + i;
        float mx = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j <= limit; ++j) mx = std::max(mx, scores(i, j));
        double total = 0.0;
        for (int64_t j = 0; j <= limit; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          total += scores(i, j);
        }
        const float inv = static_cast<float>(1.0 / total);
        for (int64_t j = 0; j <= limit; ++j) scores(i, j) *= inv;
        for (int64_t j = limit + 1; j < len; ++j) scores(i, j) = 0.0f;
        macs += static_cast<uint64_t>(2 * (limit + 1) * d);
      }
      MatMap(out.data() + bh * t * d, t, d).noalias() = scores * vm;
    }
  }
  count_macs(macs);
  return out;
}

TransformerStack::TransformerStack(int64_t layers, int64_t dim, int64_t heads, bool cross)
    : layers_(static_cast<size_t>(layers)), dim_(dim), heads_(heads), cross_(cross) {
  if (heads <= 0 || dim % heads != 0) {
    throw ShapeError("stack: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
}

void TransformerStack::init(Rng& rng, double std) {
  const int64_t d = dim_;
  const double out_std = std / std::sqrt(2.0 * std::max<size_t>(layers_.size(), 1));
  auto ones = [](int64_t n) { return Tensor::full({n}, 1.0f); };
  auto zeros = [](int64_t n) { return Tensor({n}); };
  for (auto& l : layers_) {
    l.ln1_g = ones(d);
    l.ln1_b = zeros(d);
    l.wq = normal_tensor({d, d}, rng, std);
    l.bq = zeros(d);
    l.wk = normal_tensor({d, d}, rng, std);
    l.bk = zeros(d);
    l.wv = normal_tensor({d, d}, rng, std);
    l.bv = zeros(d);
    l.wo = normal_tensor({d, d}, rng, out_std);
    l.bo = zeros(d);
    if (cross_) {
      l.lnx_g = ones(d);
      l.lnx_b = zeros(d);
      l.xq = normal_tensor({d, d}, rng, std);
      l.xbq = zeros(d);
      l.xk = normal_tensor({d, d}, rng, std);
      l.xbk = zeros(d);
      l.xv = normal_tensor({d, d}, rng, std);
      l.xbv = zeros(d);
      l.xo = normal_tensor({d, d}, rng, out_std);
      l.xbo = zeros(d);
    }
    l.ln2_g = ones(d);
    l.ln2_b = zeros(d);
    l.w_up = normal_tensor({d, 4 * d}, rng, std);
    l.b_up = zeros(4 * d);
    l.w_down = normal_tensor({4 * d, d}, rng, out_std);
    l.b_down = zeros(d);
  }
  lnf_g_ = ones(d);
  lnf_b_ = zeros(d);
}

void TransformerStack::register_params(ParamList& params, const std::string& prefix) {
  for (size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    const std::string p = prefix + ".layer" + std::to_string(i) + ".";
    params.add(p + "ln1.g", l.ln1_g);
    params.add(p + "ln1.b", l.ln1_b);
    params.add(p + "attn.q", l.wq);
    params.add(p + "attn.q_b", l.bq);
    params.add(p + "attn.k", l.wk);
    params.add(p + "attn.k_b", l.bk);
    params.add(p + "attn.v", l.wv);
    params.add(p + "attn.v_b", l.bv);
    params.add(p + "attn.o", l.wo);
    params.add(p + "attn.o_b", l.bo);
    if (cross_) {
      params.add(p + "lnx.g", l.lnx_g);
      params.add(p + "lnx.b", l.lnx_b);
      params.add(p + "xattn.q", l.xq);
      params.add(p + "xattn.q_b", l.xbq);
      params.add(p + "xattn.k", l.xk);
      params.add(p + "xattn.k_b", l.xbk);
      params.add(p + "xattn.v", l.xv);
      params.add(p + "xattn.v_b", l.xbv);
      params.add(p + "xattn.o", l.xo);
      params.add(p + "xattn.o_b", l.xbo);
    }
    params.add(p + "ln2.g", l.ln2_g);
    params.add(p + "ln2.b", l.ln2_b);
    params.add(p + "mlp.up", l.w_up);
    params.add(p + "mlp.up_b", l.b_up);
    params.add(p + "mlp.down", l.w_down);
    params.add(p + "mlp.down_b", l.b_down);
  }
  params.add(prefix + ".ln_f.g", lnf_g_);
  params.add(prefix + ".ln_f.b", lnf_b_);
}

Tensor TransformerStack::attention_block(const DecoderLayer& l, const Tensor& h, AttentionMode mode,
                                         AttentionProbs* probs) const {
  const int64_t t = h.dim(1);
  const auto heads = static_cast<int>(heads_);
  const RotaryTable rot = rotary_positions(head_dim(), 0, t);
  Tensor q = rotary(split_heads(linear(h, l.wq, l.bq), heads), rot);
  Tensor k = rotary(split_heads(linear(h, l.wk, l.bk), heads), rot);
  Tensor v = split_heads(linear(h, l.wv, l.bv), heads);
  return linear(merge_heads(attention(q, k, v, to_mask(mode), probs)), l.wo, l.bo);
}

Tensor TransformerStack::cross_block(const DecoderLayer& l, const Tensor& h, const Tensor& ctx) const {
  const auto heads = static_cast<int>(heads_);
  Tensor q = split_heads(linear(h, l.xq, l.xbq), heads);
  Tensor k = split_heads(linear(ctx, l.xk, l.xbk), heads);
  Tensor v = split_heads(linear(ctx, l.xv, l.xbv), heads);
  return linear(merge_heads(attention(q, k, v, AttentionMask::full)), l.xo, l.xbo);
}

Tensor TransformerStack::feed_forward(const DecoderLayer& l, const Tensor& x) const {
  return linear(gelu(linear(layer_norm(x, l.ln2_g, l.ln2_b), l.w_up, l.b_up)), l.w_down, l.b_down);
}

Tensor TransformerStack::forward(const Tensor& input, AttentionMode mode, const Tensor* cross_context,
                                 AttentionTrace* trace) const {
  if (input.rank() != 3 || input.dim(2) != dim_) {
    throw ShapeError("stack forward: input" + shape_str(input.shape()) + " must be [B, T, " + std::to_string(dim_) + "]");
  }
  if (cross_context && !cross_) throw std::invalid_argument("stack forward: cross context given to a stack without cross-attention weights");
  if (!cross_context && cross_) throw std::invalid_argument("stack forward: cross-attention stack needs a cross context");
  if (trace) trace->layers.assign(layers_.size(), {});
  Tensor x = input;
  for (size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    x = add(x, attention_block(l, layer_norm(x, l.ln1_g, l.ln1_b), mode, trace ? &trace->layers[i] : nullptr));
    if (cross_) x = add(x, cross_block(l, layer_norm(x, l.lnx_g, l.lnx_b), *cross_context));
    x = add(x, feed_forward(l, x));
  }
  return layer_norm(x, lnf_g_, lnf_b_);
}

StackCache TransformerStack::make_cache(int64_t batch, int64_t capacity) const {
  StackCache cache;
  for (size_t i = 0; i < layers_.size(); ++i) cache.layers.emplace_back(batch, heads_, head_dim(), capacity);
  return cache;
}

void TransformerStack::set_cross_context(StackCache& cache, const Tensor& ctx) const {
  if (!cross_) throw std::invalid_argument("set_cross_context: stack has no cross-attention weights");
  const auto heads = static_cast<int>(heads_);
  cache.cross_k.clear();
  cache.cross_v.clear();
  for (const auto& l : layers_) {
    cache.cross_k.push_back(split_heads(linear(ctx, l.xk, l.xbk), heads));
    cache.cross_v.push_back(split_heads(linear(ctx, l.xv, l.xbv), heads));
  }
  cache.cross_len = ctx.dim(1);
}

Tensor TransformerStack::step(const Tensor& input, StackCache& cache) const {
  if (input.rank() != 3 || input.dim(2) != dim_ || input.dim(1) < 1) {
    throw ShapeError("stack step: input" + shape_str(input.shape()) + " must be [B, T>=1, " + std::to_string(dim_) + "]");
  }
  if (cache.layers.size() != layers_.size()) throw std::invalid_argument("stack step: cache built for a different stack");
  const int64_t t = input.dim(1);
  const int64_t offset = cache.length();
  if (offset + t > cache.capacity()) {
    throw CapacityError("stack step: " + std::to_string(t) + " new positions exceed cache capacity " +
                        std::to_string(cache.capacity()) + " at length " + std::to_string(offset));
  }
  if (cross_ && cache.cross_k.size() != layers_.size()) {
    throw std::invalid_argument("stack step: cross-attention stack needs set_cross_context first");
  }
  const auto heads = static_cast<int>(heads_);
  const RotaryTable rot = rotary_positions(head_dim(), offset, t);
  Tensor x = input;
  for (size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    Tensor h = layer_norm(x, l.ln1_g, l.ln1_b);
    Tensor q = rotary(split_heads(linear(h, l.wq, l.bq), heads), rot);
    Tensor k = rotary(split_heads(linear(h, l.wk, l.bk), heads), rot);
    Tensor v = split_heads(linear(h, l.wv, l.bv), heads);
    cache.layers[i].append(k, v);
    x = add(x, linear(merge_heads(attend_cached(q, cache.layers[i])), l.wo, l.bo));
    if (cross_) {
      Tensor hx = layer_norm(x, l.lnx_g, l.lnx_b);
      Tensor qx = split_heads(linear(hx, l.xq, l.xbq), heads);
      x = add(x, linear(merge_heads(attention(qx, cache.cross_k[i], cache.cross_v[i], AttentionMask::full)), l.xo, l.xbo));
    }
    x = add(x, feed_forward(l, x));
  }
  cache.peak_length = std::max(cache.peak_length, cache.length());
  return layer_norm(x, lnf_g_, lnf_b_);
}

}  // namespace blocklm
