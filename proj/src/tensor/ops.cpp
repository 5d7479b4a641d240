#include "blocklm/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "blocklm/instrument.hpp"

namespace blocklm {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;
using StoragePtr = std::shared_ptr<detail::Storage>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
  throw ShapeError(op + ": " + detail);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "a" + shape_str(a.shape()) + " and b" + shape_str(b.shape()) + " differ");
  }
}

void require_rank(const char* op, const char* name, const Tensor& t, int rank) {
  if (t.rank() != rank) {
    shape_fail(op, std::string(name) + shape_str(t.shape()) + " must have rank " + std::to_string(rank));
  }
}

Shape with_last(const Shape& s, int64_t last) {
  Shape out = s;
  out.back() = last;
  return out;
}

float* grad_of(const StoragePtr& s) {
  s->ensure_grad();
  return s->grad.data();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return linear(a, b); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() < 1) shape_fail("matmul", "a" + shape_str(x.shape()) + " must have rank >= 1");
  require_rank("matmul", "b", w, 2);
  const int64_t k = x.dim(-1);
  if (w.dim(0) != k) {
    shape_fail("matmul", "a" + shape_str(x.shape()) + " and b" + shape_str(w.shape()) +
                             ": inner extents " + std::to_string(k) + " vs " + std::to_string(w.dim(0)));
  }
  const int64_t n = w.dim(1);
  const int64_t m = x.numel() / std::max<int64_t>(k, 1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
    shape_fail("linear", "bias" + shape_str(bias.shape()) + " does not match output width " + std::to_string(n));
  }
  Tensor out(with_last(x.shape(), n));
  MatMap c(out.data(), m, n);
  ConstMatMap am(x.data(), m, k);
  ConstMatMap bm(w.data(), k, n);
  c.noalias() = am * bm;
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXf> bv(bias.data(), n);
    c.rowwise() += bv;
  }
  count_macs(static_cast<uint64_t>(m * k * n));

  if (detail::needs_grad({&x, &w, &bias})) {
    StoragePtr so = out.storage(), sx = x.storage(), sw = w.storage();
    StoragePtr sb = bias.defined() ? bias.storage() : nullptr;
    const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = bias.defined() && bias.requires_grad();
    detail::record(out, {&x, &w, &bias}, [=] {
      ConstMatMap dc(so->grad.data(), m, n);
      if (gx) {
        MatMap dx(grad_of(sx), m, k);
        dx.noalias() += dc * ConstMatMap(sw->data.data(), k, n).transpose();
      }
      if (gw) {
        MatMap dw(grad_of(sw), k, n);
        dw.noalias() += ConstMatMap(sx->data.data(), m, k).transpose() * dc;
      }
      if (gb) {
        Eigen::Map<Eigen::RowVectorXf> db(grad_of(sb), n);
        db += dc.colwise().sum();
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::needs_grad({&a, &b})) {
    StoragePtr so = out.storage(), sa = a.storage(), sb = b.storage();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    detail::record(out, {&a, &b}, [=] {
      const float* g = so->grad.data();
      if (ga) {
        float* d = grad_of(sa);
        for (int64_t i = 0; i < n; ++i) d[i] += g[i];
      }
      if (gb) {
        float* d = grad_of(sb);
        for (int64_t i = 0; i < n; ++i) d[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::needs_grad({&a, &b})) {
    StoragePtr so = out.storage(), sa = a.storage(), sb = b.storage();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    detail::record(out, {&a, &b}, [=] {
      const float* g = so->grad.data();
      if (ga) {
        float* d = grad_of(sa);
        for (int64_t i = 0; i < n; ++i) d[i] += g[i] * sb->data[i];
      }
      if (gb) {
        float* d = grad_of(sb);
        for (int64_t i = 0; i < n; ++i) d[i] += g[i] * sa->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float factor) {
  Tensor out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * factor;
  if (detail::needs_grad({&a})) {
    StoragePtr so = out.storage(), sa = a.storage();
    detail::record(out, {&a}, [=] {
      float* d = grad_of(sa);
      for (int64_t i = 0; i < n; ++i) d[i] += so->grad[i] * factor;
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (detail::needs_grad({&a})) {
    StoragePtr so = out.storage(), sa = a.storage();
    const int64_t n = a.numel();
    detail::record(out, {&a}, [=] {
      float* d = grad_of(sa);
      const float g = so->grad[0];
      for (int64_t i = 0; i < n; ++i) d[i] += g;
    });
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) shape_fail("softmax", "x" + shape_str(x.shape()) + " must have rank >= 1");
  const int64_t d = x.dim(-1);
  const int64_t rows = d == 0 ? 0 : x.numel() / d;
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = x.data() + r * d;
    float* o = out.data() + r * d;
    float mx = -std::numeric_limits<float>::infinity();
    for (int64_t j = 0; j < d; ++j) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (int64_t j = 0; j < d; ++j) o[j] *= inv;
  }
  if (detail::needs_grad({&x})) {
    StoragePtr so = out.storage(), sx = x.storage();
    detail::record(out, {&x}, [=] {
      float* dx = grad_of(sx);
      for (int64_t r = 0; r < rows; ++r) {
        const float* y = so->data.data() + r * d;
        const float* g = so->grad.data() + r * d;
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(g[j]) * y[j];
        for (int64_t j = 0; j < d; ++j) dx[r * d + j] += y[j] * (g[j] - static_cast<float>(dot));
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int64_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    shape_fail("layer_norm", "x" + shape_str(x.shape()) + " gamma" + shape_str(gamma.shape()) +
                                 " beta" + shape_str(beta.shape()));
  }
  const int64_t rows = x.numel() / d;
  Tensor out(x.shape());
  auto xhat = std::make_shared<FloatBuffer>(static_cast<size_t>(x.numel()));
  auto inv_std = std::make_shared<FloatBuffer>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = x.data() + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = in[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[static_cast<size_t>(r)] = is;
    float* xh = xhat->data() + r * d;
    float* o = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      xh[j] = static_cast<float>(in[j] - mean) * is;
      o[j] = xh[j] * gamma.data()[j] + beta.data()[j];
    }
  }
  if (detail::needs_grad({&x, &gamma, &beta})) {
    StoragePtr so = out.storage(), sx = x.storage(), sg = gamma.storage(), sb = beta.storage();
    const bool gx = x.requires_grad(), gg = gamma.requires_grad(), gbeta = beta.requires_grad();
    detail::record(out, {&x, &gamma, &beta}, [=] {
      float* dg = gg ? grad_of(sg) : nullptr;
      float* db = gbeta ? grad_of(sb) : nullptr;
      float* dx = gx ? grad_of(sx) : nullptr;
      FloatBuffer dxhat(static_cast<size_t>(d));
      for (int64_t r = 0; r < rows; ++r) {
        const float* g = so->grad.data() + r * d;
        const float* xh = xhat->data() + r * d;
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          if (dg) dg[j] += g[j] * xh[j];
          if (db) db[j] += g[j];
          dxhat[static_cast<size_t>(j)] = g[j] * sg->data[static_cast<size_t>(j)];
          mean_dxh += dxhat[static_cast<size_t>(j)];
          mean_dxh_xh += static_cast<double>(dxhat[static_cast<size_t>(j)]) * xh[j];
        }
        if (!dx) continue;
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        const float is = (*inv_std)[static_cast<size_t>(r)];
        for (int64_t j = 0; j < d; ++j) {
          dx[r * d + j] += is * static_cast<float>(dxhat[static_cast<size_t>(j)] - mean_dxh - xh[j] * mean_dxh_xh);
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  const int64_t n = x.numel();
  Tensor out(x.shape());
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  for (int64_t i = 0; i < n; ++i) {
    const float v = x.data()[i];
    out.data()[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  }
  if (detail::needs_grad({&x})) {
    StoragePtr so = out.storage(), sx = x.storage();
    detail::record(out, {&x}, [=] {
      constexpr float kInvSqrt2Pi = 0.39894228040143268f;
      float* dx = grad_of(sx);
      for (int64_t i = 0; i < n; ++i) {
        const float v = sx->data[static_cast<size_t>(i)];
        const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
        dx[i] += so->grad[static_cast<size_t>(i)] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int32_t> ids, const Shape& ids_shape) {
  require_rank("embedding", "table", table, 2);
  if (shape_numel(ids_shape) != static_cast<int64_t>(ids.size())) {
    shape_fail("embedding", std::to_string(ids.size()) + " ids for ids shape " + shape_str(ids_shape));
  }
  const int64_t vocab = table.dim(0);
  const int64_t d = table.dim(1);
  for (int32_t id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.data() + ids[i] * d, d, out.data() + static_cast<int64_t>(i) * d);
  }
  if (detail::needs_grad({&table})) {
    StoragePtr so = out.storage(), st = table.storage();
    std::vector<int32_t> idv(ids.begin(), ids.end());
    detail::record(out, {&table}, [=] {
      float* dt = grad_of(st);
      for (size_t i = 0; i < idv.size(); ++i) {
        const float* g = so->grad.data() + static_cast<int64_t>(i) * d;
        float* row = dt + idv[i] * d;
        for (int64_t j = 0; j < d; ++j) row[j] += g[j];
      }
    });
  }
  return out;
}

RotaryTable make_rotary_table(int head_dim, int64_t offset, int64_t length, float base) {
  if (head_dim % 2 != 0) throw ShapeError("rotary: head_dim " + std::to_string(head_dim) + " must be even");
  RotaryTable t;
  t.head_dim = head_dim;
  t.offset = offset;
  t.length = length;
  const int half = head_dim / 2;
  t.cos.resize(static_cast<size_t>(length * half));
  t.sin.resize(static_cast<size_t>(length * half));
  for (int64_t p = 0; p < length; ++p) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(static_cast<double>(base), -2.0 * i / head_dim);
      const double angle = static_cast<double>(offset + p) * freq;
      t.cos[static_cast<size_t>(p * half + i)] = static_cast<float>(std::cos(angle));
      t.sin[static_cast<size_t>(p * half + i)] = static_cast<float>(std::sin(angle));
    }
  }
  return t;
}

Tensor rotary(const Tensor& x, const RotaryTable& table) {
  require_rank("rotary", "x", x, 4);
  const int64_t outer = x.dim(0) * x.dim(1);
  const int64_t steps = x.dim(2);
  const int64_t hd = x.dim(3);
  if (hd != table.head_dim || steps != table.length) {
    shape_fail("rotary", "x" + shape_str(x.shape()) + " vs table of length " + std::to_string(table.length) +
                             " head_dim " + std::to_string(table.head_dim));
  }
  const int64_t half = hd / 2;
  auto apply = [=](const float* in, float* out, const RotaryTable& tb, bool inverse) {
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t t = 0; t < steps; ++t) {
        const float* v = in + (o * steps + t) * hd;
        float* w = out + (o * steps + t) * hd;
        const float* c = tb.cos.data() + t * half;
        const float* s = tb.sin.data() + t * half;
        for (int64_t i = 0; i < half; ++i) {
          const float sn = inverse ? -s[i] : s[i];
          const float x1 = v[i], x2 = v[i + half];
          w[i] += x1 * c[i] - x2 * sn;
          w[i + half] += x2 * c[i] + x1 * sn;
        }
      }
    }
  };
  Tensor out(x.shape());
  apply(x.data(), out.data(), table, false);
  if (detail::needs_grad({&x})) {
    StoragePtr so = out.storage(), sx = x.storage();
    auto tb = std::make_shared<RotaryTable>(table);
    detail::record(out, {&x}, [=] { apply(so->grad.data(), grad_of(sx), *tb, true); });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, AttentionMask mask, AttentionProbs* record) {
  require_rank("attention", "q", q, 4);
  require_rank("attention", "k", k, 4);
  require_rank("attention", "v", v, 4);
  const int64_t bsz = q.dim(0), heads = q.dim(1), tq = q.dim(2), d = q.dim(3);
  const int64_t tk = k.dim(2);
  if (k.dim(0) != bsz || k.dim(1) != heads || k.dim(3) != d || v.shape() != k.shape()) {
    shape_fail("attention", "q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  if (mask == AttentionMask::causal && tk < tq) {
    shape_fail("attention", "causal mask needs at least as many keys as queries: q" + shape_str(q.shape()) +
                                " k" + shape_str(k.shape()));
  }
  const float sc = 1.0f / std::sqrt(static_cast<float>(d));
  const int64_t shift = tk - tq;
  auto probs = std::make_shared<FloatBuffer>(static_cast<size_t>(bsz * heads * tq * tk), 0.0f);
  Tensor out(q.shape());
  uint64_t macs = 0;
  RowMat scores(tq, tk);
  for (int64_t bh = 0; bh < bsz * heads; ++bh) {
    ConstMatMap qm(q.data() + bh * tq * d, tq, d);
    ConstMatMap km(k.data() + bh * tk * d, tk, d);
    ConstMatMap vm(v.data() + bh * tk * d, tk, d);
    scores.noalias() = (qm * km.transpose()) * sc;
    MatMap pm(probs->data() + bh * tq * tk, tq, tk);
    for (int64_t i = 0; i < tq; ++i) {
      const int64_t limit = mask == AttentionMask::causal ? i + shift : tk - 1;
      float mx = -std::numeric_limits<float>::infinity();
      for (int64_t j = 0; j <= limit; ++j) mx = std::max(mx, scores(i, j));
      double total = 0.0;
      for (int64_t j = 0; j <= limit; ++j) {
        const float e = std::exp(scores(i, j) - mx);
        pm(i, j) = e;
        total += e;
      }
      const float inv = static_cast<float>(1.0 / total);
      for (int64_t j = 0; j <= limit; ++j) pm(i, j) *= inv;
      macs += static_cast<uint64_t>(2 * (limit + 1) * d);
    }
    MatMap om(out.data() + bh * tq * d, tq, d);
    om.noalias() = pm * vm;
  }
  count_macs(macs);
  if (record) {
    record->shape = {bsz, heads, tq, tk};
    record->values.assign(probs->begin(), probs->end());
  }
  if (detail::needs_grad({&q, &k, &v})) {
    StoragePtr so = out.storage(), sq = q.storage(), sk = k.storage(), sv = v.storage();
    const bool gq = q.requires_grad(), gk = k.requires_grad(), gv = v.requires_grad();
    detail::record(out, {&q, &k, &v}, [=] {
      float* dq = gq ? grad_of(sq) : nullptr;
      float* dk = gk ? grad_of(sk) : nullptr;
      float* dv = gv ? grad_of(sv) : nullptr;
      RowMat dp(tq, tk);
      for (int64_t bh = 0; bh < bsz * heads; ++bh) {
        ConstMatMap dom(so->grad.data() + bh * tq * d, tq, d);
        ConstMatMap qm(sq->data.data() + bh * tq * d, tq, d);
        ConstMatMap km(sk->data.data() + bh * tk * d, tk, d);
        ConstMatMap vm(sv->data.data() + bh * tk * d, tk, d);
        ConstMatMap pm(probs->data() + bh * tq * tk, tq, tk);
        if (dv) MatMap(dv + bh * tk * d, tk, d).noalias() += pm.transpose() * dom;
        dp.noalias() = dom * vm.transpose();
        for (int64_t i = 0; i < tq; ++i) {
          double row = 0.0;
          for (int64_t j = 0; j < tk; ++j) row += static_cast<double>(dp(i, j)) * pm(i, j);
          for (int64_t j = 0; j < tk; ++j) dp(i, j) = pm(i, j) * (dp(i, j) - static_cast<float>(row)) * sc;
        }
        if (dq) MatMap(dq + bh * tq * d, tq, d).noalias() += dp * km;
        if (dk) MatMap(dk + bh * tk * d, tk, d).noalias() += dp.transpose() * qm;
      }
    });
  }
  return out;
}

Tensor split_heads(const Tensor& x, int heads) {
  require_rank("split_heads", "x", x, 3);
  const int64_t b = x.dim(0), t = x.dim(1), width = x.dim(2);
  if (heads <= 0 || width % heads != 0) {
    shape_fail("split_heads", "x" + shape_str(x.shape()) + " not divisible into " + std::to_string(heads) + " heads");
  }
  const int64_t d = width / heads;
  Tensor out({b, heads, t, d});
  auto permute = [=](const float* in, float* o, bool inverse) {
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ti = 0; ti < t; ++ti)
        for (int64_t h = 0; h < heads; ++h) {
          const int64_t src = (bi * t + ti) * width + h * d;
          const int64_t dst = ((bi * heads + h) * t + ti) * d;
          for (int64_t j = 0; j < d; ++j) {
            if (inverse) o[src + j] += in[dst + j];
            else o[dst + j] = in[src + j];
          }
        }
  };
  permute(x.data(), out.data(), false);
  if (detail::needs_grad({&x})) {
    StoragePtr so = out.storage(), sx = x.storage();
    detail::record(out, {&x}, [=] { permute(so->grad.data(), grad_of(sx), true); });
  }
  return out;
}

Tensor merge_heads(const Tensor& x) {
  require_rank("merge_heads", "x", x, 4);
  const int64_t b = x.dim(0), heads = x.dim(1), t = x.dim(2), d = x.dim(3);
  const int64_t width = heads * d;
  Tensor out({b, t, width});
  auto permute = [=](const float* in, float* o, bool inverse) {
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t ti = 0; ti < t; ++ti) {
          const int64_t src = ((bi * heads + h) * t + ti) * d;
          const int64_t dst = (bi * t + ti) * width + h * d;
          for (int64_t j = 0; j < d; ++j) {
            if (inverse) o[src + j] += in[dst + j];
            else o[dst + j] = in[src + j];
          }
        }
  };
  permute(x.data(), out.data(), false);
  if (detail::needs_grad({&x})) {
    StoragePtr so = out.storage(), sx = x.storage();
    detail::record(out, {&x}, [=] { permute(so->grad.data(), grad_of(sx), true); });
  }
  return out;
}

Tensor concat_seq(const Tensor& a, const Tensor& b) {
  require_rank("concat_seq", "a", a, 3);
  require_rank("concat_seq", "b", b, 3);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    shape_fail("concat_seq", "a" + shape_str(a.shape()) + " and b" + shape_str(b.shape()) + " disagree outside axis 1");
  }
  const int64_t m = a.dim(0), ta = a.dim(1), tb = b.dim(1), d = a.dim(2);
  Tensor out({m, ta + tb, d});
  for (int64_t i = 0; i < m; ++i) {
    std::copy_n(a.data() + i * ta * d, ta * d, out.data() + i * (ta + tb) * d);
    std::copy_n(b.data() + i * tb * d, tb * d, out.data() + i * (ta + tb) * d + ta * d);
  }
  if (detail::needs_grad({&a, &b})) {
    StoragePtr so = out.storage(), sa = a.storage(), sb = b.storage();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    detail::record(out, {&a, &b}, [=] {
      float* da = ga ? grad_of(sa) : nullptr;
      float* db = gb ? grad_of(sb) : nullptr;
      for (int64_t i = 0; i < m; ++i) {
        const float* g = so->grad.data() + i * (ta + tb) * d;
        if (da)
          for (int64_t j = 0; j < ta * d; ++j) da[i * ta * d + j] += g[j];
        if (db)
          for (int64_t j = 0; j < tb * d; ++j) db[i * tb * d + j] += g[ta * d + j];
      }
    });
  }
  return out;
}

Tensor slice_seq(const Tensor& x, int64_t start, int64_t length) {
  require_rank("slice_seq", "x", x, 3);
  const int64_t m = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (start < 0 || length < 0 || start + length > t) {
    shape_fail("slice_seq", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                ") outside x" + shape_str(x.shape()));
  }
  Tensor out({m, length, d});
  for (int64_t i = 0; i < m; ++i) {
    std::copy_n(x.data() + (i * t + start) * d, length * d, out.data() + i * length * d);
  }
  if (detail::needs_grad({&x})) {
    StoragePtr so = out.storage(), sx = x.storage();
    detail::record(out, {&x}, [=] {
      float* dx = grad_of(sx);
      for (int64_t i = 0; i < m; ++i) {
        const float* g = so->grad.data() + i * length * d;
        float* dst = dx + (i * t + start) * d;
        for (int64_t j = 0; j < length * d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

Tensor expand_rows(const Tensor& rows, int64_t m) {
  require_rank("expand_rows", "rows", rows, 2);
  const int64_t p = rows.dim(0), d = rows.dim(1);
  Tensor out({m, p, d});
  for (int64_t i = 0; i < m; ++i) std::copy_n(rows.data(), p * d, out.data() + i * p * d);
  if (detail::needs_grad({&rows})) {
    StoragePtr so = out.storage(), sr = rows.storage();
    detail::record(out, {&rows}, [=] {
      float* dr = grad_of(sr);
      for (int64_t i = 0; i < m; ++i) {
        const float* g = so->grad.data() + i * p * d;
        for (int64_t j = 0; j < p * d; ++j) dr[j] += g[j];
      }
    });
  }
  return out;
}

CrossEntropy cross_entropy(const Tensor& logits, std::span<const int32_t> targets, std::span<const uint8_t> mask) {
  require_rank("cross_entropy", "logits", logits, 2);
  const int64_t n = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(mask.size()) != n) {
    shape_fail("cross_entropy", "logits" + shape_str(logits.shape()) + " with " + std::to_string(targets.size()) +
                                    " targets and " + std::to_string(mask.size()) + " mask entries");
  }
  CrossEntropy result;
  result.row_loss.assign(static_cast<size_t>(n), 0.0f);
  auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    const int32_t tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(tgt) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    const float* row = logits.data() + r * vocab;
    float mx = -std::numeric_limits<float>::infinity();
    for (int64_t j = 0; j < vocab; ++j) mx = std::max(mx, row[j]);
    double acc = 0.0;
    for (int64_t j = 0; j < vocab; ++j) acc += std::exp(static_cast<double>(row[j]) - mx);
    const double l = mx + std::log(acc);
    (*lse)[static_cast<size_t>(r)] = l;
    const double loss = l - row[tgt];
    result.row_loss[static_cast<size_t>(r)] = static_cast<float>(loss);
    total += loss;
    ++result.count;
  }
  if (result.count == 0) throw std::invalid_argument("cross_entropy: every row is masked out");
  result.loss = Tensor::scalar(static_cast<float>(total / static_cast<double>(result.count)));
  if (detail::needs_grad({&logits})) {
    StoragePtr so = result.loss.storage(), sl = logits.storage();
    std::vector<int32_t> tg(targets.begin(), targets.end());
    std::vector<uint8_t> mk(mask.begin(), mask.end());
    const double inv_count = 1.0 / static_cast<double>(result.count);
    detail::record(result.loss, {&logits}, [=] {
      float* dl = grad_of(sl);
      const double g = so->grad[0] * inv_count;
      for (int64_t r = 0; r < n; ++r) {
        if (!mk[static_cast<size_t>(r)]) continue;
        const float* row = sl->data.data() + r * vocab;
        const double l = (*lse)[static_cast<size_t>(r)];
        float* dr = dl + r * vocab;
        for (int64_t j = 0; j < vocab; ++j) dr[j] += static_cast<float>(g * std::exp(row[j] - l));
        dr[tg[static_cast<size_t>(r)]] -= static_cast<float>(g);
      }
    });
  }
  return result;
}

}  // namespace blocklm
