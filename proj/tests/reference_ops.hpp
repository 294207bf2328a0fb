#pragma once

// Plain-loop reference implementations used as independent oracles in tests.
// These deliberately avoid the graph ops and the tiled attention machinery.

#include <cmath>
#include <cstdint>
#include <vector>

#include "blockrec/tensor.hpp"

namespace ref {

using blockrec::i64;
using blockrec::Shape;
using blockrec::Tensor;

// Transliteration of the canonical T5 bucketing rule (unidirectional).
inline i64 t5_bucket(i64 n, i64 num_buckets, i64 max_distance) {
  const i64 max_exact = num_buckets / 2;
  const bool is_small = n < max_exact;
  double frac = std::log(double(n) / double(max_exact)) /
                std::log(double(max_distance) / double(max_exact));
  i64 if_large = max_exact + i64(frac * double(num_buckets - max_exact));
  if_large = std::min(if_large, num_buckets - 1);
  return is_small ? n : if_large;
}

// Dense masked-softmax sliding-window attention over a whole segment: every
// query attends over the full (W + N) key axis with an explicit window mask,
// no tiling. q, k, v: [B, N, h, dh]; prev_k, prev_v: [B, W, h, dh].
inline Tensor<double> dense_sliding_attention(
    const Tensor<double>& q, const Tensor<double>& prev_k, const Tensor<double>& prev_v,
    const std::vector<std::uint8_t>& prev_valid, const Tensor<double>& k,
    const Tensor<double>& v, const std::vector<double>& head_scale,
    const Tensor<double>& bias_table, i64 num_buckets, i64 max_distance, i64 window) {
  const i64 B = q.shape[0], N = q.shape[1], H = q.shape[2], D = q.shape[3];
  const double eps = 1e-6;
  Tensor<double> out({B, N, H, D});

  auto normalized = [&](const Tensor<double>& t, i64 b, i64 p, i64 h, std::vector<double>& buf) {
    double ss = 0.0;
    for (i64 d = 0; d < D; ++d) {
      buf[size_t(d)] = t.at({b, p, h, d});
      ss += buf[size_t(d)] * buf[size_t(d)];
    }
    const double inv = 1.0 / std::sqrt(ss + eps);
    for (i64 d = 0; d < D; ++d) buf[size_t(d)] *= inv;
  };

  std::vector<double> qb(static_cast<size_t>(D)), kb(static_cast<size_t>(D));
  for (i64 b = 0; b < B; ++b)
    for (i64 h = 0; h < H; ++h)
      for (i64 i = 0; i < N; ++i) {
        normalized(q, b, i, h, qb);
        std::vector<double> logits;
        std::vector<i64> key_pos;
        for (i64 p = i - window; p <= i; ++p) {
          if (p < 0) {
            if (!prev_valid[size_t(b)]) continue;
            normalized(prev_k, b, p + window, h, kb);
          } else {
            normalized(k, b, p, h, kb);
          }
          double dot = 0.0;
          for (i64 d = 0; d < D; ++d) dot += qb[size_t(d)] * kb[size_t(d)];
          const i64 bucket = t5_bucket(i - p, num_buckets, max_distance);
          logits.push_back(head_scale[size_t(h)] * dot + bias_table.at({bucket, h}));
          key_pos.push_back(p);
        }
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double z = 0.0;
        std::vector<double> w(logits.size());
        for (size_t s = 0; s < logits.size(); ++s) {
          w[s] = std::exp(logits[s] - mx);
          z += w[s];
        }
        for (i64 d = 0; d < D; ++d) {
          double acc = 0.0;
          for (size_t s = 0; s < logits.size(); ++s) {
            const i64 p = key_pos[s];
            const double vv = p < 0 ? prev_v.at({b, p + window, h, d}) : v.at({b, p, h, d});
            acc += (w[s] / z) * vv;
          }
          out.at({b, i, h, d}) = acc;
        }
      }
  return out;
}

inline Tensor<double> dense_cross_attention(const Tensor<double>& q, const Tensor<double>& k,
                                            const Tensor<double>& v,
                                            const std::vector<double>& head_scale);

// ---- plain-loop layer pieces ------------------------------------------------

inline Tensor<double> layer_norm(const Tensor<double>& x, const Tensor<double>& gain,
                                 double eps = 1e-6) {
  const i64 n = x.shape.back();
  const i64 rows = x.numel() / n;
  Tensor<double> out(x.shape);
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * n;
    double mean = 0.0;
    for (i64 i = 0; i < n; ++i) mean += xr[i];
    mean /= double(n);
    double var = 0.0;
    for (i64 i = 0; i < n; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= double(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (i64 i = 0; i < n; ++i)
      out.data[size_t(r * n + i)] = gain.data[size_t(i)] * (xr[i] - mean) * inv;
  }
  return out;
}

inline Tensor<double> linear(const Tensor<double>& x, const Tensor<double>& w) {
  const i64 in = w.shape[0], out_dim = w.shape[1];
  const i64 rows = x.numel() / in;
  Tensor<double> out({rows, out_dim});
  for (i64 r = 0; r < rows; ++r)
    for (i64 o = 0; o < out_dim; ++o) {
      double acc = 0.0;
      for (i64 i = 0; i < in; ++i) acc += x.data[size_t(r * in + i)] * w.data[size_t(i * out_dim + o)];
      out.data[size_t(r * out_dim + o)] = acc;
    }
  Shape s(x.shape.begin(), x.shape.end() - 1);
  s.push_back(out_dim);
  out.shape = s;
  return out;
}

inline Tensor<double> with_shape(Tensor<double> t, Shape s) {
  t.shape = std::move(s);
  return t;
}

inline Tensor<double> add_bc(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out = a;
  const size_t nb = b.data.size();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i % nb];
  return out;
}

inline Tensor<double> relu(const Tensor<double>& x) {
  Tensor<double> out = x;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

struct RefGate {
  int type = 0;  // 0 fixed, 1 lstm
  Tensor<double> w_z, b_z, b_g, w_i, b_i, w_f, b_f;
};

// Scalar-loop gate update over [B, S, *] inputs.
inline Tensor<double> gate_apply(const Tensor<double>& c, const Tensor<double>& h,
                                 const RefGate& g) {
  const i64 B = c.shape[0], S = c.shape[1], d = c.shape[2];
  const i64 din = h.shape[2];
  Tensor<double> out({B, S, d});
  auto sigm = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (i64 b = 0; b < B; ++b)
    for (i64 s = 0; s < S; ++s)
      for (i64 k = 0; k < d; ++k) {
        auto dot = [&](const Tensor<double>& w) {
          double acc = 0.0;
          for (i64 j = 0; j < din; ++j) acc += h.at({b, s, j}) * w.at({j, k});
          return acc;
        };
        const double cv = c.at({b, s, k});
        if (g.type == 0) {
          const double z = dot(g.w_z) + g.b_z.data[size_t(k)];
          const double gv = sigm(g.b_g.data[size_t(k)]);
          out.at({b, s, k}) = cv * gv + z * (1.0 - gv);
        } else {
          const double z = std::tanh(dot(g.w_z) + g.b_z.data[size_t(k)]);
          const double iv = sigm(dot(g.w_i) + g.b_i.data[size_t(k)] - 1.0);
          const double fv = sigm(dot(g.w_f) + g.b_f.data[size_t(k)] + 1.0);
          out.at({b, s, k}) = cv * fv + z * iv;
        }
      }
  return out;
}

// ---- plain-loop recurrent cell ----------------------------------------------

struct RefCellParams {
  i64 d = 0, heads = 0, head_dim = 0, S = 0, hidden = 0;
  i64 num_buckets = 32, max_distance = 128;
  int gate_config = 2;  // 0 dual, 1 single, 2 skip
  Tensor<double> ln_gain, wq_ve, wq_vs, wk_e, wv_e, wo_v, mlp_ln_gain, mlp_w1, mlp_w2;
  Tensor<double> relpos_table;
  std::vector<double> qk_ve, qk_vs, qk_hs, qk_he;
  Tensor<double> state_ids, state_ln_gain, wk_s, wv_s, wq_hs, wq_he;
  RefGate gate1, gate2;
  Tensor<double> h_mlp_ln_gain, h_mlp_w1;
};

struct RefCellOut {
  Tensor<double> token_out, next_states, k_e, v_e;
};

inline RefCellOut cell_step(const Tensor<double>& tokens, const Tensor<double>& states,
                            const Tensor<double>& prev_k, const Tensor<double>& prev_v,
                            const std::vector<std::uint8_t>& prev_valid,
                            const RefCellParams& p) {
  const i64 B = tokens.shape[0], W = tokens.shape[1];
  const i64 H = p.heads, D = p.head_dim;
  auto heads4 = [&](const Tensor<double>& t, i64 T) {
    return with_shape(t, {B, T, H, D});
  };

  const auto xs_norm = layer_norm(tokens, p.ln_gain);
  const auto k_e = heads4(linear(xs_norm, p.wk_e), W);
  const auto v_e = heads4(linear(xs_norm, p.wv_e), W);

  Tensor<double> with_ids = add_bc(states, p.state_ids);
  const auto s_norm = layer_norm(with_ids, p.state_ln_gain);
  const auto k_s = heads4(linear(s_norm, p.wk_s), p.S);
  const auto v_s = heads4(linear(s_norm, p.wv_s), p.S);

  // vertical
  const auto q_ve = heads4(linear(xs_norm, p.wq_ve), W);
  const auto self_ctx = dense_sliding_attention(q_ve, prev_k, prev_v, prev_valid, k_e, v_e,
                                                p.qk_ve, p.relpos_table, p.num_buckets,
                                                p.max_distance, W);
  const auto q_vs = heads4(linear(xs_norm, p.wq_vs), W);
  const auto cross_ctx = dense_cross_attention(q_vs, k_s, v_s, p.qk_vs);
  Tensor<double> cat({B, W, 2 * H * D});
  for (i64 b = 0; b < B; ++b)
    for (i64 t = 0; t < W; ++t)
      for (i64 h = 0; h < H; ++h)
        for (i64 dd = 0; dd < D; ++dd) {
          cat.at({b, t, h * D + dd}) = self_ctx.at({b, t, h, dd});
          cat.at({b, t, H * D + h * D + dd}) = cross_ctx.at({b, t, h, dd});
        }
  Tensor<double> x1 = tokens;
  {
    const auto proj = linear(cat, p.wo_v);
    for (size_t i = 0; i < x1.data.size(); ++i) x1.data[i] += proj.data[i];
  }
  Tensor<double> token_out = x1;
  {
    const auto m = linear(relu(linear(layer_norm(x1, p.mlp_ln_gain), p.mlp_w1)), p.mlp_w2);
    for (size_t i = 0; i < token_out.data.size(); ++i) token_out.data[i] += m.data[i];
  }

  // horizontal
  const auto q_hs = heads4(linear(s_norm, p.wq_hs), p.S);
  const auto h_self = dense_cross_attention(q_hs, k_s, v_s, p.qk_hs);
  const auto q_he = heads4(linear(s_norm, p.wq_he), p.S);
  const auto h_cross = dense_cross_attention(q_he, k_e, v_e, p.qk_he);
  Tensor<double> hcat({B, p.S, 2 * H * D});
  for (i64 b = 0; b < B; ++b)
    for (i64 s = 0; s < p.S; ++s)
      for (i64 h = 0; h < H; ++h)
        for (i64 dd = 0; dd < D; ++dd) {
          hcat.at({b, s, h * D + dd}) = h_self.at({b, s, h, dd});
          hcat.at({b, s, H * D + h * D + dd}) = h_cross.at({b, s, h, dd});
        }
  Tensor<double> next_states;
  if (p.gate_config == 0) {
    const auto c1 = gate_apply(states, hcat, p.gate1);
    const auto hidden = relu(linear(layer_norm(c1, p.h_mlp_ln_gain), p.h_mlp_w1));
    next_states = gate_apply(c1, hidden, p.gate2);
  } else if (p.gate_config == 1) {
    const auto hidden = relu(linear(hcat, p.h_mlp_w1));
    next_states = gate_apply(states, hidden, p.gate2);
  } else {
    next_states = gate_apply(states, hcat, p.gate1);
  }

  RefCellOut out;
  out.token_out = token_out;
  out.next_states = next_states;
  out.k_e = k_e;
  out.v_e = v_e;
  return out;
}

// Plain sliding-window transformer layer (no recurrence): attention block
// with residual, then MLP block with residual.
struct RefLayerParams {
  i64 heads = 0, head_dim = 0;
  i64 num_buckets = 32, max_distance = 128;
  Tensor<double> ln_gain, wq, wk, wv, wo, mlp_ln_gain, mlp_w1, mlp_w2;
  Tensor<double> relpos_table;
  std::vector<double> qk_scale;
};

struct RefLayerOut {
  Tensor<double> out, k, v;
};

inline RefLayerOut sliding_layer(const Tensor<double>& x, const Tensor<double>& prev_k,
                                 const Tensor<double>& prev_v,
                                 const std::vector<std::uint8_t>& prev_valid, i64 window,
                                 const RefLayerParams& p) {
  const i64 B = x.shape[0], N = x.shape[1];
  const auto xn = layer_norm(x, p.ln_gain);
  const auto q = with_shape(linear(xn, p.wq), {B, N, p.heads, p.head_dim});
  const auto k = with_shape(linear(xn, p.wk), {B, N, p.heads, p.head_dim});
  const auto v = with_shape(linear(xn, p.wv), {B, N, p.heads, p.head_dim});
  const auto ctx = dense_sliding_attention(q, prev_k, prev_v, prev_valid, k, v, p.qk_scale,
                                           p.relpos_table, p.num_buckets, p.max_distance, window);
  Tensor<double> x1 = x;
  {
    const auto proj = linear(with_shape(ctx, {B, N, p.heads * p.head_dim}), p.wo);
    for (size_t i = 0; i < x1.data.size(); ++i) x1.data[i] += proj.data[i];
  }
  Tensor<double> out = x1;
  {
    const auto m = linear(relu(linear(layer_norm(x1, p.mlp_ln_gain), p.mlp_w1)), p.mlp_w2);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += m.data[i];
  }
  RefLayerOut r;
  r.out = out;
  r.k = k;
  r.v = v;
  return r;
}

// Unmasked cross-attention of A queries over Bk keys, direct evaluation.
inline Tensor<double> dense_cross_attention(const Tensor<double>& q, const Tensor<double>& k,
                                            const Tensor<double>& v,
                                            const std::vector<double>& head_scale) {
  const i64 B = q.shape[0], A = q.shape[1], H = q.shape[2], D = q.shape[3];
  const i64 Bk = k.shape[1];
  const double eps = 1e-6;
  Tensor<double> out({B, A, H, D});
  auto norm_at = [&](const Tensor<double>& t, i64 b, i64 p, i64 h, std::vector<double>& buf) {
    double ss = 0.0;
    for (i64 d = 0; d < D; ++d) {
      buf[size_t(d)] = t.at({b, p, h, d});
      ss += buf[size_t(d)] * buf[size_t(d)];
    }
    const double inv = 1.0 / std::sqrt(ss + eps);
    for (i64 d = 0; d < D; ++d) buf[size_t(d)] *= inv;
  };
  std::vector<double> qb(static_cast<size_t>(D)), kb(static_cast<size_t>(D));
  for (i64 b = 0; b < B; ++b)
    for (i64 h = 0; h < H; ++h)
      for (i64 a = 0; a < A; ++a) {
        norm_at(q, b, a, h, qb);
        std::vector<double> logits(static_cast<size_t>(Bk));
        for (i64 p = 0; p < Bk; ++p) {
          norm_at(k, b, p, h, kb);
          double dot = 0.0;
          for (i64 d = 0; d < D; ++d) dot += qb[size_t(d)] * kb[size_t(d)];
          logits[size_t(p)] = head_scale[size_t(h)] * dot;
        }
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double z = 0.0;
        std::vector<double> w(static_cast<size_t>(Bk));
        for (i64 p = 0; p < Bk; ++p) {
          w[size_t(p)] = std::exp(logits[size_t(p)] - mx);
          z += w[size_t(p)];
        }
        for (i64 d = 0; d < D; ++d) {
          double acc = 0.0;
          for (i64 p = 0; p < Bk; ++p) acc += (w[size_t(p)] / z) * v.at({b, p, h, d});
          out.at({b, a, h, d}) = acc;
        }
      }
  return out;
}

}  // namespace ref
