#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "blockrec/attention.hpp"
#include "blockrec/graph.hpp"

namespace blockrec {

enum class GateType { kFixed, kLstm };
enum class GateConfig { kDual, kSingle, kSkip };

inline std::string to_string(GateType t) { return t == GateType::kFixed ? "fixed" : "lstm"; }
inline std::string to_string(GateConfig c) {
  switch (c) {
    case GateConfig::kDual: return "dual";
    case GateConfig::kSingle: return "single";
    default: return "skip";
  }
}

// Recurrent states of one stream batch: [batch, S, d].
template <typename Real>
using StateBlock = NodeRef<Real>;

// Gate parameters. W_z is the linear projection that feeds the gate: its
// input is whatever tensor the cell routes into the gate (attention concat,
// or the MLP hidden layer), so d_in differs per gate site.
template <typename Real>
struct GateParams {
  GateType type = GateType::kFixed;
  NodeRef<Real> w_z, b_z;            // both gate types
  NodeRef<Real> b_g;                 // fixed gate
  NodeRef<Real> w_i, b_i, w_f, b_f;  // lstm gate
};

// Biases start small but non-zero (their magnitude sets the optimizer's
// update scale); weights start small via a downscaled fan-in rule. The -1/+1
// remember-bias constants live in the gate equations, not in b_i/b_f.
template <typename Real>
GateParams<Real> init_gate_params(GateType type, i64 d_in, i64 d, Rng& rng) {
  const double w_std = std::sqrt(0.1 / static_cast<double>(d_in));
  GateParams<Real> p;
  p.type = type;
  p.w_z = param(random_truncated_normal<Real>({d_in, d}, w_std, rng));
  p.b_z = param(random_normal<Real>({d}, 0.1, rng));
  if (type == GateType::kFixed) {
    p.b_g = param(random_normal<Real>({d}, 0.1, rng));
  } else {
    p.w_i = param(random_truncated_normal<Real>({d_in, d}, w_std, rng));
    p.b_i = param(random_normal<Real>({d}, 0.1, rng));
    p.w_f = param(random_truncated_normal<Real>({d_in, d}, w_std, rng));
    p.b_f = param(random_normal<Real>({d}, 0.1, rng));
  }
  return p;
}

// c_next = c * sigmoid(b_g) + (W_z h + b_z) * (1 - sigmoid(b_g)).
// The coefficient depends on neither c nor h: an exponential moving average.
template <typename Real>
StateBlock<Real> fixed_gate_update(const StateBlock<Real>& c, const NodeRef<Real>& h,
                                   const GateParams<Real>& params) {
  contract(params.type == GateType::kFixed, "fixed_gate_update: wrong gate type");
  contract(c->value.rank() == 3 && h->value.rank() == 3 &&
               c->value.shape[0] == h->value.shape[0] && c->value.shape[1] == h->value.shape[1],
           "fixed_gate_update: c and h must be [batch, S, *]");
  auto z = add(matmul(h, params.w_z), params.b_z);
  auto g = sigmoid(params.b_g);
  auto one_minus_g = add_scalar(scale(g, Real(-1)), Real(1));
  return add(mul(c, g), mul(z, one_minus_g));
}

// Standard input/forget combination; the +1/-1 constants bias the cell
// toward remembering at initialization.
template <typename Real>
StateBlock<Real> lstm_gate_update(const StateBlock<Real>& c, const NodeRef<Real>& h,
                                  const GateParams<Real>& params) {
  contract(params.type == GateType::kLstm, "lstm_gate_update: wrong gate type");
  contract(c->value.rank() == 3 && h->value.rank() == 3 &&
               c->value.shape[0] == h->value.shape[0] && c->value.shape[1] == h->value.shape[1],
           "lstm_gate_update: c and h must be [batch, S, *]");
  auto z = tanh(add(matmul(h, params.w_z), params.b_z));
  auto i = sigmoid(add_scalar(add(matmul(h, params.w_i), params.b_i), Real(-1)));
  auto f = sigmoid(add_scalar(add(matmul(h, params.w_f), params.b_f), Real(1)));
  return add(mul(c, f), mul(z, i));
}

template <typename Real>
StateBlock<Real> gate_update(const StateBlock<Real>& c, const NodeRef<Real>& h,
                             const GateParams<Real>& params) {
  return params.type == GateType::kFixed ? fixed_gate_update(c, h, params)
                                         : lstm_gate_update(c, h, params);
}

// Broadcast-add of the learned per-state identity vectors, applied before any
// state-derived keys, values or queries are computed.
template <typename Real>
StateBlock<Real> add_state_ids(const StateBlock<Real>& states, const NodeRef<Real>& state_ids) {
  return add(states, state_ids);
}

struct CellDims {
  i64 dim = 0;         // d
  i64 heads = 0;
  i64 head_dim = 0;
  i64 window = 0;      // W (block length)
  i64 num_states = 0;  // S
  i64 mlp_hidden = 0;
  i64 num_buckets = 32;
  i64 max_distance = 128;
  GateType gate_type = GateType::kFixed;
  GateConfig gate_config = GateConfig::kSkip;

  i64 attn_width() const { return heads * head_dim; }
  i64 concat_width() const { return 2 * attn_width(); }
};

// Parameters of one Block-Recurrent layer. Keys and values are shared
// between the directions; the four query sets are not.
template <typename Real>
struct RecurrentCellParams {
  CellDims dims;

  // vertical direction (token update)
  NodeRef<Real> ln_gain;
  NodeRef<Real> wq_ve, wq_vs;  // queries over token keys / state keys
  NodeRef<Real> wk_e, wv_e;    // shared token keys/values
  NodeRef<Real> wo_v;          // [2 h dh, d] concat projection
  NodeRef<Real> mlp_ln_gain, mlp_w1, mlp_w2;
  RelPosBias<Real> relpos;
  QKNorm<Real> qk_ve, qk_vs, qk_hs, qk_he;

  // horizontal direction (state update)
  NodeRef<Real> state_ids;      // [S, d]
  NodeRef<Real> state_ln_gain;  // applied to states + ids
  NodeRef<Real> wk_s, wv_s;     // shared state keys/values
  NodeRef<Real> wq_hs, wq_he;   // queries over state keys / token keys
  GateParams<Real> gate1;       // dual: projection gate; skip: the only gate
  GateParams<Real> gate2;       // dual: MLP gate; single: the only gate
  NodeRef<Real> h_mlp_ln_gain;  // dual only
  NodeRef<Real> h_mlp_w1;       // dual: [d, hidden]; single: [2 h dh, hidden]

  // learned initial state used at document start
  NodeRef<Real> init_state;  // [S, d]
};

template <typename Real>
RecurrentCellParams<Real> init_recurrent_cell(const CellDims& dims, Rng& rng) {
  const i64 d = dims.dim, hd = dims.attn_width();
  auto proj = [&](i64 in, i64 out) {
    return param(random_truncated_normal<Real>({in, out}, std::sqrt(1.0 / double(in)), rng));
  };
  RecurrentCellParams<Real> p;
  p.dims = dims;
  p.ln_gain = param(Tensor<Real>::full({d}, Real(1)));
  p.wq_ve = proj(d, hd);
  p.wq_vs = proj(d, hd);
  p.wk_e = proj(d, hd);
  p.wv_e = proj(d, hd);
  p.wo_v = proj(2 * hd, d);
  p.mlp_ln_gain = param(Tensor<Real>::full({d}, Real(1)));
  p.mlp_w1 = proj(d, dims.mlp_hidden);
  p.mlp_w2 = proj(dims.mlp_hidden, d);
  p.relpos = make_relpos_bias<Real>(dims.num_buckets, dims.max_distance, dims.heads);
  p.qk_ve = make_qk_norm<Real>(dims.heads, dims.head_dim);
  p.qk_vs = make_qk_norm<Real>(dims.heads, dims.head_dim);
  p.qk_hs = make_qk_norm<Real>(dims.heads, dims.head_dim);
  p.qk_he = make_qk_norm<Real>(dims.heads, dims.head_dim);

  p.state_ids = param(random_truncated_normal<Real>({dims.num_states, d},
                                                    std::sqrt(1.0 / double(d)), rng));
  p.state_ln_gain = param(Tensor<Real>::full({d}, Real(1)));
  p.wk_s = proj(d, hd);
  p.wv_s = proj(d, hd);
  p.wq_hs = proj(d, hd);
  p.wq_he = proj(d, hd);

  switch (dims.gate_config) {
    case GateConfig::kDual:
      p.gate1 = init_gate_params<Real>(dims.gate_type, 2 * hd, d, rng);
      p.h_mlp_ln_gain = param(Tensor<Real>::full({d}, Real(1)));
      p.h_mlp_w1 = proj(d, dims.mlp_hidden);
      p.gate2 = init_gate_params<Real>(dims.gate_type, dims.mlp_hidden, d, rng);
      break;
    case GateConfig::kSingle:
      p.h_mlp_w1 = proj(2 * hd, dims.mlp_hidden);
      p.gate2 = init_gate_params<Real>(dims.gate_type, dims.mlp_hidden, d, rng);
      break;
    case GateConfig::kSkip:
      p.gate1 = init_gate_params<Real>(dims.gate_type, 2 * hd, d, rng);
      break;
  }
  p.init_state =
      param(random_truncated_normal<Real>({dims.num_states, d}, std::sqrt(1.0 / double(d)), rng));
  return p;
}

struct ForwardCtx {
  double dropout_rate = 0.0;
  Rng* rng = nullptr;
};

// Normalized inputs plus the one shared set of keys/values per direction.
template <typename Real>
struct CellShared {
  NodeRef<Real> xs_norm;   // LN(tokens)           [B, W, d]
  BlockKV<Real> token_kv;  // K_e, V_e             [B, W, h, dh]
  NodeRef<Real> s_norm;    // LN(states + ids)     [B, S, d]
  BlockKV<Real> state_kv;  // K_s, V_s             [B, S, h, dh]
};

namespace detail {

template <typename Real>
NodeRef<Real> heads_view(const NodeRef<Real>& x, i64 heads, i64 head_dim) {
  Shape s = x->value.shape;
  return reshape(x, {s[0], s[1], heads, head_dim});
}

template <typename Real>
NodeRef<Real> merge_heads(const NodeRef<Real>& x) {
  Shape s = x->value.shape;
  return reshape(x, {s[0], s[1], s[2] * s[3]});
}

}  // namespace detail

template <typename Real>
CellShared<Real> compute_cell_shared(const NodeRef<Real>& tokens, const StateBlock<Real>& states,
                                     const RecurrentCellParams<Real>& p) {
  const auto& d = p.dims;
  CellShared<Real> sh;
  sh.xs_norm = layer_norm(tokens, p.ln_gain);
  sh.token_kv.k = detail::heads_view(matmul(sh.xs_norm, p.wk_e), d.heads, d.head_dim);
  sh.token_kv.v = detail::heads_view(matmul(sh.xs_norm, p.wv_e), d.heads, d.head_dim);
  auto with_ids = add_state_ids(states, p.state_ids);
  sh.s_norm = layer_norm(with_ids, p.state_ln_gain);
  sh.state_kv.k = detail::heads_view(matmul(sh.s_norm, p.wk_s), d.heads, d.head_dim);
  sh.state_kv.v = detail::heads_view(matmul(sh.s_norm, p.wv_s), d.heads, d.head_dim);
  return sh;
}

// Token update: sliding self-attention over the block (with the prev tile)
// and cross-attention to the states, in parallel; concat, project, residual;
// then the usual MLP block.
template <typename Real>
NodeRef<Real> vertical_substep(const NodeRef<Real>& tokens, const CellShared<Real>& sh,
                               const BlockKV<Real>& prev,
                               const std::vector<std::uint8_t>& prev_valid,
                               const RecurrentCellParams<Real>& p, const ForwardCtx& ctx = {}) {
  const auto& d = p.dims;
  auto q_ve = detail::heads_view(matmul(sh.xs_norm, p.wq_ve), d.heads, d.head_dim);
  auto self_ctx =
      tiled_sliding_attention(q_ve, prev, prev_valid, sh.token_kv.k, sh.token_kv.v,
                              tokens->value.shape[1], p.relpos, p.qk_ve, ctx.dropout_rate, ctx.rng);
  auto q_vs = detail::heads_view(matmul(sh.xs_norm, p.wq_vs), d.heads, d.head_dim);
  auto cross_ctx = cross_attention(q_vs, sh.state_kv.k, sh.state_kv.v, p.qk_vs, ctx.dropout_rate,
                                   ctx.rng);
  auto cat = concat<Real>({detail::merge_heads(self_ctx), detail::merge_heads(cross_ctx)}, -1);
  auto x1 = add(tokens, matmul(cat, p.wo_v));
  auto m = matmul(relu(matmul(layer_norm(x1, p.mlp_ln_gain), p.mlp_w1)), p.mlp_w2);
  if (ctx.dropout_rate > 0.0 && ctx.rng) m = dropout(m, ctx.dropout_rate, *ctx.rng);
  return add(x1, m);
}

// Attention half of the state update: state self-attention and state-to-token
// cross-attention in parallel, concatenated. No position bias anywhere.
template <typename Real>
NodeRef<Real> horizontal_attention_concat(const CellShared<Real>& sh,
                                          const RecurrentCellParams<Real>& p,
                                          const ForwardCtx& ctx = {}) {
  const auto& d = p.dims;
  auto q_hs = detail::heads_view(matmul(sh.s_norm, p.wq_hs), d.heads, d.head_dim);
  auto self_ctx = cross_attention(q_hs, sh.state_kv.k, sh.state_kv.v, p.qk_hs, ctx.dropout_rate,
                                  ctx.rng);
  auto q_he = detail::heads_view(matmul(sh.s_norm, p.wq_he), d.heads, d.head_dim);
  auto cross_ctx = cross_attention(q_he, sh.token_kv.k, sh.token_kv.v, p.qk_he, ctx.dropout_rate,
                                   ctx.rng);
  return concat<Real>({detail::merge_heads(self_ctx), detail::merge_heads(cross_ctx)}, -1);
}

// State update. The gate always operates on the raw running state; the
// layer-normalized (state + ID) view is only used to compute attention.
template <typename Real>
StateBlock<Real> horizontal_substep(const StateBlock<Real>& states, const CellShared<Real>& sh,
                                    const RecurrentCellParams<Real>& p,
                                    const ForwardCtx& ctx = {}) {
  auto cat = horizontal_attention_concat(sh, p, ctx);
  switch (p.dims.gate_config) {
    case GateConfig::kDual: {
      auto c1 = gate_update(states, cat, p.gate1);
      auto hidden = relu(matmul(layer_norm(c1, p.h_mlp_ln_gain), p.h_mlp_w1));
      return gate_update(c1, hidden, p.gate2);
    }
    case GateConfig::kSingle: {
      auto hidden = relu(matmul(cat, p.h_mlp_w1));
      return gate_update(states, hidden, p.gate2);
    }
    case GateConfig::kSkip:
      return gate_update(states, cat, p.gate1);
  }
  throw ConfigError("horizontal_substep: unknown gate configuration");
}

// Convenience wrappers that compute the shared keys/values themselves.
template <typename Real>
NodeRef<Real> vertical_substep(const NodeRef<Real>& tokens, const StateBlock<Real>& states,
                               const BlockKV<Real>& prev,
                               const std::vector<std::uint8_t>& prev_valid,
                               const RecurrentCellParams<Real>& p, const ForwardCtx& ctx = {}) {
  return vertical_substep(tokens, compute_cell_shared(tokens, states, p), prev, prev_valid, p,
                          ctx);
}

template <typename Real>
StateBlock<Real> horizontal_substep(const StateBlock<Real>& states, const NodeRef<Real>& tokens,
                                    const RecurrentCellParams<Real>& p,
                                    const ForwardCtx& ctx = {}) {
  return horizontal_substep(states, compute_cell_shared(tokens, states, p), p, ctx);
}

template <typename Real>
struct CellStepResult {
  NodeRef<Real> token_out;       // [B, W, d]
  StateBlock<Real> next_states;  // [B, S, d]
  BlockKV<Real> cur_kv;          // this block's K_e, V_e for the next window
};

// One block of the recurrent layer. K_e/V_e and K_s/V_s are computed once and
// consumed by both directions.
template <typename Real>
CellStepResult<Real> recurrent_cell_step(const NodeRef<Real>& tokens,
                                         const StateBlock<Real>& states,
                                         const BlockKV<Real>& prev,
                                         const std::vector<std::uint8_t>& prev_valid,
                                         const RecurrentCellParams<Real>& p,
                                         const ForwardCtx& ctx = {}) {
  auto sh = compute_cell_shared(tokens, states, p);
  CellStepResult<Real> r;
  r.token_out = vertical_substep(tokens, sh, prev, prev_valid, p, ctx);
  r.next_states = horizontal_substep(states, sh, p, ctx);
  r.cur_kv = sh.token_kv;
  return r;
}

// Parameter registry. Slots are mutable so callers can rebind leaves (the
// finite-difference harness) as well as read them (optimizer, checkpoints).
template <typename Real>
using ParamVisitor = std::function<void(const std::string&, NodeRef<Real>*)>;

template <typename Real>
void visit_gate_params(GateParams<Real>& g, const std::string& prefix,
                       const ParamVisitor<Real>& fn) {
  fn(prefix + ".w_z", &g.w_z);
  fn(prefix + ".b_z", &g.b_z);
  if (g.type == GateType::kFixed) {
    fn(prefix + ".b_g", &g.b_g);
  } else {
    fn(prefix + ".w_i", &g.w_i);
    fn(prefix + ".b_i", &g.b_i);
    fn(prefix + ".w_f", &g.w_f);
    fn(prefix + ".b_f", &g.b_f);
  }
}

template <typename Real>
void visit_cell_params(RecurrentCellParams<Real>& p, const std::string& prefix,
                       const ParamVisitor<Real>& fn) {
  fn(prefix + ".ln_gain", &p.ln_gain);
  fn(prefix + ".wq_ve", &p.wq_ve);
  fn(prefix + ".wq_vs", &p.wq_vs);
  fn(prefix + ".wk_e", &p.wk_e);
  fn(prefix + ".wv_e", &p.wv_e);
  fn(prefix + ".wo_v", &p.wo_v);
  fn(prefix + ".mlp_ln_gain", &p.mlp_ln_gain);
  fn(prefix + ".mlp_w1", &p.mlp_w1);
  fn(prefix + ".mlp_w2", &p.mlp_w2);
  fn(prefix + ".relpos", &p.relpos.table);
  fn(prefix + ".qk_ve", &p.qk_ve.scale);
  fn(prefix + ".qk_vs", &p.qk_vs.scale);
  fn(prefix + ".qk_hs", &p.qk_hs.scale);
  fn(prefix + ".qk_he", &p.qk_he.scale);
  fn(prefix + ".state_ids", &p.state_ids);
  fn(prefix + ".state_ln_gain", &p.state_ln_gain);
  fn(prefix + ".wk_s", &p.wk_s);
  fn(prefix + ".wv_s", &p.wv_s);
  fn(prefix + ".wq_hs", &p.wq_hs);
  fn(prefix + ".wq_he", &p.wq_he);
  switch (p.dims.gate_config) {
    case GateConfig::kDual:
      visit_gate_params(p.gate1, prefix + ".gate1", fn);
      fn(prefix + ".h_mlp_ln_gain", &p.h_mlp_ln_gain);
      fn(prefix + ".h_mlp_w1", &p.h_mlp_w1);
      visit_gate_params(p.gate2, prefix + ".gate2", fn);
      break;
    case GateConfig::kSingle:
      fn(prefix + ".h_mlp_w1", &p.h_mlp_w1);
      visit_gate_params(p.gate2, prefix + ".gate2", fn);
      break;
    case GateConfig::kSkip:
      visit_gate_params(p.gate1, prefix + ".gate1", fn);
      break;
  }
  fn(prefix + ".init_state", &p.init_state);
}

}  // namespace blockrec
