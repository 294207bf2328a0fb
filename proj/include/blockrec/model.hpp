#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "blockrec/reccell.hpp"

namespace blockrec {

struct ModelConfig {
  i64 vocab_size = 257;
  i64 dim = 128;
  i64 num_layers = 4;
  i64 heads = 4;
  i64 head_dim = 32;
  i64 mlp_hidden = 512;
  i64 window = 32;    // W
  i64 segment = 256;  // N
  i64 num_states = 32;
  std::vector<i64> recurrent_layers;
  GateType gate_type = GateType::kFixed;
  GateConfig gate_config = GateConfig::kSkip;
  bool feedback = false;
  double dropout = 0.0;
  i64 num_buckets = 32;
  i64 max_distance = 128;
  bool share_relpos = false;  // one bias table for all layers
  std::string preset;

  bool is_recurrent(i64 layer) const {
    for (i64 r : recurrent_layers)
      if (r == layer) return true;
    return false;
  }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (dim < 1 || num_layers < 1 || heads < 1 || head_dim < 1 || mlp_hidden < 1)
      throw ConfigError("model dimensions must be positive");
    if (window < 1 || segment < 1) throw ConfigError("window and segment must be positive");
    if (segment % window != 0)
      throw ConfigError("segment length " + std::to_string(segment) +
                        " is not divisible by window " + std::to_string(window));
    if (num_states < 1) throw ConfigError("num_states must be >= 1");
    for (i64 r : recurrent_layers)
      if (r < 0 || r >= num_layers)
        throw ConfigError("recurrent layer index " + std::to_string(r) + " outside [0, " +
                          std::to_string(num_layers) + ")");
    if (feedback && recurrent_layers.empty())
      throw ConfigError("feedback requires at least one recurrent layer");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }

  CellDims cell_dims() const {
    CellDims d;
    d.dim = dim;
    d.heads = heads;
    d.head_dim = head_dim;
    d.window = window;
    d.num_states = num_states;
    d.mlp_hidden = mlp_hidden;
    d.num_buckets = num_buckets;
    d.max_distance = max_distance;
    d.gate_type = gate_type;
    d.gate_config = gate_config;
    return d;
  }
};

// One training example: [batch, N] token ids with next-token targets and a
// loss mask (padding and document-final positions are excluded).
struct Segment {
  i64 batch = 0;
  i64 length = 0;
  std::vector<i64> tokens;
  std::vector<i64> targets;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::uint8_t> reset;  // per stream: document starts here

  i64 tok(i64 b, i64 t) const { return tokens[static_cast<size_t>(b * length + t)]; }
};

template <typename Real>
struct SlidingLayerParams {
  NodeRef<Real> ln_gain, wq, wk, wv, wo;
  NodeRef<Real> mlp_ln_gain, mlp_w1, mlp_w2;
  RelPosBias<Real> relpos;
  QKNorm<Real> qk;
  NodeRef<Real> wq_state;  // feedback only: queries against the broadcast states
};

template <typename Real>
struct LayerParams {
  bool recurrent = false;
  std::optional<SlidingLayerParams<Real>> sliding;
  std::optional<RecurrentCellParams<Real>> cell;
};

template <typename Real>
struct ModelParams {
  ModelConfig config;
  NodeRef<Real> embed;  // [vocab, d]; the output head is weight-tied
  NodeRef<Real> final_ln_gain;
  std::vector<LayerParams<Real>> layers;

  i64 first_recurrent() const {
    for (i64 l = 0; l < config.num_layers; ++l)
      if (layers[static_cast<size_t>(l)].recurrent) return l;
    return -1;
  }
  i64 last_recurrent() const {
    for (i64 l = config.num_layers - 1; l >= 0; --l)
      if (layers[static_cast<size_t>(l)].recurrent) return l;
    return -1;
  }
};

template <typename Real>
ModelParams<Real> init_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams<Real> m;
  m.config = config;
  const i64 d = config.dim, hd = config.heads * config.head_dim;
  auto proj = [&](i64 in, i64 out) {
    return param(random_truncated_normal<Real>({in, out}, std::sqrt(1.0 / double(in)), rng));
  };
  m.embed = param(random_truncated_normal<Real>({config.vocab_size, d},
                                                std::sqrt(1.0 / double(d)), rng));
  m.final_ln_gain = param(Tensor<Real>::full({d}, Real(1)));

  for (i64 l = 0; l < config.num_layers; ++l) {
    LayerParams<Real> layer;
    if (config.is_recurrent(l)) {
      layer.recurrent = true;
      layer.cell = init_recurrent_cell<Real>(config.cell_dims(), rng);
    } else {
      SlidingLayerParams<Real> sp;
      sp.ln_gain = param(Tensor<Real>::full({d}, Real(1)));
      sp.wq = proj(d, hd);
      sp.wk = proj(d, hd);
      sp.wv = proj(d, hd);
      sp.wo = proj(hd, d);
      sp.mlp_ln_gain = param(Tensor<Real>::full({d}, Real(1)));
      sp.mlp_w1 = proj(d, config.mlp_hidden);
      sp.mlp_w2 = proj(config.mlp_hidden, d);
      sp.relpos = make_relpos_bias<Real>(config.num_buckets, config.max_distance, config.heads);
      sp.qk = make_qk_norm<Real>(config.heads, config.head_dim);
      if (config.feedback) sp.wq_state = proj(d, hd);
      layer.sliding = std::move(sp);
    }
    m.layers.push_back(std::move(layer));
  }

  if (config.share_relpos) {
    NodeRef<Real>* first = nullptr;
    for (auto& layer : m.layers) {
      NodeRef<Real>* table =
          layer.recurrent ? &layer.cell->relpos.table : &layer.sliding->relpos.table;
      if (first == nullptr)
        first = table;
      else
        *table = *first;
    }
  }
  return m;
}

template <typename Real>
void visit_sliding_params(SlidingLayerParams<Real>& p, const std::string& prefix,
                          const ParamVisitor<Real>& fn) {
  fn(prefix + ".ln_gain", &p.ln_gain);
  fn(prefix + ".wq", &p.wq);
  fn(prefix + ".wk", &p.wk);
  fn(prefix + ".wv", &p.wv);
  fn(prefix + ".wo", &p.wo);
  fn(prefix + ".mlp_ln_gain", &p.mlp_ln_gain);
  fn(prefix + ".mlp_w1", &p.mlp_w1);
  fn(prefix + ".mlp_w2", &p.mlp_w2);
  fn(prefix + ".relpos", &p.relpos.table);
  fn(prefix + ".qk", &p.qk.scale);
  if (p.wq_state) fn(prefix + ".wq_state", &p.wq_state);
}

template <typename Real>
void visit_model_params(ModelParams<Real>& m, const ParamVisitor<Real>& fn) {
  fn("embed", &m.embed);
  fn("final_ln_gain", &m.final_ln_gain);
  for (i64 l = 0; l < m.config.num_layers; ++l) {
    auto& layer = m.layers[static_cast<size_t>(l)];
    const std::string prefix = "layer" + std::to_string(l);
    if (layer.recurrent)
      visit_cell_params(*layer.cell, prefix + ".cell", fn);
    else
      visit_sliding_params(*layer.sliding, prefix, fn);
  }
}

// Named parameter slots in a stable order, with shared tables deduplicated.
template <typename Real>
std::vector<std::pair<std::string, NodeRef<Real>*>> collect_params(ModelParams<Real>& m) {
  std::vector<std::pair<std::string, NodeRef<Real>*>> out;
  std::vector<const Node<Real>*> seen;
  visit_model_params<Real>(m, [&](const std::string& name, NodeRef<Real>* slot) {
    for (const auto* s : seen)
      if (s == slot->get()) return;
    seen.push_back(slot->get());
    out.push_back({name, slot});
  });
  return out;
}

template <typename Real>
i64 parameter_count(ModelParams<Real>& m) {
  i64 n = 0;
  for (auto& [name, slot] : collect_params(m)) n += (*slot)->value.numel();
  return n;
}

// Analytic parameter count (no allocation); checked against initialized
// models in the test suite.
inline i64 parameter_count(const ModelConfig& c) {
  const i64 d = c.dim, hd = c.heads * c.head_dim;
  auto gate_params = [&](i64 d_in) {
    i64 n = d_in * d + d;                            // w_z, b_z
    n += c.gate_type == GateType::kFixed ? d : 2 * (d_in * d + d);  // b_g or w_i/b_i/w_f/b_f
    return n;
  };
  i64 total = c.vocab_size * d + d;  // embedding + final gain
  for (i64 l = 0; l < c.num_layers; ++l) {
    if (c.is_recurrent(l)) {
      i64 n = d;                                     // token ln gain
      n += 4 * d * hd;                               // wq_ve, wq_vs, wk_e, wv_e
      n += 2 * hd * d;                               // wo_v
      n += d + d * c.mlp_hidden + c.mlp_hidden * d;  // vertical mlp gain + weights
      n += 4 * c.heads;                              // four qk scales
      n += c.num_states * d + d;                     // state ids + state ln gain
      n += 4 * d * hd;                               // wk_s, wv_s, wq_hs, wq_he
      switch (c.gate_config) {
        case GateConfig::kDual:
          n += gate_params(2 * hd) + d + d * c.mlp_hidden + gate_params(c.mlp_hidden);
          break;
        case GateConfig::kSingle:
          n += 2 * hd * c.mlp_hidden + gate_params(c.mlp_hidden);
          break;
        case GateConfig::kSkip:
          n += gate_params(2 * hd);
          break;
      }
      n += c.num_states * d;  // learned initial state
      total += n;
    } else {
      i64 n = d + 4 * d * hd;  // ln gain + wq, wk, wv, wo
      n += d + d * c.mlp_hidden + c.mlp_hidden * d;
      n += c.heads;  // qk scale
      if (c.feedback) n += d * hd;
      total += n;
    }
  }
  const i64 relpos = c.num_buckets * c.heads;
  total += (c.share_relpos ? 1 : c.num_layers) * relpos;
  return total;
}

// ---- caches -----------------------------------------------------------------

// Non-differentiable carry-over between segments: the last block's raw keys
// and values per layer, plus the running states for recurrent layers.
template <typename Real>
struct LayerCache {
  Tensor<Real> k, v;      // [B, W, h, dh]
  Tensor<Real> states;    // [B, S, d]; empty for non-recurrent layers
  std::vector<std::uint8_t> kv_valid;     // per stream
  std::vector<std::uint8_t> state_fresh;  // per stream: start from the learned init
};

template <typename Real>
struct CacheSet {
  i64 batch = 0;
  std::vector<LayerCache<Real>> layers;
};

template <typename Real>
CacheSet<Real> init_caches(const ModelParams<Real>& m, i64 batch) {
  const auto& c = m.config;
  CacheSet<Real> cs;
  cs.batch = batch;
  for (i64 l = 0; l < c.num_layers; ++l) {
    LayerCache<Real> lc;
    lc.k = Tensor<Real>::zeros({batch, c.window, c.heads, c.head_dim});
    lc.v = Tensor<Real>::zeros({batch, c.window, c.heads, c.head_dim});
    lc.kv_valid.assign(static_cast<size_t>(batch), 0);
    if (c.is_recurrent(l)) {
      lc.states = Tensor<Real>::zeros({batch, c.num_states, c.dim});
      lc.state_fresh.assign(static_cast<size_t>(batch), 1);
    }
    cs.layers.push_back(std::move(lc));
  }
  return cs;
}

// ---- forward pass -----------------------------------------------------------

template <typename Real>
struct SegmentResult {
  NodeRef<Real> logits;  // [B, N, vocab]
  // graph-attached cache outputs, detached into a CacheSet by detach_caches
  std::vector<BlockKV<Real>> kv_out;
  std::vector<StateBlock<Real>> state_out;  // null for non-recurrent layers
};

namespace detail {

template <typename Real>
struct SlidingOut {
  NodeRef<Real> out;
  BlockKV<Real> kv;       // raw keys/values of the whole input span
  BlockKV<Real> last_kv;  // last W positions, for the cache
};

template <typename Real>
SlidingOut<Real> sliding_layer_forward(const NodeRef<Real>& x, const BlockKV<Real>& prev,
                                       const std::vector<std::uint8_t>& prev_valid,
                                       SlidingLayerParams<Real>& p, i64 window,
                                       const BlockKV<Real>* feedback_kv, const ForwardCtx& ctx) {
  auto xn = layer_norm(x, p.ln_gain);
  const i64 heads = p.qk.scale->value.shape[0];
  const i64 head_dim = p.wq->value.shape[1] / heads;
  auto q = heads_view(matmul(xn, p.wq), heads, head_dim);
  auto k = heads_view(matmul(xn, p.wk), heads, head_dim);
  auto v = heads_view(matmul(xn, p.wv), heads, head_dim);
  auto attn = tiled_sliding_attention(q, prev, prev_valid, k, v, window, p.relpos, p.qk,
                                      ctx.dropout_rate, ctx.rng);
  if (feedback_kv != nullptr) {
    auto qs = heads_view(matmul(xn, p.wq_state), heads, head_dim);
    auto cross = cross_attention(qs, feedback_kv->k, feedback_kv->v, p.qk, ctx.dropout_rate,
                                 ctx.rng);
    attn = add(attn, cross);
  }
  auto x1 = add(x, matmul(merge_heads(attn), p.wo));
  auto m = matmul(relu(matmul(layer_norm(x1, p.mlp_ln_gain), p.mlp_w1)), p.mlp_w2);
  if (ctx.dropout_rate > 0.0 && ctx.rng) m = dropout(m, ctx.dropout_rate, *ctx.rng);

  SlidingOut<Real> r;
  r.out = add(x1, m);
  r.kv = {k, v};
  const i64 n = x->value.shape[1];
  if (n == window) {
    r.last_kv = r.kv;
  } else {
    r.last_kv = {split(k, 1, {n - window, window})[1], split(v, 1, {n - window, window})[1]};
  }
  return r;
}

// State keys/values for block-feedback: computed once per block and consumed
// by every non-recurrent layer.
template <typename Real>
BlockKV<Real> feedback_state_kv(const StateBlock<Real>& states,
                                const RecurrentCellParams<Real>& cell) {
  auto s_norm = layer_norm(add_state_ids(states, cell.state_ids), cell.state_ln_gain);
  BlockKV<Real> kv;
  kv.k = heads_view(matmul(s_norm, cell.wk_s), cell.dims.heads, cell.dims.head_dim);
  kv.v = heads_view(matmul(s_norm, cell.wv_s), cell.dims.heads, cell.dims.head_dim);
  return kv;
}

// Initial states for this segment: the learned start vector for fresh or
// reset streams, the cached tensor for continuing ones.
template <typename Real>
StateBlock<Real> mix_initial_states(const LayerCache<Real>& cache,
                                    const RecurrentCellParams<Real>& cell, i64 batch,
                                    const std::vector<std::uint8_t>& reset) {
  const i64 S = cell.dims.num_states, d = cell.dims.dim;
  bool any_fresh = false, all_fresh = true;
  std::vector<std::uint8_t> fresh(static_cast<size_t>(batch));
  for (i64 b = 0; b < batch; ++b) {
    fresh[size_t(b)] = cache.state_fresh[size_t(b)] || reset[size_t(b)] ? 1 : 0;
    any_fresh = any_fresh || fresh[size_t(b)];
    all_fresh = all_fresh && fresh[size_t(b)];
  }
  auto learned = expand_leading(cell.init_state, batch);  // [B, S, d]
  if (all_fresh) return learned;
  auto cached = constant(cache.states);
  if (!any_fresh) return cached;
  Tensor<Real> mask({batch, S, d});
  for (i64 b = 0; b < batch; ++b)
    for (i64 i = 0; i < S * d; ++i)
      mask.data[static_cast<size_t>(b * S * d + i)] = fresh[size_t(b)] ? Real(1) : Real(0);
  Tensor<Real> inv = mask;
  for (Real& x : inv.data) x = Real(1) - x;
  return add(mul(learned, constant(mask)), mul(cached, constant(inv)));
}

}  // namespace detail

// Runs one segment through the stack. Cached keys/values and states enter as
// constants (gradients are truncated there); segments see their own blocks
// differentiably. With feedback enabled, every layer cross-attends to the
// recurrent states produced by the previous block.
template <typename Real>
SegmentResult<Real> forward_segment(const Segment& seg, const CacheSet<Real>& caches,
                                    ModelParams<Real>& m, const ForwardCtx& ctx = {}) {
  const auto& c = m.config;
  const i64 B = seg.batch, N = seg.length, W = c.window;
  contract(B >= 1 && N >= 1, "forward_segment: empty segment");
  if (N % W != 0)
    throw ConfigError("segment length " + std::to_string(N) + " not divisible by window " +
                      std::to_string(W));
  if (caches.batch != B || static_cast<i64>(caches.layers.size()) != c.num_layers)
    throw ConfigError("forward_segment: cache set does not match model/batch");

  // per-stream validity of the cached prev tile for the first block
  std::vector<std::uint8_t> valid0(static_cast<size_t>(B));
  const std::vector<std::uint8_t> valid_in(static_cast<size_t>(B), 1);

  auto emb = embedding(m.embed, seg.tokens, {B, N});

  SegmentResult<Real> result;
  result.kv_out.resize(static_cast<size_t>(c.num_layers));
  result.state_out.resize(static_cast<size_t>(c.num_layers));

  NodeRef<Real> h;
  if (!c.feedback) {
    // Layer by layer over the whole segment; only recurrent layers need the
    // internal block loop.
    h = emb;
    for (i64 l = 0; l < c.num_layers; ++l) {
      auto& layer = m.layers[size_t(l)];
      const auto& cache = caches.layers[size_t(l)];
      for (i64 b = 0; b < B; ++b)
        valid0[size_t(b)] = cache.kv_valid[size_t(b)] && !seg.reset[size_t(b)] ? 1 : 0;
      BlockKV<Real> prev{constant(cache.k), constant(cache.v)};
      if (!layer.recurrent) {
        auto r = detail::sliding_layer_forward(h, prev, valid0, *layer.sliding, W,
                                               static_cast<const BlockKV<Real>*>(nullptr), ctx);
        h = r.out;
        result.kv_out[size_t(l)] = r.last_kv;
      } else {
        auto& cell = *layer.cell;
        auto states = detail::mix_initial_states(cache, cell, B, seg.reset);
        const i64 blocks = N / W;
        std::vector<i64> sizes(static_cast<size_t>(blocks), W);
        auto xb = split(h, 1, sizes);
        std::vector<NodeRef<Real>> outs;
        BlockKV<Real> bprev = prev;
        for (i64 b = 0; b < blocks; ++b) {
          auto r = recurrent_cell_step(xb[size_t(b)], states, bprev,
                                       b == 0 ? valid0 : valid_in, cell, ctx);
          outs.push_back(r.token_out);
          states = r.next_states;
          bprev = r.cur_kv;
        }
        h = concat(outs, 1);
        result.kv_out[size_t(l)] = bprev;
        result.state_out[size_t(l)] = states;
      }
    }
  } else {
    // Block-column order: the previous block's recurrent states are broadcast
    // to every layer of the next block.
    const i64 fb_layer = m.last_recurrent();
    const i64 blocks = N / W;
    std::vector<i64> sizes(static_cast<size_t>(blocks), W);
    auto xb = split(emb, 1, sizes);

    std::vector<BlockKV<Real>> prev(static_cast<size_t>(c.num_layers));
    std::vector<StateBlock<Real>> states(static_cast<size_t>(c.num_layers));
    for (i64 l = 0; l < c.num_layers; ++l) {
      const auto& cache = caches.layers[size_t(l)];
      prev[size_t(l)] = {constant(cache.k), constant(cache.v)};
      if (m.layers[size_t(l)].recurrent)
        states[size_t(l)] =
            detail::mix_initial_states(cache, *m.layers[size_t(l)].cell, B, seg.reset);
    }

    std::vector<NodeRef<Real>> outs;
    for (i64 blk = 0; blk < blocks; ++blk) {
      auto fb_kv =
          detail::feedback_state_kv(states[size_t(fb_layer)], *m.layers[size_t(fb_layer)].cell);
      auto x = xb[size_t(blk)];
      for (i64 l = 0; l < c.num_layers; ++l) {
        auto& layer = m.layers[size_t(l)];
        std::vector<std::uint8_t> valid(static_cast<size_t>(B), 1);
        if (blk == 0) {
          const auto& cache = caches.layers[size_t(l)];
          for (i64 b = 0; b < B; ++b)
            valid[size_t(b)] = cache.kv_valid[size_t(b)] && !seg.reset[size_t(b)] ? 1 : 0;
        }
        if (!layer.recurrent) {
          auto r = detail::sliding_layer_forward(x, prev[size_t(l)], valid, *layer.sliding, W,
                                                 &fb_kv, ctx);
          x = r.out;
          prev[size_t(l)] = r.kv;
        } else {
          auto r = recurrent_cell_step(x, states[size_t(l)], prev[size_t(l)], valid,
                                       *layer.cell, ctx);
          x = r.token_out;
          states[size_t(l)] = r.next_states;
          prev[size_t(l)] = r.cur_kv;
        }
      }
      outs.push_back(x);
    }
    h = concat(outs, 1);
    for (i64 l = 0; l < c.num_layers; ++l) {
      result.kv_out[size_t(l)] = prev[size_t(l)];
      if (m.layers[size_t(l)].recurrent) result.state_out[size_t(l)] = states[size_t(l)];
    }
  }

  auto hn = layer_norm(h, m.final_ln_gain);
  result.logits = scale(matmul_nt(hn, m.embed),
                        static_cast<Real>(1.0 / std::sqrt(double(c.dim))));
  return result;
}

// Writes the final block's keys/values and states into a fresh cache set.
// Values are copied out of the graph, so gradients never flow through them.
template <typename Real>
CacheSet<Real> detach_caches(const SegmentResult<Real>& r, const ModelParams<Real>& m,
                             i64 batch) {
  CacheSet<Real> cs;
  cs.batch = batch;
  const auto& c = m.config;
  for (i64 l = 0; l < c.num_layers; ++l) {
    LayerCache<Real> lc;
    lc.k = r.kv_out[size_t(l)].k->value;
    lc.v = r.kv_out[size_t(l)].v->value;
    lc.kv_valid.assign(static_cast<size_t>(batch), 1);
    if (m.layers[size_t(l)].recurrent) {
      lc.states = r.state_out[size_t(l)]->value;
      lc.state_fresh.assign(static_cast<size_t>(batch), 0);
    }
    cs.layers.push_back(std::move(lc));
  }
  return cs;
}

// ---- cost accounting ----------------------------------------------------------

struct ScoreCount {
  i64 sliding = 0;    // per sliding layer, per stream and head
  i64 recurrent = 0;  // per recurrent layer, per stream and head
};

// Attention scores per segment: each block computes a W x 2W tile; recurrent
// layers add S^2 state self-attention and 2 S W token/state cross terms.
inline ScoreCount attention_score_count(const ModelConfig& c) {
  const i64 blocks = c.segment / c.window;
  ScoreCount sc;
  sc.sliding = c.window * 2 * c.window * blocks;
  sc.recurrent = (2 * c.window * c.window + c.num_states * c.num_states +
                  2 * c.num_states * c.window) *
                 blocks;
  return sc;
}

}  // namespace blockrec
