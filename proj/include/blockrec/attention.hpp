#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "blockrec/graph.hpp"

namespace blockrec {

// T5-style relative position bucket for causal attention. Small distances map
// to themselves, larger ones are spaced logarithmically, and everything at or
// beyond max_distance saturates into the last bucket.
inline i64 relative_position_bucket(i64 distance, i64 num_buckets, i64 max_distance) {
  contract(distance >= 0, "relative_position_bucket: distance must be non-negative");
  contract(num_buckets >= 2 && max_distance > num_buckets / 2, "relative_position_bucket: bad parameters");
  const i64 max_exact = num_buckets / 2;
  if (distance < max_exact) return distance;
  const double frac = std::log(static_cast<double>(distance) / static_cast<double>(max_exact)) /
                      std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact));
  const i64 bucket = max_exact + static_cast<i64>(frac * static_cast<double>(num_buckets - max_exact));
  return std::min(bucket, num_buckets - 1);
}

template <typename Real>
struct RelPosBias {
  NodeRef<Real> table;  // [num_buckets, heads]
  i64 num_buckets = 32;
  i64 max_distance = 128;
};

template <typename Real>
RelPosBias<Real> make_relpos_bias(i64 num_buckets, i64 max_distance, i64 heads) {
  RelPosBias<Real> b;
  b.num_buckets = num_buckets;
  b.max_distance = max_distance;
  b.table = param(Tensor<Real>({num_buckets, heads}));
  return b;
}

// Per-head logit scale applied after unit-normalizing queries and keys.
template <typename Real>
struct QKNorm {
  NodeRef<Real> scale;  // [heads]
};

template <typename Real>
QKNorm<Real> make_qk_norm(i64 heads, i64 head_dim) {
  QKNorm<Real> q;
  q.scale = param(Tensor<Real>::full({heads}, static_cast<Real>(std::sqrt(double(head_dim)))));
  return q;
}

// Unit-normalizes q and k along head_dim and folds the per-head logit scale
// into q. Inputs are [..., heads, head_dim].
template <typename Real>
std::pair<NodeRef<Real>, NodeRef<Real>> qk_normalize(const NodeRef<Real>& q,
                                                     const NodeRef<Real>& k,
                                                     const QKNorm<Real>& params) {
  contract(q->value.rank() >= 2 && k->value.rank() >= 2, "qk_normalize: rank must be >= 2");
  auto qn = scale_axis(l2_normalize_last(q), params.scale, q->value.rank() - 2);
  auto kn = l2_normalize_last(k);
  return {qn, kn};
}

// Keys and values of one block: [batch, T, heads, head_dim].
template <typename Real>
struct BlockKV {
  NodeRef<Real> k, v;
};

namespace detail {

// Additive bias for one W x 2W tile, laid out [heads, W, 2W]. Key j sits at
// distance W + i - j from query i; negative distances are masked out by the
// causal mask so their bucket does not matter.
template <typename Real>
NodeRef<Real> tile_bias(const RelPosBias<Real>& bias, i64 window) {
  std::vector<i64> buckets;
  buckets.reserve(static_cast<size_t>(window * 2 * window));
  for (i64 i = 0; i < window; ++i)
    for (i64 j = 0; j < 2 * window; ++j) {
      const i64 dist = window + i - j;
      buckets.push_back(dist >= 0 ? relative_position_bucket(dist, bias.num_buckets, bias.max_distance)
                                  : 0);
    }
  auto gathered = embedding(bias.table, buckets, {window, 2 * window});  // [W, 2W, h]
  return transpose(transpose(gathered, 0, 2), 1, 2);                     // [h, W, 2W]
}

// Mask for one tile: disallow the future (j > i + W), positions further back
// than the window (j < i), and for the first block an invalidated prev tile.
inline Tensor<std::uint8_t> tile_mask(i64 batch, i64 heads, i64 window,
                                      const std::vector<std::uint8_t>* prev_valid) {
  Tensor<std::uint8_t> mask({batch, heads, window, 2 * window});
  size_t off = 0;
  for (i64 b = 0; b < batch; ++b) {
    const bool prev_ok = prev_valid == nullptr || (*prev_valid)[static_cast<size_t>(b)] != 0;
    for (i64 h = 0; h < heads; ++h)
      for (i64 i = 0; i < window; ++i)
        for (i64 j = 0; j < 2 * window; ++j, ++off) {
          bool allowed = j >= i && j <= i + window;
          if (j < window && !prev_ok) allowed = false;
          mask.data[off] = allowed ? 0 : 1;
        }
  }
  return mask;
}

template <typename Real>
constexpr Real mask_fill_value() {
  return Real(-1e30);
}

}  // namespace detail

// Causal sliding-window attention over a segment of N tokens, computed in
// N/W tiles of size W x 2W. `prev` holds the (raw, post-projection) keys and
// values of the W tokens preceding position 0; prev_valid flags streams whose
// prev tile is usable (false at true sequence start). Each token attends to
// itself and the W previous tokens.
template <typename Real>
NodeRef<Real> tiled_sliding_attention(const NodeRef<Real>& q, const BlockKV<Real>& prev,
                                      const std::vector<std::uint8_t>& prev_valid,
                                      const NodeRef<Real>& cur_k, const NodeRef<Real>& cur_v,
                                      i64 window, const RelPosBias<Real>& bias,
                                      const QKNorm<Real>& qknorm, double dropout_rate = 0.0,
                                      Rng* rng = nullptr) {
  const Shape& qs = q->value.shape;
  contract(qs.size() == 4, "tiled_sliding_attention: q must be [batch, N, heads, head_dim]");
  const i64 batch = qs[0], n = qs[1], heads = qs[2];
  contract(n % window == 0, "tiled_sliding_attention: N=" + std::to_string(n) +
                                " not divisible by W=" + std::to_string(window));
  contract(cur_k->value.shape == qs && cur_v->value.shape == qs,
           "tiled_sliding_attention: k/v shape mismatch");
  Shape prev_shape = {batch, window, heads, qs[3]};
  contract(prev.k->value.shape == prev_shape && prev.v->value.shape == prev_shape,
           "tiled_sliding_attention: prev tile must be " + shape_str(prev_shape));
  contract(static_cast<i64>(prev_valid.size()) == batch,
           "tiled_sliding_attention: prev_valid must have one flag per stream");

  auto [qn, kn] = qk_normalize(q, cur_k, qknorm);
  auto prev_kn = l2_normalize_last(prev.k);

  const i64 blocks = n / window;
  std::vector<i64> sizes(static_cast<size_t>(blocks), window);
  auto q_blocks = split(qn, 1, sizes);
  auto k_blocks = split(kn, 1, sizes);
  auto v_blocks = split(cur_v, 1, sizes);

  auto bias_tile = detail::tile_bias(bias, window);
  const auto full_mask = detail::tile_mask(batch, heads, window, nullptr);
  const auto start_mask = detail::tile_mask(batch, heads, window, &prev_valid);

  std::vector<NodeRef<Real>> outs;
  outs.reserve(static_cast<size_t>(blocks));
  for (i64 b = 0; b < blocks; ++b) {
    auto tile_k = concat<Real>({b == 0 ? prev_kn : k_blocks[static_cast<size_t>(b - 1)],
                                k_blocks[static_cast<size_t>(b)]},
                               1);
    auto tile_v = concat<Real>({b == 0 ? prev.v : v_blocks[static_cast<size_t>(b - 1)],
                                v_blocks[static_cast<size_t>(b)]},
                               1);
    auto qh = transpose(q_blocks[static_cast<size_t>(b)], 1, 2);  // [B, h, W, dh]
    auto kh = transpose(tile_k, 1, 2);                            // [B, h, 2W, dh]
    auto vh = transpose(tile_v, 1, 2);
    auto logits = add(matmul_nt(qh, kh), bias_tile);
    logits = masked_fill(logits, b == 0 ? start_mask : full_mask, detail::mask_fill_value<Real>());
    auto weights = softmax_last(logits);
    if (dropout_rate > 0.0 && rng != nullptr) weights = dropout(weights, dropout_rate, *rng);
    outs.push_back(transpose(matmul(weights, vh), 1, 2));  // back to [B, W, h, dh]
  }
  return concat(outs, 1);
}

// Full attention of A queries over B keys with no mask and no position bias.
template <typename Real>
NodeRef<Real> cross_attention(const NodeRef<Real>& q, const NodeRef<Real>& k,
                              const NodeRef<Real>& v, const QKNorm<Real>& qknorm,
                              double dropout_rate = 0.0, Rng* rng = nullptr) {
  contract(q->value.rank() == 4 && k->value.rank() == 4, "cross_attention: expect [B, T, h, dh]");
  contract(k->value.shape == v->value.shape, "cross_attention: k/v shape mismatch");
  contract(k->value.shape[1] >= 1, "cross_attention: need at least one key");
  auto [qn, kn] = qk_normalize(q, k, qknorm);
  auto qh = transpose(qn, 1, 2);
  auto kh = transpose(kn, 1, 2);
  auto vh = transpose(v, 1, 2);
  auto weights = softmax_last(matmul_nt(qh, kh));
  if (dropout_rate > 0.0 && rng != nullptr) weights = dropout(weights, dropout_rate, *rng);
  return transpose(matmul(weights, vh), 1, 2);
}

}  // namespace blockrec
