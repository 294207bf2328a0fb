#pragma once

#include <functional>
#include <string>
#include <vector>

#include "blockrec/gradcheck.hpp"
#include "blockrec/optim.hpp"

namespace blockrec {

struct VerifyResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

namespace detail {

inline NodeRef<double> weighted(const NodeRef<double>& x, const Tensor<double>& w) {
  return sum_all(mul(x, constant(w)));
}

}  // namespace detail

// Finite-difference verification of every graph primitive, both gate types,
// both cell substeps, and a full two-block segment loss at toy dimensions.
// Every check runs in double precision against central differences.
inline std::vector<VerifyResult> run_gradient_checks() {
  std::vector<VerifyResult> results;
  Rng rng(20240229);
  auto randn = [&](Shape s, double stddev = 1.0) {
    return random_normal<double>(std::move(s), stddev, rng);
  };
  auto check = [&](const std::string& name, double tol, const ScalarFn& f,
                   std::vector<Tensor<double>> inputs) {
    VerifyResult r;
    r.name = name;
    r.tolerance = tol;
    r.max_rel_err = grad_check(f, std::move(inputs), 1e-5);
    r.pass = r.max_rel_err < tol;
    results.push_back(r);
  };
  const double op_tol = 1e-6;
  const double net_tol = 1e-4;

  // ---- primitive operations ----
  Tensor<double> w23 = randn({2, 3});
  Tensor<double> w234 = randn({2, 3, 4});
  Tensor<double> w46 = randn({4, 6});

  check("op.add", op_tol,
        [&](const std::vector<NodeRef<double>>& in) { return detail::weighted(add(in[0], in[1]), w23); },
        {randn({2, 3}), randn({3})});
  check("op.sub", op_tol,
        [&](const std::vector<NodeRef<double>>& in) { return detail::weighted(sub(in[0], in[1]), w23); },
        {randn({2, 3}), randn({2, 3})});
  check("op.mul", op_tol,
        [&](const std::vector<NodeRef<double>>& in) { return detail::weighted(mul(in[0], in[1]), w234); },
        {randn({2, 3, 4}), randn({4})});
  check("op.scale", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(add_scalar(scale(in[0], -1.7), 0.4), w23);
        },
        {randn({2, 3})});
  check("op.matmul", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(matmul(in[0], in[1]), w234);
        },
        {randn({2, 3, 5}), randn({5, 4})});
  check("op.matmul_batched", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(matmul(in[0], in[1]), w234);
        },
        {randn({2, 3, 5}), randn({2, 5, 4})});
  check("op.matmul_nt", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(matmul_nt(in[0], in[1]), w234);
        },
        {randn({2, 3, 5}), randn({2, 4, 5})});
  check("op.transpose", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(transpose(in[0], 0, 2), w234);
        },
        {randn({4, 3, 2})});
  check("op.reshape", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(reshape(in[0], {2, 3, 4}), w234);
        },
        {randn({6, 4})});
  check("op.concat", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(concat<double>({in[0], in[1]}, 1), w234);
        },
        {randn({2, 1, 4}), randn({2, 2, 4})});
  check("op.split", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(split(in[0], 1, {1, 3})[1], w234);
        },
        {randn({2, 4, 4})});
  check("op.expand_leading", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(expand_leading(in[0], 2), w234);
        },
        {randn({3, 4})});
  check("op.sigmoid", op_tol,
        [&](const std::vector<NodeRef<double>>& in) { return detail::weighted(sigmoid(in[0]), w23); },
        {randn({2, 3})});
  check("op.tanh", op_tol,
        [&](const std::vector<NodeRef<double>>& in) { return detail::weighted(tanh(in[0]), w23); },
        {randn({2, 3})});
  {
    Tensor<double> x({2, 3}, {0.6, -0.8, 1.2, -0.5, 2.1, -1.4});
    check("op.relu", op_tol,
          [&](const std::vector<NodeRef<double>>& in) { return detail::weighted(relu(in[0]), w23); },
          {x});
  }
  check("op.exp", op_tol,
        [&](const std::vector<NodeRef<double>>& in) { return detail::weighted(exp(in[0]), w23); },
        {randn({2, 3})});
  {
    Tensor<double> x({2, 3}, {0.6, 0.8, 1.2, 0.5, 2.1, 1.4});
    check("op.log", op_tol,
          [&](const std::vector<NodeRef<double>>& in) { return detail::weighted(log(in[0]), w23); },
          {x});
  }
  check("op.softmax", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(softmax_last(in[0]), w46);
        },
        {randn({4, 6})});
  check("op.layer_norm", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(layer_norm(in[0], in[1]), w46);
        },
        {randn({4, 6}), randn({6})});
  check("op.l2_normalize", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(l2_normalize_last(in[0]), w46);
        },
        {randn({4, 6})});
  check("op.scale_axis", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(scale_axis(in[0], in[1], 1), w234);
        },
        {randn({2, 3, 4}), randn({3})});
  check("op.embedding", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(embedding(in[0], {2, 0, 2, 4}, {4}), w46);
        },
        {randn({5, 6})});
  check("op.cross_entropy", op_tol,
        [&](const std::vector<NodeRef<double>>& in) {
          return detail::weighted(cross_entropy_logits(in[0], {1, 5, 0, 3}),
                                  Tensor<double>({4}, {0.7, -0.4, 1.2, 0.9}));
        },
        {randn({4, 6})});
  check("op.sum", op_tol,
        [&](const std::vector<NodeRef<double>>& in) { return sum_all(in[0]); }, {randn({3, 3})});
  check("op.mean", op_tol,
        [&](const std::vector<NodeRef<double>>& in) { return mean_all(in[0]); }, {randn({3, 3})});
  {
    Tensor<std::uint8_t> mask({2, 3});
    mask.data = {0, 1, 0, 0, 0, 1};
    check("op.masked_fill", op_tol,
          [&](const std::vector<NodeRef<double>>& in) {
            return detail::weighted(masked_fill(in[0], mask, -3.0), w23);
          },
          {randn({2, 3})});
  }
  {
    // stop_gradient: the adjoint must be exactly zero while values pass through
    VerifyResult r;
    r.name = "op.stop_gradient";
    r.tolerance = 0.0;
    auto x = param(randn({3}));
    auto y = param(randn({3}));
    auto root = sum_all(mul(stop_gradient(x), y));
    auto grads = forward_backward(root);
    const bool value_ok =
        stop_gradient(x)->value.data == x->value.data && grads.count(x.get()) == 0;
    r.pass = value_ok;
    r.max_rel_err = value_ok ? 0.0 : 1.0;
    results.push_back(r);
  }

  // ---- gates (both types) ----
  for (auto type : {GateType::kFixed, GateType::kLstm}) {
    auto params = init_gate_params<double>(type, 6, 5, rng);
    std::vector<std::pair<std::string, NodeRef<double>*>> slots;
    visit_gate_params<double>(params, "g",
                              [&](const std::string& n, NodeRef<double>* s) { slots.push_back({n, s}); });
    std::vector<Tensor<double>> inputs{randn({2, 3, 5}), randn({2, 3, 6})};
    for (auto& [n, s] : slots) inputs.push_back((*s)->value);
    Tensor<double> w = randn({2, 3, 5});
    check(std::string("gate.") + to_string(type), net_tol,
          [&, type](const std::vector<NodeRef<double>>& in) {
            GateParams<double> g = params;
            std::vector<std::pair<std::string, NodeRef<double>*>> gs;
            visit_gate_params<double>(g, "g",
                                      [&](const std::string& n, NodeRef<double>* s) { gs.push_back({n, s}); });
            for (size_t i = 0; i < gs.size(); ++i) *gs[i].second = in[2 + i];
            return detail::weighted(gate_update(in[0], in[1], g), w);
          },
          inputs);
  }

  // ---- cell substeps ----
  for (auto [type, cfg] : {std::pair{GateType::kFixed, GateConfig::kSkip},
                           std::pair{GateType::kLstm, GateConfig::kDual},
                           std::pair{GateType::kFixed, GateConfig::kSingle}}) {
    CellDims dims;
    dims.dim = 8;
    dims.heads = 2;
    dims.head_dim = 4;
    dims.window = 4;
    dims.num_states = 2;
    dims.mlp_hidden = 16;
    dims.gate_type = type;
    dims.gate_config = cfg;
    auto cell = init_recurrent_cell<double>(dims, rng);
    std::vector<std::pair<std::string, NodeRef<double>*>> slots;
    visit_cell_params<double>(cell, "c",
                              [&](const std::string& n, NodeRef<double>* s) { slots.push_back({n, s}); });
    std::vector<Tensor<double>> inputs{randn({1, dims.window, dims.dim}),
                                       randn({1, dims.num_states, dims.dim}),
                                       randn({1, dims.window, dims.heads, dims.head_dim}),
                                       randn({1, dims.window, dims.heads, dims.head_dim})};
    for (auto& [n, s] : slots) inputs.push_back((*s)->value);

    auto rebuild = [&cell](const std::vector<NodeRef<double>>& in) {
      RecurrentCellParams<double> q = cell;
      std::vector<std::pair<std::string, NodeRef<double>*>> qs;
      visit_cell_params<double>(q, "c",
                                [&](const std::string& n, NodeRef<double>* s) { qs.push_back({n, s}); });
      for (size_t i = 0; i < qs.size(); ++i) *qs[i].second = in[4 + i];
      return q;
    };
    const std::string tag = to_string(type) + ":" + to_string(cfg);
    check("cell.vertical." + tag, net_tol,
          [&](const std::vector<NodeRef<double>>& in) {
            auto q = rebuild(in);
            auto out = vertical_substep(in[0], in[1], BlockKV<double>{in[2], in[3]},
                                        std::vector<std::uint8_t>{1}, q);
            return sum_all(tanh(out));
          },
          inputs);
    check("cell.horizontal." + tag, net_tol,
          [&](const std::vector<NodeRef<double>>& in) {
            auto q = rebuild(in);
            return sum_all(tanh(horizontal_substep(in[1], in[0], q)));
          },
          inputs);
  }

  // ---- full two-block segment loss ----
  {
    ModelConfig mc;
    mc.vocab_size = 11;
    mc.dim = 16;
    mc.num_layers = 2;
    mc.heads = 2;
    mc.head_dim = 8;
    mc.mlp_hidden = 24;
    mc.window = 4;
    mc.segment = 8;  // two blocks
    mc.num_states = 2;
    mc.recurrent_layers = {1};
    auto model = init_model<double>(mc, rng);
    Segment seg;
    seg.batch = 1;
    seg.length = mc.segment;
    seg.reset = {1};
    for (i64 i = 0; i < mc.segment; ++i) {
      seg.tokens.push_back(static_cast<i64>(rng.next_u64() % 11));
      seg.targets.push_back(static_cast<i64>(rng.next_u64() % 11));
      seg.loss_mask.push_back(1);
    }
    auto slots = collect_params(model);
    std::vector<Tensor<double>> inputs;
    for (auto& [n, s] : slots) inputs.push_back((*s)->value);
    check("model.two_block_segment_loss", net_tol,
          [&](const std::vector<NodeRef<double>>& in) {
            ModelParams<double> m = model;
            auto ms = collect_params(m);
            for (size_t i = 0; i < ms.size(); ++i) *ms[i].second = in[i];
            auto caches = init_caches(m, 1);
            return segment_loss(seg, caches, m).loss_bits;
          },
          inputs);
  }
  return results;
}

inline bool all_passed(const std::vector<VerifyResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace blockrec
