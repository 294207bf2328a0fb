#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "blockrec/model.hpp"

namespace blockrec {

// ---- learning rate schedules --------------------------------------------------

struct ScheduleConfig {
  enum class Kind { kInverseSqrt, kCosine };
  Kind kind = Kind::kInverseSqrt;
  double base_rate = 1.0;  // inverse-sqrt multiplier
  double max_rate = 0.01;  // cosine
  double min_rate = 0.001; // cosine
  i64 warmup_steps = 1000;
  i64 total_steps = 500000;
};

// Linear warmup into a 1/sqrt(step) decay; the two branches meet exactly at
// step == warmup.
inline double lr_inverse_sqrt(i64 step, double base, i64 warmup) {
  if (step < 1) step = 1;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return base * std::min(s / (w * std::sqrt(w)), 1.0 / std::sqrt(s));
}

inline double lr_cosine(i64 step, double max_rate, double min_rate, i64 total, i64 warmup) {
  if (step >= total) return min_rate;
  auto decay = [&](i64 s) {
    const double frac = static_cast<double>(s) / static_cast<double>(total);
    return min_rate + 0.5 * (max_rate - min_rate) * (1.0 + std::cos(M_PI * frac));
  };
  if (step < warmup)
    return static_cast<double>(step) / static_cast<double>(warmup) * decay(warmup);
  return decay(step);
}

inline double schedule_rate(const ScheduleConfig& s, i64 step) {
  return s.kind == ScheduleConfig::Kind::kInverseSqrt
             ? lr_inverse_sqrt(step, s.base_rate, s.warmup_steps)
             : lr_cosine(step, s.max_rate, s.min_rate, s.total_steps, s.warmup_steps);
}

// ---- Adafactor -----------------------------------------------------------------

struct AdafactorConfig {
  double decay_exponent = 0.8;  // beta2(t) = 1 - t^-0.8
  double eps1 = 1e-30;          // inside the second moment
  double eps_scale = 1e-3;      // minimum parameter scale
  double clip_threshold = 1.0;
};

// Second-moment accumulator for one parameter: factored row/column vectors
// for matrices, a full accumulator for vectors and scalars. Kept in double
// regardless of the parameter dtype.
struct FactoredMoment {
  Tensor<double> row, col, full;
  bool factored = false;

  static FactoredMoment for_shape(const Shape& s) {
    FactoredMoment m;
    if (s.size() >= 2) {
      m.factored = true;
      const i64 cols = s.back();
      m.row = Tensor<double>::zeros({shape_numel(s) / cols});
      m.col = Tensor<double>::zeros({cols});
    } else {
      m.full = Tensor<double>::zeros(s);
    }
    return m;
  }
};

namespace detail {

template <typename Real>
double rms(const Tensor<Real>& t) {
  double acc = 0.0;
  for (Real v : t.data) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc / static_cast<double>(t.numel()));
}

}  // namespace detail

// One Adafactor update: normalize the gradient to unit RMS using the factored
// second moment, clip, then scale by the parameter's own magnitude.
template <typename Real>
void adafactor_update(Tensor<Real>& param, const Tensor<Real>& grad, FactoredMoment& m, i64 t,
                      double rate, const AdafactorConfig& cfg = {}) {
  contract(param.shape == grad.shape, "adafactor_update: shape mismatch");
  contract(t >= 1, "adafactor_update: step counter starts at 1");
  const double beta2 = 1.0 - std::pow(static_cast<double>(t), -cfg.decay_exponent);
  const i64 n = param.numel();

  std::vector<double> u(static_cast<size_t>(n));
  if (m.factored) {
    const i64 cols = param.shape.back();
    const i64 rows = n / cols;
    for (i64 r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (i64 c = 0; c < cols; ++c) {
        const double g = static_cast<double>(grad.data[size_t(r * cols + c)]);
        acc += g * g + cfg.eps1;
      }
      m.row.data[size_t(r)] = beta2 * m.row.data[size_t(r)] + (1.0 - beta2) * acc;
    }
    for (i64 c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (i64 r = 0; r < rows; ++r) {
        const double g = static_cast<double>(grad.data[size_t(r * cols + c)]);
        acc += g * g + cfg.eps1;
      }
      m.col.data[size_t(c)] = beta2 * m.col.data[size_t(c)] + (1.0 - beta2) * acc;
    }
    double row_sum = 0.0;
    for (i64 r = 0; r < rows; ++r) row_sum += m.row.data[size_t(r)];
    for (i64 r = 0; r < rows; ++r)
      for (i64 c = 0; c < cols; ++c) {
        const double vhat = m.row.data[size_t(r)] * m.col.data[size_t(c)] / row_sum;
        u[size_t(r * cols + c)] =
            static_cast<double>(grad.data[size_t(r * cols + c)]) / std::sqrt(vhat);
      }
  } else {
    for (i64 i = 0; i < n; ++i) {
      const double g = static_cast<double>(grad.data[size_t(i)]);
      m.full.data[size_t(i)] = beta2 * m.full.data[size_t(i)] + (1.0 - beta2) * (g * g + cfg.eps1);
      u[size_t(i)] = g / std::sqrt(m.full.data[size_t(i)]);
    }
  }

  double u_rms = 0.0;
  for (double v : u) u_rms += v * v;
  u_rms = std::sqrt(u_rms / static_cast<double>(n));
  const double clip_div = std::max(1.0, u_rms / cfg.clip_threshold);
  const double alpha = rate * std::max(cfg.eps_scale, detail::rms(param));
  for (i64 i = 0; i < n; ++i)
    param.data[size_t(i)] -= static_cast<Real>(alpha * u[size_t(i)] / clip_div);
}

// Optimizer over a model's parameter registry. Momentum-free reference
// configuration; accumulators are kept per parameter in registry order.
template <typename Real>
class Adafactor {
 public:
  explicit Adafactor(ModelParams<Real>& m, AdafactorConfig cfg = {}) : cfg_(cfg) {
    for (auto& [name, slot] : collect_params(m))
      moments_.push_back(FactoredMoment::for_shape((*slot)->value.shape));
  }

  i64 steps_done() const { return t_; }
  const AdafactorConfig& config() const { return cfg_; }

  // Applies one update from the gradients currently on the parameters.
  // Rejects the whole step if any gradient is non-finite.
  void step(ModelParams<Real>& m, double rate) {
    auto params = collect_params(m);
    contract(params.size() == moments_.size(), "optimizer/model parameter registry mismatch");
    for (auto& [name, slot] : params) {
      Node<Real>& node = **slot;
      node.ensure_grad();
      if (!node.grad.all_finite())
        throw NumericalError("non-finite gradient for parameter " + name + " at optimizer step " +
                             std::to_string(t_ + 1));
    }
    ++t_;
    for (size_t i = 0; i < params.size(); ++i) {
      Node<Real>& node = **params[i].second;
      adafactor_update(node.value, node.grad, moments_[i], t_, rate, cfg_);
    }
  }

 private:
  AdafactorConfig cfg_;
  i64 t_ = 0;
  std::vector<FactoredMoment> moments_;
};

// ---- training step --------------------------------------------------------------

constexpr double kLn2 = 0.6931471805599453;

template <typename Real>
struct LossResult {
  NodeRef<Real> loss_bits;  // scalar graph node, mean bits per unmasked target
  SegmentResult<Real> forward;
  i64 target_count = 0;
};

// Mean next-token cross entropy in bits over the segment's unmasked targets.
template <typename Real>
LossResult<Real> segment_loss(const Segment& seg, const CacheSet<Real>& caches,
                              ModelParams<Real>& m, const ForwardCtx& ctx = {}) {
  LossResult<Real> r;
  r.forward = forward_segment(seg, caches, m, ctx);
  auto nll = cross_entropy_logits(r.forward.logits, seg.targets);  // [B, N] nats
  Tensor<Real> mask({seg.batch, seg.length});
  i64 count = 0;
  for (size_t i = 0; i < seg.loss_mask.size(); ++i) {
    mask.data[i] = seg.loss_mask[i] ? Real(1) : Real(0);
    count += seg.loss_mask[i] ? 1 : 0;
  }
  r.target_count = count;
  if (count == 0) {
    r.loss_bits = constant(Tensor<Real>::scalar(Real(0)));
    return r;
  }
  r.loss_bits = scale(sum_all(mul(nll, constant(mask))),
                      static_cast<Real>(1.0 / (kLn2 * static_cast<double>(count))));
  return r;
}

template <typename Real>
struct TrainStepResult {
  double loss_bits = 0.0;
  double learning_rate = 0.0;
  i64 tokens = 0;  // batch * N, the comparable cost unit across configs
};

template <typename Real>
TrainStepResult<Real> train_step(ModelParams<Real>& m, Adafactor<Real>& opt,
                                 const ScheduleConfig& sched, const Segment& seg,
                                 CacheSet<Real>& caches, i64 step, Rng* dropout_rng = nullptr) {
  ForwardCtx ctx;
  ctx.dropout_rate = m.config.dropout;
  ctx.rng = dropout_rng;
  auto loss = segment_loss(seg, caches, m, ctx);

  TrainStepResult<Real> r;
  r.tokens = seg.batch * seg.length;
  r.learning_rate = schedule_rate(sched, step);
  r.loss_bits = static_cast<double>(loss.loss_bits->value.data[0]);
  if (!std::isfinite(r.loss_bits))
    throw NumericalError("non-finite loss at step " + std::to_string(step));

  if (loss.target_count > 0) {
    std::vector<NodeRef<Real>> params;
    for (auto& [name, slot] : collect_params(m)) params.push_back(*slot);
    zero_grad(params);
    backward(loss.loss_bits);
    opt.step(m, r.learning_rate);
  }
  caches = detach_caches(loss.forward, m, seg.batch);
  return r;
}

// Append-only training metrics stream.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path, bool zero_wall = false)
      : path_(path), zero_wall_(zero_wall) {
    std::ofstream f(path_, std::ios::trunc);
    if (!f) throw ConfigError("cannot write metrics file " + path_);
    f << "step,loss_bits,learning_rate,tokens_seen,wall_ms\n";
    start_ = std::chrono::steady_clock::now();
  }

  void append(i64 step, double loss_bits, double lr, i64 tokens_seen) {
    if (path_.empty()) return;
    std::ofstream f(path_, std::ios::app);
    const auto wall =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                              start_)
            .count();
    char line[160];
    std::snprintf(line, sizeof(line), "%lld,%.8f,%.8g,%lld,%lld\n",
                  static_cast<long long>(step), loss_bits, lr,
                  static_cast<long long>(tokens_seen),
                  zero_wall_ ? 0LL : static_cast<long long>(wall));
    f << line;
  }

 private:
  std::string path_;
  bool zero_wall_ = false;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace blockrec
