#include "latentlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace latentlab {

double lr_at_step(const LrSchedule& sched, std::uint64_t step) {
  if (sched.warmup > 0 && step < sched.warmup) {
    return sched.peak * static_cast<double>(step) / static_cast<double>(sched.warmup);
  }
  if (sched.kind == LrSchedule::Kind::constant) return sched.peak;
  if (sched.total <= sched.warmup) throw ConfigError("lr_at_step: cosine needs total > warmup");
  if (step >= sched.total) return sched.floor;
  const double frac = static_cast<double>(step - sched.warmup) /
                      static_cast<double>(sched.total - sched.warmup);
  if (frac >= 1.0) return sched.floor;
  return sched.floor + 0.5 * (sched.peak - sched.floor) * (1.0 + std::cos(frac * 3.14159265358979323846));
}

AdamW::AdamW(const ParamSet& params, AdamwConfig cfg) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.value.numel(), 0.0f);
    v_.emplace_back(p.value.numel(), 0.0f);
  }
}

void AdamW::step(ParamSet& params, const std::vector<std::span<const float>>& grads, double lr) {
  if (grads.size() != params.size() || params.size() != m_.size()) {
    throw UsageError("adamw_step: parameter/gradient count mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].value.data();
    const auto g = grads[i];
    if (g.size() != theta.size()) {
      throw UsageError("adamw_step: gradient size mismatch for " + params[i].name);
    }
    for (float gv : g) {
      if (!(gv >= -std::numeric_limits<float>::max() && gv <= std::numeric_limits<float>::max())) {
        throw NumericalError("adamw_step: non-finite gradient for " + params[i].name +
                             " at step " + std::to_string(t_));
      }
    }
    // decoupled decay first, then the moment update
    if (params[i].decay && cfg_.weight_decay != 0.0f) {
      const float keep = 1.0f - static_cast<float>(lr) * cfg_.weight_decay;
      for (auto& v : theta) v *= keep;
    }
    float* m = m_[i].data();
    float* v = v_[i].data();
    const float b1 = cfg_.beta1, b2 = cfg_.beta2;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      theta[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + static_cast<double>(cfg_.eps)));
    }
  }
}

void AdamW::step_from_grads(ParamSet& params, double lr) {
  std::vector<std::span<const float>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    if (!p.value.has_grad()) {
      throw UsageError("adamw_step: no gradient accumulated for " + p.name);
    }
    auto g = p.value.grad_data();
    grads.push_back({g.data(), g.size()});
  }
  step(params, grads, lr);
  for (auto& p : params) p.value.zero_grad();
}

EmaState EmaState::init(const ParamSet& params, double decay, std::uint64_t interval) {
  EmaState ema;
  ema.decay = decay;
  ema.interval = interval == 0 ? 1 : interval;
  for (const auto& p : params) {
    auto d = p.value.data();
    ema.shadow.emplace_back(d.begin(), d.end());
  }
  return ema;
}

void ema_update(EmaState& ema, const ParamSet& params, std::uint64_t step) {
  if (step % ema.interval != 0) return;
  if (ema.shadow.size() != params.size()) throw UsageError("ema_update: shape drift");
  ++ema.updates;
  const float keep = static_cast<float>(1.0 - ema.decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value.data();
    auto& s = ema.shadow[i];
    if (ema.decay == 0.0) {
      s.assign(p.begin(), p.end());
      continue;
    }
    for (std::size_t j = 0; j < s.size(); ++j) s[j] += keep * (p[j] - s[j]);
  }
}

void ema_load(const EmaState& ema, ParamSet& params) {
  if (ema.shadow.size() != params.size()) throw UsageError("ema_load: shape drift");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value.data();
    const auto& s = ema.shadow[i];
    std::copy(s.begin(), s.end(), p.begin());
  }
}

}  // namespace latentlab
