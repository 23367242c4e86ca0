#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "latentlab/tensor.hpp"

namespace latentlab {

// A named trainable tensor. `decay` marks participation in weight decay;
// norm gains, biases, positional tables and embeddings opt out.
struct Param {
  std::string name;
  Tensor value;
  bool decay = true;
};
using ParamSet = std::vector<Param>;

struct LrSchedule {
  enum class Kind { constant, cosine };
  Kind kind = Kind::constant;
  double peak = 1e-4;
  double floor = 0.0;     // cosine only
  std::uint64_t warmup = 1000;
  std::uint64_t total = 0;  // cosine only; the step where lr hits the floor
};

// Linear warmup 0 -> peak over `warmup` steps, then constant or cosine decay
// reaching `floor` exactly at step == total.
double lr_at_step(const LrSchedule& sched, std::uint64_t step);

struct AdamwConfig {
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float weight_decay = 0.01f;
  float eps = 1e-15f;
};

// AdamW with bias-corrected moments, eps inside the denominator, and
// decoupled decay applied multiplicatively before the moment update.
class AdamW {
 public:
  explicit AdamW(const ParamSet& params, AdamwConfig cfg = {});

  // grads[i] pairs with params[i]. Throws NumericalError (with the step
  // index) if any gradient is non-finite.
  void step(ParamSet& params, const std::vector<std::span<const float>>& grads, double lr);
  // Pulls gradients from each param's own grad buffer, then zeroes them.
  void step_from_grads(ParamSet& params, double lr);

  std::uint64_t steps_taken() const { return t_; }
  const AdamwConfig& config() const { return cfg_; }

 private:
  AdamwConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// Shadow copy of the parameters, updated every `interval` steps. The update
// is shadow += (1-decay)*(params-shadow): algebraically decay*shadow +
// (1-decay)*params, but exact in floating point when shadow == params.
struct EmaState {
  std::vector<std::vector<float>> shadow;
  double decay = 0.99;
  std::uint64_t interval = 100;
  std::uint64_t updates = 0;

  static EmaState init(const ParamSet& params, double decay, std::uint64_t interval);
};

// Fires only when step % interval == 0 (step is the 1-based optimizer step).
void ema_update(EmaState& ema, const ParamSet& params, std::uint64_t step);

// Copies shadow values over the live parameters (for EMA evaluation).
void ema_load(const EmaState& ema, ParamSet& params);

}  // namespace latentlab
