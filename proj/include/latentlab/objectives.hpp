#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "latentlab/backbone.hpp"
#include "latentlab/rng.hpp"
#include "latentlab/tensor.hpp"

namespace latentlab {

// The three training objectives the lab compares. next_token and
// masked_token drive the discrete family, flow_matching the continuous one.
enum class Objective { next_token, masked_token, flow_matching };

const char* objective_name(Objective o);
Objective objective_from_name(const std::string& name);

// Mask-probability schedule for masked-token training. The default reads the
// truncated-arccos mask-ratio law as gamma(t) = cos(pi t / 2), whose induced
// ratio density under t ~ U(0,1) is 2 / (pi sqrt(1 - r^2)). clamped_density
// instead uses min(1, (2/pi)(1 - t^2)^(-1/2)) directly as the mask
// probability — kept for comparison, not the default (its schedule rises
// with t; expected mask rate ~= 0.789).
enum class MaskSchedule { arccos_cos, clamped_density };

double mask_gamma(double t, MaskSchedule sched = MaskSchedule::arccos_cos);
// P(gamma(t) <= r) for the default schedule with t ~ U(0,1): (2/pi) asin(r).
double mask_ratio_cdf(double r);

struct MaskResult {
  std::vector<std::int64_t> ids;   // tokens with the mask row substituted
  std::vector<std::uint8_t> mask;  // 1 = masked (in the loss)
  double t = 0.0;
  std::size_t count = 0;
};

// Bernoulli(gamma(t)) mask at a caller-chosen t; count may come out zero.
MaskResult mask_with_t(std::span<const std::int64_t> tokens, std::size_t mask_id, double t,
                       RngStream& rng, MaskSchedule sched = MaskSchedule::arccos_cos);
// Draws t ~ U(0,1) and redraws whenever no position gets masked, so the
// masked-position average is always defined.
MaskResult mt_mask_sample(std::span<const std::int64_t> tokens, std::size_t mask_id,
                          RngStream& rng, MaskSchedule sched = MaskSchedule::arccos_cos);

struct LossOutput {
  Tensor loss;                      // scalar, differentiable
  double value = 0.0;               // loss as a double
  std::vector<float> per_position;  // per-position NLL / sq error (0 where excluded)
  std::vector<double> t_values;     // MT / flow: the per-sample draws
  std::vector<std::uint8_t> mask;   // MT: which positions carried loss
  double unweighted = 0.0;          // flow: plain eps-MSE; NT/MT: == value
};

// Teacher-forced next-token NLL over all s positions. Inputs are the tokens
// shifted right behind a BOS row (id == vocab_size); targets are unshifted.
LossOutput nt_loss(const Backbone& model, std::span<const std::int64_t> tokens,
                   std::size_t batch, const CondBatch& cond);

// Masked-token NLL: per-sample t, Bernoulli masks, mean over masked
// positions only (across the whole batch).
LossOutput mt_loss(const Backbone& model, std::span<const std::int64_t> tokens,
                   std::size_t batch, const CondBatch& cond, RngStream& rng,
                   MaskSchedule sched = MaskSchedule::arccos_cos);

// z_t = (1-t) x0 + t eps on matching shapes.
Tensor cfm_interpolate(const Tensor& x0, const Tensor& eps, float t);

// mean over elements of (1/(1-t_b)^2) ||pred - eps||^2; the denominator is
// clamped at delta. Split out so a perfect-prediction oracle can hit it.
Tensor cfm_weight_objective(const Tensor& pred, const Tensor& eps,
                            const std::vector<double>& t, double delta);

// Noise-prediction flow matching: t_b ~ U(0, 1-delta) (or fixed_t), eps ~
// N(0, I), weighted by 1/(1-t)^2; diagnostics carry the unweighted MSE.
LossOutput cfm_loss(const Backbone& model, const Tensor& x0, const CondBatch& cond,
                    RngStream& rng, double delta = 1e-3,
                    const std::vector<float>* fixed_t = nullptr);

// Flips each sample's null flag on with probability p (classifier-free
// guidance training).
CondBatch cond_dropout(const CondBatch& cond, RngStream& rng, double p = 0.10);

}  // namespace latentlab
