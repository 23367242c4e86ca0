#include "latentlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "latentlab/error.hpp"

namespace latentlab {

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::next_token: return "nt";
    case Objective::masked_token: return "mt";
    case Objective::flow_matching: return "cfm";
  }
  throw ConfigError("objective_name: bad enum value");
}

Objective objective_from_name(const std::string& name) {
  if (name == "nt") return Objective::next_token;
  if (name == "mt") return Objective::masked_token;
  if (name == "cfm") return Objective::flow_matching;
  throw ConfigError("unknown objective '" + name + "' (want nt|mt|cfm)");
}

namespace {
constexpr double kPi = 3.14159265358979323846;

// detached per-row NLL from raw logits (row-major, V columns)
std::vector<float> per_position_nll(std::span<const float> logits,
                                    std::span<const std::int64_t> targets, std::size_t vocab) {
  std::vector<float> out(targets.size());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const float* row = logits.data() + r * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(sum);
    out[r] = static_cast<float>(lse - static_cast<double>(row[targets[r]]));
  }
  return out;
}

void check_discrete_batch(const Backbone& model, std::span<const std::int64_t> tokens,
                          std::size_t batch, const char* who) {
  if (model.config().family != Family::discrete)
    throw UsageError(std::string(who) + ": needs a discrete-family model");
  if (batch == 0 || tokens.size() != batch * model.config().seq_len)
    throw UsageError(std::string(who) + ": got " + std::to_string(tokens.size()) +
                     " tokens for batch " + std::to_string(batch) + " x seq " +
                     std::to_string(model.config().seq_len));
}

}  // namespace

double mask_gamma(double t, MaskSchedule sched) {
  if (sched == MaskSchedule::arccos_cos) return std::cos(kPi * t / 2.0);
  const double one_minus = 1.0 - t * t;
  if (one_minus <= 0.0) return 1.0;
  return std::min(1.0, (2.0 / kPi) / std::sqrt(one_minus));
}

double mask_ratio_cdf(double r) {
  if (r <= 0.0) return 0.0;
  if (r >= 1.0) return 1.0;
  return (2.0 / kPi) * std::asin(r);
}

MaskResult mask_with_t(std::span<const std::int64_t> tokens, std::size_t mask_id, double t,
                       RngStream& rng, MaskSchedule sched) {
  MaskResult out;
  out.t = t;
  out.ids.assign(tokens.begin(), tokens.end());
  out.mask.assign(tokens.size(), 0);
  const double gamma = mask_gamma(t, sched);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (rng.bernoulli(gamma)) {
      out.ids[i] = static_cast<std::int64_t>(mask_id);
      out.mask[i] = 1;
      ++out.count;
    }
  }
  return out;
}

MaskResult mt_mask_sample(std::span<const std::int64_t> tokens, std::size_t mask_id,
                          RngStream& rng, MaskSchedule sched) {
  if (tokens.empty()) throw UsageError("mt_mask_sample: empty token sequence");
  while (true) {
    MaskResult out = mask_with_t(tokens, mask_id, rng.uniform(), rng, sched);
    if (out.count > 0) return out;
  }
}

LossOutput nt_loss(const Backbone& model, std::span<const std::int64_t> tokens,
                   std::size_t batch, const CondBatch& cond) {
  check_discrete_batch(model, tokens, batch, "nt_loss");
  if (!model.config().causal) throw UsageError("nt_loss: needs a causal model");
  const std::size_t s = model.config().seq_len;
  const auto bos = static_cast<std::int64_t>(model.config().vocab_size);

  std::vector<std::int64_t> inputs(tokens.size());
  for (std::size_t b = 0; b < batch; ++b) {
    inputs[b * s] = bos;
    for (std::size_t i = 1; i < s; ++i) inputs[b * s + i] = tokens[b * s + i - 1];
  }

  LossOutput out;
  Tensor logits = model.forward_ids(inputs, batch, cond);
  std::vector<std::int64_t> targets(tokens.begin(), tokens.end());
  out.loss = cross_entropy(logits, targets);
  out.value = out.loss.item();
  out.unweighted = out.value;
  out.per_position = per_position_nll(logits.data(), targets, model.config().vocab_size);
  return out;
}

LossOutput mt_loss(const Backbone& model, std::span<const std::int64_t> tokens,
                   std::size_t batch, const CondBatch& cond, RngStream& rng,
                   MaskSchedule sched) {
  check_discrete_batch(model, tokens, batch, "mt_loss");
  if (model.config().causal) throw UsageError("mt_loss: needs a bidirectional model");
  const std::size_t s = model.config().seq_len;
  const std::size_t mask_id = model.config().vocab_size;

  LossOutput out;
  std::vector<std::int64_t> inputs;
  inputs.reserve(tokens.size());
  out.mask.reserve(tokens.size());
  for (std::size_t b = 0; b < batch; ++b) {
    MaskResult mr = mt_mask_sample(tokens.subspan(b * s, s), mask_id, rng, sched);
    inputs.insert(inputs.end(), mr.ids.begin(), mr.ids.end());
    out.mask.insert(out.mask.end(), mr.mask.begin(), mr.mask.end());
    out.t_values.push_back(mr.t);
  }

  Tensor logits = model.forward_ids(inputs, batch, cond);
  std::vector<std::int64_t> targets(tokens.begin(), tokens.end());
  out.loss = cross_entropy(logits, targets, &out.mask);
  out.value = out.loss.item();
  out.unweighted = out.value;
  out.per_position = per_position_nll(logits.data(), targets, model.config().vocab_size);
  for (std::size_t i = 0; i < out.mask.size(); ++i)
    if (!out.mask[i]) out.per_position[i] = 0.0f;
  return out;
}

Tensor cfm_interpolate(const Tensor& x0, const Tensor& eps, float t) {
  if (!x0.defined() || !eps.defined() || x0.shape() != eps.shape())
    throw ShapeError("cfm_interpolate: x0 and eps shapes differ");
  return add(mul_scalar(x0, 1.0f - t), mul_scalar(eps, t));
}

Tensor cfm_weight_objective(const Tensor& pred, const Tensor& eps,
                            const std::vector<double>& t, double delta) {
  if (pred.shape() != eps.shape()) throw ShapeError("cfm objective: shape mismatch");
  if (pred.rank() == 0 || pred.dim(0) != t.size())
    throw ShapeError("cfm objective: one t per leading row required");
  std::vector<float> weights(t.size());
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double denom = std::max(1.0 - t[b], delta);
    weights[b] = static_cast<float>(1.0 / (denom * denom));
  }
  return weighted_mse(pred, eps, weights);
}

LossOutput cfm_loss(const Backbone& model, const Tensor& x0, const CondBatch& cond,
                    RngStream& rng, double delta, const std::vector<float>* fixed_t) {
  if (model.config().family != Family::continuous)
    throw UsageError("cfm_loss: needs a continuous-family model");
  if (!x0.defined() || x0.rank() != 3)
    throw ShapeError("cfm_loss: x0 must be [B, s, c]");
  const std::size_t batch = x0.dim(0);
  const std::size_t row = x0.dim(1) * x0.dim(2);
  if (fixed_t != nullptr && fixed_t->size() != batch)
    throw UsageError("cfm_loss: fixed_t needs one entry per sample");

  LossOutput out;
  std::vector<float> ts(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    ts[b] = fixed_t != nullptr ? (*fixed_t)[b]
                               : static_cast<float>(rng.uniform() * (1.0 - delta));
    out.t_values.push_back(ts[b]);
  }

  std::vector<float> eps_v(x0.numel());
  for (auto& v : eps_v) v = static_cast<float>(rng.normal());
  std::vector<float> zt_v(x0.numel());
  const auto xv = x0.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const float tb = ts[b];
    for (std::size_t i = 0; i < row; ++i) {
      const std::size_t k = b * row + i;
      zt_v[k] = (1.0f - tb) * xv[k] + tb * eps_v[k];
    }
  }
  Tensor zt = Tensor::from(x0.shape(), std::move(zt_v));
  Tensor eps = Tensor::from(x0.shape(), eps_v);

  Tensor pred = model.forward_latent(zt, ts, cond);
  out.loss = cfm_weight_objective(pred, eps, {out.t_values.begin(), out.t_values.end()}, delta);
  out.value = out.loss.item();

  const auto pv = pred.data();
  out.per_position.assign(batch * x0.dim(1), 0.0f);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < x0.dim(1); ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < x0.dim(2); ++c) {
        const std::size_t k = (b * x0.dim(1) + i) * x0.dim(2) + c;
        const double d = static_cast<double>(pv[k]) - static_cast<double>(eps_v[k]);
        acc += d * d;
      }
      out.per_position[b * x0.dim(1) + i] = static_cast<float>(acc / x0.dim(2));
      total += acc;
    }
  out.unweighted = total / static_cast<double>(x0.numel());
  return out;
}

CondBatch cond_dropout(const CondBatch& cond, RngStream& rng, double p) {
  if (p < 0.0 || p > 1.0) throw UsageError("cond_dropout: p must be in [0,1]");
  CondBatch out = cond;
  for (auto& flag : out.null_flags)
    if (rng.bernoulli(p)) flag = 1;
  return out;
}

}  // namespace latentlab
