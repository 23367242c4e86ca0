#include "latentlab/accounting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "latentlab/error.hpp"

namespace latentlab {

namespace {

// One matmul-like term under the MAC convention.
inline double macs(const FlopsConvention& conv, double n) { return conv.mac2 ? 2.0 * n : n; }

}  // namespace

FlopsReport forward_flops(const BackboneConfig& cfg, std::size_t seq, FlopsConvention conv) {
  cfg.validate();
  if (seq == 0) throw UsageError("forward_flops: seq must be positive");

  FlopsReport r;
  r.seq = seq;
  r.trunk_seq = seq + (cfg.conditioning == Conditioning::in_context ? 1 : 0);
  r.convention = conv;

  const double s = static_cast<double>(r.trunk_seq);
  const double d = static_cast<double>(cfg.hidden);
  const double layers = static_cast<double>(cfg.layers);
  const double d_ff = static_cast<double>(cfg.d_ff());
  const double cond = static_cast<double>(cfg.cond_dim);

  // attention: qkv (3*s*d^2) + out (s*d^2) projections, plus the score/mix
  // pair (2*s^2*d) when the quadratic term is being counted.
  double attn = macs(conv, 4.0 * s * d * d);
  if (conv.attention_quadratic) attn += macs(conv, 2.0 * s * s * d);
  r.attention = layers * attn;

  // feedforward: swiglu runs three d<->d_ff matmuls per block, gelu two.
  const double ff_mats = cfg.ff == FfKind::swiglu_2_3_4 ? 3.0 : 2.0;
  r.feedforward = layers * macs(conv, ff_mats * s * d * d_ff);

  // embeddings + head. Token lookup is a gather, so the discrete family pays
  // nothing on the way in; the continuous one projects channels up and runs
  // the time MLP once per sample.
  double eh = 0.0;
  if (cfg.family == Family::continuous) {
    // in_proj runs on the data rows before any context row is prepended
    eh += macs(conv, static_cast<double>(seq) * static_cast<double>(cfg.latent_channels) * d);
    eh += macs(conv, static_cast<double>(kTimeFeatureDim) * d + d * d);  // time MLP
    eh += macs(conv, s * d * static_cast<double>(cfg.latent_channels));  // head
  } else {
    eh += macs(conv, s * d * static_cast<double>(cfg.vocab_size));  // head
  }
  r.embed_head = eh;

  // conditioning: the embedder runs in every mode; adaLN adds a map and an
  // apply per block plus the final pair; cross-attention reads the vector
  // through two d x d maps and one broadcast add per block.
  double cw = macs(conv, cond * d);
  switch (cfg.conditioning) {
    case Conditioning::adaln_zero:
      cw += layers * (macs(conv, d * 6.0 * d) + macs(conv, s * 6.0 * d));
      cw += macs(conv, d * 2.0 * d) + macs(conv, s * 2.0 * d);  // final modulation
      break;
    case Conditioning::cross_attention:
      cw += layers * (macs(conv, 2.0 * d * d) + s * d);
      break;
    case Conditioning::in_context:
      break;  // the prepended row is already inside the s+1 trunk terms
  }
  r.conditioning = cw;

  r.total = r.attention + r.feedforward + r.embed_head + r.conditioning;
  return r;
}

double training_flops(double forward_flops_per_sample, double samples) {
  return 3.0 * forward_flops_per_sample * samples;
}

namespace {

struct LogLinear {
  double slope = 0.0;
  double intercept = 0.0;
  double rss = std::numeric_limits<double>::infinity();
  double tss = 0.0;
  // Absolute RSS is not comparable across floors: moving c rescales the
  // whole log-excess axis, and near-flat data at small c gets tiny residuals
  // for free. RSS/TSS is scale-free and stays unimodal in c.
  double normalized() const {
    return tss > 0.0 ? rss / tss : std::numeric_limits<double>::infinity();
  }
};

// Least squares of log(L - c) on log C at a fixed floor c < min L.
LogLinear log_excess_fit(std::span<const std::pair<double, double>> pts, double c) {
  const double n = static_cast<double>(pts.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [comp, loss] : pts) {
    const double x = std::log(comp);
    const double y = std::log(loss - c);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  LogLinear out;
  const double denom = n * sxx - sx * sx;
  if (denom <= 0.0) return out;  // all compute values equal
  out.slope = (n * sxy - sx * sy) / denom;
  out.intercept = (sy - out.slope * sx) / n;
  out.rss = 0.0;
  const double mean_y = sy / n;
  for (const auto& [comp, loss] : pts) {
    const double y = std::log(loss - c);
    const double resid = y - (out.slope * std::log(comp) + out.intercept);
    out.rss += resid * resid;
    out.tss += (y - mean_y) * (y - mean_y);
  }
  return out;
}

}  // namespace

ScalingFit fit_power_law(std::span<const std::pair<double, double>> points) {
  if (points.size() < 4) throw UsageError("fit_power_law: need at least 4 points");
  double min_loss = std::numeric_limits<double>::infinity();
  for (const auto& [comp, loss] : points) {
    if (!(comp > 0.0)) throw UsageError("fit_power_law: compute values must be positive");
    if (!std::isfinite(loss)) throw UsageError("fit_power_law: losses must be finite");
    min_loss = std::min(min_loss, loss);
  }
  if (!(min_loss > 0.0)) throw UsageError("fit_power_law: losses must be positive");

  // Golden-section on the floor c, minimizing the normalized residual. The
  // interval shrinks by ~0.618 per probe.
  const double golden = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = 0.0;
  double hi = min_loss * (1.0 - 1e-9);
  double x1 = hi - golden * (hi - lo);
  double x2 = lo + golden * (hi - lo);
  double f1 = log_excess_fit(points, x1).normalized();
  double f2 = log_excess_fit(points, x2).normalized();
  for (int it = 0; it < 200 && hi - lo > 1e-14 * min_loss; ++it) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - golden * (hi - lo);
      f1 = log_excess_fit(points, x1).normalized();
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + golden * (hi - lo);
      f2 = log_excess_fit(points, x2).normalized();
    }
  }
  // c = 0 sits on the boundary the bracket can never quite reach; take it
  // when it wins outright.
  double c = (lo + hi) / 2.0;
  LogLinear reg = log_excess_fit(points, c);
  const LogLinear at_zero = log_excess_fit(points, 0.0);
  if (at_zero.normalized() <= reg.normalized()) {
    c = 0.0;
    reg = at_zero;
  }

  ScalingFit fit;
  fit.a = std::exp(reg.intercept);
  fit.b = -reg.slope;
  fit.c = c;
  fit.rss = reg.rss;
  fit.r2 = reg.tss > 0.0 ? 1.0 - reg.rss / reg.tss : (reg.rss == 0.0 ? 1.0 : 0.0);
  fit.ok = std::isfinite(fit.a) && std::isfinite(fit.b) && fit.b > 0.0 &&
           std::isfinite(fit.rss);
  return fit;
}

std::vector<std::size_t> pareto_frontier(std::span<const std::pair<double, double>> points,
                                         bool lower_is_better) {
  const double sign = lower_is_better ? 1.0 : -1.0;
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // stable so exact duplicates resolve to the earliest index
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (points[i].first != points[j].first) return points[i].first < points[j].first;
    return sign * points[i].second < sign * points[j].second;
  });

  std::vector<std::size_t> keep;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t idx : order) {
    const double m = sign * points[idx].second;
    if (m < best) {
      keep.push_back(idx);
      best = m;
    }
  }
  return keep;
}

}  // namespace latentlab
