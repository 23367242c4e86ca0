#include "latentlab/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>

#include "latentlab/accounting.hpp"
#include "latentlab/error.hpp"

namespace latentlab {

SamplerConfig SamplerConfig::defaults(Objective obj) {
  SamplerConfig cfg;
  switch (obj) {
    case Objective::next_token:
      cfg.cfg_scale = 8.0;
      cfg.steps = 1;  // unused; the decode always takes seq_len token steps
      break;
    case Objective::masked_token:
      cfg.cfg_scale = 5.0;
      cfg.steps = 10;
      break;
    case Objective::flow_matching:
      cfg.cfg_scale = 5.0;
      cfg.steps = 50;
      break;
  }
  return cfg;
}

void SamplerConfig::validate() const {
  if (!(top_p > 0.0) || top_p > 1.0) throw ConfigError("sampler: top_p must be in (0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("sampler: temperature must be positive");
  if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
  if (!(delta > 0.0)) throw ConfigError("sampler: delta must be positive");
  if (!std::isfinite(cfg_scale)) throw ConfigError("sampler: cfg_scale must be finite");
}

Tensor cfg_combine(const Tensor& x_c, const Tensor& x_u, double w) {
  if (!x_c.defined() || !x_u.defined() || x_c.shape() != x_u.shape())
    throw ShapeError("cfg_combine: stream shapes differ");
  if (w == 0.0) return x_c;  // exact identity on the conditional stream
  const float fw = static_cast<float>(w);
  return add(mul_scalar(x_c, 1.0f + fw), mul_scalar(x_u, -fw));
}

namespace {

// softmax(logits / temperature) in double, plus the sort order used by the
// nucleus filter (descending probability, ties toward the lower id).
void softmax_sorted(std::span<const float> logits, double temperature,
                    std::vector<double>& probs, std::vector<std::size_t>& order) {
  const std::size_t n = logits.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) {
    if (!std::isfinite(v)) throw NumericalError("nucleus: non-finite logit");
    mx = std::max(mx, static_cast<double>(v) / temperature);
  }
  probs.resize(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    probs[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    z += probs[i];
  }
  for (double& p : probs) p /= z;
  order.resize(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;
  });
}

// Shared by nucleus_sample and the masked sampler: draws a token and reports
// its full-softmax probability (the fill confidence).
std::int64_t sample_row(std::span<const float> logits, double top_p, double temperature,
                        RngStream& rng, double* prob_out) {
  std::vector<double> probs;
  std::vector<std::size_t> order;
  softmax_sorted(logits, temperature, probs, order);

  double mass = 0.0;
  std::size_t kept = 0;
  while (kept < order.size() && mass < top_p) mass += probs[order[kept++]];

  const double u = rng.uniform() * mass;
  double cum = 0.0;
  std::size_t pick = order[kept - 1];
  for (std::size_t i = 0; i < kept; ++i) {
    cum += probs[order[i]];
    if (u < cum) {
      pick = order[i];
      break;
    }
  }
  if (prob_out) *prob_out = probs[pick];
  return static_cast<std::int64_t>(pick);
}

}  // namespace

std::vector<std::size_t> nucleus_support(std::span<const float> logits, double top_p,
                                         double temperature) {
  if (logits.empty()) throw UsageError("nucleus: empty logits");
  if (!(top_p > 0.0) || top_p > 1.0) throw ConfigError("nucleus: top_p must be in (0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("nucleus: temperature must be positive");
  std::vector<double> probs;
  std::vector<std::size_t> order;
  softmax_sorted(logits, temperature, probs, order);
  double mass = 0.0;
  std::size_t kept = 0;
  while (kept < order.size() && mass < top_p) mass += probs[order[kept++]];
  order.resize(kept);
  return order;
}

std::int64_t nucleus_sample(std::span<const float> logits, double top_p, double temperature,
                            RngStream& rng) {
  if (logits.empty()) throw UsageError("nucleus: empty logits");
  if (!(top_p > 0.0) || top_p > 1.0) throw ConfigError("nucleus: top_p must be in (0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("nucleus: temperature must be positive");
  return sample_row(logits, top_p, temperature, rng, nullptr);
}

// ---- incremental decode ----------------------------------------------------

namespace {

// y = x @ W (+ b), raw rows; W is [in, out] row-major
void vec_matmul(std::span<const float> x, std::span<const float> w, const float* b,
                std::size_t in, std::size_t out, std::vector<float>& y) {
  y.assign(out, 0.0f);
  std::vector<double> acc(out, 0.0);
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    const float* wr = w.data() + i * out;
    for (std::size_t j = 0; j < out; ++j) acc[j] += xi * wr[j];
  }
  for (std::size_t j = 0; j < out; ++j)
    y[j] = static_cast<float>(acc[j] + (b ? static_cast<double>(b[j]) : 0.0));
}

void rms_norm_row(std::span<const float> x, std::vector<float>& y) {
  double ss = 0.0;
  for (float v : x) ss += static_cast<double>(v) * v;
  const double r = std::sqrt(ss / static_cast<double>(x.size()) + kNormEps);
  y.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(x[i] / r);
}

inline float silu_val(float v) {
  const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(v)));
  return static_cast<float>(v * s);
}

}  // namespace

TokenDecoder::TokenDecoder(const Backbone& model, std::span<const float> cond_vec, bool null_cond)
    : model_(model) {
  const BackboneConfig& cfg = model.config();
  if (cfg.family != Family::discrete)
    throw UsageError("token decoder: needs a discrete-family model");
  if (!cfg.causal) throw UsageError("token decoder: needs a causal model");
  if (!null_cond && cond_vec.size() != cfg.cond_dim)
    throw ShapeError("token decoder: conditioning vector must hold cond_dim values");

  const std::size_t d = cfg.hidden;
  std::span<const float> v =
      null_cond ? model.param_named("null").data() : cond_vec;
  vec_matmul(v, model.param_named("cond.w").data(), model.param_named("cond.b").data().data(),
             cfg.cond_dim, d, c_);

  layers_.resize(cfg.layers);
  if (cfg.conditioning == Conditioning::adaln_zero) {
    std::vector<float> sc(d);
    for (std::size_t j = 0; j < d; ++j) sc[j] = silu_val(c_[j]);
    std::vector<float> mod;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      const std::string p = "blk" + std::to_string(i) + ".";
      vec_matmul(sc, model.param_named(p + "ada.w").data(),
                 model.param_named(p + "ada.b").data().data(), d, 6 * d, mod);
      LayerState& ls = layers_[i];
      auto part = [&](std::size_t k) {
        return std::vector<float>(mod.begin() + k * d, mod.begin() + (k + 1) * d);
      };
      ls.shift1 = part(0);
      ls.scale1 = part(1);
      ls.gate1 = part(2);
      ls.shift2 = part(3);
      ls.scale2 = part(4);
      ls.gate2 = part(5);
    }
    vec_matmul(sc, model.param_named("final_ada.w").data(),
               model.param_named("final_ada.b").data().data(), d, 2 * d, mod);
    final_shift_.assign(mod.begin(), mod.begin() + d);
    final_scale_.assign(mod.begin() + d, mod.begin() + 2 * d);
  } else if (cfg.conditioning == Conditioning::cross_attention) {
    std::vector<float> cv;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      const std::string p = "blk" + std::to_string(i) + ".";
      vec_matmul(c_, model.param_named(p + "cross_v.w").data(), nullptr, d, d, cv);
      vec_matmul(cv, model.param_named(p + "cross_o.w").data(), nullptr, d, d, layers_[i].cross);
    }
  }

  if (cfg.conditioning == Conditioning::in_context) {
    std::vector<float> row = c_;
    if (cfg.positions == Positions::learned) {
      auto pos = model.param_named("pos").data();
      for (std::size_t j = 0; j < d; ++j) row[j] += pos[j];
    }
    absorb(row);
  }
}

void TokenDecoder::absorb(const std::vector<float>& row) {
  const BackboneConfig& cfg = model_.config();
  const std::size_t d = cfg.hidden;
  const std::size_t heads = cfg.heads;
  const std::size_t dh = cfg.head_dim();
  const std::int64_t pos = static_cast<std::int64_t>(len_);
  const bool ada = cfg.conditioning == Conditioning::adaln_zero;

  std::vector<float> x = row;
  std::vector<float> xa, qkv, tmp, ctx(d), attn, g, u, f;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    LayerState& ls = layers_[i];

    rms_norm_row(x, xa);
    if (ada) {
      for (std::size_t j = 0; j < d; ++j)
        xa[j] = xa[j] * (1.0f + ls.scale1[j]) + ls.shift1[j];
    }
    vec_matmul(xa, model_.param_named(p + "qkv.w").data(), nullptr, d, 3 * d, qkv);
    std::vector<float> q(qkv.begin(), qkv.begin() + d);
    std::vector<float> k(qkv.begin() + d, qkv.begin() + 2 * d);
    std::vector<float> vv(qkv.begin() + 2 * d, qkv.begin() + 3 * d);
    if (cfg.positions == Positions::rotary) {
      tmp = q;
      detail_rotary::rotate_row(tmp.data(), q.data(), d, heads, pos, false);
      tmp = k;
      detail_rotary::rotate_row(tmp.data(), k.data(), d, heads, pos, false);
    }
    if (cfg.qk_norm) {
      for (std::size_t h = 0; h < heads; ++h) {
        double sq = 0.0, sk = 0.0;
        for (std::size_t j = 0; j < dh; ++j) {
          sq += static_cast<double>(q[h * dh + j]) * q[h * dh + j];
          sk += static_cast<double>(k[h * dh + j]) * k[h * dh + j];
        }
        const double rq = std::sqrt(sq / static_cast<double>(dh) + kNormEps);
        const double rk = std::sqrt(sk / static_cast<double>(dh) + kNormEps);
        for (std::size_t j = 0; j < dh; ++j) {
          q[h * dh + j] = static_cast<float>(q[h * dh + j] / rq);
          k[h * dh + j] = static_cast<float>(k[h * dh + j] / rk);
        }
      }
    }
    // k rows are cached post-rotary/norm: neither depends on later tokens
    ls.kcache.insert(ls.kcache.end(), k.begin(), k.end());
    ls.vcache.insert(ls.vcache.end(), vv.begin(), vv.end());

    const std::size_t t_len = len_ + 1;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> sc(t_len);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < t_len; ++t) {
        double dot = 0.0;
        const float* kr = ls.kcache.data() + t * d + h * dh;
        for (std::size_t j = 0; j < dh; ++j)
          dot += static_cast<double>(q[h * dh + j]) * kr[j];
        sc[t] = dot * scale;
        mx = std::max(mx, sc[t]);
      }
      double z = 0.0;
      for (double& s : sc) {
        s = std::exp(s - mx);
        z += s;
      }
      for (std::size_t j = 0; j < dh; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < t_len; ++t)
          acc += sc[t] * ls.vcache[t * d + h * dh + j];
        ctx[h * dh + j] = static_cast<float>(acc / z);
      }
    }
    vec_matmul(ctx, model_.param_named(p + "out.w").data(), nullptr, d, d, attn);
    for (std::size_t j = 0; j < d; ++j)
      x[j] += ada ? ls.gate1[j] * attn[j] : attn[j];
    if (!ls.cross.empty())
      for (std::size_t j = 0; j < d; ++j) x[j] += ls.cross[j];

    rms_norm_row(x, xa);
    if (ada) {
      for (std::size_t j = 0; j < d; ++j)
        xa[j] = xa[j] * (1.0f + ls.scale2[j]) + ls.shift2[j];
    }
    const std::size_t dff = cfg.d_ff();
    if (cfg.ff == FfKind::swiglu_2_3_4) {
      vec_matmul(xa, model_.param_named(p + "ff_gate.w").data(), nullptr, d, dff, g);
      vec_matmul(xa, model_.param_named(p + "ff_up.w").data(), nullptr, d, dff, u);
      for (std::size_t j = 0; j < dff; ++j) g[j] = silu_val(g[j]) * u[j];
      vec_matmul(g, model_.param_named(p + "ff_down.w").data(), nullptr, dff, d, f);
    } else {
      vec_matmul(xa, model_.param_named(p + "ff1.w").data(),
                 model_.param_named(p + "ff1.b").data().data(), d, dff, g);
      constexpr double kC = 0.7978845608028654, kA = 0.044715;
      for (std::size_t j = 0; j < dff; ++j) {
        const double xv = g[j];
        g[j] = static_cast<float>(0.5 * xv * (1.0 + std::tanh(kC * (xv + kA * xv * xv * xv))));
      }
      vec_matmul(g, model_.param_named(p + "ff2.w").data(),
                 model_.param_named(p + "ff2.b").data().data(), dff, d, f);
    }
    for (std::size_t j = 0; j < d; ++j)
      x[j] += ada ? ls.gate2[j] * f[j] : f[j];
  }
  x_ = std::move(x);
  ++len_;
}

std::vector<float> TokenDecoder::step(std::int64_t id) {
  const BackboneConfig& cfg = model_.config();
  if (len_ >= cfg.trunk_len())
    throw IndexError("token decoder: stepping past the model's sequence length");
  if (id < 0 || static_cast<std::size_t>(id) > cfg.vocab_size)
    throw IndexError("token decoder: id out of range");
  const std::size_t d = cfg.hidden;

  std::vector<float> row(d);
  auto emb = model_.param_named("tok_emb").data();
  std::memcpy(row.data(), emb.data() + static_cast<std::size_t>(id) * d, d * sizeof(float));
  if (cfg.positions == Positions::learned) {
    auto pos = model_.param_named("pos").data();
    for (std::size_t j = 0; j < d; ++j) row[j] += pos[len_ * d + j];
  }
  absorb(row);

  std::vector<float> xh;
  rms_norm_row(x_, xh);
  if (cfg.conditioning == Conditioning::adaln_zero) {
    for (std::size_t j = 0; j < d; ++j)
      xh[j] = xh[j] * (1.0f + final_scale_[j]) + final_shift_[j];
  }
  std::vector<float> logits;
  vec_matmul(xh, model_.param_named("head.w").data(), nullptr, d, cfg.vocab_size, logits);
  return logits;
}

// ---- generation loops ------------------------------------------------------

std::vector<std::int64_t> sample_next_token_seq(const Backbone& model, const CondBatch& cond,
                                                const SamplerConfig& cfg, RngStream& rng) {
  cfg.validate();
  const BackboneConfig& mc = model.config();
  const std::size_t B = cond.batch();
  const std::size_t s = mc.seq_len;
  const std::int64_t bos = static_cast<std::int64_t>(mc.vocab_size);
  const double w = cfg.cfg_scale;

  std::vector<std::int64_t> out(B * s);
  const auto cv = cond.vecs.data();
  for (std::size_t b = 0; b < B; ++b) {
    std::span<const float> row{cv.data() + b * mc.cond_dim, mc.cond_dim};
    TokenDecoder dc(model, row, cond.null_flags[b] != 0);
    TokenDecoder du(model, row, true);
    std::vector<float> lc = dc.step(bos);
    std::vector<float> lu = du.step(bos);
    std::vector<float> g(mc.vocab_size);
    for (std::size_t pos = 0; pos < s; ++pos) {
      for (std::size_t j = 0; j < mc.vocab_size; ++j)
        g[j] = static_cast<float>((1.0 + w) * lc[j] - w * lu[j]);
      const std::int64_t tok = nucleus_sample(g, cfg.top_p, cfg.temperature, rng);
      out[b * s + pos] = tok;
      if (pos + 1 < s) {  // the last token has no successor to predict
        lc = dc.step(tok);
        lu = du.step(tok);
      }
    }
  }
  return out;
}

std::vector<std::int64_t> sample_masked(const Backbone& model, const CondBatch& cond,
                                        const SamplerConfig& cfg, RngStream& rng,
                                        std::vector<std::size_t>* trajectory) {
  cfg.validate();
  const BackboneConfig& mc = model.config();
  if (mc.family != Family::discrete)
    throw UsageError("sample_masked: needs a discrete-family model");
  if (mc.causal) throw UsageError("sample_masked: needs a bidirectional model");
  NoGrad<float> inference;

  const std::size_t B = cond.batch();
  const std::size_t s = mc.seq_len;
  const std::size_t V = mc.vocab_size;
  const std::int64_t mask_id = static_cast<std::int64_t>(V);
  const std::size_t N = cfg.steps;
  const double w = cfg.cfg_scale;

  std::vector<std::int64_t> ids(B * s, mask_id);
  std::vector<std::uint8_t> masked(B * s, 1);
  std::vector<double> conf(B * s, 0.0);
  const CondBatch null = CondBatch::all_null(B, mc.cond_dim);

  if (trajectory) {
    trajectory->clear();
    trajectory->push_back(s);
  }

  std::vector<float> g(V);
  for (std::size_t i = 1; i <= N; ++i) {
    Tensor lc = model.forward_ids(ids, B, cond);
    std::span<const float> lcv = lc.data();
    std::span<const float> luv = lcv;
    Tensor lu;
    if (w != 0.0) {
      lu = model.forward_ids(ids, B, null);
      luv = lu.data();
    }
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t pos = 0; pos < s; ++pos) {
        if (!masked[b * s + pos]) continue;
        const std::size_t off = (b * s + pos) * V;
        for (std::size_t j = 0; j < V; ++j)
          g[j] = static_cast<float>((1.0 + w) * lcv[off + j] - w * luv[off + j]);
        double p = 0.0;
        ids[b * s + pos] = sample_row(g, cfg.top_p, cfg.temperature, rng, &p);
        conf[b * s + pos] = p;
        masked[b * s + pos] = 0;
      }
    }

    const double t = static_cast<double>(i) / static_cast<double>(N);
    const std::size_t m = static_cast<std::size_t>(
        std::llround(mask_gamma(t) * static_cast<double>(s)));
    for (std::size_t b = 0; b < B; ++b) {
      if (m == 0) break;
      std::vector<std::uint32_t> pick;
      if (cfg.confidence_remask) {
        // drop the least confident fills; ties toward the lower position
        std::vector<std::uint32_t> idx(s);
        std::iota(idx.begin(), idx.end(), 0u);
        std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t c) {
          return conf[b * s + a] < conf[b * s + c];
        });
        pick.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m));
      } else {
        std::vector<std::uint32_t> perm = rng.permutation(static_cast<std::uint32_t>(s));
        pick.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
      }
      for (std::uint32_t pos : pick) {
        ids[b * s + pos] = mask_id;
        masked[b * s + pos] = 1;
      }
    }
    if (trajectory) trajectory->push_back(m);
  }
  return ids;
}

std::vector<float> euler_integrate(
    const std::function<std::vector<float>(const std::vector<float>&, double)>& eps_fn,
    std::vector<float> z1, std::size_t steps, double delta) {
  if (steps < 1) throw UsageError("euler_integrate: steps must be >= 1");
  if (!(delta > 0.0)) throw UsageError("euler_integrate: delta must be positive");
  const double dt = 1.0 / static_cast<double>(steps);
  std::vector<float> z = std::move(z1);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) * dt;
    const std::vector<float> eps = eps_fn(z, t);
    if (eps.size() != z.size()) throw ShapeError("euler_integrate: eps size != state size");
    const double denom = std::max(1.0 - t, delta);
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double v = (static_cast<double>(eps[j]) - z[j]) / denom;
      z[j] = static_cast<float>(z[j] - dt * v);
    }
  }
  return z;
}

Tensor sample_diffusion(const Backbone& model, const CondBatch& cond, const SamplerConfig& cfg,
                        RngStream& rng) {
  cfg.validate();
  const BackboneConfig& mc = model.config();
  if (mc.family != Family::continuous)
    throw UsageError("sample_diffusion: needs a continuous-family model");
  NoGrad<float> inference;

  const std::size_t B = cond.batch();
  const std::size_t n = B * mc.seq_len * mc.latent_channels;
  std::vector<float> z(n);
  for (float& v : z) v = static_cast<float>(rng.normal());

  const CondBatch null = CondBatch::all_null(B, mc.cond_dim);
  const double w = cfg.cfg_scale;
  const double dt = 1.0 / static_cast<double>(cfg.steps);

  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) * dt;
    const std::vector<float> tv(B, static_cast<float>(t));
    Tensor zt = Tensor::from({B, mc.seq_len, mc.latent_channels}, std::vector<float>(z));
    Tensor ec = model.forward_latent(zt, tv, cond);
    std::span<const float> ecv = ec.data();
    std::span<const float> euv = ecv;
    Tensor eu;
    if (w != 0.0) {
      eu = model.forward_latent(zt, tv, null);
      euv = eu.data();
    }
    const double denom = std::max(1.0 - t, cfg.delta);
    bool finite = true;
    for (std::size_t j = 0; j < n; ++j) {
      const double eps = (1.0 + w) * ecv[j] - w * euv[j];
      const double v = (eps - static_cast<double>(z[j])) / denom;
      z[j] = static_cast<float>(z[j] - dt * v);
      finite = finite && std::isfinite(z[j]);
    }
    if (!finite)
      throw NumericalError("sample_diffusion: non-finite state at step " + std::to_string(k));
  }
  return Tensor::from({B, mc.seq_len, mc.latent_channels}, std::move(z));
}

double inference_flops(Objective obj, const BackboneConfig& model_cfg, const SamplerConfig& cfg,
                       bool cfg_dual) {
  cfg.validate();
  const double fwd = forward_flops(model_cfg, model_cfg.seq_len).total;
  const double dual = cfg_dual ? 2.0 : 1.0;
  if (obj == Objective::next_token) return dual * fwd;
  return dual * static_cast<double>(cfg.steps) * fwd;
}

}  // namespace latentlab
