#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "latentlab/backbone.hpp"
#include "latentlab/objectives.hpp"
#include "latentlab/rng.hpp"
#include "latentlab/tensor.hpp"

namespace latentlab {

// Knobs shared by the three generation procedures. Token models ignore
// delta; the flow sampler ignores top_p/temperature; the autoregressive
// sampler ignores steps (it always takes seq_len of them).
struct SamplerConfig {
  double cfg_scale = 0.0;
  std::size_t steps = 1;
  double top_p = 0.9;
  double temperature = 1.0;
  bool confidence_remask = false;  // masked sampler: re-mask lowest-confidence fills
  double delta = 1e-3;             // guard on the 1/(1-t) velocity factor

  // per-objective defaults: nt w=8; mt w=5, 10 steps; cfm w=5, 50 steps
  static SamplerConfig defaults(Objective obj);
  void validate() const;  // ConfigError
};

// (1+w)*x_c - w*x_u, elementwise; shapes must match.
Tensor cfg_combine(const Tensor& x_c, const Tensor& x_u, double w);

// Ids kept by the nucleus filter, sorted by descending probability (ties
// broken toward the lower id): the smallest prefix of the sorted
// softmax(logits/temperature) whose mass reaches top_p.
std::vector<std::size_t> nucleus_support(std::span<const float> logits, double top_p,
                                         double temperature);
std::int64_t nucleus_sample(std::span<const float> logits, double top_p, double temperature,
                            RngStream& rng);

// Single-stream incremental decoder over a causal discrete model. Keeps
// per-layer key/value caches so each appended token costs one position; the
// logits agree with a full-prefix forward to within float round-off.
class TokenDecoder {
 public:
  // cond_vec must hold cond_dim values; null_cond substitutes the learned
  // null row (the vector is then ignored).
  TokenDecoder(const Backbone& model, std::span<const float> cond_vec, bool null_cond);

  // Append one id (vocab_size acts as BOS) and return logits for the next
  // position. Throws IndexError past seq_len or on an out-of-range id.
  std::vector<float> step(std::int64_t id);

  std::size_t length() const { return len_; }

 private:
  struct LayerState {
    // adaLN modulation rows, empty otherwise
    std::vector<float> shift1, scale1, gate1, shift2, scale2, gate2;
    std::vector<float> cross;  // cross-attention value path, empty otherwise
    std::vector<float> kcache, vcache;  // [len, d], k rows stored post-rotary/norm
  };

  void absorb(const std::vector<float>& row);  // run one trunk row, extend caches

  const Backbone& model_;
  std::vector<float> c_;  // embedded conditioning row [d]
  std::vector<float> x_;  // last absorbed row's trunk output
  std::vector<LayerState> layers_;
  std::vector<float> final_shift_, final_scale_;
  std::size_t len_ = 0;  // trunk rows absorbed (includes the in-context row)
};

// Autoregressive decode with CFG: two cached streams (conditional and null),
// combined logits nucleus-sampled left to right. Returns batch*seq_len ids.
std::vector<std::int64_t> sample_next_token_seq(const Backbone& model, const CondBatch& cond,
                                                const SamplerConfig& cfg, RngStream& rng);

// Iterative unmasking: start fully masked, fill every masked position from
// the guided logits each round, then re-mask round(gamma(i/N)*s) positions
// (uniformly at random, or the lowest-confidence fills when the flag is on).
// trajectory, when given, receives the masked count after each round,
// starting with the initial s. Output never contains the mask id.
std::vector<std::int64_t> sample_masked(const Backbone& model, const CondBatch& cond,
                                        const SamplerConfig& cfg, RngStream& rng,
                                        std::vector<std::size_t>* trajectory = nullptr);

// Euler integration of dz/dt = (eps(z, t) - z) / max(1 - t, delta) from t=1
// down to 0 with left-endpoint steps. Exposed so closed-form noise oracles
// can drive exactly the stepping the model sampler uses.
std::vector<float> euler_integrate(
    const std::function<std::vector<float>(const std::vector<float>&, double)>& eps_fn,
    std::vector<float> z1, std::size_t steps, double delta);

// Flow sampling: draw z at t=1 from N(0, I), integrate the guided velocity
// field to t=0. Returns [batch, seq_len, latent_channels]. Throws
// NumericalError naming the step if the state leaves the finite range.
Tensor sample_diffusion(const Backbone& model, const CondBatch& cond, const SamplerConfig& cfg,
                        RngStream& rng);

// Forward FLOPs spent generating one sample: one pass over the grid for
// next-token (caching makes N token steps cost one parallel forward), steps
// passes for the iterative samplers; cfg_dual doubles for the null stream.
double inference_flops(Objective obj, const BackboneConfig& model_cfg, const SamplerConfig& cfg,
                       bool cfg_dual = true);

}  // namespace latentlab
