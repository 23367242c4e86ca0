#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentlab/optim.hpp"
#include "latentlab/tensor.hpp"

namespace latentlab {

// sinusoid width feeding the continuous family's time MLP
inline constexpr std::size_t kTimeFeatureDim = 256;

enum class SizeClass { T, S, M, L, XL };
enum class Family { discrete, continuous };
enum class Conditioning { adaln_zero, in_context, cross_attention };
enum class Positions { rotary, learned };
enum class FfKind { swiglu_2_3_4, gelu_4 };

const char* size_class_name(SizeClass s);
SizeClass size_class_from_name(const std::string& name);
const char* family_name(Family f);
Family family_from_name(const std::string& name);
const char* conditioning_name(Conditioning c);
Conditioning conditioning_from_name(const std::string& name);
const char* positions_name(Positions p);
Positions positions_from_name(const std::string& name);
const char* ff_kind_name(FfKind f);
FfKind ff_kind_from_name(const std::string& name);

struct BackboneConfig {
  SizeClass size = SizeClass::T;
  std::size_t layers = 4;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  Family family = Family::discrete;
  Conditioning conditioning = Conditioning::adaln_zero;
  Positions positions = Positions::rotary;
  FfKind ff = FfKind::swiglu_2_3_4;
  bool qk_norm = true;
  bool causal = true;                 // next-token; masked/continuous run bidirectional
  std::size_t vocab_size = 16384;     // discrete family
  std::size_t latent_channels = 4;    // continuous family
  std::size_t cond_dim = 64;
  std::size_t seq_len = 64;

  // layers/hidden/heads for a size class (T 4/128/4, S 12/768/12,
  // M 24/1024/16, L 24/1536/16, XL 32/2304/32).
  static BackboneConfig preset(SizeClass size, Family family);

  std::size_t head_dim() const { return hidden / heads; }
  std::size_t d_ff() const;  // swiglu: round_multiple(2/3*4*d, 64); gelu_4: 4d
  // sequence length inside the blocks (in_context prepends one token)
  std::size_t trunk_len() const {
    return seq_len + (conditioning == Conditioning::in_context ? 1 : 0);
  }
  void validate() const;  // throws ConfigError
};

struct ParamBreakdown {
  std::uint64_t embedding = 0;     // token table / latent in-proj + positions + time
  std::uint64_t blocks = 0;        // attention + feed-forward weights
  std::uint64_t conditioning = 0;  // cond embedder, null row, adaLN maps, cross maps
  std::uint64_t head = 0;
  std::uint64_t total = 0;
  double cond_fraction = 0.0;  // conditioning / total
};

// Exact symbolic parameter count for the layout Backbone builds.
ParamBreakdown param_count(const BackboneConfig& cfg);

// Per-sample conditioning rows plus null-flag marks (CFG dropout / sampling).
struct CondBatch {
  Tensor vecs;                           // [B, cond_dim], not trained
  std::vector<std::uint8_t> null_flags;  // size B; 1 = use the null embedding

  static CondBatch from_rows(const std::vector<std::vector<float>>& rows);
  static CondBatch all_null(std::size_t batch, std::size_t cond_dim);
  std::size_t batch() const { return null_flags.size(); }
};

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  bool ema = false;
};

// Pre-norm transformer over token ids (logits head) or latent sequences
// (noise-prediction head), with adaLN-zero / in-context / cross-attention
// conditioning. Norms carry no affine parameters; modulation supplies
// shift/scale where the mode calls for it.
class Backbone {
 public:
  Backbone(BackboneConfig cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Discrete family. ids laid out [batch * seq_len], raster order; the id
  // vocab_size is the BOS / [MASK] row. Returns logits [B, s, vocab_size].
  Tensor forward_ids(const std::vector<std::int64_t>& ids, std::size_t batch,
                     const CondBatch& cond) const;

  // Continuous family. z [B, s, latent_channels], t one value per sample in
  // [0, 1]. Returns the epsilon prediction with z's shape.
  Tensor forward_latent(const Tensor& z, const std::vector<float>& t,
                        const CondBatch& cond) const;

  // Hidden state after the blocks (before the final norm/head); exposes the
  // adaLN-zero identity-at-init invariant.
  Tensor forward_hidden(const std::vector<std::int64_t>& ids, std::size_t batch,
                        const CondBatch& cond) const;

  // Named read access for incremental decode paths; UsageError when absent.
  const Tensor& param_named(const std::string& name) const { return param(name); }

 private:
  Tensor trunk(Tensor h, const Tensor& c) const;
  Tensor cond_embed(const CondBatch& cond, const std::vector<float>* t) const;
  Tensor apply_head(const Tensor& h, const Tensor& c) const;
  Tensor embed_ids(const std::vector<std::int64_t>& ids, std::size_t batch) const;
  const Tensor& param(const std::string& name) const;

  BackboneConfig cfg_;
  ParamSet params_;
};

void save_backbone(const Backbone& model, const std::string& prefix,
                   const CheckpointMeta& meta = {});
Backbone load_backbone(const std::string& prefix, CheckpointMeta* meta = nullptr);

}  // namespace latentlab
