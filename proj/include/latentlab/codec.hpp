#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "latentlab/optim.hpp"
#include "latentlab/rng.hpp"
#include "latentlab/tensor.hpp"

namespace latentlab {

enum class Regularizer { kl, vq, lfq, fsq };

const char* regularizer_name(Regularizer r);
Regularizer regularizer_from_name(const std::string& name);  // ConfigError

struct CodecConfig {
  Regularizer regularizer = Regularizer::lfq;
  std::size_t downsample_factor = 4;  // power of two, <= 8
  std::size_t latent_channels = 4;    // KL latent dim / VQ code dim
  std::size_t vocab_size = 16384;     // VQ codebook size; LFQ/FSQ implied vocab
  std::vector<int> fsq_levels = {8, 8, 16, 16};
  std::size_t image_side = 32;

  bool discrete() const { return regularizer != Regularizer::kl; }
  std::size_t grid_side() const { return image_side / downsample_factor; }
  std::size_t seq_len() const { return grid_side() * grid_side(); }
  // Channel count of the latent fed to the decoder (and of z_e rows).
  std::size_t code_dim() const;
  void validate() const;  // throws ConfigError
};

// Token ids of one encoded image, raster order (y * grid_side + x).
struct TokenGrid {
  std::size_t grid_side = 0;
  std::size_t vocab = 0;
  std::vector<std::int64_t> ids;
};

struct ReconReport {
  double mse = 0.0;
  double psnr = 0.0;  // 10*log10(range^2 / mse), capped at 99 dB
  double codebook_utilization = 0.0;
  double code_entropy = 0.0;  // bits, from the empirical id histogram
};

// Pixel value range for PSNR: images live in [-1, 1].
inline constexpr double kPixelRange = 2.0;

ReconReport make_recon_report(double mse, const std::vector<std::int64_t>& ids,
                              std::size_t vocab);

// ---- latent regularizers -----------------------------------------------------

// Reparameterized sample plus the closed-form KL to N(0, I):
// kl = 0.5 * mean(mu^2 + sigma^2 - 1 - logvar), z = mu + sigma * eps.
template <class T>
std::pair<TensorT<T>, TensorT<T>> kl_regularize(const TensorT<T>& mu,
                                                const TensorT<T>& logvar,
                                                RngStream& rng);

template <class T>
struct QuantizeResultT {
  std::vector<std::int64_t> ids;  // one per row of z_e
  TensorT<T> z_q;                 // same shape as z_e; straight-through grad
  TensorT<T> aux;                 // scalar auxiliary loss (zeros for FSQ)
};
using QuantizeResult = QuantizeResultT<float>;

// Nearest-codebook-row quantization; ties break to the lowest index.
// aux = ||sg(z_e) - e||^2 + beta ||z_e - sg(e)||^2 (mean-square form).
template <class T>
QuantizeResultT<T> vq_quantize(const TensorT<T>& z_e, const TensorT<T>& codebook,
                               T beta = T(0.25));

// Sign quantization to {-1,+1}^dim; bit i of the id is set when z_e[i] > 0
// (zero counts as negative). aux = commit_w * ||z_e - sg(z_q)||^2 +
// entropy_w * (mean per-sample code entropy - batch code entropy), entropies
// in nats from the factorized per-dim Bernoulli p_i = sigmoid(z_e[i]).
template <class T>
QuantizeResultT<T> lfq_quantize(const TensorT<T>& z_e, std::size_t vocab,
                                T commit_w = T(0.25), T entropy_w = T(0.1));

// Bounded scalar quantization: u_i = (L_i-1)/2 * tanh(z_i), level
// q_i = clamp(round_half_away(u_i) + floor((L_i-1)/2), 0, L_i-1); the id is
// the mixed-radix encoding with dimension 0 least significant. z_q decodes
// to (q_i - (L_i-1)/2) / ((L_i-1)/2) with a straight-through gradient that
// follows the tanh surrogate. No auxiliary loss.
template <class T>
QuantizeResultT<T> fsq_quantize(const TensorT<T>& z_e,
                                const std::vector<int>& levels);

// id <-> code helpers (pure integer / table arithmetic).
std::vector<int> fsq_digits(std::size_t id, const std::vector<int>& levels);
std::size_t fsq_id(const std::vector<int>& digits, const std::vector<int>& levels);
std::vector<float> fsq_code(std::size_t id, const std::vector<int>& levels);
std::vector<float> lfq_code(std::size_t id, std::size_t dim);  // ±1 pattern

// ---- autoencoder ---------------------------------------------------------------

// 3-stage strided conv encoder (widths 32/64/128, GELU) with a 1x1 head, and
// the mirrored upsample+conv decoder. The KL head emits 2*latent_channels
// (mu, logvar); discrete heads emit code_dim() channels.
class Autoencoder {
 public:
  Autoencoder(CodecConfig cfg, std::uint64_t seed);

  const CodecConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  struct EncodeResult {
    Tensor z;                       // [B, s, code_dim] latent fed to decode()
    std::vector<std::int64_t> ids;  // discrete codecs: B * s ids, raster order
    Tensor reg;                     // scalar regularizer (kl or quantizer aux)
    bool has_reg = false;
  };

  // images [B, 3, side, side] in [-1, 1]. With rng (training) the KL variant
  // samples z = mu + sigma*eps; without (rng == nullptr) it returns mu.
  EncodeResult encode(const Tensor& images, RngStream* rng) const;
  // z [B, s, code_dim] -> images [B, 3, side, side].
  Tensor decode(const Tensor& z) const;

  // Deterministic id encoding for pre-encoding / evaluation (discrete only).
  std::vector<std::int64_t> encode_ids(const Tensor& images) const;
  // ids (B * seq_len, raster order) -> decoded images, no gradients.
  Tensor decode_ids(const std::vector<std::int64_t>& ids, std::size_t batch) const;

 private:
  Tensor encode_field(const Tensor& images) const;  // [B, s, head_channels]
  const Tensor& param(const std::string& name) const;

  CodecConfig cfg_;
  ParamSet params_;
};

// ---- training / evaluation -----------------------------------------------------

// Image batch source: (first_index, n) -> [n, 3, side, side].
using ImageSource = std::function<Tensor(std::uint64_t, std::size_t)>;

struct AeTrainConfig {
  std::uint64_t steps = 2000;
  std::size_t batch = 8;
  double lr = 1e-3;
  // Weight on the regularizer term; NaN selects the per-kind default
  // (1e-6 for KL, 1.0 for quantizer aux).
  double reg_weight = std::numeric_limits<double>::quiet_NaN();
  // Halt at the first evaluation with eval MSE <= this; negative disables.
  double early_stop_mse = -1.0;
  std::uint64_t eval_interval = 200;
  std::size_t eval_count = 32;
  std::size_t eval_batch = 8;
  std::uint64_t seed = 0;
};

struct TrainedCodec {
  Autoencoder ae;
  ReconReport report;
  std::uint64_t steps_ran = 0;
};

// Trains with loss = MSE + reg_weight * regularizer. Aborts with
// NumericalError naming the step if the loss goes non-finite.
TrainedCodec train_autoencoder(const CodecConfig& cfg, const ImageSource& source,
                               const AeTrainConfig& tcfg);

// Reconstruction + codebook-health metrics over [first, first + count).
ReconReport codec_metrics(const Autoencoder& ae, const ImageSource& source,
                          std::uint64_t first, std::size_t count,
                          std::size_t batch = 8);

// ---- persistence ---------------------------------------------------------------

// FNV-1a over the serialized parameters; identifies a trained codec.
std::string codec_hash(const Autoencoder& ae);

// Writes <prefix>.tensors and <prefix>.json.
void save_codec(const Autoencoder& ae, const std::string& prefix);
Autoencoder load_codec(const std::string& prefix);

// Pre-encodes count images. Discrete codecs write u16 little-endian ids to
// <prefix>.ids; the KL codec writes mu latents (one [count*s, c] tensor) to
// <prefix>.lat. Both write a JSON manifest to <prefix>.manifest.json with
// count, grid side, codec hash, and (continuous) the latent std.
void pre_encode_dataset(const Autoencoder& ae, const ImageSource& source,
                        std::uint64_t count, const std::string& prefix,
                        std::size_t batch = 16);

struct PreEncoded {
  std::size_t count = 0;
  std::size_t grid_side = 0;
  std::size_t vocab = 0;         // discrete
  double latent_scale = 1.0;     // continuous: 1 / std of stored latents
  std::string codec_hash;
  std::vector<std::int64_t> ids; // discrete
  Tensor latents;                // continuous [count*s, c]
  bool discrete = false;
};
PreEncoded load_pre_encoded(const std::string& prefix);

}  // namespace latentlab
