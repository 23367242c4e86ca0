#include "latentlab/codec.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "latentlab/error.hpp"

namespace latentlab {

namespace {

constexpr std::uint64_t kEvalOffset = std::uint64_t(1) << 40;

bool power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::size_t int_log2(std::size_t v) {
  std::size_t n = 0;
  while (v > 1) {
    v >>= 1;
    ++n;
  }
  return n;
}

// Encoder stage strides per downsample factor.
std::array<std::size_t, 3> stage_strides(std::size_t f) {
  switch (f) {
    case 1: return {1, 1, 1};
    case 2: return {2, 1, 1};
    case 4: return {2, 2, 1};
    default: return {2, 2, 2};
  }
}

}  // namespace

const char* regularizer_name(Regularizer r) {
  switch (r) {
    case Regularizer::kl: return "kl";
    case Regularizer::vq: return "vq";
    case Regularizer::lfq: return "lfq";
    default: return "fsq";
  }
}

Regularizer regularizer_from_name(const std::string& name) {
  if (name == "kl") return Regularizer::kl;
  if (name == "vq") return Regularizer::vq;
  if (name == "lfq") return Regularizer::lfq;
  if (name == "fsq") return Regularizer::fsq;
  throw ConfigError("unknown regularizer '" + name + "' (kl|vq|lfq|fsq)");
}

std::size_t CodecConfig::code_dim() const {
  switch (regularizer) {
    case Regularizer::kl:
    case Regularizer::vq: return latent_channels;
    case Regularizer::lfq: return int_log2(vocab_size);
    default: return fsq_levels.size();
  }
}

void CodecConfig::validate() const {
  if (!power_of_two(downsample_factor) || downsample_factor > 8)
    throw ConfigError("downsample_factor must be a power of two <= 8");
  if (image_side == 0 || image_side % downsample_factor != 0)
    throw ConfigError("image_side must be divisible by downsample_factor");
  if (latent_channels == 0) throw ConfigError("latent_channels must be positive");
  if (regularizer == Regularizer::vq && vocab_size == 0)
    throw ConfigError("vq: vocab_size must be positive");
  if (regularizer == Regularizer::lfq && !power_of_two(vocab_size))
    throw ConfigError("lfq: vocab_size must be a power of two");
  if (regularizer == Regularizer::fsq) {
    std::size_t prod = 1;
    for (int l : fsq_levels) {
      if (l < 2) throw ConfigError("fsq: every level must be >= 2");
      prod *= static_cast<std::size_t>(l);
    }
    if (prod != vocab_size)
      throw ConfigError("fsq: product(fsq_levels) must equal vocab_size");
  }
}

ReconReport make_recon_report(double mse, const std::vector<std::int64_t>& ids,
                              std::size_t vocab) {
  ReconReport r;
  r.mse = mse;
  r.psnr = mse <= 0.0
               ? 99.0
               : std::min(99.0, 10.0 * std::log10(kPixelRange * kPixelRange / mse));
  if (vocab > 0 && !ids.empty()) {
    std::vector<std::uint64_t> hist(vocab, 0);
    for (std::int64_t id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab)
        throw IndexError("make_recon_report: id out of vocab range");
      ++hist[static_cast<std::size_t>(id)];
    }
    std::size_t distinct = 0;
    double entropy = 0.0;
    const double n = static_cast<double>(ids.size());
    for (std::uint64_t c : hist) {
      if (c == 0) continue;
      ++distinct;
      const double p = static_cast<double>(c) / n;
      entropy -= p * std::log2(p);
    }
    r.codebook_utilization = static_cast<double>(distinct) / static_cast<double>(vocab);
    r.code_entropy = entropy;
  }
  return r;
}

// ---- regularizers --------------------------------------------------------------

template <class T>
std::pair<TensorT<T>, TensorT<T>> kl_regularize(const TensorT<T>& mu,
                                                const TensorT<T>& logvar,
                                                RngStream& rng) {
  if (mu.shape() != logvar.shape()) throw ShapeError("kl_regularize: shape mismatch");
  TensorT<T> eps = TensorT<T>::randn(mu.shape(), rng);
  auto sigma = exp_op(mul_scalar(logvar, T(0.5)));
  auto z = add(mu, mul(sigma, eps));
  return {z, kl_penalty(mu, logvar)};
}

template <class T>
QuantizeResultT<T> vq_quantize(const TensorT<T>& z_e, const TensorT<T>& codebook,
                               T beta) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0)
    throw ConfigError("vq_quantize: codebook must be a nonempty [K, c] table");
  const std::size_t c = codebook.dim(1);
  if (z_e.dim(z_e.rank() - 1) != c)
    throw ShapeError("vq_quantize: last dim of z_e must match the code dim");
  const std::size_t K = codebook.dim(0);
  const std::size_t rows = z_e.numel() / c;

  const auto zv = z_e.data();
  const auto cb = codebook.data();
  QuantizeResultT<T> out;
  out.ids.resize(rows);
  std::vector<T> qvals(z_e.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = zv.data() + r * c;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T* e = cb.data() + k * c;
      double d = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double diff = static_cast<double>(z[j]) - static_cast<double>(e[j]);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_k = k;
      }
    }
    out.ids[r] = static_cast<std::int64_t>(best_k);
    std::copy(cb.data() + best_k * c, cb.data() + (best_k + 1) * c,
              qvals.data() + r * c);
  }
  out.z_q = straight_through(z_e, std::move(qvals));
  // e rows gathered differentiably so the codebook-pull term trains the table.
  Shape row_prefix(z_e.shape().begin(), z_e.shape().end() - 1);
  auto e = embedding(codebook, out.ids, std::move(row_prefix));
  out.aux = add(mse_loss(detach(z_e), e), mul_scalar(mse_loss(z_e, detach(e)), beta));
  return out;
}

template <class T>
QuantizeResultT<T> lfq_quantize(const TensorT<T>& z_e, std::size_t vocab,
                                T commit_w, T entropy_w) {
  if (!power_of_two(vocab)) throw ConfigError("lfq_quantize: vocab must be a power of two");
  const std::size_t d = int_log2(vocab);
  if (z_e.dim(z_e.rank() - 1) != d)
    throw ConfigError("lfq_quantize: last dim of z_e must be log2(vocab)");
  const std::size_t rows = z_e.numel() / d;

  const auto zv = z_e.data();
  QuantizeResultT<T> out;
  out.ids.resize(rows);
  std::vector<T> signs(z_e.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    std::int64_t id = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const bool pos = zv[r * d + j] > T(0);  // zero counts as negative
      signs[r * d + j] = pos ? T(1) : T(-1);
      if (pos) id |= std::int64_t(1) << j;
    }
    out.ids[r] = id;
  }
  out.z_q = straight_through(z_e, std::move(signs));

  auto commit = mse_loss(z_e, detach(out.z_q));
  // Factorized Bernoulli code entropies (nats): confident per-sample codes,
  // diverse batch usage.
  auto flat = z_e.rank() == 2 ? z_e : reshape(z_e, Shape{rows, d});
  auto p = sigmoid(flat);
  auto sp_pos = softplus(flat);
  auto sp_neg = softplus(mul_scalar(flat, T(-1)));
  auto one_minus_p = sub(TensorT<T>::full(flat.shape(), T(1)), p);
  auto h = add(mul(p, sp_neg), mul(one_minus_p, sp_pos));
  auto sample_h = mul_scalar(mean_all(h), static_cast<T>(d));

  auto p_bar = mean_axis0(p);
  // keep log() off exact 0/1 when every sample saturates a dimension
  auto p_safe = add(mul_scalar(p_bar, T(1) - T(2e-6)), TensorT<T>::full(p_bar.shape(), T(1e-6)));
  auto one_minus = sub(TensorT<T>::full(p_safe.shape(), T(1)), p_safe);
  auto batch_h_terms =
      add(mul(p_safe, log_op(p_safe)), mul(one_minus, log_op(one_minus)));
  auto batch_h = mul_scalar(mean_all(batch_h_terms), -static_cast<T>(d));

  auto entropy_gap = sub(sample_h, batch_h);
  out.aux = add(mul_scalar(commit, commit_w), mul_scalar(entropy_gap, entropy_w));
  return out;
}

std::vector<int> fsq_digits(std::size_t id, const std::vector<int>& levels) {
  std::vector<int> q(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const std::size_t L = static_cast<std::size_t>(levels[i]);
    q[i] = static_cast<int>(id % L);
    id /= L;
  }
  return q;
}

std::size_t fsq_id(const std::vector<int>& digits, const std::vector<int>& levels) {
  std::size_t id = 0;
  std::size_t radix = 1;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    id += static_cast<std::size_t>(digits[i]) * radix;
    radix *= static_cast<std::size_t>(levels[i]);
  }
  return id;
}

std::vector<float> fsq_code(std::size_t id, const std::vector<int>& levels) {
  auto q = fsq_digits(id, levels);
  std::vector<float> code(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double half = (levels[i] - 1) / 2.0;
    code[i] = static_cast<float>((q[i] - half) / half);
  }
  return code;
}

std::vector<float> lfq_code(std::size_t id, std::size_t dim) {
  std::vector<float> code(dim);
  for (std::size_t j = 0; j < dim; ++j)
    code[j] = (id >> j) & 1 ? 1.0f : -1.0f;
  return code;
}

template <class T>
QuantizeResultT<T> fsq_quantize(const TensorT<T>& z_e,
                                const std::vector<int>& levels) {
  for (int l : levels)
    if (l < 2) throw ConfigError("fsq_quantize: every level must be >= 2");
  const std::size_t d = levels.size();
  if (d == 0 || z_e.dim(z_e.rank() - 1) != d)
    throw ConfigError("fsq_quantize: last dim of z_e must be len(levels)");
  const std::size_t rows = z_e.numel() / d;

  const auto zv = z_e.data();
  QuantizeResultT<T> out;
  out.ids.resize(rows);
  std::vector<T> qvals(z_e.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<int> q(d);
    for (std::size_t j = 0; j < d; ++j) {
      const int L = levels[j];
      const double half = (L - 1) / 2.0;
      const double u = half * std::tanh(static_cast<double>(zv[r * d + j]));
      // round half away from zero, then shift to {0..L-1}
      long lv = std::llround(u) + (L - 1) / 2;
      lv = std::clamp<long>(lv, 0, L - 1);
      q[j] = static_cast<int>(lv);
      qvals[r * d + j] = static_cast<T>((q[j] - half) / half);
    }
    out.ids[r] = static_cast<std::int64_t>(fsq_id(q, levels));
  }
  // Gradient follows the bounded surrogate (round treated as identity).
  out.z_q = straight_through(tanh_op(z_e), std::move(qvals));
  out.aux = TensorT<T>::zeros({1});
  return out;
}

// ---- autoencoder ---------------------------------------------------------------

namespace {

Tensor conv_init(Shape shape, RngStream& rng) {
  std::size_t fan_in = shape[1] * shape[2] * shape[3];
  float std = std::sqrt(2.0f / static_cast<float>(fan_in));
  Tensor w = Tensor::trunc_normal(shape, rng, std);
  w.set_requires_grad(true);
  return w;
}

Tensor zeros_param(Shape shape) {
  Tensor b = Tensor::zeros(shape);
  b.set_requires_grad(true);
  return b;
}

}  // namespace

Autoencoder::Autoencoder(CodecConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  RngStream rng(seed, 0xc0dec);
  const std::size_t head = cfg_.regularizer == Regularizer::kl
                               ? 2 * cfg_.latent_channels
                               : cfg_.code_dim();
  auto push_conv = [&](const std::string& name, std::size_t co, std::size_t ci,
                       std::size_t k) {
    params_.push_back({name + ".w", conv_init({co, ci, k, k}, rng), true});
    params_.push_back({name + ".b", zeros_param({co}), false});
  };
  push_conv("enc1", 32, 3, 3);
  push_conv("enc2", 64, 32, 3);
  push_conv("enc3", 128, 64, 3);
  push_conv("head", head, 128, 1);
  push_conv("dec_in", 128, cfg_.code_dim(), 1);
  push_conv("dec1", 64, 128, 3);
  push_conv("dec2", 32, 64, 3);
  push_conv("dec3", 3, 32, 3);
  if (cfg_.regularizer == Regularizer::vq) {
    const float lim = 1.0f / static_cast<float>(cfg_.vocab_size);
    Tensor cb = Tensor::uniform({cfg_.vocab_size, cfg_.latent_channels}, rng, -lim, lim);
    cb.set_requires_grad(true);
    params_.push_back({"codebook", cb, false});
  }
}

const Tensor& Autoencoder::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw UsageError("autoencoder: no parameter named " + name);
}

Tensor Autoencoder::encode_field(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_side ||
      images.dim(3) != cfg_.image_side)
    throw ShapeError("encode: expected [B, 3, side, side] images");
  auto s = stage_strides(cfg_.downsample_factor);
  auto h = gelu(conv2d(images, param("enc1.w"), param("enc1.b"), s[0], 1));
  h = gelu(conv2d(h, param("enc2.w"), param("enc2.b"), s[1], 1));
  h = gelu(conv2d(h, param("enc3.w"), param("enc3.b"), s[2], 1));
  auto f = conv2d(h, param("head.w"), param("head.b"), 1, 0);
  return nchw_to_nsc(f);
}

Autoencoder::EncodeResult Autoencoder::encode(const Tensor& images,
                                              RngStream* rng) const {
  EncodeResult res;
  Tensor field = encode_field(images);
  switch (cfg_.regularizer) {
    case Regularizer::kl: {
      auto parts = split_cols(field, 2);
      if (rng) {
        auto [z, kl] = kl_regularize(parts[0], parts[1], *rng);
        res.z = z;
        res.reg = kl;
      } else {
        res.z = parts[0];  // deterministic mean latent for eval / pre-encode
        res.reg = kl_penalty(parts[0], parts[1]);
      }
      res.has_reg = true;
      return res;
    }
    case Regularizer::vq: {
      auto q = vq_quantize(field, param("codebook"));
      res.z = q.z_q;
      res.ids = std::move(q.ids);
      res.reg = q.aux;
      res.has_reg = true;
      return res;
    }
    case Regularizer::lfq: {
      auto q = lfq_quantize(field, cfg_.vocab_size);
      res.z = q.z_q;
      res.ids = std::move(q.ids);
      res.reg = q.aux;
      res.has_reg = true;
      return res;
    }
    default: {
      auto q = fsq_quantize(field, cfg_.fsq_levels);
      res.z = q.z_q;
      res.ids = std::move(q.ids);
      res.reg = q.aux;
      res.has_reg = false;  // FSQ has no auxiliary loss
      return res;
    }
  }
}

Tensor Autoencoder::decode(const Tensor& z) const {
  const std::size_t g = cfg_.grid_side();
  if (z.rank() != 3 || z.dim(1) != g * g || z.dim(2) != cfg_.code_dim())
    throw ShapeError("decode: expected [B, s, code_dim] latents");
  auto s = stage_strides(cfg_.downsample_factor);
  auto h = gelu(conv2d(nsc_to_nchw(z, g, g), param("dec_in.w"), param("dec_in.b"), 1, 0));
  if (s[2] == 2) h = upsample_nearest2(h);
  h = gelu(conv2d(h, param("dec1.w"), param("dec1.b"), 1, 1));
  if (s[1] == 2) h = upsample_nearest2(h);
  h = gelu(conv2d(h, param("dec2.w"), param("dec2.b"), 1, 1));
  if (s[0] == 2) h = upsample_nearest2(h);
  return conv2d(h, param("dec3.w"), param("dec3.b"), 1, 1);
}

std::vector<std::int64_t> Autoencoder::encode_ids(const Tensor& images) const {
  if (!cfg_.discrete()) throw UsageError("encode_ids: codec is continuous");
  NoGrad<float> guard;
  return encode(images, nullptr).ids;
}

Tensor Autoencoder::decode_ids(const std::vector<std::int64_t>& ids,
                               std::size_t batch) const {
  if (!cfg_.discrete()) throw UsageError("decode_ids: codec is continuous");
  const std::size_t s = cfg_.seq_len();
  const std::size_t c = cfg_.code_dim();
  if (ids.size() != batch * s) throw ShapeError("decode_ids: ids size != batch * seq_len");
  std::vector<float> z(batch * s * c);
  const auto cb = cfg_.regularizer == Regularizer::vq ? param("codebook").data()
                                                      : std::span<const float>();
  for (std::size_t r = 0; r < batch * s; ++r) {
    const std::int64_t id = ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
      throw IndexError("decode_ids: id out of range");
    switch (cfg_.regularizer) {
      case Regularizer::vq:
        std::copy(cb.data() + static_cast<std::size_t>(id) * c,
                  cb.data() + (static_cast<std::size_t>(id) + 1) * c, z.data() + r * c);
        break;
      case Regularizer::lfq: {
        auto code = lfq_code(static_cast<std::size_t>(id), c);
        std::copy(code.begin(), code.end(), z.data() + r * c);
        break;
      }
      default: {
        auto code = fsq_code(static_cast<std::size_t>(id), cfg_.fsq_levels);
        std::copy(code.begin(), code.end(), z.data() + r * c);
        break;
      }
    }
  }
  NoGrad<float> guard;
  return decode(Tensor::from({batch, s, c}, std::move(z)));
}

// ---- training / evaluation -----------------------------------------------------

namespace {

double eval_mse(const Autoencoder& ae, const ImageSource& source, std::uint64_t first,
                std::size_t count, std::size_t batch,
                std::vector<std::int64_t>* ids_out) {
  NoGrad<float> guard;
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t done = 0; done < count; done += batch) {
    const std::size_t b = std::min(batch, count - done);
    Tensor x = source(first + done, b);
    auto enc = ae.encode(x, nullptr);
    Tensor xhat = ae.decode(enc.z);
    auto xv = x.data();
    auto rv = xhat.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double d = static_cast<double>(rv[i]) - static_cast<double>(xv[i]);
      sq += d * d;
    }
    n += xv.size();
    if (ids_out)
      ids_out->insert(ids_out->end(), enc.ids.begin(), enc.ids.end());
  }
  return sq / static_cast<double>(n);
}

}  // namespace

TrainedCodec train_autoencoder(const CodecConfig& cfg, const ImageSource& source,
                               const AeTrainConfig& tcfg) {
  cfg.validate();
  Autoencoder ae(cfg, tcfg.seed);
  AdamW opt(ae.params());
  RngStream noise(tcfg.seed, 0x5eed);

  double reg_w = tcfg.reg_weight;
  if (std::isnan(reg_w))
    reg_w = cfg.regularizer == Regularizer::kl ? 1e-6 : 1.0;

  LrSchedule sched;
  sched.kind = LrSchedule::Kind::constant;
  sched.peak = tcfg.lr;
  sched.warmup = std::min<std::uint64_t>(100, tcfg.steps / 4);

  std::uint64_t steps_ran = 0;
  for (std::uint64_t step = 0; step < tcfg.steps; ++step) {
    try {
      Tensor x = source(step * tcfg.batch, tcfg.batch);
      Tape<float> tape;
      auto enc = ae.encode(x, &noise);
      auto mse = mse_loss(ae.decode(enc.z), x);
      auto loss = enc.has_reg && reg_w != 0.0
                      ? add(mse, mul_scalar(enc.reg, static_cast<float>(reg_w)))
                      : mse;
      tape.backward(loss);
      opt.step_from_grads(ae.params(), lr_at_step(sched, step));
    } catch (const NumericalError& e) {
      throw NumericalError("train_autoencoder: diverged at step " +
                           std::to_string(step) + ": " + e.what());
    }
    steps_ran = step + 1;
    if (tcfg.eval_interval != 0 && steps_ran % tcfg.eval_interval == 0 &&
        tcfg.early_stop_mse >= 0.0) {
      const double m = eval_mse(ae, source, kEvalOffset, tcfg.eval_count,
                                tcfg.eval_batch, nullptr);
      if (m <= tcfg.early_stop_mse) break;
    }
  }
  ReconReport report =
      codec_metrics(ae, source, kEvalOffset, tcfg.eval_count, tcfg.eval_batch);
  return {std::move(ae), report, steps_ran};
}

ReconReport codec_metrics(const Autoencoder& ae, const ImageSource& source,
                          std::uint64_t first, std::size_t count, std::size_t batch) {
  if (count == 0) throw UsageError("codec_metrics: empty evaluation set");
  std::vector<std::int64_t> ids;
  const double mse = eval_mse(ae, source, first, count, batch, &ids);
  return make_recon_report(mse, ids,
                           ae.config().discrete() ? ae.config().vocab_size : 0);
}

// ---- persistence ---------------------------------------------------------------

std::string codec_hash(const Autoencoder& ae) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  const auto& cfg = ae.config();
  std::string tag = std::string(regularizer_name(cfg.regularizer)) + ":" +
                    std::to_string(cfg.downsample_factor) + ":" +
                    std::to_string(cfg.latent_channels) + ":" +
                    std::to_string(cfg.vocab_size);
  mix(tag.data(), tag.size());
  for (const auto& p : ae.params()) {
    auto v = p.value.data();
    mix(v.data(), v.size() * sizeof(float));
  }
  std::ostringstream os;
  os << std::hex;
  for (int i = 60; i >= 0; i -= 4) os << ((h >> i) & 0xf);
  return os.str();
}

namespace {

nlohmann::json config_to_json(const CodecConfig& cfg) {
  return nlohmann::json{{"regularizer", regularizer_name(cfg.regularizer)},
                        {"downsample_factor", cfg.downsample_factor},
                        {"latent_channels", cfg.latent_channels},
                        {"vocab_size", cfg.vocab_size},
                        {"fsq_levels", cfg.fsq_levels},
                        {"image_side", cfg.image_side}};
}

CodecConfig config_from_json(const nlohmann::json& j) {
  CodecConfig cfg;
  cfg.regularizer = regularizer_from_name(j.at("regularizer").get<std::string>());
  cfg.downsample_factor = j.at("downsample_factor").get<std::size_t>();
  cfg.latent_channels = j.at("latent_channels").get<std::size_t>();
  cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
  cfg.fsq_levels = j.at("fsq_levels").get<std::vector<int>>();
  cfg.image_side = j.at("image_side").get<std::size_t>();
  return cfg;
}

}  // namespace

void save_codec(const Autoencoder& ae, const std::string& prefix) {
  std::ofstream ts(prefix + ".tensors", std::ios::binary);
  if (!ts) throw IoError("save_codec: cannot open " + prefix + ".tensors");
  nlohmann::json names = nlohmann::json::array();
  for (const auto& p : ae.params()) {
    save_tensor(ts, p.value);
    names.push_back(p.name);
  }
  ts.close();
  if (!ts) throw IoError("save_codec: write failed for " + prefix + ".tensors");

  nlohmann::json j{{"format", "latentlab-codec-v1"},
                   {"config", config_to_json(ae.config())},
                   {"params", names},
                   {"hash", codec_hash(ae)}};
  std::ofstream js(prefix + ".json");
  if (!js) throw IoError("save_codec: cannot open " + prefix + ".json");
  js << j.dump(2) << "\n";
}

Autoencoder load_codec(const std::string& prefix) {
  std::ifstream js(prefix + ".json");
  if (!js) throw IoError("load_codec: cannot open " + prefix + ".json");
  nlohmann::json j;
  try {
    js >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_codec: bad sidecar json: " + std::string(e.what()));
  }
  if (j.value("format", "") != "latentlab-codec-v1")
    throw IoError("load_codec: unrecognized checkpoint format");
  Autoencoder ae(config_from_json(j.at("config")), 0);

  std::ifstream ts(prefix + ".tensors", std::ios::binary);
  if (!ts) throw IoError("load_codec: cannot open " + prefix + ".tensors");
  const auto names = j.at("params").get<std::vector<std::string>>();
  if (names.size() != ae.params().size())
    throw IoError("load_codec: parameter list mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& p = ae.params()[i];
    if (p.name != names[i]) throw IoError("load_codec: parameter order mismatch");
    Tensor v = load_tensor<float>(ts);
    if (v.shape() != p.value.shape())
      throw IoError("load_codec: shape mismatch for " + p.name);
    v.set_requires_grad(true);
    p.value = v;
  }
  return ae;
}

void pre_encode_dataset(const Autoencoder& ae, const ImageSource& source,
                        std::uint64_t count, const std::string& prefix,
                        std::size_t batch) {
  const auto& cfg = ae.config();
  const std::size_t s = cfg.seq_len();
  nlohmann::json manifest{{"count", count},
                          {"grid_side", cfg.grid_side()},
                          {"codec_hash", codec_hash(ae)},
                          {"kind", regularizer_name(cfg.regularizer)}};
  if (cfg.discrete()) {
    std::ofstream os(prefix + ".ids", std::ios::binary);
    if (!os) throw IoError("pre_encode: cannot open " + prefix + ".ids");
    for (std::uint64_t done = 0; done < count; done += batch) {
      const std::size_t b =
          static_cast<std::size_t>(std::min<std::uint64_t>(batch, count - done));
      auto ids = ae.encode_ids(source(done, b));
      for (std::int64_t id : ids) {
        const auto u = static_cast<std::uint16_t>(id);
        const char bytes[2] = {static_cast<char>(u & 0xff),
                               static_cast<char>((u >> 8) & 0xff)};
        os.write(bytes, 2);
      }
    }
    os.close();
    if (!os) throw IoError("pre_encode: write failed for " + prefix + ".ids");
    manifest["vocab_size"] = cfg.vocab_size;
  } else {
    const std::size_t c = cfg.code_dim();
    std::vector<float> lat;
    lat.reserve(count * s * c);
    NoGrad<float> guard;
    for (std::uint64_t done = 0; done < count; done += batch) {
      const std::size_t b =
          static_cast<std::size_t>(std::min<std::uint64_t>(batch, count - done));
      auto enc = ae.encode(source(done, b), nullptr);
      auto zv = enc.z.data();
      lat.insert(lat.end(), zv.begin(), zv.end());
    }
    double mean = 0.0;
    for (float v : lat) mean += v;
    mean /= static_cast<double>(lat.size());
    double var = 0.0;
    for (float v : lat) var += (v - mean) * (v - mean);
    var /= static_cast<double>(lat.size());
    const double sd = std::sqrt(var);
    manifest["channels"] = c;
    manifest["latent_std"] = sd;
    save_tensor_file(prefix + ".lat",
                     Tensor::from({static_cast<std::size_t>(count) * s, c}, std::move(lat)));
  }
  std::ofstream ms(prefix + ".manifest.json");
  if (!ms) throw IoError("pre_encode: cannot open " + prefix + ".manifest.json");
  ms << manifest.dump(2) << "\n";
}

PreEncoded load_pre_encoded(const std::string& prefix) {
  std::ifstream ms(prefix + ".manifest.json");
  if (!ms) throw IoError("load_pre_encoded: cannot open " + prefix + ".manifest.json");
  nlohmann::json j;
  try {
    ms >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_pre_encoded: bad manifest: " + std::string(e.what()));
  }
  PreEncoded pe;
  pe.count = j.at("count").get<std::size_t>();
  pe.grid_side = j.at("grid_side").get<std::size_t>();
  pe.codec_hash = j.at("codec_hash").get<std::string>();
  const std::string kind = j.at("kind").get<std::string>();
  pe.discrete = kind != "kl";
  const std::size_t s = pe.grid_side * pe.grid_side;
  if (pe.discrete) {
    pe.vocab = j.at("vocab_size").get<std::size_t>();
    std::ifstream is(prefix + ".ids", std::ios::binary);
    if (!is) throw IoError("load_pre_encoded: cannot open " + prefix + ".ids");
    std::vector<char> raw((std::istreambuf_iterator<char>(is)),
                          std::istreambuf_iterator<char>());
    if (raw.size() != pe.count * s * 2)
      throw IoError("load_pre_encoded: ids file has wrong size");
    pe.ids.resize(pe.count * s);
    for (std::size_t i = 0; i < pe.ids.size(); ++i) {
      const auto lo = static_cast<unsigned char>(raw[2 * i]);
      const auto hi = static_cast<unsigned char>(raw[2 * i + 1]);
      pe.ids[i] = static_cast<std::int64_t>(lo) | (static_cast<std::int64_t>(hi) << 8);
    }
  } else {
    const double sd = j.at("latent_std").get<double>();
    pe.latent_scale = sd > 0 ? 1.0 / sd : 1.0;
    pe.latents = load_tensor_file<float>(prefix + ".lat");
    if (pe.latents.rank() != 2 || pe.latents.dim(0) != pe.count * s)
      throw IoError("load_pre_encoded: latents tensor has wrong shape");
  }
  return pe;
}

// explicit instantiations
template std::pair<Tensor, Tensor> kl_regularize(const Tensor&, const Tensor&, RngStream&);
template std::pair<Tensor64, Tensor64> kl_regularize(const Tensor64&, const Tensor64&,
                                                     RngStream&);
template QuantizeResultT<float> vq_quantize(const Tensor&, const Tensor&, float);
template QuantizeResultT<double> vq_quantize(const Tensor64&, const Tensor64&, double);
template QuantizeResultT<float> lfq_quantize(const Tensor&, std::size_t, float, float);
template QuantizeResultT<double> lfq_quantize(const Tensor64&, std::size_t, double, double);
template QuantizeResultT<float> fsq_quantize(const Tensor&, const std::vector<int>&);
template QuantizeResultT<double> fsq_quantize(const Tensor64&, const std::vector<int>&);

}  // namespace latentlab
