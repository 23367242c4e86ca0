#include "latentlab/backbone.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "latentlab/error.hpp"

namespace latentlab {

namespace {
constexpr std::size_t kTimeFeatures = kTimeFeatureDim;
constexpr double kTimeScale = 1000.0;       // t in [0,1] scaled before the sinusoid
constexpr double kTimeMaxPeriod = 10000.0;
}  // namespace

const char* size_class_name(SizeClass s) {
  switch (s) {
    case SizeClass::T: return "T";
    case SizeClass::S: return "S";
    case SizeClass::M: return "M";
    case SizeClass::L: return "L";
    case SizeClass::XL: return "XL";
  }
  throw ConfigError("size_class_name: bad enum value");
}

SizeClass size_class_from_name(const std::string& name) {
  if (name == "T") return SizeClass::T;
  if (name == "S") return SizeClass::S;
  if (name == "M") return SizeClass::M;
  if (name == "L") return SizeClass::L;
  if (name == "XL") return SizeClass::XL;
  throw ConfigError("unknown size class '" + name + "' (want T|S|M|L|XL)");
}

const char* family_name(Family f) {
  return f == Family::discrete ? "discrete" : "continuous";
}

Family family_from_name(const std::string& name) {
  if (name == "discrete") return Family::discrete;
  if (name == "continuous") return Family::continuous;
  throw ConfigError("unknown family '" + name + "' (want discrete|continuous)");
}

const char* conditioning_name(Conditioning c) {
  switch (c) {
    case Conditioning::adaln_zero: return "adaln_zero";
    case Conditioning::in_context: return "in_context";
    case Conditioning::cross_attention: return "cross_attention";
  }
  throw ConfigError("conditioning_name: bad enum value");
}

Conditioning conditioning_from_name(const std::string& name) {
  if (name == "adaln_zero") return Conditioning::adaln_zero;
  if (name == "in_context") return Conditioning::in_context;
  if (name == "cross_attention") return Conditioning::cross_attention;
  throw ConfigError("unknown conditioning '" + name +
                    "' (want adaln_zero|in_context|cross_attention)");
}

const char* positions_name(Positions p) {
  return p == Positions::rotary ? "rotary" : "learned";
}

Positions positions_from_name(const std::string& name) {
  if (name == "rotary") return Positions::rotary;
  if (name == "learned") return Positions::learned;
  throw ConfigError("unknown positions '" + name + "' (want rotary|learned)");
}

const char* ff_kind_name(FfKind f) {
  return f == FfKind::swiglu_2_3_4 ? "swiglu" : "gelu4";
}

FfKind ff_kind_from_name(const std::string& name) {
  if (name == "swiglu") return FfKind::swiglu_2_3_4;
  if (name == "gelu4") return FfKind::gelu_4;
  throw ConfigError("unknown ff kind '" + name + "' (want swiglu|gelu4)");
}

BackboneConfig BackboneConfig::preset(SizeClass size, Family family) {
  BackboneConfig cfg;
  cfg.size = size;
  switch (size) {
    case SizeClass::T: cfg.layers = 4; cfg.hidden = 128; cfg.heads = 4; break;
    case SizeClass::S: cfg.layers = 12; cfg.hidden = 768; cfg.heads = 12; break;
    case SizeClass::M: cfg.layers = 24; cfg.hidden = 1024; cfg.heads = 16; break;
    case SizeClass::L: cfg.layers = 24; cfg.hidden = 1536; cfg.heads = 16; break;
    case SizeClass::XL: cfg.layers = 32; cfg.hidden = 2304; cfg.heads = 32; break;
  }
  cfg.family = family;
  if (family == Family::continuous) {
    cfg.positions = Positions::learned;
    cfg.ff = FfKind::gelu_4;
    cfg.causal = false;
  }
  return cfg;
}

std::size_t BackboneConfig::d_ff() const {
  if (ff == FfKind::swiglu_2_3_4)
    return round_multiple(2.0 / 3.0 * 4.0 * static_cast<double>(hidden), 64);
  return 4 * hidden;
}

void BackboneConfig::validate() const {
  if (layers == 0) throw ConfigError("backbone: layers must be >= 1");
  if (hidden == 0 || heads == 0) throw ConfigError("backbone: hidden and heads must be >= 1");
  if (hidden % heads != 0)
    throw ConfigError("backbone: hidden " + std::to_string(hidden) +
                      " not divisible by heads " + std::to_string(heads));
  if (positions == Positions::rotary && head_dim() % 2 != 0)
    throw ConfigError("backbone: rotary positions need an even head dim, got " +
                      std::to_string(head_dim()));
  if (seq_len == 0) throw ConfigError("backbone: seq_len must be >= 1");
  if (cond_dim == 0) throw ConfigError("backbone: cond_dim must be >= 1");
  if (family == Family::discrete && vocab_size == 0)
    throw ConfigError("backbone: vocab_size must be >= 1");
  if (family == Family::continuous && latent_channels == 0)
    throw ConfigError("backbone: latent_channels must be >= 1");
}

// ---- parameter layout --------------------------------------------------
// One spec list drives construction, counting, and the save format, so the
// three can never drift apart.

namespace {

enum class Init { trunc02, zero };
enum class Cat { embedding, blocks, conditioning, head };

struct ParamSpec {
  std::string name;
  Shape shape;
  bool decay;
  Init init;
  Cat cat;
};

std::vector<ParamSpec> layout(const BackboneConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.hidden;
  const std::size_t dff = cfg.d_ff();
  const bool cont = cfg.family == Family::continuous;
  const bool ada = cfg.conditioning == Conditioning::adaln_zero;
  const bool cross = cfg.conditioning == Conditioning::cross_attention;

  std::vector<ParamSpec> specs;
  auto push = [&specs](std::string name, Shape shape, bool decay, Init init, Cat cat) {
    specs.push_back({std::move(name), std::move(shape), decay, init, cat});
  };

  if (cont) {
    push("in_proj.w", {cfg.latent_channels, d}, true, Init::trunc02, Cat::embedding);
    push("in_proj.b", {d}, false, Init::zero, Cat::embedding);
    push("time1.w", {kTimeFeatures, d}, true, Init::trunc02, Cat::embedding);
    push("time1.b", {d}, false, Init::zero, Cat::embedding);
    push("time2.w", {d, d}, true, Init::trunc02, Cat::embedding);
    push("time2.b", {d}, false, Init::zero, Cat::embedding);
  } else {
    // one extra row: id == vocab_size is the BOS / [MASK] token
    push("tok_emb", {cfg.vocab_size + 1, d}, false, Init::trunc02, Cat::embedding);
  }
  if (cfg.positions == Positions::learned)
    push("pos", {cfg.trunk_len(), d}, false, Init::trunc02, Cat::embedding);

  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    push(p + "qkv.w", {d, 3 * d}, true, Init::trunc02, Cat::blocks);
    if (cont) push(p + "qkv.b", {3 * d}, false, Init::zero, Cat::blocks);
    push(p + "out.w", {d, d}, true, Init::trunc02, Cat::blocks);
    if (cont) push(p + "out.b", {d}, false, Init::zero, Cat::blocks);
    if (ada) {
      push(p + "ada.w", {d, 6 * d}, true, Init::zero, Cat::conditioning);
      push(p + "ada.b", {6 * d}, false, Init::zero, Cat::conditioning);
    }
    if (cross) {
      push(p + "cross_v.w", {d, d}, true, Init::trunc02, Cat::conditioning);
      if (cont) push(p + "cross_v.b", {d}, false, Init::zero, Cat::conditioning);
      push(p + "cross_o.w", {d, d}, true, Init::trunc02, Cat::conditioning);
      if (cont) push(p + "cross_o.b", {d}, false, Init::zero, Cat::conditioning);
    }
    if (cfg.ff == FfKind::swiglu_2_3_4) {
      push(p + "ff_gate.w", {d, dff}, true, Init::trunc02, Cat::blocks);
      push(p + "ff_up.w", {d, dff}, true, Init::trunc02, Cat::blocks);
      push(p + "ff_down.w", {dff, d}, true, Init::trunc02, Cat::blocks);
    } else {
      push(p + "ff1.w", {d, dff}, true, Init::trunc02, Cat::blocks);
      push(p + "ff1.b", {dff}, false, Init::zero, Cat::blocks);
      push(p + "ff2.w", {dff, d}, true, Init::trunc02, Cat::blocks);
      push(p + "ff2.b", {d}, false, Init::zero, Cat::blocks);
    }
  }

  push("cond.w", {cfg.cond_dim, d}, true, Init::trunc02, Cat::conditioning);
  push("cond.b", {d}, false, Init::zero, Cat::conditioning);
  push("null", {cfg.cond_dim}, false, Init::trunc02, Cat::conditioning);
  if (ada) {
    push("final_ada.w", {d, 2 * d}, true, Init::zero, Cat::conditioning);
    push("final_ada.b", {2 * d}, false, Init::zero, Cat::conditioning);
  }

  if (cont) {
    push("head.w", {d, cfg.latent_channels}, true, Init::zero, Cat::head);
    push("head.b", {cfg.latent_channels}, false, Init::zero, Cat::head);
  } else {
    push("head.w", {d, cfg.vocab_size}, true, Init::zero, Cat::head);
  }
  return specs;
}

}  // namespace

ParamBreakdown param_count(const BackboneConfig& cfg) {
  ParamBreakdown out;
  for (const auto& spec : layout(cfg)) {
    const std::uint64_t n = shape_numel(spec.shape);
    switch (spec.cat) {
      case Cat::embedding: out.embedding += n; break;
      case Cat::blocks: out.blocks += n; break;
      case Cat::conditioning: out.conditioning += n; break;
      case Cat::head: out.head += n; break;
    }
    out.total += n;
  }
  out.cond_fraction =
      out.total ? static_cast<double>(out.conditioning) / static_cast<double>(out.total) : 0.0;
  return out;
}

// ---- CondBatch ----------------------------------------------------------

CondBatch CondBatch::from_rows(const std::vector<std::vector<float>>& rows) {
  if (rows.empty()) throw ShapeError("CondBatch::from_rows: empty batch");
  const std::size_t d = rows[0].size();
  std::vector<float> flat;
  flat.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw ShapeError("CondBatch::from_rows: ragged rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  CondBatch out;
  out.vecs = Tensor::from({rows.size(), d}, std::move(flat));
  out.null_flags.assign(rows.size(), 0);
  return out;
}

CondBatch CondBatch::all_null(std::size_t batch, std::size_t cond_dim) {
  CondBatch out;
  out.vecs = Tensor::zeros({batch, cond_dim});
  out.null_flags.assign(batch, 1);
  return out;
}

// ---- Backbone -----------------------------------------------------------

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  RngStream rng(seed, 0xbb0e);
  for (const auto& spec : layout(cfg_)) {
    Tensor v = spec.init == Init::trunc02 ? Tensor::trunc_normal(spec.shape, rng, 0.02f)
                                          : Tensor::zeros(spec.shape);
    v.set_requires_grad(true);
    params_.push_back({spec.name, std::move(v), spec.decay});
  }
}

const Tensor& Backbone::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw UsageError("backbone: no parameter named " + name);
}

Tensor Backbone::cond_embed(const CondBatch& cond, const std::vector<float>* t) const {
  const std::size_t batch = cond.batch();
  if (batch == 0) throw ShapeError("backbone: empty conditioning batch");
  if (!cond.vecs.defined() || cond.vecs.rank() != 2 || cond.vecs.dim(0) != batch ||
      cond.vecs.dim(1) != cfg_.cond_dim) {
    throw ShapeError("backbone: conditioning vecs must be [" + std::to_string(batch) + "x" +
                     std::to_string(cfg_.cond_dim) + "]");
  }
  Tensor c_in = select_rows(cond.vecs, param("null"), cond.null_flags);
  Tensor c = add_bias(matmul(c_in, param("cond.w")), param("cond.b"));

  if (cfg_.family == Family::continuous) {
    if (t == nullptr || t->size() != batch)
      throw UsageError("backbone: continuous forward needs one t per sample");
    const std::size_t half = kTimeFeatures / 2;
    std::vector<float> feats(batch * kTimeFeatures);
    for (std::size_t b = 0; b < batch; ++b) {
      const double ts = kTimeScale * static_cast<double>((*t)[b]);
      for (std::size_t j = 0; j < half; ++j) {
        const double freq =
            std::exp(-std::log(kTimeMaxPeriod) * static_cast<double>(j) / static_cast<double>(half));
        feats[b * kTimeFeatures + j] = static_cast<float>(std::cos(ts * freq));
        feats[b * kTimeFeatures + half + j] = static_cast<float>(std::sin(ts * freq));
      }
    }
    Tensor tf = Tensor::from({batch, kTimeFeatures}, std::move(feats));
    Tensor temb = add_bias(matmul(tf, param("time1.w")), param("time1.b"));
    temb = add_bias(matmul(silu(temb), param("time2.w")), param("time2.b"));
    c = add(c, temb);
  }
  return c;
}

Tensor Backbone::embed_ids(const std::vector<std::int64_t>& ids, std::size_t batch) const {
  if (batch == 0 || ids.size() != batch * cfg_.seq_len)
    throw ShapeError("backbone: want " + std::to_string(batch) + "x" +
                     std::to_string(cfg_.seq_len) + " ids, got " + std::to_string(ids.size()));
  return embedding(param("tok_emb"), ids, Shape{batch, cfg_.seq_len});
}

Tensor Backbone::trunk(Tensor h, const Tensor& c) const {
  const bool ada = cfg_.conditioning == Conditioning::adaln_zero;
  const bool cross = cfg_.conditioning == Conditioning::cross_attention;
  const bool cont = cfg_.family == Family::continuous;
  const NormKind nk = cont ? NormKind::layer_norm : NormKind::rms_norm;
  const std::size_t s_in = h.dim(1);

  std::vector<std::int64_t> positions(s_in);
  std::iota(positions.begin(), positions.end(), 0);

  if (cfg_.positions == Positions::learned) h = add_positional(h, param("pos"));

  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";

    Tensor shift1, scale1, gate1, shift2, scale2, gate2;
    if (ada) {
      Tensor mod = add_bias(matmul(silu(c), param(p + "ada.w")), param(p + "ada.b"));
      auto parts = split_cols(mod, 6);
      shift1 = parts[0]; scale1 = parts[1]; gate1 = parts[2];
      shift2 = parts[3]; scale2 = parts[4]; gate2 = parts[5];
    }

    Tensor x = normalize(h, nk);
    if (ada) x = modulate(x, scale1, shift1);
    Tensor qkv = matmul(x, param(p + "qkv.w"));
    if (cont) qkv = add_bias(qkv, param(p + "qkv.b"));
    auto qkv3 = split_cols(qkv, 3);
    Tensor q = qkv3[0], k = qkv3[1], v = qkv3[2];
    if (cfg_.positions == Positions::rotary) {
      q = rotary_apply(q, positions, cfg_.heads);
      k = rotary_apply(k, positions, cfg_.heads);
    }
    Tensor a = attention_packed(q, k, v, cfg_.heads, cfg_.causal, cfg_.qk_norm);
    a = matmul(a, param(p + "out.w"));
    if (cont) a = add_bias(a, param(p + "out.b"));
    if (ada) a = gate_mul(a, gate1);
    h = add(h, a);

    if (cross) {
      // One conditioning row per sample means softmax over a single key is
      // identically 1, so the attention mix reduces to a query-independent
      // value path: out = (c Wv) Wo, added at every position.
      Tensor cv = matmul(c, param(p + "cross_v.w"));
      if (cont) cv = add_bias(cv, param(p + "cross_v.b"));
      Tensor co = matmul(cv, param(p + "cross_o.w"));
      if (cont) co = add_bias(co, param(p + "cross_o.b"));
      h = add(h, broadcast_seq(co, s_in));
    }

    Tensor x2 = normalize(h, nk);
    if (ada) x2 = modulate(x2, scale2, shift2);
    Tensor f;
    if (cfg_.ff == FfKind::swiglu_2_3_4) {
      f = swiglu(x2, param(p + "ff_gate.w"), param(p + "ff_up.w"), param(p + "ff_down.w"));
    } else {
      f = add_bias(matmul(x2, param(p + "ff1.w")), param(p + "ff1.b"));
      f = add_bias(matmul(gelu(f), param(p + "ff2.w")), param(p + "ff2.b"));
    }
    if (ada) f = gate_mul(f, gate2);
    h = add(h, f);
  }
  return h;
}

Tensor Backbone::apply_head(const Tensor& h, const Tensor& c) const {
  const bool cont = cfg_.family == Family::continuous;
  Tensor x = normalize(h, cont ? NormKind::layer_norm : NormKind::rms_norm);
  if (cfg_.conditioning == Conditioning::adaln_zero) {
    Tensor fin = add_bias(matmul(silu(c), param("final_ada.w")), param("final_ada.b"));
    auto parts = split_cols(fin, 2);
    x = modulate(x, parts[1], parts[0]);
  }
  Tensor out = matmul(x, param("head.w"));
  if (cont) out = add_bias(out, param("head.b"));
  return out;
}

Tensor Backbone::forward_ids(const std::vector<std::int64_t>& ids, std::size_t batch,
                             const CondBatch& cond) const {
  if (cfg_.family != Family::discrete)
    throw UsageError("backbone: forward_ids on a continuous model");
  if (cond.batch() != batch) throw ShapeError("backbone: conditioning batch != id batch");
  Tensor c = cond_embed(cond, nullptr);
  Tensor h = embed_ids(ids, batch);
  if (cfg_.conditioning == Conditioning::in_context)
    h = concat_seq(reshape(c, {batch, 1, cfg_.hidden}), h);
  h = trunk(std::move(h), c);
  Tensor out = apply_head(h, c);
  if (cfg_.conditioning == Conditioning::in_context)
    out = slice_seq(out, 1, cfg_.trunk_len());  // drop the conditioning row's logits
  return out;
}

Tensor Backbone::forward_latent(const Tensor& z, const std::vector<float>& t,
                                const CondBatch& cond) const {
  if (cfg_.family != Family::continuous)
    throw UsageError("backbone: forward_latent on a discrete model");
  if (!z.defined() || z.rank() != 3 || z.dim(1) != cfg_.seq_len ||
      z.dim(2) != cfg_.latent_channels) {
    throw ShapeError("backbone: latent input must be [B x " + std::to_string(cfg_.seq_len) +
                     " x " + std::to_string(cfg_.latent_channels) + "]");
  }
  const std::size_t batch = z.dim(0);
  if (cond.batch() != batch) throw ShapeError("backbone: conditioning batch != latent batch");
  Tensor c = cond_embed(cond, &t);
  Tensor h = add_bias(matmul(z, param("in_proj.w")), param("in_proj.b"));
  if (cfg_.conditioning == Conditioning::in_context)
    h = concat_seq(reshape(c, {batch, 1, cfg_.hidden}), h);
  h = trunk(std::move(h), c);
  Tensor out = apply_head(h, c);
  if (cfg_.conditioning == Conditioning::in_context)
    out = slice_seq(out, 1, cfg_.trunk_len());
  return out;
}

Tensor Backbone::forward_hidden(const std::vector<std::int64_t>& ids, std::size_t batch,
                                const CondBatch& cond) const {
  if (cfg_.family != Family::discrete)
    throw UsageError("backbone: forward_hidden on a continuous model");
  if (cond.batch() != batch) throw ShapeError("backbone: conditioning batch != id batch");
  Tensor c = cond_embed(cond, nullptr);
  Tensor h = embed_ids(ids, batch);
  if (cfg_.conditioning == Conditioning::in_context)
    h = concat_seq(reshape(c, {batch, 1, cfg_.hidden}), h);
  h = trunk(std::move(h), c);
  if (cfg_.conditioning == Conditioning::in_context)
    h = slice_seq(h, 1, cfg_.trunk_len());
  return h;
}

// ---- checkpointing -------------------------------------------------------

namespace {

nlohmann::json backbone_config_to_json(const BackboneConfig& cfg) {
  return nlohmann::json{{"size", size_class_name(cfg.size)},
                        {"layers", cfg.layers},
                        {"hidden", cfg.hidden},
                        {"heads", cfg.heads},
                        {"family", family_name(cfg.family)},
                        {"conditioning", conditioning_name(cfg.conditioning)},
                        {"positions", positions_name(cfg.positions)},
                        {"ff", ff_kind_name(cfg.ff)},
                        {"qk_norm", cfg.qk_norm},
                        {"causal", cfg.causal},
                        {"vocab_size", cfg.vocab_size},
                        {"latent_channels", cfg.latent_channels},
                        {"cond_dim", cfg.cond_dim},
                        {"seq_len", cfg.seq_len}};
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig cfg;
  cfg.size = size_class_from_name(j.at("size").get<std::string>());
  cfg.layers = j.at("layers").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.heads = j.at("heads").get<std::size_t>();
  cfg.family = family_from_name(j.at("family").get<std::string>());
  cfg.conditioning = conditioning_from_name(j.at("conditioning").get<std::string>());
  cfg.positions = positions_from_name(j.at("positions").get<std::string>());
  cfg.ff = ff_kind_from_name(j.at("ff").get<std::string>());
  cfg.qk_norm = j.at("qk_norm").get<bool>();
  cfg.causal = j.at("causal").get<bool>();
  cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
  cfg.latent_channels = j.at("latent_channels").get<std::size_t>();
  cfg.cond_dim = j.at("cond_dim").get<std::size_t>();
  cfg.seq_len = j.at("seq_len").get<std::size_t>();
  return cfg;
}

}  // namespace

void save_backbone(const Backbone& model, const std::string& prefix,
                   const CheckpointMeta& meta) {
  std::ofstream ts(prefix + ".tensors", std::ios::binary);
  if (!ts) throw IoError("save_backbone: cannot open " + prefix + ".tensors");
  nlohmann::json names = nlohmann::json::array();
  for (const auto& p : model.params()) {
    save_tensor(ts, p.value);
    names.push_back(p.name);
  }
  ts.close();
  if (!ts) throw IoError("save_backbone: write failed for " + prefix + ".tensors");

  nlohmann::json j{{"format", "latentlab-backbone-v1"},
                   {"config", backbone_config_to_json(model.config())},
                   {"params", names},
                   {"step", meta.step},
                   {"rng_seed", meta.rng_seed},
                   {"rng_counter", meta.rng_counter},
                   {"ema", meta.ema}};
  std::ofstream js(prefix + ".json");
  if (!js) throw IoError("save_backbone: cannot open " + prefix + ".json");
  js << j.dump(2) << "\n";
}

Backbone load_backbone(const std::string& prefix, CheckpointMeta* meta) {
  std::ifstream js(prefix + ".json");
  if (!js) throw IoError("load_backbone: cannot open " + prefix + ".json");
  nlohmann::json j;
  try {
    js >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_backbone: bad sidecar json: " + std::string(e.what()));
  }
  if (j.value("format", "") != "latentlab-backbone-v1")
    throw IoError("load_backbone: unrecognized checkpoint format");
  Backbone model(backbone_config_from_json(j.at("config")), 0);
  if (meta != nullptr) {
    meta->step = j.value("step", std::uint64_t{0});
    meta->rng_seed = j.value("rng_seed", std::uint64_t{0});
    meta->rng_counter = j.value("rng_counter", std::uint64_t{0});
    meta->ema = j.value("ema", false);
  }

  std::ifstream ts(prefix + ".tensors", std::ios::binary);
  if (!ts) throw IoError("load_backbone: cannot open " + prefix + ".tensors");
  const auto names = j.at("params").get<std::vector<std::string>>();
  if (names.size() != model.params().size())
    throw IoError("load_backbone: parameter list mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& p = model.params()[i];
    if (p.name != names[i]) throw IoError("load_backbone: parameter order mismatch");
    Tensor v = load_tensor<float>(ts);
    if (v.shape() != p.value.shape())
      throw IoError("load_backbone: shape mismatch for " + p.name);
    v.set_requires_grad(true);
    p.value = v;
  }
  return model;
}

}  // namespace latentlab
