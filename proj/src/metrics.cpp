#include "latentlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "latentlab/error.hpp"

namespace latentlab {

namespace {

constexpr std::size_t kMaxJacobiSweeps = 64;

// Head names in kAttributeCards order.
constexpr const char* kHeadNames[5] = {"count", "background", "type", "color",
                                       "cell"};

std::array<std::int64_t, 5> class_ids(const Attributes& a) {
  return {static_cast<std::int64_t>(a.count - 1),
          static_cast<std::int64_t>(a.background),
          static_cast<std::int64_t>(a.primary_type),
          static_cast<std::int64_t>(a.primary_color),
          static_cast<std::int64_t>(a.primary_cell)};
}

void check_image_batch(const char* op, const Tensor& images) {
  const auto& sh = images.shape();
  if (sh.size() != 4 || sh[1] != 3 || sh[2] != kImageSide || sh[3] != kImageSide)
    throw ShapeError(std::string(op) + ": expected images [n, 3, " +
                     std::to_string(kImageSide) + ", " +
                     std::to_string(kImageSide) + "]");
}

// [n, 3, 32, 32] -> probe features [n, feature_dim], chunked, no gradients.
Tensor batched_features(const AttributeProbe& probe, const Tensor& images) {
  NoGrad<float> inference;
  const std::size_t n = images.shape()[0];
  const std::size_t f = probe.config().feature_dim;
  const std::size_t chunk = 64;
  const std::size_t row = 3 * kImageSide * kImageSide;
  std::vector<float> out(n * f);
  auto src = images.data();
  for (std::size_t i0 = 0; i0 < n; i0 += chunk) {
    const std::size_t m = std::min(chunk, n - i0);
    std::vector<float> part(src.begin() + i0 * row, src.begin() + (i0 + m) * row);
    Tensor feats = probe.features(
        Tensor::from({m, 3, kImageSide, kImageSide}, std::move(part)));
    std::copy(feats.data().begin(), feats.data().end(), out.begin() + i0 * f);
  }
  return Tensor::from({n, f}, std::move(out));
}

double trace(const std::vector<double>& m, std::size_t d) {
  double t = 0.0;
  for (std::size_t i = 0; i < d; ++i) t += m[i * d + i];
  return t;
}

}  // namespace

// ---- symmetric linear algebra -------------------------------------------

SymEig sym_eig(std::vector<double> a, std::size_t d) {
  if (d == 0 || a.size() != d * d)
    throw ShapeError("sym_eig: matrix size does not match dimension");
  check_finite<double>("sym_eig", {a.data(), a.size()});

  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;

  bool converged = false;
  for (std::size_t sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) off += std::fabs(a[p * d + q]);
    double diag = 0.0;
    for (std::size_t i = 0; i < d; ++i) diag += std::fabs(a[i * d + i]);
    if (off <= 1e-13 * (diag + 1e-30)) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        const double scale =
            std::fabs(a[p * d + p]) + std::fabs(a[q * d + q]) + 1e-30;
        if (std::fabs(apq) <= 1e-18 * scale) {
          a[p * d + q] = a[q * d + p] = 0.0;
          continue;
        }
        const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        const double t =
            (theta >= 0.0 ? 1.0 : -1.0) /
            (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        const double tau = s / (1.0 + c);

        a[p * d + p] -= t * apq;
        a[q * d + q] += t * apq;
        a[p * d + q] = a[q * d + p] = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          if (k == p || k == q) continue;
          const double akp = a[k * d + p];
          const double akq = a[k * d + q];
          a[k * d + p] = akp - s * (akq + tau * akp);
          a[k * d + q] = akq + s * (akp - tau * akq);
          a[p * d + k] = a[k * d + p];
          a[q * d + k] = a[k * d + q];
        }
        // eigenvector rows transform like coordinates in the (p, q) plane
        for (std::size_t k = 0; k < d; ++k) {
          const double vpk = v[p * d + k];
          const double vqk = v[q * d + k];
          v[p * d + k] = vpk - s * (vqk + tau * vpk);
          v[q * d + k] = vqk + s * (vpk - tau * vqk);
        }
      }
    }
  }
  if (!converged) throw NumericalError("sym_eig: jacobi sweep did not converge");

  SymEig out;
  out.values.resize(d);
  for (std::size_t i = 0; i < d; ++i) out.values[i] = a[i * d + i];
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return out.values[x] < out.values[y];
  });
  SymEig sorted;
  sorted.values.resize(d);
  sorted.vectors.resize(d * d);
  for (std::size_t k = 0; k < d; ++k) {
    sorted.values[k] = out.values[order[k]];
    for (std::size_t j = 0; j < d; ++j)
      sorted.vectors[k * d + j] = v[order[k] * d + j];
  }
  return sorted;
}

GaussianFit fit_gaussian(const Tensor& features) {
  const auto& sh = features.shape();
  if (sh.size() != 2) throw ShapeError("fit_gaussian: expected features [n, d]");
  const std::size_t n = sh[0], d = sh[1];
  if (n < 2)
    throw ShapeError("fit_gaussian: need at least 2 feature rows, got " +
                     std::to_string(n));
  if (d == 0) throw ShapeError("fit_gaussian: zero-width features");
  auto x = features.data();
  check_finite<float>("fit_gaussian", x);

  GaussianFit fit;
  fit.dim = d;
  fit.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) fit.mean[j] += x[i * d + j];
  for (std::size_t j = 0; j < d; ++j) fit.mean[j] /= static_cast<double>(n);

  fit.cov.assign(d * d, 0.0);
  std::vector<double> cent(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) cent[j] = x[i * d + j] - fit.mean[j];
    for (std::size_t j = 0; j < d; ++j) {
      const double cj = cent[j];
      for (std::size_t k = j; k < d; ++k) fit.cov[j * d + k] += cj * cent[k];
    }
  }
  const double denom = static_cast<double>(n - 1);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = j; k < d; ++k) {
      fit.cov[j * d + k] /= denom;
      fit.cov[k * d + j] = fit.cov[j * d + k];
    }
  return fit;
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.dim == 0 || b.dim == 0)
    throw ShapeError("frechet_distance: empty Gaussian fit");
  if (a.dim != b.dim)
    throw ShapeError("frechet_distance: dimension mismatch " +
                     std::to_string(a.dim) + " vs " + std::to_string(b.dim));
  const std::size_t d = a.dim;

  std::vector<double> s1 = a.cov, s2 = b.cov;
  for (std::size_t i = 0; i < d; ++i) {
    s1[i * d + i] += 1e-6;
    s2[i * d + i] += 1e-6;
  }
  check_finite<double>("frechet_distance", {s1.data(), s1.size()});
  check_finite<double>("frechet_distance", {s2.data(), s2.size()});

  const SymEig e1 = sym_eig(s1, d);
  const SymEig e2 = sym_eig(s2, d);
  const double psd_tol =
      1e-9 * std::max({1.0, std::fabs(e1.values.back()), std::fabs(e2.values.back())});
  if (e1.values.front() < -psd_tol || e2.values.front() < -psd_tol)
    throw NumericalError(
        "frechet_distance: covariance not PSD after regularization");

  // (S1 S2)^{1/2} via the symmetrized product.
  std::vector<double> m(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double s1ik = s1[i * d + k];
      if (s1ik == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) m[i * d + j] += s1ik * s2[k * d + j];
    }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const double sym = 0.5 * (m[i * d + j] + m[j * d + i]);
      m[i * d + j] = m[j * d + i] = sym;
    }
  const SymEig em = sym_eig(std::move(m), d);
  double tr_sqrt = 0.0;
  for (double w : em.values) tr_sqrt += std::sqrt(std::max(0.0, w));

  double dmu2 = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double dj = a.mean[j] - b.mean[j];
    dmu2 += dj * dj;
  }
  double val = dmu2 + trace(s1, d) + trace(s2, d) - 2.0 * tr_sqrt;
  if (!std::isfinite(val))
    throw NumericalError("frechet_distance: non-finite result");
  if (val < -1e-6)
    throw NumericalError("frechet_distance: distance came out negative (" +
                         std::to_string(val) + ")");
  return std::max(0.0, val);
}

// ---- attribute probe -----------------------------------------------------

void ProbeConfig::validate() const {
  if (conv1 == 0 || conv2 == 0 || feature_dim == 0)
    throw ConfigError("probe config: zero-width layer");
  if (batch == 0) throw ConfigError("probe config: batch must be positive");
  if (steps == 0) throw ConfigError("probe config: steps must be positive");
  if (!(peak_lr > 0.0)) throw ConfigError("probe config: peak_lr must be positive");
  if (floor_lr > peak_lr)
    throw ConfigError("probe config: floor_lr above peak_lr");
  if (target_accuracy < 0.0 || target_accuracy > 1.0)
    throw ConfigError("probe config: target_accuracy outside [0, 1]");
}

AttributeProbe::AttributeProbe(ProbeConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  RngStream rng(cfg_.seed, 29);
  auto weight = [&](const std::string& name, Shape shape, std::size_t fan_in) {
    Tensor w = Tensor::trunc_normal(
        shape, rng, std::sqrt(2.0f / static_cast<float>(fan_in)));
    w.set_requires_grad(true);
    params_.push_back({name, std::move(w), true});
  };
  auto bias = [&](const std::string& name, std::size_t n) {
    Tensor b = Tensor::zeros({n});
    b.set_requires_grad(true);
    params_.push_back({name, std::move(b), false});
  };
  weight("conv1.w", {cfg_.conv1, 3, 3, 3}, 3 * 9);
  bias("conv1.b", cfg_.conv1);
  weight("conv2.w", {cfg_.conv2, cfg_.conv1, 3, 3}, cfg_.conv1 * 9);
  bias("conv2.b", cfg_.conv2);
  const std::size_t flat = cfg_.conv2 * (kImageSide / 4) * (kImageSide / 4);
  weight("dense.w", {flat, cfg_.feature_dim}, flat);
  bias("dense.b", cfg_.feature_dim);
  for (std::size_t k = 0; k < 5; ++k) {
    const std::size_t card = static_cast<std::size_t>(kAttributeCards[k]);
    weight("head." + std::string(kHeadNames[k]) + ".w",
           {cfg_.feature_dim, card}, cfg_.feature_dim);
    bias("head." + std::string(kHeadNames[k]) + ".b", card);
  }
}

const Tensor& AttributeProbe::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw UsageError("probe: unknown parameter " + name);
}

Tensor AttributeProbe::features(const Tensor& images) const {
  check_image_batch("probe features", images);
  const std::size_t n = images.shape()[0];
  Tensor h = gelu(conv2d(images, param("conv1.w"), param("conv1.b"), 2, 1));
  h = gelu(conv2d(h, param("conv2.w"), param("conv2.b"), 2, 1));
  h = reshape(h, {n, cfg_.conv2 * (kImageSide / 4) * (kImageSide / 4)});
  return gelu(add_bias(matmul(h, param("dense.w")), param("dense.b")));
}

std::vector<Tensor> AttributeProbe::head_logits(const Tensor& features) const {
  std::vector<Tensor> out;
  out.reserve(5);
  for (std::size_t k = 0; k < 5; ++k) {
    const std::string base = "head." + std::string(kHeadNames[k]);
    out.push_back(add_bias(matmul(features, param(base + ".w")), param(base + ".b")));
  }
  return out;
}

std::vector<Attributes> AttributeProbe::classify(const Tensor& images) const {
  NoGrad<float> inference;
  const std::size_t n = images.shape().empty() ? 0 : images.shape()[0];
  const auto logits = head_logits(features(images));
  std::vector<std::array<int, 5>> picked(n);
  for (std::size_t k = 0; k < 5; ++k) {
    const std::size_t card = static_cast<std::size_t>(kAttributeCards[k]);
    auto vals = logits[k].data();
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = vals.subspan(i * card, card);
      picked[i][k] = static_cast<int>(
          std::max_element(row.begin(), row.end()) - row.begin());
    }
  }
  std::vector<Attributes> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].count = picked[i][0] + 1;
    out[i].background = picked[i][1];
    out[i].primary_type = picked[i][2];
    out[i].primary_color = picked[i][3];
    out[i].primary_cell = picked[i][4];
  }
  return out;
}

double probe_accuracy(const AttributeProbe& probe, const SyntheticDataset& data,
                      std::uint64_t first, std::size_t n, std::size_t batch) {
  if (n == 0 || batch == 0)
    throw UsageError("probe_accuracy: need a positive sample count and batch");
  std::size_t hits = 0;
  for (std::size_t i0 = 0; i0 < n; i0 += batch) {
    const std::size_t m = std::min(batch, n - i0);
    const auto pred = probe.classify(data.image_batch(first + i0, m));
    for (std::size_t i = 0; i < m; ++i) {
      const auto truth = class_ids(data.attributes(first + i0 + i));
      const auto got = class_ids(pred[i]);
      for (std::size_t k = 0; k < 5; ++k) hits += truth[k] == got[k];
    }
  }
  return static_cast<double>(hits) / (5.0 * static_cast<double>(n));
}

AttributeProbe train_probe(const ProbeConfig& cfg, const SyntheticDataset& data) {
  AttributeProbe probe(cfg);
  AdamW opt(probe.params());
  LrSchedule sched;
  sched.kind = LrSchedule::Kind::cosine;
  sched.peak = cfg.peak_lr;
  sched.floor = cfg.floor_lr;
  sched.warmup = cfg.warmup;
  sched.total = cfg.steps;
  // Held-out window far past any training index the step budget can reach.
  const std::uint64_t eval_base = std::uint64_t(1) << 40;

  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    const std::uint64_t first = step * cfg.batch;
    Tensor x = data.image_batch(first, cfg.batch);
    std::array<std::vector<std::int64_t>, 5> targets;
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const auto ids = class_ids(data.attributes(first + i));
      for (std::size_t k = 0; k < 5; ++k) targets[k].push_back(ids[k]);
    }
    try {
      Tape<float> tape;
      const auto logits = probe.head_logits(probe.features(x));
      Tensor loss = cross_entropy(logits[0], targets[0]);
      for (std::size_t k = 1; k < 5; ++k)
        loss = add(loss, cross_entropy(logits[k], targets[k]));
      tape.backward(loss);
      opt.step_from_grads(probe.params(), lr_at_step(sched, step));
    } catch (const NumericalError& e) {
      throw NumericalError("train_probe: diverged at step " +
                           std::to_string(step) + ": " + e.what());
    }
    if ((step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps) {
      const double acc = probe_accuracy(probe, data, eval_base, cfg.eval_count);
      if (acc >= cfg.target_accuracy) {
        probe.set_real_accuracy(acc);
        return probe;
      }
    }
  }
  probe.set_real_accuracy(probe_accuracy(probe, data, eval_base, cfg.eval_count));
  return probe;
}

void save_probe(const AttributeProbe& probe, const std::string& prefix) {
  std::ofstream ts(prefix + ".tensors", std::ios::binary);
  if (!ts) throw IoError("save_probe: cannot open " + prefix + ".tensors");
  nlohmann::json names = nlohmann::json::array();
  for (const auto& p : probe.params()) {
    save_tensor(ts, p.value);
    names.push_back(p.name);
  }
  ts.close();
  if (!ts) throw IoError("save_probe: write failed for " + prefix + ".tensors");

  const auto& c = probe.config();
  nlohmann::json j{{"format", "latentlab-probe-v1"},
                   {"config",
                    {{"conv1", c.conv1},
                     {"conv2", c.conv2},
                     {"feature_dim", c.feature_dim},
                     {"steps", c.steps},
                     {"batch", c.batch},
                     {"peak_lr", c.peak_lr},
                     {"warmup", c.warmup},
                     {"floor_lr", c.floor_lr},
                     {"eval_every", c.eval_every},
                     {"eval_count", c.eval_count},
                     {"target_accuracy", c.target_accuracy},
                     {"seed", c.seed}}},
                   {"real_accuracy", probe.real_accuracy()},
                   {"params", names}};
  std::ofstream js(prefix + ".json");
  if (!js) throw IoError("save_probe: cannot open " + prefix + ".json");
  js << j.dump(2) << "\n";
}

AttributeProbe load_probe(const std::string& prefix) {
  std::ifstream js(prefix + ".json");
  if (!js) throw IoError("load_probe: cannot open " + prefix + ".json");
  nlohmann::json j;
  try {
    js >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_probe: bad sidecar json: " + std::string(e.what()));
  }
  if (j.value("format", "") != "latentlab-probe-v1")
    throw IoError("load_probe: unrecognized probe format");
  ProbeConfig cfg;
  try {
    const auto& c = j.at("config");
    cfg.conv1 = c.at("conv1").get<std::size_t>();
    cfg.conv2 = c.at("conv2").get<std::size_t>();
    cfg.feature_dim = c.at("feature_dim").get<std::size_t>();
    cfg.steps = c.at("steps").get<std::uint64_t>();
    cfg.batch = c.at("batch").get<std::size_t>();
    cfg.peak_lr = c.at("peak_lr").get<double>();
    cfg.warmup = c.at("warmup").get<std::uint64_t>();
    cfg.floor_lr = c.at("floor_lr").get<double>();
    cfg.eval_every = c.at("eval_every").get<std::uint64_t>();
    cfg.eval_count = c.at("eval_count").get<std::size_t>();
    cfg.target_accuracy = c.at("target_accuracy").get<double>();
    cfg.seed = c.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_probe: bad config: " + std::string(e.what()));
  }
  AttributeProbe probe(cfg);

  std::ifstream ts(prefix + ".tensors", std::ios::binary);
  if (!ts) throw IoError("load_probe: cannot open " + prefix + ".tensors");
  const auto names = j.at("params").get<std::vector<std::string>>();
  if (names.size() != probe.params().size())
    throw IoError("load_probe: parameter list mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& p = probe.params()[i];
    if (p.name != names[i]) throw IoError("load_probe: parameter order mismatch");
    Tensor v = load_tensor<float>(ts);
    if (v.shape() != p.value.shape())
      throw IoError("load_probe: shape mismatch for " + p.name);
    v.set_requires_grad(true);
    p.value = v;
  }
  probe.set_real_accuracy(j.value("real_accuracy", 0.0));
  return probe;
}

// ---- metric entry points -------------------------------------------------

double eval_ffd(const Tensor& samples, const Tensor& reference,
                const AttributeProbe& probe) {
  check_image_batch("eval_ffd", samples);
  check_image_batch("eval_ffd", reference);
  return eval_ffd_features(batched_features(probe, samples),
                           batched_features(probe, reference));
}

double eval_ffd_features(const Tensor& sample_features,
                         const Tensor& reference_features) {
  return frechet_distance(fit_gaussian(sample_features),
                          fit_gaussian(reference_features));
}

double eval_cond_consistency(const Tensor& images,
                             const std::vector<Attributes>& intended,
                             const AttributeProbe& probe) {
  if (probe.real_accuracy() < kProbeAccuracyGate)
    throw UsageError(
        "eval_cond_consistency: probe real-data accuracy " +
        std::to_string(probe.real_accuracy()) + " is below the " +
        std::to_string(kProbeAccuracyGate) + " gate; evaluation refused");
  check_image_batch("eval_cond_consistency", images);
  const std::size_t n = images.shape()[0];
  if (n == 0 || n != intended.size())
    throw ShapeError("eval_cond_consistency: image / conditioning count mismatch");

  const std::size_t chunk = 64;
  const std::size_t row = 3 * kImageSide * kImageSide;
  auto src = images.data();
  std::size_t hits = 0;
  for (std::size_t i0 = 0; i0 < n; i0 += chunk) {
    const std::size_t m = std::min(chunk, n - i0);
    std::vector<float> part(src.begin() + i0 * row, src.begin() + (i0 + m) * row);
    const auto pred = probe.classify(
        Tensor::from({m, 3, kImageSide, kImageSide}, std::move(part)));
    for (std::size_t i = 0; i < m; ++i) {
      const auto want = class_ids(intended[i0 + i]);
      const auto got = class_ids(pred[i]);
      for (std::size_t k = 0; k < 5; ++k) hits += want[k] == got[k];
    }
  }
  return static_cast<double>(hits) / (5.0 * static_cast<double>(n));
}

}  // namespace latentlab
