#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentlab/dataset.hpp"
#include "latentlab/optim.hpp"
#include "latentlab/rng.hpp"
#include "latentlab/tensor.hpp"

namespace latentlab {

// ---- symmetric linear algebra (double precision) ------------------------

// Eigendecomposition of a symmetric d x d row-major matrix by cyclic Jacobi
// rotations. values ascending; vectors row k is the eigenvector for
// values[k], so A = sum_k values[k] * v_k v_k^T. Throws NumericalError if
// the sweep fails to converge.
struct SymEig {
  std::vector<double> values;
  std::vector<double> vectors;
};
SymEig sym_eig(std::vector<double> a, std::size_t d);

// Sample mean and covariance of the rows of features [n, d], accumulated in
// double; covariance uses the unbiased 1/(n-1) form. n >= 2.
struct GaussianFit {
  std::vector<double> mean;
  std::vector<double> cov;  // d x d row-major
  std::size_t dim = 0;
};
GaussianFit fit_gaussian(const Tensor& features);

// Frechet distance between two Gaussian fits:
//   ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})
// after adding 1e-6 I to each covariance. The square root comes from the
// eigendecomposition of the symmetrized product with negative eigenvalues
// clamped at 0. Throws NumericalError on non-finite input or a regularized
// covariance that is not PSD.
double frechet_distance(const GaussianFit& a, const GaussianFit& b);

// ---- attribute probe -----------------------------------------------------

// A small fixed conv classifier for the synthetic shape images: two strided
// 3x3 convs, a dense feature layer, and one softmax head per attribute. Its
// feature layer doubles as the embedding space for the Frechet metric.
struct ProbeConfig {
  std::size_t conv1 = 16;
  std::size_t conv2 = 32;
  std::size_t feature_dim = 64;
  // training
  std::uint64_t steps = 3000;
  std::size_t batch = 16;
  double peak_lr = 2.5e-3;
  std::uint64_t warmup = 100;
  double floor_lr = 2e-4;
  std::uint64_t eval_every = 250;
  std::size_t eval_count = 256;
  double target_accuracy = 0.99;  // early stop once held-out accuracy passes
  std::uint64_t seed = 17;

  void validate() const;  // throws ConfigError
};

class AttributeProbe {
 public:
  explicit AttributeProbe(ProbeConfig cfg);

  const ProbeConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // images [B, 3, 32, 32] in [-1, 1] -> features [B, feature_dim].
  Tensor features(const Tensor& images) const;
  // Per-attribute logits, kAttributeCards order (count, background, type,
  // color, cell).
  std::vector<Tensor> head_logits(const Tensor& features) const;
  // Argmax classification (no gradients).
  std::vector<Attributes> classify(const Tensor& images) const;

  // Held-out attribute-match accuracy measured after training; 0 until then.
  double real_accuracy() const { return real_accuracy_; }
  void set_real_accuracy(double a) { real_accuracy_ = a; }

 private:
  const Tensor& param(const std::string& name) const;

  ProbeConfig cfg_;
  ParamSet params_;
  double real_accuracy_ = 0.0;
};

// Trains the probe on the attribute-classification task over `data` and
// stamps the held-out accuracy. Aborts with NumericalError if the loss goes
// non-finite.
AttributeProbe train_probe(const ProbeConfig& cfg, const SyntheticDataset& data);

// Mean attribute-match fraction of probe argmax vs true attributes over
// dataset indices [first, first + n).
double probe_accuracy(const AttributeProbe& probe, const SyntheticDataset& data,
                      std::uint64_t first, std::size_t n, std::size_t batch = 32);

// Writes <prefix>.tensors and <prefix>.json (config + measured accuracy).
void save_probe(const AttributeProbe& probe, const std::string& prefix);
AttributeProbe load_probe(const std::string& prefix);

// ---- metric entry points -------------------------------------------------

// Frechet distance between the probe-feature Gaussians of two image sets
// [n, 3, 32, 32]. Each side needs >= 2 rows.
double eval_ffd(const Tensor& samples, const Tensor& reference,
                const AttributeProbe& probe);
// Same on pre-extracted feature matrices [n, d].
double eval_ffd_features(const Tensor& sample_features,
                         const Tensor& reference_features);

// Mean attribute-match fraction between probe classifications of `images`
// and the attributes each image was conditioned on. Refuses (UsageError)
// unless the probe's measured real-data accuracy is >= 0.95.
double eval_cond_consistency(const Tensor& images,
                             const std::vector<Attributes>& intended,
                             const AttributeProbe& probe);

inline constexpr double kProbeAccuracyGate = 0.95;

}  // namespace latentlab
