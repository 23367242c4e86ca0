#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "latentlab/error.hpp"
#include "latentlab/rng.hpp"

namespace latentlab {

enum class Dtype : std::uint64_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily; same length as value once present
  bool requires_grad = false;
  bool is_leaf = true;
  // Accumulates this node's grad into its parents (captured in the closure).
  std::function<void()> backprop;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tape;

// Value-semantics handle on a shared node. Default tensors are detached
// constants; set_requires_grad(true) marks a leaf parameter.
template <class T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, T v);
  static TensorT from(Shape shape, std::vector<T> data);
  static TensorT randn(Shape shape, RngStream& rng, T stddev = T(1));
  static TensorT uniform(Shape shape, RngStream& rng, T lo, T hi);
  static TensorT trunc_normal(Shape shape, RngStream& rng, T stddev);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }
  static constexpr Dtype dtype() { return sizeof(T) == 4 ? Dtype::f32 : Dtype::f64; }

  std::span<T> data() { return {node_->value.data(), node_->value.size()}; }
  std::span<const T> data() const { return {node_->value.data(), node_->value.size()}; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<T> grad_data();
  std::span<const T> grad_data() const;
  void zero_grad() { node_->grad.clear(); }
  TensorT grad_tensor() const;  // grad as a detached tensor (must exist)

  std::shared_ptr<Node<T>> node() const { return node_; }
  TensorT clone() const;  // deep copy, detached

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Execution-ordered computation record. Ops append nodes while a tape is
// current; backward() replays the record in exact reverse execution order,
// accumulating gradients additively. One tape per logical training thread.
template <class T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  void record(std::shared_ptr<Node<T>> n) { order_.push_back(std::move(n)); }
  std::size_t size() const { return order_.size(); }

  // Seeds d(loss)=1 and replays the record backwards. If `leaf_sink` is set,
  // leaf gradients are diverted into it (keyed by node) instead of the leaf's
  // own grad buffer — this is what makes shard-parallel reduction race-free.
  struct LeafSink {
    std::vector<std::pair<Node<T>*, std::vector<T>>> grads;
    std::vector<T>& slot(Node<T>* n, std::size_t numel);
  };
  void backward(const TensorT<T>& loss, LeafSink* leaf_sink = nullptr);

 private:
  std::vector<std::shared_ptr<Node<T>>> order_;
  Tape* prev_ = nullptr;
};

// RAII guard that hides any current tape (pure inference region).
template <class T>
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();

 private:
  Tape<T>* saved_;
};

namespace detail {
// Leaf-gradient accumulation honoring the active sink (see Tape::backward).
template <class T>
void accum_grad(Node<T>* n, const T* vals, std::size_t len);
template <class T>
void accum_grad_scaled(Node<T>* n, const T* vals, std::size_t len, T scale);
}  // namespace detail

namespace detail_rotary {
// Rotary rotation of one packed row (d = heads * d_h, even/odd pairs). The
// incremental decode path shares this with the rotary_apply op so a cached
// and a from-scratch forward round identically.
template <class T>
void rotate_row(const T* in, T* out, std::size_t d, std::size_t heads, std::int64_t pos,
                bool invert);
}  // namespace detail_rotary

// ---- ops -------------------------------------------------------------
// All ops validate shapes, check outputs for NaN/Inf eagerly (fatal), and
// register a backward rule when a tape is active and an input requires grad.

enum class NormKind { layer_norm, rms_norm };
inline constexpr double kNormEps = 1e-5;

template <class T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> mul_scalar(const TensorT<T>& a, T s);
// x[..., d] + bias[d]
template <class T> TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias);
// x[B, s, d] + pos[s, d], broadcast over leading dim
template <class T> TensorT<T> add_positional(const TensorT<T>& x, const TensorT<T>& pos);

// a[..., k] x b[k, n]: leading dims of `a` fold into rows.
template <class T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

// rows of `table` gathered by id; out[i] = table[ids[i]].
template <class T> TensorT<T> embedding(const TensorT<T>& table, const std::vector<std::int64_t>& ids, Shape out_prefix = {});

template <class T> TensorT<T> softmax(const TensorT<T>& x);  // last axis
template <class T> TensorT<T> normalize(const TensorT<T>& x, NormKind kind, const TensorT<T>* gain = nullptr, const TensorT<T>* bias = nullptr);

// Fused multi-head attention on [h, s, d_h] (the per-sample layout).
template <class T> TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v, bool causal, bool qk_norm);
// Same kernel on packed [B, s, d] with d = heads*d_h.
template <class T> TensorT<T> attention_packed(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v, std::size_t heads, bool causal, bool qk_norm);

// Rotary position encoding (base 10000, even/odd pairs) applied per head.
// positions[i] is the absolute position of sequence slot i.
template <class T> TensorT<T> rotary_apply(const TensorT<T>& x, std::span<const std::int64_t> positions, std::size_t heads);

// logits[..., V] vs targets (flattened positions); masked-out positions are
// excluded from the mean. mask true = counted.
template <class T> TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::int64_t>& targets, const std::vector<std::uint8_t>* count_mask = nullptr);

enum class GeluMode { tanh_approx, exact_erf };
template <class T> TensorT<T> gelu(const TensorT<T>& x, GeluMode mode = GeluMode::tanh_approx);
template <class T> TensorT<T> silu(const TensorT<T>& x);
template <class T> TensorT<T> sigmoid(const TensorT<T>& x);
template <class T> TensorT<T> softplus(const TensorT<T>& x);
template <class T> TensorT<T> tanh_op(const TensorT<T>& x);
template <class T> TensorT<T> exp_op(const TensorT<T>& x);
template <class T> TensorT<T> log_op(const TensorT<T>& x);  // natural log; x must be > 0
template <class T> TensorT<T> swiglu(const TensorT<T>& x, const TensorT<T>& w_gate, const TensorT<T>& w_up, const TensorT<T>& w_down);

template <class T> TensorT<T> sum_all(const TensorT<T>& x);
template <class T> TensorT<T> mean_all(const TensorT<T>& x);
template <class T> TensorT<T> mean_axis0(const TensorT<T>& x);  // [n, m] -> [m]
template <class T> TensorT<T> mse_loss(const TensorT<T>& pred, const TensorT<T>& target);
// mean over all elements of w[row] * (pred-target)^2, rows = leading dim.
template <class T> TensorT<T> weighted_mse(const TensorT<T>& pred, const TensorT<T>& target, const std::vector<T>& row_weights);

template <class T> TensorT<T> detach(const TensorT<T>& x);
// forward: `values`; backward: pass-through to x (straight-through estimator).
template <class T> TensorT<T> straight_through(const TensorT<T>& x, std::vector<T> values);

// x[B, s, d] sliced to [B, i1-i0, d] along the sequence axis.
template <class T> TensorT<T> slice_seq(const TensorT<T>& x, std::size_t i0, std::size_t i1);
// concat along sequence axis: [B, sa, d] ++ [B, sb, d].
template <class T> TensorT<T> concat_seq(const TensorT<T>& a, const TensorT<T>& b);
// v[B, d] broadcast to [B, s, d] (degenerate single-key attention mix).
template <class T> TensorT<T> broadcast_seq(const TensorT<T>& v, std::size_t s);
// out[b] = flags[b] ? alt : x[b]; rows of x[B, d], alt[d].
template <class T> TensorT<T> select_rows(const TensorT<T>& x, const TensorT<T>& alt, const std::vector<std::uint8_t>& use_alt);
// x[B, s, d] * (1 + scale[B, d]) + shift[B, d]
template <class T> TensorT<T> modulate(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift);
// x[B, s, d] * gate[B, d]
template <class T> TensorT<T> gate_mul(const TensorT<T>& x, const TensorT<T>& gate);
// x[..., cols] -> `parts` tensors of [..., cols/parts]
template <class T> std::vector<TensorT<T>> split_cols(const TensorT<T>& x, std::size_t parts);

// 0.5 * mean(mu^2 + exp(logvar) - 1 - logvar)
template <class T> TensorT<T> kl_penalty(const TensorT<T>& mu, const TensorT<T>& logvar);

// conv2d on [B, C, H, W]; weight [Co, C, kh, kw]; SAME-style explicit pad.
template <class T> TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, std::size_t stride, std::size_t pad);
template <class T> TensorT<T> upsample_nearest2(const TensorT<T>& x);
// Same elements, new shape (copying relayout; gradient passes through).
template <class T> TensorT<T> reshape(const TensorT<T>& x, Shape shape);
// [B, C, H, W] <-> [B, H*W, C]; positions in raster order (y * W + x).
template <class T> TensorT<T> nchw_to_nsc(const TensorT<T>& x);
template <class T> TensorT<T> nsc_to_nchw(const TensorT<T>& x, std::size_t h, std::size_t w);

// ---- autodiff entry points --------------------------------------------

// Backward on the current tape (usage error if loss is non-scalar or no tape).
template <class T> void backward(const TensorT<T>& loss);

// Central finite differences vs analytic gradient, 64-bit. Returns the max
// relative error over checked coordinates (all when max_coords = 0; else an
// evenly spaced deterministic subset).
double grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x, double h = 1e-4, std::size_t max_coords = 0);

// ---- serialization -----------------------------------------------------
// Flat binary layout: magic "LLT1", then dtype code, rank, dims as
// little-endian u64, then row-major little-endian values.

template <class T> void save_tensor(std::ostream& out, const TensorT<T>& t);
template <class T> void save_tensor_file(const std::string& path, const TensorT<T>& t);
template <class T> TensorT<T> load_tensor(std::istream& in);
template <class T> TensorT<T> load_tensor_file(const std::string& path);

// ---- small helpers -----------------------------------------------------

template <class T> void check_finite(const char* op, std::span<const T> vals);
std::size_t round_multiple(double x, std::size_t multiple);

extern template class TensorT<float>;
extern template class TensorT<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace latentlab
