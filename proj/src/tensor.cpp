#include "latentlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace latentlab {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::size_t round_multiple(double x, std::size_t multiple) {
  double q = x / static_cast<double>(multiple);
  auto r = static_cast<std::size_t>(std::llround(q));
  if (r == 0) r = 1;
  return r * multiple;
}

template <class T>
void check_finite(const char* op, std::span<const T> vals) {
  constexpr T lim = std::numeric_limits<T>::max();
  for (const T& v : vals) {
    if (!(v >= -lim && v <= lim)) {  // false for NaN and +-Inf
      throw NumericalError(std::string(op) + ": non-finite value produced");
    }
  }
}
template void check_finite<float>(const char*, std::span<const float>);
template void check_finite<double>(const char*, std::span<const double>);

// ---- tape machinery -----------------------------------------------------

namespace {

template <class T>
Tape<T>*& current_tape_ref() {
  static thread_local Tape<T>* cur = nullptr;
  return cur;
}

template <class T>
typename Tape<T>::LeafSink*& sink_ref() {
  static thread_local typename Tape<T>::LeafSink* sink = nullptr;
  return sink;
}

}  // namespace

template <class T>
Tape<T>::Tape() {
  prev_ = current_tape_ref<T>();
  current_tape_ref<T>() = this;
}

template <class T>
Tape<T>::~Tape() {
  current_tape_ref<T>() = prev_;
}

template <class T>
Tape<T>* Tape<T>::current() {
  return current_tape_ref<T>();
}

template <class T>
std::vector<T>& Tape<T>::LeafSink::slot(Node<T>* n, std::size_t numel) {
  for (auto& [node, buf] : grads) {
    if (node == n) return buf;
  }
  grads.emplace_back(n, std::vector<T>(numel, T(0)));
  return grads.back().second;
}

namespace detail {

// Destination buffer for a node's incoming gradient: the active sink for
// leaves (shard-parallel reduction), the node's own buffer otherwise.
template <class T>
std::span<T> grad_dest(Node<T>* n) {
  auto* sink = sink_ref<T>();
  if (sink && n->is_leaf) {
    auto& buf = sink->slot(n, n->numel());
    return {buf.data(), buf.size()};
  }
  n->ensure_grad();
  return {n->grad.data(), n->grad.size()};
}

template <class T>
void accum_grad(Node<T>* n, const T* vals, std::size_t len) {
  auto dst = grad_dest(n);
  for (std::size_t i = 0; i < len; ++i) dst[i] += vals[i];
}

template <class T>
void accum_grad_scaled(Node<T>* n, const T* vals, std::size_t len, T scale) {
  auto dst = grad_dest(n);
  for (std::size_t i = 0; i < len; ++i) dst[i] += scale * vals[i];
}

template std::span<float> grad_dest<float>(Node<float>*);
template std::span<double> grad_dest<double>(Node<double>*);
template void accum_grad<float>(Node<float>*, const float*, std::size_t);
template void accum_grad<double>(Node<double>*, const double*, std::size_t);
template void accum_grad_scaled<float>(Node<float>*, const float*, std::size_t, float);
template void accum_grad_scaled<double>(Node<double>*, const double*, std::size_t, double);

}  // namespace detail

template <class T>
void Tape<T>::backward(const TensorT<T>& loss, LeafSink* leaf_sink) {
  if (loss.numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  auto* prev_sink = sink_ref<T>();
  sink_ref<T>() = leaf_sink;
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node<T>* n = it->get();
    if (n->backprop && !n->grad.empty()) n->backprop();
  }
  sink_ref<T>() = prev_sink;
}

template <class T>
NoGrad<T>::NoGrad() {
  saved_ = current_tape_ref<T>();
  current_tape_ref<T>() = nullptr;
}

template <class T>
NoGrad<T>::~NoGrad() {
  current_tape_ref<T>() = saved_;
}

template class NoGrad<float>;
template class NoGrad<double>;

// ---- TensorT ------------------------------------------------------------

template <class T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(shape_numel(shape), T(0));
  n->shape = std::move(shape);
  return TensorT(n);
}

template <class T>
TensorT<T> TensorT<T>::full(Shape shape, T v) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(shape_numel(shape), v);
  n->shape = std::move(shape);
  return TensorT(n);
}

template <class T>
TensorT<T> TensorT<T>::from(Shape shape, std::vector<T> data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from: shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  return TensorT(n);
}

template <class T>
TensorT<T> TensorT<T>::randn(Shape shape, RngStream& rng, T stddev) {
  auto n = std::make_shared<Node<T>>();
  n->value.resize(shape_numel(shape));
  for (auto& v : n->value) v = static_cast<T>(rng.normal()) * stddev;
  n->shape = std::move(shape);
  return TensorT(n);
}

template <class T>
TensorT<T> TensorT<T>::uniform(Shape shape, RngStream& rng, T lo, T hi) {
  auto n = std::make_shared<Node<T>>();
  n->value.resize(shape_numel(shape));
  for (auto& v : n->value) v = lo + static_cast<T>(rng.uniform()) * (hi - lo);
  n->shape = std::move(shape);
  return TensorT(n);
}

template <class T>
TensorT<T> TensorT<T>::trunc_normal(Shape shape, RngStream& rng, T stddev) {
  auto n = std::make_shared<Node<T>>();
  n->value.resize(shape_numel(shape));
  for (auto& v : n->value) v = static_cast<T>(rng.truncated_normal(stddev));
  n->shape = std::move(shape);
  return TensorT(n);
}

template <class T>
T TensorT<T>::item() const {
  if (numel() != 1) throw UsageError("item: tensor is not scalar: " + shape_str(shape()));
  return node_->value[0];
}

template <class T>
std::span<T> TensorT<T>::grad_data() {
  node_->ensure_grad();
  return {node_->grad.data(), node_->grad.size()};
}

template <class T>
std::span<const T> TensorT<T>::grad_data() const {
  if (!has_grad()) throw UsageError("grad_data: gradient not populated");
  return {node_->grad.data(), node_->grad.size()};
}

template <class T>
TensorT<T> TensorT<T>::grad_tensor() const {
  if (!has_grad()) throw UsageError("grad_tensor: gradient not populated");
  auto n = std::make_shared<Node<T>>();
  n->shape = node_->shape;
  n->value = node_->grad;
  return TensorT(n);
}

template <class T>
TensorT<T> TensorT<T>::clone() const {
  auto n = std::make_shared<Node<T>>();
  n->shape = node_->shape;
  n->value = node_->value;
  return TensorT(n);
}

// ---- kernels --------------------------------------------------------------

namespace {

// C[m,n] (+)= A[m,k] * B[k,n], contiguous row-major. The i-k-j/axpy layout
// keeps the inner loop reassociation-free so it vectorizes under strict FP.
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B, T* C,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict c = C + i * n;
    if (!accumulate) std::fill(c, c + n, T(0));
    const T* a = A + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const T av = a[l];
      if (av == T(0)) continue;
      const T* __restrict b = B + l * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

template <class T>
std::vector<T> transpose_mat(std::size_t m, std::size_t n, const T* A) {
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return out;
}

constexpr double kRotaryBase = 10000.0;

template <class T>
bool tracking(std::initializer_list<const TensorT<T>*> inputs) {
  if (!Tape<T>::current()) return false;
  for (auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <class T>
TensorT<T> finish(const char* op, std::shared_ptr<Node<T>> out, bool track,
                  std::function<void()> backprop) {
  check_finite<T>(op, {out->value.data(), out->value.size()});
  if (track) {
    out->requires_grad = true;
    out->is_leaf = false;
    out->backprop = std::move(backprop);
    Tape<T>::current()->record(out);
  }
  return TensorT<T>(out);
}

template <class T>
std::shared_ptr<Node<T>> new_node(Shape shape) {
  auto n = std::make_shared<Node<T>>();
  n->value.resize(shape_numel(shape));
  n->shape = std::move(shape);
  return n;
}

// rms of one row with the shared epsilon; used by qk-norm forward+backward.
template <class T>
T row_rms(const T* x, std::size_t n) {
  T ss = T(0);
  for (std::size_t i = 0; i < n; ++i) ss += x[i] * x[i];
  return std::sqrt(ss / static_cast<T>(n) + static_cast<T>(kNormEps));
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

template <class T>
static void require_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape("add", a, b);
  auto out = new_node<T>(a.shape());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  Node<T>* self = out.get();
  return finish<T>("add", out, tracking<T>({&a, &b}), [an, bn, self] {
    if (an->requires_grad) detail::accum_grad(an.get(), self->grad.data(), self->grad.size());
    if (bn->requires_grad) detail::accum_grad(bn.get(), self->grad.data(), self->grad.size());
  });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape("sub", a, b);
  auto out = new_node<T>(a.shape());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] - bv[i];
  auto an = a.node(), bn = b.node();
  Node<T>* self = out.get();
  return finish<T>("sub", out, tracking<T>({&a, &b}), [an, bn, self] {
    if (an->requires_grad) detail::accum_grad(an.get(), self->grad.data(), self->grad.size());
    if (bn->requires_grad)
      detail::accum_grad_scaled(bn.get(), self->grad.data(), self->grad.size(), T(-1));
  });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape("mul", a, b);
  auto out = new_node<T>(a.shape());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  Node<T>* self = out.get();
  return finish<T>("mul", out, tracking<T>({&a, &b}), [an, bn, self] {
    const std::size_t n = self->grad.size();
    std::vector<T> tmp(n);
    if (an->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) tmp[i] = self->grad[i] * bn->value[i];
      detail::accum_grad(an.get(), tmp.data(), n);
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) tmp[i] = self->grad[i] * an->value[i];
      detail::accum_grad(bn.get(), tmp.data(), n);
    }
  });
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  auto out = new_node<T>(a.shape());
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * s;
  auto an = a.node();
  Node<T>* self = out.get();
  return finish<T>("mul_scalar", out, tracking<T>({&a}), [an, s, self] {
    detail::accum_grad_scaled(an.get(), self->grad.data(), self->grad.size(), s);
  });
}

template <class T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const std::size_t d = bias.dim(0);
  const std::size_t rows = x.numel() / d;
  auto out = new_node<T>(x.shape());
  const auto xv = x.data(), bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out->value[r * d + j] = xv[r * d + j] + bv[j];
  auto xn = x.node(), bn = bias.node();
  Node<T>* self = out.get();
  return finish<T>("add_bias", out, tracking<T>({&x, &bias}), [xn, bn, self, rows, d] {
    if (xn->requires_grad) detail::accum_grad(xn.get(), self->grad.data(), self->grad.size());
    if (bn->requires_grad) {
      std::vector<T> db(d, T(0));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) db[j] += self->grad[r * d + j];
      detail::accum_grad(bn.get(), db.data(), d);
    }
  });
}

template <class T>
TensorT<T> add_positional(const TensorT<T>& x, const TensorT<T>& pos) {
  if (x.rank() != 3 || pos.rank() != 2 || x.dim(1) != pos.dim(0) || x.dim(2) != pos.dim(1)) {
    throw ShapeError("add_positional: " + shape_str(x.shape()) + " vs " + shape_str(pos.shape()));
  }
  const std::size_t B = x.dim(0), s = x.dim(1), d = x.dim(2);
  auto out = new_node<T>(x.shape());
  const auto xv = x.data(), pv = pos.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < s * d; ++i) out->value[b * s * d + i] = xv[b * s * d + i] + pv[i];
  auto xn = x.node(), pn = pos.node();
  Node<T>* self = out.get();
  return finish<T>("add_positional", out, tracking<T>({&x, &pos}), [xn, pn, self, B, s, d] {
    if (xn->requires_grad) detail::accum_grad(xn.get(), self->grad.data(), self->grad.size());
    if (pn->requires_grad) {
      std::vector<T> dp(s * d, T(0));
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < s * d; ++i) dp[i] += self->grad[b * s * d + i];
      detail::accum_grad(pn.get(), dp.data(), dp.size());
    }
  });
}

// ---- matmul ----------------------------------------------------------------

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() < 2 || b.rank() != 2) {
    throw ShapeError("matmul: need a[...,k] x b[k,n], got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t k = a.shape().back();
  if (k != b.dim(0)) {
    throw ShapeError("matmul: inner dims disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t n = b.dim(1);
  const std::size_t m = a.numel() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  auto out = new_node<T>(out_shape);
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out->value.data(), false);
  auto an = a.node(), bn = b.node();
  Node<T>* self = out.get();
  return finish<T>("matmul", out, tracking<T>({&a, &b}), [an, bn, self, m, n, k] {
    if (an->requires_grad) {
      // dA = dC * B^T
      auto bt = transpose_mat(k, n, bn->value.data());
      auto dst = detail::grad_dest(an.get());
      gemm_nn(m, k, n, self->grad.data(), bt.data(), dst.data(), true);
    }
    if (bn->requires_grad) {
      // dB = A^T * dC
      auto at = transpose_mat(m, k, an->value.data());
      auto dst = detail::grad_dest(bn.get());
      gemm_nn(k, n, m, at.data(), self->grad.data(), dst.data(), true);
    }
  });
}

// ---- embedding --------------------------------------------------------------

template <class T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<std::int64_t>& ids,
                     Shape out_prefix) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [rows, d]");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("embedding: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(rows) + ")");
    }
  }
  if (out_prefix.empty()) out_prefix = {ids.size()};
  if (shape_numel(out_prefix) != ids.size()) {
    throw ShapeError("embedding: prefix " + shape_str(out_prefix) + " != id count");
  }
  Shape out_shape = out_prefix;
  out_shape.push_back(d);
  auto out = new_node<T>(out_shape);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(out->value.data() + i * d, tv.data() + static_cast<std::size_t>(ids[i]) * d,
                d * sizeof(T));
  }
  auto tn = table.node();
  Node<T>* self = out.get();
  return finish<T>("embedding", out, tracking<T>({&table}), [tn, self, ids, d] {
    auto dst = detail::grad_dest(tn.get());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* row = dst.data() + static_cast<std::size_t>(ids[i]) * d;
      const T* g = self->grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
    }
  });
}

// ---- softmax / normalize -----------------------------------------------------

template <class T>
TensorT<T> softmax(const TensorT<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax: rank >= 1 required");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T* o = out->value.data() + r * d;
    T mx = in[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    T z = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("softmax", out, tracking<T>({&x}), [xn, self, rows, d] {
    std::vector<T> dx(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* p = self->value.data() + r * d;
      const T* g = self->grad.data() + r * d;
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += p[j] * g[j];
      T* o = dx.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) o[j] = p[j] * (g[j] - dot);
    }
    detail::accum_grad(xn.get(), dx.data(), dx.size());
  });
}

template <class T>
TensorT<T> normalize(const TensorT<T>& x, NormKind kind, const TensorT<T>* gain,
                     const TensorT<T>* bias) {
  if (x.rank() < 1) throw ShapeError("normalize: rank >= 1 required");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  if (gain && (gain->rank() != 1 || gain->dim(0) != d)) throw ShapeError("normalize: bad gain");
  if (bias && (bias->rank() != 1 || bias->dim(0) != d)) throw ShapeError("normalize: bad bias");
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  // per-row denominators saved for backward: sigma (layer) or rms.
  auto denom = std::make_shared<std::vector<T>>(rows);
  auto mean = std::make_shared<std::vector<T>>(kind == NormKind::layer_norm ? rows : 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T* o = out->value.data() + r * d;
    if (kind == NormKind::layer_norm) {
      T mu = T(0);
      for (std::size_t j = 0; j < d; ++j) mu += in[j];
      mu /= static_cast<T>(d);
      T var = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        T c = in[j] - mu;
        var += c * c;
      }
      var /= static_cast<T>(d);
      T sd = std::sqrt(var + static_cast<T>(kNormEps));
      (*mean)[r] = mu;
      (*denom)[r] = sd;
      for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mu) / sd;
    } else {
      T r2 = row_rms(in, d);
      (*denom)[r] = r2;
      for (std::size_t j = 0; j < d; ++j) o[j] = in[j] / r2;
    }
    if (gain) {
      const auto gv = gain->data();
      for (std::size_t j = 0; j < d; ++j) o[j] *= gv[j];
    }
    if (bias) {
      const auto bv = bias->data();
      for (std::size_t j = 0; j < d; ++j) o[j] += bv[j];
    }
  }
  auto xn = x.node();
  auto gn = gain ? gain->node() : nullptr;
  auto bn = bias ? bias->node() : nullptr;
  Node<T>* self = out.get();
  bool track = tracking<T>({&x, gain, bias});
  return finish<T>("normalize", out, track, [xn, gn, bn, self, rows, d, kind, denom, mean] {
    std::vector<T> dx(rows * d, T(0));
    std::vector<T> dg(gn ? d : 0, T(0));
    std::vector<T> db(bn ? d : 0, T(0));
    std::vector<T> xhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xn->value.data() + r * d;
      const T* g = self->grad.data() + r * d;
      const T dn = (*denom)[r];
      if (kind == NormKind::layer_norm) {
        const T mu = (*mean)[r];
        for (std::size_t j = 0; j < d; ++j) xhat[j] = (in[j] - mu) / dn;
      } else {
        for (std::size_t j = 0; j < d; ++j) xhat[j] = in[j] / dn;
      }
      if (bn) {
        for (std::size_t j = 0; j < d; ++j) db[j] += g[j];
      }
      if (gn) {
        for (std::size_t j = 0; j < d; ++j) dg[j] += g[j] * xhat[j];
      }
      // gradient through the normalization itself, with gy = gain .* dy
      T dot = T(0), sum = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        T gy = gn ? g[j] * gn->value[j] : g[j];
        dot += gy * xhat[j];
        sum += gy;
      }
      const T inv_d = T(1) / static_cast<T>(d);
      T* o = dx.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) {
        T gy = gn ? g[j] * gn->value[j] : g[j];
        if (kind == NormKind::layer_norm) {
          o[j] = (gy - sum * inv_d - xhat[j] * dot * inv_d) / dn;
        } else {
          o[j] = (gy - xhat[j] * dot * inv_d) / dn;
        }
      }
    }
    if (xn->requires_grad) detail::accum_grad(xn.get(), dx.data(), dx.size());
    if (gn && gn->requires_grad) detail::accum_grad(gn.get(), dg.data(), d);
    if (bn && bn->requires_grad) detail::accum_grad(bn.get(), db.data(), d);
  });
}

// ---- fused attention -----------------------------------------------------------

namespace {

// One head: q,k,v rows at `stride` apart, output likewise. Writes softmax
// probabilities and (optionally) normalized q/k into the saved buffers.
template <class T>
struct AttnSaved {
  std::vector<T> probs;   // [heads_total, s, s]
  std::vector<T> qn, kn;  // [heads_total, s, dh] when qk_norm
};

template <class T>
void attn_head_forward(const T* q, const T* k, const T* v, T* out, std::size_t s, std::size_t dh,
                       std::size_t stride, bool causal, bool qk_norm, T* probs, T* qn_buf,
                       T* kn_buf) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> qn(s * dh), kn(s * dh);
  for (std::size_t i = 0; i < s; ++i) {
    const T* qr = q + i * stride;
    const T* kr = k + i * stride;
    if (qk_norm) {
      T rq = row_rms(qr, dh), rk = row_rms(kr, dh);
      for (std::size_t j = 0; j < dh; ++j) {
        qn[i * dh + j] = qr[j] / rq;
        kn[i * dh + j] = kr[j] / rk;
      }
    } else {
      std::memcpy(qn.data() + i * dh, qr, dh * sizeof(T));
      std::memcpy(kn.data() + i * dh, kr, dh * sizeof(T));
    }
  }
  if (qk_norm && qn_buf) {
    std::memcpy(qn_buf, qn.data(), s * dh * sizeof(T));
    std::memcpy(kn_buf, kn.data(), s * dh * sizeof(T));
  }
  // scores = qn * kn^T * scale, then masked row softmax into `probs`
  auto knt = transpose_mat(s, dh, kn.data());
  gemm_nn(s, s, dh, qn.data(), knt.data(), probs, false);
  for (std::size_t i = 0; i < s; ++i) {
    T* row = probs + i * s;
    const std::size_t jmax = causal ? i + 1 : s;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < jmax; ++j) {
      row[j] *= scale;
      mx = std::max(mx, row[j]);
    }
    T z = T(0);
    for (std::size_t j = 0; j < jmax; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < jmax; ++j) row[j] /= z;
    for (std::size_t j = jmax; j < s; ++j) row[j] = T(0);
  }
  // out = probs * v
  std::vector<T> vc(s * dh), oc(s * dh);
  for (std::size_t i = 0; i < s; ++i) std::memcpy(vc.data() + i * dh, v + i * stride, dh * sizeof(T));
  gemm_nn(s, dh, s, probs, vc.data(), oc.data(), false);
  for (std::size_t i = 0; i < s; ++i) std::memcpy(out + i * stride, oc.data() + i * dh, dh * sizeof(T));
}

template <class T>
void attn_head_backward(const T* q, const T* k, const T* v, const T* dout, std::size_t s,
                        std::size_t dh, std::size_t stride, bool qk_norm, const T* probs,
                        const T* qn_in, const T* kn_in, T* dq, T* dk, T* dv) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> qn(s * dh), kn(s * dh);
  if (qk_norm) {
    std::memcpy(qn.data(), qn_in, s * dh * sizeof(T));
    std::memcpy(kn.data(), kn_in, s * dh * sizeof(T));
  } else {
    for (std::size_t i = 0; i < s; ++i) {
      std::memcpy(qn.data() + i * dh, q + i * stride, dh * sizeof(T));
      std::memcpy(kn.data() + i * dh, k + i * stride, dh * sizeof(T));
    }
  }
  std::vector<T> doc(s * dh), vc(s * dh);
  for (std::size_t i = 0; i < s; ++i) {
    std::memcpy(doc.data() + i * dh, dout + i * stride, dh * sizeof(T));
    std::memcpy(vc.data() + i * dh, v + i * stride, dh * sizeof(T));
  }
  // dP = dOut * V^T ; dV = P^T * dOut
  std::vector<T> dp(s * s);
  auto vt = transpose_mat(s, dh, vc.data());
  gemm_nn(s, s, dh, doc.data(), vt.data(), dp.data(), false);
  auto pt = transpose_mat(s, s, probs);
  std::vector<T> dvc(s * dh);
  gemm_nn(s, dh, s, pt.data(), doc.data(), dvc.data(), false);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < dh; ++j) dv[i * stride + j] += dvc[i * dh + j];
  // softmax backward into dS (scaled-score grad)
  std::vector<T>& ds = dp;
  for (std::size_t i = 0; i < s; ++i) {
    const T* p = probs + i * s;
    T* row = ds.data() + i * s;
    T dot = T(0);
    for (std::size_t j = 0; j < s; ++j) dot += p[j] * row[j];
    for (std::size_t j = 0; j < s; ++j) row[j] = p[j] * (row[j] - dot) * scale;
  }
  // dqn = dS * kn ; dkn = dS^T * qn
  std::vector<T> dqn(s * dh), dkn(s * dh);
  gemm_nn(s, dh, s, ds.data(), kn.data(), dqn.data(), false);
  auto dst = transpose_mat(s, s, ds.data());
  gemm_nn(s, dh, s, dst.data(), qn.data(), dkn.data(), false);
  // through the per-row rms normalization (or straight accumulate)
  for (std::size_t i = 0; i < s; ++i) {
    const T* dqr = dqn.data() + i * dh;
    const T* dkr = dkn.data() + i * dh;
    if (!qk_norm) {
      for (std::size_t j = 0; j < dh; ++j) {
        dq[i * stride + j] += dqr[j];
        dk[i * stride + j] += dkr[j];
      }
      continue;
    }
    const T* qr = q + i * stride;
    const T* kr = k + i * stride;
    const T rq = row_rms(qr, dh), rk = row_rms(kr, dh);
    const T* qh = qn.data() + i * dh;
    const T* kh = kn.data() + i * dh;
    T dotq = T(0), dotk = T(0);
    for (std::size_t j = 0; j < dh; ++j) {
      dotq += dqr[j] * qh[j];
      dotk += dkr[j] * kh[j];
    }
    const T inv_n = T(1) / static_cast<T>(dh);
    for (std::size_t j = 0; j < dh; ++j) {
      dq[i * stride + j] += (dqr[j] - qh[j] * dotq * inv_n) / rq;
      dk[i * stride + j] += (dkr[j] - kh[j] * dotk * inv_n) / rk;
    }
  }
}

template <class T>
TensorT<T> attention_impl(const char* op, const TensorT<T>& q, const TensorT<T>& k,
                          const TensorT<T>& v, std::size_t heads, std::size_t s, std::size_t dh,
                          std::size_t stride, std::size_t head_offset_mul, bool causal,
                          bool qk_norm) {
  require_same_shape(op, q, k);
  require_same_shape(op, q, v);
  auto out = new_node<T>(q.shape());
  auto saved = std::make_shared<AttnSaved<T>>();
  saved->probs.resize(heads * s * s);
  if (qk_norm) {
    saved->qn.resize(heads * s * dh);
    saved->kn.resize(heads * s * dh);
  }
  const auto qv = q.data(), kv = k.data(), vv = v.data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t base = h * head_offset_mul;
    attn_head_forward(qv.data() + base, kv.data() + base, vv.data() + base,
                      out->value.data() + base, s, dh, stride, causal, qk_norm,
                      saved->probs.data() + h * s * s,
                      qk_norm ? saved->qn.data() + h * s * dh : nullptr,
                      qk_norm ? saved->kn.data() + h * s * dh : nullptr);
  }
  auto qnn = q.node(), knn = k.node(), vnn = v.node();
  Node<T>* self = out.get();
  return finish<T>(op, out, tracking<T>({&q, &k, &v}),
                   [qnn, knn, vnn, self, saved, heads, s, dh, stride, head_offset_mul, qk_norm] {
                     std::vector<T> dq(self->grad.size(), T(0)), dk(self->grad.size(), T(0)),
                         dv(self->grad.size(), T(0));
                     for (std::size_t h = 0; h < heads; ++h) {
                       const std::size_t base = h * head_offset_mul;
                       attn_head_backward(qnn->value.data() + base, knn->value.data() + base,
                                          vnn->value.data() + base, self->grad.data() + base, s,
                                          dh, stride, qk_norm, saved->probs.data() + h * s * s,
                                          qk_norm ? saved->qn.data() + h * s * dh : nullptr,
                                          qk_norm ? saved->kn.data() + h * s * dh : nullptr,
                                          dq.data() + base, dk.data() + base, dv.data() + base);
                     }
                     if (qnn->requires_grad) detail::accum_grad(qnn.get(), dq.data(), dq.size());
                     if (knn->requires_grad) detail::accum_grad(knn.get(), dk.data(), dk.size());
                     if (vnn->requires_grad) detail::accum_grad(vnn.get(), dv.data(), dv.size());
                   });
}

}  // namespace

template <class T>
TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v, bool causal,
                     bool qk_norm) {
  if (q.rank() != 3) throw ShapeError("attention: expected [h, s, d_h], got " + shape_str(q.shape()));
  const std::size_t h = q.dim(0), s = q.dim(1), dh = q.dim(2);
  return attention_impl("attention", q, k, v, h, s, dh, /*stride=*/dh,
                        /*head_offset_mul=*/s * dh, causal, qk_norm);
}

template <class T>
TensorT<T> attention_packed(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                            std::size_t heads, bool causal, bool qk_norm) {
  if (q.rank() != 3) throw ShapeError("attention_packed: expected [B, s, d]");
  const std::size_t B = q.dim(0), s = q.dim(1), d = q.dim(2);
  if (d % heads != 0) throw ConfigError("attention_packed: d not divisible by heads");
  const std::size_t dh = d / heads;
  // fold (B, heads) into one head axis; per-slab base = b*s*d + h*dh.
  // attention_impl assumes uniform base spacing, so run it per sample.
  if (B == 1) {
    return attention_impl("attention_packed", q, k, v, heads, s, dh, /*stride=*/d,
                          /*head_offset_mul=*/dh, causal, qk_norm);
  }
  // For B > 1 the head bases are not a single arithmetic progression
  // (b*s*d + h*dh), so flatten by treating each sample separately via the
  // same kernel on slices: implemented by one fused node to keep the tape flat.
  auto out = new_node<T>(q.shape());
  auto saved = std::make_shared<AttnSaved<T>>();
  saved->probs.resize(B * heads * s * s);
  if (qk_norm) {
    saved->qn.resize(B * heads * s * dh);
    saved->kn.resize(B * heads * s * dh);
  }
  const auto qv = q.data(), kv = k.data(), vv = v.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = b * s * d + h * dh;
      const std::size_t slab = (b * heads + h);
      attn_head_forward(qv.data() + base, kv.data() + base, vv.data() + base,
                        out->value.data() + base, s, dh, d, causal, qk_norm,
                        saved->probs.data() + slab * s * s,
                        qk_norm ? saved->qn.data() + slab * s * dh : nullptr,
                        qk_norm ? saved->kn.data() + slab * s * dh : nullptr);
    }
  }
  auto qnn = q.node(), knn = k.node(), vnn = v.node();
  Node<T>* self = out.get();
  return finish<T>("attention_packed", out, tracking<T>({&q, &k, &v}),
                   [qnn, knn, vnn, self, saved, B, heads, s, d, dh, qk_norm] {
                     std::vector<T> dq(self->grad.size(), T(0)), dk(self->grad.size(), T(0)),
                         dv(self->grad.size(), T(0));
                     for (std::size_t b = 0; b < B; ++b) {
                       for (std::size_t h = 0; h < heads; ++h) {
                         const std::size_t base = b * s * d + h * dh;
                         const std::size_t slab = (b * heads + h);
                         attn_head_backward(
                             qnn->value.data() + base, knn->value.data() + base,
                             vnn->value.data() + base, self->grad.data() + base, s, dh, d, qk_norm,
                             saved->probs.data() + slab * s * s,
                             qk_norm ? saved->qn.data() + slab * s * dh : nullptr,
                             qk_norm ? saved->kn.data() + slab * s * dh : nullptr, dq.data() + base,
                             dk.data() + base, dv.data() + base);
                       }
                     }
                     if (qnn->requires_grad) detail::accum_grad(qnn.get(), dq.data(), dq.size());
                     if (knn->requires_grad) detail::accum_grad(knn.get(), dk.data(), dk.size());
                     if (vnn->requires_grad) detail::accum_grad(vnn.get(), dv.data(), dv.size());
                   });
}

// ---- rotary --------------------------------------------------------------

namespace detail_rotary {

// cos/sin of the rotation angle for pair index p (of dh/2) at `pos`; the one
// place the angle is computed so every caller rounds identically.
void rotary_cs(std::int64_t pos, std::size_t pair, std::size_t dh, double& c, double& sn) {
  const double expo = -2.0 * static_cast<double>(pair) / static_cast<double>(dh);
  const double theta = static_cast<double>(pos) * std::pow(kRotaryBase, expo);
  c = std::cos(theta);
  sn = std::sin(theta);
}

// Rotation shared by the autodiff op and the kv-cache incremental path so
// both round identically. `invert` applies the transpose rotation.
template <class T>
void rotate_row(const T* in, T* out, std::size_t d, std::size_t heads, std::int64_t pos,
                bool invert) {
  const std::size_t dh = d / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    const T* x = in + h * dh;
    T* o = out + h * dh;
    for (std::size_t p = 0; p + 1 < dh; p += 2) {
      double cd, snd;
      rotary_cs(pos, p / 2, dh, cd, snd);
      const T c = static_cast<T>(cd);
      const T sn = static_cast<T>(invert ? -snd : snd);
      const T x0 = x[p], x1 = x[p + 1];
      o[p] = c * x0 - sn * x1;
      o[p + 1] = sn * x0 + c * x1;
    }
  }
}

// Same rotation from a precomputed (c, sn) table row (one entry per pair).
template <class T>
void rotate_row_table(const T* in, T* out, std::size_t d, std::size_t heads, const T* cs,
                      bool invert) {
  const std::size_t dh = d / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    const T* x = in + h * dh;
    T* o = out + h * dh;
    for (std::size_t p = 0; p + 1 < dh; p += 2) {
      const T c = cs[p];
      const T sn = invert ? -cs[p + 1] : cs[p + 1];
      const T x0 = x[p], x1 = x[p + 1];
      o[p] = c * x0 - sn * x1;
      o[p + 1] = sn * x0 + c * x1;
    }
  }
}

template void rotate_row<float>(const float*, float*, std::size_t, std::size_t, std::int64_t, bool);
template void rotate_row<double>(const double*, double*, std::size_t, std::size_t, std::int64_t,
                                 bool);

}  // namespace detail_rotary

template <class T>
TensorT<T> rotary_apply(const TensorT<T>& x, std::span<const std::int64_t> positions,
                        std::size_t heads) {
  if (x.rank() != 3) throw ShapeError("rotary_apply: expected rank-3 input");
  const std::size_t B = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads != 0) throw ConfigError("rotary_apply: bad head count");
  if ((d / heads) % 2 != 0) throw ConfigError("rotary_apply: head dim must be even");
  if (positions.size() != s) throw ShapeError("rotary_apply: positions length != s");
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  const std::size_t dh = d / heads;
  // (c, sn) interleaved per pair, one table row per sequence slot; computed
  // once here instead of per (batch, row, pair).
  auto cs = std::make_shared<std::vector<T>>(s * dh);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t p = 0; p + 1 < dh; p += 2) {
      double cd, snd;
      detail_rotary::rotary_cs(positions[i], p / 2, dh, cd, snd);
      (*cs)[i * dh + p] = static_cast<T>(cd);
      (*cs)[i * dh + p + 1] = static_cast<T>(snd);
    }
  }
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t off = (b * s + i) * d;
      detail_rotary::rotate_row_table(xv.data() + off, out->value.data() + off, d, heads,
                                      cs->data() + i * dh, false);
    }
  }
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("rotary_apply", out, tracking<T>({&x}), [xn, self, cs, B, s, d, dh, heads] {
    std::vector<T> dx(self->grad.size());
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < s; ++i) {
        const std::size_t off = (b * s + i) * d;
        detail_rotary::rotate_row_table(self->grad.data() + off, dx.data() + off, d, heads,
                                        cs->data() + i * dh, true);
      }
    }
    detail::accum_grad(xn.get(), dx.data(), dx.size());
  });
}

// ---- cross entropy ----------------------------------------------------------

template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::int64_t>& targets,
                         const std::vector<std::uint8_t>* count_mask) {
  if (logits.rank() < 2) throw ShapeError("cross_entropy: logits must be [..., V]");
  const std::size_t V = logits.shape().back();
  const std::size_t n = logits.numel() / V;
  if (targets.size() != n) throw ShapeError("cross_entropy: target count != positions");
  if (count_mask && count_mask->size() != n) throw ShapeError("cross_entropy: mask size");
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (count_mask && !(*count_mask)[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " out of [0," +
                       std::to_string(V) + ")");
    }
    ++count;
  }
  if (count == 0) throw UsageError("cross_entropy: no counted positions");
  auto out = new_node<T>(Shape{1});
  // save per-row max and log-sum-exp; probabilities recomputed on backward.
  auto mx = std::make_shared<std::vector<T>>(n);
  auto lse = std::make_shared<std::vector<T>>(n);
  const auto lv = logits.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = lv.data() + i * V;
    T m = row[0];
    for (std::size_t j = 1; j < V; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - m);
    (*mx)[i] = m;
    (*lse)[i] = std::log(z);
    if (!count_mask || (*count_mask)[i]) {
      acc += static_cast<double>(m) + static_cast<double>((*lse)[i]) -
             static_cast<double>(row[targets[i]]);
    }
  }
  out->value[0] = static_cast<T>(acc / static_cast<double>(count));
  auto ln = logits.node();
  Node<T>* self = out.get();
  std::vector<std::uint8_t> mask_copy =
      count_mask ? *count_mask : std::vector<std::uint8_t>(n, std::uint8_t(1));
  return finish<T>("cross_entropy", out, tracking<T>({&logits}),
                   [ln, self, targets, mask_copy, mx, lse, n, V, count] {
                     const T go = self->grad[0] / static_cast<T>(count);
                     std::vector<T> dx(n * V, T(0));
                     for (std::size_t i = 0; i < n; ++i) {
                       if (!mask_copy[i]) continue;
                       const T* row = ln->value.data() + i * V;
                       T* o = dx.data() + i * V;
                       const T m = (*mx)[i], z = (*lse)[i];
                       for (std::size_t j = 0; j < V; ++j) {
                         o[j] = go * std::exp(row[j] - m - z);
                       }
                       o[targets[i]] -= go;
                     }
                     detail::accum_grad(ln.get(), dx.data(), dx.size());
                   });
}

// ---- activations ----------------------------------------------------------

namespace {
template <class T, class F, class DF>
TensorT<T> unary_op(const char* name, const TensorT<T>& x, F f, DF df) {
  auto out = new_node<T>(x.shape());
  const auto xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = f(xv[i]);
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>(name, out, tracking<T>({&x}), [xn, self, df] {
    std::vector<T> dx(self->grad.size());
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] = self->grad[i] * df(xn->value[i], self->value[i]);
    detail::accum_grad(xn.get(), dx.data(), dx.size());
  });
}
}  // namespace

template <class T>
TensorT<T> gelu(const TensorT<T>& x, GeluMode mode) {
  if (mode == GeluMode::tanh_approx) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return unary_op<T>(
        "gelu", x,
        [](T v) {
          double xv = v;
          double u = kC * (xv + kA * xv * xv * xv);
          return static_cast<T>(0.5 * xv * (1.0 + std::tanh(u)));
        },
        [](T v, T) {
          double xv = v;
          double u = kC * (xv + kA * xv * xv * xv);
          double th = std::tanh(u);
          double du = kC * (1.0 + 3.0 * kA * xv * xv);
          return static_cast<T>(0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * du);
        });
  }
  constexpr double kInvSqrt2 = 0.7071067811865476;
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return unary_op<T>(
      "gelu_erf", x,
      [](T v) {
        double xv = v;
        return static_cast<T>(0.5 * xv * (1.0 + std::erf(xv * kInvSqrt2)));
      },
      [](T v, T) {
        double xv = v;
        double phi = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
        return static_cast<T>(phi + xv * pdf);
      });
}

template <class T>
TensorT<T> silu(const TensorT<T>& x) {
  return unary_op<T>(
      "silu", x,
      [](T v) {
        double s = 1.0 / (1.0 + std::exp(-static_cast<double>(v)));
        return static_cast<T>(v * s);
      },
      [](T v, T) {
        double s = 1.0 / (1.0 + std::exp(-static_cast<double>(v)));
        return static_cast<T>(s * (1.0 + v * (1.0 - s)));
      });
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return unary_op<T>(
      "sigmoid", x,
      [](T v) { return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
TensorT<T> softplus(const TensorT<T>& x) {
  return unary_op<T>(
      "softplus", x,
      [](T v) {
        double xv = v;
        return static_cast<T>(std::max(xv, 0.0) + std::log1p(std::exp(-std::fabs(xv))));
      },
      [](T v, T) { return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); });
}

template <class T>
TensorT<T> tanh_op(const TensorT<T>& x) {
  return unary_op<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
TensorT<T> exp_op(const TensorT<T>& x) {
  return unary_op<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
TensorT<T> log_op(const TensorT<T>& x) {
  return unary_op<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
TensorT<T> swiglu(const TensorT<T>& x, const TensorT<T>& w_gate, const TensorT<T>& w_up,
                  const TensorT<T>& w_down) {
  return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

// ---- reductions / losses ----------------------------------------------------

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  auto out = new_node<T>(Shape{1});
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  out->value[0] = static_cast<T>(acc);
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("sum_all", out, tracking<T>({&x}), [xn, self] {
    auto dst = detail::grad_dest(xn.get());
    const T g = self->grad[0];
    for (auto& v : dst) v += g;
  });
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  auto out = new_node<T>(Shape{1});
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  const std::size_t n = x.numel();
  out->value[0] = static_cast<T>(acc / static_cast<double>(n));
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("mean_all", out, tracking<T>({&x}), [xn, self, n] {
    auto dst = detail::grad_dest(xn.get());
    const T g = self->grad[0] / static_cast<T>(n);
    for (auto& v : dst) v += g;
  });
}

template <class T>
TensorT<T> mean_axis0(const TensorT<T>& x) {
  if (x.rank() != 2) throw ShapeError("mean_axis0: expected [n, m]");
  const std::size_t n = x.dim(0), m = x.dim(1);
  auto out = new_node<T>(Shape{m});
  const auto xv = x.data();
  for (std::size_t j = 0; j < m; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(xv[i * m + j]);
    out->value[j] = static_cast<T>(acc / static_cast<double>(n));
  }
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("mean_axis0", out, tracking<T>({&x}), [xn, self, n, m] {
    std::vector<T> dx(n * m);
    const T inv = T(1) / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) dx[i * m + j] = self->grad[j] * inv;
    detail::accum_grad(xn.get(), dx.data(), dx.size());
  });
}

template <class T>
TensorT<T> mse_loss(const TensorT<T>& pred, const TensorT<T>& target) {
  require_same_shape("mse_loss", pred, target);
  auto out = new_node<T>(Shape{1});
  const auto pv = pred.data(), tv = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    double dlt = static_cast<double>(pv[i]) - static_cast<double>(tv[i]);
    acc += dlt * dlt;
  }
  const std::size_t n = pred.numel();
  out->value[0] = static_cast<T>(acc / static_cast<double>(n));
  auto pn = pred.node(), tn = target.node();
  Node<T>* self = out.get();
  return finish<T>("mse_loss", out, tracking<T>({&pred, &target}), [pn, tn, self, n] {
    const T g = self->grad[0] * T(2) / static_cast<T>(n);
    std::vector<T> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = g * (pn->value[i] - tn->value[i]);
    if (pn->requires_grad) detail::accum_grad(pn.get(), d.data(), n);
    if (tn->requires_grad) detail::accum_grad_scaled(tn.get(), d.data(), n, T(-1));
  });
}

template <class T>
TensorT<T> weighted_mse(const TensorT<T>& pred, const TensorT<T>& target,
                        const std::vector<T>& row_weights) {
  require_same_shape("weighted_mse", pred, target);
  if (pred.rank() < 1 || pred.dim(0) != row_weights.size()) {
    throw ShapeError("weighted_mse: weights must match the leading dim");
  }
  const std::size_t rows = pred.dim(0);
  const std::size_t per = pred.numel() / rows;
  const std::size_t n = pred.numel();
  auto out = new_node<T>(Shape{1});
  const auto pv = pred.data(), tv = target.data();
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double wacc = 0.0;
    for (std::size_t j = 0; j < per; ++j) {
      double dlt =
          static_cast<double>(pv[r * per + j]) - static_cast<double>(tv[r * per + j]);
      wacc += dlt * dlt;
    }
    acc += static_cast<double>(row_weights[r]) * wacc;
  }
  out->value[0] = static_cast<T>(acc / static_cast<double>(n));
  auto pn = pred.node(), tn = target.node();
  Node<T>* self = out.get();
  return finish<T>("weighted_mse", out, tracking<T>({&pred, &target}),
                   [pn, tn, self, row_weights, rows, per, n] {
                     const T g = self->grad[0] * T(2) / static_cast<T>(n);
                     std::vector<T> d(n);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T wg = g * row_weights[r];
                       for (std::size_t j = 0; j < per; ++j) {
                         const std::size_t i = r * per + j;
                         d[i] = wg * (pn->value[i] - tn->value[i]);
                       }
                     }
                     if (pn->requires_grad) detail::accum_grad(pn.get(), d.data(), n);
                     if (tn->requires_grad) detail::accum_grad_scaled(tn.get(), d.data(), n, T(-1));
                   });
}

// ---- structural ops ---------------------------------------------------------

template <class T>
TensorT<T> detach(const TensorT<T>& x) {
  auto out = new_node<T>(x.shape());
  out->value.assign(x.data().begin(), x.data().end());
  return TensorT<T>(out);
}

template <class T>
TensorT<T> straight_through(const TensorT<T>& x, std::vector<T> values) {
  if (values.size() != x.numel()) throw ShapeError("straight_through: value length mismatch");
  auto out = new_node<T>(x.shape());
  out->value = std::move(values);
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("straight_through", out, tracking<T>({&x}), [xn, self] {
    detail::accum_grad(xn.get(), self->grad.data(), self->grad.size());
  });
}

template <class T>
TensorT<T> slice_seq(const TensorT<T>& x, std::size_t i0, std::size_t i1) {
  if (x.rank() != 3) throw ShapeError("slice_seq: expected [B, s, d]");
  const std::size_t B = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (i0 >= i1 || i1 > s) throw UsageError("slice_seq: bad range");
  const std::size_t sl = i1 - i0;
  auto out = new_node<T>(Shape{B, sl, d});
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    std::memcpy(out->value.data() + b * sl * d, xv.data() + (b * s + i0) * d, sl * d * sizeof(T));
  }
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("slice_seq", out, tracking<T>({&x}), [xn, self, B, s, d, i0, sl] {
    auto dst = detail::grad_dest(xn.get());
    for (std::size_t b = 0; b < B; ++b) {
      T* row = dst.data() + (b * s + i0) * d;
      const T* g = self->grad.data() + b * sl * d;
      for (std::size_t i = 0; i < sl * d; ++i) row[i] += g[i];
    }
  });
}

template <class T>
TensorT<T> concat_seq(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_seq: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), sa = a.dim(1), sb = b.dim(1), d = a.dim(2);
  auto out = new_node<T>(Shape{B, sa + sb, d});
  const auto av = a.data(), bv = b.data();
  for (std::size_t bi = 0; bi < B; ++bi) {
    std::memcpy(out->value.data() + bi * (sa + sb) * d, av.data() + bi * sa * d,
                sa * d * sizeof(T));
    std::memcpy(out->value.data() + (bi * (sa + sb) + sa) * d, bv.data() + bi * sb * d,
                sb * d * sizeof(T));
  }
  auto an = a.node(), bn = b.node();
  Node<T>* self = out.get();
  return finish<T>("concat_seq", out, tracking<T>({&a, &b}), [an, bn, self, B, sa, sb, d] {
    if (an->requires_grad) {
      std::vector<T> da(B * sa * d);
      for (std::size_t bi = 0; bi < B; ++bi)
        std::memcpy(da.data() + bi * sa * d, self->grad.data() + bi * (sa + sb) * d,
                    sa * d * sizeof(T));
      detail::accum_grad(an.get(), da.data(), da.size());
    }
    if (bn->requires_grad) {
      std::vector<T> db(B * sb * d);
      for (std::size_t bi = 0; bi < B; ++bi)
        std::memcpy(db.data() + bi * sb * d, self->grad.data() + (bi * (sa + sb) + sa) * d,
                    sb * d * sizeof(T));
      detail::accum_grad(bn.get(), db.data(), db.size());
    }
  });
}

template <class T>
TensorT<T> broadcast_seq(const TensorT<T>& v, std::size_t s) {
  if (v.rank() != 2) throw ShapeError("broadcast_seq: expected [B, d]");
  const std::size_t B = v.dim(0), d = v.dim(1);
  auto out = new_node<T>(Shape{B, s, d});
  const auto vv = v.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < s; ++i)
      std::memcpy(out->value.data() + (b * s + i) * d, vv.data() + b * d, d * sizeof(T));
  auto vn = v.node();
  Node<T>* self = out.get();
  return finish<T>("broadcast_seq", out, tracking<T>({&v}), [vn, self, B, s, d] {
    std::vector<T> dv(B * d, T(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < s; ++i) {
        const T* g = self->grad.data() + (b * s + i) * d;
        for (std::size_t j = 0; j < d; ++j) dv[b * d + j] += g[j];
      }
    detail::accum_grad(vn.get(), dv.data(), dv.size());
  });
}

template <class T>
TensorT<T> select_rows(const TensorT<T>& x, const TensorT<T>& alt,
                       const std::vector<std::uint8_t>& use_alt) {
  if (x.rank() != 2 || alt.rank() != 1 || alt.dim(0) != x.dim(1)) {
    throw ShapeError("select_rows: " + shape_str(x.shape()) + " vs " + shape_str(alt.shape()));
  }
  const std::size_t B = x.dim(0), d = x.dim(1);
  if (use_alt.size() != B) throw ShapeError("select_rows: flag count != rows");
  auto out = new_node<T>(x.shape());
  const auto xv = x.data(), av = alt.data();
  for (std::size_t b = 0; b < B; ++b) {
    const T* src = use_alt[b] ? av.data() : xv.data() + b * d;
    std::memcpy(out->value.data() + b * d, src, d * sizeof(T));
  }
  auto xn = x.node(), an = alt.node();
  Node<T>* self = out.get();
  return finish<T>("select_rows", out, tracking<T>({&x, &alt}), [xn, an, self, use_alt, B, d] {
    if (xn->requires_grad) {
      std::vector<T> dx(B * d, T(0));
      for (std::size_t b = 0; b < B; ++b) {
        if (use_alt[b]) continue;
        std::memcpy(dx.data() + b * d, self->grad.data() + b * d, d * sizeof(T));
      }
      detail::accum_grad(xn.get(), dx.data(), dx.size());
    }
    if (an->requires_grad) {
      std::vector<T> da(d, T(0));
      for (std::size_t b = 0; b < B; ++b) {
        if (!use_alt[b]) continue;
        const T* g = self->grad.data() + b * d;
        for (std::size_t j = 0; j < d; ++j) da[j] += g[j];
      }
      detail::accum_grad(an.get(), da.data(), d);
    }
  });
}

template <class T>
TensorT<T> modulate(const TensorT<T>& x, const TensorT<T>& scale, const TensorT<T>& shift) {
  if (x.rank() != 3 || scale.rank() != 2 || shift.rank() != 2 || scale.dim(0) != x.dim(0) ||
      scale.dim(1) != x.dim(2) || shift.shape() != scale.shape()) {
    throw ShapeError("modulate: incompatible shapes");
  }
  const std::size_t B = x.dim(0), s = x.dim(1), d = x.dim(2);
  auto out = new_node<T>(x.shape());
  const auto xv = x.data(), sv = scale.data(), hv = shift.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < s; ++i) {
      const T* xr = xv.data() + (b * s + i) * d;
      T* o = out->value.data() + (b * s + i) * d;
      for (std::size_t j = 0; j < d; ++j)
        o[j] = xr[j] * (T(1) + sv[b * d + j]) + hv[b * d + j];
    }
  auto xn = x.node(), sn = scale.node(), hn = shift.node();
  Node<T>* self = out.get();
  return finish<T>("modulate", out, tracking<T>({&x, &scale, &shift}), [xn, sn, hn, self, B, s, d] {
    if (xn->requires_grad) {
      std::vector<T> dx(B * s * d);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t off = (b * s + i) * d;
          for (std::size_t j = 0; j < d; ++j)
            dx[off + j] = self->grad[off + j] * (T(1) + sn->value[b * d + j]);
        }
      detail::accum_grad(xn.get(), dx.data(), dx.size());
    }
    if (sn->requires_grad || hn->requires_grad) {
      std::vector<T> ds(B * d, T(0)), dh(B * d, T(0));
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t off = (b * s + i) * d;
          for (std::size_t j = 0; j < d; ++j) {
            ds[b * d + j] += self->grad[off + j] * xn->value[off + j];
            dh[b * d + j] += self->grad[off + j];
          }
        }
      if (sn->requires_grad) detail::accum_grad(sn.get(), ds.data(), ds.size());
      if (hn->requires_grad) detail::accum_grad(hn.get(), dh.data(), dh.size());
    }
  });
}

template <class T>
TensorT<T> gate_mul(const TensorT<T>& x, const TensorT<T>& gate) {
  if (x.rank() != 3 || gate.rank() != 2 || gate.dim(0) != x.dim(0) || gate.dim(1) != x.dim(2)) {
    throw ShapeError("gate_mul: incompatible shapes");
  }
  const std::size_t B = x.dim(0), s = x.dim(1), d = x.dim(2);
  auto out = new_node<T>(x.shape());
  const auto xv = x.data(), gv = gate.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < s; ++i) {
      const std::size_t off = (b * s + i) * d;
      for (std::size_t j = 0; j < d; ++j) out->value[off + j] = xv[off + j] * gv[b * d + j];
    }
  auto xn = x.node(), gn = gate.node();
  Node<T>* self = out.get();
  return finish<T>("gate_mul", out, tracking<T>({&x, &gate}), [xn, gn, self, B, s, d] {
    if (xn->requires_grad) {
      std::vector<T> dx(B * s * d);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t off = (b * s + i) * d;
          for (std::size_t j = 0; j < d; ++j)
            dx[off + j] = self->grad[off + j] * gn->value[b * d + j];
        }
      detail::accum_grad(xn.get(), dx.data(), dx.size());
    }
    if (gn->requires_grad) {
      std::vector<T> dg(B * d, T(0));
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < s; ++i) {
          const std::size_t off = (b * s + i) * d;
          for (std::size_t j = 0; j < d; ++j) dg[b * d + j] += self->grad[off + j] * xn->value[off + j];
        }
      detail::accum_grad(gn.get(), dg.data(), dg.size());
    }
  });
}

template <class T>
std::vector<TensorT<T>> split_cols(const TensorT<T>& x, std::size_t parts) {
  if (x.rank() < 1 || x.shape().back() % parts != 0) {
    throw ShapeError("split_cols: last dim not divisible by parts");
  }
  const std::size_t cols = x.shape().back();
  const std::size_t w = cols / parts;
  const std::size_t rows = x.numel() / cols;
  Shape part_shape = x.shape();
  part_shape.back() = w;
  std::vector<TensorT<T>> outs;
  const auto xv = x.data();
  for (std::size_t p = 0; p < parts; ++p) {
    auto out = new_node<T>(part_shape);
    for (std::size_t r = 0; r < rows; ++r)
      std::memcpy(out->value.data() + r * w, xv.data() + r * cols + p * w, w * sizeof(T));
    auto xn = x.node();
    Node<T>* self = out.get();
    outs.push_back(finish<T>("split_cols", out, tracking<T>({&x}), [xn, self, rows, cols, w, p] {
      auto dst = detail::grad_dest(xn.get());
      for (std::size_t r = 0; r < rows; ++r) {
        T* row = dst.data() + r * cols + p * w;
        const T* g = self->grad.data() + r * w;
        for (std::size_t j = 0; j < w; ++j) row[j] += g[j];
      }
    }));
  }
  return outs;
}

template <class T>
TensorT<T> kl_penalty(const TensorT<T>& mu, const TensorT<T>& logvar) {
  require_same_shape("kl_penalty", mu, logvar);
  const std::size_t n = mu.numel();
  auto out = new_node<T>(Shape{1});
  const auto mv = mu.data(), lv = logvar.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = mv[i], l = lv[i];
    acc += 0.5 * (m * m + std::exp(l) - 1.0 - l);
  }
  out->value[0] = static_cast<T>(acc / static_cast<double>(n));
  auto mn = mu.node(), ln = logvar.node();
  Node<T>* self = out.get();
  return finish<T>("kl_penalty", out, tracking<T>({&mu, &logvar}), [mn, ln, self, n] {
    const T g = self->grad[0] / static_cast<T>(n);
    std::vector<T> d(n);
    if (mn->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) d[i] = g * mn->value[i];
      detail::accum_grad(mn.get(), d.data(), n);
    }
    if (ln->requires_grad) {
      for (std::size_t i = 0; i < n; ++i)
        d[i] = g * T(0.5) * (std::exp(ln->value[i]) - T(1));
      detail::accum_grad(ln.get(), d.data(), n);
    }
  });
}

// ---- conv ----------------------------------------------------------------

namespace {

template <class T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            T* cols) {
  // cols[(oy*Wo+ox), (c*kh+dy)*kw+dx]
  const std::size_t K = C * kh * kw;
  for (std::size_t oy = 0; oy < Ho; ++oy) {
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      T* dst = cols + (oy * Wo + ox) * K;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t dy = 0; dy < kh; ++dy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + dy) -
                                    static_cast<std::ptrdiff_t>(pad);
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + dx) -
                                      static_cast<std::ptrdiff_t>(pad);
            T v = T(0);
            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(H) && ix >= 0 &&
                ix < static_cast<std::ptrdiff_t>(W)) {
              v = x[(c * H + iy) * W + ix];
            }
            dst[(c * kh + dy) * kw + dx] = v;
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho,
                std::size_t Wo, T* x) {
  const std::size_t K = C * kh * kw;
  for (std::size_t oy = 0; oy < Ho; ++oy) {
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      const T* src = cols + (oy * Wo + ox) * K;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t dy = 0; dy < kh; ++dy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + dy) -
                                    static_cast<std::ptrdiff_t>(pad);
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + dx) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(H) && ix >= 0 &&
                ix < static_cast<std::ptrdiff_t>(W)) {
              x[(c * H + iy) * W + ix] += src[(c * kh + dy) * kw + dx];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: x [B,C,H,W], w [Co,C,kh,kw]");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) throw ShapeError("conv2d: channel mismatch");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co)) throw ShapeError("conv2d: bias");
  if (H + 2 * pad < kh || W + 2 * pad < kw) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  const std::size_t K = C * kh * kw;
  auto out = new_node<T>(Shape{B, Co, Ho, Wo});
  auto wt = transpose_mat(Co, K, w.data().data());  // [K, Co]
  std::vector<T> cols(Ho * Wo * K), om(Ho * Wo * Co);
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    im2col(xv.data() + b * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
    gemm_nn(Ho * Wo, Co, K, cols.data(), wt.data(), om.data(), false);
    T* ob = out->value.data() + b * Co * Ho * Wo;
    for (std::size_t hwi = 0; hwi < Ho * Wo; ++hwi)
      for (std::size_t co = 0; co < Co; ++co) ob[co * Ho * Wo + hwi] = om[hwi * Co + co];
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t hwi = 0; hwi < Ho * Wo; ++hwi) ob[co * Ho * Wo + hwi] += bv[co];
    }
  }
  auto xn = x.node(), wn = w.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  Node<T>* self = out.get();
  bool track = tracking<T>({&x, &w, bias.defined() ? &bias : nullptr});
  return finish<T>("conv2d", out, track, [xn, wn, bn, self, B, C, H, W, Co, kh, kw, stride, pad,
                                          Ho, Wo, K] {
    std::vector<T> cols(Ho * Wo * K);
    std::vector<T> dom(Ho * Wo * Co), domt(Co * Ho * Wo);
    std::vector<T> dw(Co * K, T(0)), db(Co, T(0)), dcols(Ho * Wo * K);
    std::vector<T> dx(xn->requires_grad ? B * C * H * W : 0, T(0));
    for (std::size_t b = 0; b < B; ++b) {
      const T* gb = self->grad.data() + b * Co * Ho * Wo;
      // dO as [HoWo, Co] and its transpose [Co, HoWo]
      for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t hwi = 0; hwi < Ho * Wo; ++hwi) {
          dom[hwi * Co + co] = gb[co * Ho * Wo + hwi];
          domt[co * Ho * Wo + hwi] = gb[co * Ho * Wo + hwi];
        }
      if (wn->requires_grad || bn) {
        im2col(xn->value.data() + b * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
               cols.data());
        gemm_nn(Co, K, Ho * Wo, domt.data(), cols.data(), dw.data(), true);
        for (std::size_t co = 0; co < Co; ++co)
          for (std::size_t hwi = 0; hwi < Ho * Wo; ++hwi) db[co] += gb[co * Ho * Wo + hwi];
      }
      if (xn->requires_grad) {
        gemm_nn(Ho * Wo, K, Co, dom.data(), wn->value.data(), dcols.data(), false);
        col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                   dx.data() + b * C * H * W);
      }
    }
    if (wn->requires_grad) detail::accum_grad(wn.get(), dw.data(), dw.size());
    if (bn && bn->requires_grad) detail::accum_grad(bn.get(), db.data(), db.size());
    if (xn->requires_grad) detail::accum_grad(xn.get(), dx.data(), dx.size());
  });
}

template <class T>
TensorT<T> upsample_nearest2(const TensorT<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2: expected [B,C,H,W]");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto out = new_node<T>(Shape{B, C, 2 * H, 2 * W});
  const auto xv = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* in = xv.data() + bc * H * W;
    T* o = out->value.data() + bc * 4 * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const T v = in[y * W + xx];
        o[(2 * y) * 2 * W + 2 * xx] = v;
        o[(2 * y) * 2 * W + 2 * xx + 1] = v;
        o[(2 * y + 1) * 2 * W + 2 * xx] = v;
        o[(2 * y + 1) * 2 * W + 2 * xx + 1] = v;
      }
  }
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("upsample_nearest2", out, tracking<T>({&x}), [xn, self, B, C, H, W] {
    std::vector<T> dx(B * C * H * W);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const T* g = self->grad.data() + bc * 4 * H * W;
      T* o = dx.data() + bc * H * W;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          o[y * W + xx] = g[(2 * y) * 2 * W + 2 * xx] + g[(2 * y) * 2 * W + 2 * xx + 1] +
                          g[(2 * y + 1) * 2 * W + 2 * xx] + g[(2 * y + 1) * 2 * W + 2 * xx + 1];
        }
    }
    detail::accum_grad(xn.get(), dx.data(), dx.size());
  });
}

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: element count mismatch");
  auto out = new_node<T>(shape);
  const auto xv = x.data();
  std::copy(xv.begin(), xv.end(), out->value.begin());
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("reshape", out, tracking<T>({&x}), [xn, self] {
    detail::accum_grad(xn.get(), self->grad.data(), self->grad.size());
  });
}

template <class T>
TensorT<T> nchw_to_nsc(const TensorT<T>& x) {
  if (x.rank() != 4) throw ShapeError("nchw_to_nsc: expected [B,C,H,W]");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto out = new_node<T>(Shape{B, HW, C});
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* in = xv.data() + (b * C + c) * HW;
      T* o = out->value.data() + b * HW * C + c;
      for (std::size_t p = 0; p < HW; ++p) o[p * C] = in[p];
    }
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("nchw_to_nsc", out, tracking<T>({&x}), [xn, self, B, C, HW] {
    std::vector<T> dx(B * C * HW);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* g = self->grad.data() + b * HW * C + c;
        T* o = dx.data() + (b * C + c) * HW;
        for (std::size_t p = 0; p < HW; ++p) o[p] = g[p * C];
      }
    detail::accum_grad(xn.get(), dx.data(), dx.size());
  });
}

template <class T>
TensorT<T> nsc_to_nchw(const TensorT<T>& x, std::size_t h, std::size_t w) {
  if (x.rank() != 3) throw ShapeError("nsc_to_nchw: expected [B,S,C]");
  if (x.dim(1) != h * w) throw ShapeError("nsc_to_nchw: S != h*w");
  const std::size_t B = x.dim(0), HW = h * w, C = x.dim(2);
  auto out = new_node<T>(Shape{B, C, h, w});
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* in = xv.data() + b * HW * C + c;
      T* o = out->value.data() + (b * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) o[p] = in[p * C];
    }
  auto xn = x.node();
  Node<T>* self = out.get();
  return finish<T>("nsc_to_nchw", out, tracking<T>({&x}), [xn, self, B, C, HW] {
    std::vector<T> dx(B * HW * C);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* g = self->grad.data() + (b * C + c) * HW;
        T* o = dx.data() + b * HW * C + c;
        for (std::size_t p = 0; p < HW; ++p) o[p * C] = g[p];
      }
    detail::accum_grad(xn.get(), dx.data(), dx.size());
  });
}

// ---- autodiff entry points ---------------------------------------------------

template <class T>
void backward(const TensorT<T>& loss) {
  auto* tape = Tape<T>::current();
  if (!tape) throw UsageError("backward: no active tape");
  tape->backward(loss);
}

double grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x, double h,
                  std::size_t max_coords) {
  Tensor64 xv = x.clone();
  xv.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape<double> tape;
    Tensor64 y = f(xv);
    tape.backward(y);
    auto g = xv.grad_data();
    analytic.assign(g.begin(), g.end());
  }
  const std::size_t n = xv.numel();
  std::size_t step = 1;
  if (max_coords > 0 && n > max_coords) step = (n + max_coords - 1) / max_coords;
  double max_rel = 0.0;
  auto data = xv.data();
  for (std::size_t i = 0; i < n; i += step) {
    const double orig = data[i];
    data[i] = orig + h;
    const double fp = f(xv).item();
    data[i] = orig - h;
    const double fm = f(xv).item();
    data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double rel = std::fabs(a - numeric) / std::max(std::fabs(a) + std::fabs(numeric), 1e-6);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

// ---- serialization -----------------------------------------------------------

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("tensor load: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <class T>
void put_value(std::ostream& out, T v) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  if constexpr (sizeof(T) == 4) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
  } else {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
  }
}

template <class T>
T get_value(std::istream& in) {
  if constexpr (sizeof(T) == 4) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("tensor load: truncated data");
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    T v;
    std::memcpy(&v, &bits, 4);
    return v;
  } else {
    std::uint64_t bits = get_u64(in);
    T v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
}

}  // namespace

template <class T>
void save_tensor(std::ostream& out, const TensorT<T>& t) {
  out.write("LLT1", 4);
  put_u64(out, static_cast<std::uint64_t>(TensorT<T>::dtype()));
  put_u64(out, t.rank());
  for (auto d : t.shape()) put_u64(out, d);
  for (T v : t.data()) put_value(out, v);
  if (!out) throw IoError("tensor save: write failed");
}

template <class T>
void save_tensor_file(const std::string& path, const TensorT<T>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("tensor save: cannot open " + path);
  save_tensor(f, t);
}

template <class T>
TensorT<T> load_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "LLT1", 4) != 0) throw IoError("tensor load: bad magic");
  const auto dtype = static_cast<Dtype>(get_u64(in));
  if (dtype != TensorT<T>::dtype()) {
    throw IoError("tensor load: dtype mismatch (stored code " +
                  std::to_string(static_cast<std::uint64_t>(dtype)) + ")");
  }
  const std::uint64_t rank = get_u64(in);
  if (rank > 8) throw IoError("tensor load: implausible rank");
  Shape shape(rank);
  for (auto& d : shape) d = get_u64(in);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = get_value<T>(in);
  return TensorT<T>::from(std::move(shape), std::move(data));
}

template <class T>
TensorT<T> load_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("tensor load: cannot open " + path);
  return load_tensor<T>(f);
}

// ---- instantiations ----------------------------------------------------------

template class TensorT<float>;
template class TensorT<double>;
template class Tape<float>;
template class Tape<double>;

#define LATENTLAB_INSTANTIATE_OPS(T)                                                            \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                                \
  template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);                                \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                                \
  template TensorT<T> mul_scalar(const TensorT<T>&, T);                                         \
  template TensorT<T> add_bias(const TensorT<T>&, const TensorT<T>&);                           \
  template TensorT<T> add_positional(const TensorT<T>&, const TensorT<T>&);                     \
  template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);                             \
  template TensorT<T> embedding(const TensorT<T>&, const std::vector<std::int64_t>&, Shape);    \
  template TensorT<T> softmax(const TensorT<T>&);                                               \
  template TensorT<T> normalize(const TensorT<T>&, NormKind, const TensorT<T>*,                 \
                                const TensorT<T>*);                                             \
  template TensorT<T> attention(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, bool,  \
                                bool);                                                          \
  template TensorT<T> attention_packed(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, \
                                       std::size_t, bool, bool);                                \
  template TensorT<T> rotary_apply(const TensorT<T>&, std::span<const std::int64_t>,            \
                                   std::size_t);                                                \
  template TensorT<T> cross_entropy(const TensorT<T>&, const std::vector<std::int64_t>&,        \
                                    const std::vector<std::uint8_t>*);                          \
  template TensorT<T> gelu(const TensorT<T>&, GeluMode);                                        \
  template TensorT<T> silu(const TensorT<T>&);                                                  \
  template TensorT<T> sigmoid(const TensorT<T>&);                                               \
  template TensorT<T> softplus(const TensorT<T>&);                                              \
  template TensorT<T> tanh_op(const TensorT<T>&);                                               \
  template TensorT<T> exp_op(const TensorT<T>&);                                                \
  template TensorT<T> log_op(const TensorT<T>&);                                                \
  template TensorT<T> swiglu(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,           \
                             const TensorT<T>&);                                                \
  template TensorT<T> sum_all(const TensorT<T>&);                                               \
  template TensorT<T> mean_all(const TensorT<T>&);                                              \
  template TensorT<T> mean_axis0(const TensorT<T>&);                                            \
  template TensorT<T> mse_loss(const TensorT<T>&, const TensorT<T>&);                           \
  template TensorT<T> weighted_mse(const TensorT<T>&, const TensorT<T>&,                        \
                                   const std::vector<T>&);                                      \
  template TensorT<T> detach(const TensorT<T>&);                                                \
  template TensorT<T> straight_through(const TensorT<T>&, std::vector<T>);                      \
  template TensorT<T> slice_seq(const TensorT<T>&, std::size_t, std::size_t);                   \
  template TensorT<T> concat_seq(const TensorT<T>&, const TensorT<T>&);                         \
  template TensorT<T> broadcast_seq(const TensorT<T>&, std::size_t);                            \
  template TensorT<T> select_rows(const TensorT<T>&, const TensorT<T>&,                         \
                                  const std::vector<std::uint8_t>&);                            \
  template TensorT<T> modulate(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);        \
  template TensorT<T> gate_mul(const TensorT<T>&, const TensorT<T>&);                           \
  template std::vector<TensorT<T>> split_cols(const TensorT<T>&, std::size_t);                  \
  template TensorT<T> kl_penalty(const TensorT<T>&, const TensorT<T>&);                         \
  template TensorT<T> conv2d(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,           \
                             std::size_t, std::size_t);                                         \
  template TensorT<T> upsample_nearest2(const TensorT<T>&);                                     \
  template TensorT<T> reshape(const TensorT<T>&, Shape);                                        \
  template TensorT<T> nchw_to_nsc(const TensorT<T>&);                                           \
  template TensorT<T> nsc_to_nchw(const TensorT<T>&, std::size_t, std::size_t);                 \
  template void backward(const TensorT<T>&);                                                    \
  template void save_tensor(std::ostream&, const TensorT<T>&);                                  \
  template void save_tensor_file(const std::string&, const TensorT<T>&);                        \
  template TensorT<T> load_tensor<T>(std::istream&);                                            \
  template TensorT<T> load_tensor_file<T>(const std::string&);

LATENTLAB_INSTANTIATE_OPS(float)
LATENTLAB_INSTANTIATE_OPS(double)

}  // namespace latentlab
