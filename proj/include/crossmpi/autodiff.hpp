#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crossmpi/tensor.hpp"

namespace crossmpi {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool tracked() const;
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Leaf gradients produced by Tape::backward.
class Gradients {
 public:
  const Tensor& of(const Var& leaf) const;
  bool contains(const Var& leaf) const { return grads_.count(leaf.id()) != 0; }

 private:
  friend class Tape;
  std::unordered_map<int, Tensor> grads_;
};

/// Ordered record of primitive operations. Nodes are appended in evaluation
/// order, so the reverse of insertion order is a valid reverse topological
/// order. A tape is single-threaded; distinct tapes share nothing.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  /// Appends an op output. It is tracked iff any input is tracked; untracked
  /// outputs drop the backward closure.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  /// Reverse sweep from a tracked scalar root. Every tracked leaf receives a
  /// gradient (zero when the root does not depend on it).
  Gradients backward(const Var& root);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool tracked(int id) const { return nodes_[static_cast<std::size_t>(id)].tracked; }

  /// Gradient accumulator for node `id`, or nullptr when the node is untracked.
  /// Only meaningful inside a backward closure.
  Tensor* grad_slot(int id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool tracked = false;
    bool leaf = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::tracked() const { return tape_->tracked(id_); }

// Primitive operations. Broadcasting: for the binary elementwise ops one
// operand may be smaller, provided its shape equals the trailing axes of the
// other (leading singleton axes are dropped first).

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var shift(const Var& a, double c);

Var matmul(const Var& a, const Var& b);
/// a · bᵀ
Var matmul_nt(const Var& a, const Var& b);

/// Softmax over the last axis of a 2D tensor. With `causal`, entry (i, j) is
/// masked for j > i.
Var softmax(const Var& x, bool causal = false);
/// Softmax over the last axis where only entries with mask != 0 participate.
/// Every row must allow at least one entry; blocked entries output 0.
Var masked_softmax(const Var& x, const std::vector<unsigned char>& mask);
/// Multi-head scaled dot-product attention on [T,d] projections: per head h,
/// softmax(q_h k_hᵀ / sqrt(d/heads)) v_h, heads concatenated along columns.
/// `mask` is empty (full attention), or T·T flags (row-major, nonzero =
/// attend). Use causal_mask() for the usual lower-triangular pattern.
Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads, std::vector<unsigned char> mask = {});
std::vector<unsigned char> causal_mask(std::size_t t);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var relu(const Var& x);
/// tanh approximation.
Var gelu(const Var& x);
Var clamp(const Var& x, double lo, double hi);

/// Rows of `table` selected by `ids`.
Var embedding(const Var& table, std::span<const int> ids);
/// out.flat[i] = x.flat[index[i]]; backward scatter-adds.
Var gather(const Var& x, std::vector<std::size_t> index, Shape out_shape);
Var reshape(const Var& x, Shape shape);
Var slice_rows(const Var& x, std::size_t start, std::size_t count);
Var slice_cols(const Var& x, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

Var sum(const Var& x);
Var mean(const Var& x);

/// Depthwise 2D convolution of a [C,H,W] image with a [kh,kw] kernel (odd
/// sizes), zero padded, same output size. Cross-correlation convention.
Var conv2d(const Var& image, const Var& kernel);

/// Bilinear sampling of a [C,H,W] image. `grid` is [Ho,Wo,2] holding source
/// (row, col) coordinates in pixel units, pixel centers at integers. Samples
/// outside the image read zero. The grid is not differentiated.
Var grid_sample(const Var& image, const Tensor& grid);

/// Unnormalized forward 2D DFT of an [H,W] input, returned as (real, imag).
std::pair<Var, Var> dft2(const Var& x);
/// sqrt(re² + im²) elementwise; subgradient 0 where the magnitude is 0.
Var complex_abs(const Var& re, const Var& im);

/// Sum over rows of −log softmax(logits[row])[target[row]]. Rows whose target
/// is negative are skipped.
Var cross_entropy(const Var& logits, std::span<const int> targets);

/// Sum of squares.
Var squared_norm(const Var& x);

/// Central-difference gradient check of a scalar function at `point`. Returns
/// the maximum over coordinates of |analytic − numeric| / max(|analytic|,
/// |numeric|, 1e-8). Throws std::domain_error when f is non-finite anywhere.
double grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& point, double step);

}  // namespace crossmpi
