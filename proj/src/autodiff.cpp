#include "crossmpi/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "crossmpi/fft.hpp"

namespace crossmpi {

// ---------------------------------------------------------------------------
// Tape

const Tensor& Gradients::of(const Var& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) throw std::invalid_argument("Gradients::of: not a tracked leaf of this tape");
  return it->second;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, true, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, true, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool any = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw std::invalid_argument("Tape::record: operand belongs to another tape");
    any = any || v.tracked();
  }
  nodes_.push_back(Node{std::move(value), any, false, any ? std::move(backward) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor* Tape::grad_slot(int id) {
  const auto i = static_cast<std::size_t>(id);
  if (!nodes_[i].tracked) return nullptr;
  if (grads_[i].shape() != nodes_[i].value.shape() || grads_[i].size() != nodes_[i].value.size()) {
    grads_[i] = Tensor(nodes_[i].value.shape(), 0.0);
  }
  return &grads_[i];
}

Gradients Tape::backward(const Var& root) {
  if (&root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (root.value().size() != 1 || root.value().rank() != 0) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.tracked()) throw std::invalid_argument("backward: root is not tracked");

  grads_.assign(nodes_.size(), Tensor());
  grad_slot(root.id())->storage()[0] = 1.0;

  for (int i = root.id(); i >= 0; --i) {
    const auto u = static_cast<std::size_t>(i);
    if (!nodes_[u].tracked || grads_[u].size() != nodes_[u].value.size()) continue;
    if (nodes_[u].backward) {
      // Closures only touch slots of earlier nodes; grads_ never reallocates here.
      const Tensor& g = grads_[u];
      nodes_[u].backward(*this, g);
    }
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].leaf || !nodes_[i].tracked) continue;
    if (grads_[i].size() == nodes_[i].value.size() && grads_[i].shape() == nodes_[i].value.shape()) {
      out.grads_.emplace(static_cast<int>(i), std::move(grads_[i]));
    } else {
      out.grads_.emplace(static_cast<int>(i), Tensor(nodes_[i].value.shape(), 0.0));
    }
  }
  grads_.clear();
  return out;
}

// ---------------------------------------------------------------------------
// helpers

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

MapC as_mat(const Tensor& t) {
  return MapC(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}
MapM as_mat(Tensor& t) {
  return MapM(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

Tape& common_tape(const char* op, std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw std::invalid_argument(std::string(op) + ": invalid operand");
    if (t && t != &v.tape()) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
    t = &v.tape();
  }
  return *t;
}

void require_rank(const char* op, const Var& v, std::size_t rank) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(v.shape()));
  }
}

Shape strip_leading_ones(Shape s) {
  while (!s.empty() && s.front() == 1) s.erase(s.begin());
  return s;
}

bool is_suffix(const Shape& small, const Shape& big) {
  return small.size() <= big.size() && std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct Broadcast {
  Shape out;
  std::size_t na;
  std::size_t nb;
};

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  const Shape sa = strip_leading_ones(a), sb = strip_leading_ones(b);
  const std::size_t na = shape_numel(a), nb = shape_numel(b);
  if (na >= nb && is_suffix(sb, sa)) {
    return {(na == nb && b.size() > a.size()) ? b : a, na, nb};
  }
  if (nb > na && is_suffix(sa, sb)) return {b, na, nb};
  throw ShapeError(op, a, b);
}

/// Adds g (of output size) into slot, folding broadcast repeats.
void accumulate_folded(Tensor* slot, const Tensor& g) {
  if (!slot) return;
  const std::size_t n = slot->size();
  auto& dst = slot->storage();
  const auto& src = g.storage();
  if (n == src.size()) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  } else if (src.size() % n == 0) {
    for (std::size_t base = 0; base < src.size(); base += n)
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[base + j];
  } else {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i % n] += src[i];
  }
}

template <class Fn>
Tensor elementwise(const Broadcast& bc, const Tensor& a, const Tensor& b, Fn fn) {
  Tensor out(bc.out);
  const std::size_t n = out.size();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  if (bc.na == n && bc.nb == n) {
    for (std::size_t i = 0; i < n; ++i) po[i] = fn(pa[i], pb[i]);
  } else if (bc.na == n) {
    for (std::size_t base = 0; base < n; base += bc.nb)
      for (std::size_t j = 0; j < bc.nb; ++j) po[base + j] = fn(pa[base + j], pb[j]);
  } else if (bc.nb == n) {
    for (std::size_t base = 0; base < n; base += bc.na)
      for (std::size_t j = 0; j < bc.na; ++j) po[base + j] = fn(pa[j], pb[base + j]);
  } else {
    for (std::size_t i = 0; i < n; ++i) po[i] = fn(pa[i % bc.na], pb[i % bc.nb]);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape("add", {a, b});
  const auto bc = broadcast("add", a.shape(), b.shape());
  Tensor out = elementwise(bc, a.value(), b.value(), [](double x, double y) { return x + y; });
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    accumulate_folded(tp.grad_slot(ia), g);
    accumulate_folded(tp.grad_slot(ib), g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape("sub", {a, b});
  const auto bc = broadcast("sub", a.shape(), b.shape());
  Tensor out = elementwise(bc, a.value(), b.value(), [](double x, double y) { return x - y; });
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    accumulate_folded(tp.grad_slot(ia), g);
    if (Tensor* sb = tp.grad_slot(ib)) {
      Tensor neg = g;
      for (auto& v : neg.storage()) v = -v;
      accumulate_folded(sb, neg);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = common_tape("mul", {a, b});
  const auto bc = broadcast("mul", a.shape(), b.shape());
  Tensor out = elementwise(bc, a.value(), b.value(), [](double x, double y) { return x * y; });
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, bc](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    const std::size_t n = g.size();
    if (Tensor* sa = tp.grad_slot(ia)) {
      for (std::size_t i = 0; i < n; ++i) (*sa)[i % bc.na] += g[i] * bv[i % bc.nb];
    }
    if (Tensor* sb = tp.grad_slot(ib)) {
      for (std::size_t i = 0; i < n; ++i) (*sb)[i % bc.nb] += g[i] * av[i % bc.na];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape& tp, const Tensor& g) {
    Tensor* sa = tp.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*sa)[i] += s * g[i];
  });
}

Var shift(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v += c;
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& tp, const Tensor& g) {
    accumulate_folded(tp.grad_slot(ia), g);
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0 ? v : 0.0;
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ix);
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0) (*sx)[i] += g[i];
  });
}

namespace {
constexpr double kGeluC = 0.044715;
const double kGeluK = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = 0.5 * v * (1.0 + std::tanh(kGeluK * (v + kGeluC * v * v * v)));
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ix);
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(kGeluK * (v + kGeluC * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluK * (1.0 + 3.0 * kGeluC * v * v);
      (*sx)[i] += g[i] * d;
    }
  });
}

Var clamp(const Var& x, double lo, double hi) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = std::clamp(v, lo, hi);
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, lo, hi](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ix);
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > lo && xv[i] < hi) (*sx)[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape("matmul", {a, b});
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.shape()[1] != b.shape()[0]) throw ShapeError("matmul", a.shape(), b.shape());
  Tensor out({a.shape()[0], b.shape()[1]});
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value());
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    if (Tensor* sa = tp.grad_slot(ia)) as_mat(*sa).noalias() += as_mat(g) * as_mat(tp.value(ib)).transpose();
    if (Tensor* sb = tp.grad_slot(ib)) as_mat(*sb).noalias() += as_mat(tp.value(ia)).transpose() * as_mat(g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = common_tape("matmul_nt", {a, b});
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  if (a.shape()[1] != b.shape()[1]) throw ShapeError("matmul_nt", a.shape(), b.shape());
  Tensor out({a.shape()[0], b.shape()[0]});
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value()).transpose();
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    if (Tensor* sa = tp.grad_slot(ia)) as_mat(*sa).noalias() += as_mat(g) * as_mat(tp.value(ib));
    if (Tensor* sb = tp.grad_slot(ib)) as_mat(*sb).noalias() += as_mat(g).transpose() * as_mat(tp.value(ia));
  });
}

Var softmax(const Var& x, bool causal) {
  require_rank("softmax", x, 2);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (causal && rows > cols) throw ShapeError("softmax(causal): more rows than columns", x.shape(), x.shape());
  // Causal rows align with the last `rows` columns.
  const std::size_t offset = cols - rows;
  Tensor out({rows, cols}, 0.0);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t lim = causal ? i + offset + 1 : cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, xv(i, j));
    double s = 0;
    for (std::size_t j = 0; j < lim; ++j) {
      out(i, j) = std::exp(xv(i, j) - mx);
      s += out(i, j);
    }
    for (std::size_t j = 0; j < lim; ++j) out(i, j) /= s;
  }
  const int ix = x.id();
  const int iy = static_cast<int>(x.tape().size());
  return x.tape().record(std::move(out), {x}, [ix, iy, rows, cols](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(iy);
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < cols; ++j) (*sx)(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

Var masked_softmax(const Var& x, const std::vector<unsigned char>& mask) {
  require_rank("masked_softmax", x, 2);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (mask.size() != rows * cols) throw ShapeError("masked_softmax: mask size does not match " + shape_str(x.shape()));
  Tensor out({rows, cols}, 0.0);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < rows; ++i) {
    const unsigned char* m = mask.data() + i * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j)
      if (m[j]) mx = std::max(mx, xv(i, j));
    if (!std::isfinite(mx)) throw std::invalid_argument("masked_softmax: row " + std::to_string(i) + " fully masked");
    double s = 0;
    for (std::size_t j = 0; j < cols; ++j)
      if (m[j]) s += out(i, j) = std::exp(xv(i, j) - mx);
    for (std::size_t j = 0; j < cols; ++j) out(i, j) /= s;
  }
  const int ix = x.id();
  const int iy = static_cast<int>(x.tape().size());
  return x.tape().record(std::move(out), {x}, [ix, iy, rows, cols](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(iy);
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < cols; ++j) (*sx)(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

std::vector<unsigned char> causal_mask(std::size_t t) {
  std::vector<unsigned char> m(t * t, 0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i * t + j] = 1;
  return m;
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads, std::vector<unsigned char> mask) {
  Tape& t = common_tape("multi_head_attention", {q, k, v});
  require_rank("multi_head_attention", q, 2);
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw ShapeError("multi_head_attention", q.shape(), k.shape());
  const std::size_t T = q.shape()[0], d = q.shape()[1];
  if (heads < 1 || d % static_cast<std::size_t>(heads) != 0)
    throw std::invalid_argument("multi_head_attention: width not divisible by head count");
  if (!mask.empty() && mask.size() != T * T) throw ShapeError("multi_head_attention: mask size does not match sequence");
  const auto H = static_cast<std::size_t>(heads);
  const std::size_t dh = d / H;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Ti = static_cast<Eigen::Index>(T), dhi = static_cast<Eigen::Index>(dh);

  // probs[h] holds the T×T attention weights of head h.
  std::vector<RowMat> probs(H);
  Tensor out({T, d}, 0.0);
  const MapC Q = as_mat(q.value()), K = as_mat(k.value()), V = as_mat(v.value());
  MapM O = as_mat(out);
  for (std::size_t h = 0; h < H; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h * dh);
    RowMat S = (Q.middleCols(c0, dhi) * K.middleCols(c0, dhi).transpose()) * inv;
    for (std::size_t i = 0; i < T; ++i) {
      const unsigned char* m = mask.empty() ? nullptr : mask.data() + i * T;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < T; ++j)
        if (!m || m[j]) mx = std::max(mx, S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      if (!std::isfinite(mx)) throw std::invalid_argument("multi_head_attention: row " + std::to_string(i) + " fully masked");
      double sum = 0;
      for (std::size_t j = 0; j < T; ++j) {
        double& e = S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        e = (!m || m[j]) ? std::exp(e - mx) : 0.0;
        sum += e;
      }
      S.row(static_cast<Eigen::Index>(i)) /= sum;
    }
    O.middleCols(c0, dhi).noalias() = S * V.middleCols(c0, dhi);
    probs[h] = std::move(S);
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return t.record(std::move(out), {q, k, v},
                  [iq, ik, iv, H, dhi, Ti, inv, probs = std::move(probs)](Tape& tp, const Tensor& g) {
                    const MapC Qv = as_mat(tp.value(iq)), Kv = as_mat(tp.value(ik)), Vv = as_mat(tp.value(iv));
                    const MapC G = as_mat(g);
                    Tensor* sq = tp.grad_slot(iq);
                    Tensor* sk = tp.grad_slot(ik);
                    Tensor* sv = tp.grad_slot(iv);
                    for (std::size_t h = 0; h < H; ++h) {
                      const auto c0 = static_cast<Eigen::Index>(h) * dhi;
                      const RowMat& P = probs[h];
                      const auto Gh = G.middleCols(c0, dhi);
                      if (sv) as_mat(*sv).middleCols(c0, dhi).noalias() += P.transpose() * Gh;
                      if (!sq && !sk) continue;
                      RowMat dP = Gh * Vv.middleCols(c0, dhi).transpose();
                      const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
                      RowMat dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * inv;
                      if (sq) as_mat(*sq).middleCols(c0, dhi).noalias() += dS * Kv.middleCols(c0, dhi);
                      if (sk) as_mat(*sk).middleCols(c0, dhi).noalias() += dS.transpose() * Qv.middleCols(c0, dhi);
                    }
                    (void)Ti;
                  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  Tape& t = common_tape("layer_norm", {x, gain, bias});
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d}) throw ShapeError("layer_norm(gain)", x.shape(), gain.shape());
  if (bias.shape() != Shape{d}) throw ShapeError("layer_norm(bias)", x.shape(), bias.shape());
  const std::size_t rows = x.value().size() / d;
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain.value()[j] + bias.value()[j];
    }
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.record(std::move(out), {x, gain, bias},
                  [ix, ig, ib, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Tensor& g) {
                    const Tensor& gv = tp.value(ig);
                    if (Tensor* sg = tp.grad_slot(ig)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*sg)[i % d] += g[i] * xhat[i];
                    }
                    if (Tensor* sb = tp.grad_slot(ib)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*sb)[i % d] += g[i];
                    }
                    if (Tensor* sx = tp.grad_slot(ix)) {
                      std::vector<double> dxh(d);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double m1 = 0, m2 = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                          dxh[j] = g[r * d + j] * gv[j];
                          m1 += dxh[j];
                          m2 += dxh[j] * xhat[r * d + j];
                        }
                        m1 /= static_cast<double>(d);
                        m2 /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j)
                          (*sx)[r * d + j] += inv_std[r] * (dxh[j] - m1 - xhat[r * d + j] * m2);
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// indexing

Var embedding(const Var& table, std::span<const int> ids) {
  require_rank("embedding", table, 2);
  const std::size_t rows = table.shape()[0], d = table.shape()[1];
  std::vector<std::size_t> index;
  index.reserve(ids.size() * d);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(rows) +
                              " rows");
    }
    for (std::size_t j = 0; j < d; ++j) index.push_back(static_cast<std::size_t>(id) * d + j);
  }
  return gather(table, std::move(index), {ids.size(), d});
}

Var gather(const Var& x, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) throw ShapeError("gather: index count vs output shape " + shape_str(out_shape));
  const Tensor& xv = x.value();
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) throw std::out_of_range("gather: index out of range");
    out[i] = xv[index[i]];
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, index = std::move(index)](Tape& tp, const Tensor& g) {
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < index.size(); ++i) (*sx)[index[i]] += g[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_numel(shape) != x.value().size()) throw ShapeError("reshape", x.shape(), shape);
  Tensor out = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& tp, const Tensor& g) {
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) (*sx)[i] += g[i];
  });
}

Var slice_rows(const Var& x, std::size_t start, std::size_t count) {
  require_rank("slice_rows", x, 2);
  const std::size_t cols = x.shape()[1];
  if (start + count > x.shape()[0]) throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                                                     std::to_string(start + count) + ") of " + shape_str(x.shape()));
  const auto& src = x.value().storage();
  Tensor out({count, cols}, std::vector<double>(src.begin() + static_cast<std::ptrdiff_t>(start * cols),
                                                src.begin() + static_cast<std::ptrdiff_t>((start + count) * cols)));
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, start, cols](Tape& tp, const Tensor& g) {
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) (*sx)[start * cols + i] += g[i];
  });
}

Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
  require_rank("slice_cols", x, 2);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (start + count > cols) throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " +
                                             std::to_string(start + count) + ") of " + shape_str(x.shape()));
  const Tensor& xv = x.value();
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = xv(r, start + c);
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, start, rows, count](Tape& tp, const Tensor& g) {
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) (*sx)(r, start + c) += g(r, c);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
  const std::size_t cols = parts[0].shape().at(1);
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.shape()[1] != cols) throw ShapeError("concat_rows", parts[0].shape(), p.shape());
    rows += p.shape()[0];
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(data.size());
    ids.push_back(p.id());
    data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
  }
  return parts[0].tape().record(Tensor({rows, cols}, std::move(data)), parts,
                                [ids = std::move(ids), offsets = std::move(offsets)](Tape& tp, const Tensor& g) {
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (Tensor* s = tp.grad_slot(ids[k])) {
                                      for (std::size_t i = 0; i < s->size(); ++i) (*s)[i] += g[offsets[k] + i];
                                    }
                                  }
                                });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  const std::size_t rows = parts[0].shape().at(0);
  std::size_t cols = 0;
  for (const Var& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.shape()[0] != rows) throw ShapeError("concat_cols", parts[0].shape(), p.shape());
    cols += p.shape()[1];
  }
  Tensor out({rows, cols});
  std::vector<int> ids;
  std::vector<std::size_t> starts, widths;
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out(r, c0 + c) = p.value()(r, c);
    ids.push_back(p.id());
    starts.push_back(c0);
    widths.push_back(w);
    c0 += w;
  }
  return parts[0].tape().record(
      std::move(out), parts,
      [ids = std::move(ids), starts = std::move(starts), widths = std::move(widths), rows](Tape& tp, const Tensor& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (Tensor* s = tp.grad_slot(ids[k])) {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[k]; ++c) (*s)(r, c) += g(r, starts[k] + c);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(const Var& x) {
  double s = 0;
  for (double v : x.value().storage()) s += v;
  const int ix = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [ix](Tape& tp, const Tensor& g) {
    Tensor* sx = tp.grad_slot(ix);
    const double gv = g[0];
    for (auto& v : sx->storage()) v += gv;
  });
}

Var mean(const Var& x) {
  if (x.value().size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var squared_norm(const Var& x) {
  double s = 0;
  for (double v : x.value().storage()) s += v * v;
  const int ix = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [ix](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ix);
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) (*sx)[i] += 2.0 * xv[i] * g[0];
  });
}

// ---------------------------------------------------------------------------
// image ops

Var conv2d(const Var& image, const Var& kernel) {
  Tape& t = common_tape("conv2d", {image, kernel});
  require_rank("conv2d", image, 3);
  require_rank("conv2d", kernel, 2);
  const std::size_t C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
  const std::size_t kh = kernel.shape()[0], kw = kernel.shape()[1];
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel sides must be odd", image.shape(), kernel.shape());
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  const Tensor& x = image.value();
  const Tensor& k = kernel.value();
  Tensor out({C, H, W}, 0.0);
  auto visit = [=](auto&& body) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t a = 0; a < kh; ++a) {
            const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + a) - ph;
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t b = 0; b < kw; ++b) {
              const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + b) - pw;
              if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
              body((c * H + i) * W + j, (c * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj),
                   a * kw + b);
            }
          }
  };
  visit([&](std::size_t o, std::size_t s, std::size_t kk) { out[o] += k[kk] * x[s]; });
  const int ii = image.id(), ik = kernel.id();
  return t.record(std::move(out), {image, kernel}, [ii, ik, visit](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ii);
    const Tensor& kv = tp.value(ik);
    Tensor* sx = tp.grad_slot(ii);
    Tensor* sk = tp.grad_slot(ik);
    visit([&](std::size_t o, std::size_t s, std::size_t kk) {
      if (sx) (*sx)[s] += g[o] * kv[kk];
      if (sk) (*sk)[kk] += g[o] * xv[s];
    });
  });
}

Var grid_sample(const Var& image, const Tensor& grid) {
  require_rank("grid_sample", image, 3);
  if (grid.rank() != 3 || grid.dim(2) != 2) throw ShapeError("grid_sample(grid)", image.shape(), grid.shape());
  const std::size_t C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
  const std::size_t Ho = grid.dim(0), Wo = grid.dim(1);

  struct Tap {
    std::size_t src;
    double w;
  };
  // Four taps per output location; out-of-range taps are dropped (zero fill).
  std::vector<std::array<Tap, 4>> taps(Ho * Wo);
  std::vector<unsigned char> valid(Ho * Wo * 4, 0);
  for (std::size_t p = 0; p < Ho * Wo; ++p) {
    const double sy = grid[p * 2], sx = grid[p * 2 + 1];
    const double fy0 = std::floor(sy), fx0 = std::floor(sx);
    const double fy = sy - fy0, fx = sx - fx0;
    const long y0 = static_cast<long>(fy0), x0 = static_cast<long>(fx0);
    const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const double ws[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    for (int q = 0; q < 4; ++q) {
      const bool in = ys[q] >= 0 && ys[q] < static_cast<long>(H) && xs[q] >= 0 && xs[q] < static_cast<long>(W);
      valid[p * 4 + q] = in && ws[q] != 0.0;
      taps[p][q] = {in ? static_cast<std::size_t>(ys[q]) * W + static_cast<std::size_t>(xs[q]) : 0, ws[q]};
    }
  }
  const Tensor& xv = image.value();
  Tensor out({C, Ho, Wo}, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = xv.data().data() + c * H * W;
    for (std::size_t p = 0; p < Ho * Wo; ++p) {
      double acc = 0;
      for (int q = 0; q < 4; ++q)
        if (valid[p * 4 + q]) acc += taps[p][q].w * plane[taps[p][q].src];
      out[c * Ho * Wo + p] = acc;
    }
  }
  const int ii = image.id();
  return image.tape().record(std::move(out), {image},
                             [ii, C, H, W, Ho, Wo, taps = std::move(taps), valid = std::move(valid)](Tape& tp, const Tensor& g) {
                               Tensor* sx = tp.grad_slot(ii);
                               for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t p = 0; p < Ho * Wo; ++p)
                                   for (int q = 0; q < 4; ++q)
                                     if (valid[p * 4 + q])
                                       (*sx)[c * H * W + taps[p][q].src] += taps[p][q].w * g[c * Ho * Wo + p];
                             });
}

// ---------------------------------------------------------------------------
// spectral

std::pair<Var, Var> dft2(const Var& x) {
  require_rank("dft2", x, 2);
  const std::size_t h = x.shape()[0], w = x.shape()[1];
  Spectrum s = dft2(x.value());
  std::vector<double> stacked(s.re.storage().begin(), s.re.storage().end());
  stacked.insert(stacked.end(), s.im.storage().begin(), s.im.storage().end());
  const int ix = x.id();
  Var both = x.tape().record(Tensor({2, h * w}, std::move(stacked)), {x}, [ix, h, w](Tape& tp, const Tensor& g) {
    const auto& gs = g.storage();
    Tensor gre({h, w}, std::vector<double>(gs.begin(), gs.begin() + static_cast<std::ptrdiff_t>(h * w)));
    Tensor gim({h, w}, std::vector<double>(gs.begin() + static_cast<std::ptrdiff_t>(h * w), gs.end()));
    // Adjoint of a complex-linear map from real input: Re(Fᴴ g).
    Spectrum back = dft2_adjoint(gre, gim);
    Tensor* sx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < h * w; ++i) (*sx)[i] += back.re[i];
  });
  return {reshape(slice_rows(both, 0, 1), {h, w}), reshape(slice_rows(both, 1, 1), {h, w})};
}

Var complex_abs(const Var& re, const Var& im) {
  Tape& t = common_tape("complex_abs", {re, im});
  if (re.shape() != im.shape()) throw ShapeError("complex_abs", re.shape(), im.shape());
  Tensor out(re.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::hypot(re.value()[i], im.value()[i]);
  const int ir = re.id(), ii = im.id();
  const int io = static_cast<int>(t.size());
  return t.record(std::move(out), {re, im}, [ir, ii, io](Tape& tp, const Tensor& g) {
    const Tensor& m = tp.value(io);
    const Tensor& rv = tp.value(ir);
    const Tensor& iv = tp.value(ii);
    Tensor* sr = tp.grad_slot(ir);
    Tensor* si = tp.grad_slot(ii);
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (m[k] == 0.0) continue;
      if (sr) (*sr)[k] += g[k] * rv[k] / m[k];
      if (si) (*si)[k] += g[k] * iv[k] / m[k];
    }
  });
}

// ---------------------------------------------------------------------------
// losses

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t rows = logits.shape()[0], V = logits.shape()[1];
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  const Tensor& x = logits.value();
  Tensor probs({rows, V}, 0.0);
  double loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= V) throw std::out_of_range("cross_entropy: target outside vocabulary");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, x(r, j));
    double s = 0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(x(r, j) - mx);
    const double lse = mx + std::log(s);
    loss += lse - x(r, static_cast<std::size_t>(targets[r]));
    for (std::size_t j = 0; j < V; ++j) probs(r, j) = std::exp(x(r, j) - lse);
  }
  const int il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape().record(Tensor::scalar(loss), {logits},
                              [il, rows, V, tg = std::move(tg), probs = std::move(probs)](Tape& tp, const Tensor& g) {
                                Tensor* sl = tp.grad_slot(il);
                                for (std::size_t r = 0; r < rows; ++r) {
                                  if (tg[r] < 0) continue;
                                  for (std::size_t j = 0; j < V; ++j) (*sl)(r, j) += g[0] * probs(r, j);
                                  (*sl)(r, static_cast<std::size_t>(tg[r])) -= g[0];
                                }
                              });
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& point, double step) {
  if (!(step > 0)) throw std::invalid_argument("grad_check: step must be positive");
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.variable(point);
    Var y = f(tape, x);
    if (!std::isfinite(y.value().item())) throw std::domain_error("grad_check: non-finite value at the base point");
    analytic = tape.backward(y).of(x);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    Var x = tape.constant(p);
    const double v = f(tape, x).value().item();
    if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite value during differencing");
    return v;
  };
  double worst = 0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = eval(probe);
    probe[i] = point[i] - step;
    const double down = eval(probe);
    probe[i] = point[i];
    const double numeric = (up - down) / (2 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace crossmpi
