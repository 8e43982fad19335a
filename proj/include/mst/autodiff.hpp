// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mst/attention.hpp"
#include "mst/errors.hpp"
#include "mst/mask.hpp"
#include "mst/tensor.hpp"

namespace mst {

/// Records backward rules in execution order. Intermediate tensors live in
/// the tape; leaves (parameters, inputs) are owned by the caller and must
/// outlive it.
template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Tensor<T>& make(Shape shape, bool requires_grad) {
    auto& t = nodes_.emplace_back(std::move(shape));
    t.set_requires_grad(requires_grad && record_);
    return t;
  }

  void on_backward(std::function<void()> rule) {
    if (record_) rules_.push_back(std::move(rule));
  }

  /// Seeds d(loss)/d(loss) = 1 and replays the rules in reverse.
  void backward(Tensor<T>& loss) {
    if (loss.size() != 1) throw DimensionError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    loss.ensure_grad()[0] = T(1);
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  }

  void clear() {
    rules_.clear();
    nodes_.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  bool record_;
  std::deque<Tensor<T>> nodes_;
  std::vector<std::function<void()>> rules_;
};

namespace ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
MatMap<T> mat(std::span<T> s, std::size_t r, std::size_t c) {
  return MatMap<T>(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
CMatMap<T> cmat(std::span<const T> s, std::size_t r, std::size_t c) {
  return CMatMap<T>(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename T>
bool needs_grad(const Tensor<T>& t) {
  return t.requires_grad();
}

/// Shared core for dense, masked, and transposed products:
/// y = x * W_eff or y = x * W_eff^T, W_eff = w (.) mask. The weight gradient
/// is dense (inactive positions included).
template <typename T>
Tensor<T>& linear(Tape<T>& tape, Tensor<T>& x, Tensor<T>& w, const LayerMask* mask, bool transpose_w) {
  if (w.rank() != 2) throw DimensionError("weight must be 2-D, got " + to_string(w.shape()));
  const std::size_t m = x.rows();
  const std::size_t k = x.cols();
  const std::size_t wk = transpose_w ? w.shape()[1] : w.shape()[0];
  const std::size_t n = transpose_w ? w.shape()[0] : w.shape()[1];
  if (wk != k)
    throw DimensionError("matmul: inner dimensions disagree " + to_string(x.shape()) + " * " +
                         to_string(w.shape()) + (transpose_w ? "^T" : ""));
  if (mask && (mask->rows() != w.shape()[0] || mask->cols() != w.shape()[1]))
    throw DimensionError("masked_matmul: mask shape differs from weight shape");

  std::shared_ptr<std::vector<T>> masked;
  std::span<const T> weff = w.values();
  if (mask) {
    masked = std::make_shared<std::vector<T>>(w.values().begin(), w.values().end());
    mask->apply(std::span<T>(*masked));
    weff = *masked;
  }

  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T>& out = tape.make(out_shape, x.requires_grad() || w.requires_grad());
  auto X = cmat<T>(x.values(), m, k);
  auto Y = mat<T>(out.values(), m, n);
  if (transpose_w)
    Y.noalias() = X * cmat<T>(weff, n, k).transpose();
  else
    Y.noalias() = X * cmat<T>(weff, k, n);

  if (out.requires_grad()) {
    tape.on_backward([&x, &w, &out, masked, weff, m, k, n, transpose_w] {
      if (!out.has_grad()) return;
      auto G = cmat<T>(std::span<const T>(out.grads()), m, n);
      if (x.requires_grad()) {
        auto dX = mat<T>(x.ensure_grad(), m, k);
        if (transpose_w)
          dX.noalias() += G * cmat<T>(weff, n, k);
        else
          dX.noalias() += G * cmat<T>(weff, k, n).transpose();
      }
      if (w.requires_grad()) {
        auto X = cmat<T>(std::span<const T>(x.values()), m, k);
        if (transpose_w)
          mat<T>(w.ensure_grad(), n, k).noalias() += G.transpose() * X;
        else
          mat<T>(w.ensure_grad(), k, n).noalias() += X.transpose() * G;
      }
    });
  }
  return out;
}

}  // namespace detail

/// a[m x k] * b[k x n].
template <typename T>
Tensor<T>& matmul(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b) {
  if (a.rank() != 2) throw DimensionError("matmul: left operand must be 2-D");
  return detail::linear(tape, a, b, nullptr, false);
}

/// x * (w (.) mask). Gradients reach every entry of w, masked or not.
template <typename T>
Tensor<T>& masked_matmul(Tape<T>& tape, Tensor<T>& x, Tensor<T>& w, const LayerMask& mask) {
  return detail::linear(tape, x, w, &mask, false);
}

/// x * (w (.) mask)^T with an optional mask; used for the output head.
template <typename T>
Tensor<T>& matmul_transposed(Tape<T>& tape, Tensor<T>& x, Tensor<T>& w, const LayerMask* mask = nullptr) {
  return detail::linear(tape, x, w, mask, true);
}

template <typename T>
Tensor<T>& add(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T>& out = tape.make(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (out.requires_grad()) {
    tape.on_backward([&a, &b, &out] {
      if (!out.has_grad()) return;
      auto g = out.grads();
      for (Tensor<T>* t : {&a, &b})
        if (t->requires_grad()) {
          auto d = t->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T>& mul(Tape<T>& tape, Tensor<T>& a, Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T>& out = tape.make(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (out.requires_grad()) {
    tape.on_backward([&a, &b, &out] {
      if (!out.has_grad()) return;
      auto g = out.grads();
      if (a.requires_grad()) {
        auto d = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto d = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T>& scale(Tape<T>& tape, Tensor<T>& a, T s) {
  Tensor<T>& out = tape.make(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  if (out.requires_grad()) {
    tape.on_backward([&a, &out, s] {
      if (!out.has_grad()) return;
      auto g = out.grads();
      auto d = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
    });
  }
  return out;
}

/// Scalar sum of all entries.
template <typename T>
Tensor<T>& sum(Tape<T>& tape, Tensor<T>& a) {
  Tensor<T>& out = tape.make({1}, a.requires_grad());
  T acc = 0;
  for (T v : a.values()) acc += v;
  out[0] = acc;
  if (out.requires_grad()) {
    tape.on_backward([&a, &out] {
      if (!out.has_grad()) return;
      const T g = out.grads()[0];
      for (T& d : a.ensure_grad()) d += g;
    });
  }
  return out;
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
T gelu_value(T x) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(k0 * (x + k1 * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T k0 = T(0.7978845608028654);
  constexpr T k1 = T(0.044715);
  const T th = std::tanh(k0 * (x + k1 * x * x * x));
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * k0 * (T(1) + T(3) * k1 * x * x);
}

template <typename T>
Tensor<T>& gelu(Tape<T>& tape, Tensor<T>& a) {
  Tensor<T>& out = tape.make(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(a[i]);
  if (out.requires_grad()) {
    tape.on_backward([&a, &out] {
      if (!out.has_grad()) return;
      auto g = out.grads();
      auto d = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * gelu_derivative(a[i]);
    });
  }
  return out;
}

namespace detail {

// Row softmax restricted to allowed columns; disallowed entries become exactly 0.
template <typename T>
void masked_softmax_row(const T* scores, const std::uint8_t* allowed, std::size_t cols, T* probs,
                        std::size_t row_index) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < cols; ++j)
    if (allowed[j]) mx = std::max(mx, scores[j]);
  if (mx == -std::numeric_limits<T>::infinity())
    throw DimensionError("softmax: row " + std::to_string(row_index) + " has no unmasked entries");
  T z = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    if (allowed[j]) {
      probs[j] = std::exp(scores[j] - mx);
      z += probs[j];
    } else {
      probs[j] = T(0);
    }
  }
  const T inv = T(1) / z;
  for (std::size_t j = 0; j < cols; ++j) probs[j] *= inv;
}

// dS = P (.) (dP - <dP, P>) for one row.
template <typename T>
void softmax_row_backward(const T* probs, const T* dprobs, std::size_t cols, T* dscores) {
  T dot = 0;
  for (std::size_t j = 0; j < cols; ++j) dot += probs[j] * dprobs[j];
  for (std::size_t j = 0; j < cols; ++j) dscores[j] += probs[j] * (dprobs[j] - dot);
}

}  // namespace detail

/// Row-wise softmax of scores[r x c] where entries outside the pattern get
/// -inf before normalizing (so their weight is exactly 0).
template <typename T>
Tensor<T>& softmax_rows_with_mask(Tape<T>& tape, Tensor<T>& scores, const AttentionPattern& pattern) {
  const std::size_t r = scores.rows();
  const std::size_t c = scores.cols();
  if (pattern.length() < r || pattern.length() < c)
    throw DimensionError("softmax: pattern length " + std::to_string(pattern.length()) + " shorter than scores " +
                         to_string(scores.shape()));
  Tensor<T>& out = tape.make(scores.shape(), scores.requires_grad());
  for (std::size_t i = 0; i < r; ++i)
    detail::masked_softmax_row(&scores[i * c], pattern.row(i), c, &out[i * c], i);
  if (out.requires_grad()) {
    tape.on_backward([&scores, &out, r, c] {
      if (!out.has_grad()) return;
      auto d = scores.ensure_grad();
      auto g = out.grads();
      for (std::size_t i = 0; i < r; ++i)
        detail::softmax_row_backward(&out[i * c], &g[i * c], c, &d[i * c]);
    });
  }
  return out;
}

/// Normalizes over the last axis and multiplies by a learned gain (no bias).
template <typename T>
Tensor<T>& layernorm(Tape<T>& tape, Tensor<T>& x, Tensor<T>& gain, T eps = T(1e-5)) {
  const std::size_t r = x.rows();
  const std::size_t d = x.cols();
  if (gain.size() != d) throw DimensionError("layernorm: gain size differs from feature size");
  Tensor<T>& out = tape.make(x.shape(), x.requires_grad() || gain.requires_grad());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = &x[i * d];
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xi[j] - mean) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gain[j];
    }
  }
  if (out.requires_grad()) {
    tape.on_backward([&x, &gain, &out, xhat, inv_std, r, d] {
      if (!out.has_grad()) return;
      auto g = out.grads();
      if (gain.requires_grad()) {
        auto dg = gain.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * (*xhat)[i * d + j];
      }
      if (x.requires_grad()) {
        auto dx = x.ensure_grad();
        std::vector<T> dh(d);
        for (std::size_t i = 0; i < r; ++i) {
          T mean_dh = 0;
          T mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = g[i * d + j] * gain[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * (*xhat)[i * d + j];
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          for (std::size_t j = 0; j < d; ++j)
            dx[i * d + j] += (*inv_std)[i] * (dh[j] - mean_dh - (*xhat)[i * d + j] * mean_dh_h);
        }
      }
    });
  }
  return out;
}

/// Mean next-token negative log-likelihood over the rows of logits[T x V].
template <typename T>
Tensor<T>& cross_entropy_next_token(Tape<T>& tape, Tensor<T>& logits, std::span<const TokenId> targets) {
  const std::size_t r = logits.rows();
  const std::size_t v = logits.cols();
  if (targets.size() != r) throw DimensionError("cross_entropy: target count differs from logit rows");
  for (TokenId t : targets)
    if (t >= v) throw DimensionError("cross_entropy: target id " + std::to_string(t) + " outside vocabulary");
  Tensor<T>& out = tape.make({1}, logits.requires_grad());
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  T total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    const T* li = &logits[i * v];
    T mx = *std::max_element(li, li + v);
    T z = 0;
    for (std::size_t j = 0; j < v; ++j) {
      const T e = std::exp(li[j] - mx);
      (*probs)[i * v + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= z;
    total += std::log(z) + mx - li[targets[i]];
  }
  out[0] = total / T(r);
  if (out.requires_grad()) {
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    tape.on_backward([&logits, &out, probs, tgt = std::move(tgt), r, v] {
      if (!out.has_grad()) return;
      const T g = out.grads()[0] / T(r);
      auto d = logits.ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < v; ++j) d[i * v + j] += g * (*probs)[i * v + j];
        d[i * v + tgt[i]] -= g;
      }
    });
  }
  return out;
}

/// out[i] = (wte (.) mask)[tokens[i]] + wpe[i mod seq_len]; rows are
/// batch-major sequences of length seq_len.
template <typename T>
Tensor<T>& embedding(Tape<T>& tape, std::span<const TokenId> tokens, Tensor<T>& wte, const LayerMask* mask,
                     Tensor<T>& wpe, std::size_t seq_len) {
  const std::size_t e = wte.cols();
  const std::size_t vocab = wte.rows();
  if (wpe.cols() != e) throw DimensionError("embedding: position table width differs");
  if (seq_len == 0 || tokens.size() % seq_len != 0) throw DimensionError("embedding: token count not a multiple of seq_len");
  if (seq_len > wpe.rows()) throw DimensionError("embedding: sequence longer than position table");
  for (TokenId t : tokens)
    if (t >= vocab) throw DimensionError("embedding: token id " + std::to_string(t) + " >= vocab size");
  Tensor<T>& out = tape.make({tokens.size(), e}, wte.requires_grad() || wpe.requires_grad());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::size_t base = static_cast<std::size_t>(tokens[i]) * e;
    const std::size_t pos = (i % seq_len) * e;
    for (std::size_t j = 0; j < e; ++j) {
      const T w = (mask && !mask->test(base + j)) ? T(0) : wte[base + j];
      out[i * e + j] = w + wpe[pos + j];
    }
  }
  if (out.requires_grad()) {
    std::vector<TokenId> toks(tokens.begin(), tokens.end());
    tape.on_backward([&wte, &wpe, &out, toks = std::move(toks), e, seq_len] {
      if (!out.has_grad()) return;
      auto g = out.grads();
      if (wte.requires_grad()) {
        auto d = wte.ensure_grad();
        for (std::size_t i = 0; i < toks.size(); ++i)
          for (std::size_t j = 0; j < e; ++j) d[toks[i] * e + j] += g[i * e + j];
      }
      if (wpe.requires_grad()) {
        auto d = wpe.ensure_grad();
        for (std::size_t i = 0; i < toks.size(); ++i)
          for (std::size_t j = 0; j < e; ++j) d[(i % seq_len) * e + j] += g[i * e + j];
      }
    });
  }
  return out;
}

/// Multi-head causal self-attention with one pattern shared by every head.
/// q, k, v are [batch*seq x n_embd]; heads are contiguous column blocks.
template <typename T>
Tensor<T>& attention(Tape<T>& tape, Tensor<T>& q, Tensor<T>& k, Tensor<T>& v, const AttentionPattern& pattern,
                     std::size_t n_heads, std::size_t seq_len) {
  detail::require_same(q.shape(), k.shape(), "attention");
  detail::require_same(q.shape(), v.shape(), "attention");
  const std::size_t rows = q.rows();
  const std::size_t e = q.cols();
  if (n_heads == 0 || e % n_heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (seq_len == 0 || rows % seq_len != 0) throw DimensionError("attention: rows not a multiple of seq_len");
  if (pattern.length() < seq_len) throw DimensionError("attention: pattern shorter than sequence");
  const std::size_t batch = rows / seq_len;
  const std::size_t dh = e / n_heads;
  const std::size_t tt = seq_len;
  const T sc = T(1) / std::sqrt(T(dh));
  const auto ei = [](std::size_t x) { return static_cast<Eigen::Index>(x); };

  Tensor<T>& out = tape.make(q.shape(), q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto probs = std::make_shared<std::vector<T>>(batch * n_heads * tt * tt);
  detail::RowMat<T> scores(ei(tt), ei(tt));
  auto Q = detail::cmat<T>(std::span<const T>(q.values()), rows, e);
  auto K = detail::cmat<T>(std::span<const T>(k.values()), rows, e);
  auto V = detail::cmat<T>(std::span<const T>(v.values()), rows, e);
  auto O = detail::mat<T>(out.values(), rows, e);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto r0 = ei(b * tt), c0 = ei(h * dh);
      scores.noalias() = Q.block(r0, c0, ei(tt), ei(dh)) * K.block(r0, c0, ei(tt), ei(dh)).transpose();
      scores *= sc;
      T* p = probs->data() + (b * n_heads + h) * tt * tt;
      for (std::size_t i = 0; i < tt; ++i)
        detail::masked_softmax_row(scores.data() + i * tt, pattern.row(i), tt, p + i * tt, i);
      auto P = detail::CMatMap<T>(p, ei(tt), ei(tt));
      O.block(r0, c0, ei(tt), ei(dh)).noalias() = P * V.block(r0, c0, ei(tt), ei(dh));
    }
  }

  if (out.requires_grad()) {
    tape.on_backward([&q, &k, &v, &out, probs, batch, n_heads, tt, dh, e, rows, sc, ei] {
      if (!out.has_grad()) return;
      auto G = detail::cmat<T>(std::span<const T>(out.grads()), rows, e);
      auto Q = detail::cmat<T>(std::span<const T>(q.values()), rows, e);
      auto K = detail::cmat<T>(std::span<const T>(k.values()), rows, e);
      auto V = detail::cmat<T>(std::span<const T>(v.values()), rows, e);
      auto dQ = detail::mat<T>(q.ensure_grad(), rows, e);
      auto dK = detail::mat<T>(k.ensure_grad(), rows, e);
      auto dV = detail::mat<T>(v.ensure_grad(), rows, e);
      detail::RowMat<T> dp(ei(tt), ei(tt));
      detail::RowMat<T> ds(ei(tt), ei(tt));
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto r0 = ei(b * tt), c0 = ei(h * dh);
          const T* p = probs->data() + (b * n_heads + h) * tt * tt;
          auto P = detail::CMatMap<T>(p, ei(tt), ei(tt));
          auto Gb = G.block(r0, c0, ei(tt), ei(dh));
          dp.noalias() = Gb * V.block(r0, c0, ei(tt), ei(dh)).transpose();
          dV.block(r0, c0, ei(tt), ei(dh)).noalias() += P.transpose() * Gb;
          ds.setZero();
          for (std::size_t i = 0; i < tt; ++i)
            detail::softmax_row_backward(p + i * tt, dp.data() + i * tt, tt, ds.data() + i * tt);
          ds *= sc;
          dQ.block(r0, c0, ei(tt), ei(dh)).noalias() += ds * K.block(r0, c0, ei(tt), ei(dh));
          dK.block(r0, c0, ei(tt), ei(dh)).noalias() += ds.transpose() * Q.block(r0, c0, ei(tt), ei(dh));
        }
      }
    });
  }
  return out;
}

}  // namespace ops
}  // namespace mst
