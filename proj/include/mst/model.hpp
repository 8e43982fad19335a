// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mst/attention.hpp"
#include "mst/autodiff.hpp"
#include "mst/data.hpp"
#include "mst/flops.hpp"
#include "mst/mask.hpp"
#include "mst/optim.hpp"
#include "mst/rng.hpp"
#include "mst/topology.hpp"

namespace mst {

/// GPT-style decoder hyperparameters. No biases, no dropout.
struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t n_embd = 128;
  std::size_t block_size = 256;
  std::size_t vocab_size = 256;
  bool tie_embeddings = true;
  bool mask_lm_head = true;  // the output head (shared table when tied) is maskable

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || n_embd == 0 || block_size == 0 || vocab_size == 0)
      throw std::invalid_argument("model dimensions must be positive");
    if (n_embd % n_heads != 0) throw std::invalid_argument("n_embd must be divisible by n_heads");
  }

  ModelDims dims() const { return {block_size, n_embd, n_layers, n_heads, vocab_size, 4 * n_embd}; }

  /// Hand count: embeddings + per block (4 E^2 attention, 8 E^2 MLP, 2E
  /// gains) + final gain + untied head.
  std::size_t parameter_count() const {
    const std::size_t e = n_embd;
    return vocab_size * e + block_size * e + n_layers * (12 * e * e + 2 * e) + e + (tie_embeddings ? 0 : vocab_size * e);
  }
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  std::vector<T> m;
  std::vector<T> v;
  bool decay = true;
  int mask_index = -1;  // into Gpt::masks(), or -1 when never masked
};

/// Decoder with masks over every weight matrix listed by maskable_shapes().
/// Invariant: entries outside a mask hold exactly 0.
template <typename T>
class Gpt {
 public:
  Gpt(ModelConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t e = cfg_.n_embd;
    const T std0 = T(0.02);
    const T std_out = T(0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers)));
    wte_ = add_param("wte", {cfg_.vocab_size, e}, std0, rng);
    wpe_ = add_param("wpe", {cfg_.block_size, e}, std0, rng);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "h" + std::to_string(l) + ".";
      Block b;
      b.ln1 = add_gain(p + "ln1");
      b.wq = add_param(p + "wq", {e, e}, std0, rng, true);
      b.wk = add_param(p + "wk", {e, e}, std0, rng, true);
      b.wv = add_param(p + "wv", {e, e}, std0, rng, true);
      b.wo = add_param(p + "wo", {e, e}, std_out, rng, true);
      b.ln2 = add_gain(p + "ln2");
      b.w1 = add_param(p + "ffw1", {e, 4 * e}, std0, rng, true);
      b.w2 = add_param(p + "ffw2", {4 * e, e}, std_out, rng, true);
      blocks_.push_back(b);
    }
    lnf_ = add_gain("lnf");
    if (cfg_.tie_embeddings) {
      head_ = wte_;
    } else {
      head_ = add_param("lm_head", {cfg_.vocab_size, e}, std0, rng);
    }
    if (cfg_.mask_lm_head) make_maskable(head_);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  Param<T>& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw std::invalid_argument("no parameter named " + name);
  }
  const Param<T>& param(const std::string& name) const { return const_cast<Gpt*>(this)->param(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::vector<LayerMask>& masks() { return masks_; }
  const std::vector<LayerMask>& masks() const { return masks_; }

  std::vector<LayerShape> maskable_shapes() const {
    std::vector<LayerShape> out;
    for (auto idx : masked_params_) {
      const auto& p = params_[idx];
      out.push_back({p.name, p.value.shape()[0], p.value.shape()[1]});
    }
    return out;
  }

  /// Installs masks (one per maskable layer, in maskable_shapes() order) and
  /// zeroes weights and moments outside them.
  void set_masks(std::vector<LayerMask> masks) {
    if (masks.size() != masks_.size()) throw std::invalid_argument("set_masks: wrong mask count");
    for (std::size_t i = 0; i < masks.size(); ++i) {
      const auto& p = params_[masked_params_[i]];
      if (masks[i].rows() != p.value.shape()[0] || masks[i].cols() != p.value.shape()[1])
        throw DimensionError("set_masks: mask shape differs for " + p.name);
    }
    masks_ = std::move(masks);
    enforce_masks();
  }

  void enforce_masks() {
    for (std::size_t i = 0; i < masks_.size(); ++i) {
      auto& p = params_[masked_params_[i]];
      masks_[i].apply(p.value.values());
      masks_[i].apply(std::span<T>(p.m));
      masks_[i].apply(std::span<T>(p.v));
    }
  }

  /// Logits [batch*seq x vocab] for batch-major token rows.
  Tensor<T>& forward(Tape<T>& tape, std::span<const TokenId> tokens, std::size_t seq_len,
                     const AttentionPattern& pattern) {
    if (seq_len == 0 || seq_len > cfg_.block_size) throw DimensionError("sequence length exceeds block size");
    if (pattern.length() < seq_len) throw DimensionError("attention pattern shorter than sequence");
    for (auto& p : params_) p.value.set_requires_grad(tape.recording());

    Tensor<T>* x = &ops::embedding(tape, tokens, P(wte_), mask_of(wte_), P(wpe_), seq_len);
    for (const auto& b : blocks_) {
      Tensor<T>& h = ops::layernorm(tape, *x, P(b.ln1));
      Tensor<T>& q = linear(tape, h, b.wq);
      Tensor<T>& k = linear(tape, h, b.wk);
      Tensor<T>& v = linear(tape, h, b.wv);
      Tensor<T>& a = ops::attention(tape, q, k, v, pattern, cfg_.n_heads, seq_len);
      Tensor<T>& o = linear(tape, a, b.wo);
      x = &ops::add(tape, *x, o);
      Tensor<T>& h2 = ops::layernorm(tape, *x, P(b.ln2));
      Tensor<T>& f = ops::gelu(tape, linear(tape, h2, b.w1));
      Tensor<T>& f2 = linear(tape, f, b.w2);
      x = &ops::add(tape, *x, f2);
    }
    Tensor<T>& hf = ops::layernorm(tape, *x, P(lnf_));
    return ops::matmul_transposed(tape, hf, P(head_), mask_of(head_));
  }

  /// Mean next-token loss and its gradients (dense on masked layers). With
  /// accumulate the gradients add onto the existing ones.
  T loss_and_grad(std::span<const TokenId> inputs, std::span<const TokenId> targets, std::size_t seq_len,
                  const AttentionPattern& pattern, bool accumulate = false) {
    for (auto& p : params_) {
      p.value.ensure_grad();
      if (!accumulate) p.value.zero_grad();
    }
    Tape<T> tape(true);
    Tensor<T>& logits = forward(tape, inputs, seq_len, pattern);
    Tensor<T>& loss = ops::cross_entropy_next_token(tape, logits, targets);
    check_finite(loss, "loss");
    tape.backward(loss);
    return loss.item();
  }

  T loss(std::span<const TokenId> inputs, std::span<const TokenId> targets, std::size_t seq_len,
         const AttentionPattern& pattern) {
    Tape<T> tape(false);
    Tensor<T>& logits = forward(tape, inputs, seq_len, pattern);
    return ops::cross_entropy_next_token(tape, logits, targets).item();
  }

  /// Views for the topology updater (requires gradients from loss_and_grad).
  std::vector<LayerState<T>> layer_states() {
    std::vector<LayerState<T>> out;
    for (std::size_t i = 0; i < masks_.size(); ++i) {
      auto& p = params_[masked_params_[i]];
      if (!p.value.has_grad()) throw std::logic_error("layer_states: no gradient for " + p.name);
      out.push_back({&masks_[i], p.value.values(), p.value.grads(), std::span<T>(p.m), std::span<T>(p.v)});
    }
    return out;
  }

  std::vector<ParamSlot<T>> optimizer_slots() {
    std::vector<ParamSlot<T>> out;
    for (auto& p : params_)
      out.push_back({p.name, &p.value, &p.m, &p.v, p.mask_index >= 0 ? &masks_[p.mask_index] : nullptr, p.decay});
    return out;
  }

 private:
  struct Block {
    std::size_t ln1, wq, wk, wv, wo, ln2, w1, w2;
  };

  Tensor<T>& P(std::size_t idx) { return params_[idx].value; }

  const LayerMask* mask_of(std::size_t idx) const {
    const int mi = params_[idx].mask_index;
    return mi >= 0 ? &masks_[mi] : nullptr;
  }

  Tensor<T>& linear(Tape<T>& tape, Tensor<T>& x, std::size_t idx) {
    const LayerMask* m = mask_of(idx);
    return m ? ops::masked_matmul(tape, x, P(idx), *m) : ops::matmul(tape, x, P(idx));
  }

  std::size_t add_param(const std::string& name, Shape shape, T stddev, Rng& rng, bool maskable = false) {
    Param<T> p;
    p.name = name;
    p.value = Tensor<T>(std::move(shape));
    for (auto& x : p.value.values()) x = T(stddev * rng.normal());
    p.m.assign(p.value.size(), T(0));
    p.v.assign(p.value.size(), T(0));
    params_.push_back(std::move(p));
    const std::size_t idx = params_.size() - 1;
    if (maskable) make_maskable(idx);
    return idx;
  }

  std::size_t add_gain(const std::string& name) {
    Param<T> p;
    p.name = name;
    p.value = Tensor<T>({cfg_.n_embd}, T(1));
    p.m.assign(cfg_.n_embd, T(0));
    p.v.assign(cfg_.n_embd, T(0));
    p.decay = false;
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  void make_maskable(std::size_t idx) {
    auto& p = params_[idx];
    p.mask_index = static_cast<int>(masks_.size());
    masks_.emplace_back(p.name, p.value.shape()[0], p.value.shape()[1], true);
    masked_params_.push_back(idx);
  }

  ModelConfig cfg_;
  std::vector<Param<T>> params_;
  std::vector<LayerMask> masks_;
  std::vector<std::size_t> masked_params_;
  std::vector<Block> blocks_;
  std::size_t wte_ = 0, wpe_ = 0, lnf_ = 0, head_ = 0;
};

}  // namespace mst
