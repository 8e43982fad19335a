// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mst/errors.hpp"

namespace mst {

/// Binary inclusion map over a rows x cols weight matrix (row-major flat
/// indexing, same as the weights it masks).
class LayerMask {
 public:
  LayerMask() = default;

  LayerMask(std::string name, std::size_t rows, std::size_t cols, bool full = false)
      : name_(std::move(name)), rows_(rows), cols_(cols), words_((rows * cols + 63) / 64, 0) {
    if (rows == 0 || cols == 0) throw DimensionError("mask dimensions must be positive");
    if (full) fill();
  }

  const std::string& name() const { return name_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return rows_ * cols_; }
  std::size_t active_count() const { return active_; }
  std::size_t inactive_count() const { return size() - active_; }
  double density() const { return static_cast<double>(active_) / static_cast<double>(size()); }
  double sparsity() const { return 1.0 - density(); }

  bool test(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1U; }

  void set(std::size_t i) {
    if (!test(i)) {
      words_[i >> 6] |= std::uint64_t{1} << (i & 63);
      ++active_;
    }
  }

  void reset(std::size_t i) {
    if (test(i)) {
      words_[i >> 6] &= ~(std::uint64_t{1} << (i & 63));
      --active_;
    }
  }

  void fill() {
    for (std::size_t i = 0; i < size(); ++i) set(i);
  }

  void clear() {
    std::fill(words_.begin(), words_.end(), 0);
    active_ = 0;
  }

  std::vector<std::size_t> active_indices() const { return collect(true); }
  std::vector<std::size_t> inactive_indices() const { return collect(false); }

  /// Zeroes every inactive entry of a same-sized buffer.
  template <typename T>
  void apply(std::span<T> values) const {
    if (values.size() != size()) throw DimensionError("mask/weight size mismatch for " + name_);
    for (std::size_t i = 0; i < values.size(); ++i)
      if (!test(i)) values[i] = T(0);
  }

  std::span<const std::uint64_t> words() const { return words_; }

  /// Rebuilds from serialized words; recounts the population.
  void assign_words(std::span<const std::uint64_t> words) {
    if (words.size() != words_.size()) throw DimensionError("mask word count mismatch for " + name_);
    words_.assign(words.begin(), words.end());
    if (size() % 64 != 0) words_.back() &= (std::uint64_t{1} << (size() % 64)) - 1;
    active_ = 0;
    for (auto w : words_) active_ += static_cast<std::size_t>(std::popcount(w));
  }

  friend bool operator==(const LayerMask& a, const LayerMask& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.words_ == b.words_;
  }

 private:
  std::vector<std::size_t> collect(bool active) const {
    std::vector<std::size_t> out;
    out.reserve(active ? active_ : size() - active_);
    for (std::size_t i = 0; i < size(); ++i)
      if (test(i) == active) out.push_back(i);
    return out;
  }

  std::string name_;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint64_t> words_;
  std::size_t active_ = 0;
};

}  // namespace mst
