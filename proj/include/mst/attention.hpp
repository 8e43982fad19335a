// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mst {

enum class PatternKind { dense, strided, fixed };

inline std::string to_string(PatternKind k) {
  switch (k) {
    case PatternKind::dense: return "dense";
    case PatternKind::strided: return "strided";
    case PatternKind::fixed: return "fixed";
  }
  return "?";
}

inline PatternKind parse_pattern_kind(const std::string& s) {
  if (s == "dense") return PatternKind::dense;
  if (s == "strided") return PatternKind::strided;
  if (s == "fixed") return PatternKind::fixed;
  throw std::invalid_argument("unknown attention pattern kind: " + s);
}

/// Causal attention connectivity shared by all heads. Row i lists the key
/// positions query i may attend to; materialized as an n x n byte grid.
class AttentionPattern {
 public:
  AttentionPattern() = default;

  static AttentionPattern dense(std::size_t n) {
    require(n >= 1, "pattern length must be >= 1");
    AttentionPattern p(PatternKind::dense, n, 1, 0);
    p.build([](std::size_t i, std::size_t j) { return j <= i; });
    return p;
  }

  /// Local window of the previous l positions plus every l-th position back.
  static AttentionPattern strided(std::size_t n, std::size_t l) {
    require(n >= 1 && l >= 1, "strided pattern needs n >= 1 and l >= 1");
    AttentionPattern p(PatternKind::strided, n, l, 0);
    p.build([l](std::size_t i, std::size_t j) { return j <= i && (i - j < l || (i - j) % l == 0); });
    return p;
  }

  /// Causal attention inside the current length-l block, plus the last c
  /// columns of every earlier block.
  static AttentionPattern fixed(std::size_t n, std::size_t l, std::size_t c = 1) {
    require(n >= 1 && l >= 1, "fixed pattern needs n >= 1 and l >= 1");
    require(c >= 1 && c < l, "fixed pattern needs 1 <= c < l");
    AttentionPattern p(PatternKind::fixed, n, l, c);
    p.build([l, c](std::size_t i, std::size_t j) {
      if (j > i) return false;
      if (j / l == i / l) return true;
      return j < (i / l) * l && j % l >= l - c;
    });
    return p;
  }

  /// Strided pattern at stride l, where l == 1 means the dense mask.
  static AttentionPattern for_stride(PatternKind kind, std::size_t n, std::size_t l, std::size_t c = 1) {
    if (l <= 1 || kind == PatternKind::dense) return dense(n);
    if (kind == PatternKind::fixed) return fixed(n, l, c);
    return strided(n, l);
  }

  PatternKind kind() const { return kind_; }
  std::size_t length() const { return n_; }
  std::size_t stride() const { return l_; }
  std::size_t summary_cols() const { return c_; }

  bool allows(std::size_t i, std::size_t j) const { return grid_[i * n_ + j] != 0; }
  const std::uint8_t* row(std::size_t i) const { return grid_.data() + i * n_; }

  std::size_t pair_count() const { return pairs_; }

  /// Attention FLOP ratio against full n x n attention; the dense mask is
  /// the reference and is 1 by definition.
  double q_atten() const {
    if (kind_ == PatternKind::dense) return 1.0;
    return static_cast<double>(pairs_) / (static_cast<double>(n_) * static_cast<double>(n_));
  }

  /// One line per query row, '1' where attended.
  std::string to_text_grid() const {
    std::string out;
    out.reserve(n_ * (n_ + 1));
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < n_; ++j) out.push_back(allows(i, j) ? '1' : '0');
      out.push_back('\n');
    }
    return out;
  }

  friend bool operator==(const AttentionPattern& a, const AttentionPattern& b) {
    return a.n_ == b.n_ && a.grid_ == b.grid_;
  }

 private:
  AttentionPattern(PatternKind kind, std::size_t n, std::size_t l, std::size_t c)
      : kind_(kind), n_(n), l_(l), c_(c) {}

  static void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
  }

  template <typename Pred>
  void build(Pred allowed) {
    grid_.assign(n_ * n_, 0);
    pairs_ = 0;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j)
        if (allowed(i, j)) {
          grid_[i * n_ + j] = 1;
          ++pairs_;
        }
  }

  PatternKind kind_ = PatternKind::dense;
  std::size_t n_ = 0;
  std::size_t l_ = 1;
  std::size_t c_ = 0;
  std::size_t pairs_ = 0;
  std::vector<std::uint8_t> grid_;
};

inline AttentionPattern strided_pattern(std::size_t n, std::size_t l) { return AttentionPattern::strided(n, l); }
inline AttentionPattern fixed_pattern(std::size_t n, std::size_t l, std::size_t c = 1) {
  return AttentionPattern::fixed(n, l, c);
}
inline std::size_t pair_count(const AttentionPattern& p) { return p.pair_count(); }
inline double q_atten(const AttentionPattern& p) { return p.q_atten(); }

}  // namespace mst
