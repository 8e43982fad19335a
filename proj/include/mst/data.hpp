// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mst/tensor.hpp"
#include "mst/rng.hpp"

namespace mst {

enum class TokenizerMode { byte, character };

inline TokenizerMode parse_tokenizer_mode(const std::string& s) {
  if (s == "byte") return TokenizerMode::byte;
  if (s == "char") return TokenizerMode::character;
  throw std::invalid_argument("unknown tokenizer mode: " + s);
}

inline std::string to_string(TokenizerMode m) { return m == TokenizerMode::byte ? "byte" : "char"; }

namespace utf8 {

inline std::vector<char32_t> decode(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  auto cont = [&](std::size_t k) -> char32_t {
    if (i + k >= s.size() || (static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80)
      throw std::invalid_argument("invalid UTF-8 at byte " + std::to_string(i));
    return static_cast<unsigned char>(s[i + k]) & 0x3F;
  };
  while (i < s.size()) {
    const auto b = static_cast<unsigned char>(s[i]);
    if (b < 0x80) {
      out.push_back(b);
      i += 1;
    } else if ((b & 0xE0) == 0xC0) {
      out.push_back((char32_t(b & 0x1F) << 6) | cont(1));
      i += 2;
    } else if ((b & 0xF0) == 0xE0) {
      out.push_back((char32_t(b & 0x0F) << 12) | (cont(1) << 6) | cont(2));
      i += 3;
    } else if ((b & 0xF8) == 0xF0) {
      out.push_back((char32_t(b & 0x07) << 18) | (cont(1) << 12) | (cont(2) << 6) | cont(3));
      i += 4;
    } else {
      throw std::invalid_argument("invalid UTF-8 lead byte at " + std::to_string(i));
    }
  }
  return out;
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

}  // namespace utf8

enum class Split { train, val };

/// Token ids of a whole corpus with a train/validation boundary. Byte mode
/// uses the identity vocabulary of 256; char mode uses the sorted set of
/// distinct code points.
class TokenizedCorpus {
 public:
  TokenizedCorpus() = default;
  TokenizedCorpus(TokenizerMode mode, std::vector<char32_t> vocab, std::vector<TokenId> ids, std::size_t boundary)
      : mode_(mode), vocab_(std::move(vocab)), ids_(std::move(ids)), boundary_(boundary) {
    if (boundary_ > ids_.size()) throw std::invalid_argument("split boundary beyond corpus end");
    for (auto id : ids_)
      if (id >= vocab_size()) throw std::invalid_argument("token id outside vocabulary");
  }

  TokenizerMode mode() const { return mode_; }
  std::size_t vocab_size() const { return mode_ == TokenizerMode::byte ? 256 : vocab_.size(); }
  const std::vector<char32_t>& vocab() const { return vocab_; }
  std::span<const TokenId> ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  std::size_t boundary() const { return boundary_; }

  std::pair<std::size_t, std::size_t> range(Split s) const {
    return s == Split::train ? std::pair{std::size_t{0}, boundary_} : std::pair{boundary_, ids_.size()};
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    if (mode_ == TokenizerMode::byte) {
      for (unsigned char c : text) out.push_back(c);
      return out;
    }
    for (char32_t cp : utf8::decode(text)) {
      auto it = std::lower_bound(vocab_.begin(), vocab_.end(), cp);
      if (it == vocab_.end() || *it != cp) throw std::invalid_argument("character outside corpus vocabulary");
      out.push_back(static_cast<TokenId>(it - vocab_.begin()));
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (auto id : ids) {
      if (id >= vocab_size()) throw std::invalid_argument("token id outside vocabulary");
      if (mode_ == TokenizerMode::byte)
        out.push_back(static_cast<char>(id));
      else
        utf8::append(out, vocab_[id]);
    }
    return out;
  }

 private:
  TokenizerMode mode_ = TokenizerMode::byte;
  std::vector<char32_t> vocab_;
  std::vector<TokenId> ids_;
  std::size_t boundary_ = 0;
};

inline TokenizedCorpus ingest_text(std::string_view text, TokenizerMode mode, double train_fraction = 0.9) {
  if (text.empty()) throw std::invalid_argument("corpus is empty");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw std::invalid_argument("train fraction must lie in (0, 1]");
  std::vector<char32_t> vocab;
  std::vector<TokenId> ids;
  if (mode == TokenizerMode::byte) {
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(c);
  } else {
    const auto cps = utf8::decode(text);
    vocab = cps;
    std::sort(vocab.begin(), vocab.end());
    vocab.erase(std::unique(vocab.begin(), vocab.end()), vocab.end());
    ids.reserve(cps.size());
    for (char32_t cp : cps)
      ids.push_back(static_cast<TokenId>(std::lower_bound(vocab.begin(), vocab.end(), cp) - vocab.begin()));
  }
  const auto boundary = static_cast<std::size_t>(std::floor(static_cast<double>(ids.size()) * train_fraction));
  return TokenizedCorpus(mode, std::move(vocab), std::move(ids), boundary);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline TokenizedCorpus ingest(const std::string& path, TokenizerMode mode, double train_fraction = 0.9) {
  return ingest_text(read_file(path), mode, train_fraction);
}

struct Batch {
  std::size_t batch_size = 0;
  std::size_t block_size = 0;
  std::vector<TokenId> inputs;   // batch-major, batch_size * block_size
  std::vector<TokenId> targets;  // inputs shifted left by one
  std::vector<std::size_t> starts;
};

/// Uniform random windows of block_size + 1 tokens lying wholly inside the split.
inline Batch sample_batch(const TokenizedCorpus& corpus, Split split, std::size_t batch_size, std::size_t block_size,
                          Rng& rng) {
  const auto [lo, hi] = corpus.range(split);
  if (hi - lo < block_size + 1)
    throw std::invalid_argument("split has " + std::to_string(hi - lo) + " tokens, need at least block_size + 1");
  Batch b;
  b.batch_size = batch_size;
  b.block_size = block_size;
  b.inputs.reserve(batch_size * block_size);
  b.targets.reserve(batch_size * block_size);
  const auto ids = corpus.ids();
  for (std::size_t s = 0; s < batch_size; ++s) {
    const std::size_t start = lo + static_cast<std::size_t>(rng.uniform_index(hi - lo - block_size));
    b.starts.push_back(start);
    b.inputs.insert(b.inputs.end(), ids.begin() + static_cast<std::ptrdiff_t>(start),
                    ids.begin() + static_cast<std::ptrdiff_t>(start + block_size));
    b.targets.insert(b.targets.end(), ids.begin() + static_cast<std::ptrdiff_t>(start + 1),
                     ids.begin() + static_cast<std::ptrdiff_t>(start + block_size + 1));
  }
  return b;
}

// Token cache layout (little-endian):
//   8  bytes  magic "MSTTOK01"
//   4  bytes  mode (0 byte, 1 char)
//   4  bytes  vocab entry count V (0 in byte mode)
//   8  bytes  token count N
//   8  bytes  split boundary
//   4V bytes  vocab code points
//   4N bytes  token ids
namespace detail {
template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}
template <typename U>
U get(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw std::runtime_error("truncated token cache");
  return v;
}
}  // namespace detail

inline void save_token_cache(const TokenizedCorpus& c, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write("MSTTOK01", 8);
  detail::put<std::uint32_t>(os, c.mode() == TokenizerMode::byte ? 0 : 1);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(c.vocab().size()));
  detail::put<std::uint64_t>(os, c.size());
  detail::put<std::uint64_t>(os, c.boundary());
  for (char32_t cp : c.vocab()) detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(cp));
  os.write(reinterpret_cast<const char*>(c.ids().data()), static_cast<std::streamsize>(c.size() * sizeof(TokenId)));
}

inline TokenizedCorpus load_token_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "MSTTOK01", 8) != 0) throw std::runtime_error("not a token cache: " + path);
  const auto mode = detail::get<std::uint32_t>(is) == 0 ? TokenizerMode::byte : TokenizerMode::character;
  const auto nv = detail::get<std::uint32_t>(is);
  const auto n = detail::get<std::uint64_t>(is);
  const auto boundary = detail::get<std::uint64_t>(is);
  std::vector<char32_t> vocab(nv);
  for (auto& cp : vocab) cp = static_cast<char32_t>(detail::get<std::uint32_t>(is));
  std::vector<TokenId> ids(n);
  if (!is.read(reinterpret_cast<char*>(ids.data()), static_cast<std::streamsize>(n * sizeof(TokenId))))
    throw std::runtime_error("truncated token cache");
  return TokenizedCorpus(mode, std::move(vocab), std::move(ids), boundary);
}

}  // namespace mst
