#pragma once

// Byte-level tokenization and the deterministic block sampler.
//
// Documents are raw byte strings.  The token stream is every document's bytes
// followed by one end-of-text id, so ids 0..255 are literal bytes and 256 is
// the document boundary.  Sampling tiles the stream with length-T blocks from
// a per-epoch offset and visits them in a per-epoch shuffled order; emitted
// windows carry T+1 tokens so the shifted next-token targets come for free.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "depthkit/common.hpp"

namespace depthkit {

inline constexpr int64_t kEotId = 256;
inline constexpr int64_t kByteVocab = 257;

inline std::vector<int64_t> tokenize(const std::vector<std::string>& documents) {
  std::vector<int64_t> stream;
  size_t total = documents.size();
  for (const auto& d : documents) total += d.size();
  stream.reserve(total);
  for (const auto& doc : documents) {
    for (unsigned char b : doc) stream.push_back(int64_t(b));
    stream.push_back(kEotId);
  }
  return stream;
}

inline std::vector<std::string> detokenize(const std::vector<int64_t>& stream) {
  std::vector<std::string> docs;
  std::string cur;
  bool open = false;
  for (int64_t id : stream) {
    if (id < 0 || id >= kByteVocab) {
      throw VocabError("token id " + std::to_string(id) +
                       " outside the byte vocabulary");
    }
    if (id == kEotId) {
      docs.push_back(cur);
      cur.clear();
      open = false;
    } else {
      cur.push_back(char(uint8_t(id)));
      open = true;
    }
  }
  if (open) docs.push_back(cur);  // trailing document without a boundary
  return docs;
}

// 0 = train, 1 = val.  Assignment hashes (seed, document index) alone, so a
// document keeps its split when the corpus grows.
inline std::vector<int> split_documents(size_t n_docs, double val_fraction,
                                        uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) {
    throw ConfigError("val_fraction must lie in [0, 1]");
  }
  std::vector<int> out(n_docs, 0);
  for (size_t i = 0; i < n_docs; ++i) {
    double u = double(mix64(seed, uint64_t(i))) * 0x1.0p-64;
    out[i] = u < val_fraction ? 1 : 0;
  }
  return out;
}

struct Corpus {
  std::vector<std::string> documents;
};

namespace detail {
inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return std::move(ss).str();
}
}  // namespace detail

// A directory loads one document per regular file (sorted by name); a single
// file is one document, or many when a separator line is configured.
inline Corpus load_corpus(const std::string& path,
                          const std::string& separator = "") {
  namespace fs = std::filesystem;
  Corpus c;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) c.documents.push_back(detail::read_file(f));
  } else if (fs::is_regular_file(path)) {
    std::string text = detail::read_file(path);
    if (separator.empty()) {
      c.documents.push_back(std::move(text));
    } else {
      std::istringstream ss(text);
      std::string line, doc;
      bool any = false;
      while (std::getline(ss, line)) {
        if (line == separator) {
          if (any) c.documents.push_back(doc);
          doc.clear();
          any = false;
        } else {
          if (any) doc += '\n';
          doc += line;
          any = true;
        }
      }
      if (any) c.documents.push_back(doc);
    }
  } else {
    throw ConfigError("corpus path does not exist: " + path);
  }
  if (c.documents.empty()) throw DataError("corpus at " + path + " is empty");
  return c;
}

// Deterministic per-epoch tiling: offset(epoch) shifts the block grid, and a
// seeded shuffle fixes the visit order.  Both are pure in (seed, epoch).
class BlockSampler {
 public:
  BlockSampler(int64_t stream_len, int64_t block_len, uint64_t seed)
      : len_(stream_len), block_(block_len), seed_(seed) {
    if (block_ < 1) throw ConfigError("block length must be >= 1");
    if (len_ < block_ + 1) {
      throw DataError("stream of " + std::to_string(len_) +
                      " tokens too short for windows of " +
                      std::to_string(block_ + 1));
    }
  }

  int64_t block_len() const { return block_; }

  int64_t offset_for(int64_t epoch) const {
    return int64_t(mix64(seed_, uint64_t(epoch)) % uint64_t(block_));
  }

  // Ordered [start, end) windows of length block_len + 1.
  std::vector<std::pair<int64_t, int64_t>> epoch_blocks(int64_t epoch) const {
    int64_t off = offset_for(epoch);
    std::vector<std::pair<int64_t, int64_t>> wins;
    for (int64_t s = off; s + block_ + 1 <= len_; s += block_) {
      wins.emplace_back(s, s + block_ + 1);
    }
    Rng shuffle(mix64(mix64(seed_, uint64_t(epoch)), 0x70657268757465ULL));
    for (int64_t i = int64_t(wins.size()) - 1; i > 0; --i) {
      int64_t j = int64_t(shuffle.below(uint64_t(i + 1)));
      std::swap(wins[size_t(i)], wins[size_t(j)]);
    }
    return wins;
  }

 private:
  int64_t len_;
  int64_t block_;
  uint64_t seed_;
};

// Multi-epoch window iterator owning its token stream.  Batches are copies of
// consecutive windows in sampler order, rolling across epoch boundaries.
class WindowStream {
 public:
  WindowStream(std::vector<int64_t> stream, int64_t block_len, uint64_t seed)
      : stream_(std::move(stream)),
        sampler_(int64_t(stream_.size()), block_len, seed) {}

  std::vector<std::vector<int64_t>> next_batch(int64_t count) {
    std::vector<std::vector<int64_t>> out;
    int empty_epochs = 0;
    while (int64_t(out.size()) < count) {
      if (pos_ >= current_.size()) {
        current_ = sampler_.epoch_blocks(epoch_++);
        pos_ = 0;
        if (current_.empty()) {
          // possible when the stream barely fits one block and the epoch
          // offset pushes the grid past the end
          if (++empty_epochs > 4096) {
            throw DataError("sampler produced 4096 empty epochs in a row");
          }
          continue;
        }
        empty_epochs = 0;
      }
      auto [s, e] = current_[pos_++];
      out.emplace_back(stream_.begin() + s, stream_.begin() + e);
    }
    return out;
  }

  int64_t epochs_started() const { return epoch_; }

 private:
  std::vector<int64_t> stream_;
  BlockSampler sampler_;
  std::vector<std::pair<int64_t, int64_t>> current_;
  size_t pos_ = 0;
  int64_t epoch_ = 0;
};

}  // namespace depthkit
