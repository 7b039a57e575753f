#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracformer/error.hpp"
#include "tracformer/rng.hpp"

namespace tracformer {

// Byte-level character vocabulary with three reserved ids. Reserved ids are
// fixed so they survive save/load unchanged.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;
  static constexpr int kEos = 2;

  Vocab() { byte_to_id_.fill(-1); }

  static Vocab build(const std::string& corpus_text) {
    Vocab v;
    std::set<unsigned char> chars(corpus_text.begin(), corpus_text.end());
    for (unsigned char c : chars) {  // std::set iterates sorted
      v.byte_to_id_[c] = static_cast<int>(v.id_to_byte_.size()) + kReserved;
      v.id_to_byte_.push_back(c);
    }
    return v;
  }

  int size() const { return static_cast<int>(id_to_byte_.size()) + kReserved; }
  int pad_id() const { return kPad; }
  int mask_id() const { return kMask; }
  int eos_id() const { return kEos; }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) {
      const int id = byte_to_id_[c];
      if (id < 0) throw DataError(std::string("unknown character in input: byte ") + std::to_string(int(c)));
      out.push_back(id);
    }
    return out;
  }

  // Reserved ids decode to nothing by default; eos can become a newline for
  // readable generation output.
  std::string decode(const std::vector<int>& ids, bool eos_as_newline = false) const {
    std::string out;
    for (int id : ids) {
      if (id < 0 || id >= size()) throw DataError("token id out of range in decode");
      if (id == kEos && eos_as_newline) out += '\n';
      if (id < kReserved) continue;
      out += static_cast<char>(id_to_byte_[static_cast<size_t>(id - kReserved)]);
    }
    return out;
  }

  nlohmann::json to_json() const {
    std::vector<int> bytes(id_to_byte_.begin(), id_to_byte_.end());
    return nlohmann::json{{"pad_id", kPad}, {"mask_id", kMask}, {"eos_id", kEos}, {"bytes", bytes}};
  }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v;
    for (const auto& b : j.at("bytes")) {
      const int byte = b.get<int>();
      if (byte < 0 || byte > 255) throw DataError("vocab json: invalid byte");
      v.byte_to_id_[static_cast<size_t>(byte)] = static_cast<int>(v.id_to_byte_.size()) + kReserved;
      v.id_to_byte_.push_back(static_cast<unsigned char>(byte));
    }
    return v;
  }

 private:
  static constexpr int kReserved = 3;
  std::array<int, 256> byte_to_id_;
  std::vector<unsigned char> id_to_byte_;
};

// token ids [B x T] plus per-position loss eligibility (pad = ineligible)
struct TokenBatch {
  int T = 0;
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<char>> eligible;
};

// Greedy packing of documents into fixed-length sequences. An eos token is
// appended after every document; the final remainder is padded.
inline std::vector<std::vector<int>> pack_sequences(const std::vector<std::vector<int>>& docs, int T, int eos_id,
                                                    int pad_id) {
  if (T < 1) throw ConfigError("pack_sequences: T must be positive");
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  cur.reserve(static_cast<size_t>(T));
  auto push_token = [&](int tok) {
    cur.push_back(tok);
    if (static_cast<int>(cur.size()) == T) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (const auto& doc : docs) {
    for (int tok : doc) push_token(tok);
    push_token(eos_id);
  }
  if (!cur.empty()) {
    cur.resize(static_cast<size_t>(T), pad_id);
    out.push_back(cur);
  }
  return out;
}

// Reads a corpus file (or every regular file in a directory, sorted by path)
// and returns its non-empty lines.
inline std::vector<std::string> load_corpus_lines(const std::string& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw DataError("corpus path does not exist: " + path);
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  std::vector<std::string> lines;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw DataError("cannot open corpus file: " + f.string());
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) lines.push_back(line);
    }
  }
  if (lines.empty()) throw DataError("corpus is empty: " + path);
  return lines;
}

// Epoch-wise seeded shuffling over sequence indices; the last partial batch
// of an epoch is dropped.
class BatchIterator {
 public:
  BatchIterator(size_t n_sequences, int batch_size, uint64_t seed)
      : n_(n_sequences), batch_(static_cast<size_t>(batch_size)), seed_(seed) {
    if (batch_size < 1) throw ConfigError("batch_iterator: batch size must be positive");
    if (n_sequences < static_cast<size_t>(batch_size))
      throw DataError("batch_iterator: fewer sequences than one batch");
    reshuffle();
  }

  std::vector<size_t> next() {
    if (cursor_ + batch_ > order_.size()) {
      ++epoch_;
      reshuffle();
    }
    std::vector<size_t> out(order_.begin() + static_cast<long>(cursor_),
                            order_.begin() + static_cast<long>(cursor_ + batch_));
    cursor_ += batch_;
    return out;
  }

  uint64_t epoch() const { return epoch_; }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (size_t i = 0; i < n_; ++i) order_[i] = i;
    Rng rng(mix_seed(seed_, epoch_, 0x9e3779b9ULL));
    for (size_t i = n_; i > 1; --i) {
      const size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)));
      std::swap(order_[i - 1], order_[j]);
    }
    cursor_ = 0;
  }

  size_t n_;
  size_t batch_;
  uint64_t seed_;
  uint64_t epoch_ = 0;
  size_t cursor_ = 0;
  std::vector<size_t> order_;
};

}  // namespace tracformer
