#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "xduct/errors.hpp"

namespace xduct {

// Bidirectional symbol <-> index map. Indices 0..3 are reserved for padding,
// begin-of-sequence, end-of-sequence and unknown; data symbols start at 4 and
// never share an index with the reserved entries, even if spelled the same.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary() : symbols_{"<pad>", "<s>", "</s>", "<unk>"} {}

  // Rebuilds a vocabulary from its data symbols in index order.
  static Vocabulary from_data_symbols(const std::vector<std::string>& data_symbols) {
    Vocabulary v;
    for (const auto& s : data_symbols) {
      if (v.index_.count(s)) throw FormatError("duplicate vocabulary symbol '" + s + "'");
      v.add(s);
    }
    return v;
  }

  int add(const std::string& symbol) {
    auto it = index_.find(symbol);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(symbols_.size());
    symbols_.push_back(symbol);
    index_.emplace(symbol, id);
    return id;
  }

  bool contains(const std::string& symbol) const { return index_.count(symbol) != 0; }

  int index(const std::string& symbol) const {
    auto it = index_.find(symbol);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& symbol(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
      throw EncodingError("vocabulary index " + std::to_string(id) + " out of range");
    }
    return symbols_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return symbols_.size(); }

  std::vector<std::string> data_symbols() const {
    return std::vector<std::string>(symbols_.begin() + kReserved, symbols_.end());
  }

  std::vector<int> encode(const std::vector<std::string>& seq) const {
    std::vector<int> out;
    out.reserve(seq.size());
    for (const auto& s : seq) out.push_back(index(s));
    return out;
  }

  // Maps indices back to symbols, dropping PAD/BOS/EOS.
  std::vector<std::string> decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    for (int id : ids) {
      if (id == kPad || id == kBos || id == kEos) continue;
      out.push_back(symbol(id));
    }
    return out;
  }

  static bool is_special(int id) { return id >= 0 && static_cast<std::size_t>(id) < kReserved; }

  bool operator==(const Vocabulary& other) const { return symbols_ == other.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace xduct
