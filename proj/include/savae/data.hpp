#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "savae/error.hpp"
#include "savae/models.hpp"
#include "savae/oracle.hpp"
#include "savae/rng.hpp"

namespace savae::data {

namespace fs = std::filesystem;

/// One sequence per line, tokens as space-separated integers.
inline void write_tokens(const fs::path& path, const std::vector<std::vector<int>>& seqs) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t < s.size(); ++t) os << (t ? " " : "") << s[t];
    os << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

/// Reads a token file. Blank lines are skipped; tokens must lie in [0, vocab)
/// when vocab is nonzero.
inline std::vector<std::vector<int>> read_tokens(const fs::path& path, std::size_t vocab = 0) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::vector<int>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<int> seq;
    long tok;
    while (ls >> tok) {
      if (tok < 0 || (vocab && static_cast<std::size_t>(tok) >= vocab))
        throw VocabError(tok, static_cast<long>(vocab));
      seq.push_back(static_cast<int>(tok));
    }
    if (!ls.eof()) throw IoError(path.string() + ":" + std::to_string(lineno) + ": not an integer token");
    if (!seq.empty()) out.push_back(std::move(seq));
  }
  return out;
}

inline void write_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  write_tokens(dir / "train.txt", ds.train);
  write_tokens(dir / "valid.txt", ds.valid);
  write_tokens(dir / "test.txt", ds.test);
}

inline Dataset read_dataset(const fs::path& dir, std::size_t vocab = 0) {
  for (const char* f : {"train.txt", "valid.txt", "test.txt"})
    if (!fs::exists(dir / f)) throw IoError("missing dataset file " + (dir / f).string());
  return {read_tokens(dir / "train.txt", vocab), read_tokens(dir / "valid.txt", vocab),
          read_tokens(dir / "test.txt", vocab)};
}

/// Token frequency over a corpus, one count per vocabulary entry.
inline std::vector<std::size_t> token_counts(const std::vector<std::vector<int>>& seqs, std::size_t vocab) {
  std::vector<std::size_t> counts(vocab, 0);
  for (const auto& s : seqs)
    for (int t : s) ++counts.at(static_cast<std::size_t>(t));
  return counts;
}

/// Index groups of at most batch_size sequences, each group of equal length.
/// With a seed the order inside each length group and the order of the
/// batches are shuffled; without one, batches follow corpus order.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::vector<int>>& seqs,
                                                          std::size_t batch_size,
                                                          std::optional<std::uint64_t> shuffle_seed = {}) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < seqs.size(); ++i) by_length[seqs[i].size()].push_back(i);
  std::mt19937_64 rng(shuffle_seed.value_or(0));
  std::vector<std::vector<std::size_t>> out;
  for (auto& [len, idx] : by_length) {
    if (shuffle_seed) std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t b = 0; b < idx.size(); b += batch_size)
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + batch_size)));
  }
  if (shuffle_seed) std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline TokenBatch gather(const std::vector<std::vector<int>>& seqs, const std::vector<std::size_t>& idx) {
  std::vector<std::vector<int>> rows;
  rows.reserve(idx.size());
  for (auto i : idx) rows.push_back(seqs[i]);
  return TokenBatch(rows);
}

}  // namespace savae::data
