#pragma once

// Token corpora: a directory holding tokens.u32 (little-endian u32 ids) and
// corpus.json {vocab_size, count}.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfsp/checkpoint.hpp"
#include "cfsp/error.hpp"
#include "cfsp/random.hpp"

namespace cfsp {

struct Corpus {
  std::size_t vocab_size = 0;
  std::vector<std::uint32_t> tokens;
};

inline void save_corpus(const Corpus& corpus, const fs::path& dir) {
  std::string blob(corpus.tokens.size() * 4, '\0');
  for (std::size_t i = 0; i < corpus.tokens.size(); ++i) {
    for (int b = 0; b < 4; ++b) blob[4 * i + b] = static_cast<char>((corpus.tokens[i] >> (8 * b)) & 0xFFu);
  }
  fs::create_directories(dir);
  write_file(dir / "tokens.u32", blob);
  write_json(dir / "corpus.json", {{"vocab_size", corpus.vocab_size}, {"count", corpus.tokens.size()}});
}

inline Corpus load_corpus(const fs::path& dir) {
  const auto meta = read_json(dir / "corpus.json");
  Corpus c;
  std::size_t count = 0;
  try {
    c.vocab_size = meta.at("vocab_size").get<std::size_t>();
    count = meta.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("corpus.json: ") + e.what());
  }
  const std::string blob = read_file(dir / "tokens.u32");
  if (blob.size() % 4 != 0) fail(ErrorCode::truncated, "tokens.u32: length is not a multiple of 4");
  if (blob.size() / 4 != count) {
    fail(ErrorCode::validation, "tokens.u32 holds " + std::to_string(blob.size() / 4) +
                                    " tokens but corpus.json says " + std::to_string(count));
  }
  if (count == 0) fail(ErrorCode::input, "corpus is empty");
  c.tokens.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[4 * i + b])) << (8 * b);
    if (v >= c.vocab_size) fail(ErrorCode::validation, "tokens.u32: token " + std::to_string(i) + " exceeds vocab_size");
    c.tokens[i] = v;
  }
  return c;
}

/// Copy-task corpus: runs of a repeated token, tokens drawn from the first
/// `alphabet` ids. Next-token prediction is mostly "repeat the current token".
inline Corpus make_copy_corpus(std::size_t vocab_size, std::size_t n_tokens, std::size_t alphabet,
                               std::size_t run_length, std::uint64_t seed) {
  if (alphabet < 1 || alphabet > vocab_size || run_length < 1) {
    fail(ErrorCode::config, "copy corpus: need 1 <= alphabet <= vocab_size and run_length >= 1");
  }
  Rng rng(seed);
  Corpus c;
  c.vocab_size = vocab_size;
  c.tokens.reserve(n_tokens);
  while (c.tokens.size() < n_tokens) {
    const auto tok = static_cast<std::uint32_t>(rng.below(alphabet));
    for (std::size_t r = 0; r < run_length && c.tokens.size() < n_tokens; ++r) c.tokens.push_back(tok);
  }
  return c;
}

}  // namespace cfsp
