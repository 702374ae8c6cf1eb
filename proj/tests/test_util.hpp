#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "cfsp/model.hpp"
#include "cfsp/random.hpp"

namespace cfsp::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cfsp_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::uint32_t> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint32_t> t(n);
  for (auto& v : t) v = static_cast<std::uint32_t>(rng.below(vocab));
  return t;
}

inline ModelConfig tiny_config(std::size_t blocks = 2, std::size_t d_ff = 16) {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_blocks = blocks;
  c.d_ff_per_block.assign(blocks, d_ff);
  c.max_seq_len = 128;
  return c;
}

}  // namespace cfsp::testing

using cfsp::testing::TempDir;
