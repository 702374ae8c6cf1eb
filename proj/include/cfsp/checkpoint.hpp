#pragma once

// Checkpoint directories: manifest.json (format version, config, tensor
// table) plus weights.bin (little-endian f32, tensors contiguous in manifest
// order). The same container carries adapter checkpoints.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfsp/error.hpp"
#include "cfsp/model.hpp"

namespace cfsp {

inline constexpr int kFormatVersion = 1;

namespace fs = std::filesystem;

struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

struct TensorArchive {
  nlohmann::json manifest;  // everything except the tensor table
  std::vector<TensorEntry> tensors;

  const TensorEntry& get(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    fail(ErrorCode::missing_tensor, "checkpoint: tensor '" + name + "' is missing");
  }
  bool contains(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return true;
    }
    return false;
  }
};

// --- byte helpers -----------------------------------------------------------

inline void append_f32_le(std::string& out, std::span<const float> values) {
  const std::size_t base = out.size();
  out.resize(base + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[base + i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
}

inline float read_f32_le(const char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<float>(bits);
}

inline void append_f64_le(std::string& out, std::span<const double> values) {
  const std::size_t base = out.size();
  out.resize(base + values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) out[base + i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
}

inline double read_f64_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<double>(bits);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "short write to " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::validation, path.string() + ": invalid JSON: " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

// --- archive ----------------------------------------------------------------

inline void save_archive(const TensorArchive& archive, const fs::path& dir) {
  nlohmann::json manifest = archive.manifest;
  manifest["format_version"] = kFormatVersion;
  nlohmann::json table = nlohmann::json::array();
  std::string blob;
  for (const auto& t : archive.tensors) {
    if (t.data.size() != t.numel()) {
      fail(ErrorCode::shape_mismatch, "checkpoint: tensor '" + t.name + "' data does not match its shape");
    }
    const std::size_t offset = blob.size();
    append_f32_le(blob, t.data);
    table.push_back({{"name", t.name},
                     {"dtype", "f32"},
                     {"shape", t.shape},
                     {"byte_offset", offset},
                     {"byte_len", blob.size() - offset}});
  }
  manifest["tensors"] = std::move(table);
  fs::create_directories(dir);
  write_file(dir / "weights.bin", blob);
  write_json(dir / "manifest.json", manifest);
}

inline TensorArchive load_archive(const fs::path& dir) {
  TensorArchive archive;
  archive.manifest = read_json(dir / "manifest.json");
  auto& m = archive.manifest;
  if (!m.contains("format_version") || !m["format_version"].is_number_integer()) {
    fail(ErrorCode::validation, "checkpoint: manifest lacks format_version");
  }
  if (m["format_version"].get<int>() != kFormatVersion) {
    fail(ErrorCode::unknown_version,
         "checkpoint: unknown format_version " + m["format_version"].dump() + " (expected " +
             std::to_string(kFormatVersion) + ")");
  }
  const nlohmann::json table = m.value("tensors", nlohmann::json::array());
  m.erase("tensors");
  if (table.empty()) return archive;

  const std::string blob = read_file(dir / "weights.bin");
  std::size_t expected_offset = 0;
  for (const auto& e : table) {
    TensorEntry t;
    try {
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<std::vector<std::size_t>>();
      if (e.at("dtype").get<std::string>() != "f32") {
        fail(ErrorCode::validation, "checkpoint: tensor '" + t.name + "' has unsupported dtype");
      }
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorCode::validation, std::string("checkpoint: malformed tensor entry: ") + ex.what());
    }
    const auto offset = e.at("byte_offset").get<std::size_t>();
    const auto len = e.at("byte_len").get<std::size_t>();
    if (len != t.numel() * 4) {
      fail(ErrorCode::shape_mismatch, "checkpoint: tensor '" + t.name + "' byte_len disagrees with its shape");
    }
    if (offset != expected_offset) {
      fail(ErrorCode::validation, "checkpoint: tensor '" + t.name + "' is not contiguous with its predecessor");
    }
    if (offset + len > blob.size()) {
      fail(ErrorCode::truncated, "checkpoint: weights.bin is truncated inside tensor '" + t.name + "' (need " +
                                     std::to_string(offset + len) + " bytes, have " + std::to_string(blob.size()) +
                                     ")");
    }
    t.data.resize(t.numel());
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = read_f32_le(blob.data() + offset + 4 * i);
    expected_offset = offset + len;
    archive.tensors.push_back(std::move(t));
  }
  if (expected_offset != blob.size()) {
    fail(ErrorCode::validation, "checkpoint: weights.bin has " + std::to_string(blob.size() - expected_offset) +
                                    " trailing bytes");
  }
  return archive;
}

// --- model checkpoints ------------------------------------------------------

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                      {"n_heads", c.n_heads},       {"n_blocks", c.n_blocks},
                      {"d_ff_per_block", c.d_ff_per_block}, {"norm_eps", c.norm_eps},
                      {"max_seq_len", c.max_seq_len}};
  if (c.n_kv_heads != 0 && c.n_kv_heads != c.n_heads) j["n_kv_heads"] = c.n_kv_heads;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_blocks = j.at("n_blocks").get<std::size_t>();
    c.d_ff_per_block = j.at("d_ff_per_block").get<std::vector<std::size_t>>();
    c.norm_eps = j.value("norm_eps", 1e-5);
    c.max_seq_len = j.value("max_seq_len", std::size_t{1024});
    c.n_kv_heads = j.value("n_kv_heads", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Reads only the config from a manifest; works on shape-only manifests that
/// carry no tensors. `path` may be the checkpoint directory or the manifest.
inline ModelConfig load_config(const fs::path& path) {
  const fs::path manifest = fs::is_directory(path) ? path / "manifest.json" : path;
  const auto j = read_json(manifest);
  if (!j.contains("config")) fail(ErrorCode::validation, manifest.string() + ": no config block");
  return config_from_json(j["config"]);
}

template <typename Fn>
void for_each_model_tensor(const ModelCheckpoint& m, Fn&& fn) {
  auto mat = [&](const std::string& name, const MatrixF& x) { fn(name, std::vector<std::size_t>{x.rows(), x.cols()}, x.flat()); };
  auto vec = [&](const std::string& name, const std::vector<float>& x) {
    fn(name, std::vector<std::size_t>{x.size()}, std::span<const float>(x));
  };
  mat("embedding", m.embedding);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& b = m.blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    vec(p + "attn_norm", b.attn_norm);
    mat(p + "attn.q", b.q);
    mat(p + "attn.k", b.k);
    mat(p + "attn.v", b.v);
    mat(p + "attn.o", b.o);
    vec(p + "ffn_norm", b.ffn_norm);
    mat(p + "ffn.up", b.up);
    mat(p + "ffn.gate", b.gate);
    mat(p + "ffn.down", b.down);
  }
  vec("final_norm", m.final_norm);
  mat("lm_head", m.lm_head);
}

inline TensorArchive model_to_archive(const ModelCheckpoint& m) {
  TensorArchive a;
  a.manifest["config"] = config_to_json(m.config);
  for_each_model_tensor(m, [&](const std::string& name, std::vector<std::size_t> shape, std::span<const float> data) {
    a.tensors.push_back({name, std::move(shape), std::vector<float>(data.begin(), data.end())});
  });
  return a;
}

inline void save_checkpoint(const ModelCheckpoint& m, const fs::path& dir) {
  validate_model(m);
  save_archive(model_to_archive(m), dir);
}

inline ModelCheckpoint load_checkpoint(const fs::path& dir) {
  const TensorArchive a = load_archive(dir);
  if (!a.manifest.contains("config")) fail(ErrorCode::validation, "checkpoint: manifest has no config block");
  ModelCheckpoint m;
  m.config = config_from_json(a.manifest["config"]);
  const auto& c = m.config;

  auto mat = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    const auto& t = a.get(name);
    if (t.shape != std::vector<std::size_t>{rows, cols}) {
      fail(ErrorCode::shape_mismatch, "checkpoint: tensor '" + name + "' has shape inconsistent with config");
    }
    return MatrixF(rows, cols, t.data);
  };
  auto vec = [&](const std::string& name, std::size_t n) {
    const auto& t = a.get(name);
    if (t.shape != std::vector<std::size_t>{n}) {
      fail(ErrorCode::shape_mismatch, "checkpoint: tensor '" + name + "' has shape inconsistent with config");
    }
    return t.data;
  };
  const std::size_t d = c.d_model;
  m.embedding = mat("embedding", c.vocab_size, d);
  for (std::size_t l = 0; l < c.n_blocks; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    const std::size_t f = c.d_ff_per_block[l];
    TransformerBlock<float> b;
    b.attn_norm = vec(p + "attn_norm", d);
    b.q = mat(p + "attn.q", d, d);
    b.k = mat(p + "attn.k", d, d);
    b.v = mat(p + "attn.v", d, d);
    b.o = mat(p + "attn.o", d, d);
    b.ffn_norm = vec(p + "ffn_norm", d);
    b.up = mat(p + "ffn.up", f, d);
    b.gate = mat(p + "ffn.gate", f, d);
    b.down = mat(p + "ffn.down", f, d);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = vec("final_norm", d);
  m.lm_head = mat("lm_head", d, c.vocab_size);
  validate_model(m);
  return m;
}

/// Size of weights.bin for this model: every tensor as f32.
inline std::uint64_t checkpoint_bytes(const ModelCheckpoint& m) {
  std::uint64_t bytes = 0;
  for_each_model_tensor(m, [&](const std::string&, const std::vector<std::size_t>&, std::span<const float> data) {
    bytes += data.size() * 4;
  });
  return bytes;
}

/// FNV-1a over a byte string; used for provenance digests.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

}  // namespace cfsp
