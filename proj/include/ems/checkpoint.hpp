// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoint file: "EMSC" | u32 version | u32 header_len | header JSON |
// u32 block_count | blocks, each: u32 name_len | name | u32 rows | u32 cols |
// rows*cols f32 (row-major). All integers little-endian.

#include "ems/corpus_io.hpp"
#include "ems/nn.hpp"

#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace ems {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// FNV-1a 64 over a byte string, rendered as 16 hex digits.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string architecture_hash(const nlohmann::json& arch) { return fnv1a_hex(arch.dump()); }

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, MatF>> blocks;

  const MatF* find(const std::string& name) const {
    for (const auto& [n, m] : blocks)
      if (n == name) return &m;
    return nullptr;
  }

  void put(const std::string& name, MatF m) {
    for (auto& [n, v] : blocks)
      if (n == name) {
        v = std::move(m);
        return;
      }
    blocks.emplace_back(name, std::move(m));
  }

  template <typename S>
  void put_params(const nn::ParamList<S>& params, const std::string& prefix = {}) {
    for (const auto* p : params) put(prefix + p->name, p->value.template cast<float>());
  }

  /// Copies stored blocks into the parameters; every parameter must be present with its shape.
  template <typename S>
  void load_params(const nn::ParamList<S>& params, const std::string& prefix = {}) const {
    for (auto* p : params) {
      const MatF* m = find(prefix + p->name);
      if (m == nullptr) throw ArchitectureMismatch("checkpoint lacks parameter block '" + prefix + p->name + "'");
      if (m->rows() != p->value.rows() || m->cols() != p->value.cols())
        throw ArchitectureMismatch("checkpoint block '" + prefix + p->name + "' has shape " + std::to_string(m->rows()) + "x" +
                                   std::to_string(m->cols()) + ", model expects " + std::to_string(p->value.rows()) + "x" +
                                   std::to_string(p->value.cols()));
      p->value = m->template cast<S>();
    }
  }
};

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::string buf("EMSC", 4);
  detail::put_u32(buf, kCheckpointVersion);
  const std::string header = ck.header.dump();
  detail::put_u32(buf, static_cast<std::uint32_t>(header.size()));
  buf += header;
  detail::put_u32(buf, static_cast<std::uint32_t>(ck.blocks.size()));
  for (const auto& [name, m] : ck.blocks) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put_u32(buf, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(buf, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(buf, m.data()[i]);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, buf);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string buf = detail::read_file(path);
  auto need = [&](std::size_t off, std::size_t n) {
    if (off + n > buf.size()) throw CorpusError("checkpoint " + path.string() + " is truncated");
  };
  need(0, 12);
  if (buf.compare(0, 4, "EMSC") != 0) throw CorpusError("checkpoint " + path.string() + " has a bad magic");
  if (detail::get_u32(buf, 4) != kCheckpointVersion) throw CorpusError("checkpoint " + path.string() + " has an unsupported version");
  const std::size_t hlen = detail::get_u32(buf, 8);
  need(12, hlen + 4);
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(buf.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError("checkpoint " + path.string() + " header does not parse: " + e.what());
  }
  std::size_t off = 12 + hlen;
  const std::uint32_t count = detail::get_u32(buf, off);
  off += 4;
  for (std::uint32_t b = 0; b < count; ++b) {
    need(off, 4);
    const std::size_t nlen = detail::get_u32(buf, off);
    off += 4;
    need(off, nlen + 8);
    std::string name = buf.substr(off, nlen);
    off += nlen;
    const std::uint32_t rows = detail::get_u32(buf, off), cols = detail::get_u32(buf, off + 4);
    off += 8;
    need(off, 4ULL * rows * cols);
    MatF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i, off += 4) m.data()[i] = detail::get_f32(buf, off);
    ck.blocks.emplace_back(std::move(name), std::move(m));
  }
  if (off != buf.size()) throw CorpusError("checkpoint " + path.string() + " has trailing bytes");
  return ck;
}

inline void check_architecture(const Checkpoint& ck, const std::string& kind, const std::string& expected_hash) {
  const std::string got_kind = ck.header.value("kind", std::string());
  const std::string got_hash = ck.header.value("arch_hash", std::string());
  if (got_kind != kind || got_hash != expected_hash)
    throw ArchitectureMismatch("checkpoint architecture mismatch: file has kind '" + got_kind + "' hash " + got_hash +
                               ", configuration expects kind '" + kind + "' hash " + expected_hash);
}

}  // namespace ems
