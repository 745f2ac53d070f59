// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// On-disk corpus: <dir>/manifest.json plus <dir>/records/<id>.feat.
//
// Record layout (little-endian):
//   "EMSF" | u32 version | u32 T | u32 d | T*d f32 frames (row-major) | T f32 intensity
//
// Frame unit labels live in the manifest next to each record.

#include "ems/corpus.hpp"

#include "json.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace ems {

inline constexpr char kRecordMagic[4] = {'E', 'M', 'S', 'F'};
inline constexpr std::uint32_t kRecordVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& buf, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(buf, v);
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

inline float get_f32(const std::string& buf, std::size_t off) {
  const std::uint32_t v = get_u32(buf, off);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + p.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CorpusError("short write on " + p.string());
}

}  // namespace detail

inline std::string encode_record(const FeatureSequence& fs) {
  const auto T = static_cast<std::uint32_t>(fs.frames.rows());
  const auto d = static_cast<std::uint32_t>(fs.frames.cols());
  if (fs.truth_frame_intensity.size() != T) throw DimensionError("encode_record: intensity length != T");
  std::string buf;
  buf.reserve(16 + 4 * (static_cast<std::size_t>(T) * d + T));
  buf.append(kRecordMagic, 4);
  detail::put_u32(buf, kRecordVersion);
  detail::put_u32(buf, T);
  detail::put_u32(buf, d);
  for (std::uint32_t t = 0; t < T; ++t)
    for (std::uint32_t j = 0; j < d; ++j) detail::put_f32(buf, fs.frames(t, j));
  for (float v : fs.truth_frame_intensity) detail::put_f32(buf, v);
  return buf;
}

/// Parses a record; `who` names the record in diagnostics.
inline void decode_record(const std::string& buf, FeatureSequence& fs, const std::string& who) {
  if (buf.size() < 16 || std::memcmp(buf.data(), kRecordMagic, 4) != 0) throw CorpusError("corrupt corpus: bad header in record " + who);
  if (detail::get_u32(buf, 4) != kRecordVersion) throw CorpusError("corrupt corpus: unsupported version in record " + who);
  const std::uint32_t T = detail::get_u32(buf, 8), d = detail::get_u32(buf, 12);
  const std::size_t need = 16 + 4 * (static_cast<std::size_t>(T) * d + T);
  if (buf.size() != need) throw CorpusError("corrupt corpus: size mismatch in record " + who);
  fs.frames.resize(T, d);
  std::size_t off = 16;
  for (std::uint32_t t = 0; t < T; ++t)
    for (std::uint32_t j = 0; j < d; ++j, off += 4) fs.frames(t, j) = detail::get_f32(buf, off);
  fs.truth_frame_intensity.resize(T);
  for (std::uint32_t t = 0; t < T; ++t, off += 4) fs.truth_frame_intensity[t] = detail::get_f32(buf, off);
}

/// Writes every record plus the manifest; returns the manifest.
inline nlohmann::json write_corpus(const std::vector<FeatureSequence>& data, const std::filesystem::path& dir,
                                   const nlohmann::json& extra = nlohmann::json::object()) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "records", ec);
  if (ec) throw CorpusError("cannot create " + (dir / "records").string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "ems-corpus";
  manifest["version"] = kRecordVersion;
  manifest["frame_rate"] = data.empty() ? 0.0 : data.front().frame_rate;
  manifest["meta"] = extra;
  auto& records = manifest["records"] = nlohmann::json::array();
  for (const auto& r : data) {
    if (r.utterance_id.empty()) throw CorpusError("write_corpus: record without id");
    const std::string file = "records/" + r.utterance_id + ".feat";
    detail::write_file(dir / file, encode_record(r));
    records.push_back({{"id", r.utterance_id},
                       {"label", std::string(emotion_name(r.emotion))},
                       {"T", r.frames.rows()},
                       {"d", r.frames.cols()},
                       {"file", file},
                       {"units", r.frame_units}});
  }
  detail::write_file(dir / "manifest.json", manifest.dump(1) + "\n");
  return manifest;
}

struct CorpusData {
  nlohmann::json manifest;
  std::vector<FeatureSequence> records;
};

inline CorpusData read_corpus(const std::filesystem::path& dir) {
  CorpusData out;
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath)) throw CorpusError("corrupt corpus: missing manifest " + mpath.string());
  try {
    out.manifest = nlohmann::json::parse(detail::read_file(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(std::string("corrupt corpus: manifest does not parse: ") + e.what());
  }
  try {
    if (out.manifest.at("format") != "ems-corpus") throw CorpusError("corrupt corpus: not an ems corpus manifest");
    const double frame_rate = out.manifest.at("frame_rate").get<double>();
    for (const auto& rec : out.manifest.at("records")) {
      FeatureSequence fs;
      fs.utterance_id = rec.at("id").get<std::string>();
      fs.emotion = parse_emotion(rec.at("label").get<std::string>());
      fs.frame_rate = frame_rate;
      const auto path = dir / rec.at("file").get<std::string>();
      if (!std::filesystem::exists(path)) throw CorpusError("corrupt corpus: record " + fs.utterance_id + " is missing (" + path.string() + ")");
      decode_record(detail::read_file(path), fs, fs.utterance_id);
      if (fs.frames.rows() != rec.at("T").get<Eigen::Index>() || fs.frames.cols() != rec.at("d").get<Eigen::Index>())
        throw CorpusError("corrupt corpus: record " + fs.utterance_id + " dimensions disagree with manifest");
      fs.frame_units = rec.value("units", std::vector<int>{});
      if (!fs.frame_units.empty() && static_cast<Eigen::Index>(fs.frame_units.size()) != fs.frames.rows())
        throw CorpusError("corrupt corpus: record " + fs.utterance_id + " unit labels disagree with T");
      out.records.push_back(std::move(fs));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(std::string("corrupt corpus: malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorpusError(std::string("corrupt corpus: ") + e.what());
  }
  return out;
}

}  // namespace ems
