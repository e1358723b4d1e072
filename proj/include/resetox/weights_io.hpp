#pragma once

// Weight file layout:
//
//   resetox-weights 1
//   <config key> = <value>          one line per ModelConfig field
//   tensor = <name> <RxC> <offset>  offset counted in doubles
//   end
//   <raw little-endian float64 payload, tensors in manifest order>
//   <CRC-32 of every preceding byte, 4 bytes little-endian>

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "resetox/errors.hpp"
#include "resetox/kv_config.hpp"
#include "resetox/model.hpp"

namespace resetox {

namespace detail {

inline constexpr const char* kWeightsMagic = "resetox-weights 1";

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t length) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(length)));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline std::string config_header(const ModelConfig& c) {
  std::ostringstream h;
  h << "vocab_size = " << c.vocab_size << '\n'
    << "d_model = " << c.d_model << '\n'
    << "n_heads = " << c.n_heads << '\n'
    << "d_k = " << c.d_k << '\n'
    << "n_layers_enc = " << c.n_layers_enc << '\n'
    << "n_layers_dec = " << c.n_layers_dec << '\n'
    << "d_ff = " << c.d_ff << '\n'
    << "max_len = " << c.max_len << '\n';
  return h.str();
}

inline Shape parse_shape(const std::string& s) {
  Shape shape;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, 'x')) {
    try {
      shape.push_back(std::stoul(part));
    } catch (const std::exception&) {
      throw FormatError("weights: bad shape '" + s + "'");
    }
  }
  return shape;
}

}  // namespace detail

inline std::string serialize_weights(const ModelParams& p) {
  std::ostringstream header;
  header << detail::kWeightsMagic << '\n' << detail::config_header(p.config);
  std::size_t offset = 0;
  for (const auto& [name, t] : p.named_tensors()) {
    header << "tensor = " << name << ' ' << t.rows() << 'x' << t.cols() << ' ' << offset << '\n';
    offset += t.size();
  }
  header << "end\n";
  std::string bytes = header.str();
  bytes.reserve(bytes.size() + offset * 8 + 4);
  for (const auto& [name, t] : p.named_tensors())
    for (double v : t.data()) detail::put_u64(bytes, std::bit_cast<std::uint64_t>(v));
  const std::uint32_t crc = detail::crc32_of(bytes, bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((crc >> (8 * i)) & 0xFF));
  return bytes;
}

// Throws FormatError on a bad checksum, a malformed manifest, or tensor
// shapes that disagree with the manifest's config (or with `expected`).
inline ModelParams deserialize_weights(const std::string& bytes,
                                       const std::optional<ModelConfig>& expected = {}) {
  if (bytes.size() < 4) throw FormatError("weights: file too short");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  if (stored != detail::crc32_of(bytes, body)) throw FormatError("weights: checksum mismatch");

  const std::string end_marker = "\nend\n";
  const auto end_pos = bytes.find(end_marker);
  if (end_pos == std::string::npos || end_pos >= body)
    throw FormatError("weights: manifest has no end marker");
  const std::size_t payload = end_pos + end_marker.size();
  std::istringstream header(bytes.substr(0, end_pos + 1));
  std::string line;
  std::getline(header, line);
  if (line != detail::kWeightsMagic) throw FormatError("weights: bad magic line");

  std::ostringstream config_text;
  std::vector<std::string> tensor_lines;
  while (std::getline(header, line)) {
    if (line.rfind("tensor = ", 0) == 0)
      tensor_lines.push_back(line.substr(9));
    else
      config_text << line << '\n';
  }
  std::istringstream cfg_stream(config_text.str());
  const auto kv = KeyValueConfig::parse(cfg_stream, "weights manifest");
  ModelConfig c;
  auto field = [&](const char* key) {
    if (!kv.has(key)) throw FormatError(std::string("weights: manifest lacks ") + key);
    const auto v = kv.get_int(key, 0);
    if (v <= 0) throw FormatError(std::string("weights: bad value for ") + key);
    return static_cast<std::size_t>(v);
  };
  c.vocab_size = field("vocab_size");
  c.d_model = field("d_model");
  c.n_heads = field("n_heads");
  c.d_k = field("d_k");
  c.n_layers_enc = field("n_layers_enc");
  c.n_layers_dec = field("n_layers_dec");
  c.d_ff = field("d_ff");
  c.max_len = field("max_len");
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("weights: ") + e.what());
  }
  if (expected && !(*expected == c)) {
    // Report the first tensor whose shape differs between the two configs.
    const auto want = ModelParams::layout(*expected);
    const auto have = ModelParams::layout(c);
    for (std::size_t i = 0; i < std::min(want.size(), have.size()); ++i)
      if (want[i] != have[i])
        throw FormatError("weights: tensor " + have[i].first + " has shape " +
                          shape_string(have[i].second) + ", expected " +
                          shape_string(want[i].second));
    throw FormatError("weights: model config differs from the expected one");
  }

  const auto layout = ModelParams::layout(c);
  if (tensor_lines.size() != layout.size())
    throw FormatError("weights: manifest lists " + std::to_string(tensor_lines.size()) +
                      " tensors, config implies " + std::to_string(layout.size()));
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    std::istringstream fields(tensor_lines[i]);
    std::string name, shape_text;
    std::size_t offset = 0;
    if (!(fields >> name >> shape_text >> offset))
      throw FormatError("weights: malformed tensor line '" + tensor_lines[i] + "'");
    if (name != layout[i].first)
      throw FormatError("weights: expected tensor " + layout[i].first + ", found " + name);
    const Shape shape = detail::parse_shape(shape_text);
    if (shape != layout[i].second)
      throw FormatError("weights: tensor " + name + " has shape " + shape_string(shape) +
                        ", config requires " + shape_string(layout[i].second));
    if (offset != expected_offset)
      throw FormatError("weights: tensor " + name + " has offset " + std::to_string(offset) +
                        ", expected " + std::to_string(expected_offset));
    expected_offset += detail::shape_product(shape);
  }
  if (payload + expected_offset * 8 != body)
    throw FormatError("weights: payload holds " + std::to_string((body - payload) / 8) +
                      " values, manifest needs " + std::to_string(expected_offset));

  std::size_t cursor = payload;
  return ModelParams::build(c, [&](const Shape& s, const std::string&) {
    std::vector<double> v(detail::shape_product(s));
    for (auto& x : v) {
      x = std::bit_cast<double>(detail::get_u64(bytes, cursor));
      cursor += 8;
    }
    return Tensor(s, std::move(v));
  });
}

inline void save_weights(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write weights to " + path);
  const std::string bytes = serialize_weights(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

inline ModelParams load_weights(const std::string& path,
                                const std::optional<ModelConfig>& expected = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes, expected);
}

// CRC-32 of the serialized weights; equal checksums mean equal parameters.
inline std::uint32_t weights_checksum(const ModelParams& p) {
  const std::string bytes = serialize_weights(p);
  return detail::crc32_of(bytes, bytes.size() - 4);
}

}  // namespace resetox
