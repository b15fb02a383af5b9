#pragma once

// Checkpoint container:
//   8-byte magic "MGRCCKPT" | u32 version | u64 header length | JSON header | raw data
// The header holds the encoder config, the scalar type, the optimizer step
// and one entry per tensor (group, name, shape, byte offset into the data
// block). Tensor data is little-endian.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgrc/heads.hpp"
#include "mgrc/optimizer.hpp"

namespace mgrc {

inline constexpr char kCheckpointMagic[8] = {'M', 'G', 'R', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  EncoderConfig config;
  ParamStore<T> params;
  std::optional<AdamState<T>> adam;
  /// Free-form metadata (training config, vocab path, ...).
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "checkpoints store float or double");
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class U>
void write_le(std::ostream& out, U value) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U read_le(std::istream& in, const std::string& path) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw FormatError(path + ": truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  using nlohmann::json;
  std::vector<std::pair<std::string, const ParamStore<T>*>> groups{{"param", &ck.params}};
  if (ck.adam) {
    groups.push_back({"adam_m", &ck.adam->m});
    groups.push_back({"adam_v", &ck.adam->v});
  }
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& [group, store] : groups)
    for (const auto& [name, t] : *store) {
      tensors.push_back({{"group", group}, {"name", name}, {"shape", t.shape()}, {"offset", offset}});
      offset += t.size() * sizeof(T);
    }
  json header{{"config", to_json(ck.config)},
              {"dtype", detail::dtype_name<T>()},
              {"step", ck.adam ? json(ck.adam->step) : json(nullptr)},
              {"tensors", std::move(tensors)},
              {"extra", ck.extra}};
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_le(out, kCheckpointVersion);
    detail::write_le(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [group, store] : groups)
      for (const auto& [name, t] : *store)
        for (T v : t.data()) detail::write_le(out, v);
    if (!out) throw FormatError("short write to checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move checkpoint into place at " + path);
}

/// Loads and validates every tensor shape against the stored config.
template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  using nlohmann::json;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw FormatError(path + " is not a checkpoint");
  const auto version = detail::read_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto header_len = detail::read_le<std::uint64_t>(in, path);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw FormatError(path + ": truncated header");

  Checkpoint<T> ck;
  try {
    const json header = json::parse(text);
    if (header.at("dtype").get<std::string>() != detail::dtype_name<T>())
      throw FormatError(path + ": stored dtype " + header["dtype"].get<std::string>() + " does not match");
    ck.config = encoder_config_from_json(header.at("config"));
    ck.config.validate();
    ck.extra = header.value("extra", json::object());
    const bool has_adam = !header.at("step").is_null();
    if (has_adam) {
      ck.adam.emplace();
      ck.adam->step = header["step"].get<std::uint64_t>();
    }
    std::uint64_t expected_offset = 0;
    for (const json& e : header.at("tensors")) {
      const auto group = e.at("group").get<std::string>();
      const auto name = e.at("name").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      if (e.at("offset").get<std::uint64_t>() != expected_offset) throw FormatError(path + ": tensor " + name + " out of order");
      Tensor<T> t(shape);
      for (T& v : t.data()) v = detail::read_le<T>(in, path);
      expected_offset += t.size() * sizeof(T);
      if (group == "param") {
        ck.params.add(name, std::move(t));
      } else if (has_adam && group == "adam_m") {
        ck.adam->m.add(name, std::move(t));
      } else if (has_adam && group == "adam_v") {
        ck.adam->v.add(name, std::move(t));
      } else {
        throw FormatError(path + ": unknown tensor group " + group);
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": malformed checkpoint header: " + e.what());
  } catch (const ContractError& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after tensor data");

  const auto specs = model_param_specs(ck.config);
  check_params(ck.params, specs);
  if (ck.adam) {
    check_params(ck.adam->m, specs);
    check_params(ck.adam->v, specs);
  }
  return ck;
}

}  // namespace mgrc
