#pragma once

// Minimal safetensors reader/writer.
//
// Layout: u64 little-endian header length N, N bytes of UTF-8 JSON mapping tensor
// name -> {dtype, shape, data_offsets}, then the raw row-major payload. Offsets are
// relative to the first byte after the header. F32, F16 and BF16 are accepted on
// read and widened to f32; writes are always F32.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "laco/error.hpp"
#include "laco/tensor.hpp"

namespace laco::safetensors {

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes a little-endian host");

enum class DType { f32, f16, bf16 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 2; }

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "F32";
    case DType::f16: return "F16";
    case DType::bf16: return "BF16";
  }
  return "?";
}

inline float bf16_to_f32(std::uint16_t h) { return std::bit_cast<float>(std::uint32_t(h) << 16); }

inline float f16_to_f32(std::uint16_t h) {
  const std::uint32_t sign = std::uint32_t(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

struct TensorInfo {
  DType dtype = DType::f32;
  Shape shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
};

/// An opened safetensors file; the header is parsed eagerly, payloads are read on demand.
class File {
 public:
  explicit File(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw IoError("cannot open " + path_.string());
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    std::uint64_t header_len = 0;
    if (file_size < 8 || !in.read(reinterpret_cast<char*>(&header_len), 8)) {
      throw FormatError(path_.string() + ": file too short for a safetensors header");
    }
    if (header_len > file_size - 8) {
      throw FormatError(path_.string() + ": header length " + std::to_string(header_len) +
                        " exceeds file size");
    }
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    data_start_ = 8 + header_len;
    const std::uint64_t payload_size = file_size - data_start_;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path_.string() + ": unparsable header: " + e.what());
    }
    if (!j.is_object()) throw FormatError(path_.string() + ": header is not a JSON object");

    for (const auto& [name, entry] : j.items()) {
      if (name == "__metadata__") continue;
      try {
        TensorInfo info;
        const std::string dt = entry.at("dtype").get<std::string>();
        if (dt == "F32") {
          info.dtype = DType::f32;
        } else if (dt == "F16") {
          info.dtype = DType::f16;
        } else if (dt == "BF16") {
          info.dtype = DType::bf16;
        } else {
          throw FormatError(path_.string() + ": tensor " + name + " has unsupported dtype " + dt);
        }
        info.shape = entry.at("shape").get<Shape>();
        const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
        if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > payload_size) {
          throw FormatError(path_.string() + ": tensor " + name + " has invalid data_offsets");
        }
        info.begin = offsets[0];
        info.end = offsets[1];
        if (info.end - info.begin != shape_numel(info.shape) * dtype_size(info.dtype)) {
          throw FormatError(path_.string() + ": tensor " + name +
                            " byte range does not match its shape and dtype");
        }
        tensors_.emplace(name, std::move(info));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(path_.string() + ": malformed entry for " + name + ": " + e.what());
      }
    }
  }

  const std::filesystem::path& path() const { return path_; }
  const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  /// Reads one tensor and widens it to f32.
  Tensor read(const std::string& name) const {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw StructuralError("missing tensor " + name);
    const TensorInfo& info = it->second;
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw IoError("cannot open " + path_.string());
    in.seekg(static_cast<std::streamoff>(data_start_ + info.begin));
    const std::size_t n = shape_numel(info.shape);
    std::vector<float> out(n);
    if (info.dtype == DType::f32) {
      in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * 4));
    } else {
      std::vector<std::uint16_t> half(n);
      in.read(reinterpret_cast<char*>(half.data()), static_cast<std::streamsize>(n * 2));
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = info.dtype == DType::f16 ? f16_to_f32(half[i]) : bf16_to_f32(half[i]);
      }
    }
    if (!in) throw IoError(path_.string() + ": short read for tensor " + name);
    return Tensor(info.shape, std::move(out));
  }

 private:
  std::filesystem::path path_;
  std::uint64_t data_start_ = 0;
  std::map<std::string, TensorInfo> tensors_;
};

/// Writes F32 tensors in the given order. Header keys are emitted sorted, padded to 8 bytes.
inline void write(const std::filesystem::path& path,
                  const std::vector<std::pair<std::string, const Tensor*>>& entries) {
  nlohmann::json header = nlohmann::json::object();
  header["__metadata__"] = {{"format", "pt"}};
  std::uint64_t offset = 0;
  for (const auto& [name, t] : entries) {
    const std::uint64_t bytes = t->numel() * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t->shape()}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : entries) {
    out.write(reinterpret_cast<const char*>(t->raw()),
              static_cast<std::streamsize>(t->numel() * sizeof(float)));
  }
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace laco::safetensors
