#include "circuitscope/archive.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "circuitscope/error.hpp"
#include "json.hpp"

namespace circuitscope {

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void NamedTensorArchive::insert(std::string name, Tensor tensor) {
  if (tensor.numel() != static_cast<std::int64_t>(tensor.data.size())) {
    fail(ErrorCode::kShapeMismatch, name + ": data length " +
                                        std::to_string(tensor.data.size()) +
                                        " != product of shape " +
                                        std::to_string(tensor.numel()));
  }
  entries_[std::move(name)] = std::move(tensor);
}

const Tensor& NamedTensorArchive::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorCode::kMissingTensor, name);
  return it->second;
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exponent = (h >> 10) & 0x1fu;
  std::uint32_t mantissa = h & 0x3ffu;
  std::uint32_t bits;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      int e = -1;
      do {
        ++e;
        mantissa <<= 1;
      } while ((mantissa & 0x400u) == 0);
      mantissa &= 0x3ffu;
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mantissa << 13);
    }
  } else if (exponent == 0x1f) {
    bits = sign | 0x7f800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

float bfloat16_to_float(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

namespace {

template <typename T>
T read_le(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<std::uint8_t*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  if (dtype == "F64") return 8;
  fail(ErrorCode::kUnsupportedFormat, "safetensors dtype " + dtype);
}

}  // namespace

NamedTensorArchive NamedTensorArchive::parse_safetensors(
    std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) fail(ErrorCode::kParse, "safetensors: truncated header length");
  const auto header_len = read_le<std::uint64_t>(bytes.data());
  if (header_len > bytes.size() - 8) fail(ErrorCode::kParse, "safetensors: header overruns file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, std::string("safetensors header: ") + e.what());
  }
  const std::uint8_t* payload = bytes.data() + 8 + header_len;
  const std::size_t payload_len = bytes.size() - 8 - header_len;

  NamedTensorArchive archive;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    const std::string dtype = info.at("dtype").get<std::string>();
    Tensor t;
    t.shape = info.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
    if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > payload_len) {
      fail(ErrorCode::kParse, "safetensors: bad data_offsets for " + name);
    }
    const std::size_t elem = dtype_size(dtype);
    const std::size_t count = (offsets[1] - offsets[0]) / elem;
    if (static_cast<std::int64_t>(count) != t.numel() ||
        (offsets[1] - offsets[0]) % elem != 0) {
      fail(ErrorCode::kShapeMismatch, name + ": byte length disagrees with shape");
    }
    t.data.resize(count);
    const std::uint8_t* src = payload + offsets[0];
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint8_t* p = src + i * elem;
      if (dtype == "F32") {
        t.data[i] = read_le<float>(p);
      } else if (dtype == "F16") {
        t.data[i] = half_to_float(read_le<std::uint16_t>(p));
      } else if (dtype == "BF16") {
        t.data[i] = bfloat16_to_float(read_le<std::uint16_t>(p));
      } else {
        t.data[i] = static_cast<float>(read_le<double>(p));
      }
    }
    archive.insert(name, std::move(t));
  }
  return archive;
}

NamedTensorArchive NamedTensorArchive::read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open archive " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_safetensors(bytes);
}

std::vector<std::uint8_t> NamedTensorArchive::to_safetensors() const {
  // nlohmann::json sorts object keys, matching the payload order below.
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : entries_) {
    const std::uint64_t len = t.data.size() * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + len}}};
    offset += len;
  }
  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out(8 + text.size() + offset);
  std::uint64_t header_len = text.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(header_len >> (8 * i));
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::uint8_t* dst = out.data() + 8 + text.size();
  for (const auto& [name, t] : entries_) {
    for (float f : t.data) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) *dst++ = static_cast<std::uint8_t>(bits >> (8 * i));
    }
  }
  return out;
}

void NamedTensorArchive::write_safetensors(const std::filesystem::path& path) const {
  const auto bytes = to_safetensors();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write archive " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "short write to " + path.string());
}

std::string NamedTensorArchive::digest() const { return sha256_hex(to_safetensors()); }

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace circuitscope
