#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace circuitscope {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

// Flat name -> tensor map backed by the safetensors container format.
// Half-precision entries (F16, BF16) and F64 are converted to f32 on read.
class NamedTensorArchive {
 public:
  void insert(std::string name, Tensor tensor);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  const std::map<std::string, Tensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void erase(const std::string& name) { entries_.erase(name); }

  static NamedTensorArchive read_safetensors(const std::filesystem::path& path);
  static NamedTensorArchive parse_safetensors(std::span<const std::uint8_t> bytes);

  // Always emits F32, tensors in name order, so equal archives serialize to
  // identical bytes.
  std::vector<std::uint8_t> to_safetensors() const;
  void write_safetensors(const std::filesystem::path& path) const;

  // SHA-256 over the canonical serialization, hex encoded.
  std::string digest() const;

 private:
  std::map<std::string, Tensor> entries_;
};

float half_to_float(std::uint16_t bits);
float bfloat16_to_float(std::uint16_t bits);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);

}  // namespace circuitscope
