#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "blocklm/tensor.hpp"

namespace blocklm {

// Container layout: "BLKT" | u32 version | u32 manifest length | JSON
// manifest | payload. All integers and payload values are little-endian.
// The manifest lists {name, dtype, shape, offset} per tensor, offsets
// relative to the payload start, contiguous and in manifest order.
inline constexpr char kTensorFileMagic[4] = {'B', 'L', 'K', 'T'};
inline constexpr uint32_t kTensorFileVersion = 1;

enum class DType { f32, i32 };

std::string dtype_tag(DType dtype);
size_t dtype_size(DType dtype);

struct TensorEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<float> f32;
  std::vector<int32_t> i32;

  static TensorEntry from_tensor(std::string name, const Tensor& t);
  static TensorEntry from_ints(std::string name, Shape shape, std::vector<int32_t> values);
  Tensor to_tensor() const;
};

struct TensorFile {
  std::vector<TensorEntry> entries;
  nlohmann::json metadata = nlohmann::json::object();

  const TensorEntry* find(const std::string& name) const;
  const TensorEntry& at(const std::string& name) const;
};

class TensorFileError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, bad_version, bad_manifest, truncated, unknown_dtype, duplicate_name, size_mismatch };

  TensorFileError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

std::vector<uint8_t> encode_tensor_file(const TensorFile& file);
TensorFile decode_tensor_file(std::span<const uint8_t> bytes);

void save_tensors(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensors(const std::filesystem::path& path);

}  // namespace blocklm
