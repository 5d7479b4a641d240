#include "blocklm/tensor_file.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

namespace blocklm {

static_assert(std::endian::native == std::endian::little, "persistence assumes a little-endian host");

using Kind = TensorFileError::Kind;
using nlohmann::json;

std::string dtype_tag(DType dtype) { return dtype == DType::f32 ? "f32" : "i32"; }

size_t dtype_size(DType) { return 4; }

static DType parse_dtype(const std::string& tag) {
  if (tag == "f32") return DType::f32;
  if (tag == "i32") return DType::i32;
  throw TensorFileError(Kind::unknown_dtype, "tensor file: unknown dtype tag '" + tag + "'");
}

TensorEntry TensorEntry::from_tensor(std::string name, const Tensor& t) {
  TensorEntry e;
  e.name = std::move(name);
  e.dtype = DType::f32;
  e.shape = t.shape();
  e.f32.assign(t.values().begin(), t.values().end());
  return e;
}

TensorEntry TensorEntry::from_ints(std::string name, Shape shape, std::vector<int32_t> values) {
  TensorEntry e;
  e.name = std::move(name);
  e.dtype = DType::i32;
  e.shape = std::move(shape);
  e.i32 = std::move(values);
  return e;
}

Tensor TensorEntry::to_tensor() const {
  if (dtype != DType::f32) throw TensorFileError(Kind::unknown_dtype, "tensor '" + name + "' is not f32");
  return Tensor(shape, f32);
}

const TensorEntry* TensorFile::find(const std::string& name) const {
  auto it = std::find_if(entries.begin(), entries.end(), [&](const TensorEntry& e) { return e.name == name; });
  return it == entries.end() ? nullptr : &*it;
}

const TensorEntry& TensorFile::at(const std::string& name) const {
  if (const TensorEntry* e = find(name)) return *e;
  throw TensorFileError(Kind::bad_manifest, "tensor file: no tensor named '" + name + "'");
}

static void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

static uint32_t get_u32(std::span<const uint8_t> bytes, size_t at) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[at + static_cast<size_t>(i)]) << (8 * i);
  return v;
}

std::vector<uint8_t> encode_tensor_file(const TensorFile& file) {
  std::unordered_set<std::string> names;
  json manifest = json::array();
  uint64_t offset = 0;
  for (const auto& e : file.entries) {
    if (!names.insert(e.name).second) {
      throw TensorFileError(Kind::duplicate_name, "tensor file: duplicate tensor name '" + e.name + "'");
    }
    const size_t count = e.dtype == DType::f32 ? e.f32.size() : e.i32.size();
    if (static_cast<int64_t>(count) != shape_numel(e.shape)) {
      throw TensorFileError(Kind::size_mismatch, "tensor file: '" + e.name + "' holds " + std::to_string(count) +
                                                     " values for shape " + shape_str(e.shape));
    }
    manifest.push_back({{"name", e.name}, {"dtype", dtype_tag(e.dtype)}, {"shape", e.shape}, {"offset", offset}});
    offset += count * dtype_size(e.dtype);
  }
  const std::string text = json{{"tensors", manifest}, {"metadata", file.metadata}}.dump();

  std::vector<uint8_t> out;
  out.reserve(12 + text.size() + offset);
  out.insert(out.end(), kTensorFileMagic, kTensorFileMagic + 4);
  put_u32(out, kTensorFileVersion);
  put_u32(out, static_cast<uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& e : file.entries) {
    const auto* p = e.dtype == DType::f32 ? reinterpret_cast<const uint8_t*>(e.f32.data())
                                          : reinterpret_cast<const uint8_t*>(e.i32.data());
    const size_t n = (e.dtype == DType::f32 ? e.f32.size() : e.i32.size()) * 4;
    out.insert(out.end(), p, p + n);
  }
  return out;
}

TensorFile decode_tensor_file(std::span<const uint8_t> bytes) {
  if (bytes.size() < 12) throw TensorFileError(Kind::truncated, "tensor file: header truncated");
  if (std::memcmp(bytes.data(), kTensorFileMagic, 4) != 0) {
    throw TensorFileError(Kind::bad_magic, "tensor file: bad magic bytes");
  }
  const uint32_t version = get_u32(bytes, 4);
  if (version != kTensorFileVersion) {
    throw TensorFileError(Kind::bad_version, "tensor file: unsupported version " + std::to_string(version));
  }
  const uint32_t manifest_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<size_t>(manifest_len)) {
    throw TensorFileError(Kind::truncated, "tensor file: manifest truncated");
  }
  json doc;
  try {
    doc = json::parse(bytes.begin() + 12, bytes.begin() + 12 + manifest_len);
  } catch (const json::exception& ex) {
    throw TensorFileError(Kind::bad_manifest, std::string("tensor file: manifest is not valid JSON: ") + ex.what());
  }
  if (!doc.is_object() || !doc.contains("tensors") || !doc["tensors"].is_array()) {
    throw TensorFileError(Kind::bad_manifest, "tensor file: manifest lacks a 'tensors' array");
  }

  TensorFile file;
  if (doc.contains("metadata")) file.metadata = doc["metadata"];
  const auto payload = bytes.subspan(12 + manifest_len);
  std::unordered_set<std::string> names;
  uint64_t expected_offset = 0;
  for (const auto& item : doc["tensors"]) {
    TensorEntry e;
    try {
      e.name = item.at("name").get<std::string>();
      e.dtype = parse_dtype(item.at("dtype").get<std::string>());
      e.shape = item.at("shape").get<Shape>();
      const auto offset = item.at("offset").get<uint64_t>();
      if (offset != expected_offset) {
        throw TensorFileError(Kind::bad_manifest, "tensor file: '" + e.name + "' offset " + std::to_string(offset) +
                                                      " breaks manifest order (expected " +
                                                      std::to_string(expected_offset) + ")");
      }
    } catch (const json::exception& ex) {
      throw TensorFileError(Kind::bad_manifest, std::string("tensor file: malformed manifest entry: ") + ex.what());
    }
    if (!names.insert(e.name).second) {
      throw TensorFileError(Kind::duplicate_name, "tensor file: duplicate tensor name '" + e.name + "'");
    }
    const uint64_t count = static_cast<uint64_t>(shape_numel(e.shape));
    const uint64_t span = count * dtype_size(e.dtype);
    if (expected_offset + span > payload.size()) {
      throw TensorFileError(Kind::truncated, "tensor file: payload truncated inside '" + e.name + "'");
    }
    const uint8_t* src = payload.data() + expected_offset;
    if (e.dtype == DType::f32) {
      e.f32.resize(count);
      std::memcpy(e.f32.data(), src, span);
    } else {
      e.i32.resize(count);
      std::memcpy(e.i32.data(), src, span);
    }
    expected_offset += span;
    file.entries.push_back(std::move(e));
  }
  if (expected_offset != payload.size()) {
    throw TensorFileError(Kind::size_mismatch, "tensor file: " + std::to_string(payload.size() - expected_offset) +
                                                   " trailing payload bytes not described by the manifest");
  }
  return file;
}

void save_tensors(const std::filesystem::path& path, const TensorFile& file) {
  const auto bytes = encode_tensor_file(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorFileError(Kind::io, "tensor file: cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorFileError(Kind::io, "tensor file: write to '" + path.string() + "' failed");
}

TensorFile load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFileError(Kind::io, "tensor file: cannot open '" + path.string() + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor_file(bytes);
}

}  // namespace blocklm
