#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blocklm/config.hpp"
#include "blocklm/random.hpp"
#include "blocklm/tensor_file.hpp"

namespace blocklm {

// Byte-level vocabulary: ids 0..255 are raw bytes.
inline constexpr int32_t kBos = 256;
inline constexpr int32_t kEos = 257;
inline constexpr int32_t kPad = 258;
inline constexpr int32_t kByteVocab = 259;

std::vector<int32_t> tokenize(std::string_view text);
// Special ids are dropped; ids outside [0, 259) throw std::out_of_range.
std::string detokenize(std::span<const int32_t> ids);

// Row-major [rows, L] packed corpus. Each document contributes
// [PAD x a] + tokens + EOS + [PAD to the next block boundary] with a drawn
// uniformly from {0, ..., L_B - 1}; documents are concatenated and cut into
// L-token rows (a trailing partial row is dropped).
struct PackedCorpus {
  int64_t rows = 0;
  int64_t row_length = 0;
  int64_t block_length = 1;
  std::vector<int32_t> ids;
  std::vector<uint8_t> doc_start;
  // false at PAD and throughout each document's first block
  std::vector<uint8_t> loss_mask;
  // document index per position (-1 never occurs in kept rows)
  std::vector<int32_t> doc_ids;
  // a drawn for every packed document, in order
  std::vector<int32_t> pad_lengths;
};

// A batch of rows selected from a PackedCorpus.
struct PackedBatch {
  int64_t batch = 0;
  int64_t length = 0;
  std::vector<int32_t> ids;
  std::vector<uint8_t> doc_start;
  std::vector<uint8_t> loss_mask;

  int64_t tokens() const { return batch * length; }
};

PackedCorpus pack_corpus(const std::vector<std::vector<int32_t>>& documents, const ModelConfig& cfg, uint64_t seed);

PackedBatch rows_to_batch(const PackedCorpus& corpus, std::span<const int64_t> rows);

// Deterministic epoch-shuffled batches; every row is visited exactly once
// per epoch (the last batch of an epoch may be short).
class BatchIterator {
 public:
  BatchIterator(const PackedCorpus& corpus, int64_t batch_size, uint64_t seed);

  PackedBatch next();
  int64_t epoch() const { return epoch_; }
  std::span<const int64_t> order() const { return order_; }

 private:
  void reshuffle();

  const PackedCorpus* corpus_;
  int64_t batch_size_;
  uint64_t seed_;
  int64_t epoch_ = 0;
  int64_t cursor_ = 0;
  std::vector<int64_t> order_;
};

// Standalone evaluation inputs get L_B - 1 PAD tokens prepended.
std::vector<int32_t> eval_left_pad(std::span<const int32_t> ids, int64_t block_length);

// Documents from a directory (one per regular file, sorted by name) or a
// single file split on lines equal to kDocumentSeparator.
inline constexpr std::string_view kDocumentSeparator = "<|endoftext|>";
std::vector<std::string> read_documents(const std::filesystem::path& path);

TensorFile packed_to_file(const PackedCorpus& corpus);
PackedCorpus packed_from_file(const TensorFile& file);

// Deterministic pseudo-English corpus used for desk-scale training runs:
// Zipf-distributed invented words, a small sentence grammar and per-document
// topic vocabularies. Produces documents until `target_bytes` is reached.
std::vector<std::string> synthesize_corpus(size_t target_bytes, uint64_t seed);

}  // namespace blocklm
