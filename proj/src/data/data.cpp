#include "blocklm/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace blocklm {

std::vector<int32_t> tokenize(std::string_view text) {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<int32_t>(static_cast<unsigned char>(c)));
  return ids;
}

std::string detokenize(std::span<const int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    if (id < 0 || id >= kByteVocab) {
      throw std::out_of_range("detokenize: id " + std::to_string(id) + " outside the byte vocabulary");
    }
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

PackedCorpus pack_corpus(const std::vector<std::vector<int32_t>>& documents, const ModelConfig& cfg, uint64_t seed) {
  if (documents.empty()) throw std::invalid_argument("pack_corpus: empty corpus");
  const int64_t lb = cfg.block_length;
  const int64_t len = cfg.context_length;
  if (lb < 1 || len % lb != 0) throw std::invalid_argument("pack_corpus: context_length must be a multiple of block_length");

  PackedCorpus out;
  out.row_length = len;
  out.block_length = lb;
  Rng rng(derive_seed(seed, "pack"));
  std::uniform_int_distribution<int32_t> pad_dist(0, static_cast<int32_t>(lb - 1));

  for (size_t d = 0; d < documents.size(); ++d) {
    const int32_t a = pad_dist(rng);
    out.pad_lengths.push_back(a);
    const size_t begin = out.ids.size();
    out.ids.insert(out.ids.end(), static_cast<size_t>(a), kPad);
    for (int32_t id : documents[d]) {
      if (id < 0 || id >= cfg.vocab_size) {
        throw std::out_of_range("pack_corpus: token id " + std::to_string(id) + " in document " + std::to_string(d) +
                                " outside vocabulary");
      }
      out.ids.push_back(id);
    }
    out.ids.push_back(kEos);
    while ((out.ids.size() - begin) % static_cast<size_t>(lb) != 0) out.ids.push_back(kPad);
    const size_t end = out.ids.size();
    out.doc_ids.insert(out.doc_ids.end(), end - begin, static_cast<int32_t>(d));
    out.doc_start.insert(out.doc_start.end(), end - begin, 0);
    out.doc_start[begin] = 1;
    for (size_t i = begin; i < end; ++i) {
      const bool first_block = i < begin + static_cast<size_t>(lb);
      out.loss_mask.push_back(out.ids[i] != kPad && !first_block ? 1 : 0);
    }
  }

  out.rows = static_cast<int64_t>(out.ids.size()) / len;
  if (out.rows == 0) {
    throw std::invalid_argument("pack_corpus: corpus of " + std::to_string(out.ids.size()) +
                                " packed tokens is shorter than one row of " + std::to_string(len));
  }
  const size_t kept = static_cast<size_t>(out.rows * len);
  out.ids.resize(kept);
  out.doc_start.resize(kept);
  out.loss_mask.resize(kept);
  out.doc_ids.resize(kept);
  return out;
}

PackedBatch rows_to_batch(const PackedCorpus& corpus, std::span<const int64_t> rows) {
  PackedBatch b;
  b.batch = static_cast<int64_t>(rows.size());
  b.length = corpus.row_length;
  const auto len = static_cast<size_t>(corpus.row_length);
  b.ids.reserve(rows.size() * len);
  for (int64_t r : rows) {
    if (r < 0 || r >= corpus.rows) throw std::out_of_range("rows_to_batch: row " + std::to_string(r) + " out of range");
    const auto off = static_cast<size_t>(r) * len;
    b.ids.insert(b.ids.end(), corpus.ids.begin() + off, corpus.ids.begin() + off + len);
    b.doc_start.insert(b.doc_start.end(), corpus.doc_start.begin() + off, corpus.doc_start.begin() + off + len);
    b.loss_mask.insert(b.loss_mask.end(), corpus.loss_mask.begin() + off, corpus.loss_mask.begin() + off + len);
  }
  return b;
}

BatchIterator::BatchIterator(const PackedCorpus& corpus, int64_t batch_size, uint64_t seed)
    : corpus_(&corpus), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw std::invalid_argument("BatchIterator: batch_size must be >= 1");
  if (corpus.rows < 1) throw std::invalid_argument("BatchIterator: corpus has no rows");
  reshuffle();
}

void BatchIterator::reshuffle() {
  order_.resize(static_cast<size_t>(corpus_->rows));
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng(derive_seed(seed_, "batch-epoch", static_cast<uint64_t>(epoch_)));
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

PackedBatch BatchIterator::next() {
  if (cursor_ >= corpus_->rows) {
    ++epoch_;
    reshuffle();
  }
  const int64_t take = std::min(batch_size_, corpus_->rows - cursor_);
  std::span<const int64_t> rows(order_.data() + cursor_, static_cast<size_t>(take));
  cursor_ += take;
  return rows_to_batch(*corpus_, rows);
}

std::vector<int32_t> eval_left_pad(std::span<const int32_t> ids, int64_t block_length) {
  std::vector<int32_t> out(static_cast<size_t>(std::max<int64_t>(block_length - 1, 0)), kPad);
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

static std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> read_documents(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw std::runtime_error("corpus path '" + path.string() + "' does not exist");
  std::vector<std::string> docs;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) docs.push_back(read_file(f));
    return docs;
  }
  const std::string text = read_file(path);
  std::string current;
  std::istringstream lines(text);
  std::string line;
  bool any = false;
  while (std::getline(lines, line)) {
    if (line == kDocumentSeparator) {
      docs.push_back(std::move(current));
      current.clear();
      any = false;
      continue;
    }
    if (any) current += '\n';
    current += line;
    any = true;
  }
  if (any || docs.empty()) docs.push_back(std::move(current));
  return docs;
}

TensorFile packed_to_file(const PackedCorpus& c) {
  TensorFile f;
  auto widen = [](const std::vector<uint8_t>& v) { return std::vector<int32_t>(v.begin(), v.end()); };
  f.entries.push_back(TensorEntry::from_ints("ids", {c.rows, c.row_length}, c.ids));
  f.entries.push_back(TensorEntry::from_ints("doc_start", {c.rows, c.row_length}, widen(c.doc_start)));
  f.entries.push_back(TensorEntry::from_ints("loss_mask", {c.rows, c.row_length}, widen(c.loss_mask)));
  f.entries.push_back(TensorEntry::from_ints("doc_ids", {c.rows, c.row_length}, c.doc_ids));
  f.entries.push_back(TensorEntry::from_ints("pad_lengths", {static_cast<int64_t>(c.pad_lengths.size())}, c.pad_lengths));
  f.metadata = {{"block_length", c.block_length}, {"row_length", c.row_length}};
  return f;
}

PackedCorpus packed_from_file(const TensorFile& f) {
  PackedCorpus c;
  const auto& ids = f.at("ids");
  if (ids.shape.size() != 2) throw std::runtime_error("packed shard: 'ids' must be rank 2");
  c.rows = ids.shape[0];
  c.row_length = ids.shape[1];
  c.block_length = f.metadata.value("block_length", int64_t{1});
  c.ids = ids.i32;
  auto narrow = [](const std::vector<int32_t>& v) { return std::vector<uint8_t>(v.begin(), v.end()); };
  c.doc_start = narrow(f.at("doc_start").i32);
  c.loss_mask = narrow(f.at("loss_mask").i32);
  c.doc_ids = f.at("doc_ids").i32;
  c.pad_lengths = f.at("pad_lengths").i32;
  return c;
}

}  // namespace blocklm
