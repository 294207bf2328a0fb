#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "blockrec/model.hpp"

namespace blockrec {

constexpr i64 kPadId = 256;
constexpr i64 kByteVocab = 257;  // 256 byte values plus the pad id

struct Document {
  std::string id;
  std::vector<std::uint8_t> bytes;
};

enum class Split { kTrain, kValidation, kTest };

struct DocumentStore {
  std::vector<Document> docs;
  Split split = Split::kTrain;

  i64 total_bytes() const {
    i64 n = 0;
    for (const auto& d : docs) n += static_cast<i64>(d.bytes.size());
    return n;
  }
};

// Byte-level tokenization is the identity map into [0, 256).
inline std::vector<i64> byte_tokenize(const std::vector<std::uint8_t>& text) {
  return std::vector<i64>(text.begin(), text.end());
}

inline std::vector<std::uint8_t> byte_detokenize(const std::vector<i64>& ids) {
  std::vector<std::uint8_t> out;
  out.reserve(ids.size());
  for (i64 id : ids) {
    contract(id >= 0 && id < 256, "byte_detokenize: id outside byte range");
    out.push_back(static_cast<std::uint8_t>(id));
  }
  return out;
}

// One document per file, ordered by filename.
inline DocumentStore load_directory(const std::string& dir, Split split = Split::kTrain) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("corpus directory not found: " + dir);
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  DocumentStore store;
  store.split = split;
  for (const auto& p : paths) {
    std::ifstream f(p, std::ios::binary);
    Document d;
    d.id = p.filename().string();
    d.bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    if (!d.bytes.empty()) store.docs.push_back(std::move(d));
  }
  if (store.docs.empty()) throw ConfigError("no non-empty documents in " + dir);
  return store;
}

// A single concatenated file with documents separated by a byte sequence.
inline DocumentStore load_concatenated(const std::string& path, const std::string& separator,
                                       Split split = Split::kTrain) {
  if (separator.empty()) throw ConfigError("document separator must be non-empty");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("corpus file not found: " + path);
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  DocumentStore store;
  store.split = split;
  size_t start = 0;
  int index = 0;
  while (start <= all.size()) {
    size_t end = all.find(separator, start);
    if (end == std::string::npos) end = all.size();
    if (end > start) {
      Document d;
      d.id = path + "#" + std::to_string(index++);
      d.bytes.assign(all.begin() + static_cast<std::ptrdiff_t>(start),
                     all.begin() + static_cast<std::ptrdiff_t>(end));
      store.docs.push_back(std::move(d));
    }
    if (end == all.size()) break;
    start = end + separator.size();
  }
  if (store.docs.empty()) throw ConfigError("no non-empty documents in " + path);
  return store;
}

struct StreamConfig {
  i64 segment = 256;  // N
  i64 batch = 1;
  std::uint64_t seed = 0;
  bool shuffle = false;
  bool loop = false;  // cycle through documents forever (training)
};

// Streams documents into [batch, N] segments. Each stream owns a disjoint
// document subset and advances N tokens per step; the reset flag marks the
// first segment of every document. Targets are the stream's tokens shifted
// by one, so the last token of a segment predicts the first of the next one;
// a document's final token and any padding are excluded from the loss.
class SegmentStream {
 public:
  SegmentStream(const DocumentStore& store, StreamConfig config)
      : config_(config), store_(&store) {
    if (store.docs.empty()) throw ConfigError("segment_stream: empty document store");
    if (config_.segment < 1 || config_.batch < 1)
      throw ConfigError("segment_stream: segment and batch must be positive");
    // longest documents first, round-robin across streams
    std::vector<i64> order(store.docs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<i64>(i);
    std::stable_sort(order.begin(), order.end(), [&](i64 a, i64 b) {
      return store.docs[size_t(a)].bytes.size() > store.docs[size_t(b)].bytes.size();
    });
    streams_.resize(static_cast<size_t>(config_.batch));
    for (size_t i = 0; i < order.size(); ++i)
      streams_[i % static_cast<size_t>(config_.batch)].docs.push_back(order[i]);
    for (size_t s = 0; s < streams_.size(); ++s) {
      auto& st = streams_[s];
      if (config_.shuffle) reshuffle(st, static_cast<std::uint64_t>(s));
      st.doc_pos = 0;
      st.tok_pos = 0;
    }
  }

  // Emits the next batch of segments, or nothing once every stream has
  // finished a single pass (loop == false).
  std::optional<Segment> next() {
    bool any = false;
    for (const auto& st : streams_)
      if (st.doc_pos < static_cast<i64>(st.docs.size())) any = true;
    if (!any && !config_.loop) return std::nullopt;

    const i64 n = config_.segment;
    Segment seg;
    seg.batch = config_.batch;
    seg.length = n;
    seg.tokens.assign(static_cast<size_t>(config_.batch * n), kPadId);
    seg.targets.assign(static_cast<size_t>(config_.batch * n), 0);
    seg.loss_mask.assign(static_cast<size_t>(config_.batch * n), 0);
    seg.reset.assign(static_cast<size_t>(config_.batch), 0);

    for (i64 s = 0; s < config_.batch; ++s) {
      auto& st = streams_[size_t(s)];
      if (st.doc_pos >= static_cast<i64>(st.docs.size())) {
        if (!config_.loop) continue;  // exhausted stream emits padding
        ++st.epoch;
        if (config_.shuffle)
          reshuffle(st, static_cast<std::uint64_t>(s) + 0x9e3779b97f4a7c15ull *
                            static_cast<std::uint64_t>(st.epoch));
        st.doc_pos = 0;
        st.tok_pos = 0;
      }
      const auto& doc = store_->docs[size_t(st.docs[size_t(st.doc_pos)])];
      const i64 len = static_cast<i64>(doc.bytes.size());
      if (st.tok_pos == 0) seg.reset[size_t(s)] = 1;
      for (i64 i = 0; i < n; ++i) {
        const i64 p = st.tok_pos + i;
        const size_t slot = static_cast<size_t>(s * n + i);
        if (p < len) {
          seg.tokens[slot] = static_cast<i64>(doc.bytes[size_t(p)]);
          if (p + 1 < len) {
            seg.targets[slot] = static_cast<i64>(doc.bytes[size_t(p + 1)]);
            seg.loss_mask[slot] = 1;
          }
        }
      }
      st.tok_pos += n;
      if (st.tok_pos >= len) {
        ++st.doc_pos;
        st.tok_pos = 0;
      }
    }
    return seg;
  }

 private:
  struct Stream {
    std::vector<i64> docs;
    i64 doc_pos = 0;
    i64 tok_pos = 0;
    i64 epoch = 0;
  };

  void reshuffle(Stream& st, std::uint64_t salt) {
    std::mt19937_64 gen(config_.seed ^ (salt + 0x1234567887654321ull));
    std::shuffle(st.docs.begin(), st.docs.end(), gen);
  }

  StreamConfig config_;
  const DocumentStore* store_;
  std::vector<Stream> streams_;
};

}  // namespace blockrec
