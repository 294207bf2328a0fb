#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "blockrec/data.hpp"
#include "blockrec/optim.hpp"

namespace blockrec {

// ---- per-token negative log likelihood ----------------------------------------

// NLL in bits of predicting each token of one document, indexed by token
// position; index 0 has no prediction and holds NaN. Evaluation uses the same
// segment and cache mechanics as training, with dropout off.
template <typename Real>
std::vector<double> per_token_nll_bits(ModelParams<Real>& m, const Document& doc,
                                       bool clear_states_each_segment = false,
                                       bool clear_kv_each_segment = false) {
  DocumentStore one;
  one.docs.push_back(doc);
  StreamConfig sc;
  sc.segment = m.config.segment;
  sc.batch = 1;
  SegmentStream stream(one, sc);

  std::vector<double> nll(doc.bytes.size(), std::numeric_limits<double>::quiet_NaN());
  auto caches = init_caches(m, 1);
  i64 pos = 0;
  while (auto seg = stream.next()) {
    if (clear_states_each_segment)
      for (auto& lc : caches.layers)
        if (!lc.state_fresh.empty()) lc.state_fresh.assign(lc.state_fresh.size(), 1);
    if (clear_kv_each_segment)
      for (auto& lc : caches.layers) lc.kv_valid.assign(lc.kv_valid.size(), 0);
    auto r = forward_segment(*seg, caches, m);
    auto nats = cross_entropy_logits(r.logits, seg->targets);
    for (i64 i = 0; i < seg->length; ++i)
      if (seg->loss_mask[static_cast<size_t>(i)])
        nll[static_cast<size_t>(pos + i + 1)] =
            static_cast<double>(nats->value.data[static_cast<size_t>(i)]) / kLn2;
    caches = detach_caches(r, m, 1);
    pos += seg->length;
  }
  return nll;
}

// ---- corpus-level bits per token ------------------------------------------------

template <typename Real>
double bits_per_token_eval(ModelParams<Real>& m, const DocumentStore& store, i64 batch = 1) {
  if (store.docs.empty()) throw ConfigError("bits_per_token_eval: empty document store");
  StreamConfig sc;
  sc.segment = m.config.segment;
  sc.batch = batch;
  SegmentStream stream(store, sc);
  auto caches = init_caches(m, batch);
  double total_nats = 0.0;
  i64 count = 0;
  while (auto seg = stream.next()) {
    auto r = forward_segment(*seg, caches, m);
    auto nats = cross_entropy_logits(r.logits, seg->targets);
    for (size_t i = 0; i < seg->loss_mask.size(); ++i)
      if (seg->loss_mask[i]) {
        total_nats += static_cast<double>(nats->value.data[i]);
        ++count;
      }
    caches = detach_caches(r, m, batch);
  }
  if (count == 0) throw ConfigError("bits_per_token_eval: no prediction targets");
  return total_nats / (kLn2 * static_cast<double>(count));
}

// ---- cross-entropy diff between two models ---------------------------------------

struct TokenDiffRecord {
  i64 token_index = 0;
  double nll_a_bits = 0.0;
  double nll_b_bits = 0.0;
  std::string excerpt;
};

namespace detail {

inline std::string excerpt_around(const std::vector<std::uint8_t>& bytes, i64 index,
                                  i64 context = 60) {
  auto printable = [](std::uint8_t b) {
    return (b >= 32 && b < 127) ? static_cast<char>(b) : '.';
  };
  std::string out;
  const i64 lo = std::max<i64>(0, index - context);
  const i64 hi = std::min<i64>(static_cast<i64>(bytes.size()), index + context + 1);
  for (i64 i = lo; i < hi; ++i) {
    if (i == index) out += '|';
    out += printable(bytes[static_cast<size_t>(i)]);
    if (i == index) out += '|';
  }
  return out;
}

}  // namespace detail

// Record assembly over two per-token NLL series: sorted by descending
// nll_b - nll_a, ties broken by the lower token index.
inline std::vector<TokenDiffRecord> token_ce_diff_from_nll(const std::vector<double>& nll_a,
                                                           const std::vector<double>& nll_b,
                                                           const Document& doc, i64 top_k) {
  contract(nll_a.size() == doc.bytes.size() && nll_b.size() == doc.bytes.size(),
           "token_ce_diff: NLL series must align with the document");
  std::vector<i64> idx;
  for (i64 i = 1; i < static_cast<i64>(doc.bytes.size()); ++i)
    if (std::isfinite(nll_a[static_cast<size_t>(i)])) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [&](i64 a, i64 b) {
    const double da = nll_b[size_t(a)] - nll_a[size_t(a)];
    const double db = nll_b[size_t(b)] - nll_a[size_t(b)];
    if (da != db) return da > db;
    return a < b;
  });
  if (top_k < static_cast<i64>(idx.size())) idx.resize(static_cast<size_t>(top_k));

  std::vector<TokenDiffRecord> out;
  for (i64 i : idx) {
    TokenDiffRecord r;
    r.token_index = i;
    r.nll_a_bits = nll_a[size_t(i)];
    r.nll_b_bits = nll_b[size_t(i)];
    r.excerpt = detail::excerpt_around(doc.bytes, i);
    out.push_back(std::move(r));
  }
  return out;
}

// Tokens where model_b does worst relative to model_a.
template <typename Real>
std::vector<TokenDiffRecord> token_ce_diff(ModelParams<Real>& model_a,
                                           ModelParams<Real>& model_b, const Document& doc,
                                           i64 top_k) {
  if (model_a.config.vocab_size != model_b.config.vocab_size)
    throw ConfigError("token_ce_diff: models use different vocabularies");
  if (model_a.config.segment != model_b.config.segment)
    throw ConfigError("token_ce_diff: models use different segment lengths");
  auto nll_a = per_token_nll_bits(model_a, doc);
  auto nll_b = per_token_nll_bits(model_b, doc);
  return token_ce_diff_from_nll(nll_a, nll_b, doc, top_k);
}

// ---- cumulative cross entropy ------------------------------------------------------

struct CumulativeCurve {
  std::vector<double> mean_bits;      // index p: average bits over tokens 1..p of all docs
  std::vector<i64> docs_at_length;    // number of documents longer than p
};

template <typename Real>
CumulativeCurve cumulative_ce_curve(ModelParams<Real>& m, const DocumentStore& store) {
  i64 maxlen = 0;
  for (const auto& d : store.docs) maxlen = std::max(maxlen, static_cast<i64>(d.bytes.size()));
  std::vector<double> sum(static_cast<size_t>(maxlen), 0.0);
  std::vector<i64> cnt(static_cast<size_t>(maxlen), 0);
  CumulativeCurve curve;
  curve.docs_at_length.assign(static_cast<size_t>(maxlen), 0);

  for (const auto& doc : store.docs) {
    auto nll = per_token_nll_bits(m, doc);
    for (i64 i = 1; i < static_cast<i64>(doc.bytes.size()); ++i)
      if (std::isfinite(nll[size_t(i)])) {
        sum[size_t(i)] += nll[size_t(i)];
        cnt[size_t(i)] += 1;
      }
    for (i64 p = 0; p < static_cast<i64>(doc.bytes.size()); ++p)
      curve.docs_at_length[size_t(p)] += 1;
  }
  curve.mean_bits.assign(static_cast<size_t>(maxlen), 0.0);
  double run_sum = 0.0;
  i64 run_cnt = 0;
  for (i64 p = 0; p < maxlen; ++p) {
    run_sum += sum[size_t(p)];
    run_cnt += cnt[size_t(p)];
    curve.mean_bits[size_t(p)] = run_cnt > 0 ? run_sum / static_cast<double>(run_cnt) : 0.0;
  }
  return curve;
}

// ---- state clearing --------------------------------------------------------------

// NLL difference per token between a run whose recurrent states are cleared
// at every segment boundary and the normal carried run. KV caches still carry
// unless clear_kv is set.
template <typename Real>
std::vector<double> state_clearing_eval(ModelParams<Real>& m, const Document& doc,
                                        bool clear_kv = false) {
  bool has_recurrence = false;
  for (const auto& layer : m.layers) has_recurrence = has_recurrence || layer.recurrent;
  if (!has_recurrence) throw ConfigError("state_clearing_eval: model has no recurrent layer");
  auto carried = per_token_nll_bits(m, doc);
  auto cleared = per_token_nll_bits(m, doc, /*clear_states=*/true, clear_kv);
  std::vector<double> diff(carried.size(), 0.0);
  for (size_t i = 1; i < carried.size(); ++i)
    if (std::isfinite(carried[i])) diff[i] = cleared[i] - carried[i];
  return diff;
}

// ---- synthetic long-range recall task ----------------------------------------------

// Documents of the form  ...K<k><v>...filler...Q<k><v>...  where the value
// after Q<k> is predictable only by recalling the earlier pair.
struct RecallTaskSpec {
  i64 num_documents = 64;
  i64 num_pairs = 8;        // per document, each queried exactly once
  i64 key_alphabet = 16;    // keys drawn from 'A'...
  i64 value_alphabet = 16;  // values drawn from 'a'...
  i64 d_min = 64;           // query marker distance from its key marker
  i64 d_max = 128;
  i64 sequence_length = 2048;
  std::string filler = " .,:;!?0123456789";

  void validate() const {
    if (num_documents < 1 || num_pairs < 1) throw ConfigError("recall task: counts must be positive");
    if (key_alphabet < num_pairs)
      throw ConfigError("recall task: keys must be unique per document");
    if (key_alphabet > 26 || value_alphabet > 26)
      throw ConfigError("recall task: alphabets are limited to 26 symbols");
    if (d_min < 4 || d_min > d_max) throw ConfigError("recall task: bad distance range");
    if (d_max + 6 >= sequence_length)
      throw ConfigError("recall task: d_max " + std::to_string(d_max) +
                        " does not fit in sequence length " + std::to_string(sequence_length));
    if (filler.empty()) throw ConfigError("recall task: empty filler distribution");
  }
};

struct RetrievalPosition {
  i64 doc_index = 0;
  i64 key_pos = 0;    // position of the K marker
  i64 value_pos = 0;  // position of the value byte after the Q marker
  i64 distance = 0;   // query marker minus key marker
};

struct RecallTask {
  DocumentStore store;
  std::vector<RetrievalPosition> positions;
};

inline RecallTask gen_recall_task(const RecallTaskSpec& spec, Rng& rng) {
  spec.validate();
  RecallTask task;
  const i64 event = 3;  // marker, key, value
  for (i64 d = 0; d < spec.num_documents; ++d) {
    const i64 len = spec.sequence_length;
    std::vector<std::uint8_t> bytes(static_cast<size_t>(len), 0);
    std::vector<std::uint8_t> used(static_cast<size_t>(len), 0);
    auto claim = [&](i64 at) {
      for (i64 i = at; i < at + event; ++i) {
        if (i < 0 || i + 1 > len || used[size_t(i)]) return false;
      }
      for (i64 i = at; i < at + event; ++i) used[size_t(i)] = 1;
      return true;
    };

    // unique keys for this document
    std::vector<i64> keys(static_cast<size_t>(spec.key_alphabet));
    for (size_t i = 0; i < keys.size(); ++i) keys[i] = static_cast<i64>(i);
    std::shuffle(keys.begin(), keys.end(), rng.engine());

    for (i64 pair = 0; pair < spec.num_pairs; ++pair) {
      i64 key_pos = -1, qry_pos = -1, dist = 0;
      for (int attempt = 0; attempt < 10000; ++attempt) {
        dist = spec.d_min +
               static_cast<i64>(rng.next_u64() %
                                static_cast<std::uint64_t>(spec.d_max - spec.d_min + 1));
        const i64 lo_max = len - dist - event;
        if (lo_max < 1) continue;
        const i64 p = static_cast<i64>(rng.next_u64() % static_cast<std::uint64_t>(lo_max));
        const i64 q = p + dist;
        if (!claim(p)) continue;
        if (!claim(q)) {
          for (i64 i = p; i < p + event; ++i) used[size_t(i)] = 0;
          continue;
        }
        key_pos = p;
        qry_pos = q;
        break;
      }
      if (key_pos < 0) throw ConfigError("recall task: could not place all pairs; reduce density");
      const std::uint8_t k = static_cast<std::uint8_t>('A' + keys[size_t(pair)]);
      const std::uint8_t v = static_cast<std::uint8_t>(
          'a' + static_cast<i64>(rng.next_u64() % static_cast<std::uint64_t>(spec.value_alphabet)));
      bytes[size_t(key_pos)] = 'K';
      bytes[size_t(key_pos + 1)] = k;
      bytes[size_t(key_pos + 2)] = v;
      bytes[size_t(qry_pos)] = 'Q';
      bytes[size_t(qry_pos + 1)] = k;
      bytes[size_t(qry_pos + 2)] = v;
      RetrievalPosition rp;
      rp.doc_index = d;
      rp.key_pos = key_pos;
      rp.value_pos = qry_pos + 2;
      rp.distance = dist;
      task.positions.push_back(rp);
    }
    for (i64 i = 0; i < len; ++i)
      if (!used[size_t(i)])
        bytes[size_t(i)] = static_cast<std::uint8_t>(
            spec.filler[static_cast<size_t>(rng.next_u64() %
                                            static_cast<std::uint64_t>(spec.filler.size()))]);
    Document doc;
    doc.id = "recall-" + std::to_string(d);
    doc.bytes = std::move(bytes);
    task.store.docs.push_back(std::move(doc));
  }
  return task;
}

// Fraction of retrieval positions where the model's argmax prediction equals
// the true value byte. Optionally restricted with a position filter.
template <typename Real, typename Filter>
double recall_accuracy(ModelParams<Real>& m, const RecallTask& task, Filter keep) {
  i64 hits = 0, total = 0;
  for (i64 d = 0; d < static_cast<i64>(task.store.docs.size()); ++d) {
    bool wanted = false;
    for (const auto& rp : task.positions)
      if (rp.doc_index == d && keep(rp)) wanted = true;
    if (!wanted) continue;

    const auto& doc = task.store.docs[size_t(d)];
    // collect argmax predictions for this document
    DocumentStore one;
    one.docs.push_back(doc);
    StreamConfig sc;
    sc.segment = m.config.segment;
    sc.batch = 1;
    SegmentStream stream(one, sc);
    auto caches = init_caches(m, 1);
    std::vector<i64> argmax(doc.bytes.size(), -1);
    i64 pos = 0;
    while (auto seg = stream.next()) {
      auto r = forward_segment(*seg, caches, m);
      const i64 vocab = m.config.vocab_size;
      for (i64 i = 0; i < seg->length; ++i) {
        if (!seg->loss_mask[size_t(i)]) continue;
        const Real* row = r.logits->value.data.data() + (i)*vocab;
        i64 best = 0;
        for (i64 v = 1; v < vocab; ++v)
          if (row[v] > row[best]) best = v;
        argmax[size_t(pos + i + 1)] = best;
      }
      caches = detach_caches(r, m, 1);
      pos += seg->length;
    }
    for (const auto& rp : task.positions) {
      if (rp.doc_index != d || !keep(rp)) continue;
      ++total;
      if (argmax[size_t(rp.value_pos)] == static_cast<i64>(doc.bytes[size_t(rp.value_pos)]))
        ++hits;
    }
  }
  if (total == 0) throw ConfigError("recall_accuracy: no retrieval positions selected");
  return static_cast<double>(hits) / static_cast<double>(total);
}

template <typename Real>
double recall_accuracy(ModelParams<Real>& m, const RecallTask& task) {
  return recall_accuracy(m, task, [](const RetrievalPosition&) { return true; });
}

// ---- report writers -----------------------------------------------------------------

inline void write_curve_csv(const CumulativeCurve& curve, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f << "position,mean_bits,docs_at_length\n";
  for (size_t p = 0; p < curve.mean_bits.size(); ++p)
    f << p << ',' << curve.mean_bits[p] << ',' << curve.docs_at_length[p] << "\n";
}

inline void write_diff_csv(const std::vector<TokenDiffRecord>& records, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f << "token_index,nll_a_bits,nll_b_bits,diff_bits\n";
  for (const auto& r : records)
    f << r.token_index << ',' << r.nll_a_bits << ',' << r.nll_b_bits << ','
      << (r.nll_b_bits - r.nll_a_bits) << "\n";
}

// Plain-text report in the (index, nll_a, nll_b) + excerpt style.
inline void write_diff_report(const std::vector<TokenDiffRecord>& records,
                              const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f.precision(7);
  for (const auto& r : records) {
    f << '(' << r.token_index << ", " << r.nll_a_bits << ", " << r.nll_b_bits << ")\n";
    f << r.excerpt << "\n\n";
  }
}

}  // namespace blockrec
