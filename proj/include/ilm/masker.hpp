#pragma once

// Hierarchical span masking: a pre-order traversal over the granularity tree
// that masks whole subtrees, with word leaves expanding into n-grams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilm/corpus.hpp"
#include "ilm/error.hpp"
#include "ilm/rng.hpp"

namespace ilm {

struct MaskSpan {
  Granularity granularity = Granularity::kWord;
  CharSpan span;
  std::string answer;

  friend bool operator==(const MaskSpan&, const MaskSpan&) = default;
};

struct MaskedDocument {
  std::string doc_id;
  std::size_t source_size = 0;
  std::vector<MaskSpan> spans;  // sorted by start offset, pairwise disjoint

  std::size_t k() const { return spans.size(); }
  friend bool operator==(const MaskedDocument&, const MaskedDocument&) = default;
};

struct MaskPolicy {
  double subtree_prob = 0.03;
  double word_vs_ngram_prob = 0.5;
  int max_ngram = 8;
  std::uint64_t rng_seed = 0;

  void validate() const {
    auto bad_prob = [](double p) { return !(p >= 0.0 && p <= 1.0); };
    if (bad_prob(subtree_prob) || bad_prob(word_vs_ngram_prob) || max_ngram < 1) {
      throw Error(ErrorCode::kConfigInvalid,
                  "mask policy: probabilities must lie in [0,1] and max_ngram >= 1");
    }
  }

  nlohmann::json to_json() const {
    return {{"subtree_prob", subtree_prob},
            {"word_vs_ngram_prob", word_vs_ngram_prob},
            {"max_ngram", max_ngram},
            {"rng_seed", rng_seed}};
  }
};

inline bool belongs_to(const MaskedDocument& m, const Document& doc) {
  return m.doc_id == doc.id && m.source_size == doc.raw.size();
}

// Per-document generator: the policy seed mixed with the document index, so
// documents can be masked independently and in any order.
inline Rng document_rng(const MaskPolicy& policy, std::uint64_t doc_index) {
  return Rng(derive_seed(policy.rng_seed, doc_index));
}

// Visits nodes in pre-order. Each visited node is masked with subtree_prob;
// a masked node's descendants are skipped. A selected word masks itself with
// word_vs_ngram_prob, otherwise an n-gram starting at it whose length is
// uniform over 1..min(max_ngram, words left in the sentence). Words already
// covered by an earlier n-gram of the same sentence are skipped without
// drawing.
inline MaskedDocument sample_mask(const Document& doc, const MaskPolicy& policy, Rng& rng) {
  MaskedDocument out{doc.id, doc.raw.size(), {}};
  auto emit = [&](Granularity g, CharSpan s) {
    out.spans.push_back({g, s, std::string(doc.text(s))});
  };
  auto visit_sentence = [&](const HierNode& sentence) {
    const auto& words = sentence.children;
    std::size_t i = 0;
    while (i < words.size()) {
      if (!rng.bernoulli(policy.subtree_prob)) {
        ++i;
        continue;
      }
      if (rng.bernoulli(policy.word_vs_ngram_prob)) {
        emit(Granularity::kWord, words[i].span);
        ++i;
        continue;
      }
      const auto left = static_cast<std::int64_t>(words.size() - i);
      const auto len = static_cast<std::size_t>(
          rng.uniform_int(1, std::min<std::int64_t>(policy.max_ngram, left)));
      emit(Granularity::kNgram, {words[i].span.begin, words[i + len - 1].span.end});
      i += len;
    }
  };
  auto visit = [&](auto&& self, const HierNode& node) -> void {
    if (node.granularity == Granularity::kWord) return;  // handled per sentence
    if (rng.bernoulli(policy.subtree_prob)) {
      emit(node.granularity, node.span);
      return;
    }
    if (node.granularity == Granularity::kSentence) {
      visit_sentence(node);
      return;
    }
    for (const auto& c : node.children) self(self, c);
  };
  visit(visit, doc.root);
  return out;
}

inline MaskedDocument sample_mask(const Document& doc, const MaskPolicy& policy,
                                  std::uint64_t doc_index) {
  Rng rng = document_rng(policy, doc_index);
  return sample_mask(doc, policy, rng);
}

struct SpanRequest {
  CharSpan span;
  Granularity granularity = Granularity::kWord;
};

// Builds a MaskedDocument from explicit spans. Each span must coincide with a
// tree node of its granularity; n-grams must cover 1..max_ngram consecutive
// words of one sentence.
inline MaskedDocument mask_from_spec(const Document& doc, std::vector<SpanRequest> requested,
                                     int max_ngram = 8) {
  auto aligned = [&](const SpanRequest& r) {
    if (r.span.empty() || r.span.end > doc.raw.size()) return false;
    if (r.granularity == Granularity::kNgram) {
      for (const HierNode* s : nodes_at(doc, Granularity::kSentence)) {
        const auto& w = s->children;
        auto first = std::find_if(w.begin(), w.end(),
                                  [&](const HierNode& n) { return n.span.begin == r.span.begin; });
        auto last = std::find_if(w.begin(), w.end(),
                                 [&](const HierNode& n) { return n.span.end == r.span.end; });
        if (first != w.end() && last != w.end() && first <= last) {
          return last - first + 1 <= max_ngram;
        }
      }
      return false;
    }
    const auto nodes = nodes_at(doc, r.granularity);
    return std::any_of(nodes.begin(), nodes.end(),
                       [&](const HierNode* n) { return n->span == r.span; });
  };
  for (const auto& r : requested) {
    if (!aligned(r)) {
      throw Error(ErrorCode::kMisalignedSpan,
                  "span [" + std::to_string(r.span.begin) + "," + std::to_string(r.span.end) +
                      ") is not a " + std::string(granularity_name(r.granularity)) +
                      " boundary of document '" + doc.id + "'");
    }
  }
  std::sort(requested.begin(), requested.end(),
            [](const SpanRequest& a, const SpanRequest& b) { return a.span.begin < b.span.begin; });
  for (std::size_t i = 1; i < requested.size(); ++i) {
    if (requested[i - 1].span.overlaps(requested[i].span)) {
      throw Error(ErrorCode::kOverlappingSpans, "requested spans overlap in '" + doc.id + "'");
    }
  }
  MaskedDocument out{doc.id, doc.raw.size(), {}};
  for (const auto& r : requested) {
    out.spans.push_back({r.granularity, r.span, std::string(doc.text(r.span))});
  }
  return out;
}

// Mask spec records: {"doc_id", "spans": [{"start", "end", "granularity"}]}.
inline nlohmann::json mask_spec_json(const MaskedDocument& m) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : m.spans) {
    spans.push_back({{"start", s.span.begin}, {"end", s.span.end}, {"granularity", granularity_name(s.granularity)}});
  }
  return {{"doc_id", m.doc_id}, {"spans", spans}};
}

inline void write_mask_specs(const std::filesystem::path& path, std::span<const MaskedDocument> masks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  for (const auto& m : masks) out << mask_spec_json(m).dump() << '\n';
}

// Re-validates every record against its document via mask_from_spec.
inline std::vector<MaskedDocument> read_mask_specs(const std::filesystem::path& path,
                                                   std::span<const Document> docs, int max_ngram = 8) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  std::vector<MaskedDocument> out;
  std::string line;
  for (std::size_t index = 0; std::getline(in, line); ++index) {
    if (line.empty()) continue;
    const std::string where = path.string() + " record " + std::to_string(index);
    try {
      const auto j = nlohmann::json::parse(line);
      const auto id = j.at("doc_id").get<std::string>();
      const auto doc = std::find_if(docs.begin(), docs.end(), [&](const Document& d) { return d.id == id; });
      if (doc == docs.end()) throw Error(ErrorCode::kMalformedRecord, where + ": unknown doc_id '" + id + "'");
      std::vector<SpanRequest> requests;
      for (const auto& s : j.at("spans")) {
        const auto g = parse_granularity(s.at("granularity").get<std::string>());
        if (!g) throw Error(ErrorCode::kMalformedRecord, where + ": bad granularity");
        requests.push_back({{s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>()}, *g});
      }
      out.push_back(mask_from_spec(*doc, std::move(requests), max_ngram));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kMalformedRecord, where + ": " + e.what());
    }
  }
  return out;
}

// One span of the given granularity, chosen uniformly among that level's
// nodes. For n-grams the start word is uniform and the length uniform over
// 1..min(max_ngram, words left in the sentence).
inline SpanRequest sample_single_span(const Document& doc, Granularity g, Rng& rng,
                                      int max_ngram = 8) {
  if (g == Granularity::kNgram) {
    const auto sentences = nodes_at(doc, Granularity::kSentence);
    std::vector<std::pair<const HierNode*, std::size_t>> starts;
    for (const HierNode* s : sentences) {
      for (std::size_t i = 0; i < s->children.size(); ++i) starts.emplace_back(s, i);
    }
    const auto& [s, i] = starts[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(starts.size()) - 1))];
    const auto left = static_cast<std::int64_t>(s->children.size() - i);
    const auto len = static_cast<std::size_t>(rng.uniform_int(1, std::min<std::int64_t>(max_ngram, left)));
    return {{s->children[i].span.begin, s->children[i + len - 1].span.end}, g};
  }
  const auto nodes = nodes_at(doc, g);
  const HierNode* n =
      nodes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(nodes.size()) - 1))];
  return {n->span, g};
}

// Inline-marker rendering of x~: each span becomes "[blank:<granularity>]".
inline std::string render_masked(const Document& doc, const MaskedDocument& m) {
  std::string out;
  std::size_t cursor = 0;
  for (const auto& s : m.spans) {
    out.append(doc.raw, cursor, s.span.begin - cursor);
    out += "[blank:";
    out += granularity_name(s.granularity);
    out += ']';
    cursor = s.span.end;
  }
  out.append(doc.raw, cursor, std::string::npos);
  return out;
}

// Weight of one word leaf in the mask-rate computation (1 = count words;
// a tokenizer-backed weight counts subword tokens).
using WordWeight = std::function<double(std::string_view word)>;

inline double unit_weight(std::string_view) { return 1.0; }

struct MaskRateEstimate {
  double rate = 0.0;
  double std_error = 0.0;
  std::size_t n_samples = 0;
};

// Fraction of (weighted) word tokens covered by masked spans, estimated by
// masking n_samples documents drawn cyclically from the corpus. Sample i uses
// document i % |corpus| with generator stream i. Standard error is that of a
// ratio estimator.
inline MaskRateEstimate marginal_mask_rate(std::span<const Document> corpus, const MaskPolicy& policy,
                                           std::size_t n_samples,
                                           const WordWeight& weight = unit_weight) {
  if (corpus.empty()) throw Error(ErrorCode::kEmptyCorpus, "mask rate needs at least one document");
  if (n_samples == 0) throw Error(ErrorCode::kConfigInvalid, "n_samples must be >= 1");
  policy.validate();

  struct Leaf {
    CharSpan span;
    double weight;
  };
  std::vector<std::vector<Leaf>> leaves(corpus.size());
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    for (const HierNode* w : nodes_at(corpus[d], Granularity::kWord)) {
      leaves[d].push_back({w->span, weight(corpus[d].text(w->span))});
    }
  }

  std::vector<double> masked(n_samples), total(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const std::size_t d = i % corpus.size();
    const MaskedDocument m = sample_mask(corpus[d], policy, static_cast<std::uint64_t>(i));
    double mw = 0.0, tw = 0.0;
    std::size_t si = 0;
    for (const Leaf& leaf : leaves[d]) {
      tw += leaf.weight;
      while (si < m.spans.size() && m.spans[si].span.end <= leaf.span.begin) ++si;
      if (si < m.spans.size() && m.spans[si].span.contains(leaf.span)) mw += leaf.weight;
    }
    masked[i] = mw;
    total[i] = tw;
  }
  double sum_m = 0.0, sum_t = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    sum_m += masked[i];
    sum_t += total[i];
  }
  MaskRateEstimate est;
  est.n_samples = n_samples;
  est.rate = sum_t > 0.0 ? sum_m / sum_t : 0.0;
  if (n_samples > 1 && sum_t > 0.0) {
    const double mean_t = sum_t / static_cast<double>(n_samples);
    double ss = 0.0;
    for (std::size_t i = 0; i < n_samples; ++i) {
      const double r = masked[i] - est.rate * total[i];
      ss += r * r;
    }
    const double n = static_cast<double>(n_samples);
    est.std_error = std::sqrt(ss / (n * (n - 1.0))) / mean_t;
  }
  return est;
}

}  // namespace ilm
