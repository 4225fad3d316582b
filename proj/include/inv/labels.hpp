#pragma once

// Crowd label analysis: cleaning, embedding, complete-linkage clustering
// under cosine distance, representative words, lemma unification, scoring,
// and layer-wise merging of cluster maps that share a top label.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "inv/blob.hpp"
#include "inv/error.hpp"
#include "inv/hash.hpp"
#include "inv/hclust.hpp"
#include "inv/saliency.hpp"

namespace inv {

struct LabelRecord {
  std::string player;
  std::string map_ref;
  std::optional<std::string> guessed_class;  // absent when the player resigned
  std::string true_class;
  bool correct = false;
  int hints_used = 0;
  std::string text;
  bool trusted = false;
};

// ---- text handling ----------------------------------------------------------

inline constexpr int kStopWordListVersion = 1;

inline const std::unordered_set<std::string>& stop_words() {
  static const std::unordered_set<std::string> words{
      "a",       "about",   "above",   "after",    "again",     "against", "ain",     "all",     "also",    "am",
      "an",      "and",     "any",     "are",      "aren",      "as",      "at",      "be",      "because", "been",
      "before",  "being",   "below",   "between",  "both",      "but",     "by",      "can",     "could",   "couldn",
      "d",       "did",     "didn",    "do",       "does",      "doesn",   "doing",   "don",     "down",    "during",
      "each",    "etc",     "few",     "for",      "from",      "further", "had",     "hadn",    "has",     "hasn",
      "have",    "haven",   "having",  "he",       "her",       "here",    "hers",    "herself", "him",     "himself",
      "his",     "how",     "i",       "if",       "in",        "into",    "is",      "isn",     "it",      "its",
      "itself",  "just",    "ll",      "m",        "ma",        "may",     "me",      "might",   "mightn",  "more",
      "most",    "must",    "mustn",   "my",       "myself",    "needn",   "no",      "nor",     "not",     "now",
      "o",       "of",      "off",     "on",       "once",      "only",    "onto",    "or",      "other",   "our",
      "ours",    "ourselves", "out",   "over",     "own",       "per",     "re",      "s",       "same",    "shan",
      "shall",   "she",     "should",  "shouldn",  "so",        "some",    "such",    "t",       "than",    "that",
      "the",     "their",   "theirs",  "them",     "themselves", "then",   "there",   "these",   "they",    "this",
      "those",   "through", "to",      "too",      "under",     "until",   "up",      "upon",    "ve",      "very",
      "via",     "was",     "wasn",    "we",       "were",      "weren",   "what",    "when",    "where",   "which",
      "while",   "who",     "whom",    "why",      "will",      "with",    "within",  "without", "won",     "would",
      "wouldn",  "y",       "yet",     "you",      "your",      "yours",   "yourself", "yourselves", "maybe", "thing",
      "things",  "something", "anything", "kind",  "sort",      "lot",     "lots",    "like",    "looks",   "seems",
      "really",  "quite",   "rather",  "much",     "many",      "every",   "another", "since",   "though",  "however",
  };
  return words;
}

inline bool is_stop_word(std::string_view w) { return stop_words().count(std::string(w)) > 0; }

// Lowercase; every byte that is not an ASCII letter/digit (or part of a
// multi-byte UTF-8 sequence) becomes a space; whitespace collapsed and trimmed.
inline std::string normalize_text(std::string_view s) {
  std::string out;
  bool space = false;
  for (unsigned char c : s) {
    const bool word = std::isalnum(c) || c >= 0x80;
    if (!word) {
      space = !out.empty();
      continue;
    }
    if (space) out += ' ';
    space = false;
    out += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
  }
  return out;
}

inline std::vector<std::string> tokenize(std::string_view normalized) {
  std::vector<std::string> out;
  std::istringstream in{std::string(normalized)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

// Rule-based English plural stemmer:
//   -ies -> -y            (berries -> berry; needs 5+ letters)
//   -es  -> drop "es"     after s, x, z, ch, sh (crosses -> cross, boxes -> box)
//   -s   -> drop "s"      unless the word ends in -ss, -us or -is, or has < 4 letters
inline std::string stem(std::string w) {
  auto ends = [&](std::string_view suf) { return w.size() >= suf.size() && w.compare(w.size() - suf.size(), suf.size(), suf) == 0; };
  if (ends("ies") && w.size() >= 5) return w.substr(0, w.size() - 3) + "y";
  if (ends("es") && w.size() >= 4) {
    const std::string base = w.substr(0, w.size() - 2);
    auto base_ends = [&](std::string_view suf) {
      return base.size() >= suf.size() && base.compare(base.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (base_ends("s") || base_ends("x") || base_ends("z") || base_ends("ch") || base_ends("sh")) return base;
  }
  if (ends("s") && w.size() >= 4 && !ends("ss") && !ends("us") && !ends("is")) return w.substr(0, w.size() - 1);
  return w;
}

inline std::string stem_phrase(std::string_view normalized) {
  auto words = tokenize(normalized);
  for (auto& w : words) w = stem(w);
  return join(words);
}

// Removes tokens of the guessed class name (matched on stems), then strips
// leading and trailing stop-words. Returns "" when nothing useful remains.
inline std::string clean_label(std::string_view raw, const std::optional<std::string>& guessed_class) {
  auto words = tokenize(normalize_text(raw));
  if (guessed_class) {
    std::set<std::string> banned;
    for (const auto& w : tokenize(normalize_text(*guessed_class))) banned.insert(stem(w));
    std::erase_if(words, [&](const std::string& w) { return banned.count(stem(w)) > 0; });
  }
  while (!words.empty() && is_stop_word(words.front())) words.erase(words.begin());
  while (!words.empty() && is_stop_word(words.back())) words.pop_back();
  return join(words);
}

struct PreprocessResult {
  std::vector<LabelRecord> records;                           // cleaned, empties dropped
  std::map<std::string, std::vector<std::size_t>> by_guess;  // guessed class ("" = resigned) -> record indices
  std::size_t dropped = 0;
};

inline PreprocessResult preprocess(const std::vector<LabelRecord>& records, const std::vector<std::string>& class_vocabulary = {}) {
  PreprocessResult out;
  for (auto r : records) {
    if (r.guessed_class && !class_vocabulary.empty() &&
        std::find(class_vocabulary.begin(), class_vocabulary.end(), *r.guessed_class) == class_vocabulary.end()) {
      throw ValidationError("guessed class '" + *r.guessed_class + "' is not a model class");
    }
    r.text = clean_label(r.text, r.guessed_class);
    if (r.text.empty()) {
      ++out.dropped;
      continue;
    }
    out.by_guess[r.guessed_class.value_or("")].push_back(out.records.size());
    out.records.push_back(std::move(r));
  }
  return out;
}

// ---- embeddings ---------------------------------------------------------------

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void unit_normalize(Vec& v) {
  const double n = std::sqrt(dot(v, v));
  if (n == 0.0) throw ValidationError("cannot normalize a zero vector");
  for (double& x : v) x /= n;
}

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dimension() const = 0;
  virtual std::vector<Vec> embed(const std::vector<std::string>& texts) const = 0;
};

// Hashed character-trigram bag (words padded with '#'), term-frequency
// weights, unit norm.
class TrigramEmbedder final : public EmbeddingProvider {
 public:
  explicit TrigramEmbedder(std::size_t dim = 256) : dim_(dim) {}
  std::size_t dimension() const override { return dim_; }
  std::vector<Vec> embed(const std::vector<std::string>& texts) const override {
    std::vector<Vec> out;
    for (const auto& t : texts) {
      Vec v(dim_, 0.0);
      for (const auto& w : tokenize(normalize_text(t))) {
        const std::string padded = "#" + w + "#";
        for (std::size_t i = 0; i + 3 <= padded.size(); ++i) v[fnv1a64(std::string_view(padded).substr(i, 3)) % dim_] += 1.0;
      }
      if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) throw ValidationError("cannot embed empty text");
      unit_normalize(v);
      out.push_back(std::move(v));
    }
    return out;
  }

 private:
  std::size_t dim_;
};

// Exact-text lookup table, e.g. vectors precomputed by a sentence encoder.
//
// Embedding file: <name>.json manifest
//   {"format": "inv-embeddings", "version": 1, "dimension": d,
//    "texts": [...], "matrix": "<name>.f32"}
// plus a row-major little-endian float32 matrix [len(texts), d] of unit rows.
class TableEmbedder final : public EmbeddingProvider {
 public:
  TableEmbedder(std::size_t dim, std::vector<std::string> texts, std::vector<Vec> rows) : dim_(dim) {
    if (texts.size() != rows.size()) throw ValidationError("embedding table has mismatched text and row counts");
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (rows[i].size() != dim) throw ValidationError("embedding for '" + texts[i] + "' has the wrong dimension");
      const double n = std::sqrt(dot(rows[i], rows[i]));
      if (std::abs(n - 1.0) > 1e-4) throw ValidationError("embedding for '" + texts[i] + "' is not unit length");
      if (!index_.emplace(texts[i], rows_.size()).second) throw ValidationError("duplicate embedding text '" + texts[i] + "'");
      texts_.push_back(texts[i]);
      rows_.push_back(std::move(rows[i]));
    }
  }

  std::size_t dimension() const override { return dim_; }
  const std::vector<std::string>& texts() const { return texts_; }
  const std::vector<Vec>& rows() const { return rows_; }

  std::vector<Vec> embed(const std::vector<std::string>& texts) const override {
    std::vector<Vec> out;
    std::set<std::string> missing;
    for (const auto& t : texts) {
      auto it = index_.find(t);
      if (it == index_.end()) {
        missing.insert(t);
      } else {
        out.push_back(rows_[it->second]);
      }
    }
    if (!missing.empty()) {
      std::string msg = "embedding file has no vector for:";
      for (const auto& m : missing) msg += " '" + m + "'";
      throw ValidationError(msg);
    }
    return out;
  }

 private:
  std::size_t dim_;
  std::vector<std::string> texts_;
  std::vector<Vec> rows_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline void save_embeddings(const std::filesystem::path& manifest, const TableEmbedder& t) {
  const auto blob = manifest.stem().string() + ".f32";
  std::vector<double> flat;
  for (const auto& r : t.rows()) flat.insert(flat.end(), r.begin(), r.end());
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  write_f32_blob(manifest.parent_path() / blob, flat);
  nlohmann::json doc{{"format", "inv-embeddings"}, {"version", 1}, {"dimension", t.dimension()}, {"texts", t.texts()}, {"matrix", blob}};
  std::ofstream(manifest) << doc.dump(2) << "\n";
}

inline TableEmbedder load_embeddings(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ValidationError("cannot read embedding file " + manifest.string());
  try {
    const auto doc = nlohmann::json::parse(in);
    if (doc.value("format", "") != "inv-embeddings" || doc.value("version", 0) != 1) {
      throw ValidationError(manifest.string() + " is not a version-1 embedding file");
    }
    const auto d = doc.at("dimension").get<std::size_t>();
    const auto texts = doc.at("texts").get<std::vector<std::string>>();
    const auto flat = read_f32_blob(manifest.parent_path() / doc.at("matrix").get<std::string>(), texts.size() * d);
    std::vector<Vec> rows;
    for (std::size_t i = 0; i < texts.size(); ++i) rows.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(i * d), flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    return TableEmbedder(d, texts, std::move(rows));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed embedding file " + manifest.string() + ": " + e.what());
  }
}

inline std::vector<Vec> embed(const EmbeddingProvider& p, const std::vector<std::string>& texts) {
  for (const auto& t : texts) {
    if (t.empty()) throw ValidationError("cannot embed an empty label");
  }
  return p.embed(texts);
}

// ---- clustering ---------------------------------------------------------------

struct ContributorStats {
  std::size_t correct = 0;
  std::size_t wrong = 0;
  long hints = 0;
  std::size_t contributors() const { return correct + wrong; }
};

struct LabelGroup {
  std::vector<std::string> members;  // cleaned texts, with repetition
  std::string representative;
  double score = 0.0;
  double raw_score = 0.0;
  ContributorStats stats;
  bool representative_fallback = false;  // every word was a stop-word
  bool clamped = false;                  // raw score was negative
};

// Whole-set cosine diameter at or below this is one group.
inline constexpr double kSingleGroupDiameter = 0.25;
inline constexpr std::size_t kMaxLabelGroups = 10;

inline DistanceMatrix cosine_distances(const std::vector<Vec>& v) {
  DistanceMatrix d(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = i + 1; j < v.size(); ++j) d(i, j) = d(j, i) = std::max(0.0, 1.0 - dot(v[i], v[j]));
  }
  return d;
}

// Word within the members (stop-words excluded) whose embedding has the
// highest mean cosine to the member vectors; ties by frequency, then
// lexicographic.
inline std::pair<std::string, bool> representative_word(const std::vector<std::string>& members, const std::vector<Vec>& member_vectors,
                                                        const EmbeddingProvider& provider) {
  std::map<std::string, std::size_t> freq, raw_freq;
  for (const auto& m : members) {
    for (const auto& w : tokenize(m)) {
      ++raw_freq[w];
      if (!is_stop_word(w)) ++freq[w];
    }
  }
  if (freq.empty()) {
    std::string best;
    std::size_t n = 0;
    for (const auto& [w, c] : raw_freq) {
      if (c > n) best = w, n = c;
    }
    return {best, true};
  }
  std::vector<std::string> words;
  for (const auto& [w, _] : freq) words.push_back(w);
  const auto vecs = embed(provider, words);
  std::string best;
  double best_score = -2.0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    double s = 0.0;
    for (const auto& m : member_vectors) s += dot(vecs[i], m);
    s /= static_cast<double>(member_vectors.size());
    const bool better = s > best_score + 1e-12 || (std::abs(s - best_score) <= 1e-12 && freq[words[i]] > freq[best]);
    if (better) best = words[i], best_score = s;
  }
  return {best, false};
}

inline std::vector<LabelGroup> cluster_labels(const std::vector<std::string>& texts_in, const EmbeddingProvider& provider) {
  if (texts_in.empty()) return {};
  std::vector<std::string> texts = texts_in;
  std::sort(texts.begin(), texts.end());
  const auto vectors = embed(provider, texts);
  const std::size_t n = texts.size();
  std::vector<std::size_t> labels(n, 0);
  if (n < 3) {
    std::map<std::string, std::size_t> ids;
    for (std::size_t i = 0; i < n; ++i) labels[i] = ids.emplace(texts[i], ids.size()).first->second;
  } else {
    const auto dist = cosine_distances(vectors);
    const double diameter = *std::max_element(dist.d.begin(), dist.d.end());
    if (diameter > kSingleGroupDiameter) {
      const auto merges = agglomerate(dist, Linkage::kComplete);
      const auto sel = select_k(merges, dist, 2, std::min(n - 1, kMaxLabelGroups));
      if (sel.k > 0) labels = sel.labels;
    }
  }
  const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<LabelGroup> groups(k);
  std::vector<std::vector<Vec>> member_vectors(k);
  for (std::size_t i = 0; i < n; ++i) {
    groups[labels[i]].members.push_back(texts[i]);
    member_vectors[labels[i]].push_back(vectors[i]);
  }
  for (std::size_t g = 0; g < k; ++g) {
    std::tie(groups[g].representative, groups[g].representative_fallback) = representative_word(groups[g].members, member_vectors[g], provider);
  }
  std::stable_sort(groups.begin(), groups.end(), [](const LabelGroup& a, const LabelGroup& b) {
    if (a.members.size() != b.members.size()) return a.members.size() > b.members.size();
    return a.representative < b.representative;
  });
  return groups;
}

// Merges groups whose representatives share a stem; the merged representative
// is the most frequent surface form (counted over member words), ties
// lexicographic.
inline std::vector<LabelGroup> unify_lemmas(const std::vector<LabelGroup>& groups) {
  std::map<std::string, std::vector<std::size_t>> by_stem;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto s = stem_phrase(groups[i].representative);
    if (!by_stem.count(s)) order.push_back(s);
    by_stem[s].push_back(i);
  }
  std::vector<LabelGroup> out;
  for (const auto& s : order) {
    const auto& idx = by_stem[s];
    if (idx.size() == 1) {
      out.push_back(groups[idx[0]]);
      continue;
    }
    LabelGroup m;
    std::set<std::string> forms;
    for (auto i : idx) {
      m.members.insert(m.members.end(), groups[i].members.begin(), groups[i].members.end());
      forms.insert(groups[i].representative);
      m.representative_fallback = m.representative_fallback || groups[i].representative_fallback;
    }
    std::size_t best = 0;
    for (const auto& f : forms) {
      std::size_t c = 0;
      for (const auto& mem : m.members) {
        for (const auto& w : tokenize(mem)) c += w == f;
      }
      if (c > best || m.representative.empty()) best = c, m.representative = f;
    }
    out.push_back(std::move(m));
  }
  return out;
}

inline constexpr double kHintPenalty = 0.1;
inline constexpr double kWrongOnlyFactor = 0.25;

// Contributors are distinct players among trusted records whose cleaned text
// belongs to the group. score = n - 0.1 * sum(hints), times 0.25 when no
// contributor guessed correctly, clamped at 0. Sorted by score descending.
inline std::vector<LabelGroup> score(std::vector<LabelGroup> groups, const std::vector<LabelRecord>& records) {
  std::unordered_map<std::string, std::size_t> owner;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& m : groups[g].members) owner.emplace(m, g);
  }
  std::vector<std::map<std::string, const LabelRecord*>> players(groups.size());
  for (const auto& r : records) {
    if (!r.trusted) continue;
    auto it = owner.find(r.text);
    if (it != owner.end()) players[it->second].emplace(r.player, &r);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& grp = groups[g];
    grp.stats = {};
    for (const auto& [_, r] : players[g]) {
      (r->correct ? grp.stats.correct : grp.stats.wrong) += 1;
      grp.stats.hints += r->hints_used;
    }
    grp.raw_score = static_cast<double>(grp.stats.contributors()) - kHintPenalty * static_cast<double>(grp.stats.hints);
    grp.score = grp.stats.correct == 0 ? grp.raw_score * kWrongOnlyFactor : grp.raw_score;
    grp.clamped = grp.score < 0.0;
    grp.score = std::max(grp.score, 0.0);
  }
  std::stable_sort(groups.begin(), groups.end(), [](const LabelGroup& a, const LabelGroup& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.representative < b.representative;
  });
  return groups;
}

// ---- per-map analysis ---------------------------------------------------------

struct LabeledMap {
  ClusterMap map;
  std::vector<LabelGroup> groups;        // sorted by score descending
  std::vector<std::string> merged_from;  // source cluster ids
};

inline std::optional<std::string> top_label(const LabeledMap& m) {
  if (m.groups.empty()) return std::nullopt;
  return m.groups.front().representative;
}

// Maps sharing a top label merge into one: A = sum(w A) / sum(w), w = sum(w);
// each label's score becomes the weight-averaged score, absent labels
// counting 0. Unlabeled maps pass through. Output sorted by weight.
inline std::vector<LabeledMap> merge_same_top_label(const std::vector<LabeledMap>& maps) {
  std::vector<std::vector<std::size_t>> buckets;
  std::map<std::string, std::size_t> bucket_of;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto t = top_label(maps[i]);
    if (t && bucket_of.count(*t)) {
      buckets[bucket_of[*t]].push_back(i);
      continue;
    }
    if (t) bucket_of[*t] = buckets.size();
    buckets.push_back({i});
  }
  std::vector<LabeledMap> out;
  for (const auto& b : buckets) {
    if (b.size() == 1) {
      out.push_back(maps[b[0]]);
      if (out.back().merged_from.empty()) out.back().merged_from = {out.back().map.id};
      continue;
    }
    std::vector<std::size_t> idx = b;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return maps[x].map.weight > maps[y].map.weight; });
    LabeledMap m;
    const auto& first = maps[idx[0]].map;
    m.map.id = first.id;
    m.map.layer = first.layer;
    m.map.map = Map2D(first.map.height, first.map.width);
    std::map<std::string, LabelGroup> labels;
    std::map<std::string, double> weighted;
    for (auto i : idx) {
      const auto& src = maps[i];
      if (src.map.layer != first.layer) throw ValidationError("cannot merge cluster maps from different layers");
      for (std::size_t p = 0; p < m.map.map.size(); ++p) m.map.map.values[p] += src.map.weight * src.map.map.values[p];
      m.map.weight += src.map.weight;
      m.map.members.insert(m.map.members.end(), src.map.members.begin(), src.map.members.end());
      if (src.merged_from.empty()) {
        m.merged_from.push_back(src.map.id);
      } else {
        m.merged_from.insert(m.merged_from.end(), src.merged_from.begin(), src.merged_from.end());
      }
      for (const auto& g : src.groups) {
        auto [it, fresh] = labels.emplace(g.representative, g);
        if (!fresh) {
          auto& acc = it->second;
          acc.members.insert(acc.members.end(), g.members.begin(), g.members.end());
          acc.stats.correct += g.stats.correct;
          acc.stats.wrong += g.stats.wrong;
          acc.stats.hints += g.stats.hints;
          acc.clamped = acc.clamped || g.clamped;
          acc.representative_fallback = acc.representative_fallback || g.representative_fallback;
        }
        weighted[g.representative] += src.map.weight * g.score;
      }
    }
    for (double& v : m.map.map.values) v /= m.map.weight;
    std::sort(m.map.members.begin(), m.map.members.end());
    for (auto& [rep, g] : labels) {
      g.score = weighted[rep] / m.map.weight;
      g.raw_score = g.score;
      m.groups.push_back(std::move(g));
    }
    std::stable_sort(m.groups.begin(), m.groups.end(), [](const LabelGroup& a, const LabelGroup& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.representative < b.representative;
    });
    out.push_back(std::move(m));
  }
  std::stable_sort(out.begin(), out.end(), [](const LabeledMap& a, const LabeledMap& b) { return a.map.weight > b.map.weight; });
  return out;
}

// Trusted records of one map: clean -> cluster -> unify lemmas -> score.
inline std::vector<LabelGroup> analyze_map_labels(const std::vector<LabelRecord>& cleaned, const EmbeddingProvider& provider) {
  std::vector<std::string> texts;
  for (const auto& r : cleaned) {
    if (r.trusted) texts.push_back(r.text);
  }
  return score(unify_lemmas(cluster_labels(texts, provider)), cleaned);
}

// map ref -> scored groups, over every map with at least one trusted label.
inline std::map<std::string, std::vector<LabelGroup>> analyze_labels(const std::vector<LabelRecord>& records, const EmbeddingProvider& provider,
                                                                     const std::vector<std::string>& class_vocabulary = {}) {
  const auto pre = preprocess(records, class_vocabulary);
  std::map<std::string, std::vector<LabelRecord>> per_map;
  for (const auto& r : pre.records) per_map[r.map_ref].push_back(r);
  std::map<std::string, std::vector<LabelGroup>> out;
  for (const auto& [ref, recs] : per_map) {
    auto groups = analyze_map_labels(recs, provider);
    if (!groups.empty()) out[ref] = std::move(groups);
  }
  return out;
}

// ---- IO -----------------------------------------------------------------------

// One line per labeled game in the crowd-service export.
inline nlohmann::json label_export_line(const std::string& player, const std::string& map_ref, const std::optional<std::string>& guessed,
                                        const std::string& truth, bool correct, int hints, const std::vector<std::string>& labels, bool trusted) {
  return {{"user", player},
          {"cluster_map_id", map_ref},
          {"guessed_class", guessed ? nlohmann::json(*guessed) : nlohmann::json(nullptr)},
          {"true_class", truth},
          {"correct", correct},
          {"hints_used", hints},
          {"labels", labels},
          {"trusted", trusted}};
}

inline std::vector<LabelRecord> parse_label_export(std::istream& in, const std::string& source = "label export") {
  std::vector<LabelRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      LabelRecord base;
      base.player = j.at("user").get<std::string>();
      base.map_ref = j.at("cluster_map_id").get<std::string>();
      if (!j.at("guessed_class").is_null()) base.guessed_class = j.at("guessed_class").get<std::string>();
      base.true_class = j.at("true_class").get<std::string>();
      base.correct = j.at("correct").get<bool>();
      base.hints_used = j.at("hints_used").get<int>();
      base.trusted = j.at("trusted").get<bool>();
      if (base.hints_used < 0 || base.hints_used > 5) throw ValidationError("hints_used out of range");
      for (const auto& t : j.at("labels")) {
        LabelRecord r = base;
        r.text = t.get<std::string>();
        out.push_back(std::move(r));
      }
    } catch (const std::exception& e) {
      throw ValidationError(source + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<LabelRecord> read_label_export(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  return parse_label_export(in, path.filename().string());
}

inline nlohmann::json groups_to_json(const std::vector<LabelGroup>& groups) {
  auto arr = nlohmann::json::array();
  for (const auto& g : groups) {
    arr.push_back({{"representative", g.representative},
                   {"score", g.score},
                   {"raw_score", g.raw_score},
                   {"members", g.members},
                   {"correct_contributors", g.stats.correct},
                   {"wrong_contributors", g.stats.wrong},
                   {"hints", g.stats.hints},
                   {"representative_fallback", g.representative_fallback},
                   {"clamped", g.clamped}});
  }
  return arr;
}

inline std::vector<LabelGroup> groups_from_json(const nlohmann::json& arr) {
  std::vector<LabelGroup> out;
  for (const auto& j : arr) {
    LabelGroup g;
    g.representative = j.at("representative").get<std::string>();
    g.score = j.at("score").get<double>();
    g.raw_score = j.value("raw_score", g.score);
    g.members = j.value("members", std::vector<std::string>{});
    g.stats.correct = j.value("correct_contributors", std::size_t{0});
    g.stats.wrong = j.value("wrong_contributors", std::size_t{0});
    g.stats.hints = j.value("hints", 0L);
    g.representative_fallback = j.value("representative_fallback", false);
    g.clamped = j.value("clamped", false);
    out.push_back(std::move(g));
  }
  return out;
}

// {"format": "inv-labels", "version": 1, "maps": {"<map ref>": [groups]}}
inline void save_label_analysis(const std::filesystem::path& path, const std::map<std::string, std::vector<LabelGroup>>& result,
                                const std::string& config_hash = {}) {
  nlohmann::json doc{{"format", "inv-labels"}, {"version", 1}, {"config_hash", config_hash}, {"maps", nlohmann::json::object()}};
  for (const auto& [ref, groups] : result) doc["maps"][ref] = groups_to_json(groups);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << doc.dump(2) << "\n";
}

inline std::map<std::string, std::vector<LabelGroup>> load_label_analysis(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  try {
    const auto doc = nlohmann::json::parse(in);
    if (doc.value("format", "") != "inv-labels" || doc.value("version", 0) != 1) {
      throw ValidationError(path.string() + " is not a version-1 label analysis");
    }
    std::map<std::string, std::vector<LabelGroup>> out;
    for (const auto& [ref, arr] : doc.at("maps").items()) out[ref] = groups_from_json(arr);
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed label analysis " + path.string() + ": " + e.what());
  }
}

}  // namespace inv
