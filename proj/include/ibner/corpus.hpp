#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "ibner/error.hpp"

namespace ibner {

using TypeId = std::size_t;
using TokenId = std::size_t;
using TokenSeq = std::vector<std::string>;

struct GoldEntity {
    std::size_t start = 0;
    std::size_t end = 0;  // inclusive
    TypeId type = 0;
    std::vector<TokenSeq> synonyms;

    std::size_t length() const { return end - start + 1; }
};

struct Sentence {
    std::string doc_id;
    /// Ordinal of this sentence among the records sharing doc_id.
    std::size_t sent = 0;
    TokenSeq tokens;
    std::vector<GoldEntity> gold_entities;
};

/// Entity-type inventory; ids follow first appearance.
class EntityTypes {
public:
    EntityTypes() = default;
    explicit EntityTypes(const std::vector<std::string>& names) {
        for (const auto& n : names) add(n);
    }

    TypeId add(const std::string& name) {
        if (auto it = ids_.find(name); it != ids_.end()) return it->second;
        ids_.emplace(name, names_.size());
        names_.push_back(name);
        return names_.size() - 1;
    }
    bool contains(const std::string& name) const { return ids_.count(name) != 0; }
    TypeId id(const std::string& name) const {
        auto it = ids_.find(name);
        if (it == ids_.end()) throw DataError("unknown entity type '" + name + "'");
        return it->second;
    }
    const std::string& name(TypeId id) const { return names_.at(id); }
    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }

    friend bool operator==(const EntityTypes& a, const EntityTypes& b) { return a.names_ == b.names_; }

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, TypeId> ids_;
};

struct Corpus {
    std::vector<Sentence> sentences;
    EntityTypes types;
    std::size_t split_sentences = 0;
    std::size_t dropped_entities = 0;
    std::vector<std::string> warnings;

    std::size_t entity_count() const {
        std::size_t n = 0;
        for (const auto& s : sentences) n += s.gold_entities.size();
        return n;
    }
};

struct SpanCandidate {
    const Sentence* sentence = nullptr;
    std::size_t start = 0;
    std::size_t end = 0;  // inclusive
    std::vector<std::uint8_t> label;  // multi-hot over entity types

    bool is_entity() const { return std::any_of(label.begin(), label.end(), [](auto b) { return b != 0; }); }
};

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline std::string join(const TokenSeq& tokens, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += sep;
        out += tokens[i];
    }
    return out;
}

inline TokenSeq split_whitespace(std::string_view s) {
    TokenSeq out;
    std::istringstream is{std::string(s)};
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

inline TokenSeq surface(const Sentence& s, std::size_t start, std::size_t end) {
    return TokenSeq(s.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                    s.tokens.begin() + static_cast<std::ptrdiff_t>(end) + 1);
}

// Corpus loading --------------------------------------------------------------------

struct LoadOptions {
    std::size_t max_sentence_length = 512;
};

namespace detail {

struct RawEntity {
    std::size_t start, end;
    std::string type;
};

inline void split_long(Sentence&& s, std::vector<RawEntity>&& ents, std::size_t limit, Corpus& corpus,
                       std::size_t& next_sent, EntityTypes& types) {
    if (s.tokens.size() <= limit) {
        s.sent = next_sent++;
        for (auto& e : ents) s.gold_entities.push_back(GoldEntity{e.start, e.end, types.add(e.type), {}});
        corpus.sentences.push_back(std::move(s));
        return;
    }
    std::size_t dropped = 0;
    for (std::size_t off = 0; off < s.tokens.size(); off += limit) {
        const std::size_t stop = std::min(off + limit, s.tokens.size());
        Sentence piece;
        piece.doc_id = s.doc_id;
        piece.sent = next_sent++;
        piece.tokens.assign(s.tokens.begin() + static_cast<std::ptrdiff_t>(off),
                            s.tokens.begin() + static_cast<std::ptrdiff_t>(stop));
        for (const auto& e : ents) {
            if (e.start >= off && e.end < stop) {
                piece.gold_entities.push_back(GoldEntity{e.start - off, e.end - off, types.add(e.type), {}});
            } else if (e.start >= off && e.start < stop) {
                ++dropped;  // crosses the cut; counted once at its start piece
            }
        }
        corpus.sentences.push_back(std::move(piece));
    }
    ++corpus.split_sentences;
    corpus.dropped_entities += dropped;
    if (dropped > 0) {
        corpus.warnings.push_back("doc " + s.doc_id + ": sentence of " + std::to_string(s.tokens.size()) +
                                  " tokens split at " + std::to_string(limit) + ", dropped " +
                                  std::to_string(dropped) + " entities crossing the cut");
    }
}

}  // namespace detail

/// Parses line-delimited JSON records
/// {"doc_id": str, "tokens": [str], "entities": [{"start", "end", "type"}]}.
/// Offsets are token indices, end inclusive. Blank lines are skipped.
inline Corpus parse_corpus(std::istream& in, const std::string& source, const LoadOptions& opt = {}) {
    if (opt.max_sentence_length < 1) throw UsageError("max_sentence_length must be >= 1");
    Corpus corpus;
    std::map<std::string, std::size_t> next_sent;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + ": malformed record: " + e.what());
        }
        Sentence s;
        std::vector<detail::RawEntity> ents;
        try {
            s.doc_id = rec.at("doc_id").get<std::string>();
            s.tokens = rec.at("tokens").get<TokenSeq>();
            if (rec.contains("entities")) {
                for (const auto& e : rec.at("entities")) {
                    ents.push_back({e.at("start").get<std::size_t>(), e.at("end").get<std::size_t>(),
                                    e.at("type").get<std::string>()});
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": malformed record: " + e.what());
        }
        std::set<std::tuple<std::size_t, std::size_t, std::string>> seen;
        for (const auto& e : ents) {
            if (e.start > e.end || e.end >= s.tokens.size()) {
                throw DataError(where + ": doc " + s.doc_id + ": entity offsets (" + std::to_string(e.start) + "," +
                                std::to_string(e.end) + ") invalid for " + std::to_string(s.tokens.size()) +
                                " tokens");
            }
            if (!seen.emplace(e.start, e.end, e.type).second) {
                throw DataError(where + ": doc " + s.doc_id + ": duplicate entity (" + std::to_string(e.start) + "," +
                                std::to_string(e.end) + "," + e.type + ")");
            }
        }
        detail::split_long(std::move(s), std::move(ents), opt.max_sentence_length, corpus,
                           next_sent[rec.at("doc_id").get<std::string>()], corpus.types);
    }
    return corpus;
}

inline Corpus load_corpus(const std::string& path, const LoadOptions& opt = {}) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus " + path);
    return parse_corpus(in, path, opt);
}

/// Re-expresses entity type ids against a fixed inventory (e.g. a checkpoint's).
inline void remap_types(Corpus& corpus, const EntityTypes& inventory) {
    for (auto& s : corpus.sentences) {
        for (auto& e : s.gold_entities) {
            const std::string& name = corpus.types.name(e.type);
            if (!inventory.contains(name)) {
                throw DataError("entity type '" + name + "' in corpus is not in the model's type inventory");
            }
            e.type = inventory.id(name);
        }
    }
    corpus.types = inventory;
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
    for (const auto& s : corpus.sentences) {
        nlohmann::json rec;
        rec["doc_id"] = s.doc_id;
        rec["tokens"] = s.tokens;
        rec["entities"] = nlohmann::json::array();
        for (const auto& e : s.gold_entities) {
            rec["entities"].push_back({{"start", e.start}, {"end", e.end}, {"type", corpus.types.name(e.type)}});
        }
        out << rec.dump() << '\n';
    }
}

// Span enumeration ---------------------------------------------------------------------

/// All spans of length <= max_span_length in lexicographic (start, end) order,
/// labelled by exact offset match against the gold entities.
inline std::vector<SpanCandidate> enumerate_spans(const Sentence& s, std::size_t max_span_length,
                                                  std::size_t num_types) {
    if (max_span_length < 1) throw UsageError("enumerate_spans: max span length must be >= 1");
    std::map<std::pair<std::size_t, std::size_t>, std::vector<TypeId>> gold;
    for (const auto& e : s.gold_entities) gold[{e.start, e.end}].push_back(e.type);

    std::vector<SpanCandidate> out;
    const std::size_t n = s.tokens.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n && j - i + 1 <= max_span_length; ++j) {
            SpanCandidate c{&s, i, j, std::vector<std::uint8_t>(num_types, 0)};
            if (auto it = gold.find({i, j}); it != gold.end()) {
                for (auto t : it->second) {
                    if (t >= num_types) throw DataError("enumerate_spans: type id out of range");
                    c.label[t] = 1;
                }
            }
            out.push_back(std::move(c));
        }
    }
    return out;
}

// Synonym dictionary --------------------------------------------------------------------

class SynonymDictionary {
public:
    /// Adds a synonym under the lowercased key. Returns false when it is
    /// dropped (self-synonym or duplicate).
    bool add(std::string_view surface, std::string_view synonym) {
        std::string key = to_lower(surface);
        if (to_lower(synonym) == key) return false;
        auto& list = entries_[key];
        if (std::find(list.begin(), list.end(), synonym) != list.end()) return false;
        list.emplace_back(synonym);
        return true;
    }

    const std::vector<std::string>* lookup(std::string_view surface) const {
        auto it = entries_.find(to_lower(surface));
        return it == entries_.end() ? nullptr : &it->second;
    }

    std::size_t size() const { return entries_.size(); }
    const std::map<std::string, std::vector<std::string>>& entries() const { return entries_; }

private:
    std::map<std::string, std::vector<std::string>> entries_;
};

/// Reads "surface<TAB>synonym" lines; '#' starts a comment line.
inline SynonymDictionary parse_synonym_dict(std::istream& in, const std::string& source) {
    SynonymDictionary dict;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError(source + ":" + std::to_string(lineno) + ": expected 'surface<TAB>synonym'");
        }
        dict.add(std::string_view(line).substr(0, tab), std::string_view(line).substr(tab + 1));
    }
    return dict;
}

inline SynonymDictionary load_synonym_dict(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open synonym dictionary " + path);
    return parse_synonym_dict(in, path);
}

struct SynonymCoverage {
    std::size_t entities = 0;
    std::size_t with_synonyms = 0;

    /// Percentage of gold entities with at least one synonym.
    double percent() const {
        return entities == 0 ? 0.0 : 100.0 * static_cast<double>(with_synonyms) / static_cast<double>(entities);
    }
};

/// Looks up every gold entity's lowercased surface form and stores its
/// whitespace-tokenized synonyms (replacing any previous ones).
inline SynonymCoverage attach_synonyms(Corpus& corpus, const SynonymDictionary& dict) {
    SynonymCoverage cov;
    for (auto& s : corpus.sentences) {
        for (auto& e : s.gold_entities) {
            e.synonyms.clear();
            ++cov.entities;
            const auto* syns = dict.lookup(join(surface(s, e.start, e.end)));
            if (syns == nullptr) continue;
            for (const auto& syn : *syns) {
                auto toks = split_whitespace(syn);
                if (!toks.empty()) e.synonyms.push_back(std::move(toks));
            }
            if (!e.synonyms.empty()) ++cov.with_synonyms;
        }
    }
    return cov;
}

// Vocabulary -----------------------------------------------------------------------------

class Vocabulary {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kStart = 2;
    static constexpr TokenId kEnd = 3;
    static constexpr std::size_t kReserved = 4;

    Vocabulary() : tokens_{"<pad>", "<unk>", "<s>", "</s>"} {}

    /// Rebuilds from a full id-ordered token list (reserved symbols first).
    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        if (tokens_.size() < kReserved) throw DataError("vocabulary: missing reserved symbols");
        for (std::size_t i = kReserved; i < tokens_.size(); ++i) {
            if (!ids_.emplace(tokens_[i], i).second) throw DataError("vocabulary: duplicate token " + tokens_[i]);
        }
    }

    TokenId add(const std::string& token) {
        if (auto it = ids_.find(token); it != ids_.end()) return it->second;
        ids_.emplace(token, tokens_.size());
        tokens_.push_back(token);
        return tokens_.size() - 1;
    }

    /// Id of `token`, or kUnk when absent.
    TokenId id(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnk : it->second;
    }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    const std::string& token(TokenId id) const { return tokens_.at(id); }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::vector<TokenId> encode(const TokenSeq& toks) const {
        std::vector<TokenId> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(id(t));
        return out;
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

/// Tokens (including those of attached synonyms) seen at least `min_freq`
/// times get ids in first-appearance order; the rest map to UNK.
inline Vocabulary build_vocab(const Corpus& corpus, std::size_t min_freq = 1) {
    if (min_freq < 1) throw UsageError("build_vocab: min_freq must be >= 1");
    std::unordered_map<std::string, std::size_t> freq;
    std::vector<std::string> order;
    auto count = [&](const std::string& t) {
        if (freq[t]++ == 0) order.push_back(t);
    };
    for (const auto& s : corpus.sentences) {
        for (const auto& t : s.tokens) count(t);
        for (const auto& e : s.gold_entities)
            for (const auto& syn : e.synonyms)
                for (const auto& t : syn) count(t);
    }
    Vocabulary v;
    for (const auto& t : order)
        if (freq[t] >= min_freq) v.add(t);
    return v;
}

}  // namespace ibner
