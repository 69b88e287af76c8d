#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "ibner/model.hpp"

namespace ibner {

/// An entity mention; two keys are equal only under exact match of every field.
struct EntityKey {
    std::string doc_id;
    std::size_t sent = 0;
    std::size_t start = 0;
    std::size_t end = 0;  // inclusive
    TypeId type = 0;

    auto tie() const { return std::tie(doc_id, sent, start, end, type); }
    friend bool operator<(const EntityKey& a, const EntityKey& b) { return a.tie() < b.tie(); }
    friend bool operator==(const EntityKey& a, const EntityKey& b) { return a.tie() == b.tie(); }

    bool same_span(const EntityKey& o) const {
        return doc_id == o.doc_id && sent == o.sent && start == o.start && end == o.end;
    }
};

struct PredictedEntity {
    EntityKey key;
    double prob = 0.0;
};

inline std::vector<EntityKey> gold_keys(const Corpus& corpus) {
    std::vector<EntityKey> out;
    for (const auto& s : corpus.sentences)
        for (const auto& e : s.gold_entities) out.push_back({s.doc_id, s.sent, e.start, e.end, e.type});
    return out;
}

/// Every candidate span with a type probability above `threshold`, one
/// record per (span, type), in span order.
inline std::vector<PredictedEntity> predict_sentence(const Model& m, const Sentence& s, double threshold) {
    std::vector<PredictedEntity> out;
    if (s.tokens.empty()) return out;
    std::vector<ad::RowRange> ranges;
    for (const auto& c : enumerate_spans(s, m.config().max_span_length, m.types().size()))
        ranges.push_back({c.start, c.end});
    const Tensor probs = m.span_probabilities(s, ranges);
    for (std::size_t r = 0; r < ranges.size(); ++r) {
        std::vector<double> row(probs.storage().begin() + static_cast<std::ptrdiff_t>(r * probs.cols()),
                                probs.storage().begin() + static_cast<std::ptrdiff_t>((r + 1) * probs.cols()));
        const Prediction p = threshold_probs(std::move(row), threshold);
        for (TypeId t : p.types) out.push_back({{s.doc_id, s.sent, ranges[r].first, ranges[r].last, t}, p.probs[t]});
    }
    return out;
}

inline std::vector<PredictedEntity> predict_corpus(const Model& m, const Corpus& corpus, double threshold) {
    std::vector<PredictedEntity> out;
    for (const auto& s : corpus.sentences) {
        auto p = predict_sentence(m, s, threshold);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

inline std::vector<EntityKey> keys_of(const std::vector<PredictedEntity>& preds) {
    std::vector<EntityKey> out;
    out.reserve(preds.size());
    for (const auto& p : preds) out.push_back(p.key);
    return out;
}

// Exact-match scoring --------------------------------------------------------------------

struct PrfCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
    double recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
    double f1() const {
        const double p = precision(), r = recall();
        return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    }
};

struct EvalReport {
    std::size_t true_positives = 0;
    std::size_t false_positives = 0;
    std::size_t false_negatives = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::map<TypeId, PrfCounts> per_type;
    double macro_f1 = 0.0;
    std::vector<EntityKey> fp_keys;  // sorted
};

/// Micro-averaged exact-match P/R/F1 over the deduplicated prediction and
/// gold sets, with per-type counts and the unweighted mean of per-type F1.
inline EvalReport exact_match_f1(const std::vector<EntityKey>& predictions, const std::vector<EntityKey>& gold) {
    const std::set<EntityKey> P(predictions.begin(), predictions.end());
    const std::set<EntityKey> G(gold.begin(), gold.end());
    EvalReport r;
    for (const auto& p : P) {
        if (G.count(p)) {
            ++r.true_positives;
            ++r.per_type[p.type].tp;
        } else {
            ++r.false_positives;
            ++r.per_type[p.type].fp;
            r.fp_keys.push_back(p);
        }
    }
    for (const auto& g : G) {
        if (!P.count(g)) {
            ++r.false_negatives;
            ++r.per_type[g.type].fn;
        }
    }
    const PrfCounts micro{r.true_positives, r.false_positives, r.false_negatives};
    r.precision = micro.precision();
    r.recall = micro.recall();
    r.f1 = micro.f1();
    if (!r.per_type.empty()) {
        double s = 0.0;
        for (const auto& [t, c] : r.per_type) s += c.f1();
        r.macro_f1 = s / static_cast<double>(r.per_type.size());
    }
    return r;
}

struct ErrorBreakdown {
    std::size_t category_errors = 0;  // right span, wrong type
    std::size_t span_errors = 0;      // no gold entity on this span
};

inline ErrorBreakdown classify_errors(const std::vector<EntityKey>& false_positives, const std::vector<EntityKey>& gold) {
    std::set<std::tuple<std::string, std::size_t, std::size_t, std::size_t>> spans;
    for (const auto& g : gold) spans.emplace(g.doc_id, g.sent, g.start, g.end);
    ErrorBreakdown b;
    for (const auto& fp : false_positives) {
        if (spans.count({fp.doc_id, fp.sent, fp.start, fp.end})) ++b.category_errors;
        else ++b.span_errors;
    }
    return b;
}

// BLEU-2 ---------------------------------------------------------------------------------

/// Sentence-level BLEU-2 without smoothing: geometric mean of clipped unigram
/// and bigram precision times the brevity penalty. A one-token hypothesis is
/// scored on unigrams alone. The effective reference length is the closest
/// one (shorter wins ties).
inline double bleu2(const TokenSeq& hypothesis, const std::vector<TokenSeq>& references) {
    const std::size_t c = hypothesis.size();
    if (c == 0 || references.empty()) return 0.0;

    auto clipped = [&](std::size_t n) {
        std::map<std::vector<std::string>, std::size_t> hyp, best;
        for (std::size_t i = 0; i + n <= c; ++i) ++hyp[{hypothesis.begin() + i, hypothesis.begin() + i + n}];
        for (const auto& ref : references) {
            std::map<std::vector<std::string>, std::size_t> cnt;
            for (std::size_t i = 0; i + n <= ref.size(); ++i) ++cnt[{ref.begin() + i, ref.begin() + i + n}];
            for (const auto& [g, k] : cnt) best[g] = std::max(best[g], k);
        }
        std::size_t match = 0;
        for (const auto& [g, k] : hyp) {
            auto it = best.find(g);
            if (it != best.end()) match += std::min(k, it->second);
        }
        return static_cast<double>(match) / static_cast<double>(c - n + 1);
    };

    std::size_t r = references[0].size();
    for (const auto& ref : references) {
        const auto d = [&](std::size_t len) { return len > c ? len - c : c - len; };
        if (d(ref.size()) < d(r) || (d(ref.size()) == d(r) && ref.size() < r)) r = ref.size();
    }
    const double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));

    const double p1 = clipped(1);
    if (p1 == 0.0) return 0.0;
    if (c < 2) return bp * p1;
    const double p2 = clipped(2);
    if (p2 == 0.0) return 0.0;
    return bp * std::sqrt(p1 * p2);
}

inline double bleu2(const TokenSeq& hypothesis, const TokenSeq& reference) {
    return bleu2(hypothesis, std::vector<TokenSeq>{reference});
}

// Reconstruction -------------------------------------------------------------------------

struct Reconstruction {
    EntityKey key;
    TokenSeq original;
    TokenSeq reconstruction;
    double bleu = 0.0;
};

struct ReconstructionReport {
    std::vector<Reconstruction> rows;
    double mean_bleu = 0.0;
};

namespace detail {

// Posterior means for every gold entity of one sentence: rows of [m, dim].
template <class MuFn>
Tensor gold_means(const Model& m, const Sentence& s, MuFn&& mu_of) {
    ad::Graph g(false);
    std::vector<ad::RowRange> ranges;
    for (const auto& e : s.gold_entities) ranges.push_back({e.start, e.end});
    ad::Var spans = span_embed_batch(m.contextualize(g, s), ranges);
    return mu_of(g, spans).value();
}

inline Tensor row_tensor(const Tensor& M, std::size_t r) {
    const std::size_t c = M.cols();
    return Tensor(Shape{c}, std::vector<double>(M.storage().begin() + static_cast<std::ptrdiff_t>(r * c),
                                                M.storage().begin() + static_cast<std::ptrdiff_t>((r + 1) * c)));
}

}  // namespace detail

/// Greedy reconstruction of every gold entity from the mean of its
/// span-reconstruction posterior.
inline ReconstructionReport reconstruction_report(const Model& m, const Corpus& corpus) {
    if (!m.has_sr()) throw Error("no reconstruction decoder in this model");
    ReconstructionReport rep;
    double sum = 0.0;
    for (const auto& s : corpus.sentences) {
        if (s.gold_entities.empty()) continue;
        Tensor mu = detail::gold_means(m, s, [&](ad::Graph& g, ad::Var spans) {
            return posterior_params(g, spans, m.heads(), VaeComponent::sr).mu;
        });
        for (std::size_t e = 0; e < s.gold_entities.size(); ++e) {
            const auto& ent = s.gold_entities[e];
            Reconstruction row;
            row.key = {s.doc_id, s.sent, ent.start, ent.end, ent.type};
            row.original = surface(s, ent.start, ent.end);
            for (TokenId id : m.sr_decoder().greedy(detail::row_tensor(mu, e), m.config().max_decode_length).tokens)
                row.reconstruction.push_back(m.vocab().token(id));
            row.bleu = bleu2(row.reconstruction, row.original);
            sum += row.bleu;
            rep.rows.push_back(std::move(row));
        }
    }
    if (!rep.rows.empty()) rep.mean_bleu = sum / static_cast<double>(rep.rows.size());
    return rep;
}

// Posterior export -----------------------------------------------------------------------

enum class LatentSource { z1, z3 };

inline std::string_view to_string(LatentSource s) { return s == LatentSource::z1 ? "z1" : "z3"; }

inline LatentSource parse_latent_source(std::string_view s) {
    if (s == "z1") return LatentSource::z1;
    if (s == "z3") return LatentSource::z3;
    throw UsageError("unknown latent source '" + std::string(s) + "' (expected z1 or z3)");
}

/// Writes one TSV row per gold entity with the posterior mean of the chosen
/// latent. Returns the number of rows.
inline std::size_t export_posteriors(const Model& m, const Corpus& corpus, LatentSource src, std::ostream& os) {
    if (src == LatentSource::z1 && !m.has_sr()) throw Error("z1 export needs a span-reconstruction model");
    if (src == LatentSource::z3 && !m.has_vib()) throw Error("z3 export needs a VIB model");
    const std::size_t k = src == LatentSource::z1 ? m.heads().latent() : m.vib().latent();

    os << "doc_id\tstart\tend\ttype\tsource";
    for (std::size_t i = 0; i < k; ++i) os << "\tc" << i;
    os << '\n';
    std::size_t rows = 0;
    char buf[32];
    for (const auto& s : corpus.sentences) {
        if (s.gold_entities.empty()) continue;
        Tensor mu = detail::gold_means(m, s, [&](ad::Graph& g, ad::Var spans) {
            return src == LatentSource::z1 ? posterior_params(g, spans, m.heads(), VaeComponent::sr).mu
                                           : m.vib().compress(g, spans).mu;
        });
        for (std::size_t e = 0; e < s.gold_entities.size(); ++e) {
            const auto& ent = s.gold_entities[e];
            os << s.doc_id << '\t' << ent.start << '\t' << ent.end << '\t' << m.types().name(ent.type) << '\t'
               << to_string(src);
            for (std::size_t i = 0; i < k; ++i) {
                std::snprintf(buf, sizeof buf, "%.17g", mu.at(e, i));
                os << '\t' << buf;
            }
            os << '\n';
            ++rows;
        }
    }
    if (!os) throw DataError("posterior export: write failed");
    return rows;
}

inline std::size_t export_posteriors(const Model& m, const Corpus& corpus, LatentSource src, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path + "'");
    return export_posteriors(m, corpus, src, out);
}

// Serialization --------------------------------------------------------------------------

inline void write_predictions(std::ostream& os, const std::vector<PredictedEntity>& preds, const EntityTypes& types) {
    for (const auto& p : preds) {
        nlohmann::json j{{"doc_id", p.key.doc_id}, {"sent", p.key.sent},      {"start", p.key.start},
                         {"end", p.key.end},       {"type", types.name(p.key.type)}, {"prob", p.prob}};
        os << j.dump() << '\n';
    }
}

inline nlohmann::json report_json(const EvalReport& r, const ErrorBreakdown& b, const EntityTypes& types) {
    nlohmann::json per_type = nlohmann::json::object();
    for (const auto& [t, c] : r.per_type) {
        per_type[types.name(t)] = {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"precision", c.precision()},
                                   {"recall", c.recall()}, {"f1", c.f1()}};
    }
    return {{"true_positives", r.true_positives},
            {"false_positives", r.false_positives},
            {"false_negatives", r.false_negatives},
            {"precision", r.precision},
            {"recall", r.recall},
            {"f1", r.f1},
            {"macro_f1", r.macro_f1},
            {"per_type", per_type},
            {"errors", {{"category_errors", b.category_errors}, {"span_errors", b.span_errors}}}};
}

}  // namespace ibner
