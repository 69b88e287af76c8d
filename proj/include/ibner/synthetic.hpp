#pragma once

#include <algorithm>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "ibner/corpus.hpp"

namespace ibner::synthetic {

// Toy single-type corpus for smoke tests and memorization checks. Entity
// words and context words are disjoint and entity mentions never touch.

inline const std::vector<std::string>& context_words() {
    static const std::vector<std::string> w{
        "the",      "patient",  "was",       "admitted", "with",     "and",      "showed",   "signs",
        "of",       "after",    "a",         "history",  "reported", "no",       "evidence", "for",
        "treated",  "by",       "doctors",   "noted",    "in",       "this",     "case",     "mild",
        "severe",   "during",   "follow-up", "we",       "observed", "on",       "day",      "three",
        "later",    "family",   "denied",    "previous", "episodes", "clinic",   "visit",    "course"};
    return w;
}

inline const std::vector<TokenSeq>& entity_forms() {
    static const std::vector<TokenSeq> f{
        {"asthma"},          {"anemia"},           {"gout"},          {"migraine"},
        {"psoriasis"},       {"scurvy"},           {"rickets"},       {"tetanus"},
        {"renal", "failure"}, {"liver", "cirrhosis"}, {"heart", "murmur"}, {"bone", "fracture"},
        {"skin", "rash"},    {"lung", "fibrosis"}, {"iron", "overload"}, {"thyroid", "nodule"},
        {"acute", "coronary", "syndrome"},          {"chronic", "fatigue", "disorder"},
        {"bacterial", "sinus", "infection"},        {"spinal", "muscular", "atrophy"}};
    return f;
}

/// Synonyms for 13 of the 20 forms. Keys as they appear in the dictionary file.
inline const std::vector<std::pair<std::string, std::string>>& synonym_pairs() {
    static const std::vector<std::pair<std::string, std::string>> p{
        {"Asthma", "bronchial asthma"},
        {"anemia", "low hemoglobin"},
        {"gout", "uric arthritis"},
        {"Migraine", "vascular headache"},
        {"psoriasis", "plaque dermatitis"},
        {"scurvy", "vitamin deficiency"},
        {"renal failure", "kidney failure"},
        {"renal failure", "kidney insufficiency"},
        {"Liver Cirrhosis", "hepatic cirrhosis"},
        {"heart murmur", "cardiac murmur"},
        {"bone fracture", "broken bone"},
        {"skin rash", "dermatitis"},
        {"acute coronary syndrome", "coronary insufficiency"},
        {"chronic fatigue disorder", "chronic fatigue"}};
    return p;
}

inline const std::string& entity_type() {
    static const std::string t = "Disease";
    return t;
}

struct Options {
    std::size_t sentences = 50;
    std::size_t sentences_per_doc = 5;
    std::size_t min_context = 5;
    std::size_t max_context = 9;
    std::uint64_t seed = 1;
    std::string doc_prefix = "toy";
};

/// Builds the corpus; mentions cycle through the surface forms so each one
/// appears, and each sentence holds one or two mentions.
inline Corpus generate(const Options& opt = {}) {
    std::mt19937_64 rng(opt.seed);
    auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
    const auto& ctx = context_words();
    const auto& forms = entity_forms();

    Corpus c;
    const TypeId type = c.types.add(entity_type());
    std::size_t next_form = opt.seed % forms.size();
    for (std::size_t i = 0; i < opt.sentences; ++i) {
        Sentence s;
        s.doc_id = opt.doc_prefix + "-" + std::to_string(i / opt.sentences_per_doc);
        s.sent = i % opt.sentences_per_doc;
        const std::size_t n_ctx = opt.min_context + pick(opt.max_context - opt.min_context + 1);
        const std::size_t n_ent = 1 + pick(2);
        TokenSeq context;
        for (std::size_t k = 0; k < n_ctx; ++k) context.push_back(ctx[pick(ctx.size())]);

        // Distinct insertion points in the context with gaps between them.
        std::vector<std::size_t> slots;
        while (slots.size() < n_ent) {
            const std::size_t at = pick(n_ctx + 1);
            bool ok = true;
            for (auto o : slots) ok = ok && o != at;
            if (ok) slots.push_back(at);
        }
        std::sort(slots.begin(), slots.end());

        std::size_t cursor = 0;
        for (std::size_t k = 0; k <= n_ctx; ++k) {
            for (auto at : slots) {
                if (at != k) continue;
                const auto& form = forms[next_form];
                next_form = (next_form + 1) % forms.size();
                GoldEntity e;
                e.start = s.tokens.size();
                s.tokens.insert(s.tokens.end(), form.begin(), form.end());
                e.end = s.tokens.size() - 1;
                e.type = type;
                s.gold_entities.push_back(std::move(e));
            }
            if (k < n_ctx) s.tokens.push_back(context[cursor++]);
        }
        c.sentences.push_back(std::move(s));
    }
    return c;
}

inline SynonymDictionary dictionary() {
    SynonymDictionary d;
    for (const auto& [k, v] : synonym_pairs()) d.add(k, v);
    return d;
}

inline void write_dictionary(std::ostream& os) {
    os << "# surface\tsynonym\n";
    for (const auto& [k, v] : synonym_pairs()) os << k << '\t' << v << '\n';
}

}  // namespace ibner::synthetic
