#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ibner/model.hpp"

namespace ibner {

// Optimizer ------------------------------------------------------------------------------

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment accumulators of one parameter and its step count.
struct AdamMoments {
    Tensor m;
    Tensor v;
    std::uint64_t t = 0;
};

/// One bias-corrected adaptive-moment update of `value` in place.
inline void adaptive_step(Tensor& value, const Tensor& grad, AdamMoments& s, double lr, const AdamOptions& o = {}) {
    if (grad.shape() != value.shape()) ad::detail::shape_fail("adaptive_step", value.shape(), grad.shape());
    if (s.m.empty()) {
        s.m = Tensor::zeros(value.shape());
        s.v = Tensor::zeros(value.shape());
    }
    if (s.m.shape() != value.shape()) ad::detail::shape_fail("adaptive_step", value.shape(), s.m.shape());
    ++s.t;
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.t));
    auto& w = value.storage();
    auto& m = s.m.storage();
    auto& v = s.v.storage();
    const auto& g = grad.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.eps);
    }
}

inline void adaptive_step(Parameter& p, AdamMoments& s, double lr, const AdamOptions& o = {}) {
    adaptive_step(p.value, p.grad, s, lr, o);
}

// Training state -------------------------------------------------------------------------

/// Losses of one optimizer step. Joint steps satisfy
/// total == vib + gamma * (sr + sg); pretraining steps have vib == 0 and
/// total == sr + sg.
struct LossRecord {
    std::size_t step = 0;
    double total = 0.0;
    double vib = 0.0;
    double sr = 0.0;
    double sg = 0.0;
};

struct TrainState {
    std::size_t step = 0;           // joint steps
    std::size_t pretrain_step = 0;  // VAE pretraining steps
    std::size_t epoch = 0;
    std::size_t pretrain_epoch = 0;
    std::map<std::string, AdamMoments> moments;  // keyed by parameter name
    Rng rng;
    std::vector<LossRecord> history;
    std::vector<LossRecord> pretrain_history;

    explicit TrainState(std::uint64_t seed = 0) : rng(seed ^ 0x9e3779b97f4a7c15ULL) {}

    std::string rng_state() const {
        std::ostringstream os;
        os << rng;
        return os.str();
    }
    void set_rng_state(const std::string& s) {
        std::istringstream is(s);
        is >> rng;
        if (!is) throw DataError("train state: malformed RNG state");
    }
};

// Losses ---------------------------------------------------------------------------------

/// Per-batch decomposed objective. In baseline mode `vib` holds the plain
/// classifier loss and sr/sg are zero.
struct LossBundle {
    ad::Var total;
    ad::Var vib;
    ad::Var sr;
    ad::Var sg;
    std::size_t spans = 0;
    std::size_t entities = 0;

    LossRecord record(std::size_t step) const {
        return {step, total.item(), vib.item(), sr.item(), sg.item()};
    }
};

struct BatchOptions {
    /// Drawn for negative-span subsampling when neg_keep_ratio < 1.
    Rng* subsample_rng = nullptr;
};

namespace detail {

struct GoldBatch {
    ad::Var embeddings;  // [m, 3d]
    std::vector<const GoldEntity*> entities;
    std::vector<const Sentence*> sentences;
};

// Gold spans in batch order, embedded with the contextual vectors already computed.
inline GoldBatch gold_batch(const std::vector<ad::Var>& contextual, std::span<const Sentence* const> batch) {
    GoldBatch gb;
    std::vector<ad::Var> parts;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& ents = batch[b]->gold_entities;
        if (ents.empty()) continue;
        std::vector<ad::RowRange> ranges;
        for (const auto& e : ents) {
            ranges.push_back({e.start, e.end});
            gb.entities.push_back(&e);
            gb.sentences.push_back(batch[b]);
        }
        parts.push_back(span_embed_batch(contextual[b], ranges));
    }
    if (!parts.empty()) gb.embeddings = parts.size() == 1 ? parts[0] : ad::vstack(parts);
    return gb;
}

inline GaussianPosterior row_of(const GaussianPosterior& q, std::size_t r) {
    return {ad::row(q.mu, r), ad::row(q.logvar, r)};
}

inline Tensor draw_latent_noise(NoiseSource& noise, std::size_t samples, std::size_t k) {
    return samples == 1 ? noise.draw(Shape{k}) : noise.draw(Shape{samples, k});
}

struct VaeTerms {
    ad::Var sr;
    ad::Var sg;
};

// Mean SR and SG negative ELBOs over the gold entities of a batch. Entities
// without synonyms add zero to the SG sum but still count in its mean.
inline VaeTerms vae_terms(ad::Graph& g, const Model& m, const GoldBatch& gb, NoiseSource& noise) {
    ad::Var zero = g.constant(Tensor::scalar(0.0));
    VaeTerms out{zero, zero};
    const std::size_t n = gb.entities.size();
    if (n == 0 || !m.has_sr()) return out;
    const auto& cfg = m.config();
    const std::size_t k = m.heads().latent();

    GaussianPosterior q1 = posterior_params(g, gb.embeddings, m.heads(), VaeComponent::sr);
    std::vector<Tensor> sr_noise, sg_noise;
    for (std::size_t e = 0; e < n; ++e) sr_noise.push_back(draw_latent_noise(noise, cfg.elbo_samples, k));
    if (m.has_sg())
        for (std::size_t e = 0; e < n; ++e) sg_noise.push_back(draw_latent_noise(noise, cfg.elbo_samples, k));

    ad::Var sr_sum;
    for (std::size_t e = 0; e < n; ++e) {
        const auto* ent = gb.entities[e];
        auto target = m.encode(surface(*gb.sentences[e], ent->start, ent->end));
        ad::Var t = elbo_loss_sr(g, target, row_of(q1, e), sr_noise[e], m.sr_decoder()).total;
        sr_sum = e == 0 ? t : sr_sum + t;
    }
    out.sr = ad::scale(sr_sum, 1.0 / static_cast<double>(n));

    if (m.has_sg()) {
        GaussianPosterior q2 = posterior_params(g, gb.embeddings, m.heads(), VaeComponent::sg);
        ad::Var sg_sum;
        for (std::size_t e = 0; e < n; ++e) {
            const auto* ent = gb.entities[e];
            if (ent->synonyms.empty()) continue;
            std::vector<std::vector<TokenId>> targets;
            for (const auto& syn : ent->synonyms) targets.push_back(m.encode(syn));
            ad::Var t = elbo_loss_sg(g, targets, row_of(q2, e), sg_noise[e], m.sg_decoder()).total;
            sg_sum = sg_sum.graph == nullptr ? t : sg_sum + t;
        }
        if (sg_sum.graph != nullptr) out.sg = ad::scale(sg_sum, 1.0 / static_cast<double>(n));
    }
    return out;
}

}  // namespace detail

/// Joint objective for one batch of sentences: the classification loss over
/// every candidate span plus gamma times the VAE losses over gold spans.
/// Noise is drawn VIB first, then SR per entity, then SG per entity.
inline LossBundle joint_loss(ad::Graph& g, const Model& m, std::span<const Sentence* const> batch, NoiseSource& noise,
                             const BatchOptions& opt = {}) {
    const auto& cfg = m.config();
    const std::size_t T = m.types().size();

    std::vector<ad::Var> contextual;
    std::vector<ad::Var> span_parts;
    std::vector<double> labels;
    LossBundle out;
    for (const Sentence* s : batch) {
        contextual.push_back(m.contextualize(g, *s));
        std::vector<ad::RowRange> ranges;
        for (const auto& c : enumerate_spans(*s, cfg.max_span_length, T)) {
            if (cfg.neg_keep_ratio < 1.0 && !c.is_entity()) {
                if (opt.subsample_rng == nullptr) throw UsageError("joint_loss: subsampling requires an RNG");
                if (std::uniform_real_distribution<double>(0.0, 1.0)(*opt.subsample_rng) >= cfg.neg_keep_ratio)
                    continue;
            }
            ranges.push_back({c.start, c.end});
            labels.insert(labels.end(), c.label.begin(), c.label.end());
        }
        if (!ranges.empty()) span_parts.push_back(span_embed_batch(contextual.back(), ranges));
    }
    if (span_parts.empty()) throw DataError("joint_loss: batch has no candidate spans");
    ad::Var spans = span_parts.size() == 1 ? span_parts[0] : ad::vstack(span_parts);
    const std::size_t n = spans.value().rows();
    out.spans = n;
    Tensor label_t(Shape{n, T}, std::move(labels));

    if (cfg.mode == Mode::baseline) {
        ad::Var bce = ad::bce_with_logits(m.baseline_classifier()(g, spans), label_t);
        out.vib = ad::scale(bce, 1.0 / static_cast<double>(n));
        out.sr = out.sg = g.constant(Tensor::scalar(0.0));
        out.total = out.vib;
        return out;
    }

    std::vector<Tensor> vib_noise;
    for (std::size_t s = 0; s < cfg.vib_samples; ++s) vib_noise.push_back(noise.draw(Shape{n, m.vib().latent()}));
    out.vib = vib_loss(g, spans, label_t, m.vib(), cfg.beta, vib_noise).total;

    auto gold = detail::gold_batch(contextual, batch);
    out.entities = gold.entities.size();
    auto vae = detail::vae_terms(g, m, gold, noise);
    out.sr = vae.sr;
    out.sg = vae.sg;
    out.total = out.vib + ad::scale(out.sr + out.sg, cfg.gamma);
    return out;
}

/// VAE-only objective (sr + sg, unscaled) over the gold spans of a batch.
inline LossBundle pretrain_loss(ad::Graph& g, const Model& m, std::span<const Sentence* const> batch,
                                NoiseSource& noise) {
    std::vector<ad::Var> contextual;
    for (const Sentence* s : batch) contextual.push_back(m.contextualize(g, *s));
    auto gold = detail::gold_batch(contextual, batch);
    auto vae = detail::vae_terms(g, m, gold, noise);
    LossBundle out;
    out.entities = gold.entities.size();
    out.vib = g.constant(Tensor::scalar(0.0));
    out.sr = vae.sr;
    out.sg = vae.sg;
    out.total = vae.sr + vae.sg;
    return out;
}

// Loops ----------------------------------------------------------------------------------

struct TrainHooks {
    std::function<void(const LossRecord&)> on_step;
    std::function<void(std::size_t epoch)> on_epoch_end;
    std::function<void(const LossRecord&)> on_pretrain_step;
};

namespace detail {

inline std::vector<std::vector<const Sentence*>> make_batches(std::vector<const Sentence*> order, std::size_t size,
                                                              Rng& rng) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<const Sentence*>> out;
    for (std::size_t i = 0; i < order.size(); i += size)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + size)));
    return out;
}

inline void check_finite(const LossRecord& r, const char* phase) {
    if (std::isfinite(r.total) && std::isfinite(r.vib) && std::isfinite(r.sr) && std::isfinite(r.sg)) return;
    std::ostringstream os;
    os << phase << ": non-finite loss at step " << r.step << " (L=" << r.total << ", L_VIB=" << r.vib
       << ", L_SR=" << r.sr << ", L_SG=" << r.sg << ")";
    throw NumericError(os.str());
}

// Adam update of every parameter the graph touched and `eligible` accepts.
template <class Pred>
void apply_updates(Model& m, const ad::Graph& g, TrainState& st, Pred eligible) {
    const auto& cfg = m.config();
    for (Parameter* p : m.params().all()) {
        if (!g.binds(*p) || !eligible(*p)) continue;
        const double lr = m.params().group(*p) == ParamGroup::ner ? cfg.lr_ner : cfg.lr_vae;
        adaptive_step(*p, st.moments[p->name], lr);
    }
}

}  // namespace detail

/// VAE pretraining on gold spans: updates the contextualizer, posterior heads
/// and decoders; classifier parameters are not touched. Returns false when
/// the mode has no VAE component.
inline bool pretrain_vaes(Model& m, const Corpus& corpus, TrainState& st, const TrainHooks& hooks = {}) {
    if (!m.has_sr()) return false;
    const auto& cfg = m.config();
    std::vector<const Sentence*> with_gold;
    for (const auto& s : corpus.sentences)
        if (!s.gold_entities.empty()) with_gold.push_back(&s);
    if (with_gold.empty()) throw DataError("pretrain_vaes: corpus has no gold entities");

    std::vector<Parameter*> enc = m.encoder().parameters();
    auto eligible = [&](const Parameter& p) {
        return m.params().group(p) == ParamGroup::vae || std::find(enc.begin(), enc.end(), &p) != enc.end();
    };
    NoiseSource noise = NoiseSource::gaussian(st.rng);
    while (st.pretrain_epoch < cfg.pretrain_epochs) {
        for (const auto& batch : detail::make_batches(with_gold, cfg.batch_size, st.rng)) {
            ad::Graph g;
            LossBundle lb = pretrain_loss(g, m, batch, noise);
            LossRecord rec = lb.record(++st.pretrain_step);
            detail::check_finite(rec, "pretrain");
            g.backward(lb.total);
            detail::apply_updates(m, g, st, eligible);
            st.pretrain_history.push_back(rec);
            if (hooks.on_pretrain_step) hooks.on_pretrain_step(rec);
        }
        ++st.pretrain_epoch;
    }
    return true;
}

/// Joint training for the configured number of epochs, resuming from
/// st.epoch.
inline void train_joint(Model& m, const Corpus& corpus, TrainState& st, const TrainHooks& hooks = {}) {
    const auto& cfg = m.config();
    std::vector<const Sentence*> order;
    for (const auto& s : corpus.sentences) order.push_back(&s);
    if (order.empty()) throw DataError("train_joint: empty training corpus");

    NoiseSource noise = NoiseSource::gaussian(st.rng);
    BatchOptions bo{&st.rng};
    while (st.epoch < cfg.epochs) {
        for (const auto& batch : detail::make_batches(order, cfg.batch_size, st.rng)) {
            ad::Graph g;
            LossBundle lb = joint_loss(g, m, batch, noise, bo);
            LossRecord rec = lb.record(++st.step);
            detail::check_finite(rec, "train");
            g.backward(lb.total);
            detail::apply_updates(m, g, st, [](const Parameter&) { return true; });
            st.history.push_back(rec);
            if (hooks.on_step) hooks.on_step(rec);
        }
        ++st.epoch;
        if (hooks.on_epoch_end) hooks.on_epoch_end(st.epoch);
    }
}

// Loss log -------------------------------------------------------------------------------

inline void write_loss_header(std::ostream& os, Mode mode) {
    os << (mode == Mode::baseline ? "step\tL\n" : "step\tL\tL_VIB\tL_SR\tL_SG\n");
}

inline void write_loss_row(std::ostream& os, Mode mode, const LossRecord& r) {
    char buf[160];
    if (mode == Mode::baseline) {
        std::snprintf(buf, sizeof buf, "%zu\t%.17g\n", r.step, r.total);
    } else {
        std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.17g\t%.17g\n", r.step, r.total, r.vib, r.sr, r.sg);
    }
    os << buf;
}

}  // namespace ibner
