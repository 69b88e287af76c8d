#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ibner/autodiff.hpp"
#include "ibner/layers.hpp"

namespace ibner {

/// Maps a token-id sequence to one d-dimensional vector per token, every
/// vector depending on the whole sentence.
class Contextualizer {
public:
    virtual ~Contextualizer() = default;

    /// Returns an [n, d] matrix of contextual embeddings.
    virtual ad::Var contextualize(ad::Graph& g, std::span<const TokenId> ids) const = 0;
    virtual std::size_t dim() const = 0;
    virtual std::vector<Parameter*> parameters() const = 0;
};

/// Embedding lookup and one bidirectional LSTM layer; both directions and
/// the word embedding itself are projected to d.
class BiLstmContextualizer final : public Contextualizer {
public:
    BiLstmContextualizer(ParameterStore& store, std::size_t vocab, std::size_t word_dim, std::size_t hidden,
                         std::size_t out_dim, Rng& rng)
        : embed_(store, "encoder.embed", vocab, word_dim, ParamGroup::ner, rng),
          forward_(store, "encoder.lstm_fwd", word_dim, hidden, ParamGroup::ner, rng),
          backward_(store, "encoder.lstm_bwd", word_dim, hidden, ParamGroup::ner, rng),
          proj_(store, "encoder.proj", 2 * hidden + word_dim, out_dim, ParamGroup::ner, rng) {}

    ad::Var contextualize(ad::Graph& g, std::span<const TokenId> ids) const override {
        if (ids.empty()) throw ShapeError("contextualize: empty sentence");
        const std::size_t n = ids.size();
        ad::Var x = embed_.lookup(g, ids);

        std::vector<ad::Var> fwd(n), bwd(n);
        auto s = forward_.zero_state(g);
        for (std::size_t t = 0; t < n; ++t) {
            s = forward_.step(g, ad::row(x, t), s);
            fwd[t] = s.h;
        }
        s = backward_.zero_state(g);
        for (std::size_t t = n; t-- > 0;) {
            s = backward_.step(g, ad::row(x, t), s);
            bwd[t] = s.h;
        }
        std::vector<ad::Var> rows;
        rows.reserve(n);
        for (std::size_t t = 0; t < n; ++t) rows.push_back(ad::concat({fwd[t], bwd[t], ad::row(x, t)}));
        return proj_(g, ad::vstack(rows));
    }

    std::size_t dim() const override { return proj_.out_dim(); }

    std::vector<Parameter*> parameters() const override {
        std::vector<Parameter*> out = embed_.parameters();
        for (auto* p : forward_.parameters()) out.push_back(p);
        for (auto* p : backward_.parameters()) out.push_back(p);
        for (auto* p : proj_.parameters()) out.push_back(p);
        return out;
    }

private:
    Embedding embed_;
    LstmCell forward_;
    LstmCell backward_;
    Affine proj_;
};

/// [v_i ; mean(v_i..v_j) ; v_j] for the inclusive span (i, j).
struct SpanEmbedding {
    ad::Var value;
    std::size_t start = 0;
    std::size_t end = 0;
};

inline SpanEmbedding span_embed(ad::Var contextual, std::size_t i, std::size_t j) {
    const std::size_t n = contextual.value().rows();
    if (i > j || j >= n) {
        throw Error("span_embed: span (" + std::to_string(i) + "," + std::to_string(j) + ") out of range for " +
                    std::to_string(n) + " tokens");
    }
    return {ad::concat({ad::row(contextual, i), ad::mean_rows(contextual, i, j), ad::row(contextual, j)}), i, j};
}

/// Row-stacked span embeddings [spans, 3d] for a list of inclusive ranges.
inline ad::Var span_embed_batch(ad::Var contextual, std::span<const ad::RowRange> spans) {
    std::vector<std::size_t> starts, ends;
    starts.reserve(spans.size());
    ends.reserve(spans.size());
    for (const auto& r : spans) {
        starts.push_back(r.first);
        ends.push_back(r.last);
    }
    return ad::concat({ad::gather_rows(contextual, starts), ad::range_mean(contextual, spans),
                       ad::gather_rows(contextual, ends)});
}

/// Diagonal Gaussian parameterized by mean and log-variance.
struct GaussianPosterior {
    ad::Var mu;
    ad::Var logvar;

    std::size_t dim() const { return mu.value().cols(); }
};

enum class SharingMode { shared_mu, shared_mu_sigma, independent };
enum class VaeComponent { sr, sg };

inline std::string_view to_string(SharingMode m) {
    switch (m) {
        case SharingMode::shared_mu: return "shared_mu";
        case SharingMode::shared_mu_sigma: return "shared_mu_sigma";
        case SharingMode::independent: return "independent";
    }
    return "?";
}

inline SharingMode parse_sharing_mode(std::string_view s) {
    if (s == "shared_mu") return SharingMode::shared_mu;
    if (s == "shared_mu_sigma") return SharingMode::shared_mu_sigma;
    if (s == "independent") return SharingMode::independent;
    throw UsageError("unknown sharing mode '" + std::string(s) + "'");
}

/// Affine heads producing the span-reconstruction (SR) and synonym-generation
/// (SG) posteriors. The sigma heads output log-variance.
///
///   shared_mu        one mu head, separate sigma heads
///   shared_mu_sigma  one mu head and one sigma head
///   independent      a full (mu, sigma) pair per component
class PosteriorHeadSet {
public:
    PosteriorHeadSet(ParameterStore& store, std::size_t in, std::size_t latent, SharingMode mode, bool with_sg,
                     Rng& rng)
        : mode_(mode), with_sg_(with_sg) {
        mu_sr_ = Affine(store, "heads.mu_sr", in, latent, ParamGroup::vae, rng);
        sigma_sr_ = Affine(store, "heads.logvar_sr", in, latent, ParamGroup::vae, rng);
        if (with_sg) {
            if (mode == SharingMode::independent) mu_sg_ = Affine(store, "heads.mu_sg", in, latent, ParamGroup::vae, rng);
            if (mode != SharingMode::shared_mu_sigma) {
                sigma_sg_ = Affine(store, "heads.logvar_sg", in, latent, ParamGroup::vae, rng);
            }
        }
    }

    SharingMode mode() const { return mode_; }
    bool has_sg() const { return with_sg_; }
    std::size_t latent() const { return mu_sr_.out_dim(); }

    const Affine& mu_head(VaeComponent c) const {
        require(c);
        return c == VaeComponent::sg && mu_sg_ ? *mu_sg_ : mu_sr_;
    }

    const Affine& sigma_head(VaeComponent c) const {
        require(c);
        return c == VaeComponent::sg && sigma_sg_ ? *sigma_sg_ : sigma_sr_;
    }

    std::vector<Parameter*> parameters() const {
        std::vector<Parameter*> out = mu_sr_.parameters();
        for (auto* p : sigma_sr_.parameters()) out.push_back(p);
        if (mu_sg_)
            for (auto* p : mu_sg_->parameters()) out.push_back(p);
        if (sigma_sg_)
            for (auto* p : sigma_sg_->parameters()) out.push_back(p);
        return out;
    }

private:
    void require(VaeComponent c) const {
        if (c == VaeComponent::sg && !with_sg_) throw Error("posterior heads: model has no synonym-generation component");
    }

    SharingMode mode_;
    bool with_sg_;
    Affine mu_sr_;
    Affine sigma_sr_;
    std::optional<Affine> mu_sg_;
    std::optional<Affine> sigma_sg_;
};

/// mu = W_mu s + b_mu, logvar = W_sigma s + b_sigma. Works on a single span
/// embedding [3d] or a row batch [n, 3d].
inline GaussianPosterior posterior_params(ad::Graph& g, ad::Var s, const PosteriorHeadSet& heads, VaeComponent c) {
    return {heads.mu_head(c)(g, s), heads.sigma_head(c)(g, s)};
}

/// z = mu + exp(logvar / 2) * noise; noise is a constant leaf.
inline ad::Var reparameterize(ad::Graph& g, const GaussianPosterior& q, const Tensor& noise) {
    if (noise.shape() != q.mu.shape()) ad::detail::shape_fail("reparameterize", q.mu.shape(), noise.shape());
    return q.mu + ad::exp(ad::scale(q.logvar, 0.5)) * g.constant(noise);
}

}  // namespace ibner
