#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "ibner/autodiff.hpp"
#include "ibner/decoder.hpp"
#include "ibner/encoder.hpp"
#include "ibner/layers.hpp"

namespace ibner {

enum class VibActivation { tanh, identity };

inline std::string_view to_string(VibActivation a) { return a == VibActivation::tanh ? "tanh" : "identity"; }

inline VibActivation parse_vib_activation(std::string_view s) {
    if (s == "tanh") return VibActivation::tanh;
    if (s == "identity") return VibActivation::identity;
    throw UsageError("unknown VIB activation '" + std::string(s) + "'");
}

/// Supervised information bottleneck: a two-layer compressor from span
/// embeddings to a Gaussian over z3, and one sigmoid logit per entity type on z3.
class VibClassifier {
public:
    VibClassifier(ParameterStore& store, std::size_t span_dim, std::size_t hidden, std::size_t latent,
                  std::size_t num_types, VibActivation act, Rng& rng)
        : hidden_(store, "vib.hidden", span_dim, hidden, ParamGroup::ner, rng),
          mu_(store, "vib.mu", hidden, latent, ParamGroup::ner, rng),
          logvar_(store, "vib.logvar", hidden, latent, ParamGroup::ner, rng),
          classifier_(store, "vib.classifier", latent, num_types, ParamGroup::ner, rng),
          activation_(act) {
        if (latent > span_dim) {
            throw UsageError("VIB latent size " + std::to_string(latent) + " exceeds span embedding size " +
                             std::to_string(span_dim));
        }
    }

    std::size_t latent() const { return mu_.out_dim(); }
    std::size_t num_types() const { return classifier_.out_dim(); }
    VibActivation activation() const { return activation_; }

    const Affine& hidden_layer() const { return hidden_; }
    const Affine& mu_head() const { return mu_; }
    const Affine& logvar_head() const { return logvar_; }
    const Affine& classifier() const { return classifier_; }

    GaussianPosterior compress(ad::Graph& g, ad::Var s) const {
        if (s.value().cols() != hidden_.in_dim()) {
            ad::detail::shape_fail("compress", hidden_.weight->value.shape(), s.shape());
        }
        ad::Var h = hidden_(g, s);
        if (activation_ == VibActivation::tanh) h = ad::tanh(h);
        return {mu_(g, h), logvar_(g, h)};
    }

    ad::Var logits(ad::Graph& g, ad::Var z) const { return classifier_(g, z); }

    std::vector<Parameter*> parameters() const {
        std::vector<Parameter*> out;
        for (const Affine* a : {&hidden_, &mu_, &logvar_, &classifier_})
            for (auto* p : a->parameters()) out.push_back(p);
        return out;
    }

private:
    Affine hidden_;
    Affine mu_;
    Affine logvar_;
    Affine classifier_;
    VibActivation activation_;
};

inline GaussianPosterior compress(ad::Graph& g, ad::Var s, const VibClassifier& vib) { return vib.compress(g, s); }

struct VibLoss {
    ad::Var compression;  // mean KL(p(z3|s) || N(0, I)) over the batch
    ad::Var prediction;   // mean summed BCE over the batch
    ad::Var total;        // beta * compression + prediction
    double beta = 0.0;
};

/// Compression plus prediction loss over a batch of span embeddings
/// `spans` [n, 3d] with multi-hot `labels` [n, T]. Each noise tensor is one
/// [n, k3] sample; prediction is averaged over samples.
inline VibLoss vib_loss(ad::Graph& g, ad::Var spans, const Tensor& labels, const VibClassifier& vib, double beta,
                        std::span<const Tensor> noise) {
    if (noise.empty()) throw UsageError("vib_loss: at least one noise sample required");
    const std::size_t n = spans.value().rows();
    if (labels.rank() != 2 || labels.rows() != n || labels.cols() != vib.num_types()) {
        ad::detail::shape_fail("vib_loss", spans.shape(), labels.shape());
    }
    GaussianPosterior q = vib.compress(g, spans);
    ad::Var pred;
    for (std::size_t s = 0; s < noise.size(); ++s) {
        ad::Var bce = ad::bce_with_logits(vib.logits(g, reparameterize(g, q, noise[s])), labels);
        pred = s == 0 ? bce : pred + bce;
    }
    const double inv = 1.0 / static_cast<double>(n * noise.size());
    VibLoss out;
    out.beta = beta;
    out.prediction = ad::scale(pred, inv);
    out.compression = ad::scale(gaussian_kl(q), 1.0 / static_cast<double>(n));
    out.total = ad::scale(out.compression, beta) + out.prediction;
    return out;
}

inline VibLoss vib_loss(ad::Graph& g, ad::Var spans, const Tensor& labels, const VibClassifier& vib, double beta,
                        const Tensor& noise) {
    return vib_loss(g, spans, labels, vib, beta, std::span<const Tensor>(&noise, 1));
}

struct Prediction {
    std::vector<double> probs;
    std::vector<TypeId> types;  // types with prob > threshold; empty means non-entity

    bool is_entity() const { return !types.empty(); }
};

inline Prediction threshold_probs(std::vector<double> probs, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("threshold must lie in (0, 1)");
    Prediction p;
    p.probs = std::move(probs);
    for (TypeId t = 0; t < p.probs.size(); ++t)
        if (p.probs[t] > threshold) p.types.push_back(t);
    return p;
}

/// Per-type sigmoid probabilities from the posterior mean (no sampling) for
/// a batch [n, 3d] of span embeddings; returns [n, T].
inline Tensor vib_probabilities(const Tensor& spans, const VibClassifier& vib) {
    ad::Graph g(false);
    ad::Var s = g.constant(spans);
    Tensor logits = vib.logits(g, vib.compress(g, s).mu).value();
    for (auto& v : logits.storage()) v = ad::sigmoid(v);
    return logits;
}

/// Deterministic inference for one span embedding [3d].
inline Prediction predict(const Tensor& span, const VibClassifier& vib, double threshold = 0.5) {
    Tensor probs = vib_probabilities(span, vib);
    return threshold_probs(probs.storage(), threshold);
}

}  // namespace ibner
