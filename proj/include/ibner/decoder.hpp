#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ibner/autodiff.hpp"
#include "ibner/encoder.hpp"
#include "ibner/layers.hpp"

namespace ibner {

/// KL(N(mu, exp(logvar)) || N(0, I)) = 1/2 sum(mu^2 + exp(logvar) - 1 - logvar),
/// summed over every entry (so a row batch yields the batch total).
inline ad::Var gaussian_kl(const GaussianPosterior& q) {
    ad::Var terms = q.mu * q.mu + ad::exp(q.logvar) - q.logvar;
    return ad::scale(ad::add_scalar(ad::sum(terms), -static_cast<double>(q.mu.value().size())), 0.5);
}

/// Value-only form of gaussian_kl.
inline double gaussian_kl(std::span<const double> mu, std::span<const double> logvar) {
    if (mu.size() != logvar.size()) throw ShapeError("gaussian_kl: mu and logvar sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) s += mu[i] * mu[i] + std::exp(logvar[i]) - 1.0 - logvar[i];
    return 0.5 * s;
}

struct DecodedSequence {
    std::vector<TokenId> tokens;
    std::vector<double> log_probs;  // one per emitted token
    bool terminated = false;        // END produced before max length
};

/// LSTM language model conditioned on a latent z: the hidden state starts
/// at W_init z + b_init and every step consumes [z ; embedding(previous word)].
class SeqDecoder {
public:
    SeqDecoder(ParameterStore& store, const std::string& name, std::size_t vocab, std::size_t latent,
               std::size_t word_dim, std::size_t hidden, Rng& rng)
        : embed_(store, name + ".embed", vocab, word_dim, ParamGroup::vae, rng),
          cell_(store, name + ".lstm", latent + word_dim, hidden, ParamGroup::vae, rng),
          init_(store, name + ".init", latent, hidden, ParamGroup::vae, rng),
          out_(store, name + ".out", hidden, vocab, ParamGroup::vae, rng),
          latent_(latent) {}

    std::size_t latent() const { return latent_; }
    std::size_t vocab_size() const { return out_.out_dim(); }
    std::size_t input_dim() const { return cell_.input; }

    /// Sum over steps of the cross-entropy of predicting target[t] from
    /// target[t-1] (START before the first token) plus END after the last.
    ad::Var teacher_forced_nll(ad::Graph& g, ad::Var z, const std::vector<TokenId>& target) const {
        if (target.empty()) throw Error("decode_teacher_forced: empty target");
        check_latent(z.value());
        std::vector<TokenId> inputs{Vocabulary::kStart};
        inputs.insert(inputs.end(), target.begin(), target.end());
        std::vector<TokenId> gold(target.begin(), target.end());
        gold.push_back(Vocabulary::kEnd);

        ad::Var emb = embed_.lookup(g, inputs);
        LstmCell::State s{init_(g, z), g.constant(Tensor(Shape{cell_.hidden}))};
        std::vector<ad::Var> hs;
        hs.reserve(inputs.size());
        for (std::size_t t = 0; t < inputs.size(); ++t) {
            s = cell_.step(g, ad::concat({z, ad::row(emb, t)}), s);
            hs.push_back(s.h);
        }
        return ad::softmax_cross_entropy(out_(g, ad::vstack(hs)), gold);
    }

    /// Greedy argmax decoding; PAD and START are never emitted.
    DecodedSequence greedy(const Tensor& z, std::size_t max_len) const {
        if (max_len < 1) throw UsageError("decode_greedy: max_len must be >= 1");
        check_latent(z);
        ad::Graph g(false);
        ad::Var zv = g.constant(z);
        LstmCell::State s{init_(g, zv), g.constant(Tensor(Shape{cell_.hidden}))};
        TokenId prev = Vocabulary::kStart;
        DecodedSequence out;
        for (std::size_t t = 0; t < max_len; ++t) {
            const TokenId ids[1] = {prev};
            s = cell_.step(g, ad::concat({zv, ad::row(embed_.lookup(g, ids), 0)}), s);
            const Tensor logp = ad::log_softmax(out_(g, s.h).value());
            TokenId best = Vocabulary::kUnk;
            double best_lp = -std::numeric_limits<double>::infinity();
            for (TokenId v = 0; v < logp.size(); ++v) {
                if (v == Vocabulary::kPad || v == Vocabulary::kStart) continue;
                if (logp[v] > best_lp) {
                    best_lp = logp[v];
                    best = v;
                }
            }
            if (best == Vocabulary::kEnd) {
                out.terminated = true;
                break;
            }
            out.tokens.push_back(best);
            out.log_probs.push_back(best_lp);
            prev = best;
        }
        return out;
    }

    std::vector<Parameter*> parameters() const {
        std::vector<Parameter*> out = embed_.parameters();
        for (auto* p : cell_.parameters()) out.push_back(p);
        for (auto* p : init_.parameters()) out.push_back(p);
        for (auto* p : out_.parameters()) out.push_back(p);
        return out;
    }

private:
    void check_latent(const Tensor& z) const {
        if (z.rank() != 1 || z.size() != latent_) {
            throw ShapeError("decoder: latent of shape " + shape_str(z.shape()) + ", expected [" +
                             std::to_string(latent_) + "]");
        }
    }

    Embedding embed_;
    LstmCell cell_;
    Affine init_;
    Affine out_;
    std::size_t latent_;
};

inline ad::Var decode_teacher_forced(ad::Graph& g, ad::Var z, const std::vector<TokenId>& target,
                                     const SeqDecoder& dec) {
    return dec.teacher_forced_nll(g, z, target);
}

inline DecodedSequence decode_greedy(const Tensor& z, const SeqDecoder& dec, std::size_t max_len) {
    return dec.greedy(z, max_len);
}

/// Negative single-sample ELBO: total = nll + kl.
struct LossTerm {
    ad::Var nll;
    ad::Var kl;
    ad::Var total;
};

namespace detail {

// noise is [k] for one sample or [S, k] for S samples; the nll is averaged over samples.
template <class NllFn>
ad::Var sampled_nll(ad::Graph& g, const GaussianPosterior& q, const Tensor& noise, NllFn&& nll_of) {
    if (noise.rank() == 1) return nll_of(reparameterize(g, q, noise));
    const std::size_t samples = noise.rows(), k = noise.cols();
    ad::Var acc;
    for (std::size_t r = 0; r < samples; ++r) {
        Tensor one(Shape{k}, std::vector<double>(noise.storage().begin() + static_cast<std::ptrdiff_t>(r * k),
                                                 noise.storage().begin() + static_cast<std::ptrdiff_t>((r + 1) * k)));
        ad::Var v = nll_of(reparameterize(g, q, one));
        acc = r == 0 ? v : acc + v;
    }
    return samples == 1 ? acc : ad::scale(acc, 1.0 / static_cast<double>(samples));
}

}  // namespace detail

/// Span-reconstruction loss for one gold span.
inline LossTerm elbo_loss_sr(ad::Graph& g, const std::vector<TokenId>& span, const GaussianPosterior& q1,
                             const Tensor& noise, const SeqDecoder& dec) {
    ad::Var nll = detail::sampled_nll(g, q1, noise, [&](ad::Var z) { return dec.teacher_forced_nll(g, z, span); });
    ad::Var kl = gaussian_kl(q1);
    return {nll, kl, nll + kl};
}

/// Synonym-generation loss for one gold span: all synonyms decoded from the
/// same z, nll averaged over synonyms. No synonyms gives exact zeros with no
/// gradient path.
inline LossTerm elbo_loss_sg(ad::Graph& g, const std::vector<std::vector<TokenId>>& synonyms,
                             const GaussianPosterior& q2, const Tensor& noise, const SeqDecoder& dec) {
    if (synonyms.empty()) {
        ad::Var zero = g.constant(Tensor::scalar(0.0));
        return {zero, zero, zero};
    }
    ad::Var nll = detail::sampled_nll(g, q2, noise, [&](ad::Var z) {
        ad::Var acc = dec.teacher_forced_nll(g, z, synonyms[0]);
        for (std::size_t i = 1; i < synonyms.size(); ++i) acc = acc + dec.teacher_forced_nll(g, z, synonyms[i]);
        return synonyms.size() == 1 ? acc : ad::scale(acc, 1.0 / static_cast<double>(synonyms.size()));
    });
    ad::Var kl = gaussian_kl(q2);
    return {nll, kl, nll + kl};
}

}  // namespace ibner
