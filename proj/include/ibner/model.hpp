#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ibner/corpus.hpp"
#include "ibner/decoder.hpp"
#include "ibner/encoder.hpp"
#include "ibner/layers.hpp"
#include "ibner/vib.hpp"

namespace ibner {

/// Which components are trained.
///   baseline         affine classifier on span embeddings
///   supvib           supervised information bottleneck classifier
///   supvib_spanreco  + span-reconstruction VAE
///   all              + synonym-generation VAE
enum class Mode { baseline, supvib, supvib_spanreco, all };

inline std::string_view to_string(Mode m) {
    switch (m) {
        case Mode::baseline: return "baseline";
        case Mode::supvib: return "supvib";
        case Mode::supvib_spanreco: return "supvib_spanreco";
        case Mode::all: return "all";
    }
    return "?";
}

inline Mode parse_mode(std::string_view s) {
    if (s == "baseline") return Mode::baseline;
    if (s == "supvib") return Mode::supvib;
    if (s == "supvib_spanreco") return Mode::supvib_spanreco;
    if (s == "all") return Mode::all;
    throw UsageError("unknown mode '" + std::string(s) + "'");
}

inline bool uses_vib(Mode m) { return m != Mode::baseline; }
inline bool uses_sr(Mode m) { return m == Mode::supvib_spanreco || m == Mode::all; }
inline bool uses_sg(Mode m) { return m == Mode::all; }

struct ModelConfig {
    Mode mode = Mode::all;
    SharingMode sharing = SharingMode::shared_mu;
    double beta = 1e-5;
    double gamma = 1e-5;

    std::size_t word_dim = 64;        // encoder input embeddings
    std::size_t encoder_hidden = 64;  // per LSTM direction
    std::size_t encoder_dim = 32;     // d; span embeddings are 3d
    std::size_t latent_size = 64;     // k, VAE latents
    std::size_t vib_hidden = 64;
    std::size_t vib_latent_size = 32;  // k3
    VibActivation vib_activation = VibActivation::tanh;
    std::size_t decoder_word_dim = 64;
    std::size_t decoder_hidden = 128;

    std::size_t batch_size = 16;
    std::size_t max_span_length = 14;
    std::size_t max_sentence_length = 512;
    std::size_t epochs = 20;
    std::size_t pretrain_epochs = 10;
    double lr_ner = 1e-2;
    double lr_vae = 1e-2;
    std::uint64_t seed = 42;

    std::size_t min_freq = 1;
    std::size_t max_decode_length = 16;
    double threshold = 0.5;
    /// Fraction of non-entity spans kept per batch; 1 keeps all.
    double neg_keep_ratio = 1.0;
    std::size_t elbo_samples = 1;
    std::size_t vib_samples = 1;

    void validate() const {
        auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (!in01(beta)) throw UsageError("beta must lie in [0, 1]");
        if (!in01(gamma)) throw UsageError("gamma must lie in [0, 1]");
        if (!(neg_keep_ratio > 0.0 && neg_keep_ratio <= 1.0)) throw UsageError("neg_keep_ratio must lie in (0, 1]");
        if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("threshold must lie in (0, 1)");
        for (auto [v, name] : {std::pair{word_dim, "word_dim"}, {encoder_hidden, "encoder_hidden"},
                               {encoder_dim, "encoder_dim"}, {latent_size, "latent_size"}, {vib_hidden, "vib_hidden"},
                               {vib_latent_size, "vib_latent_size"}, {decoder_word_dim, "decoder_word_dim"},
                               {decoder_hidden, "decoder_hidden"}, {batch_size, "batch_size"},
                               {max_span_length, "max_span_length"}, {max_sentence_length, "max_sentence_length"},
                               {min_freq, "min_freq"}, {max_decode_length, "max_decode_length"},
                               {elbo_samples, "elbo_samples"}, {vib_samples, "vib_samples"}}) {
            if (v < 1) throw UsageError(std::string(name) + " must be >= 1");
        }
        if (vib_latent_size > 3 * encoder_dim) throw UsageError("vib_latent_size must not exceed 3 * encoder_dim");
        if (lr_ner < 0.0 || lr_vae < 0.0) throw UsageError("learning rates must be non-negative");
    }
};

// Serialized keys; from_json rejects anything else.
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"mode", to_string(c.mode)},
                       {"sharing_mode", to_string(c.sharing)},
                       {"beta", c.beta},
                       {"gamma", c.gamma},
                       {"word_dim", c.word_dim},
                       {"encoder_hidden", c.encoder_hidden},
                       {"encoder_dim", c.encoder_dim},
                       {"latent_size", c.latent_size},
                       {"vib_hidden", c.vib_hidden},
                       {"vib_latent_size", c.vib_latent_size},
                       {"vib_activation", to_string(c.vib_activation)},
                       {"decoder_word_dim", c.decoder_word_dim},
                       {"decoder_hidden", c.decoder_hidden},
                       {"batch_size", c.batch_size},
                       {"max_span_length", c.max_span_length},
                       {"max_sentence_length", c.max_sentence_length},
                       {"epochs", c.epochs},
                       {"pretrain_epochs", c.pretrain_epochs},
                       {"lr_ner", c.lr_ner},
                       {"lr_vae", c.lr_vae},
                       {"seed", c.seed},
                       {"min_freq", c.min_freq},
                       {"max_decode_length", c.max_decode_length},
                       {"threshold", c.threshold},
                       {"neg_keep_ratio", c.neg_keep_ratio},
                       {"elbo_samples", c.elbo_samples},
                       {"vib_samples", c.vib_samples}};
}

/// Applies the keys present in `j` on top of `c`. Returns the keys it did not recognise.
inline std::vector<std::string> apply_config_json(ModelConfig& c, const nlohmann::json& j) {
    std::vector<std::string> unknown;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "mode") c.mode = parse_mode(v.get<std::string>());
            else if (key == "sharing_mode") c.sharing = parse_sharing_mode(v.get<std::string>());
            else if (key == "beta") c.beta = v.get<double>();
            else if (key == "gamma") c.gamma = v.get<double>();
            else if (key == "word_dim") c.word_dim = v.get<std::size_t>();
            else if (key == "encoder_hidden") c.encoder_hidden = v.get<std::size_t>();
            else if (key == "encoder_dim") c.encoder_dim = v.get<std::size_t>();
            else if (key == "latent_size") c.latent_size = v.get<std::size_t>();
            else if (key == "vib_hidden") c.vib_hidden = v.get<std::size_t>();
            else if (key == "vib_latent_size") c.vib_latent_size = v.get<std::size_t>();
            else if (key == "vib_activation") c.vib_activation = parse_vib_activation(v.get<std::string>());
            else if (key == "decoder_word_dim") c.decoder_word_dim = v.get<std::size_t>();
            else if (key == "decoder_hidden") c.decoder_hidden = v.get<std::size_t>();
            else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "max_span_length") c.max_span_length = v.get<std::size_t>();
            else if (key == "max_sentence_length") c.max_sentence_length = v.get<std::size_t>();
            else if (key == "epochs") c.epochs = v.get<std::size_t>();
            else if (key == "pretrain_epochs") c.pretrain_epochs = v.get<std::size_t>();
            else if (key == "lr_ner") c.lr_ner = v.get<double>();
            else if (key == "lr_vae") c.lr_vae = v.get<double>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "min_freq") c.min_freq = v.get<std::size_t>();
            else if (key == "max_decode_length") c.max_decode_length = v.get<std::size_t>();
            else if (key == "threshold") c.threshold = v.get<double>();
            else if (key == "neg_keep_ratio") c.neg_keep_ratio = v.get<double>();
            else if (key == "elbo_samples") c.elbo_samples = v.get<std::size_t>();
            else if (key == "vib_samples") c.vib_samples = v.get<std::size_t>();
            else unknown.push_back(key);
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    return unknown;
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    auto unknown = apply_config_json(c, j);
    if (!unknown.empty()) throw UsageError("config: unknown key '" + unknown.front() + "'");
}

/// Every trainable component for one configuration. Components a mode does
/// not use are not constructed, so their parameters do not exist.
class Model {
public:
    Model(ModelConfig cfg, Vocabulary vocab, EntityTypes types)
        : config_(std::move(cfg)), vocab_(std::move(vocab)), types_(std::move(types)) {
        config_.validate();
        if (types_.size() == 0) throw DataError("model: entity-type inventory is empty");
        Rng rng(config_.seed);
        const auto& c = config_;
        const std::size_t span_dim = 3 * c.encoder_dim;
        encoder_ = std::make_unique<BiLstmContextualizer>(params_, vocab_.size(), c.word_dim, c.encoder_hidden,
                                                          c.encoder_dim, rng);
        if (c.mode == Mode::baseline) {
            baseline_.emplace(params_, "baseline.classifier", span_dim, types_.size(), ParamGroup::ner, rng);
        } else {
            vib_.emplace(params_, span_dim, c.vib_hidden, c.vib_latent_size, types_.size(), c.vib_activation, rng);
        }
        if (uses_sr(c.mode)) {
            heads_.emplace(params_, span_dim, c.latent_size, c.sharing, uses_sg(c.mode), rng);
            sr_.emplace(params_, "sr_decoder", vocab_.size(), c.latent_size, c.decoder_word_dim, c.decoder_hidden,
                        rng);
        }
        if (uses_sg(c.mode)) {
            sg_.emplace(params_, "sg_decoder", vocab_.size(), c.latent_size, c.decoder_word_dim, c.decoder_hidden,
                        rng);
        }
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }
    const EntityTypes& types() const { return types_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    const Contextualizer& encoder() const { return *encoder_; }
    bool has_vib() const { return vib_.has_value(); }
    bool has_sr() const { return sr_.has_value(); }
    bool has_sg() const { return sg_.has_value(); }

    const VibClassifier& vib() const { return require(vib_, "VIB classifier"); }
    const Affine& baseline_classifier() const { return require(baseline_, "baseline classifier"); }
    const PosteriorHeadSet& heads() const { return require(heads_, "posterior heads"); }
    const SeqDecoder& sr_decoder() const { return require(sr_, "reconstruction decoder"); }
    const SeqDecoder& sg_decoder() const { return require(sg_, "synonym decoder"); }

    std::vector<TokenId> encode(const TokenSeq& tokens) const { return vocab_.encode(tokens); }

    /// [n, d] contextual embeddings of a sentence.
    ad::Var contextualize(ad::Graph& g, const Sentence& s) const {
        const auto ids = encode(s.tokens);
        return encoder_->contextualize(g, ids);
    }

    /// Per-type probabilities [n, T] for the given spans of one sentence,
    /// computed from posterior means.
    Tensor span_probabilities(const Sentence& s, std::span<const ad::RowRange> spans) const {
        ad::Graph g(false);
        ad::Var spans_emb = span_embed_batch(contextualize(g, s), spans);
        if (baseline_) {
            Tensor logits = (*baseline_)(g, spans_emb).value();
            for (auto& v : logits.storage()) v = ad::sigmoid(v);
            return logits;
        }
        return vib_probabilities(spans_emb.value(), *vib_);
    }

private:
    template <class T>
    static const T& require(const std::optional<T>& o, const char* what) {
        if (!o) throw Error(std::string("model has no ") + what);
        return *o;
    }

    ModelConfig config_;
    Vocabulary vocab_;
    EntityTypes types_;
    ParameterStore params_;
    std::unique_ptr<Contextualizer> encoder_;
    std::optional<Affine> baseline_;
    std::optional<VibClassifier> vib_;
    std::optional<PosteriorHeadSet> heads_;
    std::optional<SeqDecoder> sr_;
    std::optional<SeqDecoder> sg_;
};

}  // namespace ibner
