#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ibner/autodiff.hpp"
#include "ibner/corpus.hpp"

namespace ibner {

using Rng = std::mt19937_64;

/// Optimizer group a parameter belongs to; each group has its own learning rate.
enum class ParamGroup { ner, vae };

/// Owns every trainable tensor of a model. Addresses are stable for the
/// store's lifetime, so layers hold plain Parameter pointers.
class ParameterStore {
public:
    Parameter& create(const std::string& name, Tensor init, ParamGroup group) {
        for (const auto& e : entries_) {
            if (e.param->name == name) throw Error("parameter '" + name + "' registered twice");
        }
        entries_.push_back({std::make_unique<Parameter>(name, std::move(init)), group});
        return *entries_.back().param;
    }

    Parameter* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.param->name == name) return e.param.get();
        return nullptr;
    }

    std::vector<Parameter*> all() const {
        std::vector<Parameter*> out;
        for (const auto& e : entries_) out.push_back(e.param.get());
        return out;
    }

    ParamGroup group(const Parameter& p) const {
        for (const auto& e : entries_)
            if (e.param.get() == &p) return e.group;
        throw Error("parameter '" + p.name + "' not in store");
    }

    std::size_t size() const { return entries_.size(); }

    void zero_grad() {
        for (auto& e : entries_) e.param->zero_grad();
    }

private:
    struct Entry {
        std::unique_ptr<Parameter> param;
        ParamGroup group;
    };
    std::vector<Entry> entries_;
};

namespace init {

/// N(0, 1/fan_in) for affine weights.
inline Tensor scaled_normal(Rng& rng, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
    Tensor t(Shape{rows, cols});
    for (auto& v : t.storage()) v = dist(rng);
    return t;
}

inline Tensor uniform(Rng& rng, Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = dist(rng);
    return t;
}

inline Tensor normal(Rng& rng, Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = dist(rng);
    return t;
}

}  // namespace init

/// y = W x + b with W of shape [out, in].
struct Affine {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;

    Affine() = default;
    Affine(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, ParamGroup group, Rng& rng)
        : weight(&store.create(name + ".weight", init::scaled_normal(rng, out, in), group)),
          bias(&store.create(name + ".bias", Tensor(Shape{out}), group)) {}

    std::size_t in_dim() const { return weight->value.shape()[1]; }
    std::size_t out_dim() const { return weight->value.shape()[0]; }

    ad::Var operator()(ad::Graph& g, ad::Var x) const { return ad::affine(x, g.param(*weight), g.param(*bias)); }

    std::vector<Parameter*> parameters() const { return {weight, bias}; }
};

struct Embedding {
    Parameter* table = nullptr;

    Embedding() = default;
    Embedding(ParameterStore& store, const std::string& name, std::size_t vocab, std::size_t dim, ParamGroup group,
              Rng& rng)
        : table(&store.create(name + ".table", init::normal(rng, Shape{vocab, dim}, 1.0), group)) {}

    std::size_t vocab_size() const { return table->value.shape()[0]; }
    std::size_t dim() const { return table->value.shape()[1]; }

    ad::Var lookup(ad::Graph& g, std::span<const TokenId> ids) const {
        for (auto id : ids) {
            if (id >= vocab_size()) {
                throw DataError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(vocab_size()));
            }
        }
        return ad::gather_rows(g.param(*table), ids);
    }

    std::vector<Parameter*> parameters() const { return {table}; }
};

/// Single LSTM layer; gate weights act on [x ; h] and are stacked as
/// input, forget, candidate, output blocks.
struct LstmCell {
    Parameter* weight = nullptr;  // [4h, in + h]
    Parameter* bias = nullptr;    // [4h]
    std::size_t input = 0;
    std::size_t hidden = 0;

    struct State {
        ad::Var h;
        ad::Var c;
    };

    LstmCell() = default;
    LstmCell(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hid, ParamGroup group,
             Rng& rng)
        : weight(&store.create(name + ".weight", init::uniform(rng, Shape{4 * hid, in + hid}, 0.08), group)),
          bias(&store.create(name + ".bias", Tensor(Shape{4 * hid}), group)),
          input(in),
          hidden(hid) {}

    State zero_state(ad::Graph& g) const {
        return {g.constant(Tensor(Shape{hidden})), g.constant(Tensor(Shape{hidden}))};
    }

    State step(ad::Graph& g, ad::Var x, State s) const {
        ad::Var gates = ad::affine(ad::concat({x, s.h}), g.param(*weight), g.param(*bias));
        ad::Var i = ad::sigmoid(ad::slice(gates, 0, hidden));
        ad::Var f = ad::sigmoid(ad::slice(gates, hidden, hidden));
        ad::Var cand = ad::tanh(ad::slice(gates, 2 * hidden, hidden));
        ad::Var o = ad::sigmoid(ad::slice(gates, 3 * hidden, hidden));
        ad::Var c = f * s.c + i * cand;
        return {o * ad::tanh(c), c};
    }

    std::vector<Parameter*> parameters() const { return {weight, bias}; }
};

/// Source of standard-normal noise for reparameterized sampling. A
/// zero source yields posterior means, which makes losses deterministic.
class NoiseSource {
public:
    static NoiseSource gaussian(Rng& rng) { return NoiseSource(&rng); }
    static NoiseSource zeros() { return NoiseSource(nullptr); }

    Tensor draw(const Shape& shape) {
        Tensor t(shape);
        if (rng_ == nullptr) return t;
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& v : t.storage()) v = dist(*rng_);
        return t;
    }

private:
    explicit NoiseSource(Rng* rng) : rng_(rng) {}
    Rng* rng_;
};

}  // namespace ibner
