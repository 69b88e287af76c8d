#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "ibner/gradcheck.hpp"
#include "ibner/trainer.hpp"
#include "ibner/vib.hpp"
#include "test_support.hpp"

using namespace ibner;
using namespace ibner::testing;

namespace {

struct Vib {
    ParameterStore store;
    Rng rng{40};
    VibClassifier vib;
    Vib(std::size_t span_dim = 12, std::size_t hidden = 6, std::size_t latent = 4, std::size_t types = 2)
        : vib(store, span_dim, hidden, latent, types, VibActivation::tanh, rng) {}
};

Tensor labels_2x2() { return Tensor::matrix(3, 2, {1, 0, 0, 0, 1, 1}); }

}  // namespace

TEST(Compress, ShapesAndZeroMap) {
    Vib v(96, 64, 32, 1);
    ad::Graph g;
    auto q = v.vib.compress(g, g.constant(random_tensor({2, 96}, 1)));
    EXPECT_EQ(q.mu.shape(), (Shape{2, 32}));
    EXPECT_EQ(q.logvar.shape(), (Shape{2, 32}));
    for (auto* p : v.store.all()) p->value.fill(0.0);
    ad::Graph g0;
    auto z = v.vib.compress(g0, g0.constant(random_tensor({96}, 2)));
    for (double x : z.mu.value().storage()) EXPECT_EQ(x, 0.0);
    for (double x : z.logvar.value().storage()) EXPECT_EQ(x, 0.0);
}

TEST(Compress, LatentLargerThanInputRejected) {
    ParameterStore store;
    Rng rng(1);
    EXPECT_THROW(VibClassifier(store, 6, 4, 7, 1, VibActivation::tanh, rng), UsageError);
}

TEST(Compress, IdenticalEmbeddingsGiveIdenticalPosteriors) {
    Vib v;
    Tensor row = random_tensor({12}, 3);
    Tensor two(Shape{2, 12});
    for (std::size_t c = 0; c < 12; ++c) two.at(0, c) = two.at(1, c) = row[c];
    ad::Graph g;
    auto q = v.vib.compress(g, g.constant(two));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(q.mu.value().at(0, c), q.mu.value().at(1, c));
}

TEST(VibLoss, BetaZeroTotalIsPrediction) {
    Vib v;
    ad::Graph g;
    auto l = vib_loss(g, g.constant(random_tensor({3, 12}, 4)), labels_2x2(), v.vib, 0.0, random_tensor({3, 4}, 5));
    EXPECT_EQ(l.total.item(), l.prediction.item());
    EXPECT_GT(l.compression.item(), 0.0);
}

TEST(VibLoss, TotalIsBetaCompressionPlusPrediction) {
    Vib v;
    ad::Graph g;
    auto l = vib_loss(g, g.constant(random_tensor({3, 12}, 4)), labels_2x2(), v.vib, 0.3, random_tensor({3, 4}, 5));
    EXPECT_EQ(l.total.item(), 0.3 * l.compression.item() + l.prediction.item());
    EXPECT_GE(l.prediction.item(), 0.0);
}

TEST(VibLoss, UntrainedPredictionIsTLn2) {
    Vib v(12, 6, 4, 3);
    v.vib.classifier().weight->value.fill(0.0);
    ad::Graph g;
    Tensor y = Tensor::matrix(2, 3, {1, 0, 1, 0, 0, 0});
    auto l = vib_loss(g, g.constant(random_tensor({2, 12}, 6)), y, v.vib, 0.0, random_tensor({2, 4}, 7));
    EXPECT_NEAR(l.prediction.item(), 3 * std::log(2.0), 1e-12);
}

TEST(VibLoss, MonotoneInBeta) {
    Vib v;
    ad::Graph g;
    ad::Var s = g.constant(random_tensor({3, 12}, 8));
    const Tensor eps = random_tensor({3, 4}, 9);
    double prev = -1.0;
    for (double beta : {0.0, 1e-6, 1e-3, 0.1, 0.5, 1.0}) {
        const double t = vib_loss(g, s, labels_2x2(), v.vib, beta, eps).total.item();
        EXPECT_LE(prev, t);
        prev = t;
    }
}

TEST(VibLoss, GradientOnThreeSpanBatch) {
    Vib v;
    Parameter s("spans", random_tensor({3, 12}, 10));
    const Tensor eps = random_tensor({3, 4}, 11);
    auto params = v.vib.parameters();
    params.push_back(&s);
    auto rep = ad::grad_check(
        [&](ad::Graph& g) { return vib_loss(g, g.param(s), labels_2x2(), v.vib, 0.2, eps).total; }, params);
    EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}

TEST(VibLoss, LabelShapeChecked) {
    Vib v;
    ad::Graph g;
    EXPECT_THROW(vib_loss(g, g.constant(random_tensor({3, 12}, 4)), Tensor::matrix(3, 1, {1, 0, 1}), v.vib, 0.0,
                          random_tensor({3, 4}, 5)),
                 ShapeError);
}

TEST(Threshold, Examples) {
    EXPECT_FALSE(threshold_probs({0.1, 0.49}, 0.5).is_entity());
    EXPECT_EQ(threshold_probs({0.9, 0.2}, 0.5).types, (std::vector<TypeId>{0}));
    EXPECT_FALSE(threshold_probs({0.5}, 0.5).is_entity());
    EXPECT_THROW(threshold_probs({0.9}, 1.0), UsageError);
}

TEST(Predict, DeterministicAndInRange) {
    Vib v;
    Tensor s = random_tensor({12}, 12);
    auto a = predict(s, v.vib), b = predict(s, v.vib);
    EXPECT_EQ(a.probs, b.probs);
    for (double p : a.probs) {
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
    }
}

TEST(Predict, InvariantToHiddenUnitPermutation) {
    Vib v;
    Vib w;
    for (std::size_t i = 0; i < v.store.size(); ++i) w.store.all()[i]->value = v.store.all()[i]->value;
    // Permute hidden units: rows of the first layer, columns of both heads.
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), Rng(3));
    const auto& H = v.vib.hidden_layer();
    const auto& Hw = w.vib.hidden_layer();
    for (std::size_t r = 0; r < 6; ++r) {
        for (std::size_t c = 0; c < 12; ++c) Hw.weight->value.at(r, c) = H.weight->value.at(perm[r], c);
        Hw.bias->value[r] = H.bias->value[perm[r]];
    }
    for (auto [a, b] : {std::pair{&v.vib.mu_head(), &w.vib.mu_head()},
                        std::pair{&v.vib.logvar_head(), &w.vib.logvar_head()}}) {
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 6; ++c) b->weight->value.at(r, c) = a->weight->value.at(r, perm[c]);
    }
    for (int k = 0; k < 20; ++k) {
        Tensor s = random_tensor({12}, 100 + k);
        auto p = predict(s, v.vib), q = predict(s, w.vib);
        EXPECT_EQ(p.types, q.types);
        for (std::size_t t = 0; t < 2; ++t) EXPECT_NEAR(p.probs[t], q.probs[t], 1e-12);
    }
}

TEST(VibTraining, SeparableClustersReachLowLoss) {
    Vib v(12, 6, 4, 1);
    Rng data_rng(50);
    std::normal_distribution<double> noise(0.0, 0.3);
    const std::size_t n = 32;
    Tensor x(Shape{n, 12}), y(Shape{n, 1});
    for (std::size_t i = 0; i < n; ++i) {
        const double centre = i % 2 == 0 ? 1.0 : -1.0;
        for (std::size_t c = 0; c < 12; ++c) x.at(i, c) = centre + noise(data_rng);
        y.at(i, 0) = i % 2 == 0 ? 1.0 : 0.0;
    }
    std::map<std::string, AdamMoments> moments;
    Rng eps_rng(51);
    NoiseSource eps = NoiseSource::gaussian(eps_rng);
    double pred = 1.0;
    for (int step = 0; step < 2000 && pred >= 0.05; ++step) {
        ad::Graph g;
        auto l = vib_loss(g, g.constant(x), y, v.vib, 1e-3, eps.draw(Shape{n, 4}));
        pred = l.prediction.item();
        g.backward(l.total);
        for (auto* p : v.vib.parameters()) adaptive_step(*p, moments[p->name], 1e-2);
    }
    EXPECT_LT(pred, 0.05);
}
