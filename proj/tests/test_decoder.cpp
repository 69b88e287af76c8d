#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "ibner/decoder.hpp"
#include "ibner/gradcheck.hpp"
#include "ibner/trainer.hpp"
#include "test_support.hpp"

using namespace ibner;
using namespace ibner::testing;

namespace {

struct Dec {
    ParameterStore store;
    Rng rng{17};
    SeqDecoder dec;
    explicit Dec(std::size_t vocab = 20, std::size_t latent = 4)
        : dec(store, "dec", vocab, latent, 5, 8, rng) {}
};

double kl_value(std::vector<double> mu, std::vector<double> lv) {
    ad::Graph g(false);
    return gaussian_kl({g.constant(Tensor::vector(mu)), g.constant(Tensor::vector(lv))}).item();
}

}  // namespace

TEST(GaussianKl, StandardNormalIsZero) { EXPECT_EQ(kl_value({0, 0, 0}, {0, 0, 0}), 0.0); }

TEST(GaussianKl, ClosedFormExamples) {
    EXPECT_NEAR(kl_value({1.0}, {0.0}), 0.5, 1e-15);
    EXPECT_NEAR(kl_value({0.5}, {0.0}), 0.125, 1e-15);
    const std::vector<double> mu{0.3, -1.2}, lv{0.4, -0.7};
    EXPECT_NEAR(kl_value(mu, lv), gaussian_kl(mu, lv), 1e-14);
}

TEST(GaussianKl, MonteCarloOneDimension) {
    // E_q[log q(z) - log p(z)] with 10^6 draws.
    for (double m : {1.0, 0.5}) {
        Rng rng(21);
        std::normal_distribution<double> n01(0.0, 1.0);
        double s = 0.0;
        const int n = 1000000;
        for (int i = 0; i < n; ++i) {
            const double e = n01(rng), z = m + e;
            s += (-0.5 * e * e) - (-0.5 * z * z);
        }
        EXPECT_NEAR(s / n, kl_value({m}, {0.0}), 0.01);
    }
}

TEST(GaussianKl, NonNegativeOnRandomInputs) {
    Rng rng(22);
    std::normal_distribution<double> d(0.0, 2.0);
    for (int i = 0; i < 2000; ++i) {
        std::vector<double> mu(3), lv(3);
        for (auto& v : mu) v = d(rng);
        for (auto& v : lv) v = d(rng);
        EXPECT_GE(gaussian_kl(mu, lv), 0.0);
    }
}

TEST(TeacherForced, CountsLengthPlusOneSteps) {
    Dec d;
    for (auto* p : d.store.all()) p->value.fill(0.0);
    // Zero weights give uniform logits, so nll == (L+1) ln V exactly.
    ad::Graph g;
    ad::Var z = g.constant(Tensor::vector({0.1, 0.2, 0.3, 0.4}));
    const double ln_v = std::log(20.0);
    EXPECT_NEAR(d.dec.teacher_forced_nll(g, z, {5}).item(), 2 * ln_v, 1e-12);
    EXPECT_NEAR(d.dec.teacher_forced_nll(g, z, {5, 6, 7}).item(), 4 * ln_v, 1e-12);
    EXPECT_THROW(d.dec.teacher_forced_nll(g, z, {}), Error);
}

TEST(TeacherForced, UntrainedIsNearUniform) {
    Dec d;
    ad::Graph g;
    ad::Var z = g.constant(Tensor::vector({0.0, 0.0, 0.0, 0.0}));
    const double nll = d.dec.teacher_forced_nll(g, z, {4, 9, 12}).item();
    EXPECT_NEAR(nll, 4 * std::log(20.0), 0.25 * 4 * std::log(20.0));
}

TEST(TeacherForced, InputDimensionIsLatentPlusEmbedding) {
    Dec d;
    EXPECT_EQ(d.dec.input_dim(), 4u + 5u);
    ad::Graph g;
    EXPECT_THROW(d.dec.teacher_forced_nll(g, g.constant(Tensor::vector({1.0})), {4}), ShapeError);
}

TEST(TeacherForced, OverfitsOneSpan) {
    Dec d;
    Parameter mu("mu", Tensor(Shape{4})), lv("lv", Tensor(Shape{4}, -4.0));
    const std::vector<TokenId> target{7, 11};
    std::map<std::string, AdamMoments> moments;
    auto params = d.dec.parameters();
    params.push_back(&mu);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 500; ++step) {
        ad::Graph g;
        GaussianPosterior q{g.param(mu), g.constant(lv.value)};
        ad::Var nll = d.dec.teacher_forced_nll(g, reparameterize(g, q, Tensor(Shape{4})), target);
        if (step == 0) first = nll.item();
        last = nll.item();
        g.backward(nll);
        for (auto* p : params) adaptive_step(*p, moments[p->name], 1e-2);
    }
    EXPECT_LT(last, 0.1);
    EXPECT_LT(last, 0.1 * first);
    const auto out = d.dec.greedy(mu.value, 8);
    EXPECT_EQ(out.tokens, target);
    EXPECT_TRUE(out.terminated);
}

TEST(Greedy, RespectsMaxLengthAndIsDeterministic) {
    Dec d;
    Tensor z = random_tensor({4}, 30);
    auto a = d.dec.greedy(z, 1);
    EXPECT_LE(a.tokens.size(), 1u);
    auto b = d.dec.greedy(z, 6), c = d.dec.greedy(z, 6);
    EXPECT_EQ(b.tokens, c.tokens);
    EXPECT_EQ(b.log_probs, c.log_probs);
    EXPECT_LE(b.tokens.size(), 6u);
    for (double lp : b.log_probs) EXPECT_LE(lp, 0.0);
    for (TokenId t : b.tokens) {
        EXPECT_NE(t, Vocabulary::kPad);
        EXPECT_NE(t, Vocabulary::kStart);
    }
    EXPECT_THROW(d.dec.greedy(z, 0), UsageError);
}

TEST(ElboSr, TotalIsNllPlusKl) {
    Dec d;
    ad::Graph g;
    GaussianPosterior q{g.constant(Tensor::vector({0.2, -0.1, 0.0, 0.4})),
                        g.constant(Tensor::vector({-0.3, 0.1, 0.0, -1.0}))};
    auto t = elbo_loss_sr(g, {4, 5}, q, random_tensor({4}, 31), d.dec);
    EXPECT_EQ(t.total.item(), t.nll.item() + t.kl.item());
    EXPECT_GE(t.total.item(), t.nll.item());

    GaussianPosterior q0{g.constant(Tensor(Shape{4})), g.constant(Tensor(Shape{4}))};
    EXPECT_EQ(elbo_loss_sr(g, {4}, q0, random_tensor({4}, 32), d.dec).kl.item(), 0.0);
}

TEST(ElboSr, MultiSampleAveragesSingleSamples) {
    Dec d;
    ad::Graph g;
    GaussianPosterior q{g.constant(Tensor::vector({0.2, -0.1, 0.0, 0.4})),
                        g.constant(Tensor::vector({-0.3, 0.1, 0.0, -1.0}))};
    Tensor both = random_tensor({2, 4}, 33);
    Tensor e0(Shape{4}, std::vector<double>(both.storage().begin(), both.storage().begin() + 4));
    Tensor e1(Shape{4}, std::vector<double>(both.storage().begin() + 4, both.storage().end()));
    const double avg = 0.5 * (elbo_loss_sr(g, {6, 7}, q, e0, d.dec).nll.item() +
                              elbo_loss_sr(g, {6, 7}, q, e1, d.dec).nll.item());
    EXPECT_NEAR(elbo_loss_sr(g, {6, 7}, q, both, d.dec).nll.item(), avg, 1e-12);
}

TEST(ElboSr, GradientThroughMeanHeadMatchesFiniteDifferences) {
    Dec d;
    ParameterStore store;
    Rng rng(34);
    PosteriorHeadSet heads(store, 6, 4, SharingMode::shared_mu, false, rng);
    const Tensor s = random_tensor({6}, 35);
    const Tensor eps = random_tensor({4}, 36);
    auto rep = ad::grad_check(
        [&](ad::Graph& g) {
            auto q = posterior_params(g, g.constant(s), heads, VaeComponent::sr);
            return elbo_loss_sr(g, {4, 8, 9}, q, eps, d.dec).total;
        },
        heads.parameters());
    EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}

TEST(ElboSg, NoSynonymsIsExactZero) {
    Dec d;
    ad::Graph g;
    GaussianPosterior q{g.constant(Tensor::vector({1, 1, 1, 1})), g.constant(Tensor::vector({1, 1, 1, 1}))};
    auto t = elbo_loss_sg(g, {}, q, random_tensor({4}, 37), d.dec);
    EXPECT_EQ(t.total.item(), 0.0);
}

TEST(ElboSg, TwoSynonymsAverageNll) {
    Dec d;
    ad::Graph g;
    GaussianPosterior q{g.constant(Tensor::vector({0.2, -0.1, 0.0, 0.4})),
                        g.constant(Tensor::vector({-0.3, 0.1, 0.0, -1.0}))};
    const Tensor eps = random_tensor({4}, 38);
    const std::vector<TokenId> a{4, 5}, b{6, 7, 8};
    ad::Var z = reparameterize(g, q, eps);
    const double expected = 0.5 * (d.dec.teacher_forced_nll(g, z, a).item() + d.dec.teacher_forced_nll(g, z, b).item());
    auto t = elbo_loss_sg(g, {a, b}, q, eps, d.dec);
    EXPECT_NEAR(t.nll.item(), expected, 1e-12);
    EXPECT_EQ(t.total.item(), t.nll.item() + t.kl.item());
}

TEST(Decoders, SrAndSgParametersAreDisjoint) {
    for (auto mode : {SharingMode::shared_mu, SharingMode::shared_mu_sigma, SharingMode::independent}) {
        ModelConfig cfg = micro_config(Mode::all);
        cfg.sharing = mode;
        Model m(cfg, micro_vocab(), two_types());
        auto a = m.sr_decoder().parameters(), b = m.sg_decoder().parameters();
        std::set<Parameter*> sa(a.begin(), a.end());
        for (auto* p : b) EXPECT_EQ(sa.count(p), 0u);
    }
}

TEST(SharedMu, PerturbingMeanHeadMovesBothLosses) {
    Model m(micro_config(Mode::all), micro_vocab(), two_types());
    Corpus c = micro_corpus();
    const Sentence* batch[] = {&c.sentences[0]};
    auto losses = [&] {
        ad::Graph g(false);
        NoiseSource noise = NoiseSource::zeros();
        auto gb = detail::gold_batch({m.contextualize(g, c.sentences[0])}, batch);
        auto t = detail::vae_terms(g, m, gb, noise);
        return std::pair{t.sr.item(), t.sg.item()};
    };
    auto before = losses();
    m.heads().mu_head(VaeComponent::sr).weight->value[0] += 0.5;
    auto after = losses();
    EXPECT_NE(before.first, after.first);
    EXPECT_NE(before.second, after.second);
}
