#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "ibner/checkpoint.hpp"
#include "ibner/eval.hpp"
#include "test_support.hpp"

using namespace ibner;
using namespace ibner::testing;

namespace {

struct Trained {
    Corpus corpus = micro_corpus();
    std::unique_ptr<Model> model;
    TrainState state;

    explicit Trained(Mode mode = Mode::all) {
        model = std::make_unique<Model>(micro_config(mode), build_vocab(corpus, 1), corpus.types);
        state = TrainState(model->config().seed);
        pretrain_vaes(*model, corpus, state);
        train_joint(*model, corpus, state);
    }
};

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "ibner_ckpt_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    for (Mode mode : {Mode::baseline, Mode::supvib, Mode::supvib_spanreco, Mode::all}) {
        Trained t(mode);
        const auto path = temp_path("rt.ckpt").string();
        save_checkpoint(path, *t.model, t.state);
        auto back = load_checkpoint(path);
        ASSERT_EQ(back.model->params().size(), t.model->params().size());
        for (auto* p : t.model->params().all()) {
            const Parameter* q = back.model->params().find(p->name);
            ASSERT_NE(q, nullptr) << p->name;
            EXPECT_TRUE(q->value == p->value) << p->name;
        }
        EXPECT_EQ(back.model->vocab(), t.model->vocab());
        EXPECT_EQ(back.model->types(), t.model->types());
        EXPECT_EQ(nlohmann::json(back.model->config()), nlohmann::json(t.model->config()));
        EXPECT_EQ(back.state.step, t.state.step);
        EXPECT_EQ(back.state.rng_state(), t.state.rng_state());
        EXPECT_EQ(back.state.history.size(), t.state.history.size());
        for (const auto& [name, mom] : t.state.moments) {
            const auto& b = back.state.moments.at(name);
            EXPECT_EQ(b.t, mom.t);
            EXPECT_TRUE(b.m == mom.m);
            EXPECT_TRUE(b.v == mom.v);
        }
        EXPECT_EQ(serialize_checkpoint(*back.model, back.state), serialize_checkpoint(*t.model, t.state));
        EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
    }
}

TEST(Checkpoint, LoadedModelPredictsIdentically) {
    Trained t;
    auto back = deserialize_checkpoint(serialize_checkpoint(*t.model, t.state), "mem");
    auto a = predict_corpus(*t.model, t.corpus, 0.3), b = predict_corpus(*back.model, t.corpus, 0.3);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].key, b[i].key);
        EXPECT_EQ(a[i].prob, b[i].prob);
    }
}

TEST(Checkpoint, ResumedTrainingMatchesUninterrupted) {
    Corpus c = micro_corpus();
    ModelConfig cfg = micro_config(Mode::all);
    cfg.epochs = 4;
    Model full(cfg, build_vocab(c, 1), c.types);
    TrainState fs(cfg.seed);
    pretrain_vaes(full, c, fs);
    train_joint(full, c, fs);

    ModelConfig half = cfg;
    half.epochs = 2;
    Model part(half, build_vocab(c, 1), c.types);
    TrainState ps(half.seed);
    pretrain_vaes(part, c, ps);
    train_joint(part, c, ps);
    auto back = deserialize_checkpoint(serialize_checkpoint(part, ps), "mem");
    ModelConfig resumed_cfg = back.model->config();
    resumed_cfg.epochs = 4;
    Model resumed(resumed_cfg, back.model->vocab(), back.model->types());
    for (auto* p : resumed.params().all()) p->value = back.model->params().find(p->name)->value;
    train_joint(resumed, c, back.state);
    for (auto* p : full.params().all()) EXPECT_TRUE(resumed.params().find(p->name)->value == p->value) << p->name;
}

TEST(Checkpoint, TruncatedFileRejected) {
    Trained t(Mode::supvib);
    std::string bytes = serialize_checkpoint(*t.model, t.state);
    bytes.pop_back();
    EXPECT_THROW(deserialize_checkpoint(bytes, "mem"), DataError);
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 10), "mem"), DataError);
}

TEST(Checkpoint, CorruptByteRejected) {
    Trained t(Mode::supvib);
    std::string bytes = serialize_checkpoint(*t.model, t.state);
    bytes[bytes.size() / 2] ^= 0x5a;
    try {
        deserialize_checkpoint(bytes, "mem");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }
}

TEST(Checkpoint, VersionMismatchRejected) {
    Trained t(Mode::supvib);
    std::string bytes = serialize_checkpoint(*t.model, t.state);
    bytes[8] = 9;
    try {
        deserialize_checkpoint(bytes, "mem");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos);
    }
}

TEST(Checkpoint, MissingFileIsDataError) {
    EXPECT_THROW(load_checkpoint("/nonexistent/none.ckpt"), DataError);
}
