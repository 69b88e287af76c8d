#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "ibner/commands.hpp"
#include "test_support.hpp"

using namespace ibner;
using namespace ibner::testing;
namespace fs = std::filesystem;

namespace {

fs::path workdir(const std::string& name) {
    auto d = fs::temp_directory_path() / "ibner_cmd_test" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig micro_run(const fs::path& dir, Mode mode) {
    {
        std::ofstream c(dir / "train.jsonl");
        write_corpus(c, micro_corpus());
        std::ofstream d(dir / "dict.tsv");
        d << "w1 w2\tw5 w6\nw4\tw13\n";
    }
    RunConfig rc;
    rc.model = micro_config(mode);
    rc.train = (dir / "train.jsonl").string();
    rc.dict = (dir / "dict.tsv").string();
    rc.out = (dir / "run").string();
    return rc;
}

}  // namespace

TEST(RunConfig, UnknownKeyRejected) {
    RunConfig rc;
    EXPECT_THROW(apply_run_config(rc, nlohmann::json{{"beta", 0.1}, {"gamma_typo", 1}}), UsageError);
    apply_run_config(rc, nlohmann::json{{"beta", 0.1}, {"out", "x"}});
    EXPECT_EQ(rc.model.beta, 0.1);
    EXPECT_EQ(rc.out, "x");
}

TEST(RunConfig, JsonRoundTrip) {
    RunConfig rc;
    rc.model.mode = Mode::supvib;
    rc.train = "t.jsonl";
    RunConfig back;
    apply_run_config(back, run_config_json(rc));
    EXPECT_EQ(run_config_json(back), run_config_json(rc));
}

TEST(RunTrain, ModeAllWithoutDictionaryIsUsageError) {
    auto dir = workdir("nodict");
    RunConfig rc = micro_run(dir, Mode::all);
    rc.dict.clear();
    EXPECT_THROW(run_train(rc, std::cerr), UsageError);
    EXPECT_FALSE(fs::exists(dir / "run"));
}

TEST(RunTrain, WritesArtifactsAndLossColumns) {
    auto dir = workdir("all");
    RunConfig rc = micro_run(dir, Mode::all);
    std::ostringstream log;
    auto r = run_train(rc, log);
    EXPECT_EQ(r.coverage.entities, 3u);
    EXPECT_EQ(r.coverage.with_synonyms, 2u);
    for (auto f : {"config.json", "loss.tsv", "pretrain_loss.tsv", "best.ckpt", "final.ckpt", "dev_predictions.jsonl"})
        EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
    std::istringstream loss(slurp(dir / "run" / "loss.tsv"));
    std::string line;
    std::getline(loss, line);
    EXPECT_EQ(line, "step\tL\tL_VIB\tL_SR\tL_SG");
    std::size_t rows = 0;
    while (std::getline(loss, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 4);
    }
    EXPECT_EQ(rows, r.steps);
}

TEST(RunTrain, BaselineLogsSingleLossColumn) {
    auto dir = workdir("baseline");
    RunConfig rc = micro_run(dir, Mode::baseline);
    run_train(rc, std::cerr);
    EXPECT_EQ(slurp(dir / "run" / "loss.tsv").substr(0, 7), "step\tL\n");
    EXPECT_FALSE(fs::exists(dir / "run" / "pretrain_loss.tsv"));
}

TEST(RunEval, EmptyCorpusReportsZeros) {
    auto dir = workdir("eval");
    RunConfig rc = micro_run(dir, Mode::supvib);
    run_train(rc, std::cerr);
    std::ofstream(dir / "empty.jsonl").close();
    auto r = run_eval((dir / "run" / "final.ckpt").string(), (dir / "empty.jsonl").string(), std::nullopt,
                      (dir / "ev").string());
    EXPECT_EQ(r.report.f1, 0.0);
    EXPECT_EQ(r.report.true_positives + r.report.false_positives + r.report.false_negatives, 0u);
    EXPECT_TRUE(fs::exists(dir / "ev" / "report.json"));
    EXPECT_TRUE(fs::exists(dir / "ev" / "predictions.jsonl"));
}

TEST(RunEval, MatchesDevPredictionsWrittenByTrain) {
    auto dir = workdir("eval2");
    RunConfig rc = micro_run(dir, Mode::supvib_spanreco);
    run_train(rc, std::cerr);
    run_eval((dir / "run" / "final.ckpt").string(), rc.train, std::nullopt, (dir / "ev").string());
    EXPECT_EQ(slurp(dir / "ev" / "predictions.jsonl"), slurp(dir / "run" / "dev_predictions.jsonl"));
}

TEST(RunReconstruct, RequiresDecoder) {
    auto dir = workdir("recon");
    RunConfig rc = micro_run(dir, Mode::supvib);
    run_train(rc, std::cerr);
    EXPECT_THROW(run_reconstruct((dir / "run" / "final.ckpt").string(), rc.train, ""), Error);

    RunConfig sr = micro_run(dir, Mode::supvib_spanreco);
    sr.out = (dir / "sr").string();
    run_train(sr, std::cerr);
    auto rep = run_reconstruct((dir / "sr" / "final.ckpt").string(), sr.train, (dir / "rec").string());
    EXPECT_EQ(rep.rows.size(), 3u);
    EXPECT_EQ(slurp(dir / "rec" / "reconstructions.tsv").substr(0, 30), "original\treconstruction\tbleu2\n");
}

TEST(RunGrid, ThreeByThreeWithOneBest) {
    auto dir = workdir("grid");
    RunConfig rc = micro_run(dir, Mode::supvib);
    rc.model.epochs = 1;
    auto g = run_grid(rc, {1e-6, 1e-5, 1e-4}, {1e-6, 1e-5, 1e-4}, std::cerr);
    EXPECT_EQ(g.cells.size(), 9u);
    std::istringstream in(slurp(dir / "run" / "grid.tsv"));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "beta\tgamma\tdev_f1\tbest");
    int rows = 0, starred = 0;
    while (std::getline(in, line)) {
        ++rows;
        starred += line.back() == '*';
    }
    EXPECT_EQ(rows, 9);
    EXPECT_EQ(starred, 1);
    for (const auto& c : g.cells) EXPECT_TRUE(fs::exists(fs::path(c.dir) / "final.ckpt"));
}
