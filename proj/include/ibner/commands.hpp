#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ibner/checkpoint.hpp"
#include "ibner/eval.hpp"
#include "ibner/model.hpp"
#include "ibner/trainer.hpp"

namespace ibner {

/// Model hyperparameters plus data and output locations. Serialized as one
/// flat JSON object.
struct RunConfig {
    ModelConfig model;
    std::string train;
    std::string dev;
    std::string test;
    std::string dict;
    std::string out;
};

inline nlohmann::json run_config_json(const RunConfig& rc) {
    nlohmann::json j = rc.model;
    j["train"] = rc.train;
    j["dev"] = rc.dev;
    j["test"] = rc.test;
    j["dict"] = rc.dict;
    j["out"] = rc.out;
    return j;
}

/// Applies `j` on top of `rc`; unknown keys are rejected.
inline void apply_run_config(RunConfig& rc, const nlohmann::json& j) {
    if (!j.is_object()) throw UsageError("config: expected a JSON object");
    nlohmann::json model_part = nlohmann::json::object();
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "train") rc.train = v.get<std::string>();
            else if (key == "dev") rc.dev = v.get<std::string>();
            else if (key == "test") rc.test = v.get<std::string>();
            else if (key == "dict") rc.dict = v.get<std::string>();
            else if (key == "out") rc.out = v.get<std::string>();
            else model_part[key] = v;
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    auto unknown = apply_config_json(rc.model, model_part);
    if (!unknown.empty()) throw UsageError("config: unknown key '" + unknown.front() + "'");
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config '" + path + "': " + e.what());
    }
    RunConfig rc;
    apply_run_config(rc, j);
    return rc;
}

namespace detail {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw DataError("cannot write '" + p.string() + "'");
    return out;
}

inline Corpus load_for_model(const std::string& path, const Model& m) {
    Corpus c = load_corpus(path, {m.config().max_sentence_length});
    remap_types(c, m.types());
    return c;
}

}  // namespace detail

struct TrainResult {
    double best_dev_f1 = 0.0;
    std::size_t best_epoch = 0;
    double final_dev_f1 = 0.0;
    std::size_t steps = 0;
    SynonymCoverage coverage;
};

/// Pretrains (when the mode has VAEs), trains jointly, and writes into
/// rc.out: config.json, loss.tsv, pretrain_loss.tsv (VAE modes),
/// best.ckpt, final.ckpt and dev_predictions.jsonl. The dev set defaults to
/// the training set.
inline TrainResult run_train(const RunConfig& rc, std::ostream& log) {
    const ModelConfig& cfg = rc.model;
    cfg.validate();
    if (rc.train.empty()) throw UsageError("train: no training corpus given");
    if (rc.out.empty()) throw UsageError("train: no output directory given");
    if (uses_sg(cfg.mode) && rc.dict.empty())
        throw UsageError("train: mode 'all' requires a synonym dictionary");

    const LoadOptions lo{cfg.max_sentence_length};
    Corpus train = load_corpus(rc.train, lo);
    for (const auto& w : train.warnings) log << "warning: " << w << '\n';
    Corpus dev = rc.dev.empty() ? train : load_corpus(rc.dev, lo);
    TrainResult result;
    if (!rc.dict.empty()) {
        SynonymDictionary dict = load_synonym_dict(rc.dict);
        result.coverage = attach_synonyms(train, dict);
        log << "synonym coverage: " << result.coverage.with_synonyms << "/" << result.coverage.entities << '\n';
    }

    Model model(cfg, build_vocab(train, cfg.min_freq), train.types);
    remap_types(dev, model.types());
    TrainState st(cfg.seed);

    detail::ensure_dir(rc.out);
    const std::filesystem::path out(rc.out);
    {
        RunConfig echo = rc;
        auto f = detail::open_out(out / "config.json");
        f << run_config_json(echo).dump(2) << '\n';
    }

    auto loss_log = detail::open_out(out / "loss.tsv");
    write_loss_header(loss_log, cfg.mode);
    TrainHooks hooks;
    hooks.on_step = [&](const LossRecord& r) { write_loss_row(loss_log, cfg.mode, r); };

    std::optional<std::ofstream> pre_log;
    if (model.has_sr()) {
        pre_log = detail::open_out(out / "pretrain_loss.tsv");
        *pre_log << "step\tL\tL_SR\tL_SG\n";
        hooks.on_pretrain_step = [&](const LossRecord& r) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.17g\n", r.step, r.total, r.sr, r.sg);
            *pre_log << buf;
        };
    }

    result.best_dev_f1 = -1.0;
    auto dev_f1 = [&] {
        return exact_match_f1(keys_of(predict_corpus(model, dev, cfg.threshold)), gold_keys(dev)).f1;
    };
    hooks.on_epoch_end = [&](std::size_t epoch) {
        const double f1 = dev_f1();
        log << "epoch " << epoch << " dev F1 " << std::fixed << std::setprecision(4) << f1 << std::defaultfloat
            << '\n';
        if (f1 > result.best_dev_f1) {
            result.best_dev_f1 = f1;
            result.best_epoch = epoch;
            save_checkpoint((out / "best.ckpt").string(), model, st);
        }
    };

    if (pretrain_vaes(model, train, st, hooks)) log << "pretrained VAEs for " << st.pretrain_epoch << " epochs\n";
    train_joint(model, train, st, hooks);

    save_checkpoint((out / "final.ckpt").string(), model, st);
    if (result.best_dev_f1 < 0.0) {
        result.best_dev_f1 = dev_f1();
        save_checkpoint((out / "best.ckpt").string(), model, st);
    }
    const auto preds = predict_corpus(model, dev, cfg.threshold);
    {
        auto f = detail::open_out(out / "dev_predictions.jsonl");
        write_predictions(f, preds, model.types());
    }
    result.final_dev_f1 = exact_match_f1(keys_of(preds), gold_keys(dev)).f1;
    result.steps = st.step;
    return result;
}

struct EvalResult {
    EvalReport report;
    ErrorBreakdown errors;
    std::vector<PredictedEntity> predictions;
};

/// Scores a checkpoint on a corpus; writes predictions.jsonl and
/// report.json into `out_dir` when it is non-empty.
inline EvalResult run_eval(const std::string& checkpoint, const std::string& corpus_path,
                           std::optional<double> threshold, const std::string& out_dir) {
    auto ck = load_checkpoint(checkpoint);
    const Model& m = *ck.model;
    Corpus corpus = detail::load_for_model(corpus_path, m);
    EvalResult r;
    r.predictions = predict_corpus(m, corpus, threshold.value_or(m.config().threshold));
    const auto gold = gold_keys(corpus);
    r.report = exact_match_f1(keys_of(r.predictions), gold);
    r.errors = classify_errors(r.report.fp_keys, gold);
    if (!out_dir.empty()) {
        detail::ensure_dir(out_dir);
        auto p = detail::open_out(std::filesystem::path(out_dir) / "predictions.jsonl");
        write_predictions(p, r.predictions, m.types());
        auto j = detail::open_out(std::filesystem::path(out_dir) / "report.json");
        j << report_json(r.report, r.errors, m.types()).dump(2) << '\n';
    }
    return r;
}

inline void write_reconstructions(std::ostream& os, const ReconstructionReport& rep) {
    os << "original\treconstruction\tbleu2\n";
    char buf[32];
    for (const auto& row : rep.rows) {
        std::snprintf(buf, sizeof buf, "%.6f", row.bleu);
        os << join(row.original) << '\t' << join(row.reconstruction) << '\t' << buf << '\n';
    }
}

/// Writes reconstructions.tsv into `out_dir` when it is non-empty.
inline ReconstructionReport run_reconstruct(const std::string& checkpoint, const std::string& corpus_path,
                                            const std::string& out_dir) {
    auto ck = load_checkpoint(checkpoint);
    if (!ck.model->has_sr()) throw Error("no reconstruction decoder in checkpoint '" + checkpoint + "'");
    Corpus corpus = detail::load_for_model(corpus_path, *ck.model);
    ReconstructionReport rep = reconstruction_report(*ck.model, corpus);
    if (!out_dir.empty()) {
        detail::ensure_dir(out_dir);
        auto f = detail::open_out(std::filesystem::path(out_dir) / "reconstructions.tsv");
        write_reconstructions(f, rep);
    }
    return rep;
}

/// Writes posteriors_<source>.tsv into `out_dir`; returns the file path.
inline std::string run_export(const std::string& checkpoint, const std::string& corpus_path, LatentSource src,
                              const std::string& out_dir) {
    if (out_dir.empty()) throw UsageError("export-posteriors: no output directory given");
    auto ck = load_checkpoint(checkpoint);
    Corpus corpus = detail::load_for_model(corpus_path, *ck.model);
    detail::ensure_dir(out_dir);
    const auto path = (std::filesystem::path(out_dir) / ("posteriors_" + std::string(to_string(src)) + ".tsv")).string();
    export_posteriors(*ck.model, corpus, src, path);
    return path;
}

struct GridCell {
    double beta = 0.0;
    double gamma = 0.0;
    double dev_f1 = 0.0;
    std::string dir;
};

struct GridResult {
    std::vector<GridCell> cells;
    std::size_t best = 0;
};

inline std::string grid_cell_name(double beta, double gamma) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "beta=%g_gamma=%g", beta, gamma);
    return buf;
}

/// Trains one run per (beta, gamma) cell under rc.out with the same seed,
/// then writes grid.tsv; the best dev F1 (first on ties) is starred.
inline GridResult run_grid(const RunConfig& rc, const std::vector<double>& betas, const std::vector<double>& gammas,
                           std::ostream& log) {
    if (betas.empty() || gammas.empty()) throw UsageError("grid: beta and gamma lists must be non-empty");
    if (rc.out.empty()) throw UsageError("grid: no output directory given");
    GridResult g;
    for (double b : betas) {
        for (double gm : gammas) {
            RunConfig cell = rc;
            cell.model.beta = b;
            cell.model.gamma = gm;
            cell.out = (std::filesystem::path(rc.out) / grid_cell_name(b, gm)).string();
            log << "grid cell beta=" << b << " gamma=" << gm << '\n';
            const TrainResult tr = run_train(cell, log);
            g.cells.push_back({b, gm, tr.best_dev_f1, cell.out});
        }
    }
    for (std::size_t i = 1; i < g.cells.size(); ++i)
        if (g.cells[i].dev_f1 > g.cells[g.best].dev_f1) g.best = i;

    auto f = detail::open_out(std::filesystem::path(rc.out) / "grid.tsv");
    f << "beta\tgamma\tdev_f1\tbest\n";
    for (std::size_t i = 0; i < g.cells.size(); ++i) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%g\t%g\t%.6f\t%s\n", g.cells[i].beta, g.cells[i].gamma, g.cells[i].dev_f1,
                      i == g.best ? "*" : "");
        f << buf;
    }
    return g;
}

}  // namespace ibner
