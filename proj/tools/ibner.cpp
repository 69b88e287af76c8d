// Command-line front end: train, eval, reconstruct, export-posteriors, grid, synth.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ibner/commands.hpp"
#include "ibner/synthetic.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Overrides {
    std::string config;
    std::string mode;
    std::optional<double> beta;
    std::optional<double> gamma;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string corpus;
    std::string dev;
    std::string dict;
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "Run configuration (JSON)");
    cmd->add_option("--mode", o.mode, "baseline | supvib | supvib_spanreco | all");
    cmd->add_option("--beta", o.beta, "Compression weight");
    cmd->add_option("--gamma", o.gamma, "Weight of the VAE losses");
    cmd->add_option("--seed", o.seed, "Random seed");
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_option("--corpus", o.corpus, "Training corpus (JSONL)");
    cmd->add_option("--dev", o.dev, "Development corpus (JSONL)");
    cmd->add_option("--dict", o.dict, "Synonym dictionary (TSV)");
}

ibner::RunConfig resolve(const Overrides& o) {
    ibner::RunConfig rc = o.config.empty() ? ibner::RunConfig{} : ibner::load_run_config(o.config);
    if (!o.mode.empty()) rc.model.mode = ibner::parse_mode(o.mode);
    if (o.beta) rc.model.beta = *o.beta;
    if (o.gamma) rc.model.gamma = *o.gamma;
    if (o.seed) rc.model.seed = *o.seed;
    if (!o.out.empty()) rc.out = o.out;
    if (!o.corpus.empty()) rc.train = o.corpus;
    if (!o.dev.empty()) rc.dev = o.dev;
    if (!o.dict.empty()) rc.dict = o.dict;
    return rc;
}

void print_report(const ibner::EvalResult& r) {
    const auto& rep = r.report;
    std::cout << "TP " << rep.true_positives << "  FP " << rep.false_positives << "  FN " << rep.false_negatives
              << '\n';
    std::printf("precision %.4f  recall %.4f  F1 %.4f  macro-F1 %.4f\n", rep.precision, rep.recall, rep.f1,
                rep.macro_f1);
    std::cout << "category errors " << r.errors.category_errors << "  span errors " << r.errors.span_errors << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Span-based NER with variational information bottleneck and VAE regularizers"};
    app.require_subcommand(1);

    Overrides train_o;
    auto* train = app.add_subcommand("train", "Pretrain VAEs, train jointly, write checkpoints and logs");
    add_override_flags(train, train_o);

    std::string checkpoint, corpus, out, source = "z1";
    std::optional<double> threshold;
    auto* eval = app.add_subcommand("eval", "Exact-match evaluation of a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--corpus", corpus, "Corpus (JSONL)")->required();
    eval->add_option("--threshold", threshold, "Decision threshold in (0, 1)");
    eval->add_option("--out", out, "Directory for predictions.jsonl and report.json");

    auto* recon = app.add_subcommand("reconstruct", "Greedy reconstruction of gold spans with BLEU-2");
    recon->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    recon->add_option("--corpus", corpus, "Corpus (JSONL)")->required();
    recon->add_option("--out", out, "Directory for reconstructions.tsv");

    auto* exp = app.add_subcommand("export-posteriors", "Write posterior means of gold spans as TSV");
    exp->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    exp->add_option("--corpus", corpus, "Corpus (JSONL)")->required();
    exp->add_option("--source", source, "z1 | z3")->check(CLI::IsMember({"z1", "z3"}));
    exp->add_option("--out", out, "Output directory")->required();

    Overrides grid_o;
    std::vector<double> betas{1e-6, 1e-5, 1e-4}, gammas{1e-6, 1e-5, 1e-4};
    auto* grid = app.add_subcommand("grid", "Train one run per (beta, gamma) cell and compare dev F1");
    add_override_flags(grid, grid_o);
    grid->add_option("--betas", betas, "Beta values")->delimiter(',');
    grid->add_option("--gammas", gammas, "Gamma values")->delimiter(',');

    std::size_t synth_sentences = 50, synth_dev = 20;
    std::uint64_t synth_seed = 1;
    auto* synth = app.add_subcommand("synth", "Write the toy corpus (train/dev JSONL) and its synonym dictionary");
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--seed", synth_seed, "Generator seed");
    synth->add_option("--sentences", synth_sentences, "Training sentences");
    synth->add_option("--dev-sentences", synth_dev, "Development sentences");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*train) {
            const auto r = ibner::run_train(resolve(train_o), std::cerr);
            std::printf("steps %zu  best dev F1 %.4f (epoch %zu)  final dev F1 %.4f\n", r.steps, r.best_dev_f1,
                        r.best_epoch, r.final_dev_f1);
        } else if (*eval) {
            print_report(ibner::run_eval(checkpoint, corpus, threshold, out));
        } else if (*recon) {
            const auto rep = ibner::run_reconstruct(checkpoint, corpus, out);
            if (out.empty()) ibner::write_reconstructions(std::cout, rep);
            std::printf("entities %zu  mean BLEU-2 %.4f\n", rep.rows.size(), rep.mean_bleu);
        } else if (*exp) {
            std::cout << ibner::run_export(checkpoint, corpus, ibner::parse_latent_source(source), out) << '\n';
        } else if (*grid) {
            const auto g = ibner::run_grid(resolve(grid_o), betas, gammas, std::cerr);
            for (std::size_t i = 0; i < g.cells.size(); ++i) {
                std::printf("beta %-8g gamma %-8g dev F1 %.4f %s\n", g.cells[i].beta, g.cells[i].gamma,
                            g.cells[i].dev_f1, i == g.best ? "*" : "");
            }
        } else if (*synth) {
            std::filesystem::create_directories(out);
            namespace syn = ibner::synthetic;
            syn::Options tr;
            tr.sentences = synth_sentences;
            tr.seed = synth_seed;
            syn::Options dv = tr;
            dv.sentences = synth_dev;
            dv.seed = synth_seed + 1000;
            dv.doc_prefix = "toydev";
            std::ofstream t(std::filesystem::path(out) / "train.jsonl"), d(std::filesystem::path(out) / "dev.jsonl"),
                s(std::filesystem::path(out) / "synonyms.tsv");
            if (!t || !d || !s) throw ibner::DataError("cannot write into '" + out + "'");
            ibner::write_corpus(t, syn::generate(tr));
            ibner::write_corpus(d, syn::generate(dv));
            syn::write_dictionary(s);
        }
    } catch (const ibner::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const ibner::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const ibner::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
    return kOk;
}
