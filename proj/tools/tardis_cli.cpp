#include "CLI11.hpp"
#include "tardis/binary_io.hpp"
#include "tardis/checkpoint.hpp"
#include "tardis/errors.hpp"
#include "tardis/harness.hpp"

#include <cstdio>
#include <iostream>
#include <sstream>

using namespace tardis;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string alpha_grid;
    std::string sites;
    std::string out_dir;
    std::string jsonl;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config, "Experiment config (JSON mirroring ExperimentConfig)");
    cmd->add_option("--seed", o.seed, "Run a single seed instead of the configured list");
    cmd->add_option("--alpha-grid", o.alpha_grid, "Comma separated alpha values");
    cmd->add_option("--sites", o.sites, "default, all, or a list such as ffn_out@3,attention_out@2");
    cmd->add_option("--out-dir", o.out_dir, "Output directory");
    cmd->add_option("--jsonl", o.jsonl, "Read the corpus from a JSONL file");
}

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw ArgumentError("bad alpha value '" + item + "'");
        }
    }
    return out;
}

ExperimentConfig resolve(const CommonOptions& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
    if (o.seed) c.seeds = {*o.seed};
    if (!o.alpha_grid.empty()) c.alpha_grid = parse_grid(o.alpha_grid);
    if (!o.sites.empty()) c.sites = o.sites;
    if (!o.out_dir.empty()) c.out_dir = o.out_dir;
    if (!o.jsonl.empty()) {
        c.corpus.kind = CorpusKind::jsonl;
        c.corpus.jsonl_path = o.jsonl;
    }
    c.validate();
    return c;
}

void emit(const ExperimentReport& r, const ExperimentConfig& c) {
    for (const auto& p : emit_report(r, c.out_dir)) std::cout << "wrote " << p.string() << '\n';
    for (const auto& [seed, d] : r.details.items())
        if (d.contains("warnings"))
            for (const auto& w : d.at("warnings")) std::cerr << "warning (seed " << seed << "): " << w.get<std::string>() << '\n';
    std::fprintf(stdout, "%s: %zu rows in %.1f s\n", r.experiment.c_str(), r.rows.size(), r.runtime_seconds);
}

void run_named(const CommonOptions& o, const std::string& experiment) {
    ExperimentConfig c = resolve(o);
    c.experiment = experiment;
    emit(run_experiment(c), c);
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Temporal steering vectors for small transformer classifiers"};
    app.require_subcommand(1);

    CommonOptions gen_o, train_o, extract_o, matrix_o, shift_o, timeline_o, dynamic_o, ablate_o, report_o;

    auto* gen = app.add_subcommand("gen-corpus", "Generate or load the corpus and write it as JSONL");
    add_common(gen, gen_o);

    auto* trn = app.add_subcommand("train", "Train the per-period models and save checkpoints");
    add_common(trn, train_o);

    std::int64_t source = 0, target = 1;
    std::optional<std::size_t> rank;
    auto* ext = app.add_subcommand("extract", "Extract steering vectors between two periods");
    add_common(ext, extract_o);
    ext->add_option("--source", source, "Source period")->required();
    ext->add_option("--target", target, "Target period")->required();
    ext->add_option("--rank", rank, "Low-rank extraction with k components");

    auto* mat = app.add_subcommand("eval-matrix", "Misalignment matrix with and without steering");
    add_common(mat, matrix_o);

    std::string kind;
    auto* shf = app.add_subcommand("shift-exp", "Label or vocabulary shift series");
    add_common(shf, shift_o);
    shf->add_option("--kind", kind, "label or vocab")->required()->check(CLI::IsMember({"label", "vocab"}));

    std::string direction = "forward";
    auto* tl = app.add_subcommand("timeline", "Interpolated and extrapolated steering");
    add_common(tl, timeline_o);
    tl->add_option("--direction", direction, "forward or backward")->check(CLI::IsMember({"forward", "backward"}));

    bool oracle = false;
    auto* dyn = app.add_subcommand("dynamic", "Steering with period classifier probabilities");
    add_common(dyn, dynamic_o);
    dyn->add_flag("--oracle", oracle, "Use the true periods instead of the classifier");

    std::string axis;
    auto* abl = app.add_subcommand("ablate", "Rank, site or data size ablation");
    add_common(abl, ablate_o);
    abl->add_option("--axis", axis, "rank, site or size")->required()->check(CLI::IsMember({"rank", "site", "size"}));

    auto* rep = app.add_subcommand("report", "Regenerate a report from a config snapshot (--config)");
    add_common(rep, report_o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            const ExperimentConfig c = resolve(gen_o);
            for (auto seed : c.seeds) {
                Workbench wb(c, seed);
                const auto path = c.out_dir / seed_dir(seed) / "corpus.jsonl";
                std::filesystem::create_directories(path.parent_path());
                save_jsonl(wb.corpus(), path);
                std::cout << "wrote " << path.string() << " (" << wb.periods().size() << " periods)\n";
            }
        } else if (*trn) {
            const ExperimentConfig c = resolve(train_o);
            for (auto seed : c.seeds) {
                Workbench wb(c, seed);
                const auto dir = c.out_dir / seed_dir(seed);
                std::filesystem::create_directories(dir);
                for (auto p : wb.periods()) {
                    ModelCheckpoint ck{wb.period_model(p), {{"role", "period_model"}, {"period", p}, {"seed", seed}}};
                    const auto path = dir / ("period_" + std::to_string(p) + ".ckpt");
                    save_checkpoint(ck, path);
                    std::cout << "wrote " << path.string() << '\n';
                }
                write_text_file(dir / "training.json", wb.training_log().dump(2) + "\n");
            }
        } else if (*ext) {
            const ExperimentConfig c = resolve(extract_o);
            for (auto seed : c.seeds) {
                Workbench wb(c, seed);
                const Model& m = wb.period_model(source);
                const Slice src = wb.corpus().slice(source, SplitKind::val);
                const Slice tgt = wb.corpus().slice(target, c.target_pool_is_test ? SplitKind::test : SplitKind::val);
                const SiteSet sites = resolve_sites(c);
                const SteeringVectorSet v = rank ? extract_lowrank(m, src, tgt, sites, *rank) : extract(m, src, tgt, sites);
                const auto path = c.out_dir / seed_dir(seed) /
                                  ("v_" + std::to_string(source) + "_" + std::to_string(target) + ".sv");
                std::filesystem::create_directories(path.parent_path());
                save_steering(v, path);
                std::cout << "wrote " << path.string() << '\n';
            }
        } else if (*mat) {
            run_named(matrix_o, "misalignment");
        } else if (*shf) {
            run_named(shift_o, kind == "label" ? "label_shift" : "vocab_shift");
        } else if (*tl) {
            run_named(timeline_o, "timeline_" + direction);
        } else if (*dyn) {
            ExperimentConfig c = resolve(dynamic_o);
            c.experiment = "dynamic";
            c.oracle_classifier = c.oracle_classifier || oracle;
            emit(run_experiment(c), c);
        } else if (*abl) {
            run_named(ablate_o, "ablate_" + axis);
        } else if (*rep) {
            if (report_o.config.empty()) throw ArgumentError("report needs --config with a config snapshot");
            const ExperimentConfig c = resolve(report_o);
            emit(run_experiment(c), c);
        }
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 3;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
