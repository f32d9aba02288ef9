#include "tardis/harness.hpp"

#include "tardis/binary_io.hpp"
#include "tardis/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

namespace tardis {

namespace {

std::string corpus_kind_name(CorpusKind k) {
    switch (k) {
    case CorpusKind::drift_bench: return "drift-bench";
    case CorpusKind::spec: return "spec";
    case CorpusKind::jsonl: return "jsonl";
    }
    return "?";
}

CorpusKind parse_corpus_kind(const std::string& s) {
    if (s == "drift-bench") return CorpusKind::drift_bench;
    if (s == "spec") return CorpusKind::spec;
    if (s == "jsonl") return CorpusKind::jsonl;
    throw ArgumentError("unknown corpus kind '" + s + "' (expected drift-bench, spec or jsonl)");
}

nlohmann::json fractions_json(const SplitFractions& f) { return {f.train, f.val, f.test}; }

SplitFractions parse_fractions(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 3) throw ArgumentError("split fractions need three entries (train, val, test)");
    return {v[0], v[1], v[2]};
}

nlohmann::json corpus_json(const CorpusSource& c) {
    nlohmann::json j = {{"kind", corpus_kind_name(c.kind)},
                        {"n_per_period", c.n_per_period},
                        {"fractions", fractions_json(c.fractions)},
                        {"bench", c.bench}};
    if (c.kind == CorpusKind::spec && c.spec) j["spec"] = *c.spec;
    if (c.kind == CorpusKind::jsonl) {
        j["jsonl_path"] = c.jsonl_path.string();
        j["jsonl"] = {{"vocab_size", c.jsonl.vocab_size},
                      {"max_seq_len", c.jsonl.max_seq_len},
                      {"n_classes", c.jsonl.n_classes}};
    }
    return j;
}

void corpus_from_json(const nlohmann::json& j, CorpusSource& c) {
    if (j.contains("kind")) c.kind = parse_corpus_kind(j.at("kind").get<std::string>());
    c.n_per_period = j.value("n_per_period", c.n_per_period);
    if (j.contains("fractions")) c.fractions = parse_fractions(j.at("fractions"));
    if (j.contains("bench")) c.bench = j.at("bench").get<DriftBenchOptions>();
    if (j.contains("spec")) c.spec = j.at("spec").get<DriftSpec>();
    if (j.contains("jsonl_path")) c.jsonl_path = j.at("jsonl_path").get<std::string>();
    if (j.contains("jsonl")) {
        const auto& o = j.at("jsonl");
        c.jsonl.vocab_size = o.value("vocab_size", c.jsonl.vocab_size);
        c.jsonl.max_seq_len = o.value("max_seq_len", c.jsonl.max_seq_len);
        c.jsonl.n_classes = o.value("n_classes", c.jsonl.n_classes);
    }
}

} // namespace

ExperimentConfig::ExperimentConfig() {
    finetune.epochs = 10;
    classifier.model.max_seq_len = model.max_seq_len;
}

void ExperimentConfig::validate() const {
    if (alpha_grid.empty()) throw ArgumentError("ExperimentConfig: alpha grid is empty");
    for (double a : alpha_grid)
        if (!std::isfinite(a)) throw ArgumentError("ExperimentConfig: alpha grid entries must be finite");
    if (seeds.empty()) throw ArgumentError("ExperimentConfig: seed list is empty");
    model.validate();
    train.validate();
    finetune.validate();
    classifier.train.validate();
    if (corpus.kind == CorpusKind::spec && !corpus.spec) throw ArgumentError("ExperimentConfig: corpus kind 'spec' needs a spec");
    if (corpus.kind == CorpusKind::jsonl && corpus.jsonl_path.empty())
        throw ArgumentError("ExperimentConfig: corpus kind 'jsonl' needs jsonl_path");
    if (label_shift_steps < 1) throw ArgumentError("ExperimentConfig: label_shift_steps must be >= 1");
    if (data_size_repeats < 1) throw ArgumentError("ExperimentConfig: data_size_repeats must be >= 1");
    for (std::size_t k : ranks)
        if (k < 1) throw ArgumentError("ExperimentConfig: ranks must be >= 1");
    resolve_sites(*this);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = nlohmann::json{{"experiment", c.experiment},
                       {"corpus", corpus_json(c.corpus)},
                       {"model", c.model},
                       {"train", c.train},
                       {"finetune", c.finetune},
                       {"classifier", c.classifier},
                       {"sites", c.sites},
                       {"alpha_grid", c.alpha_grid},
                       {"seeds", c.seeds},
                       {"out_dir", c.out_dir.string()},
                       {"target_pool_is_test", c.target_pool_is_test},
                       {"per_pair_alpha", c.per_pair_alpha},
                       {"retune_dynamic_alpha", c.retune_dynamic_alpha},
                       {"oracle_classifier", c.oracle_classifier},
                       {"label_shift_steps", c.label_shift_steps},
                       {"label_shift_fixed_class", c.label_shift_fixed_class},
                       {"timeline_direction", to_string(c.timeline_direction)},
                       {"ranks", c.ranks},
                       {"data_sizes", c.data_sizes},
                       {"data_size_repeats", c.data_size_repeats}};
    j["train_period"] = c.train_period ? nlohmann::json(*c.train_period) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    ExperimentConfig d;
    c = d;
    c.experiment = j.value("experiment", d.experiment);
    if (j.contains("corpus")) corpus_from_json(j.at("corpus"), c.corpus);
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("finetune")) c.finetune = j.at("finetune").get<TrainConfig>();
    if (j.contains("classifier")) c.classifier = j.at("classifier").get<ClassifierConfig>();
    c.sites = j.value("sites", d.sites);
    if (j.contains("alpha_grid")) c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    c.target_pool_is_test = j.value("target_pool_is_test", d.target_pool_is_test);
    c.per_pair_alpha = j.value("per_pair_alpha", d.per_pair_alpha);
    c.retune_dynamic_alpha = j.value("retune_dynamic_alpha", d.retune_dynamic_alpha);
    c.oracle_classifier = j.value("oracle_classifier", d.oracle_classifier);
    if (j.contains("train_period") && !j.at("train_period").is_null())
        c.train_period = j.at("train_period").get<std::int64_t>();
    c.label_shift_steps = j.value("label_shift_steps", d.label_shift_steps);
    c.label_shift_fixed_class = j.value("label_shift_fixed_class", d.label_shift_fixed_class);
    if (j.contains("timeline_direction"))
        c.timeline_direction = parse_timeline_direction(j.at("timeline_direction").get<std::string>());
    if (j.contains("ranks")) c.ranks = j.at("ranks").get<std::vector<std::size_t>>();
    if (j.contains("data_sizes")) c.data_sizes = j.at("data_sizes").get<std::vector<std::size_t>>();
    c.data_size_repeats = j.value("data_size_repeats", d.data_size_repeats);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(read_text_file(path)).get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

Workbench::Workbench(ExperimentConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {}

const TemporalCorpus& Workbench::corpus() {
    if (corpus_) return *corpus_;
    const auto& src = config_.corpus;
    const std::uint64_t corpus_seed = derive_seed(seed_, "corpus");
    switch (src.kind) {
    case CorpusKind::drift_bench: {
        DriftBenchOptions o = src.bench;
        o.seed = corpus_seed;
        corpus_ = generate(make_drift_bench(o), src.n_per_period, src.fractions);
        break;
    }
    case CorpusKind::spec: {
        DriftSpec s = *src.spec;
        s.seed = corpus_seed;
        corpus_ = generate(s, src.n_per_period, src.fractions);
        break;
    }
    case CorpusKind::jsonl: {
        JsonlOptions o = src.jsonl;
        o.fractions = src.fractions;
        o.max_seq_len = std::min(o.max_seq_len, config_.model.max_seq_len);
        o.seed = corpus_seed;
        corpus_ = load_jsonl(src.jsonl_path, o);
        break;
    }
    }
    return *corpus_;
}

std::vector<std::int64_t> Workbench::periods() { return corpus().periods(); }

const Model& Workbench::period_model(std::int64_t period) {
    if (auto it = models_.find(period); it != models_.end()) return it->second;
    const TemporalCorpus& c = corpus();
    const auto ps = c.periods();
    if (std::find(ps.begin(), ps.end(), period) == ps.end())
        throw ArgumentError("no period " + std::to_string(period) + " in the corpus");
    const std::string key = std::to_string(period);
    if (period == ps.front()) {
        ModelConfig mc = config_.model;
        mc.vocab_size = c.vocab_size;
        mc.n_classes = c.n_classes;
        mc.seed = derive_seed(seed_, "model-init");
        TrainConfig tc = config_.train;
        tc.seed = derive_seed(seed_, "train-base");
        TrainResult r = train(init_model(mc), c.slice(period, SplitKind::train), tc, c.slice(period, SplitKind::val));
        training_log_[key] = {{"role", "base"}, {"val_accuracy", r.report.val_accuracy.value_or(NAN)}};
        return models_.emplace(period, std::move(r.checkpoint.model)).first->second;
    }
    const Model& base = period_model(ps.front());
    TrainConfig tc = config_.finetune;
    tc.seed = derive_seed(seed_, "finetune:" + key);
    TrainResult r = train(base, c.slice(period, SplitKind::train), tc, c.slice(period, SplitKind::val));
    training_log_[key] = {{"role", "finetune"},
                          {"parent", std::to_string(ps.front())},
                          {"val_accuracy", r.report.val_accuracy.value_or(NAN)}};
    return models_.emplace(period, std::move(r.checkpoint.model)).first->second;
}

const PeriodClassifier& Workbench::classifier() {
    if (classifier_) return *classifier_;
    ClassifierConfig cc = config_.classifier;
    cc.model.seed = derive_seed(seed_, "classifier-model");
    cc.train.seed = derive_seed(seed_, "classifier-train");
    classifier_ = train_period_classifier(corpus(), cc);
    return *classifier_;
}

SiteSet resolve_sites(const ExperimentConfig& config) {
    if (config.sites == "default") return default_sites(config.model);
    if (config.sites == "all") return all_sites(config.model);
    SiteSet s = parse_site_list(config.sites);
    for (const auto& site : s)
        if (site.layer_index >= config.model.n_layers)
            throw ArgumentError("site " + to_string(site) + " outside the configured model");
    if (s.empty()) throw ArgumentError("empty site list");
    return s;
}

std::int64_t resolve_train_period(const ExperimentConfig& config, Workbench& bench) {
    const auto ps = bench.periods();
    if (!config.train_period) return ps.front();
    if (std::find(ps.begin(), ps.end(), *config.train_period) == ps.end())
        throw ArgumentError("train_period " + std::to_string(*config.train_period) + " not in the corpus");
    return *config.train_period;
}

Workbench& WorkbenchCache::get(const ExperimentConfig& config, std::uint64_t seed) {
    const nlohmann::json key = {{"corpus", corpus_json(config.corpus)},
                                {"model", config.model},
                                {"train", config.train},
                                {"finetune", config.finetune},
                                {"classifier", config.classifier}};
    auto& slot = benches_[{key.dump(), seed}];
    if (!slot) slot = std::make_unique<Workbench>(config, seed);
    return *slot;
}

double select_alpha(const Model& model, const std::vector<AlphaCandidate>& candidates, const std::vector<double>& grid) {
    if (grid.empty()) throw ArgumentError("select_alpha: empty grid");
    if (candidates.empty()) throw ArgumentError("select_alpha: nothing to evaluate");
    double best_alpha = grid.front();
    double best_score = -1.0;
    for (double a : grid) {
        double score = 0.0;
        for (const auto& c : candidates) score += accuracy(model, *c.pool, apply(*c.vectors, a));
        score /= static_cast<double>(candidates.size());
        if (score > best_score || (score == best_score && std::abs(a) < std::abs(best_alpha))) {
            best_score = score;
            best_alpha = a;
        }
    }
    return best_alpha;
}

namespace {

std::string num(double x) {
    std::ostringstream os;
    os << x;
    return os.str();
}

struct RowSink {
    std::string experiment;
    std::uint64_t seed;
    std::vector<ReportRow>& rows;

    ReportRow& add(std::int64_t train_p, std::int64_t eval_p, std::string method, std::string param, std::string value,
                   double alpha, double acc, double base) {
        ReportRow r;
        r.experiment = experiment;
        r.seed = seed;
        r.train_period = train_p;
        r.eval_period = eval_p;
        r.method = std::move(method);
        r.param = std::move(param);
        r.value = std::move(value);
        r.alpha = alpha;
        r.shift = NAN;
        r.accuracy = acc;
        r.baseline_accuracy = base;
        r.delta = acc - base;
        rows.push_back(std::move(r));
        return rows.back();
    }
};

using RowsFn = std::function<void(const ExperimentConfig&, Workbench&, RowSink&, nlohmann::json&)>;

ExperimentReport run_seeds(const ExperimentConfig& cfg, WorkbenchCache* cache, const std::string& name, const RowsFn& fn) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    WorkbenchCache local;
    WorkbenchCache& benches = cache ? *cache : local;
    ExperimentReport report;
    report.experiment = name;
    ExperimentConfig snapshot = cfg;
    snapshot.experiment = name;
    report.config = snapshot;
    for (std::uint64_t seed : cfg.seeds) {
        Workbench& wb = benches.get(cfg, seed);
        RowSink sink{name, seed, report.rows};
        nlohmann::json details = nlohmann::json::object();
        fn(cfg, wb, sink, details);
        details["training"] = wb.training_log();
        report.details[std::to_string(seed)] = details;
    }
    sort_rows(report.rows);
    report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

std::size_t majority_class(const Slice& slice, std::size_t n_classes) {
    std::vector<std::size_t> counts(n_classes, 0);
    for (const auto& ex : slice) ++counts.at(static_cast<std::size_t>(ex.label));
    return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

// Mean-difference vectors from `source` (val split of s) to every period.
struct PeriodVectors {
    std::map<std::int64_t, SteeringVectorSet> sets;
    std::map<std::int64_t, Slice> val;
    std::map<std::int64_t, Slice> test;
};

PeriodVectors vectors_from(const ExperimentConfig& cfg, Workbench& wb, const Model& m, std::int64_t s, const SiteSet& sites) {
    const TemporalCorpus& c = wb.corpus();
    PeriodVectors out;
    for (auto t : c.periods()) {
        out.val[t] = c.slice(t, SplitKind::val);
        out.test[t] = c.slice(t, SplitKind::test);
    }
    const CapturePool sc = capture_pool(m, out.val.at(s), sites);
    const std::uint64_t hash = m.fingerprint();
    for (auto t : c.periods()) {
        const Slice& target = cfg.target_pool_is_test ? out.test.at(t) : out.val.at(t);
        if (t == s && !cfg.target_pool_is_test) {
            out.sets.emplace(t, extract_from_captures(sc, sc, {s, t, hash}));
        } else {
            out.sets.emplace(t, extract_from_captures(sc, capture_pool(m, target, sites), {s, t, hash}));
        }
    }
    return out;
}

// Alpha per source period: best mean validation accuracy over t != s.
double alpha_for_source(const ExperimentConfig& cfg, const Model& m, std::int64_t s, const PeriodVectors& pv) {
    std::vector<AlphaCandidate> cands;
    for (const auto& [t, set] : pv.sets)
        if (t != s) cands.push_back({&set, &pv.val.at(t)});
    return select_alpha(m, cands, cfg.alpha_grid);
}

std::vector<double> grid_part(const std::vector<double>& grid, int sign) {
    std::vector<double> out;
    for (double a : grid)
        if ((sign > 0 && a > 0) || (sign < 0 && a < 0)) out.push_back(a);
    return out;
}

void misalignment(const ExperimentConfig& cfg, Workbench& wb, RowSink& sink, nlohmann::json& details) {
    const auto periods = wb.periods();
    if (periods.size() < 2) throw ArgumentError("misalignment matrix needs at least two periods");
    const SiteSet sites = resolve_sites(cfg);
    for (auto s : periods) {
        const Model& m = wb.period_model(s);
        const PeriodVectors pv = vectors_from(cfg, wb, m, s, sites);
        const double alpha_s = alpha_for_source(cfg, m, s, pv);
        details["alpha"][std::to_string(s)] = alpha_s;
        for (auto t : periods) {
            const double alpha =
                cfg.per_pair_alpha ? select_alpha(m, {{&pv.sets.at(t), &pv.val.at(t)}}, cfg.alpha_grid) : alpha_s;
            const double base = accuracy(m, pv.test.at(t));
            const double steered = accuracy(m, pv.test.at(t), apply(pv.sets.at(t), alpha));
            const std::string diag = s == t ? "diagonal" : "";
            sink.add(s, t, "baseline", "alpha", "0", 0.0, base, base).flags = diag;
            sink.add(s, t, "tardis", "alpha", "selected", alpha, steered, base).flags = diag;
        }
    }
}

void shift_rows(const ExperimentConfig& cfg, const Model& m, std::int64_t s, const CapturePool& source_caps,
                const Slice& target_pool, const Slice& select_pool, const Slice& eval, const SiteSet& sites,
                bool reuse_source, std::int64_t eval_period, std::size_t step, double shift, RowSink& sink) {
    const std::uint64_t hash = m.fingerprint();
    const SteeringVectorSet v = reuse_source
                                    ? extract_from_captures(source_caps, source_caps, {s, eval_period, hash})
                                    : extract_from_captures(source_caps, capture_pool(m, target_pool, sites),
                                                            {s, eval_period, hash});
    const double base = accuracy(m, eval);
    auto add = [&](const std::string& method, const std::string& value, double alpha, double acc) {
        ReportRow& r = sink.add(s, eval_period, method, "alpha", value, alpha, acc, base);
        r.step = step;
        r.shift = shift;
    };
    add("baseline", "0", 0.0, base);
    std::map<double, double> test_acc;
    for (double a : cfg.alpha_grid) {
        test_acc[a] = accuracy(m, eval, apply(v, a));
        add("tardis", num(a), a, test_acc[a]);
    }
    for (int sign : {+1, -1}) {
        const auto part = grid_part(cfg.alpha_grid, sign);
        if (part.empty()) continue;
        const double a = select_alpha(m, {{&v, &select_pool}}, part);
        add(sign > 0 ? "best_positive" : "best_negative", "selected", a, test_acc.at(a));
    }
}

void label_shift(const ExperimentConfig& cfg, Workbench& wb, RowSink& sink, nlohmann::json& details) {
    const TemporalCorpus& c = wb.corpus();
    const std::int64_t s = resolve_train_period(cfg, wb);
    const Model& m = wb.period_model(s);
    const SiteSet sites = resolve_sites(cfg);
    const Slice val = c.slice(s, SplitKind::val);
    const Slice test = c.slice(s, SplitKind::test);
    const std::size_t fixed = cfg.label_shift_fixed_class >= 0 ? static_cast<std::size_t>(cfg.label_shift_fixed_class)
                                                               : majority_class(c.slice(s, SplitKind::train), c.n_classes);
    details["fixed_class"] = fixed;
    const auto vs = label_shift_series(val, c.n_classes, cfg.label_shift_steps, static_cast<int>(fixed),
                                       derive_seed(wb.seed(), "label-shift-val"));
    const auto ts = label_shift_series(test, c.n_classes, cfg.label_shift_steps, static_cast<int>(fixed),
                                       derive_seed(wb.seed(), "label-shift-test"));
    const CapturePool sc = capture_pool(m, val, sites);
    for (std::size_t i = 0; i < vs.size(); ++i) {
        const Slice& target = cfg.target_pool_is_test ? ts[i].slice : vs[i].slice;
        const bool same = !cfg.target_pool_is_test && i == 0;
        shift_rows(cfg, m, s, sc, target, vs[i].slice, ts[i].slice, sites, same, s, i, ts[i].shift_magnitude, sink);
    }
}

void vocab_shift(const ExperimentConfig& cfg, Workbench& wb, RowSink& sink, nlohmann::json&) {
    const TemporalCorpus& c = wb.corpus();
    const std::int64_t s = resolve_train_period(cfg, wb);
    const Model& m = wb.period_model(s);
    const SiteSet sites = resolve_sites(cfg);
    const auto vs = vocab_shift_series(c, s, SplitKind::val, derive_seed(wb.seed(), "vocab-shift-val"));
    const auto ts = vocab_shift_series(c, s, SplitKind::test, derive_seed(wb.seed(), "vocab-shift-test"));
    const auto periods = c.periods();
    const auto pos = [&](std::int64_t p) {
        return static_cast<double>(std::find(periods.begin(), periods.end(), p) - periods.begin());
    };
    const Slice* source = nullptr;
    for (const auto& step : vs)
        if (step.period == s) source = &step.slice;
    const CapturePool sc = capture_pool(m, *source, sites);
    for (std::size_t i = 0; i < vs.size(); ++i) {
        const std::int64_t t = vs[i].period;
        const Slice& target = cfg.target_pool_is_test ? ts[i].slice : vs[i].slice;
        const bool same = !cfg.target_pool_is_test && t == s;
        shift_rows(cfg, m, s, sc, target, vs[i].slice, ts[i].slice, sites, same, t, 0, std::abs(pos(t) - pos(s)), sink);
    }
}

void timeline(const ExperimentConfig& cfg, Workbench& wb, RowSink& sink, nlohmann::json& details) {
    const auto periods = wb.periods();
    if (periods.size() < 3) throw ArgumentError("timeline experiment needs at least three periods");
    const bool fwd = cfg.timeline_direction == TimelineDirection::forward;
    const std::int64_t s = fwd ? periods.front() : periods.back();
    const std::int64_t far = fwd ? periods.back() : periods.front();
    const std::int64_t next = fwd ? periods[1] : periods[periods.size() - 2];
    const Model& m = wb.period_model(s);
    const PeriodVectors pv = vectors_from(cfg, wb, m, s, resolve_sites(cfg));
    const double alpha = alpha_for_source(cfg, m, s, pv);
    details["alpha"] = alpha;
    details["direction"] = to_string(cfg.timeline_direction);

    const std::size_t d = periods.size() - 1;
    const std::size_t mid = (d + 1) / 2;
    const SteeringVectorSet& span = pv.sets.at(far);
    const SteeringVectorSet& one = pv.sets.at(next);
    for (std::size_t j = 1; j <= d; ++j) {
        const std::int64_t t = fwd ? periods[j] : periods[d - j];
        const Slice& eval = pv.test.at(t);
        const double base = accuracy(m, eval);
        std::string flags = j == mid ? "midpoint" : "";
        if (j == d) flags = flags.empty() ? "endpoint" : flags + ";endpoint";
        auto add = [&](const std::string& method, double acc) {
            ReportRow& r = sink.add(s, t, method, "alpha", "selected", method == "baseline" ? 0.0 : alpha, acc, base);
            r.step = j;
            r.flags = flags;
        };
        add("baseline", base);
        add("exact", accuracy(m, eval, apply(pv.sets.at(t), alpha)));
        add("interpolated", accuracy(m, eval, apply(interpolate(span, j, d), alpha)));
        add("extrapolated", accuracy(m, eval, apply(extrapolate(one, j), alpha)));
    }
}

void dynamic(const ExperimentConfig& cfg, Workbench& wb, RowSink& sink, nlohmann::json& details) {
    const TemporalCorpus& c = wb.corpus();
    const auto periods = c.periods();
    const PeriodClassifier& clf = wb.classifier();
    details["classifier"] = {{"heldout_accuracy", clf.heldout_accuracy()},
                             {"heldout_total", clf.heldout_total},
                             {"chance_p_value", clf.chance_p_value()},
                             {"beats_chance", clf.beats_chance()}};
    const Slice test = c.combined(SplitKind::test);
    const Slice val = c.combined(SplitKind::val);
    const Matrix probs = cfg.oracle_classifier ? oracle_period_probs(clf, test) : predict_period_probs(clf, test);
    const SiteSet sites = resolve_sites(cfg);
    auto hits = [](const Matrix& logits, const Slice& slice) {
        std::size_t n = 0;
        for (std::size_t r = 0; r < slice.size(); ++r) n += argmax(logits.row(r)) == static_cast<std::size_t>(slice[r].label);
        return static_cast<double>(n) / static_cast<double>(slice.size());
    };
    for (auto s : periods) {
        const Model& m = wb.period_model(s);
        const PeriodVectors pv = vectors_from(cfg, wb, m, s, sites);
        DynamicSteeringPlan plan;
        for (auto p : clf.periods) plan.sets.push_back(pv.sets.at(p));
        plan.alpha = alpha_for_source(cfg, m, s, pv);
        if (cfg.retune_dynamic_alpha) {
            const Matrix vp = cfg.oracle_classifier ? oracle_period_probs(clf, val) : predict_period_probs(clf, val);
            double best = -1.0;
            const double reused = plan.alpha;
            double chosen = reused;
            for (double a : cfg.alpha_grid) {
                plan.alpha = a;
                const double acc = hits(dynamic_steer(m, val, plan, vp), val);
                if (acc > best || (acc == best && std::abs(a) < std::abs(chosen))) {
                    best = acc;
                    chosen = a;
                }
            }
            plan.alpha = chosen;
        }
        details["alpha"][std::to_string(s)] = plan.alpha;

        const double base = accuracy(m, test);
        std::size_t gt_hits = 0;
        for (auto t : periods) {
            const auto pred = predict(m, pv.test.at(t), apply(pv.sets.at(t), plan.alpha));
            for (std::size_t i = 0; i < pred.size(); ++i)
                gt_hits += pred[i] == static_cast<std::size_t>(pv.test.at(t)[i].label);
        }
        const double gt = static_cast<double>(gt_hits) / static_cast<double>(test.size());
        const double dyn = hits(dynamic_steer(m, test, plan, probs), test);
        sink.add(s, -1, "baseline", "alpha", "0", 0.0, base, base);
        sink.add(s, -1, "gt", "alpha", "selected", plan.alpha, gt, base);
        sink.add(s, -1, "dynamic", "alpha", "selected", plan.alpha, dyn, base).flags =
            cfg.oracle_classifier ? "oracle" : "";
    }
}

void rank_ablation(const ExperimentConfig& cfg, Workbench& wb, RowSink& sink, nlohmann::json& details) {
    const std::int64_t s = resolve_train_period(cfg, wb);
    const Model& m = wb.period_model(s);
    const SiteSet sites = resolve_sites(cfg);
    const PeriodVectors pv = vectors_from(cfg, wb, m, s, sites);
    const double alpha = alpha_for_source(cfg, m, s, pv);
    details["alpha"] = alpha;
    const CapturePool sc = capture_pool(m, pv.val.at(s), sites);
    const std::uint64_t hash = m.fingerprint();
    std::set<std::size_t> warned;
    for (const auto& [t, full] : pv.sets) {
        if (t == s) continue;
        const Slice& eval = pv.test.at(t);
        const Slice& target = cfg.target_pool_is_test ? eval : pv.val.at(t);
        const CapturePool tc = capture_pool(m, target, sites);
        const double base = accuracy(m, eval);
        sink.add(s, t, "baseline", "k", "0", 0.0, base, base);
        sink.add(s, t, "tardis", "k", "full", alpha, accuracy(m, eval, apply(full, alpha)), base);
        const std::size_t kmax = std::min({m.config().d_model, pv.val.at(s).size(), target.size()});
        std::set<std::size_t> done;
        for (std::size_t k : cfg.ranks) {
            const std::size_t kk = std::min(k, kmax);
            if (!done.insert(kk).second) continue;
            if (kk < k && warned.insert(k).second)
                details["warnings"].push_back("rank " + std::to_string(k) + " clamped to " + std::to_string(kk));
            const SteeringVectorSet v = extract_lowrank_from_captures(sc, tc, kk, {s, t, hash});
            sink.add(s, t, "tardis", "k", std::to_string(kk), alpha, accuracy(m, eval, apply(v, alpha)), base).flags =
                kk < k ? "clamped" : "";
        }
    }
}

void site_ablation(const ExperimentConfig& cfg, Workbench& wb, RowSink& sink, nlohmann::json& details) {
    const std::int64_t s = resolve_train_period(cfg, wb);
    const Model& m = wb.period_model(s);
    std::vector<std::pair<std::string, SiteSet>> choices;
    for (const auto& site : all_sites(m.config())) choices.push_back({to_string(site), {site}});
    choices.push_back({"default", default_sites(m.config())});

    std::string best_site;
    double best_score = -1.0;
    std::size_t first_row = sink.rows.size();
    for (const auto& [name, sites] : choices) {
        const PeriodVectors pv = vectors_from(cfg, wb, m, s, sites);
        std::vector<AlphaCandidate> cands;
        for (const auto& [t, set] : pv.sets)
            if (t != s) cands.push_back({&set, &pv.val.at(t)});
        const double alpha = select_alpha(m, cands, cfg.alpha_grid);
        double score = 0.0;
        for (const auto& c : cands) score += accuracy(m, *c.pool, apply(*c.vectors, alpha));
        details["alpha"][name] = alpha;
        // Sites are enumerated shallow to deep, so >= keeps the deepest on ties.
        if (name != "default" && score >= best_score) {
            best_score = score;
            best_site = name;
        }
        for (const auto& [t, set] : pv.sets) {
            if (t == s) continue;
            const double base = accuracy(m, pv.test.at(t));
            if (name == choices.front().first) sink.add(s, t, "baseline", "site", "none", 0.0, base, base);
            sink.add(s, t, "tardis", "site", name, alpha, accuracy(m, pv.test.at(t), apply(set, alpha)), base);
        }
    }
    details["best_site"] = best_site;
    for (std::size_t i = first_row; i < sink.rows.size(); ++i)
        if (sink.rows[i].value == best_site) sink.rows[i].flags = "best_site";
}

void size_ablation(const ExperimentConfig& cfg, Workbench& wb, RowSink& sink, nlohmann::json& details) {
    const auto periods = wb.periods();
    if (periods.size() < 2) throw ArgumentError("data-size ablation needs at least two periods");
    const std::int64_t s = resolve_train_period(cfg, wb);
    const std::int64_t t = s == periods.back() ? periods.front() : periods.back();
    const Model& m = wb.period_model(s);
    const SiteSet sites = resolve_sites(cfg);
    const TemporalCorpus& c = wb.corpus();
    const Slice src = c.slice(s, SplitKind::val);
    const Slice eval = c.slice(t, SplitKind::test);
    const Slice tgt = cfg.target_pool_is_test ? eval : c.slice(t, SplitKind::val);
    const Slice tval = c.slice(t, SplitKind::val);
    const std::uint64_t hash = m.fingerprint();
    const SteeringVectorSet full = extract(m, src, tgt, sites);
    const double alpha = select_alpha(m, {{&full, &tval}}, cfg.alpha_grid);
    details["alpha"] = alpha;
    details["eval_period"] = t;
    const double base = accuracy(m, eval);
    sink.add(s, t, "baseline", "n", "0", 0.0, base, base);

    auto subsample = [](const Slice& pool, std::size_t n, std::uint64_t seed) {
        std::vector<std::size_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng rng(seed);
        rng.shuffle(idx);
        idx.resize(n);
        std::sort(idx.begin(), idx.end());
        Slice out;
        for (std::size_t i : idx) out.push_back(pool[i]);
        return out;
    };
    for (std::size_t size : cfg.data_sizes) {
        const std::size_t cap = std::min(src.size(), tgt.size());
        const bool is_full = size == 0;
        const std::size_t n = is_full ? 0 : std::min(size, cap);
        const std::string value = is_full ? "full" : std::to_string(n);
        for (std::size_t rep = 0; rep < cfg.data_size_repeats; ++rep) {
            SteeringVectorSet v = full;
            if (!is_full) {
                const std::uint64_t rs = derive_seed(wb.seed(), "size:" + value + ":" + std::to_string(rep));
                v = extract_from_captures(capture_pool(m, subsample(src, n, derive_seed(rs, "source")), sites),
                                          capture_pool(m, subsample(tgt, n, derive_seed(rs, "target")), sites),
                                          {s, t, hash});
            }
            ReportRow& r = sink.add(s, t, "tardis", "n", value, alpha, accuracy(m, eval, apply(v, alpha)), base);
            r.replicate = rep;
            if (!is_full && n < size) r.flags = "clamped";
        }
    }
}

} // namespace

ExperimentReport run_misalignment_matrix(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    return run_seeds(cfg, cache, "misalignment", misalignment);
}
ExperimentReport run_label_shift_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    return run_seeds(cfg, cache, "label_shift", label_shift);
}
ExperimentReport run_vocab_shift_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    return run_seeds(cfg, cache, "vocab_shift", vocab_shift);
}
ExperimentReport run_timeline_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    return run_seeds(cfg, cache, "timeline_" + to_string(cfg.timeline_direction), timeline);
}
ExperimentReport run_dynamic_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    return run_seeds(cfg, cache, "dynamic", dynamic);
}
ExperimentReport ablate_rank(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    return run_seeds(cfg, cache, "ablate_rank", rank_ablation);
}
ExperimentReport ablate_sites(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    return run_seeds(cfg, cache, "ablate_site", site_ablation);
}
ExperimentReport ablate_data_size(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    return run_seeds(cfg, cache, "ablate_size", size_ablation);
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache) {
    const std::string& e = cfg.experiment;
    if (e == "misalignment") return run_misalignment_matrix(cfg, cache);
    if (e == "label_shift") return run_label_shift_experiment(cfg, cache);
    if (e == "vocab_shift") return run_vocab_shift_experiment(cfg, cache);
    if (e == "timeline" || e == "timeline_forward" || e == "timeline_backward") {
        ExperimentConfig c = cfg;
        if (e == "timeline_forward") c.timeline_direction = TimelineDirection::forward;
        if (e == "timeline_backward") c.timeline_direction = TimelineDirection::backward;
        return run_timeline_experiment(c, cache);
    }
    if (e == "dynamic") return run_dynamic_experiment(cfg, cache);
    if (e == "ablate_rank") return ablate_rank(cfg, cache);
    if (e == "ablate_site") return ablate_sites(cfg, cache);
    if (e == "ablate_size") return ablate_data_size(cfg, cache);
    throw ArgumentError("unknown experiment '" + e + "'");
}

} // namespace tardis
