#include "tardis/corpus.hpp"

#include "tardis/binary_io.hpp"
#include "tardis/errors.hpp"
#include "tardis/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace tardis {

namespace {

void check_simplex(std::span<const double> p, std::size_t expected, const std::string& what) {
    if (p.size() != expected) {
        std::ostringstream os;
        os << what << ": expected " << expected << " entries, got " << p.size();
        throw ArgumentError(os.str());
    }
    double total = 0.0;
    for (double x : p) {
        if (!std::isfinite(x) || x < 0.0) throw ArgumentError(what + ": entries must be finite and non-negative");
        total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        std::ostringstream os;
        os.precision(17);
        os << what << ": sums to " << total << ", not 1";
        throw ArgumentError(os.str());
    }
}

std::vector<double> normalized(std::vector<double> w) {
    double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x : w) x /= total;
    return w;
}

std::string schedule_name(DriftSchedule s) { return s == DriftSchedule::linear ? "linear" : "quadratic"; }

DriftSchedule parse_schedule(const std::string& s) {
    if (s == "linear") return DriftSchedule::linear;
    if (s == "quadratic") return DriftSchedule::quadratic;
    throw ArgumentError("unknown drift schedule '" + s + "'");
}

} // namespace

double DriftSpec::drift_weight(std::size_t period) const {
    if (n_periods <= 1) return 0.0;
    const double x = static_cast<double>(period) / static_cast<double>(n_periods - 1);
    return vocab_drift_intensity * (schedule == DriftSchedule::linear ? x : x * x);
}

void DriftSpec::validate() const {
    if (n_periods < 1 || n_classes < 1 || vocab_size < 1 || seq_len < 1)
        throw ArgumentError("DriftSpec: counts must be >= 1");
    if (min_seq_len < 1 || min_seq_len > seq_len) throw ArgumentError("DriftSpec: need 1 <= min_seq_len <= seq_len");
    if (!(vocab_drift_intensity >= 0.0 && vocab_drift_intensity <= 1.0))
        throw ArgumentError("DriftSpec: vocab_drift_intensity must lie in [0, 1]");
    if (label_priors.size() != n_periods) throw ArgumentError("DriftSpec: need one label prior per period");
    for (std::size_t t = 0; t < n_periods; ++t)
        check_simplex(label_priors[t], n_classes, "DriftSpec.label_priors[" + std::to_string(t) + "]");
    if (base_token_dists.size() != n_classes) throw ArgumentError("DriftSpec: need one base token distribution per class");
    for (std::size_t c = 0; c < n_classes; ++c)
        check_simplex(base_token_dists[c], vocab_size, "DriftSpec.base_token_dists[" + std::to_string(c) + "]");
    if (drift_token_dists.size() != n_periods) throw ArgumentError("DriftSpec: need drift token distributions per period");
    for (std::size_t t = 0; t < n_periods; ++t) {
        if (drift_token_dists[t].size() != n_classes)
            throw ArgumentError("DriftSpec: need one drift token distribution per class in period " + std::to_string(t));
        for (std::size_t c = 0; c < n_classes; ++c)
            check_simplex(drift_token_dists[t][c], vocab_size,
                          "DriftSpec.drift_token_dists[" + std::to_string(t) + "][" + std::to_string(c) + "]");
    }
}

void to_json(nlohmann::json& j, const DriftSpec& s) {
    j = nlohmann::json{{"n_periods", s.n_periods},
                       {"n_classes", s.n_classes},
                       {"vocab_size", s.vocab_size},
                       {"seq_len", s.seq_len},
                       {"min_seq_len", s.min_seq_len},
                       {"label_priors", s.label_priors},
                       {"vocab_drift_intensity", s.vocab_drift_intensity},
                       {"base_token_dists", s.base_token_dists},
                       {"drift_token_dists", s.drift_token_dists},
                       {"schedule", schedule_name(s.schedule)},
                       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DriftSpec& s) {
    s.n_periods = j.at("n_periods").get<std::size_t>();
    s.n_classes = j.at("n_classes").get<std::size_t>();
    s.vocab_size = j.at("vocab_size").get<std::size_t>();
    s.seq_len = j.at("seq_len").get<std::size_t>();
    s.min_seq_len = j.value("min_seq_len", s.seq_len);
    s.label_priors = j.at("label_priors").get<std::vector<std::vector<double>>>();
    s.vocab_drift_intensity = j.at("vocab_drift_intensity").get<double>();
    s.base_token_dists = j.at("base_token_dists").get<std::vector<std::vector<double>>>();
    s.drift_token_dists = j.at("drift_token_dists").get<std::vector<std::vector<std::vector<double>>>>();
    s.schedule = parse_schedule(j.value("schedule", std::string("linear")));
    s.seed = j.value("seed", std::uint64_t{0});
}

void to_json(nlohmann::json& j, const DriftBenchOptions& o) {
    j = nlohmann::json{{"n_periods", o.n_periods},
                       {"n_classes", o.n_classes},
                       {"vocab_size", o.vocab_size},
                       {"seq_len", o.seq_len},
                       {"min_seq_len", o.min_seq_len},
                       {"vocab_drift_intensity", o.vocab_drift_intensity},
                       {"priors", o.priors == PriorSchedule::fixed ? "fixed" : "skewing"},
                       {"class_signal", o.class_signal},
                       {"drift_class_share", o.drift_class_share},
                       {"drift_bias", o.drift_bias},
                       {"trend_class", o.trend_class},
                       {"schedule", schedule_name(o.schedule)},
                       {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, DriftBenchOptions& o) {
    DriftBenchOptions d;
    o.n_periods = j.value("n_periods", d.n_periods);
    o.n_classes = j.value("n_classes", d.n_classes);
    o.vocab_size = j.value("vocab_size", d.vocab_size);
    o.seq_len = j.value("seq_len", d.seq_len);
    o.min_seq_len = j.value("min_seq_len", d.min_seq_len);
    o.vocab_drift_intensity = j.value("vocab_drift_intensity", d.vocab_drift_intensity);
    const std::string priors = j.value("priors", std::string("skewing"));
    if (priors == "fixed") {
        o.priors = PriorSchedule::fixed;
    } else if (priors == "skewing") {
        o.priors = PriorSchedule::skewing;
    } else {
        throw ArgumentError("unknown prior schedule '" + priors + "'");
    }
    o.class_signal = j.value("class_signal", d.class_signal);
    o.drift_class_share = j.value("drift_class_share", d.drift_class_share);
    o.drift_bias = j.value("drift_bias", d.drift_bias);
    o.trend_class = j.value("trend_class", d.trend_class);
    o.schedule = parse_schedule(j.value("schedule", schedule_name(d.schedule)));
    o.seed = j.value("seed", d.seed);
}

DriftSpec make_drift_bench(const DriftBenchOptions& o) {
    const std::size_t C = o.n_classes;
    const std::size_t V = o.vocab_size;
    const std::size_t background = V * 2 / 5;
    const std::size_t class_block = C == 0 ? 0 : (V * 3 / 10) / C;
    const std::size_t drift_begin = background + class_block * C;
    const std::size_t drift_total = V - drift_begin;
    const std::size_t drift_class_block = C == 0 ? 0 : (drift_total / 2) / C;
    const std::size_t drift_shared = drift_total - drift_class_block * C;
    if (C < 1 || o.n_periods < 1 || class_block < 1 || drift_class_block < 1 || drift_shared < 1 || background < 1)
        throw ArgumentError("make_drift_bench: vocab_size too small for the requested number of classes");
    if (!(o.class_signal > 0.0 && o.class_signal < 1.0) || !(o.drift_class_share >= 0.0 && o.drift_class_share <= 1.0) ||
        !(o.drift_bias >= 0.0 && o.drift_bias <= 1.0))
        throw ArgumentError("make_drift_bench: class_signal must be in (0, 1), drift_class_share and drift_bias in [0, 1]");
    if (o.trend_class >= C) throw ArgumentError("make_drift_bench: trend_class out of range");

    DriftSpec s;
    s.n_periods = o.n_periods;
    s.n_classes = C;
    s.vocab_size = V;
    s.seq_len = o.seq_len;
    s.min_seq_len = o.min_seq_len;
    s.vocab_drift_intensity = o.vocab_drift_intensity;
    s.schedule = o.schedule;
    s.seed = o.seed;

    // Priors: fixed = uniform; skewing = linear path from weights (C, C-1, ..., 1)
    // to the reversed weights.
    std::vector<double> start(C), end(C);
    for (std::size_t c = 0; c < C; ++c) {
        start[c] = static_cast<double>(C - c);
        end[c] = static_cast<double>(c + 1);
    }
    start = normalized(start);
    end = normalized(end);
    for (std::size_t t = 0; t < o.n_periods; ++t) {
        std::vector<double> p(C, 1.0 / static_cast<double>(C));
        if (o.priors == PriorSchedule::skewing && o.n_periods > 1) {
            const double x = static_cast<double>(t) / static_cast<double>(o.n_periods - 1);
            for (std::size_t c = 0; c < C; ++c) p[c] = (1.0 - x) * start[c] + x * end[c];
            p = normalized(p);
        }
        s.label_priors.push_back(p);
    }

    // Token weights inside each block are mildly uneven (seeded) so the
    // distributions are not perfectly symmetric across classes.
    Rng rng(derive_seed(o.seed, "drift-bench-tokens"));
    auto block = [&](std::size_t begin, std::size_t size) {
        std::vector<double> w(size);
        for (double& x : w) x = 0.5 + rng.uniform();
        w = normalized(w);
        std::vector<double> dist(V, 0.0);
        for (std::size_t i = 0; i < size; ++i) dist[begin + i] = w[i];
        return dist;
    };
    auto mix = [&](std::vector<std::pair<double, const std::vector<double>*>> parts) {
        std::vector<double> dist(V, 0.0);
        for (const auto& [mass, part] : parts)
            for (std::size_t i = 0; i < V; ++i) dist[i] += mass * (*part)[i];
        return normalized(dist);
    };
    const auto bg = block(0, background);
    const auto shared_new = block(drift_begin, drift_shared);
    std::vector<std::vector<double>> signal, own_new;
    for (std::size_t c = 0; c < C; ++c) signal.push_back(block(background + c * class_block, class_block));
    for (std::size_t c = 0; c < C; ++c)
        own_new.push_back(block(drift_begin + drift_shared + c * drift_class_block, drift_class_block));

    const double q = o.class_signal;
    const double b = o.drift_bias;
    const double share = o.drift_class_share;
    std::vector<std::vector<double>> drift(C);
    for (std::size_t c = 0; c < C; ++c) {
        s.base_token_dists.push_back(mix({{1.0 - q, &bg}, {q, &signal[c]}}));
        drift[c] = mix({{q, &signal[c]},
                        {(1.0 - q) * b, &signal[o.trend_class]},
                        {(1.0 - q) * (1.0 - b) * (1.0 - share), &shared_new},
                        {(1.0 - q) * (1.0 - b) * share, &own_new[c]}});
    }
    s.drift_token_dists.assign(o.n_periods, drift);
    s.validate();
    return s;
}

std::string to_string(SplitKind kind) {
    switch (kind) {
    case SplitKind::train: return "train";
    case SplitKind::val: return "val";
    case SplitKind::test: return "test";
    }
    return "?";
}

const std::vector<std::size_t>& PeriodSplit::get(SplitKind kind) const {
    switch (kind) {
    case SplitKind::train: return train;
    case SplitKind::val: return val;
    case SplitKind::test: return test;
    }
    return test;
}

std::vector<std::int64_t> TemporalCorpus::periods() const {
    std::vector<std::int64_t> out;
    for (const auto& [p, _] : splits) out.push_back(p);
    return out;
}

Slice TemporalCorpus::slice(std::int64_t period, SplitKind kind) const {
    auto it = splits.find(period);
    if (it == splits.end()) throw ArgumentError("corpus has no period " + std::to_string(period));
    Slice out;
    for (std::size_t i : it->second.get(kind)) out.push_back(examples.at(i));
    return out;
}

Slice TemporalCorpus::combined(SplitKind kind) const {
    Slice out;
    for (const auto& [p, split] : splits)
        for (std::size_t i : split.get(kind)) out.push_back(examples.at(i));
    return out;
}

namespace {

void validate_fractions(const SplitFractions& f) {
    if (f.train < 0.0 || f.val < 0.0 || f.test < 0.0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
        throw ArgumentError("split fractions must be non-negative and sum to 1");
}

PeriodSplit split_indices(std::vector<std::size_t> idx, const SplitFractions& f, Rng& rng) {
    rng.shuffle(idx);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(n * f.train));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(n * f.val)));
    PeriodSplit s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

} // namespace

TemporalCorpus generate(const DriftSpec& spec, std::size_t n_per_period, SplitFractions fractions) {
    spec.validate();
    validate_fractions(fractions);
    if (n_per_period < 10) throw ArgumentError("generate: n_per_period must be >= 10");

    TemporalCorpus corpus;
    corpus.n_classes = spec.n_classes;
    corpus.vocab_size = spec.vocab_size;
    corpus.provenance = {{"source", "generate"},
                         {"n_per_period", n_per_period},
                         {"split_fractions", {fractions.train, fractions.val, fractions.test}},
                         {"drift_spec", spec}};
    corpus.provenance["drift_spec_hash"] = fnv1a64(nlohmann::json(spec).dump());

    Rng rng(derive_seed(spec.seed, "generate"));
    Rng split_rng(derive_seed(spec.seed, "generate-splits"));
    for (std::size_t t = 0; t < spec.n_periods; ++t) {
        const double w = spec.drift_weight(t);
        std::vector<std::vector<double>> mix(spec.n_classes, std::vector<double>(spec.vocab_size));
        for (std::size_t c = 0; c < spec.n_classes; ++c)
            for (std::size_t v = 0; v < spec.vocab_size; ++v)
                mix[c][v] = (1.0 - w) * spec.base_token_dists[c][v] + w * spec.drift_token_dists[t][c][v];

        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < n_per_period; ++i) {
            TemporalExample ex;
            ex.period = static_cast<std::int64_t>(t);
            ex.label = static_cast<std::int32_t>(rng.categorical(spec.label_priors[t]));
            const std::size_t len = spec.min_seq_len + rng.uniform_index(spec.seq_len - spec.min_seq_len + 1);
            ex.token_ids.resize(len);
            for (auto& tok : ex.token_ids) tok = static_cast<std::int32_t>(rng.categorical(mix[static_cast<std::size_t>(ex.label)]));
            idx.push_back(corpus.examples.size());
            corpus.examples.push_back(std::move(ex));
        }
        corpus.splits[static_cast<std::int64_t>(t)] = split_indices(std::move(idx), fractions, split_rng);
    }
    return corpus;
}

namespace {

[[noreturn]] void line_error(const std::filesystem::path& path, std::size_t line, const std::string& msg) {
    std::ostringstream os;
    os << path.string() << ":" << line << ": " << msg;
    throw DataError(os.str());
}

std::vector<std::int32_t> hash_text(const std::string& text, std::size_t vocab_size, std::size_t max_len) {
    std::vector<std::int32_t> out;
    std::istringstream in(text);
    std::string word;
    while (in >> word && out.size() < max_len) out.push_back(static_cast<std::int32_t>(fnv1a64(word) % vocab_size));
    return out;
}

} // namespace

TemporalCorpus load_jsonl(const std::filesystem::path& path, const JsonlOptions& options) {
    validate_fractions(options.fractions);
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");

    TemporalCorpus corpus;
    corpus.vocab_size = options.vocab_size;
    corpus.n_classes = options.n_classes;
    nlohmann::json meta;
    std::filesystem::path meta_path = path;
    meta_path += ".meta.json";
    if (std::filesystem::exists(meta_path)) {
        try {
            meta = nlohmann::json::parse(read_text_file(meta_path));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(meta_path.string() + ": " + e.what());
        }
        corpus.vocab_size = meta.value("vocab_size", corpus.vocab_size);
        corpus.n_classes = meta.value("n_classes", corpus.n_classes);
    }

    std::map<std::int64_t, std::vector<std::size_t>> unsplit;
    std::map<std::int64_t, PeriodSplit> pinned;
    std::string line;
    std::size_t lineno = 0;
    std::int32_t max_label = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            line_error(path, lineno, std::string("malformed JSON: ") + e.what());
        }
        if (!j.is_object()) line_error(path, lineno, "expected a JSON object");
        for (const char* field : {"label", "period"})
            if (!j.contains(field)) line_error(path, lineno, std::string("missing field \"") + field + "\"");
        if (!j.contains("tokens") && !j.contains("text")) line_error(path, lineno, "missing field \"tokens\" or \"text\"");

        TemporalExample ex;
        try {
            ex.label = j.at("label").get<std::int32_t>();
            ex.period = j.at("period").get<std::int64_t>();
            if (j.contains("tokens")) {
                ex.token_ids = j.at("tokens").get<std::vector<std::int32_t>>();
            } else {
                ex.token_ids = hash_text(j.at("text").get<std::string>(), corpus.vocab_size, options.max_seq_len);
            }
        } catch (const nlohmann::json::exception& e) {
            line_error(path, lineno, std::string("bad field type: ") + e.what());
        }
        if (ex.label < 0 || (corpus.n_classes > 0 && static_cast<std::size_t>(ex.label) >= corpus.n_classes))
            line_error(path, lineno, "label " + std::to_string(ex.label) + " out of range");
        if (ex.token_ids.empty()) line_error(path, lineno, "example has no tokens");
        if (ex.token_ids.size() > options.max_seq_len)
            line_error(path, lineno, "example longer than max_seq_len " + std::to_string(options.max_seq_len));
        for (auto tok : ex.token_ids)
            if (tok < 0 || static_cast<std::size_t>(tok) >= corpus.vocab_size)
                line_error(path, lineno, "token id " + std::to_string(tok) + " outside vocab");
        max_label = std::max(max_label, ex.label);

        const std::size_t index = corpus.examples.size();
        if (j.contains("split")) {
            const std::string split = j.at("split").get<std::string>();
            auto& ps = pinned[ex.period];
            if (split == "train") {
                ps.train.push_back(index);
            } else if (split == "val") {
                ps.val.push_back(index);
            } else if (split == "test") {
                ps.test.push_back(index);
            } else {
                line_error(path, lineno, "unknown split \"" + split + "\"");
            }
        } else {
            unsplit[ex.period].push_back(index);
        }
        corpus.examples.push_back(std::move(ex));
    }
    if (corpus.examples.empty()) throw DataError(path.string() + ": file contains no examples");
    if (corpus.n_classes == 0) corpus.n_classes = static_cast<std::size_t>(max_label) + 1;

    Rng rng(derive_seed(options.seed, "jsonl-splits"));
    for (auto& [period, idx] : unsplit) {
        if (pinned.contains(period)) {
            std::ostringstream os;
            os << path.string() << ": period " << period << " mixes lines with and without \"split\"";
            throw DataError(os.str());
        }
        corpus.splits[period] = split_indices(std::move(idx), options.fractions, rng);
    }
    for (auto& [period, ps] : pinned) corpus.splits[period] = std::move(ps);

    corpus.provenance = meta.contains("provenance") ? meta["provenance"] : nlohmann::json{{"source", path.string()}};
    return corpus;
}

void save_jsonl(const TemporalCorpus& corpus, const std::filesystem::path& path) {
    std::vector<std::string> split_of(corpus.examples.size());
    for (const auto& [period, s] : corpus.splits) {
        for (std::size_t i : s.train) split_of.at(i) = "train";
        for (std::size_t i : s.val) split_of.at(i) = "val";
        for (std::size_t i : s.test) split_of.at(i) = "test";
    }
    std::ostringstream os;
    for (std::size_t i = 0; i < corpus.examples.size(); ++i) {
        const auto& ex = corpus.examples[i];
        nlohmann::json j = {{"tokens", ex.token_ids}, {"label", ex.label}, {"period", ex.period}};
        if (!split_of[i].empty()) j["split"] = split_of[i];
        os << j.dump() << "\n";
    }
    write_text_file(path, os.str());
    nlohmann::json meta = {{"vocab_size", corpus.vocab_size}, {"n_classes", corpus.n_classes}, {"provenance", corpus.provenance}};
    std::filesystem::path meta_path = path;
    meta_path += ".meta.json";
    write_text_file(meta_path, meta.dump(2) + "\n");
}

std::vector<double> empirical_priors(std::span<const TemporalExample> slice, std::size_t n_classes) {
    std::vector<double> p(n_classes, 0.0);
    if (slice.empty()) return p;
    for (const auto& ex : slice) p.at(static_cast<std::size_t>(ex.label)) += 1.0;
    for (double& x : p) x /= static_cast<double>(slice.size());
    return p;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ArgumentError("total_variation: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
    return 0.5 * acc;
}

Slice resample_label_distribution(std::span<const TemporalExample> slice, std::span<const double> target_priors,
                                  std::uint64_t seed) {
    const std::size_t C = target_priors.size();
    check_simplex(target_priors, C, "resample_label_distribution: target priors");
    std::vector<std::vector<std::size_t>> by_class(C);
    for (std::size_t i = 0; i < slice.size(); ++i) {
        const auto y = static_cast<std::size_t>(slice[i].label);
        if (y >= C) throw ArgumentError("resample_label_distribution: label outside target prior support");
        by_class[y].push_back(i);
    }

    constexpr double kSlack = 1e-9;
    double capacity = INFINITY;  // largest total the per-class counts allow
    std::size_t minority = C;
    for (std::size_t c = 0; c < C; ++c) {
        if (target_priors[c] <= 0.0) continue;
        capacity = std::min(capacity, static_cast<double>(by_class[c].size()) / target_priors[c]);
        if (minority == C || target_priors[c] < target_priors[minority]) minority = c;
    }
    const auto minority_count = static_cast<std::size_t>(std::floor(target_priors[minority] * capacity + kSlack));
    if (minority_count == 0) {
        std::ostringstream os;
        os << "resample_label_distribution: target prior " << target_priors[minority] << " for class " << minority
           << " is not achievable by subsampling; the largest achievable total is " << capacity
           << " and the most extreme achievable share for that class is "
           << (slice.empty() ? 0.0 : 1.0 / std::max(1.0, capacity * (1.0 - target_priors[minority]) + 1.0));
        throw ArgumentError(os.str());
    }

    std::vector<std::size_t> counts(C, 0);
    for (std::size_t c = 0; c < C; ++c) {
        if (target_priors[c] <= 0.0) continue;
        const double want = static_cast<double>(minority_count) * target_priors[c] / target_priors[minority];
        counts[c] = std::min(by_class[c].size(), static_cast<std::size_t>(std::llround(want)));
    }

    Rng rng(derive_seed(seed, "resample"));
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < C; ++c) {
        auto pool = by_class[c];
        rng.shuffle(pool);
        keep.insert(keep.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(counts[c]));
    }
    std::sort(keep.begin(), keep.end());
    Slice out;
    out.reserve(keep.size());
    for (std::size_t i : keep) out.push_back(slice[i]);

    const double tol = 1.0 / std::sqrt(static_cast<double>(out.size()));
    const auto got = empirical_priors(out, C);
    for (std::size_t c = 0; c < C; ++c) {
        if (std::abs(got[c] - target_priors[c]) > tol + kSlack) {
            std::ostringstream os;
            os << "resample_label_distribution: class " << c << " share " << got[c] << " misses target " << target_priors[c]
               << " by more than 1/sqrt(n); the slice is too small for this target";
            throw ArgumentError(os.str());
        }
    }
    return out;
}

std::vector<LabelShiftStep> label_shift_series(std::span<const TemporalExample> slice, std::size_t n_classes,
                                               std::size_t steps, int fixed_class, std::uint64_t seed) {
    if (steps < 1) throw ArgumentError("label_shift_series: steps must be >= 1");
    if (slice.empty()) throw ArgumentError("label_shift_series: empty slice");
    const auto base = empirical_priors(slice, n_classes);
    std::vector<std::size_t> counts(n_classes, 0);
    for (const auto& ex : slice) ++counts.at(static_cast<std::size_t>(ex.label));
    std::size_t fixed = fixed_class < 0 ? static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin())
                                        : static_cast<std::size_t>(fixed_class);
    if (fixed >= n_classes) throw ArgumentError("label_shift_series: fixed class out of range");

    std::vector<LabelShiftStep> out;
    for (std::size_t i = 0; i < steps; ++i) {
        LabelShiftStep step;
        step.step = i;
        if (i == 0) {
            step.target_priors = base;
            step.slice.assign(slice.begin(), slice.end());
        } else {
            const double keep = 1.0 - static_cast<double>(i) / static_cast<double>(steps - 1);
            std::vector<double> target(n_classes);
            for (std::size_t c = 0; c < n_classes; ++c)
                target[c] = c == fixed ? std::floor(keep * static_cast<double>(counts[c])) : static_cast<double>(counts[c]);
            step.target_priors = normalized(target);
            step.slice = resample_label_distribution(slice, step.target_priors, derive_seed(seed, i));
        }
        step.shift_magnitude = total_variation(empirical_priors(step.slice, n_classes), base);
        out.push_back(std::move(step));
    }
    return out;
}

std::vector<VocabShiftStep> vocab_shift_series(const TemporalCorpus& corpus, std::int64_t base_period, SplitKind kind,
                                               std::uint64_t seed) {
    const auto base_priors = empirical_priors(corpus.slice(base_period, SplitKind::train), corpus.n_classes);
    std::vector<VocabShiftStep> out;
    for (auto period : corpus.periods()) {
        const Slice s = corpus.slice(period, kind);
        out.push_back({period, resample_label_distribution(s, base_priors, derive_seed(seed, static_cast<std::uint64_t>(period)))});
    }
    return out;
}

Batch make_batch(std::span<const TemporalExample> slice) {
    std::vector<std::vector<std::int32_t>> seqs;
    std::vector<std::int32_t> labels;
    seqs.reserve(slice.size());
    labels.reserve(slice.size());
    for (const auto& ex : slice) {
        seqs.push_back(ex.token_ids);
        labels.push_back(ex.label);
    }
    return Batch::from_sequences(seqs, labels);
}

} // namespace tardis
