#include "oracles.hpp"
#include "tardis/binary_io.hpp"
#include "tardis/corpus.hpp"
#include "tardis/errors.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace tardis;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& text) {
    const auto p = std::filesystem::temp_directory_path() / name;
    write_text_file(p, text);
    return p;
}

DriftSpec fixed_bench(double lambda, std::uint64_t seed = 1) {
    DriftBenchOptions o;
    o.priors = PriorSchedule::fixed;
    o.vocab_drift_intensity = lambda;
    o.seed = seed;
    return make_drift_bench(o);
}

std::vector<std::size_t> class_counts(const Slice& s, std::size_t n_classes) {
    std::vector<std::size_t> c(n_classes, 0);
    for (const auto& ex : s) ++c[static_cast<std::size_t>(ex.label)];
    return c;
}

Slice balanced(std::size_t per_class, std::size_t n_classes) {
    Slice s;
    for (std::size_t c = 0; c < n_classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i) s.push_back({{static_cast<std::int32_t>(i % 50 + 1)}, static_cast<std::int32_t>(c), 0});
    return s;
}

// Homogeneity chi-square p-value over token counts of two slices.
double token_homogeneity_p(const Slice& a, const Slice& b, std::size_t vocab) {
    std::vector<double> ca(vocab, 0), cb(vocab, 0);
    for (const auto& ex : a)
        for (auto t : ex.token_ids) ++ca[static_cast<std::size_t>(t)];
    for (const auto& ex : b)
        for (auto t : ex.token_ids) ++cb[static_cast<std::size_t>(t)];
    double na = 0, nb = 0;
    for (std::size_t v = 0; v < vocab; ++v) na += ca[v], nb += cb[v];
    double stat = 0;
    std::size_t used = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
        const double tot = ca[v] + cb[v];
        if (tot == 0) continue;
        ++used;
        const double ea = tot * na / (na + nb), eb = tot * nb / (na + nb);
        stat += (ca[v] - ea) * (ca[v] - ea) / ea + (cb[v] - eb) * (cb[v] - eb) / eb;
    }
    boost::math::chi_squared dist(static_cast<double>(used - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

} // namespace

TEST(DriftSpec, BenchIsValid) {
    for (auto priors : {PriorSchedule::fixed, PriorSchedule::skewing}) {
        DriftBenchOptions o;
        o.priors = priors;
        const DriftSpec s = make_drift_bench(o);
        EXPECT_NO_THROW(s.validate());
        EXPECT_EQ(s.n_periods, 5u);
        EXPECT_EQ(s.vocab_size, 200u);
        for (const auto& p : s.label_priors) {
            double sum = 0;
            for (double x : p) sum += x;
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(DriftSpec, ValidationErrors) {
    DriftSpec s = fixed_bench(0.5);
    s.vocab_drift_intensity = 1.5;
    EXPECT_THROW(s.validate(), ArgumentError);
    s = fixed_bench(0.5);
    s.label_priors[0][0] += 0.1;
    EXPECT_THROW(generate(s, 100), ArgumentError);
    s = fixed_bench(0.5);
    EXPECT_THROW(generate(s, 9), ArgumentError);
    EXPECT_THROW(generate(s, 100, {0.5, 0.5, 0.5}), ArgumentError);
}

TEST(DriftSpec, LinearDriftWeight) {
    const DriftSpec s = fixed_bench(0.8);
    EXPECT_EQ(s.drift_weight(0), 0.0);
    EXPECT_NEAR(s.drift_weight(2), 0.4, 1e-15);
    EXPECT_NEAR(s.drift_weight(4), 0.8, 1e-15);
    DriftSpec q = s;
    q.schedule = DriftSchedule::quadratic;
    EXPECT_NEAR(q.drift_weight(2), 0.2, 1e-15);
}

TEST(DriftSpec, JsonRoundTrip) {
    const DriftSpec s = fixed_bench(0.3, 7);
    const DriftSpec back = nlohmann::json(s).get<DriftSpec>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(s));
}

TEST(Generate, Deterministic) {
    const DriftSpec s = fixed_bench(0.8, 3);
    const TemporalCorpus a = generate(s, 200);
    const TemporalCorpus b = generate(s, 200);
    EXPECT_EQ(a.examples, b.examples);
    EXPECT_EQ(a.splits, b.splits);
    EXPECT_EQ(a.provenance, b.provenance);
    const TemporalCorpus c = generate(fixed_bench(0.8, 4), 200);
    EXPECT_NE(a.examples, c.examples);
}

TEST(Generate, SplitsDisjointAndComplete) {
    const TemporalCorpus c = generate(fixed_bench(0.8), 100);
    EXPECT_EQ(c.periods(), (std::vector<std::int64_t>{0, 1, 2, 3, 4}));
    std::set<std::size_t> seen;
    for (const auto& [p, sp] : c.splits) {
        EXPECT_EQ(sp.train.size() + sp.val.size() + sp.test.size(), 100u);
        EXPECT_EQ(sp.train.size(), 70u);
        for (auto kind : {SplitKind::train, SplitKind::val, SplitKind::test})
            for (auto i : sp.get(kind)) {
                EXPECT_TRUE(seen.insert(i).second);
                ASSERT_LT(i, c.examples.size());
                EXPECT_EQ(c.examples[i].period, p);
            }
    }
    EXPECT_EQ(seen.size(), c.examples.size());
    for (const auto& ex : c.examples) {
        EXPECT_GE(ex.token_ids.size(), 1u);
        EXPECT_LE(ex.token_ids.size(), 16u);
        EXPECT_LT(ex.label, 3);
    }
}

TEST(Generate, NoDriftMeansHomogeneousTokens) {
    const TemporalCorpus c = generate(fixed_bench(0.0, 5), 2000, {1.0, 0.0, 0.0});
    const double p = token_homogeneity_p(c.slice(0, SplitKind::train), c.slice(4, SplitKind::train), 200);
    EXPECT_GT(p, 0.01);
}

TEST(Generate, DriftIsDetectable) {
    const TemporalCorpus c = generate(fixed_bench(0.8, 5), 2000, {1.0, 0.0, 0.0});
    EXPECT_LT(token_homogeneity_p(c.slice(0, SplitKind::train), c.slice(4, SplitKind::train), 200), 1e-6);
}

TEST(Generate, RequestedPriorWithinBinomialBound) {
    DriftBenchOptions o;
    o.n_classes = 2;
    o.priors = PriorSchedule::fixed;
    DriftSpec s = make_drift_bench(o);
    for (auto& p : s.label_priors) p = {0.9, 0.1};
    const TemporalCorpus c = generate(s, 2000, {1.0, 0.0, 0.0});
    // 3 sigma of a binomial share at n = 2000, p = 0.9 is 0.020; the contract allows 0.03.
    const double bound = 3.0 * std::sqrt(0.9 * 0.1 / 2000.0);
    EXPECT_LT(bound, 0.03);
    for (auto period : c.periods()) {
        const auto pr = empirical_priors(c.slice(period, SplitKind::train), 2);
        EXPECT_NEAR(pr[0], 0.9, 0.03);
    }
}

TEST(Jsonl, SingleTokenLine) {
    const auto p = temp_file("tardis_one.jsonl", R"({"tokens":[1,2,3],"label":0,"period":2015})" "\n");
    JsonlOptions o;
    o.fractions = {1.0, 0.0, 0.0};
    const TemporalCorpus c = load_jsonl(p, o);
    ASSERT_EQ(c.examples.size(), 1u);
    EXPECT_EQ(c.examples[0].period, 2015);
    EXPECT_EQ(c.examples[0].token_ids, (std::vector<std::int32_t>{1, 2, 3}));
}

TEST(Jsonl, MissingLabelCitesLine) {
    const auto p = temp_file("tardis_bad.jsonl", R"({"tokens":[1],"label":0,"period":1})" "\n" R"({"tokens":[1],"period":1})" "\n");
    try {
        load_jsonl(p);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
}

TEST(Jsonl, ErrorCases) {
    EXPECT_THROW(load_jsonl(temp_file("tardis_empty.jsonl", "")), DataError);
    JsonlOptions o;
    o.n_classes = 2;
    EXPECT_THROW(load_jsonl(temp_file("tardis_lbl.jsonl", R"({"tokens":[1],"label":5,"period":1})" "\n"), o), DataError);
    EXPECT_THROW(load_jsonl(temp_file("tardis_syntax.jsonl", "{not json\n")), DataError);
    EXPECT_THROW(load_jsonl(std::filesystem::temp_directory_path() / "tardis_missing_file.jsonl"), DataError);
}

TEST(Jsonl, TwoPeriodsAndTextHashing) {
    std::string text;
    for (int i = 0; i < 20; ++i)
        text += R"({"text":"the quick brown fox","label":)" + std::to_string(i % 2) + R"(,"period":)" + (i < 10 ? "2015" : "2016") + "}\n";
    const TemporalCorpus c = load_jsonl(temp_file("tardis_text.jsonl", text));
    EXPECT_EQ(c.splits.size(), 2u);
    EXPECT_EQ(c.n_classes, 2u);
    EXPECT_EQ(c.examples[0].token_ids.size(), 4u);
    EXPECT_EQ(c.examples[0].token_ids[0], static_cast<std::int32_t>(fnv1a64("the") % 200));
}

TEST(Jsonl, SaveLoadRoundTrip) {
    const TemporalCorpus c = generate(fixed_bench(0.8, 2), 50);
    const auto p = std::filesystem::temp_directory_path() / "tardis_roundtrip.jsonl";
    save_jsonl(c, p);
    const TemporalCorpus back = load_jsonl(p);
    EXPECT_EQ(back.examples, c.examples);
    EXPECT_EQ(back.splits, c.splits);
    EXPECT_EQ(back.n_classes, c.n_classes);
    EXPECT_EQ(back.vocab_size, c.vocab_size);
    EXPECT_EQ(back.provenance, c.provenance);
}

TEST(Resample, DegeneratePrior) {
    const Slice s = balanced(500, 2);
    const std::vector<double> target = {1.0, 0.0};
    const Slice r = resample_label_distribution(s, target, 1);
    EXPECT_EQ(class_counts(r, 2), (std::vector<std::size_t>{500, 0}));
}

TEST(Resample, FloorOnMinorityMatchesExhaustiveCount) {
    const Slice s = balanced(500, 2);
    const std::vector<double> target = {0.75, 0.25};
    EXPECT_EQ(class_counts(resample_label_distribution(s, target, 1), 2), (std::vector<std::size_t>{498, 166}));
    EXPECT_EQ(oracle::resample_counts({500, 500}, target), (std::vector<std::size_t>{498, 166}));
}

TEST(Resample, RandomCasesMatchOracle) {
    Rng rng(17);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<std::size_t> have(3);
        for (auto& h : have) h = 40 + rng.uniform_index(200);
        std::vector<double> target(3);
        double sum = 0;
        for (auto& t : target) sum += (t = 0.1 + rng.uniform());
        for (auto& t : target) t /= sum;
        Slice s;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < have[c]; ++i) s.push_back({{1}, static_cast<std::int32_t>(c), 0});
        const Slice r = resample_label_distribution(s, target, trial);
        EXPECT_EQ(class_counts(r, 3), oracle::resample_counts(have, target)) << "trial " << trial;
        const auto got = empirical_priors(r, 3);
        for (std::size_t c = 0; c < 3; ++c) EXPECT_LE(std::abs(got[c] - target[c]), 1.0 / std::sqrt(static_cast<double>(r.size())));
    }
}

TEST(Resample, CurrentPriorsKeepAlmostEverything) {
    const Slice s = generate(fixed_bench(0.0, 3), 300).slice(0, SplitKind::train);
    const auto pr = empirical_priors(s, 3);
    const Slice r = resample_label_distribution(s, pr, 2);
    const auto before = class_counts(s, 3), after = class_counts(r, 3);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_LE(before[c] - after[c], 1u);
}

TEST(Resample, SubsetOfInput) {
    const Slice s = generate(fixed_bench(0.5, 4), 300).slice(1, SplitKind::train);
    const std::vector<double> target = {0.6, 0.3, 0.1};
    const Slice r = resample_label_distribution(s, target, 5);
    std::multiset<std::vector<std::int32_t>> pool;
    for (const auto& ex : s) pool.insert(ex.token_ids);
    for (const auto& ex : r) {
        auto it = pool.find(ex.token_ids);
        ASSERT_NE(it, pool.end());
        pool.erase(it);
    }
}

TEST(Resample, UnachievableTargetStatesLimit) {
    Slice s = balanced(3, 2);
    const std::vector<double> target = {0.999, 0.001};
    try {
        resample_label_distribution(s, target, 1);
        FAIL() << "expected ArgumentError";
    } catch (const ArgumentError& e) {
        EXPECT_NE(std::string(e.what()).find("achievable"), std::string::npos);
    }
}

TEST(LabelShiftSeries, SingleStepIsUnmodified) {
    const Slice s = generate(fixed_bench(0.0, 1), 200).slice(0, SplitKind::train);
    const auto series = label_shift_series(s, 3, 1, -1, 1);
    ASSERT_EQ(series.size(), 1u);
    EXPECT_EQ(series[0].slice, s);
    EXPECT_EQ(series[0].shift_magnitude, 0.0);
}

TEST(LabelShiftSeries, TotalVariationStrictlyIncreasing) {
    const Slice s = generate(fixed_bench(0.0, 1), 600).slice(0, SplitKind::train);
    const auto series = label_shift_series(s, 3, 5, -1, 2);
    ASSERT_EQ(series.size(), 5u);
    for (std::size_t i = 1; i < series.size(); ++i) {
        EXPECT_GT(series[i].shift_magnitude, series[i - 1].shift_magnitude);
        const auto pr = empirical_priors(series[i].slice, 3);
        EXPECT_NEAR(total_variation(pr, empirical_priors(s, 3)), series[i].shift_magnitude, 1e-12);
    }
    // The last step removes the fixed (majority) class entirely.
    const auto counts = class_counts(s, 3);
    const auto fixed = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    EXPECT_EQ(class_counts(series.back().slice, 3)[fixed], 0u);
}

TEST(VocabShiftSeries, PriorsAlignedAcrossPeriods) {
    DriftBenchOptions o;
    o.priors = PriorSchedule::skewing;
    o.vocab_drift_intensity = 0.8;
    const TemporalCorpus c = generate(make_drift_bench(o), 600);
    const auto series = vocab_shift_series(c, 0, SplitKind::train, 3);
    ASSERT_EQ(series.size(), 5u);
    const auto base = empirical_priors(c.slice(0, SplitKind::train), 3);
    for (const auto& step : series) {
        const auto pr = empirical_priors(step.slice, 3);
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(pr[k], base[k], 0.02) << "period " << step.period;
        for (const auto& ex : step.slice) EXPECT_EQ(ex.period, step.period);
    }
}

TEST(TotalVariation, HandCase) {
    const std::vector<double> p = {0.5, 0.5, 0.0}, q = {0.2, 0.3, 0.5};
    EXPECT_NEAR(total_variation(p, q), 0.5, 1e-15);
}
