#include <boost/math/distributions/binomial.hpp>

#include "support.hpp"
#include "tardis/checkpoint.hpp"
#include "tardis/dynamic.hpp"
#include "tardis/errors.hpp"
#include "tardis/steering.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace tardis;

namespace {

struct Bench {
    Model model = support::random_model(support::toy_config(21));
    SiteSet sites = default_sites(model.config());
    Slice source = support::random_slice(20, 1, 0);
    std::vector<Slice> targets = {support::random_slice(20, 2, 1), support::random_slice(20, 3, 2),
                                  support::random_slice(20, 4, 3)};
    Slice eval = support::random_slice(6, 5, 0);

    DynamicSteeringPlan plan(double alpha) const {
        DynamicSteeringPlan p;
        p.alpha = alpha;
        for (const auto& t : targets) p.sets.push_back(extract(model, source, t, sites));
        return p;
    }
};

Matrix repeated(std::span<const double> probs, std::size_t rows) {
    Matrix m(rows, probs.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < probs.size(); ++c) m(r, c) = probs[c];
    return m;
}

TemporalCorpus classifier_corpus(double intensity) {
    DriftBenchOptions o;
    o.priors = PriorSchedule::fixed;
    o.vocab_drift_intensity = intensity;
    o.seed = 4;
    return generate(make_drift_bench(o), 400, {0.4, 0.3, 0.3});
}

ClassifierConfig small_classifier() {
    ClassifierConfig c;
    c.model.n_layers = 2;
    c.train.epochs = 8;
    c.train.learning_rate = 2e-3;
    c.train.seed = 9;
    return c;
}

} // namespace

TEST(DynamicSteer, OneHotEqualsStatic) {
    const Bench s;
    const auto plan = s.plan(2.0);
    for (std::size_t i = 0; i < 3; ++i) {
        std::vector<double> p(3, 0.0);
        p[i] = 1.0;
        const Matrix dyn = dynamic_steer(s.model, s.eval, plan, repeated(p, s.eval.size()));
        const Matrix stat = forward_with_intervention(s.model, make_batch(s.eval), apply(plan.sets[i], 2.0)).logits;
        EXPECT_EQ(dyn, stat) << "period index " << i;
    }
}

TEST(DynamicSteer, EqualVectorsIgnoreProbabilities) {
    const Bench s;
    DynamicSteeringPlan plan = s.plan(1.5);
    plan.sets = {plan.sets[0], plan.sets[0], plan.sets[0]};
    const std::vector<double> a = {0.5, 0.25, 0.25};
    const std::vector<double> b = {0.125, 0.375, 0.5};
    const Matrix x = dynamic_steer(s.model, s.eval, plan, repeated(a, s.eval.size()));
    const Matrix y = dynamic_steer(s.model, s.eval, plan, repeated(b, s.eval.size()));
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) EXPECT_NEAR(x(r, c), y(r, c), 1e-12);
}

TEST(DynamicSteer, AlphaZeroIsUnsteered) {
    const Bench s;
    const std::vector<double> p = {0.2, 0.3, 0.5};
    EXPECT_EQ(dynamic_steer(s.model, s.eval, s.plan(0.0), repeated(p, s.eval.size())),
              forward_with_capture(s.model, make_batch(s.eval), {}).logits);
}

TEST(EffectiveVectors, LinearInProbabilities) {
    const Bench s;
    const auto plan = s.plan(1.0);
    const std::vector<double> p = {0.7, 0.1, 0.2};
    const std::vector<double> q = {0.1, 0.6, 0.3};
    std::vector<double> mix(3);
    for (std::size_t i = 0; i < 3; ++i) mix[i] = 0.25 * p[i] + 0.75 * q[i];
    const auto ep = effective_vectors(plan, p);
    const auto eq = effective_vectors(plan, q);
    const auto em = effective_vectors(plan, mix);
    for (const auto& site : s.sites) {
        const Vector expected = 0.25 * ep.at(site) + 0.75 * eq.at(site);
        for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(em.at(site)[k], expected[k], 1e-12);
    }
    EXPECT_THROW(effective_vectors(plan, std::vector<double>{0.5, 0.5}), ArgumentError);
}

TEST(DynamicSteer, SingleExampleMatchesBatchRow) {
    const Bench s;
    const auto plan = s.plan(3.0);
    Matrix probs(s.eval.size(), 3);
    Rng rng(7);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 3; ++c) sum += probs(r, c) = rng.uniform(0.1, 1.0);
        for (std::size_t c = 0; c < 3; ++c) probs(r, c) /= sum;
    }
    const Matrix batch = dynamic_steer(s.model, s.eval, plan, probs);
    for (std::size_t r = 0; r < s.eval.size(); ++r) {
        const Vector one = dynamic_steer(s.model, s.eval[r], plan, probs.row(r));
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(one[c], batch(r, c), 1e-12);
    }
}

TEST(DynamicSteer, ProbabilityShapeChecked) {
    const Bench s;
    EXPECT_THROW(dynamic_steer(s.model, s.eval, s.plan(1.0), Matrix(s.eval.size(), 2)), ArgumentError);
    EXPECT_THROW(dynamic_steer(s.model, s.eval, s.plan(1.0), Matrix(1, 3)), ArgumentError);
}

TEST(Plan, ValidationErrors) {
    const Bench s;
    DynamicSteeringPlan empty;
    EXPECT_THROW(empty.validate(), ArgumentError);
    auto plan = s.plan(1.0);
    EXPECT_NO_THROW(plan.validate());
    auto foreign = plan;
    foreign.sets[1].model_hash ^= 1;
    EXPECT_THROW(foreign.validate(), ArgumentError);
    auto other_source = plan;
    other_source.sets[2].source_period = 7;
    EXPECT_THROW(other_source.validate(), ArgumentError);
    auto other_sites = plan;
    other_sites.sets[0] = extract(s.model, s.source, s.targets[0], {HookSite{0, Sublayer::ffn_out}});
    EXPECT_THROW(other_sites.validate(), ArgumentError);
}

TEST(BinomialTail, MatchesBoost) {
    for (std::size_t n : {1u, 10u, 57u, 600u})
        for (double p : {0.2, 0.5, 0.9})
            for (std::size_t k = 0; k <= n; k += std::max<std::size_t>(1, n / 13)) {
                const boost::math::binomial_distribution<double> dist(static_cast<double>(n), p);
                const double expected = k == 0 ? 1.0 : boost::math::cdf(boost::math::complement(dist, static_cast<double>(k - 1)));
                const double got = binomial_upper_tail(n, k, p);
                EXPECT_NEAR(got, expected, 1e-10 + 1e-8 * expected) << "n=" << n << " k=" << k << " p=" << p;
            }
    EXPECT_EQ(binomial_upper_tail(5, 6, 0.5), 0.0);
}

TEST(PeriodClassifier, OracleProbabilitiesAreOneHot) {
    const TemporalCorpus corpus = classifier_corpus(0.8);
    PeriodClassifier clf{init_model(support::toy_config()), corpus.periods(), 0, 0, {}};
    const Slice test = corpus.combined(SplitKind::test);
    const Matrix p = oracle_period_probs(clf, test);
    for (std::size_t r = 0; r < test.size(); ++r)
        for (std::size_t c = 0; c < clf.periods.size(); ++c)
            EXPECT_EQ(p(r, c), clf.periods[c] == test[r].period ? 1.0 : 0.0);
}

TEST(PeriodClassifier, NeedsTwoPeriods) {
    TemporalCorpus corpus = classifier_corpus(0.8);
    const auto keep = corpus.splits.begin()->first;
    std::erase_if(corpus.splits, [&](const auto& kv) { return kv.first != keep; });
    EXPECT_THROW(train_period_classifier(corpus, small_classifier()), ArgumentError);
}

TEST(PeriodClassifier, DetectsDriftAndCheckpointRoundTrips) {
    // Pilot at this size: held-out accuracy well above 0.2 with a vanishing
    // p-value; the frozen check is significance at 0.05.
    const TemporalCorpus corpus = classifier_corpus(0.8);
    const PeriodClassifier clf = train_period_classifier(corpus, small_classifier());
    EXPECT_EQ(clf.periods.size(), 5u);
    EXPECT_GT(clf.heldout_total, 0u);
    EXPECT_TRUE(clf.beats_chance());

    const Slice test = corpus.combined(SplitKind::test);
    const Matrix probs = predict_period_probs(clf, test);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        double sum = 0.0;
        for (double x : probs.row(r)) sum += x;
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    TemporalExample dup = test[0];
    const Vector single = predict_period_probs(clf, dup);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(single[c], probs(0, c), 1e-12);

    const PeriodClassifier back = PeriodClassifier::from_checkpoint(decode_checkpoint(encode_checkpoint(clf.to_checkpoint())));
    EXPECT_TRUE(back.model == clf.model);
    EXPECT_EQ(back.periods, clf.periods);
    EXPECT_EQ(back.heldout_total, clf.heldout_total);
    EXPECT_EQ(back.heldout_correct, clf.heldout_correct);
}

TEST(PeriodClassifier, NoDriftStaysNearChance) {
    const PeriodClassifier clf = train_period_classifier(classifier_corpus(0.0), small_classifier());
    EXPECT_FALSE(clf.beats_chance(0.001)) << "held-out accuracy " << clf.heldout_accuracy();
}
