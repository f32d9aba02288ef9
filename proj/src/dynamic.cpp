#include "tardis/dynamic.hpp"

#include "tardis/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tardis {

double PeriodClassifier::heldout_accuracy() const {
    return heldout_total == 0 ? 0.0 : static_cast<double>(heldout_correct) / static_cast<double>(heldout_total);
}

double PeriodClassifier::chance_p_value() const {
    if (periods.empty()) return 1.0;
    return binomial_upper_tail(heldout_total, heldout_correct, 1.0 / static_cast<double>(periods.size()));
}

ModelCheckpoint PeriodClassifier::to_checkpoint() const {
    ModelCheckpoint ck{model, {}};
    ck.metadata = {{"role", "period_classifier"},
                   {"periods", periods},
                   {"heldout_total", heldout_total},
                   {"heldout_correct", heldout_correct},
                   {"provenance", provenance}};
    return ck;
}

PeriodClassifier PeriodClassifier::from_checkpoint(const ModelCheckpoint& ck) {
    if (ck.metadata.value("role", std::string()) != "period_classifier")
        throw DataError("checkpoint is not a period classifier");
    PeriodClassifier c{ck.model, ck.metadata.at("periods").get<std::vector<std::int64_t>>(),
                       ck.metadata.value("heldout_total", std::size_t{0}),
                       ck.metadata.value("heldout_correct", std::size_t{0}),
                       ck.metadata.value("provenance", nlohmann::json::object())};
    if (c.periods.size() != ck.model.config().n_classes)
        throw DataError("period classifier mapping does not match its output size");
    return c;
}

void to_json(nlohmann::json& j, const ClassifierConfig& c) {
    j = nlohmann::json{{"model", c.model}, {"train", c.train}, {"train_fraction", c.train_fraction}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
    ClassifierConfig d;
    c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
    c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
    c.train_fraction = j.value("train_fraction", d.train_fraction);
}

PeriodClassifier train_period_classifier(const TemporalCorpus& corpus, const ClassifierConfig& config) {
    const auto periods = corpus.periods();
    if (periods.size() < 2) throw ArgumentError("train_period_classifier: need at least two periods");
    if (!(config.train_fraction > 0.0 && config.train_fraction < 1.0))
        throw ArgumentError("train_period_classifier: train_fraction must lie in (0, 1)");

    Slice pool;
    for (std::size_t i = 0; i < periods.size(); ++i)
        for (auto ex : corpus.slice(periods[i], SplitKind::val)) {
            ex.label = static_cast<std::int32_t>(i);
            pool.push_back(std::move(ex));
        }
    Rng rng(derive_seed(config.train.seed, "period-split"));
    rng.shuffle(pool);
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(pool.size()) * config.train_fraction));
    if (n_train == 0 || n_train == pool.size())
        throw ArgumentError("train_period_classifier: validation splits too small for a held-out split");
    const Slice fit(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
    const Slice heldout(pool.begin() + static_cast<std::ptrdiff_t>(n_train), pool.end());

    ModelConfig mc = config.model;
    mc.n_classes = periods.size();
    mc.vocab_size = corpus.vocab_size;
    const TrainResult trained = train(init_model(mc), fit, config.train);

    PeriodClassifier out{trained.checkpoint.model, periods, heldout.size(), 0, {}};
    const auto pred = predict(out.model, heldout);
    for (std::size_t i = 0; i < heldout.size(); ++i)
        out.heldout_correct += pred[i] == static_cast<std::size_t>(heldout[i].label);
    out.provenance = {{"source", "validation splits"},
                      {"n_fit", fit.size()},
                      {"n_heldout", heldout.size()},
                      {"config", config},
                      {"train_report", trained.report}};
    return out;
}

Matrix predict_period_probs(const PeriodClassifier& classifier, std::span<const TemporalExample> examples) {
    if (examples.empty()) return Matrix(0, classifier.periods.size());
    Matrix logits = forward_with_capture(classifier.model, make_batch(examples), {}).logits;
    for (std::size_t r = 0; r < logits.rows(); ++r) softmax_inplace(logits.row(r));
    return logits;
}

Vector predict_period_probs(const PeriodClassifier& classifier, const TemporalExample& example) {
    const Matrix p = predict_period_probs(classifier, std::span<const TemporalExample>(&example, 1));
    return Vector(std::vector<double>(p.row(0).begin(), p.row(0).end()));
}

Matrix oracle_period_probs(const PeriodClassifier& classifier, std::span<const TemporalExample> examples) {
    Matrix p(examples.size(), classifier.periods.size(), 0.0);
    for (std::size_t r = 0; r < examples.size(); ++r) {
        const auto it = std::find(classifier.periods.begin(), classifier.periods.end(), examples[r].period);
        if (it == classifier.periods.end())
            throw ArgumentError("oracle_period_probs: example period " + std::to_string(examples[r].period) +
                                " unknown to the classifier");
        p(r, static_cast<std::size_t>(it - classifier.periods.begin())) = 1.0;
    }
    return p;
}

void DynamicSteeringPlan::validate() const {
    if (sets.empty()) throw ArgumentError("DynamicSteeringPlan: no vector sets");
    if (!std::isfinite(alpha)) throw ArgumentError("DynamicSteeringPlan: alpha must be finite");
    const auto& first = sets.front();
    for (const auto& s : sets) {
        if (s.sites() != first.sites()) throw ArgumentError("DynamicSteeringPlan: sets cover different sites");
        if (s.d_model() != first.d_model()) throw ArgumentError("DynamicSteeringPlan: sets differ in d_model");
        if (s.model_hash != first.model_hash) throw ArgumentError("DynamicSteeringPlan: sets come from different models");
        if (s.source_period != first.source_period)
            throw ArgumentError("DynamicSteeringPlan: sets have different source periods");
    }
}

SiteVectors effective_vectors(const DynamicSteeringPlan& plan, std::span<const double> probs) {
    if (probs.size() != plan.sets.size()) {
        std::ostringstream os;
        os << "effective_vectors: " << probs.size() << " probabilities for " << plan.sets.size() << " vector sets";
        throw ArgumentError(os.str());
    }
    SiteVectors out;
    for (const auto& [site, v0] : plan.sets.front().vectors) {
        Vector acc = probs[0] * v0;
        for (std::size_t i = 1; i < plan.sets.size(); ++i) {
            const Vector& vi = plan.sets[i].vectors.at(site);
            for (std::size_t k = 0; k < acc.dim(); ++k) acc[k] += probs[i] * vi[k];
        }
        out.emplace(site, std::move(acc));
    }
    return out;
}

Vector dynamic_steer(const Model& model, const TemporalExample& example, const DynamicSteeringPlan& plan,
                     std::span<const double> probs) {
    plan.validate();
    InterventionList ivs;
    for (auto& [site, v] : effective_vectors(plan, probs)) ivs.push_back({site, std::move(v), plan.alpha});
    const Matrix logits =
        forward_with_intervention(model, make_batch(std::span<const TemporalExample>(&example, 1)), ivs).logits;
    return Vector(std::vector<double>(logits.row(0).begin(), logits.row(0).end()));
}

Matrix dynamic_steer(const Model& model, std::span<const TemporalExample> examples, const DynamicSteeringPlan& plan,
                     const Matrix& probs) {
    plan.validate();
    if (probs.rows() != examples.size()) throw ArgumentError("dynamic_steer: one probability row per example required");
    Matrix out(examples.size(), model.config().n_classes);
    for (std::size_t r = 0; r < examples.size(); ++r) {
        const Vector z = dynamic_steer(model, examples[r], plan, probs.row(r));
        std::copy(z.begin(), z.end(), out.row(r).begin());
    }
    return out;
}

double binomial_upper_tail(std::size_t n, std::size_t k, double p) {
    if (k == 0) return 1.0;
    if (k > n) return 0.0;
    if (p <= 0.0) return 0.0;
    if (p >= 1.0) return 1.0;
    const double lp = std::log(p);
    const double lq = std::log1p(-p);
    const double ln_n1 = std::lgamma(static_cast<double>(n) + 1.0);
    double total = 0.0;
    for (std::size_t i = k; i <= n; ++i) {
        const auto x = static_cast<double>(i);
        total += std::exp(ln_n1 - std::lgamma(x + 1.0) - std::lgamma(static_cast<double>(n) - x + 1.0) + x * lp +
                          (static_cast<double>(n) - x) * lq);
    }
    return std::min(1.0, total);
}

} // namespace tardis
