#pragma once

#include "json.hpp"
#include "tardis/checkpoint.hpp"
#include "tardis/corpus.hpp"
#include "tardis/model.hpp"
#include "tardis/steering.hpp"
#include "tardis/trainer.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace tardis {

// A classifier over time periods; output class i means periods[i].
struct PeriodClassifier {
    Model model;
    std::vector<std::int64_t> periods;
    std::size_t heldout_total = 0;
    std::size_t heldout_correct = 0;
    nlohmann::json provenance = nlohmann::json::object();

    double heldout_accuracy() const;
    // One-sided binomial p-value of heldout_correct against chance 1 / |periods|.
    double chance_p_value() const;
    bool beats_chance(double significance = 0.05) const { return chance_p_value() < significance; }

    ModelCheckpoint to_checkpoint() const;
    static PeriodClassifier from_checkpoint(const ModelCheckpoint& checkpoint);
};

struct ClassifierConfig {
    ModelConfig model = [] {
        ModelConfig c;
        c.attention_mode = AttentionMode::bidirectional;
        return c;
    }();
    TrainConfig train;
    double train_fraction = 0.7;
};

void to_json(nlohmann::json& j, const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);

// Trains on the union of the validation splits only, relabelled by period
// and divided train_fraction / rest with derive_seed(train.seed, "period-split").
// n_classes and vocab_size of config.model are overridden by the corpus.
// Throws ArgumentError for fewer than two periods.
PeriodClassifier train_period_classifier(const TemporalCorpus& corpus, const ClassifierConfig& config);

// Softmax over period logits, one row per example.
Matrix predict_period_probs(const PeriodClassifier& classifier, std::span<const TemporalExample> examples);
Vector predict_period_probs(const PeriodClassifier& classifier, const TemporalExample& example);

// One-hot rows from the true periods.
Matrix oracle_period_probs(const PeriodClassifier& classifier, std::span<const TemporalExample> examples);

// Vector sets v_{s->t_i}, aligned with the classifier's period order.
struct DynamicSteeringPlan {
    std::vector<SteeringVectorSet> sets;
    double alpha = 1.0;

    // Throws ArgumentError unless all sets share sites, d_model, model_hash
    // and source period.
    void validate() const;
};

// Per site, sum_i p_i v_i accumulated in plan order.
SiteVectors effective_vectors(const DynamicSteeringPlan& plan, std::span<const double> probs);

// Logits with alpha * effective_vectors(plan, probs row) added per example.
Matrix dynamic_steer(const Model& model, std::span<const TemporalExample> examples, const DynamicSteeringPlan& plan,
                     const Matrix& probs);
Vector dynamic_steer(const Model& model, const TemporalExample& example, const DynamicSteeringPlan& plan,
                     std::span<const double> probs);

// Upper tail P(X >= k) for X ~ Binomial(n, p).
double binomial_upper_tail(std::size_t n, std::size_t k, double p);

} // namespace tardis
