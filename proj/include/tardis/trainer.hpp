#pragma once

#include "json.hpp"
#include "tardis/checkpoint.hpp"
#include "tardis/corpus.hpp"
#include "tardis/model.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace tardis {

struct TrainConfig {
    double learning_rate = 3e-4;
    std::size_t batch_size = 32;
    std::size_t epochs = 30;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    bool shuffle = true;

    // Throws ArgumentError unless learning_rate > 0 (>= 0 when allow_zero_lr),
    // batch_size >= 1, epochs >= 1 and the betas lie in [0, 1).
    void validate(bool allow_zero_lr = false) const;

    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochStats {
    double loss = 0.0;      // mean over examples, measured before each batch's update
    double accuracy = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::optional<double> val_accuracy;
    std::size_t steps = 0;
    double seconds = 0.0;  // wall clock, informational only
    TrainConfig config;
};

void to_json(nlohmann::json& j, const TrainReport& r);

class AdamOptimizer {
public:
    AdamOptimizer(std::size_t n_params, const TrainConfig& config);

    // params -= lr * m_hat / (sqrt(v_hat) + eps). With lr == 0 the
    // parameters are left bitwise unchanged.
    void step(std::span<double> params, std::span<const double> grad);
    std::size_t steps() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<double> m_, v_;
};

struct TrainResult {
    ModelCheckpoint checkpoint;
    TrainReport report;
};

// Cross-entropy training with Adam, starting from `model`. Example order per
// epoch comes from derive_seed(config.seed, "shuffle"). Throws ArgumentError
// on an empty slice or invalid config, NumericalError if the loss turns
// non-finite (the message names the step).
TrainResult train(const Model& model, std::span<const TemporalExample> slice, const TrainConfig& config,
                  std::span<const TemporalExample> val_slice = {});

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central differences (L(w + eps) - L(w - eps)) / (2 eps) on n_samples
// parameter indices drawn without replacement, every tensor represented.
// Relative error is |a - n| / max(|a| + |n|, kGradCheckFloor), so pairs of
// zero gradients contribute 0.
inline constexpr double kGradCheckFloor = 1e-6;
GradCheckResult grad_check(const Model& model, const Batch& batch, double epsilon, std::size_t n_samples = 256,
                           std::uint64_t seed = 0);

// Share of argmax predictions equal to the labels.
double accuracy(const Model& model, std::span<const TemporalExample> slice, const InterventionList& interventions = {});

// Argmax predictions for every example.
std::vector<std::size_t> predict(const Model& model, std::span<const TemporalExample> slice,
                                 const InterventionList& interventions = {});

} // namespace tardis
