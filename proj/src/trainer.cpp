#include "tardis/trainer.hpp"

#include "tardis/errors.hpp"
#include "tardis/numerics.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tardis {

void TrainConfig::validate(bool allow_zero_lr) const {
    const bool lr_ok = allow_zero_lr ? learning_rate >= 0.0 : learning_rate > 0.0;
    if (!std::isfinite(learning_rate) || !lr_ok) throw ArgumentError("TrainConfig: learning_rate must be > 0");
    if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw ArgumentError("TrainConfig: epochs must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw ArgumentError("TrainConfig: Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ArgumentError("TrainConfig: adam_eps must be > 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
                       {"adam_beta1", c.adam_beta1},       {"adam_beta2", c.adam_beta2}, {"adam_eps", c.adam_eps},
                       {"seed", c.seed},                   {"shuffle", c.shuffle}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.epochs = j.value("epochs", d.epochs);
    c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.seed = j.value("seed", d.seed);
    c.shuffle = j.value("shuffle", d.shuffle);
}

void to_json(nlohmann::json& j, const TrainReport& r) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : r.epochs) epochs.push_back({{"loss", e.loss}, {"accuracy", e.accuracy}});
    j = nlohmann::json{{"epochs", epochs}, {"steps", r.steps}, {"seconds", r.seconds}, {"config", r.config}};
    j["val_accuracy"] = r.val_accuracy ? nlohmann::json(*r.val_accuracy) : nlohmann::json(nullptr);
}

AdamOptimizer::AdamOptimizer(std::size_t n_params, const TrainConfig& config)
    : lr_(config.learning_rate), b1_(config.adam_beta1), b2_(config.adam_beta2), eps_(config.adam_eps),
      m_(n_params, 0.0), v_(n_params, 0.0) {
    config.validate(/*allow_zero_lr=*/true);
}

void AdamOptimizer::step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw ArgumentError("AdamOptimizer: size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
        v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
        if (lr_ == 0.0) continue;
        params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
}

TrainResult train(const Model& model, std::span<const TemporalExample> slice, const TrainConfig& config,
                  std::span<const TemporalExample> val_slice) {
    config.validate();
    if (slice.empty()) throw ArgumentError("train: empty training slice");
    const auto n_classes = static_cast<std::int32_t>(model.config().n_classes);
    for (const auto& ex : slice)
        if (ex.label < 0 || ex.label >= n_classes)
            throw ArgumentError("train: label " + std::to_string(ex.label) + " outside [0, n_classes)");

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result{ModelCheckpoint{model, {}}, {}};
    Model& m = result.checkpoint.model;
    TrainReport& report = result.report;
    report.config = config;

    AdamOptimizer adam(m.parameter_count(), config);
    std::vector<double> grad(m.parameter_count());
    std::vector<std::size_t> order(slice.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "shuffle"));

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        if (config.shuffle) rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            Slice chunk;
            chunk.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) chunk.push_back(slice[order[i]]);
            const LossResult lr = loss_and_gradient(m, make_batch(chunk), grad);
            if (!std::isfinite(lr.loss) || !all_finite(grad)) {
                std::ostringstream os;
                os << "training diverged at step " << report.steps << " (epoch " << epoch << ", batch "
                   << begin / config.batch_size << "): loss " << lr.loss;
                throw NumericalError(os.str());
            }
            loss_sum += lr.loss * static_cast<double>(end - begin);
            correct += lr.correct;
            adam.step(m.parameters(), grad);
            ++report.steps;
        }
        const auto n = static_cast<double>(slice.size());
        report.epochs.push_back({loss_sum / n, static_cast<double>(correct) / n});
    }
    if (!val_slice.empty()) report.val_accuracy = accuracy(m, val_slice);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.checkpoint.metadata["train_report"] = report;
    return result;
}

GradCheckResult grad_check(const Model& model, const Batch& batch, double epsilon, std::size_t n_samples,
                           std::uint64_t seed) {
    if (!(epsilon > 0.0)) throw ArgumentError("grad_check: epsilon must be > 0");
    std::vector<double> grad(model.parameter_count());
    loss_and_gradient(model, batch, grad);

    // One index from every tensor first, then fill uniformly from the rest.
    Rng rng(derive_seed(seed, "grad-check"));
    std::vector<std::uint8_t> taken(model.parameter_count(), 0);
    std::vector<std::size_t> picks;
    for (const auto& t : model.tensors()) {
        const std::size_t i = t.offset + rng.uniform_index(t.size());
        taken[i] = 1;
        picks.push_back(i);
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < taken.size(); ++i)
        if (!taken[i]) rest.push_back(i);
    rng.shuffle(rest);
    for (std::size_t i = 0; i < rest.size() && picks.size() < n_samples; ++i) picks.push_back(rest[i]);

    GradCheckResult out;
    Model probe = model;
    for (std::size_t idx : picks) {
        const double w = probe.parameters()[idx];
        probe.parameters()[idx] = w + epsilon;
        const double up = evaluate_loss(probe, batch).loss;
        probe.parameters()[idx] = w - epsilon;
        const double down = evaluate_loss(probe, batch).loss;
        probe.parameters()[idx] = w;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double analytic = grad[idx];
        const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), kGradCheckFloor);
        if (rel > out.max_relative_error || out.checked == 0) {
            out.max_relative_error = rel;
            out.worst_index = idx;
            out.worst_analytic = analytic;
            out.worst_numeric = numeric;
        }
        ++out.checked;
    }
    return out;
}

std::vector<std::size_t> predict(const Model& model, std::span<const TemporalExample> slice,
                                 const InterventionList& interventions) {
    std::vector<std::size_t> out;
    if (slice.empty()) return out;
    const CaptureResult r = forward_with_intervention(model, make_batch(slice), interventions);
    out.reserve(slice.size());
    for (std::size_t b = 0; b < slice.size(); ++b) out.push_back(argmax(r.logits.row(b)));
    return out;
}

double accuracy(const Model& model, std::span<const TemporalExample> slice, const InterventionList& interventions) {
    if (slice.empty()) throw ArgumentError("accuracy: empty slice");
    const auto pred = predict(model, slice, interventions);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < slice.size(); ++i) hits += pred[i] == static_cast<std::size_t>(slice[i].label);
    return static_cast<double>(hits) / static_cast<double>(slice.size());
}

} // namespace tardis
