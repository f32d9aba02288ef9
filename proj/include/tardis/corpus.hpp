#pragma once

#include "json.hpp"
#include "tardis/model.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace tardis {

struct TemporalExample {
    std::vector<std::int32_t> token_ids;
    std::int32_t label = 0;
    std::int64_t period = 0;

    bool operator==(const TemporalExample&) const = default;
};

using Slice = std::vector<TemporalExample>;

enum class DriftSchedule { linear, quadratic };

// Generator parameters. Period t in [0, n_periods) draws labels from
// label_priors[t] and tokens of class c from
//   (1 - w_t) * base_token_dists[c] + w_t * drift_token_dists[t][c]
// with w_t = lambda * t / (n_periods - 1) (linear) or lambda * (t / (n_periods - 1))^2.
struct DriftSpec {
    std::size_t n_periods = 5;
    std::size_t n_classes = 3;
    std::size_t vocab_size = 200;
    std::size_t seq_len = 16;      // maximum example length
    std::size_t min_seq_len = 16;  // lengths are uniform in [min_seq_len, seq_len]
    std::vector<std::vector<double>> label_priors;                    // [period][class]
    double vocab_drift_intensity = 0.0;                               // lambda
    std::vector<std::vector<double>> base_token_dists;                // [class][token]
    std::vector<std::vector<std::vector<double>>> drift_token_dists;  // [period][class][token]
    DriftSchedule schedule = DriftSchedule::linear;
    std::uint64_t seed = 0;

    double drift_weight(std::size_t period) const;
    // Throws ArgumentError on shape errors, invalid simplices, lambda outside [0, 1].
    void validate() const;
};

void to_json(nlohmann::json& j, const DriftSpec& s);
void from_json(const nlohmann::json& j, DriftSpec& s);

enum class PriorSchedule { fixed, skewing };

// Builder for the default synthetic benchmark ("drift-bench"). The
// vocabulary splits into a background block (40%), one signal block per class
// (30% in total) and a block of tokens unseen before drift (30%).
//   base_c  = (1 - q) * background + q * signal_c
//   drift_c = q * signal_c + (1 - q) * (b * signal_trend + (1 - b) * new_c)
// where new_c puts drift_class_share of its mass on tokens specific to class c
// and the rest on shared new tokens. Drift therefore keeps the class signal
// rate fixed while background usage moves towards unseen tokens and towards
// the signal tokens of `trend_class`.
struct DriftBenchOptions {
    std::size_t n_periods = 5;
    std::size_t n_classes = 3;
    std::size_t vocab_size = 200;
    std::size_t seq_len = 16;
    std::size_t min_seq_len = 8;
    double vocab_drift_intensity = 0.8;
    PriorSchedule priors = PriorSchedule::skewing;
    double class_signal = 0.15;      // q
    double drift_class_share = 0.5;
    double drift_bias = 0.2;         // b
    std::size_t trend_class = 0;
    DriftSchedule schedule = DriftSchedule::linear;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DriftBenchOptions& o);
void from_json(const nlohmann::json& j, DriftBenchOptions& o);

DriftSpec make_drift_bench(const DriftBenchOptions& options);

struct SplitFractions {
    double train = 0.70;
    double val = 0.15;
    double test = 0.15;
};

enum class SplitKind { train, val, test };
std::string to_string(SplitKind kind);

struct PeriodSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;

    const std::vector<std::size_t>& get(SplitKind kind) const;
    bool operator==(const PeriodSplit&) const = default;
};

struct TemporalCorpus {
    std::vector<TemporalExample> examples;
    std::map<std::int64_t, PeriodSplit> splits;
    std::size_t n_classes = 0;
    std::size_t vocab_size = 0;
    nlohmann::json provenance = nlohmann::json::object();

    std::vector<std::int64_t> periods() const;
    Slice slice(std::int64_t period, SplitKind kind) const;
    Slice combined(SplitKind kind) const;  // all periods, ascending period order
};

// Throws ArgumentError for invalid specs, fractions not summing to 1 or
// n_per_period < 10. Output depends only on the arguments.
TemporalCorpus generate(const DriftSpec& spec, std::size_t n_per_period, SplitFractions fractions = {});

struct JsonlOptions {
    std::size_t vocab_size = 200;
    std::size_t max_seq_len = 24;
    std::size_t n_classes = 0;  // 0 = infer from the largest label
    SplitFractions fractions;
    std::uint64_t seed = 0;
};

// One JSON object per line with "label", "period" and either "tokens"
// (integer list) or "text" (whitespace split, each word hashed into the
// vocab with FNV-1a). An optional "split" field ("train"|"val"|"test") pins
// the split; otherwise each period is split with options.fractions.
// A sidecar "<path>.meta.json", when present, restores provenance and sizes.
// Errors (DataError) cite the offending line number.
TemporalCorpus load_jsonl(const std::filesystem::path& path, const JsonlOptions& options = {});
void save_jsonl(const TemporalCorpus& corpus, const std::filesystem::path& path);

std::vector<double> empirical_priors(std::span<const TemporalExample> slice, std::size_t n_classes);

// Subsample (never oversample) to the target class priors. The smallest
// positive target class gets floor(p_min * N) examples, where N is the
// largest total the per-class counts allow; every other class gets
// round(that * p_c / p_min). Retained examples keep their input order.
Slice resample_label_distribution(std::span<const TemporalExample> slice, std::span<const double> target_priors,
                                  std::uint64_t seed);

struct LabelShiftStep {
    std::size_t step = 0;
    std::vector<double> target_priors;
    double shift_magnitude = 0.0;  // total variation distance from the unshifted priors
    Slice slice;
};

// Step i keeps a fraction 1 - i / (steps - 1) of `fixed_class` (steps == 1
// returns the unmodified slice). A fixed_class of -1 selects the majority class.
std::vector<LabelShiftStep> label_shift_series(std::span<const TemporalExample> slice, std::size_t n_classes,
                                               std::size_t steps, int fixed_class, std::uint64_t seed);

struct VocabShiftStep {
    std::int64_t period = 0;
    Slice slice;
};

// For every period, that period's `kind` split resampled to the empirical
// priors of the base period's training split.
std::vector<VocabShiftStep> vocab_shift_series(const TemporalCorpus& corpus, std::int64_t base_period, SplitKind kind,
                                               std::uint64_t seed);

double total_variation(std::span<const double> p, std::span<const double> q);

Batch make_batch(std::span<const TemporalExample> slice);

} // namespace tardis
