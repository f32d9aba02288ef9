#pragma once

#include "json.hpp"
#include "tardis/corpus.hpp"
#include "tardis/dynamic.hpp"
#include "tardis/model.hpp"
#include "tardis/steering.hpp"
#include "tardis/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tardis {

enum class CorpusKind { drift_bench, spec, jsonl };

struct CorpusSource {
    CorpusKind kind = CorpusKind::drift_bench;
    DriftBenchOptions bench;
    std::optional<DriftSpec> spec;
    std::filesystem::path jsonl_path;
    JsonlOptions jsonl;
    std::size_t n_per_period = 1500;
    SplitFractions fractions;
};

inline const std::vector<double> kDefaultAlphaGrid = {-5, -3, -2, -1, 1, 2, 3, 5};

// Everything an experiment run depends on. The run seed overrides every
// seed field below: corpus, model init, training and resampling streams are
// all derived from it, so (config, seed) fixes every report row.
struct ExperimentConfig {
    std::string experiment = "misalignment";
    CorpusSource corpus;
    ModelConfig model;
    TrainConfig train;     // base model on the earliest period
    TrainConfig finetune;  // later periods, starting from the base model
    ClassifierConfig classifier;
    std::string sites = "default";  // "default", "all" or a site list such as "ffn_out@3,attention_out@2"
    std::vector<double> alpha_grid = kDefaultAlphaGrid;
    std::vector<std::uint64_t> seeds = {0};
    std::filesystem::path out_dir = "runs";

    bool target_pool_is_test = false;  // extract towards the evaluation inputs instead of a disjoint pool
    bool per_pair_alpha = false;       // select alpha per (s, t) instead of per s
    bool retune_dynamic_alpha = false;
    bool oracle_classifier = false;    // dynamic steering with the true periods

    std::optional<std::int64_t> train_period;  // unset: earliest period
    std::size_t label_shift_steps = 5;
    int label_shift_fixed_class = -1;          // -1: majority class of the training split
    TimelineDirection timeline_direction = TimelineDirection::forward;
    std::vector<std::size_t> ranks = {1, 4, 16, 64};
    std::vector<std::size_t> data_sizes = {25, 50, 100, 200, 400, 0};  // 0: full pool
    std::size_t data_size_repeats = 10;

    ExperimentConfig();
    // Throws ArgumentError on an empty alpha grid or seed list, a non-finite
    // alpha, or invalid sub-configs.
    void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// One result. `param`/`value` name the swept quantity ("alpha", "k", "site",
// "n"); value "selected" marks a validation-selected alpha. `step` is the
// shift step (label shift) or the timeline offset j. eval_period -1 stands
// for the combined test set of all periods. alpha is the applied strength.
struct ReportRow {
    std::string experiment;
    std::uint64_t seed = 0;
    std::int64_t train_period = 0;
    std::int64_t eval_period = 0;
    std::size_t step = 0;
    std::string method;
    std::string param;
    std::string value;
    std::size_t replicate = 0;
    double alpha = 0.0;
    double shift = 0.0;  // shift magnitude where meaningful, else NaN
    double accuracy = 0.0;
    double baseline_accuracy = 0.0;
    double delta = 0.0;
    std::string flags;

    bool operator==(const ReportRow& o) const;  // NaN fields compare equal to NaN
};

struct Aggregate {
    std::string experiment;
    std::int64_t train_period = 0;
    std::int64_t eval_period = 0;
    std::size_t step = 0;
    std::string method;
    std::string param;
    std::string value;
    std::size_t count = 0;
    double accuracy_mean = 0.0;
    double accuracy_sd = 0.0;
    double delta_mean = 0.0;
    double delta_sd = 0.0;
    double shift_mean = 0.0;
    double alpha_mean = 0.0;
};

struct ExperimentReport {
    std::string experiment;
    std::vector<ReportRow> rows;  // sorted by sort_rows()
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json details = nlohmann::json::object();  // per-seed extras, e.g. selected alphas
    double runtime_seconds = 0.0;

    std::vector<Aggregate> aggregates() const;
};

// Fixed order: experiment, seed, train_period, eval_period, step, method,
// param, value (numerically when both parse), replicate.
void sort_rows(std::vector<ReportRow>& rows);

// Published full-scale values from pretrained backbones on real corpora,
// emitted as context only.
nlohmann::json reference_values();

// Caches the corpus, the per-period models and the period classifier for one
// run seed. Models are trained on first use.
class Workbench {
public:
    Workbench(ExperimentConfig config, std::uint64_t seed);

    const ExperimentConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    const TemporalCorpus& corpus();
    std::vector<std::int64_t> periods();

    // Earliest period: the base model. Others: fine-tuned from the base.
    const Model& period_model(std::int64_t period);
    const PeriodClassifier& classifier();
    nlohmann::json training_log() const { return training_log_; }

private:
    ExperimentConfig config_;
    std::uint64_t seed_;
    std::optional<TemporalCorpus> corpus_;
    std::map<std::int64_t, Model> models_;
    std::optional<PeriodClassifier> classifier_;
    nlohmann::json training_log_ = nlohmann::json::object();
};

SiteSet resolve_sites(const ExperimentConfig& config);
// config.train_period if set (must exist), else the earliest period.
std::int64_t resolve_train_period(const ExperimentConfig& config, Workbench& bench);

// Keeps workbenches alive across experiments that share a config.
class WorkbenchCache {
public:
    Workbench& get(const ExperimentConfig& config, std::uint64_t seed);

private:
    std::map<std::pair<std::string, std::uint64_t>, std::unique_ptr<Workbench>> benches_;
};

// Alpha with the best mean accuracy over the given (model, pool, vectors)
// evaluations. Ties go to the smaller |alpha|, then to the earlier grid entry.
struct AlphaCandidate {
    const SteeringVectorSet* vectors;
    const Slice* pool;
};
double select_alpha(const Model& model, const std::vector<AlphaCandidate>& candidates, const std::vector<double>& grid);

ExperimentReport run_misalignment_matrix(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);
ExperimentReport run_label_shift_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);
ExperimentReport run_vocab_shift_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);
ExperimentReport run_timeline_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);
ExperimentReport run_dynamic_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);
ExperimentReport ablate_rank(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);
ExperimentReport ablate_sites(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);
ExperimentReport ablate_data_size(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);

// Dispatches on cfg.experiment: misalignment, label_shift, vocab_shift,
// timeline, dynamic, ablate_rank, ablate_site, ablate_size.
ExperimentReport run_experiment(const ExperimentConfig& cfg, WorkbenchCache* cache = nullptr);

// Stable output, identical bytes for identical reports:
//   <stem>.csv        one line per row, header kCsvHeader
//   <stem>.md         aggregate tables plus the reference block
//   <stem>.tsv        long format: row keys, metric, value
//   <stem>.config.json
//   <stem>.runtime.json  wall clock only, kept apart so the rest stays byte-stable
inline constexpr const char* kCsvHeader =
    "experiment,seed,train_period,eval_period,step,method,param,value,replicate,alpha,shift,accuracy,baseline_accuracy,delta,"
    "flags";
enum class ReportFormat { csv, markdown, tsv };
std::vector<std::filesystem::path> emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir,
                                               const std::vector<ReportFormat>& formats = {ReportFormat::csv,
                                                                                           ReportFormat::markdown,
                                                                                           ReportFormat::tsv});
std::string format_csv(const ExperimentReport& report);
std::string format_markdown(const ExperimentReport& report);
std::string format_tsv(const ExperimentReport& report);
std::vector<ReportRow> parse_csv(const std::string& text);

} // namespace tardis
