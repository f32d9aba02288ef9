#pragma once

#include "json.hpp"
#include "tardis/corpus.hpp"
#include "tardis/model.hpp"
#include "tardis/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tardis {

using SiteVectors = std::map<HookSite, Vector>;

// Per-site captures of one pool: d_model x n matrices, one column per example.
using CapturePool = std::map<HookSite, Matrix>;

// Steering directions v_{s->t} per hook site, plus what produced them.
struct SteeringVectorSet {
    SiteVectors vectors;
    std::int64_t source_period = 0;
    std::int64_t target_period = 0;
    std::size_t n_source = 0;
    std::size_t n_target = 0;
    std::string method = "mean_diff";  // "mean_diff", "svd_k(4)", plus "+scaled(..)" style annotations
    std::size_t rank = 0;              // 0 for plain mean difference
    std::string pooling = "token_mean";
    std::uint64_t model_hash = 0;

    // Source and target pool means for mean-difference sets. compose() uses
    // them to stay exact; every rescaling other than by 1 drops them.
    std::optional<SiteVectors> source_mean;
    std::optional<SiteVectors> target_mean;

    std::size_t d_model() const;
    SiteSet sites() const;

    // Compares everything except the anchor means.
    bool same_vectors(const SteeringVectorSet& other) const;
};

void to_json(nlohmann::json& j, const SteeringVectorSet& s);  // metadata only

// Forward passes without interventions, pooled per example.
CapturePool capture_pool(const Model& model, std::span<const TemporalExample> slice, const SiteSet& sites);

struct ExtractionInfo {
    std::int64_t source_period = 0;
    std::int64_t target_period = 0;
    std::uint64_t model_hash = 0;
};

// v = mean(target columns) - mean(source columns) per site.
SteeringVectorSet extract_from_captures(const CapturePool& source, const CapturePool& target, const ExtractionInfo& info);

// Period labels come from the first example of each slice.
SteeringVectorSet extract(const Model& model, std::span<const TemporalExample> source_slice,
                          std::span<const TemporalExample> target_slice, const SiteSet& sites);

// Mean of the columns of the rank-k reconstruction of each capture matrix,
// target minus source. Requires 1 <= k <= min(d_model, n_source, n_target); the
// upper bound reconstructs each matrix at its own full rank.
SteeringVectorSet extract_lowrank_from_captures(const CapturePool& source, const CapturePool& target, std::size_t k,
                                                const ExtractionInfo& info);
SteeringVectorSet extract_lowrank(const Model& model, std::span<const TemporalExample> source_slice,
                                  std::span<const TemporalExample> target_slice, const SiteSet& sites, std::size_t k);

// (v, alpha) at every site of the set, in site order. Throws ArgumentError
// for a non-finite alpha.
InterventionList apply(const SteeringVectorSet& set, double alpha);

// As apply(), after checking that the set fits the model: d_model must match,
// and model_hash must match unless allow_foreign_model is set.
InterventionList apply_checked(const Model& model, const SteeringVectorSet& set, double alpha,
                               bool allow_foreign_model = false);
void check_compatible(const Model& model, const SteeringVectorSet& set, bool allow_foreign_model = false);

// Every vector multiplied by c; the annotation is appended to method.
SteeringVectorSet scaled(const SteeringVectorSet& set, double c, const std::string& annotation);
SteeringVectorSet zeros_like(const SteeringVectorSet& set);

// For a set spanning s -> s + d: (j / d) * v, target s + j * (t - s) / d.
// Throws ArgumentError unless 0 <= j <= d and the target is an integer period.
SteeringVectorSet interpolate(const SteeringVectorSet& set, std::size_t j, std::size_t d);

enum class TimelineDirection { forward, backward };
std::string to_string(TimelineDirection direction);
TimelineDirection parse_timeline_direction(const std::string& text);

// For a one-step set s -> s + step: forward gives j * v towards s + j * step,
// backward gives -j * v towards s - j * step. Requires j >= 1.
SteeringVectorSet extrapolate(const SteeringVectorSet& set, std::size_t j,
                              TimelineDirection direction = TimelineDirection::forward);

// v_{s->t} + v_{t->u}. When both sets carry anchor means and the shared
// period's means agree bitwise, the result is target_mean(u) - source_mean(s),
// which equals a direct extraction s -> u from the same captures.
// Throws ArgumentError on differing sites, d_model, model_hash or a broken chain.
SteeringVectorSet compose(const SteeringVectorSet& first, const SteeringVectorSet& second);

// Anchor periods with the vectors available between them.
struct TimelineSpec {
    std::vector<std::int64_t> anchors;
    TimelineDirection direction = TimelineDirection::forward;

    void validate() const;  // ArgumentError on fewer than two or repeated anchors
};

// Steering-vector file, integers little-endian:
//   "TARDISSV"           8-byte magic
//   u32 version          currently 1
//   u32 header_length
//   header               UTF-8 JSON {d_model, sites, source_period, target_period,
//                        n_source, n_target, method, rank, pooling, model_hash}
//   f32 x d_model        one block per site, in header order
//   u32 crc32            zlib CRC-32 of every preceding byte
// Anchor means are not stored.
std::vector<std::uint8_t> encode_steering(const SteeringVectorSet& set);
SteeringVectorSet decode_steering(std::span<const std::uint8_t> bytes, const std::string& what = "steering vectors");
void save_steering(const SteeringVectorSet& set, const std::filesystem::path& path);
SteeringVectorSet load_steering(const std::filesystem::path& path);
// Loads and runs check_compatible against `model`.
SteeringVectorSet load_steering(const std::filesystem::path& path, const Model& model, bool allow_foreign_model = false);

} // namespace tardis
