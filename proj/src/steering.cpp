#include "tardis/steering.hpp"

#include "tardis/binary_io.hpp"
#include "tardis/errors.hpp"

#include <cmath>
#include <sstream>

namespace tardis {

std::size_t SteeringVectorSet::d_model() const { return vectors.empty() ? 0 : vectors.begin()->second.dim(); }

SiteSet SteeringVectorSet::sites() const {
    SiteSet out;
    for (const auto& [site, _] : vectors) out.insert(site);
    return out;
}

bool SteeringVectorSet::same_vectors(const SteeringVectorSet& o) const {
    return vectors == o.vectors && source_period == o.source_period && target_period == o.target_period &&
           n_source == o.n_source && n_target == o.n_target && method == o.method && rank == o.rank &&
           pooling == o.pooling && model_hash == o.model_hash;
}

void to_json(nlohmann::json& j, const SteeringVectorSet& s) {
    j = nlohmann::json{{"sites", to_string(s.sites())},    {"source_period", s.source_period},
                       {"target_period", s.target_period}, {"n_source", s.n_source},
                       {"n_target", s.n_target},           {"method", s.method},
                       {"rank", s.rank},                   {"pooling", s.pooling},
                       {"model_hash", s.model_hash}};
}

CapturePool capture_pool(const Model& model, std::span<const TemporalExample> slice, const SiteSet& sites) {
    if (slice.empty()) throw ArgumentError("capture_pool: empty slice");
    if (sites.empty()) throw ArgumentError("capture_pool: no hook sites");
    const CaptureResult r = forward_with_capture(model, make_batch(slice), sites);
    CapturePool pool;
    for (const auto& [site, m] : r.captured) pool.emplace(site, m.transpose());
    return pool;
}

namespace {

void check_pools(const CapturePool& source, const CapturePool& target) {
    if (source.empty() || target.empty()) throw ArgumentError("extraction needs captures for at least one site");
    if (source.size() != target.size()) throw ArgumentError("source and target captures cover different sites");
    for (auto s = source.begin(), t = target.begin(); s != source.end(); ++s, ++t) {
        if (s->first != t->first) throw ArgumentError("source and target captures cover different sites");
        if (s->second.rows() != t->second.rows()) throw ArgumentError("source and target captures differ in width");
        if (s->second.cols() == 0 || t->second.cols() == 0) throw ArgumentError("extraction from an empty pool");
    }
}

std::int64_t period_of(std::span<const TemporalExample> slice, const char* what) {
    if (slice.empty()) throw ArgumentError(std::string("extract: empty ") + what + " slice");
    return slice.front().period;
}

} // namespace

SteeringVectorSet extract_from_captures(const CapturePool& source, const CapturePool& target, const ExtractionInfo& info) {
    check_pools(source, target);
    SteeringVectorSet set;
    set.source_period = info.source_period;
    set.target_period = info.target_period;
    set.model_hash = info.model_hash;
    set.n_source = source.begin()->second.cols();
    set.n_target = target.begin()->second.cols();
    set.source_mean.emplace();
    set.target_mean.emplace();
    for (const auto& [site, hs] : source) {
        Vector ms = mean_columns(hs);
        Vector mt = mean_columns(target.at(site));
        set.vectors.emplace(site, mt - ms);
        set.source_mean->emplace(site, std::move(ms));
        set.target_mean->emplace(site, std::move(mt));
    }
    return set;
}

SteeringVectorSet extract(const Model& model, std::span<const TemporalExample> source_slice,
                          std::span<const TemporalExample> target_slice, const SiteSet& sites) {
    const ExtractionInfo info{period_of(source_slice, "source"), period_of(target_slice, "target"), model.fingerprint()};
    return extract_from_captures(capture_pool(model, source_slice, sites), capture_pool(model, target_slice, sites), info);
}

SteeringVectorSet extract_lowrank_from_captures(const CapturePool& source, const CapturePool& target, std::size_t k,
                                                const ExtractionInfo& info) {
    check_pools(source, target);
    const std::size_t d = source.begin()->second.rows();
    const std::size_t ns = source.begin()->second.cols();
    const std::size_t nt = target.begin()->second.cols();
    const std::size_t kmax = std::min({d, ns, nt});
    if (k < 1 || k > kmax) {
        std::ostringstream os;
        os << "extract_lowrank: rank " << k << " outside [1, " << kmax << "]";
        throw ArgumentError(os.str());
    }
    SteeringVectorSet set;
    set.source_period = info.source_period;
    set.target_period = info.target_period;
    set.model_hash = info.model_hash;
    set.n_source = ns;
    set.n_target = nt;
    set.rank = k;
    set.method = "svd_k(" + std::to_string(k) + ")";
    // k == kmax is full rank: each side keeps all of its own singular directions,
    // so unequal pool sizes do not truncate the larger pool.
    const auto side_rank = [&](std::size_t n) { return k == kmax ? std::min(d, n) : k; };
    for (const auto& [site, hs] : source) {
        const Vector ms = mean_columns(truncated_svd(hs, side_rank(ns)).reconstruct());
        const Vector mt = mean_columns(truncated_svd(target.at(site), side_rank(nt)).reconstruct());
        set.vectors.emplace(site, mt - ms);
    }
    return set;
}

SteeringVectorSet extract_lowrank(const Model& model, std::span<const TemporalExample> source_slice,
                                  std::span<const TemporalExample> target_slice, const SiteSet& sites, std::size_t k) {
    const ExtractionInfo info{period_of(source_slice, "source"), period_of(target_slice, "target"), model.fingerprint()};
    return extract_lowrank_from_captures(capture_pool(model, source_slice, sites), capture_pool(model, target_slice, sites),
                                         k, info);
}

InterventionList apply(const SteeringVectorSet& set, double alpha) {
    if (!std::isfinite(alpha)) throw ArgumentError("apply: alpha must be finite");
    InterventionList out;
    out.reserve(set.vectors.size());
    for (const auto& [site, v] : set.vectors) out.push_back({site, v, alpha});
    return out;
}

void check_compatible(const Model& model, const SteeringVectorSet& set, bool allow_foreign_model) {
    const auto& cfg = model.config();
    if (set.d_model() != cfg.d_model) {
        std::ostringstream os;
        os << "steering vectors have d_model " << set.d_model() << ", model has " << cfg.d_model;
        throw ArgumentError(os.str());
    }
    for (const auto& [site, _] : set.vectors)
        if (site.layer_index >= cfg.n_layers) throw ArgumentError("steering site " + to_string(site) + " not in model");
    if (!allow_foreign_model && set.model_hash != model.fingerprint()) {
        std::ostringstream os;
        os << "steering vectors were extracted from model " << std::hex << set.model_hash << ", not from this model ("
           << model.fingerprint() << "); pass the override flag to apply them anyway";
        throw ArgumentError(os.str());
    }
}

InterventionList apply_checked(const Model& model, const SteeringVectorSet& set, double alpha, bool allow_foreign_model) {
    check_compatible(model, set, allow_foreign_model);
    return apply(set, alpha);
}

SteeringVectorSet scaled(const SteeringVectorSet& set, double c, const std::string& annotation) {
    if (!std::isfinite(c)) throw ArgumentError("scaled: factor must be finite");
    SteeringVectorSet out = set;
    for (auto& [site, v] : out.vectors) v = c * v;
    if (c != 1.0) {
        out.source_mean.reset();
        out.target_mean.reset();
    }
    if (!annotation.empty()) out.method += "+" + annotation;
    return out;
}

SteeringVectorSet zeros_like(const SteeringVectorSet& set) {
    SteeringVectorSet out = set;
    for (auto& [site, v] : out.vectors) v = Vector(v.dim(), 0.0);
    out.target_period = out.source_period;
    out.source_mean.reset();
    out.target_mean.reset();
    out.method = "zero";
    return out;
}

SteeringVectorSet interpolate(const SteeringVectorSet& set, std::size_t j, std::size_t d) {
    if (d < 1 || j > d) {
        std::ostringstream os;
        os << "interpolate: need 0 <= j <= d and d >= 1 (j=" << j << ", d=" << d << ")";
        throw ArgumentError(os.str());
    }
    const std::int64_t span = set.target_period - set.source_period;
    const std::int64_t shifted = span * static_cast<std::int64_t>(j);
    if (shifted % static_cast<std::int64_t>(d) != 0)
        throw ArgumentError("interpolate: j * (t - s) / d is not a whole period");
    const double factor = static_cast<double>(j) / static_cast<double>(d);
    SteeringVectorSet out =
        scaled(set, factor, "interpolated(" + std::to_string(j) + "/" + std::to_string(d) + ")");
    out.target_period = set.source_period + shifted / static_cast<std::int64_t>(d);
    return out;
}

std::string to_string(TimelineDirection direction) {
    return direction == TimelineDirection::forward ? "forward" : "backward";
}

TimelineDirection parse_timeline_direction(const std::string& text) {
    if (text == "forward") return TimelineDirection::forward;
    if (text == "backward") return TimelineDirection::backward;
    throw ArgumentError("unknown timeline direction '" + text + "' (expected forward or backward)");
}

SteeringVectorSet extrapolate(const SteeringVectorSet& set, std::size_t j, TimelineDirection direction) {
    if (j < 1) throw ArgumentError("extrapolate: j must be >= 1");
    const std::int64_t step = set.target_period - set.source_period;
    const auto jj = static_cast<std::int64_t>(j);
    const bool fwd = direction == TimelineDirection::forward;
    const double factor = fwd ? static_cast<double>(j) : -static_cast<double>(j);
    SteeringVectorSet out = scaled(set, factor, "extrapolated(" + std::string(fwd ? "" : "-") + std::to_string(j) + ")");
    out.target_period = set.source_period + (fwd ? jj * step : -jj * step);
    return out;
}

SteeringVectorSet compose(const SteeringVectorSet& first, const SteeringVectorSet& second) {
    if (first.sites() != second.sites()) throw ArgumentError("compose: sets cover different sites");
    if (first.d_model() != second.d_model()) throw ArgumentError("compose: d_model differs");
    if (first.model_hash != second.model_hash) throw ArgumentError("compose: sets come from different models");
    if (first.target_period != second.source_period) {
        std::ostringstream os;
        os << "compose: first set ends at period " << first.target_period << " but second starts at "
           << second.source_period;
        throw ArgumentError(os.str());
    }
    SteeringVectorSet out;
    out.source_period = first.source_period;
    out.target_period = second.target_period;
    out.n_source = first.n_source;
    out.n_target = second.n_target;
    out.model_hash = first.model_hash;
    out.pooling = first.pooling;
    out.rank = first.rank == second.rank ? first.rank : 0;
    out.method = first.method == second.method ? first.method : "composed";

    const bool telescopes = first.target_mean && second.source_mean && first.source_mean && second.target_mean &&
                            *first.target_mean == *second.source_mean;
    if (telescopes) {
        out.source_mean = first.source_mean;
        out.target_mean = second.target_mean;
        for (const auto& [site, mu] : *out.target_mean) out.vectors.emplace(site, mu - out.source_mean->at(site));
    } else {
        for (const auto& [site, v] : first.vectors) out.vectors.emplace(site, v + second.vectors.at(site));
    }
    return out;
}

void TimelineSpec::validate() const {
    if (anchors.size() < 2) throw ArgumentError("TimelineSpec: need at least two anchor periods");
    for (std::size_t i = 0; i < anchors.size(); ++i)
        for (std::size_t k = i + 1; k < anchors.size(); ++k)
            if (anchors[i] == anchors[k]) throw ArgumentError("TimelineSpec: anchor periods must be distinct");
}

namespace {

constexpr std::string_view kMagic = "TARDISSV";
constexpr std::uint32_t kVersion = 1;

} // namespace

std::vector<std::uint8_t> encode_steering(const SteeringVectorSet& set) {
    nlohmann::json header = {{"d_model", set.d_model()},
                             {"sites", nlohmann::json::array()},
                             {"source_period", set.source_period},
                             {"target_period", set.target_period},
                             {"n_source", set.n_source},
                             {"n_target", set.n_target},
                             {"method", set.method},
                             {"rank", set.rank},
                             {"pooling", set.pooling},
                             {"model_hash", set.model_hash}};
    for (const auto& [site, _] : set.vectors) header["sites"].push_back(to_string(site));
    const std::string text = header.dump();
    ByteWriter w;
    w.raw(kMagic);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.raw(text);
    for (const auto& [site, v] : set.vectors)
        for (double x : v) w.f32(static_cast<float>(x));
    w.u32(crc32_of(w.buffer()));
    return w.buffer();
}

SteeringVectorSet decode_steering(std::span<const std::uint8_t> bytes, const std::string& what) {
    ByteReader r(bytes, what);
    if (r.raw(kMagic.size()) != kMagic) throw DataError(what + ": not a steering-vector file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        std::ostringstream os;
        os << what << ": unsupported format version " << version << " (expected " << kVersion << ")";
        throw DataError(os.str());
    }
    SteeringVectorSet set;
    std::vector<HookSite> sites;
    std::size_t d = 0;
    try {
        const auto h = nlohmann::json::parse(r.str());
        d = h.at("d_model").get<std::size_t>();
        for (const auto& s : h.at("sites")) sites.push_back(parse_hook_site(s.get<std::string>()));
        set.source_period = h.at("source_period").get<std::int64_t>();
        set.target_period = h.at("target_period").get<std::int64_t>();
        set.n_source = h.at("n_source").get<std::size_t>();
        set.n_target = h.at("n_target").get<std::size_t>();
        set.method = h.at("method").get<std::string>();
        set.rank = h.at("rank").get<std::size_t>();
        set.pooling = h.at("pooling").get<std::string>();
        set.model_hash = h.at("model_hash").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(what + ": malformed header: " + e.what());
    } catch (const ArgumentError& e) {
        throw DataError(what + ": malformed header: " + e.what());
    }
    for (const auto& site : sites) {
        Vector v(d);
        for (std::size_t i = 0; i < d; ++i) v[i] = static_cast<double>(r.f32());
        set.vectors.emplace(site, std::move(v));
    }
    const std::size_t body = r.position();
    const std::uint32_t stored = r.u32();
    if (r.remaining() != 0) throw DataError(what + ": trailing bytes after checksum");
    if (crc32_of(bytes.subspan(0, body)) != stored) throw DataError(what + ": checksum mismatch");
    return set;
}

void save_steering(const SteeringVectorSet& set, const std::filesystem::path& path) {
    write_file_bytes(path, encode_steering(set));
}

SteeringVectorSet load_steering(const std::filesystem::path& path) {
    return decode_steering(read_file_bytes(path), path.string());
}

SteeringVectorSet load_steering(const std::filesystem::path& path, const Model& model, bool allow_foreign_model) {
    SteeringVectorSet set = load_steering(path);
    check_compatible(model, set, allow_foreign_model);
    return set;
}

} // namespace tardis
