#include "oracles.hpp"
#include "support.hpp"
#include "tardis/binary_io.hpp"
#include "tardis/errors.hpp"
#include "tardis/steering.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace tardis;

namespace {

struct Fixture {
    Model model = support::random_model(support::toy_config(11));
    SiteSet sites = default_sites(model.config());
    Slice a = support::random_slice(30, 1, 0);
    Slice b = support::random_slice(25, 2, 1);
    Slice c = support::random_slice(20, 3, 2);
};

CapturePool pool_from_columns(std::initializer_list<std::initializer_list<double>> rows) {
    return {{HookSite{0, Sublayer::ffn_out}, Matrix::from_rows(rows)}};
}

std::vector<double> logits_row(const Model& m, const Slice& s, const InterventionList& ivs, std::size_t r = 0) {
    return support::row(forward_with_intervention(m, make_batch(s), ivs).logits, r);
}

} // namespace

TEST(Extract, SameDataGivesZeroVectors) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.a, f.sites);
    for (const auto& [site, vec] : v.vectors)
        for (double x : vec) EXPECT_EQ(x, 0.0);
}

TEST(Extract, HandCase) {
    const auto v = extract_from_captures(pool_from_columns({{1, 3}, {0, 0}}), pool_from_columns({{2}, {2}}), {0, 1, 7});
    const Vector& x = v.vectors.begin()->second;
    EXPECT_EQ(x[0], 0.0);
    EXPECT_EQ(x[1], 2.0);
    EXPECT_EQ(v.n_source, 2u);
    EXPECT_EQ(v.n_target, 1u);
    EXPECT_EQ(v.method, "mean_diff");
    EXPECT_EQ(v.model_hash, 7u);
}

TEST(Extract, AntisymmetricExactly) {
    Fixture f;
    const auto ab = extract(f.model, f.a, f.b, f.sites);
    const auto ba = extract(f.model, f.b, f.a, f.sites);
    for (const auto& site : f.sites) EXPECT_EQ(ab.vectors.at(site), -ba.vectors.at(site));
    EXPECT_EQ(ab.source_period, 0);
    EXPECT_EQ(ab.target_period, 1);
    EXPECT_EQ(ab.model_hash, f.model.fingerprint());
}

TEST(Extract, OrderInvariant) {
    Fixture f;
    Slice ra(f.a.rbegin(), f.a.rend());
    Slice rb = f.b;
    std::rotate(rb.begin(), rb.begin() + 7, rb.end());
    const auto x = extract(f.model, f.a, f.b, f.sites);
    const auto y = extract(f.model, ra, rb, f.sites);
    EXPECT_TRUE(x.same_vectors(y));
}

TEST(Extract, ErrorsOnEmptyOrBadSite) {
    Fixture f;
    EXPECT_THROW(extract(f.model, Slice{}, f.b, f.sites), ArgumentError);
    EXPECT_THROW(extract(f.model, f.a, f.b, {HookSite{9, Sublayer::ffn_out}}), ArgumentError);
}

TEST(ExtractLowrank, FullRankMatchesMeanDiff) {
    Fixture f;
    const auto full = extract(f.model, f.a, f.b, f.sites);
    const auto lr = extract_lowrank(f.model, f.a, f.b, f.sites, 25);
    EXPECT_EQ(lr.method, "svd_k(25)");
    EXPECT_EQ(lr.rank, 25u);
    for (const auto& site : f.sites) {
        const Vector& x = full.vectors.at(site);
        EXPECT_LE(norm(lr.vectors.at(site) - x), 1e-5 * norm(x));
    }
}

TEST(ExtractLowrank, RankOneMatchesDenseOracle) {
    const Matrix s = oracle::random_matrix(6, 9, 21);
    Matrix t = oracle::random_matrix(6, 7, 22);
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 7; ++c) t(r, c) += 2.0;
    const HookSite site{0, Sublayer::ffn_out};
    const auto v = extract_lowrank_from_captures({{site, s}}, {{site, t}}, 1, {0, 1, 0});
    const Eigen::VectorXd ref = oracle::lowrank_mean_diff(s, t, 1);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(v.vectors.at(site)[k], ref(static_cast<Eigen::Index>(k)), 1e-6);
}

TEST(ExtractLowrank, DistanceToFullNonIncreasingOnDriftBench) {
    DriftBenchOptions o;
    o.priors = PriorSchedule::fixed;
    o.vocab_drift_intensity = 0.8;
    const TemporalCorpus corpus = generate(make_drift_bench(o), 300);
    const Model m = support::random_model(support::toy_config(12));
    const SiteSet sites = {HookSite{3, Sublayer::ffn_out}};
    const auto src = corpus.slice(0, SplitKind::train), tgt = corpus.slice(4, SplitKind::train);
    const auto full = extract(m, src, tgt, sites);
    double prev = INFINITY;
    for (std::size_t k : {1, 4, 16, 32}) {
        const double dist = norm(extract_lowrank(m, src, tgt, sites, k).vectors.begin()->second - full.vectors.begin()->second);
        EXPECT_LE(dist, prev + 1e-9) << "k=" << k;
        prev = dist;
    }
    EXPECT_LE(prev, 1e-9);
}

TEST(ExtractLowrank, RankOutOfRange) {
    Fixture f;
    EXPECT_THROW(extract_lowrank(f.model, f.a, f.b, f.sites, 0), ArgumentError);
    EXPECT_THROW(extract_lowrank(f.model, f.a, f.b, f.sites, 26), ArgumentError);
}

TEST(Apply, AlphaZeroIsExact) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);
    EXPECT_EQ(forward_with_intervention(f.model, make_batch(f.c), apply(v, 0.0)).logits,
              forward_with_capture(f.model, make_batch(f.c), {}).logits);
    EXPECT_THROW(apply(v, INFINITY), ArgumentError);
}

TEST(Apply, PlusThenMinusCancels) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);
    InterventionList ivs = apply(v, 1.0);
    for (auto& iv : apply(v, -1.0)) ivs.push_back(iv);
    const auto plain = logits_row(f.model, f.c, {});
    const auto both = logits_row(f.model, f.c, ivs);
    for (std::size_t k = 0; k < plain.size(); ++k) EXPECT_NEAR(both[k], plain[k], 1e-9);
}

TEST(Apply, AlphaThreeEqualsPrescaled) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);
    EXPECT_EQ(logits_row(f.model, f.c, apply(v, 3.0)), logits_row(f.model, f.c, apply(scaled(v, 3.0, ""), 1.0)));
}

TEST(Apply, ScaleEquivariant) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);
    const auto x = logits_row(f.model, f.c, apply(v, 2.0), 3);
    for (double c : {-4.0, 0.5, 10.0}) {
        const auto y = logits_row(f.model, f.c, apply(scaled(v, c, ""), 2.0 / c), 3);
        for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(x[k], y[k], 1e-9);
    }
}

TEST(Apply, CompatibilityChecks) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);
    EXPECT_NO_THROW(apply_checked(f.model, v, 1.0));
    const Model other = support::random_model(support::toy_config(99));
    EXPECT_THROW(apply_checked(other, v, 1.0), ArgumentError);
    EXPECT_NO_THROW(apply_checked(other, v, 1.0, true));
    ModelConfig wide = support::toy_config();
    wide.d_model = 16;
    EXPECT_THROW(check_compatible(init_model(wide), v, true), ArgumentError);
}

TEST(Interpolate, Endpoints) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.c, f.sites);  // 0 -> 2
    const auto end = interpolate(v, 2, 2);
    EXPECT_TRUE(end.same_vectors(scaled(v, 1.0, "")) || end.vectors == v.vectors);
    EXPECT_EQ(end.vectors, v.vectors);
    EXPECT_EQ(end.target_period, 2);
    const auto zero = interpolate(v, 0, 2);
    for (const auto& [site, vec] : zero.vectors)
        for (double x : vec) EXPECT_EQ(x, 0.0);
    EXPECT_EQ(zero.target_period, 0);
    const auto half = interpolate(v, 1, 2);
    EXPECT_EQ(half.target_period, 1);
    EXPECT_NE(half.method.find("interpolated"), std::string::npos);
    for (const auto& site : f.sites) EXPECT_EQ(half.vectors.at(site), 0.5 * v.vectors.at(site));
    EXPECT_THROW(interpolate(v, 3, 2), ArgumentError);
}

TEST(Extrapolate, ForwardAndBackward) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);  // 0 -> 1
    EXPECT_EQ(extrapolate(v, 1).vectors, v.vectors);
    const auto two = extrapolate(v, 2);
    EXPECT_EQ(two.target_period, 2);
    EXPECT_NE(two.method.find("extrapolated"), std::string::npos);
    for (const auto& site : f.sites) EXPECT_EQ(two.vectors.at(site), 2.0 * v.vectors.at(site));
    const auto back = extrapolate(v, 3, TimelineDirection::backward);
    EXPECT_EQ(back.target_period, -3);
    for (const auto& site : f.sites) EXPECT_EQ(back.vectors.at(site), -3.0 * v.vectors.at(site));
    EXPECT_THROW(extrapolate(v, 0), ArgumentError);
}

TEST(Compose, TelescopesExactly) {
    Fixture f;
    const auto v12 = extract(f.model, f.a, f.b, f.sites);
    const auto v23 = extract(f.model, f.b, f.c, f.sites);
    const auto v13 = extract(f.model, f.a, f.c, f.sites);
    const auto composed = compose(v12, v23);
    EXPECT_EQ(composed.vectors, v13.vectors);
    EXPECT_EQ(composed.source_period, 0);
    EXPECT_EQ(composed.target_period, 2);
}

TEST(Compose, RoundTripIsZero) {
    Fixture f;
    const auto st = extract(f.model, f.a, f.b, f.sites);
    const auto ts = extract(f.model, f.b, f.a, f.sites);
    for (const auto& [site, vec] : compose(st, ts).vectors)
        for (double x : vec) EXPECT_EQ(x, 0.0);
}

TEST(Compose, ZeroIsIdentity) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);
    auto z = zeros_like(v);
    z.source_period = z.target_period = v.target_period;
    EXPECT_EQ(compose(v, z).vectors, v.vectors);
}

TEST(Compose, Mismatches) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);
    const auto w = extract(f.model, f.b, f.c, {HookSite{0, Sublayer::ffn_out}});
    EXPECT_THROW(compose(v, w), ArgumentError);
    EXPECT_THROW(compose(v, v), ArgumentError);  // 0->1 then 0->1
    auto other = extract(f.model, f.b, f.c, f.sites);
    other.model_hash ^= 1;
    EXPECT_THROW(compose(v, other), ArgumentError);
}

TEST(TimelineSpec, Validation) {
    EXPECT_THROW((TimelineSpec{{1}, TimelineDirection::forward}.validate()), ArgumentError);
    EXPECT_THROW((TimelineSpec{{1, 1}, TimelineDirection::forward}.validate()), ArgumentError);
    EXPECT_NO_THROW((TimelineSpec{{0, 4}, TimelineDirection::backward}.validate()));
    EXPECT_EQ(parse_timeline_direction("backward"), TimelineDirection::backward);
    EXPECT_THROW(parse_timeline_direction("sideways"), ArgumentError);
}

TEST(SteeringFile, RoundTripWithinFloatRounding) {
    Fixture f;
    const auto v = extract_lowrank(f.model, f.a, f.b, f.sites, 4);
    const auto path = std::filesystem::temp_directory_path() / "tardis_vectors.sv";
    save_steering(v, path);
    const auto back = load_steering(path, f.model);
    EXPECT_EQ(back.source_period, v.source_period);
    EXPECT_EQ(back.target_period, v.target_period);
    EXPECT_EQ(back.method, v.method);
    EXPECT_EQ(back.rank, 4u);
    EXPECT_EQ(back.model_hash, v.model_hash);
    EXPECT_EQ(back.n_source, 30u);
    for (const auto& site : f.sites)
        for (std::size_t k = 0; k < 32; ++k)
            EXPECT_EQ(back.vectors.at(site)[k], static_cast<double>(static_cast<float>(v.vectors.at(site)[k])));
    std::filesystem::remove(path);
}

TEST(SteeringFile, CorruptionAndMismatch) {
    Fixture f;
    const auto v = extract(f.model, f.a, f.b, f.sites);
    const auto bytes = encode_steering(v);
    auto bad = bytes;
    bad[bad.size() - 10] ^= 0x01;
    EXPECT_THROW(decode_steering(bad), DataError);
    auto cut = bytes;
    cut.resize(cut.size() - 3);
    EXPECT_THROW(decode_steering(cut), DataError);
    auto version = bytes;
    version[8] = 2;
    const std::uint32_t crc = crc32_of(std::span<const std::uint8_t>(version.data(), version.size() - 4));
    for (int i = 0; i < 4; ++i) version[version.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
    try {
        decode_steering(version);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
    const auto path = std::filesystem::temp_directory_path() / "tardis_mismatch.sv";
    save_steering(v, path);
    ModelConfig narrow = support::toy_config();
    narrow.d_model = 16;
    EXPECT_THROW(load_steering(path, init_model(narrow), true), ArgumentError);
    std::filesystem::remove(path);
}
