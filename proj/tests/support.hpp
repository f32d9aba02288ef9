#pragma once

#include "tardis/corpus.hpp"
#include "tardis/model.hpp"
#include "tardis/numerics.hpp"

#include <vector>

namespace support {

inline tardis::ModelConfig toy_config(std::uint64_t seed = 1, std::size_t n_classes = 3) {
    tardis::ModelConfig c;
    c.n_classes = n_classes;
    c.seed = seed;
    return c;
}

// Random examples with lengths in [min_len, max_len] and labels in [0, n_classes).
inline tardis::Slice random_slice(std::size_t n, std::uint64_t seed, std::int64_t period = 0, std::size_t min_len = 3,
                                  std::size_t max_len = 12, std::size_t vocab = 200, std::size_t n_classes = 3) {
    tardis::Rng rng(seed);
    tardis::Slice out;
    for (std::size_t i = 0; i < n; ++i) {
        tardis::TemporalExample ex;
        const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
        for (std::size_t t = 0; t < len; ++t) ex.token_ids.push_back(static_cast<std::int32_t>(rng.uniform_index(vocab)));
        ex.label = static_cast<std::int32_t>(rng.uniform_index(n_classes));
        ex.period = period;
        out.push_back(std::move(ex));
    }
    return out;
}

// Two classes drawing tokens from disjoint ranges [0, 100) and [100, 200).
inline tardis::Slice separable_slice(std::size_t n, std::uint64_t seed) {
    tardis::Rng rng(seed);
    tardis::Slice out;
    for (std::size_t i = 0; i < n; ++i) {
        tardis::TemporalExample ex;
        ex.label = static_cast<std::int32_t>(i % 2);
        for (std::size_t t = 0; t < 10; ++t)
            ex.token_ids.push_back(static_cast<std::int32_t>(100 * ex.label + static_cast<std::int32_t>(rng.uniform_index(100))));
        out.push_back(std::move(ex));
    }
    return out;
}

// A model with a non-zero head so steering changes logits.
inline tardis::Model random_model(const tardis::ModelConfig& c) {
    tardis::Model m = tardis::init_model(c);
    tardis::Rng rng(tardis::derive_seed(c.seed, "test-head"));
    auto p = m.parameters();
    for (std::size_t i = m.head_w(); i < m.head_b() + c.n_classes; ++i) p[i] = rng.uniform(-0.5, 0.5);
    return m;
}

inline std::vector<double> row(const tardis::Matrix& m, std::size_t r) {
    return {m.row(r).begin(), m.row(r).end()};
}

} // namespace support
