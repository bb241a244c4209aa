#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "qsrec/qsrec.hpp"

namespace qsrec::testing {

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline PackedSymMatrix random_symmetric(std::mt19937_64& rng, std::size_t n) {
    return PackedSymMatrix(n, random_vector(rng, packed_size(n)));
}

// Dense double loop over all (i, j); shares no code with quadratic_form.
inline double dense_quadratic(const std::vector<double>& dense, std::size_t n, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) s += y[i] * dense[i * n + j] * y[j];
    return s;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

// Random items already in the upper half space.
inline ItemMatrix random_items(std::mt19937_64& rng, std::size_t v, std::size_t n) {
    ItemMatrix items;
    items.dim = n;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t i = 0; i < v; ++i) {
        for (std::size_t k = 0; k + 1 < n; ++k) items.values.push_back(static_cast<float>(u(rng)));
        items.values.push_back(static_cast<float>(std::exp(u(rng))));
        items.ids.push_back(static_cast<std::uint32_t>(i));
    }
    return items;
}

// Planted two-interest corpus: items [0, V/2) and [V/2, V) form two clusters;
// each session interleaves walks in both, the first cluster twice as often.
inline SessionCorpus two_interest_corpus(std::uint64_t seed, std::size_t sessions, std::size_t v = 200,
                                         std::size_t min_len = 6, std::size_t max_len = 12) {
    std::mt19937_64 rng(seed);
    const std::size_t half = v / 2;
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::uniform_int_distribution<std::size_t> pick(0, half - 1);
    std::uniform_int_distribution<std::size_t> step(1, 3);
    std::bernoulli_distribution first(2.0 / 3.0);
    SessionCorpus c;
    for (std::size_t i = 0; i < v; ++i) c.vocab.add("i" + std::to_string(i));
    for (std::size_t s = 0; s < sessions; ++s) {
        const bool a_is_zero = (s % 2) == 0;  // which cluster is the dominant one
        std::size_t pos[2] = {pick(rng), pick(rng)};
        Session session;
        const std::size_t l = len(rng);
        for (std::size_t t = 0; t < l; ++t) {
            const bool dominant = first(rng);
            const std::size_t cluster = (dominant == a_is_zero) ? 0 : 1;
            pos[cluster] = (pos[cluster] + step(rng)) % half;
            session.push_back(static_cast<std::uint32_t>(cluster * half + pos[cluster]));
        }
        c.sessions.push_back(std::move(session));
    }
    return c;
}

}  // namespace qsrec::testing
