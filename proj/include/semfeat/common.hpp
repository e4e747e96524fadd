#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace semfeat {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Oracle failures carry a retriable flag so callers can distinguish
/// transient transport problems from malformed/unsupported requests.
struct OracleError : std::runtime_error {
    bool retriable = false;
    explicit OracleError(const std::string& msg, bool retriable_ = false)
        : std::runtime_error(msg), retriable(retriable_) {}
};

// ---------------------------------------------------------------------------
// Hashing (stable across builds; used for transcript keys)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string fnv1a64_hex(const std::string& s) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(s);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic randomness helpers
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

/// Derive an independent stream from (seed, purpose, index). Keeps runs
/// resumable: no RNG state needs to be checkpointed, only the master seed.
inline Rng derived_rng(std::uint64_t seed, const std::string& purpose, std::uint64_t index = 0) {
    std::uint64_t h = fnv1a64(purpose);
    return Rng(seed ^ (h + 0x9e3779b97f4a7c15ull + index * 0xbf58476d1ce4e5b9ull));
}

/// Fisher-Yates with an explicit modulo draw. std::shuffle's draw sequence is
/// implementation-defined; this one is identical everywhere.
template <typename T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

/// Draw k distinct elements (order randomized) from v.
template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> v, size_t k, Rng& rng) {
    deterministic_shuffle(v, rng);
    if (v.size() > k) v.resize(k);
    return v;
}

// ---------------------------------------------------------------------------
// Small numerics
// ---------------------------------------------------------------------------

inline double sigmoid_clipped(double a) {
    a = std::clamp(a, -500.0, 500.0);
    return 1.0 / (1.0 + std::exp(-a));
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median of empty vector");
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Parallel loop over item indices. Chunked, no work stealing: results must be
// identical to the serial order for any per-index-independent body.
// ---------------------------------------------------------------------------

inline void parallel_for(size_t n, const std::function<void(size_t)>& body, bool parallel = false) {
    if (!parallel || n < 2) {
        for (size_t i = 0; i < n; ++i) body(i);
        return;
    }
    unsigned hw = std::thread::hardware_concurrency();
    size_t n_threads = std::max<size_t>(1, std::min<size_t>(hw == 0 ? 4 : hw, n));
    std::vector<std::thread> workers;
    workers.reserve(n_threads);
    size_t chunk = (n + n_threads - 1) / n_threads;
    for (size_t w = 0; w < n_threads; ++w) {
        size_t lo = w * chunk;
        size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([lo, hi, &body] {
            for (size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : workers) t.join();
}

}  // namespace semfeat
