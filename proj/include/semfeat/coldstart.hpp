#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "semfeat/common.hpp"

namespace semfeat {

// ---------------------------------------------------------------------------
// Ratings matrix: sparse users x items, stored entries in 1..5, absent means
// unobserved (treated as 0 wherever the dense matrix convention applies).
// ---------------------------------------------------------------------------

struct RatingsMatrix {
    Eigen::SparseMatrix<double> m;  // users x items

    int n_users() const { return static_cast<int>(m.rows()); }
    int n_items() const { return static_cast<int>(m.cols()); }

    void validate() const {
        if (m.rows() <= 0 || m.cols() <= 0)
            throw ValidationError("ratings matrix has empty dimensions");
        for (int k = 0; k < m.outerSize(); ++k)
            for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it)
                if (it.value() < 1.0 || it.value() > 5.0)
                    throw ValidationError("rating out of range [1,5] at user " +
                                          std::to_string(it.row()) + ", item " +
                                          std::to_string(it.col()));
    }

    /// Observed (user index, rating) pairs for one item column.
    std::vector<std::pair<int, double>> item_ratings(int item) const {
        std::vector<std::pair<int, double>> out;
        for (Eigen::SparseMatrix<double>::InnerIterator it(m, item); it; ++it)
            out.emplace_back(static_cast<int>(it.row()), it.value());
        return out;
    }
};

/// Triplet file: one "user item rating" per line, comma or whitespace
/// separated. Ids are 0-based; dimensions are max id + 1. Lines starting
/// with '#' are skipped.
inline RatingsMatrix load_ratings(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open ratings file: " + path);
    std::vector<Eigen::Triplet<double>> trips;
    std::string line;
    long max_user = -1, max_item = -1;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        long u, i;
        double r;
        if (!(ss >> u >> i >> r))
            throw ParseError("ratings file " + path + ": bad triplet at line " + std::to_string(lineno));
        if (u < 0 || i < 0)
            throw ParseError("ratings file " + path + ": negative id at line " + std::to_string(lineno));
        if (r < 1.0 || r > 5.0)
            throw ParseError("ratings file " + path + ": rating out of range [1,5] at line " +
                             std::to_string(lineno));
        trips.emplace_back(static_cast<int>(u), static_cast<int>(i), r);
        max_user = std::max(max_user, u);
        max_item = std::max(max_item, i);
    }
    if (trips.empty()) throw ParseError("ratings file " + path + ": no entries");
    RatingsMatrix rm;
    rm.m.resize(max_user + 1, max_item + 1);
    rm.m.setFromTriplets(trips.begin(), trips.end());
    rm.validate();
    return rm;
}

// ---------------------------------------------------------------------------
// SVD embeddings
// ---------------------------------------------------------------------------

struct EmbeddingSet {
    Eigen::MatrixXd e;  // rows = entities, cols = k

    void validate() const {
        if (!e.allFinite()) throw ValidationError("embedding set contains non-finite entries");
    }
};

/// Thin SVD of the items x users matrix X^T = U S V^T.
struct SvdFactors {
    Eigen::MatrixXd u;   // items x k
    Eigen::VectorXd s;   // k
    Eigen::MatrixXd v;   // users x k
};

inline SvdFactors truncated_svd_items(const RatingsMatrix& r, int k) {
    if (k <= 0 || k > std::min(r.n_users(), r.n_items()))
        throw ValidationError("svd rank k=" + std::to_string(k) + " exceeds matrix dimensions");
    Eigen::MatrixXd dense = Eigen::MatrixXd(r.m).transpose();  // items x users
    Eigen::BDCSVD<Eigen::MatrixXd> svd(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
    SvdFactors f;
    f.u = svd.matrixU().leftCols(k);
    f.s = svd.singularValues().head(k);
    f.v = svd.matrixV().leftCols(k);
    return f;
}

/// The decomposition family: for any alpha in [0,1] and orthonormal R,
/// Y1 = U S^alpha R and Y2^T = R^T S^(1-alpha) V^T multiply back to U S V^T.
/// Returned as (items x k, users x k).
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> embedding_family(const SvdFactors& f, double alpha,
                                                                    const Eigen::MatrixXd& rot) {
    Eigen::VectorXd sa = f.s.array().pow(alpha);
    Eigen::VectorXd sb = f.s.array().pow(1.0 - alpha);
    Eigen::MatrixXd y1 = f.u * sa.asDiagonal() * rot;
    Eigen::MatrixXd y2t = rot.transpose() * sb.asDiagonal() * f.v.transpose();
    return {y1, y2t.transpose()};
}

/// Rank-k embeddings of items and users, with the R = I, alpha-split
/// convention. item_embeddings * user_embeddings^T reconstructs the
/// truncated items x users matrix.
inline std::pair<EmbeddingSet, EmbeddingSet> svd_embed(const RatingsMatrix& r, int k, double alpha = 0.5) {
    if (alpha < 0.0 || alpha > 1.0) throw ValidationError("alpha must be in [0,1]");
    SvdFactors f = truncated_svd_items(r, k);
    Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(k, k);
    auto [y1, y2] = embedding_family(f, alpha, eye);
    EmbeddingSet items{y1}, users{y2};
    items.validate();
    users.validate();
    return {items, users};
}

// ---------------------------------------------------------------------------
// Cosine similarity and item popularity
// ---------------------------------------------------------------------------

inline double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

/// Indices of the n items with the most observed ratings; ties go to the
/// smaller index.
inline std::vector<int> top_items_filter(const RatingsMatrix& r, int n) {
    if (n < 0 || n > r.n_items()) throw ValidationError("top_items_filter: n out of range");
    std::vector<std::pair<int, int>> counts(static_cast<size_t>(r.n_items()));
    for (int i = 0; i < r.n_items(); ++i) counts[static_cast<size_t>(i)] = {i, 0};
    for (int k = 0; k < r.m.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(r.m, k); it; ++it)
            counts[static_cast<size_t>(it.col())].second++;
    std::stable_sort(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<int> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(counts[static_cast<size_t>(i)].first);
    return out;
}

// ---------------------------------------------------------------------------
// Cold-start convergence simulation
// ---------------------------------------------------------------------------

struct ColdStartCurve {
    std::vector<int> schedule;     // strictly increasing rating counts
    std::vector<double> mean_cs;   // per count
    std::vector<double> p5, p95;   // 90% band
    int n_trials = 0;
};

namespace detail {

/// Embedding of a partial (zero-filled) item rating vector by least squares
/// against the fixed user-side factors from the full-data SVD. With
/// orthonormal V this is the projection x V S^-(1-alpha); the coordinate
/// frame stays that of the full decomposition, so curves are comparable.
inline Eigen::VectorXd fold_in(const Eigen::VectorXd& item_column, const SvdFactors& f, double alpha) {
    Eigen::VectorXd proj = f.v.transpose() * item_column;  // k
    Eigen::VectorXd out(f.s.size());
    for (int j = 0; j < f.s.size(); ++j) {
        double s = f.s(j);
        out(j) = s > 0.0 ? proj(j) * std::pow(s, -(1.0 - alpha)) : 0.0;
    }
    return out;
}

inline double percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    if (v.empty()) return 0.0;
    double idx = p * (static_cast<double>(v.size()) - 1.0);
    size_t lo = static_cast<size_t>(std::floor(idx));
    size_t hi = static_cast<size_t>(std::ceil(idx));
    double w = idx - static_cast<double>(lo);
    return v[lo] * (1.0 - w) + v[hi] * w;
}

}  // namespace detail

namespace detail {

/// Raw CS samples for one item: n_trials seeded rating orders, evaluated at
/// each scheduled count (truncated to the item's rating count, with the
/// full count always appended as the last entry).
inline std::pair<std::vector<int>, std::vector<std::vector<double>>> cold_start_samples(
    const RatingsMatrix& r, int item, std::vector<int> schedule, std::uint64_t seed, int n_trials,
    const SvdFactors& f, double alpha) {
    auto ratings = r.item_ratings(item);
    if (ratings.empty()) throw ValidationError("cold_start_sim: item " + std::to_string(item) + " has no ratings");
    std::sort(schedule.begin(), schedule.end());
    schedule.erase(std::unique(schedule.begin(), schedule.end()), schedule.end());
    while (!schedule.empty() && schedule.back() > static_cast<int>(ratings.size())) schedule.pop_back();
    if (schedule.empty() || schedule.back() != static_cast<int>(ratings.size()))
        schedule.push_back(static_cast<int>(ratings.size()));

    Eigen::VectorXd full_col = Eigen::VectorXd::Zero(r.n_users());
    for (auto& [u, val] : ratings) full_col(u) = val;
    Eigen::VectorXd y_full = fold_in(full_col, f, alpha);

    std::vector<std::vector<double>> cs_per_count(schedule.size());
    for (int trial = 0; trial < n_trials; ++trial) {
        auto order = ratings;
        Rng rng = derived_rng(seed, "cold_start", static_cast<std::uint64_t>(item) * 1000003ull +
                                                      static_cast<std::uint64_t>(trial));
        deterministic_shuffle(order, rng);
        Eigen::VectorXd col = Eigen::VectorXd::Zero(r.n_users());
        size_t added = 0;
        for (size_t ci = 0; ci < schedule.size(); ++ci) {
            while (added < static_cast<size_t>(schedule[ci])) {
                col(order[added].first) = order[added].second;
                ++added;
            }
            Eigen::VectorXd y = fold_in(col, f, alpha);
            cs_per_count[ci].push_back(cosine_similarity(y, y_full));
        }
    }
    return {schedule, cs_per_count};
}

inline ColdStartCurve aggregate_curve(const std::vector<int>& schedule,
                                      const std::vector<std::vector<double>>& samples, int n_trials) {
    ColdStartCurve curve;
    curve.n_trials = n_trials;
    for (size_t ci = 0; ci < schedule.size(); ++ci) {
        if (samples[ci].empty()) continue;
        const auto& v = samples[ci];
        curve.schedule.push_back(schedule[ci]);
        curve.mean_cs.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
        curve.p5.push_back(percentile(v, 0.05));
        curve.p95.push_back(percentile(v, 0.95));
    }
    return curve;
}

}  // namespace detail

/// One item's cold-start trajectory: zero its column, re-add the observed
/// ratings in seeded random orders, and record the cosine similarity of the
/// folded-in embedding against the full-data embedding at each scheduled
/// count. Counts beyond the item's rating count are truncated.
inline ColdStartCurve cold_start_sim(const RatingsMatrix& r, int item, const std::vector<int>& schedule,
                                     std::uint64_t seed, int n_trials, int k = 32, double alpha = 0.5,
                                     const SvdFactors* precomputed = nullptr) {
    SvdFactors local;
    const SvdFactors* f = precomputed;
    if (!f) {
        local = truncated_svd_items(r, k);
        f = &local;
    }
    auto [sched, samples] = detail::cold_start_samples(r, item, schedule, seed, n_trials, *f, alpha);
    return detail::aggregate_curve(sched, samples, n_trials);
}

/// Aggregate curve over a pool of items (Fig.-5-style): every item is run
/// for n_trials random orders and all raw samples pool by schedule count.
/// Items with fewer ratings than a given count do not contribute there.
inline ColdStartCurve cold_start_curve(const RatingsMatrix& r, const std::vector<int>& items,
                                       const std::vector<int>& schedule, std::uint64_t seed, int n_trials,
                                       int k = 32, double alpha = 0.5) {
    if (items.empty()) throw ValidationError("cold_start_curve: empty item pool");
    SvdFactors f = truncated_svd_items(r, k);
    std::vector<int> counts = schedule;
    std::sort(counts.begin(), counts.end());
    counts.erase(std::unique(counts.begin(), counts.end()), counts.end());
    std::vector<std::vector<double>> pooled(counts.size());
    for (int item : items) {
        auto [sched, samples] = detail::cold_start_samples(r, item, counts, seed, n_trials, f, alpha);
        for (size_t ci = 0; ci < sched.size(); ++ci) {
            auto pos = std::lower_bound(counts.begin(), counts.end(), sched[ci]);
            if (pos != counts.end() && *pos == sched[ci]) {
                auto& dst = pooled[static_cast<size_t>(pos - counts.begin())];
                dst.insert(dst.end(), samples[ci].begin(), samples[ci].end());
            }
        }
    }
    return detail::aggregate_curve(counts, pooled, n_trials);
}

}  // namespace semfeat
