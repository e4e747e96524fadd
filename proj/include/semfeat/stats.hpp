#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "semfeat/common.hpp"
#include "semfeat/oracle.hpp"

namespace semfeat {

constexpr double kErrorRateEps = 1e-6;   // p^e clamp floor; ceiling is 0.5
constexpr double kPosteriorEps = 1e-12;  // q kept strictly inside (0,1)
constexpr double kSigma2Floor = 1e-8;    // variance floor on perfect fits

// ---------------------------------------------------------------------------
// Feature set: descriptors, their error rates, and the cached judgments.
// ---------------------------------------------------------------------------

struct FeatureSet {
    std::vector<FeatureDescriptor> descriptors;
    Eigen::VectorXd error_rates;  // p^e_i in [eps, 0.5]
    Eigen::MatrixXi judgments;    // T x n_f, entries in {0,1}

    int n_features() const { return static_cast<int>(descriptors.size()); }
    int n_items() const { return static_cast<int>(judgments.rows()); }

    void validate() const {
        if (error_rates.size() != n_features() || judgments.cols() != n_features())
            throw ValidationError("feature set arrays disagree on feature count");
        for (int i = 0; i < n_features(); ++i) {
            if (descriptors[static_cast<size_t>(i)].text.empty())
                throw ValidationError("feature " + std::to_string(i) + " has empty descriptor");
            for (int j = i + 1; j < n_features(); ++j)
                if (descriptors[static_cast<size_t>(i)] == descriptors[static_cast<size_t>(j)])
                    throw ValidationError("duplicate descriptor: '" +
                                          descriptors[static_cast<size_t>(i)].text + "'");
            if (error_rates(i) < 0.0 || error_rates(i) > 0.5)
                throw ValidationError("error rate out of [0, 0.5] for feature " + std::to_string(i));
        }
        for (int t = 0; t < judgments.rows(); ++t)
            for (int i = 0; i < judgments.cols(); ++i)
                if (judgments(t, i) != 0 && judgments(t, i) != 1)
                    throw ValidationError("judgment cell not a bit");
    }

    void add_feature(const FeatureDescriptor& d, const std::vector<int>& h_col, double error_rate) {
        int t_count = h_col.empty() ? n_items() : static_cast<int>(h_col.size());
        Eigen::MatrixXi h_new(t_count, n_features() + 1);
        if (n_features() > 0) h_new.leftCols(n_features()) = judgments;
        for (int t = 0; t < t_count; ++t) h_new(t, n_features()) = h_col.empty() ? 0 : h_col[static_cast<size_t>(t)];
        judgments = std::move(h_new);
        descriptors.push_back(d);
        Eigen::VectorXd pe(n_features());
        pe.head(n_features() - 1) = error_rates;
        pe(n_features() - 1) = error_rate;
        error_rates = std::move(pe);
    }

    void remove_feature(int j) {
        int nf = n_features();
        if (j < 0 || j >= nf) throw ValidationError("remove_feature: index out of range");
        descriptors.erase(descriptors.begin() + j);
        Eigen::VectorXd pe(nf - 1);
        Eigen::MatrixXi h(judgments.rows(), nf - 1);
        for (int i = 0, k = 0; i < nf; ++i) {
            if (i == j) continue;
            pe(k) = error_rates(i);
            h.col(k) = judgments.col(i);
            ++k;
        }
        error_rates = std::move(pe);
        judgments = std::move(h);
    }

    /// Fraction of items the feature is active on.
    double activation_rate(int i) const {
        if (judgments.rows() == 0) return 0.0;
        return judgments.col(i).cast<double>().mean();
    }
};

// ---------------------------------------------------------------------------
// Per-item feature log likelihoods
//   l1 = [h=1] log(1-pe) + [h=0] log pe
//   l0 = [h=1] log pe    + [h=0] log(1-pe)
// ---------------------------------------------------------------------------

struct FeatureLogLik {
    Eigen::MatrixXd ell1, ell0;  // T x n_f
};

inline FeatureLogLik feature_loglik(const FeatureSet& fs) {
    int t_count = fs.n_items(), nf = fs.n_features();
    FeatureLogLik ll;
    ll.ell1.resize(t_count, nf);
    ll.ell0.resize(t_count, nf);
    for (int i = 0; i < nf; ++i) {
        double pe = std::clamp(fs.error_rates(i), kErrorRateEps, 1.0 - kErrorRateEps);
        double log_pe = std::log(pe), log_1mpe = std::log1p(-pe);
        for (int t = 0; t < t_count; ++t) {
            bool h = fs.judgments(t, i) == 1;
            ll.ell1(t, i) = h ? log_1mpe : log_pe;
            ll.ell0(t, i) = h ? log_pe : log_1mpe;
        }
    }
    return ll;
}

// ---------------------------------------------------------------------------
// Bound terms over the factorized posterior. q holds q_i^t = q(z_i = 1).
// ---------------------------------------------------------------------------

/// T2 = sum_i q_i l1_i + (1-q_i) l0_i, per item.
inline Eigen::VectorXd term_T2(const Eigen::MatrixXd& q, const FeatureLogLik& ll) {
    if (q.rows() != ll.ell1.rows() || q.cols() != ll.ell1.cols())
        throw ValidationError("term_T2: shape mismatch");
    return (q.array() * ll.ell1.array() + (1.0 - q.array()) * ll.ell0.array()).rowwise().sum();
}

/// T3 = -sum_i q_i log q_i + (1-q_i) log(1-q_i), per item, with 0 log 0 = 0.
inline Eigen::VectorXd term_T3(const Eigen::MatrixXd& q) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(q.rows());
    for (Eigen::Index t = 0; t < q.rows(); ++t)
        for (Eigen::Index i = 0; i < q.cols(); ++i) {
            double qi = q(t, i);
            double h = 0.0;
            if (qi > 0.0) h -= qi * std::log(qi);
            if (qi < 1.0) h -= (1.0 - qi) * std::log(1.0 - qi);
            out(t) += h;
        }
    return out;
}

/// Eq.-style error update before clamping: mean posterior mass disagreeing
/// with the judgment.
inline Eigen::VectorXd error_rate_update_raw(const Eigen::MatrixXd& q, const Eigen::MatrixXi& h) {
    if (q.rows() != h.rows() || q.cols() != h.cols())
        throw ValidationError("error_rate_update: shape mismatch");
    Eigen::VectorXd pe(q.cols());
    for (Eigen::Index i = 0; i < q.cols(); ++i) {
        double acc = 0.0;
        for (Eigen::Index t = 0; t < q.rows(); ++t)
            acc += h(t, i) == 0 ? q(t, i) : 1.0 - q(t, i);
        pe(i) = acc / static_cast<double>(q.rows());
    }
    return pe;
}

/// Clamped to [eps, 0.5]: rates above 0.5 would mean an anti-correlated
/// oracle; re-mining owns label flips, so uncertainty caps at maximal.
inline Eigen::VectorXd update_error_rates(const Eigen::MatrixXd& q, const Eigen::MatrixXi& h) {
    Eigen::VectorXd pe = error_rate_update_raw(q, h);
    for (Eigen::Index i = 0; i < pe.size(); ++i) pe(i) = std::clamp(pe(i), kErrorRateEps, 0.5);
    return pe;
}

/// Elementwise threshold at 0.5; an exact 0.5 maps to 0.
inline Eigen::MatrixXi posterior_mode(const Eigen::MatrixXd& q) {
    Eigen::MatrixXi z(q.rows(), q.cols());
    for (Eigen::Index t = 0; t < q.rows(); ++t)
        for (Eigen::Index i = 0; i < q.cols(); ++i) z(t, i) = q(t, i) > 0.5 ? 1 : 0;
    return z;
}

}  // namespace semfeat
