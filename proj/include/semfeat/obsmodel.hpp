#pragma once

#include <Eigen/Dense>

#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "semfeat/common.hpp"
#include "semfeat/stats.hpp"

namespace semfeat {

// ---------------------------------------------------------------------------
// Closed forms for the linear-Gaussian observation model with a factorized
// Bernoulli posterior. The extended input is [features | covariates]; the
// covariate block always carries the constant intercept, which doubles as
// the bias latent.
// ---------------------------------------------------------------------------

/// E[z] and E[zz^T] for a posterior row whose entries are Bernoulli means
/// (deterministic entries, e.g. the bias 1, have zero variance under the
/// same formula).
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> linear_expectations(const Eigen::VectorXd& q) {
    Eigen::VectorXd var = q.array() * (1.0 - q.array());
    Eigen::MatrixXd ezz = q * q.transpose();
    ezz.diagonal() += var;
    return {q, ezz};
}

/// Same second moment with an explicit variance vector; real-valued
/// covariates are deterministic inputs with variance 0.
inline Eigen::MatrixXd second_moment(const Eigen::VectorXd& mean, const Eigen::VectorXd& var) {
    Eigen::MatrixXd ezz = mean * mean.transpose();
    ezz.diagonal() += var;
    return ezz;
}

/// Exact expected log density under isotropic noise:
///   -1/(2s2) ||y - L u||^2 - 1/(2s2) tr(L diag(var) L^T) - nd/2 log(2 pi s2)
inline double linear_T1_exact(const Eigen::VectorXd& mean, const Eigen::VectorXd& var,
                              const Eigen::VectorXd& y, const Eigen::MatrixXd& lambda, double sigma2) {
    Eigen::VectorXd resid = y - lambda * mean;
    double trace_term = (lambda.array().square().matrix() * var.asDiagonal()).sum();
    double nd = static_cast<double>(y.size());
    return -0.5 / sigma2 * (resid.squaredNorm() + trace_term) -
           0.5 * nd * std::log(2.0 * M_PI * sigma2);
}

struct LinearMStepResult {
    Eigen::MatrixXd lambda;
    double sigma2 = 1.0;
    bool ridged = false;
};

/// Closed-form M step: Lambda = (sum_t y u^T)(sum_t u u^T + diag(var))^-1,
/// then the isotropic variance including the trace correction. A singular
/// Gram falls back to a small ridge with a warning.
inline LinearMStepResult linear_mstep(const Eigen::MatrixXd& u_rows, const Eigen::MatrixXd& var_rows,
                                      const Eigen::MatrixXd& y_rows, double ridge_eps = 1e-8,
                                      bool warn = true) {
    Eigen::Index t_count = u_rows.rows(), width = u_rows.cols(), nd = y_rows.cols();
    Eigen::MatrixXd gram = u_rows.transpose() * u_rows;
    gram.diagonal() += var_rows.colwise().sum();
    Eigen::MatrixXd cross = y_rows.transpose() * u_rows;  // nd x width

    LinearMStepResult r;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
    double dmax = ldlt.vectorD().cwiseAbs().maxCoeff();
    double dmin = ldlt.vectorD().cwiseAbs().minCoeff();
    if (ldlt.info() != Eigen::Success || !(dmax > 0.0) || dmin < 1e-12 * dmax) {
        if (warn) std::cerr << "[semfeat] singular Gram in linear M step; adding ridge\n";
        gram.diagonal().array() += ridge_eps * std::max(1.0, dmax);
        ldlt.compute(gram);
        r.ridged = true;
    }
    r.lambda = ldlt.solve(cross.transpose()).transpose();

    double acc = 0.0;
    for (Eigen::Index t = 0; t < t_count; ++t) {
        Eigen::VectorXd resid = y_rows.row(t).transpose() - r.lambda * u_rows.row(t).transpose();
        double trace_term =
            (r.lambda.array().square().matrix() * var_rows.row(t).transpose().asDiagonal()).sum();
        acc += resid.squaredNorm() + trace_term;
    }
    r.sigma2 = std::max(acc / (static_cast<double>(nd) * static_cast<double>(t_count)), kSigma2Floor);
    (void)width;
    return r;
}

// ---------------------------------------------------------------------------
// Observation model interface. Rows of Q are posteriors over binary
// features, X carries the covariates (intercept first). Generic models
// evaluate and fit at the posterior mode; the exact linear model sums the
// latent out in closed form.
// ---------------------------------------------------------------------------

class ObservationModel {
public:
    virtual ~ObservationModel() = default;

    virtual int n_features() const = 0;
    virtual int n_covariates() const = 0;
    virtual int output_dim() const = 0;

    virtual Eigen::VectorXd predict(const Eigen::VectorXd& z, const Eigen::VectorXd& x) const = 0;

    /// log N(y | f([z; x]), Sigma) at a point.
    double point_loglik(const Eigen::VectorXd& z, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& y) const {
        Eigen::VectorXd resid = y - predict(z, x);
        Eigen::VectorXd s2 = sigma2_vec();
        double acc = 0.0;
        for (Eigen::Index d = 0; d < y.size(); ++d)
            acc += resid(d) * resid(d) / s2(d) + std::log(2.0 * M_PI * s2(d));
        return -0.5 * acc;
    }

    /// E_q[log p(y|z)] for one item. Default: evaluate at the mode of q.
    virtual double expected_loglik(const Eigen::VectorXd& q_row, const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& y) const {
        Eigen::VectorXd z(q_row.size());
        for (Eigen::Index i = 0; i < q_row.size(); ++i) z(i) = q_row(i) > 0.5 ? 1.0 : 0.0;
        return point_loglik(z, x, y);
    }

    /// M step on the whole training block.
    virtual void fit(const Eigen::MatrixXd& q, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                     Rng& rng) = 0;

    virtual Eigen::VectorXd sigma2_vec() const = 0;

    /// Structural edits when the feature set changes. The new feature column
    /// seeds the first E step, so it must be usable immediately.
    virtual void add_feature_column(Rng& rng, const Eigen::VectorXd& target_scale) = 0;
    virtual void remove_feature_column(int j) = 0;

    virtual std::unique_ptr<ObservationModel> clone() const = 0;
    virtual json to_json() const = 0;
    virtual std::string kind() const = 0;
};

// ---------------------------------------------------------------------------
// Exact linear model (isotropic noise), fitted in closed form on the soft
// posterior.
// ---------------------------------------------------------------------------

class LinearExactModel final : public ObservationModel {
public:
    LinearExactModel(int nf, int nc, int nd, double sigma2 = 1.0)
        : nf_(nf), nc_(nc), lambda_(Eigen::MatrixXd::Zero(nd, nf + nc)), sigma2_(sigma2) {}

    int n_features() const override { return nf_; }
    int n_covariates() const override { return nc_; }
    int output_dim() const override { return static_cast<int>(lambda_.rows()); }

    const Eigen::MatrixXd& lambda() const { return lambda_; }
    Eigen::MatrixXd& lambda() { return lambda_; }
    double sigma2() const { return sigma2_; }
    void set_sigma2(double s2) { sigma2_ = std::max(s2, kSigma2Floor); }

    Eigen::VectorXd predict(const Eigen::VectorXd& z, const Eigen::VectorXd& x) const override {
        return lambda_ * assemble(z, x);
    }

    double expected_loglik(const Eigen::VectorXd& q_row, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& y) const override {
        Eigen::VectorXd u = assemble(q_row, x);
        Eigen::VectorXd var = Eigen::VectorXd::Zero(u.size());
        var.head(nf_) = q_row.array() * (1.0 - q_row.array());
        return linear_T1_exact(u, var, y, lambda_, sigma2_);
    }

    void fit(const Eigen::MatrixXd& q, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
             Rng&) override {
        Eigen::Index t_count = q.rows();
        Eigen::MatrixXd u(t_count, nf_ + nc_), var = Eigen::MatrixXd::Zero(t_count, nf_ + nc_);
        u.leftCols(nf_) = q;
        u.rightCols(nc_) = x;
        var.leftCols(nf_) = q.array() * (1.0 - q.array());
        LinearMStepResult r = linear_mstep(u, var, y);
        lambda_ = std::move(r.lambda);
        sigma2_ = r.sigma2;
    }

    Eigen::VectorXd sigma2_vec() const override {
        return Eigen::VectorXd::Constant(lambda_.rows(), sigma2_);
    }

    void add_feature_column(Rng& rng, const Eigen::VectorXd& target_scale) override {
        Eigen::MatrixXd next(lambda_.rows(), lambda_.cols() + 1);
        next.leftCols(nf_) = lambda_.leftCols(nf_);
        next.rightCols(nc_) = lambda_.rightCols(nc_);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (Eigen::Index d = 0; d < lambda_.rows(); ++d)
            next(d, nf_) = 0.5 * target_scale(d) * gauss(rng);
        lambda_ = std::move(next);
        ++nf_;
    }

    void remove_feature_column(int j) override {
        Eigen::MatrixXd next(lambda_.rows(), lambda_.cols() - 1);
        for (Eigen::Index c = 0, k = 0; c < lambda_.cols(); ++c) {
            if (c == j) continue;
            next.col(k++) = lambda_.col(c);
        }
        lambda_ = std::move(next);
        --nf_;
    }

    std::unique_ptr<ObservationModel> clone() const override {
        return std::make_unique<LinearExactModel>(*this);
    }

    json to_json() const override {
        json j;
        j["kind"] = kind();
        j["n_features"] = nf_;
        j["n_covariates"] = nc_;
        j["sigma2"] = sigma2_;
        j["lambda"] = json::array();
        for (Eigen::Index r = 0; r < lambda_.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < lambda_.cols(); ++c) row.push_back(lambda_(r, c));
            j["lambda"].push_back(row);
        }
        return j;
    }

    std::string kind() const override { return "linear_exact"; }

private:
    Eigen::VectorXd assemble(const Eigen::VectorXd& z, const Eigen::VectorXd& x) const {
        if (z.size() != nf_ || x.size() != nc_)
            throw ValidationError("linear model: input width mismatch");
        Eigen::VectorXd u(nf_ + nc_);
        u.head(nf_) = z;
        u.tail(nc_) = x;
        return u;
    }

    int nf_, nc_;
    Eigen::MatrixXd lambda_;  // nd x (nf + nc)
    double sigma2_;
};

// ---------------------------------------------------------------------------
// Generic linear model: diagonal noise, fitted by per-dimension least
// squares on the posterior mode. The diagonal weighting leaves each
// dimension's argmin unchanged, so the solve is plain normal equations with
// the same ridge fallback.
// ---------------------------------------------------------------------------

class LinearGenericModel final : public ObservationModel {
public:
    LinearGenericModel(int nf, int nc, int nd)
        : nf_(nf), nc_(nc), lambda_(Eigen::MatrixXd::Zero(nd, nf + nc)),
          sigma2_(Eigen::VectorXd::Ones(nd)) {}

    int n_features() const override { return nf_; }
    int n_covariates() const override { return nc_; }
    int output_dim() const override { return static_cast<int>(lambda_.rows()); }

    const Eigen::MatrixXd& lambda() const { return lambda_; }

    Eigen::VectorXd predict(const Eigen::VectorXd& z, const Eigen::VectorXd& x) const override {
        Eigen::VectorXd u(nf_ + nc_);
        u.head(nf_) = z;
        u.tail(nc_) = x;
        return lambda_ * u;
    }

    void fit(const Eigen::MatrixXd& q, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
             Rng&) override {
        Eigen::Index t_count = q.rows();
        Eigen::MatrixXd u(t_count, nf_ + nc_);
        for (Eigen::Index t = 0; t < t_count; ++t)
            for (Eigen::Index i = 0; i < q.cols(); ++i) u(t, i) = q(t, i) > 0.5 ? 1.0 : 0.0;
        u.rightCols(nc_) = x;
        Eigen::MatrixXd var = Eigen::MatrixXd::Zero(t_count, nf_ + nc_);
        LinearMStepResult r = linear_mstep(u, var, y);
        lambda_ = std::move(r.lambda);
        for (Eigen::Index d = 0; d < y.cols(); ++d) {
            double acc = (y.col(d) - u * lambda_.row(d).transpose()).squaredNorm();
            sigma2_(d) = std::max(acc / static_cast<double>(t_count), kSigma2Floor);
        }
    }

    Eigen::VectorXd sigma2_vec() const override { return sigma2_; }

    void add_feature_column(Rng& rng, const Eigen::VectorXd& target_scale) override {
        Eigen::MatrixXd next(lambda_.rows(), lambda_.cols() + 1);
        next.leftCols(nf_) = lambda_.leftCols(nf_);
        next.rightCols(nc_) = lambda_.rightCols(nc_);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (Eigen::Index d = 0; d < lambda_.rows(); ++d)
            next(d, nf_) = 0.5 * target_scale(d) * gauss(rng);
        lambda_ = std::move(next);
        ++nf_;
    }

    void remove_feature_column(int j) override {
        Eigen::MatrixXd next(lambda_.rows(), lambda_.cols() - 1);
        for (Eigen::Index c = 0, k = 0; c < lambda_.cols(); ++c) {
            if (c == j) continue;
            next.col(k++) = lambda_.col(c);
        }
        lambda_ = std::move(next);
        --nf_;
    }

    std::unique_ptr<ObservationModel> clone() const override {
        return std::make_unique<LinearGenericModel>(*this);
    }

    json to_json() const override {
        json j;
        j["kind"] = kind();
        j["n_features"] = nf_;
        j["n_covariates"] = nc_;
        j["sigma2"] = std::vector<double>(sigma2_.data(), sigma2_.data() + sigma2_.size());
        j["lambda"] = json::array();
        for (Eigen::Index r = 0; r < lambda_.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < lambda_.cols(); ++c) row.push_back(lambda_(r, c));
            j["lambda"].push_back(row);
        }
        return j;
    }

    std::string kind() const override { return "linear_generic"; }

private:
    int nf_, nc_;
    Eigen::MatrixXd lambda_;
    Eigen::VectorXd sigma2_;
};

// ---------------------------------------------------------------------------
// Two-hidden-layer regressor: 64 and 32 rectified units, dropout 0.1 during
// training, Adam steps, diagonal output noise. Weights are re-initialized at
// every fit unless warm start is requested; evaluation never drops units.
// ---------------------------------------------------------------------------

struct NonlinearConfig {
    int hidden1 = 64;
    int hidden2 = 32;
    double dropout = 0.1;
    double learning_rate = 1e-3;
    int epochs = 100;
    int batch_size = 32;
    bool warm_start = false;
};

class NonlinearModel final : public ObservationModel {
public:
    NonlinearModel(int nf, int nc, int nd, NonlinearConfig cfg = {}, std::uint64_t init_seed = 0)
        : nf_(nf), nc_(nc), nd_(nd), cfg_(cfg), sigma2_(Eigen::VectorXd::Ones(nd)) {
        Rng rng(init_seed);
        init_weights(rng);
    }

    int n_features() const override { return nf_; }
    int n_covariates() const override { return nc_; }
    int output_dim() const override { return nd_; }

    Eigen::VectorXd predict(const Eigen::VectorXd& z, const Eigen::VectorXd& x) const override {
        Eigen::VectorXd u(nf_ + nc_);
        u.head(nf_) = z;
        u.tail(nc_) = x;
        Eigen::VectorXd h1 = (w1_ * u + b1_).cwiseMax(0.0);
        Eigen::VectorXd h2 = (w2_ * h1 + b2_).cwiseMax(0.0);
        return w3_ * h2 + b3_;
    }

    void fit(const Eigen::MatrixXd& q, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
             Rng& rng) override {
        if (!cfg_.warm_start) init_weights(rng);
        Eigen::Index t_count = q.rows();
        Eigen::MatrixXd u(t_count, nf_ + nc_);
        for (Eigen::Index t = 0; t < t_count; ++t)
            for (Eigen::Index i = 0; i < q.cols(); ++i) u(t, i) = q(t, i) > 0.5 ? 1.0 : 0.0;
        u.rightCols(nc_) = x;

        Eigen::VectorXd inv_s2 = sigma2_.cwiseInverse();
        AdamState adam(*this);
        std::vector<int> order(static_cast<size_t>(t_count));
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            deterministic_shuffle(order, rng);
            for (Eigen::Index lo = 0; lo < t_count; lo += cfg_.batch_size) {
                Eigen::Index hi = std::min<Eigen::Index>(t_count, lo + cfg_.batch_size);
                Eigen::MatrixXd ub(hi - lo, nf_ + nc_), yb(hi - lo, nd_);
                for (Eigen::Index k = lo; k < hi; ++k) {
                    ub.row(k - lo) = u.row(order[static_cast<size_t>(k)]);
                    yb.row(k - lo) = y.row(order[static_cast<size_t>(k)]);
                }
                train_step(ub, yb, inv_s2, adam, rng);
            }
        }

        for (Eigen::Index d = 0; d < nd_; ++d) {
            double acc = 0.0;
            for (Eigen::Index t = 0; t < t_count; ++t) {
                Eigen::VectorXd pred = predict(u.row(t).head(nf_), u.row(t).tail(nc_));
                double r = y(t, d) - pred(d);
                acc += r * r;
            }
            sigma2_(d) = std::max(acc / static_cast<double>(t_count), kSigma2Floor);
        }
    }

    /// One Adam step on a fixed batch; exposed so the descent property is
    /// testable in isolation.
    void train_step_public(const Eigen::MatrixXd& u_batch, const Eigen::MatrixXd& y_batch, Rng& rng) {
        Eigen::VectorXd inv_s2 = sigma2_.cwiseInverse();
        AdamState adam(*this);
        train_step(u_batch, y_batch, inv_s2, adam, rng);
    }

    /// Weighted squared error (dropout off).
    double batch_loss(const Eigen::MatrixXd& u_batch, const Eigen::MatrixXd& y_batch) const {
        Eigen::VectorXd inv_s2 = sigma2_.cwiseInverse();
        double acc = 0.0;
        for (Eigen::Index t = 0; t < u_batch.rows(); ++t) {
            Eigen::VectorXd pred = predict(u_batch.row(t).head(nf_), u_batch.row(t).tail(nc_));
            Eigen::VectorXd r = y_batch.row(t).transpose() - pred;
            acc += (r.array().square() * inv_s2.array()).sum();
        }
        return acc / static_cast<double>(u_batch.rows());
    }

    Eigen::VectorXd sigma2_vec() const override { return sigma2_; }

    void add_feature_column(Rng& rng, const Eigen::VectorXd&) override {
        ++nf_;
        init_weights(rng);
    }

    void remove_feature_column(int) override {
        --nf_;
        Rng rng(17);
        init_weights(rng);
    }

    std::unique_ptr<ObservationModel> clone() const override {
        return std::make_unique<NonlinearModel>(*this);
    }

    json to_json() const override {
        auto mat = [](const Eigen::MatrixXd& m) {
            json rows = json::array();
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                json row = json::array();
                for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
                rows.push_back(row);
            }
            return rows;
        };
        auto vec = [](const Eigen::VectorXd& v) {
            return std::vector<double>(v.data(), v.data() + v.size());
        };
        json j;
        j["kind"] = kind();
        j["n_features"] = nf_;
        j["n_covariates"] = nc_;
        j["output_dim"] = nd_;
        j["config"] = {{"hidden1", cfg_.hidden1}, {"hidden2", cfg_.hidden2}, {"dropout", cfg_.dropout},
                       {"learning_rate", cfg_.learning_rate}, {"epochs", cfg_.epochs},
                       {"batch_size", cfg_.batch_size}, {"warm_start", cfg_.warm_start}};
        j["w1"] = mat(w1_);
        j["b1"] = vec(b1_);
        j["w2"] = mat(w2_);
        j["b2"] = vec(b2_);
        j["w3"] = mat(w3_);
        j["b3"] = vec(b3_);
        j["sigma2"] = vec(sigma2_);
        return j;
    }

    std::string kind() const override { return "nonlinear"; }

    void load_weights(const json& j) {
        auto mat = [](const json& rows) {
            Eigen::MatrixXd m(rows.size(), rows.empty() ? 0 : rows[0].size());
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c)
                    m(r, c) = rows[static_cast<size_t>(r)][static_cast<size_t>(c)].get<double>();
            return m;
        };
        auto vec = [](const json& a) {
            Eigen::VectorXd v(a.size());
            for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = a[static_cast<size_t>(i)].get<double>();
            return v;
        };
        w1_ = mat(j["w1"]);
        b1_ = vec(j["b1"]);
        w2_ = mat(j["w2"]);
        b2_ = vec(j["b2"]);
        w3_ = mat(j["w3"]);
        b3_ = vec(j["b3"]);
        sigma2_ = vec(j["sigma2"]);
    }

private:
    struct AdamState {
        explicit AdamState(const NonlinearModel& m) {
            auto zero_like = [](const Eigen::MatrixXd& w) {
                return Eigen::MatrixXd::Zero(w.rows(), w.cols()).eval();
            };
            for (const Eigen::MatrixXd* w : {&m.w1_, &m.w2_, &m.w3_}) {
                mw.push_back(zero_like(*w));
                vw.push_back(zero_like(*w));
            }
            for (const Eigen::VectorXd* b : {&m.b1_, &m.b2_, &m.b3_}) {
                mb.push_back(Eigen::VectorXd::Zero(b->size()));
                vb.push_back(Eigen::VectorXd::Zero(b->size()));
            }
        }
        std::vector<Eigen::MatrixXd> mw, vw;
        std::vector<Eigen::VectorXd> mb, vb;
        int step = 0;
    };

    void init_weights(Rng& rng) {
        auto he = [&](Eigen::Index rows, Eigen::Index cols) {
            std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / static_cast<double>(cols)));
            Eigen::MatrixXd w(rows, cols);
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = gauss(rng);
            return w;
        };
        w1_ = he(cfg_.hidden1, nf_ + nc_);
        b1_ = Eigen::VectorXd::Zero(cfg_.hidden1);
        w2_ = he(cfg_.hidden2, cfg_.hidden1);
        b2_ = Eigen::VectorXd::Zero(cfg_.hidden2);
        w3_ = he(nd_, cfg_.hidden2);
        b3_ = Eigen::VectorXd::Zero(nd_);
    }

    void train_step(const Eigen::MatrixXd& ub, const Eigen::MatrixXd& yb, const Eigen::VectorXd& inv_s2,
                    AdamState& adam, Rng& rng) {
        Eigen::Index n = ub.rows();
        Eigen::MatrixXd a0 = ub.transpose();  // (nf+nc) x n
        Eigen::MatrixXd z1 = (w1_ * a0).colwise() + b1_;
        Eigen::MatrixXd a1 = z1.cwiseMax(0.0);
        Eigen::MatrixXd mask1 = dropout_mask(a1.rows(), n, rng);
        a1 = a1.cwiseProduct(mask1);
        Eigen::MatrixXd z2 = (w2_ * a1).colwise() + b2_;
        Eigen::MatrixXd a2 = z2.cwiseMax(0.0);
        Eigen::MatrixXd mask2 = dropout_mask(a2.rows(), n, rng);
        a2 = a2.cwiseProduct(mask2);
        Eigen::MatrixXd pred = (w3_ * a2).colwise() + b3_;

        Eigen::MatrixXd resid = pred - yb.transpose();  // nd x n
        Eigen::MatrixXd grad_out = (resid.array().colwise() * inv_s2.array()) * (2.0 / static_cast<double>(n));

        Eigen::MatrixXd gw3 = grad_out * a2.transpose();
        Eigen::VectorXd gb3 = grad_out.rowwise().sum();
        Eigen::MatrixXd d2 = (w3_.transpose() * grad_out).cwiseProduct(mask2);
        d2 = d2.cwiseProduct((z2.array() > 0.0).cast<double>().matrix());
        Eigen::MatrixXd gw2 = d2 * a1.transpose();
        Eigen::VectorXd gb2 = d2.rowwise().sum();
        Eigen::MatrixXd d1 = (w2_.transpose() * d2).cwiseProduct(mask1);
        d1 = d1.cwiseProduct((z1.array() > 0.0).cast<double>().matrix());
        Eigen::MatrixXd gw1 = d1 * a0.transpose();
        Eigen::VectorXd gb1 = d1.rowwise().sum();

        ++adam.step;
        adam_update(w1_, gw1, adam.mw[0], adam.vw[0], adam.step);
        adam_update(w2_, gw2, adam.mw[1], adam.vw[1], adam.step);
        adam_update(w3_, gw3, adam.mw[2], adam.vw[2], adam.step);
        adam_update_vec(b1_, gb1, adam.mb[0], adam.vb[0], adam.step);
        adam_update_vec(b2_, gb2, adam.mb[1], adam.vb[1], adam.step);
        adam_update_vec(b3_, gb3, adam.mb[2], adam.vb[2], adam.step);
    }

    Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, Rng& rng) const {
        if (cfg_.dropout <= 0.0) return Eigen::MatrixXd::Ones(rows, cols);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        double keep = 1.0 - cfg_.dropout;
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = unif(rng) < keep ? 1.0 / keep : 0.0;
        return m;
    }

    void adam_update(Eigen::MatrixXd& w, const Eigen::MatrixXd& g, Eigen::MatrixXd& m, Eigen::MatrixXd& v,
                     int step) const {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v.array().matrix() + (1.0 - b2) * g.cwiseProduct(g);
        double mc = 1.0 - std::pow(b1, step), vc = 1.0 - std::pow(b2, step);
        w.array() -= cfg_.learning_rate * (m.array() / mc) / ((v.array() / vc).sqrt() + eps);
    }

    void adam_update_vec(Eigen::VectorXd& w, const Eigen::VectorXd& g, Eigen::VectorXd& m,
                         Eigen::VectorXd& v, int step) const {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v.array().matrix() + (1.0 - b2) * g.cwiseProduct(g);
        double mc = 1.0 - std::pow(b1, step), vc = 1.0 - std::pow(b2, step);
        w.array() -= cfg_.learning_rate * (m.array() / mc) / ((v.array() / vc).sqrt() + eps);
    }

    int nf_, nc_, nd_;
    NonlinearConfig cfg_;
    Eigen::MatrixXd w1_, w2_, w3_;
    Eigen::VectorXd b1_, b2_, b3_;
    Eigen::VectorXd sigma2_;
};

// ---------------------------------------------------------------------------
// Checkpoint round trip
// ---------------------------------------------------------------------------

inline std::unique_ptr<ObservationModel> model_from_json(const json& j) {
    std::string kind = j.at("kind").get<std::string>();
    int nf = j.at("n_features").get<int>();
    int nc = j.at("n_covariates").get<int>();
    if (kind == "linear_exact" || kind == "linear_generic") {
        const json& rows = j.at("lambda");
        int nd = static_cast<int>(rows.size());
        Eigen::MatrixXd lam(nd, nf + nc);
        for (int r = 0; r < nd; ++r)
            for (int c = 0; c < nf + nc; ++c) lam(r, c) = rows[static_cast<size_t>(r)][static_cast<size_t>(c)].get<double>();
        if (kind == "linear_exact") {
            auto m = std::make_unique<LinearExactModel>(nf, nc, nd, j.at("sigma2").get<double>());
            m->lambda() = lam;
            return m;
        }
        auto m = std::make_unique<LinearGenericModel>(nf, nc, nd);
        // Rebuild through fit-free assignment: serialize format matches.
        json jj = m->to_json();
        (void)jj;
        // LinearGenericModel lacks direct setters; reconstruct via JSON of
        // the same shape using a temporary exact model is not applicable, so
        // expose assignment here.
        throw ConfigError("linear_generic checkpoints not yet supported");
    }
    if (kind == "nonlinear") {
        NonlinearConfig cfg;
        const json& c = j.at("config");
        cfg.hidden1 = c.at("hidden1").get<int>();
        cfg.hidden2 = c.at("hidden2").get<int>();
        cfg.dropout = c.at("dropout").get<double>();
        cfg.learning_rate = c.at("learning_rate").get<double>();
        cfg.epochs = c.at("epochs").get<int>();
        cfg.batch_size = c.at("batch_size").get<int>();
        cfg.warm_start = c.at("warm_start").get<bool>();
        auto m = std::make_unique<NonlinearModel>(nf, nc, j.at("output_dim").get<int>(), cfg);
        m->load_weights(j);
        return m;
    }
    throw ConfigError("unknown model kind '" + kind + "'");
}

}  // namespace semfeat
