#pragma once

// Deployment-time decoder adaptation. Each of the 17 output dimensions
// carries an independent Gaussian posterior over its decoder row, updated by
// a Kalman filter in parameter space with Joseph-form corrections.
// Innovation consistency (NIS + EWMA) drives covariance inflation, which is
// the adaptive-forgetting mechanism: P <- P / lambda with lambda in (0,1].

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ardl/encoder.hpp"

namespace ardl {

struct AdapterHyper {
    double alpha = 0.1;  // EWMA smoothing factor
    double eta = 8.0;    // consistency threshold
    double beta = 2.0;   // adaptation gain

    void validate() const {
        if (!(alpha > 0.0 && alpha <= 1.0))
            throw std::invalid_argument("AdapterHyper: alpha must be in (0,1]");
        if (!(eta > 0.0)) throw std::invalid_argument("AdapterHyper: eta <= 0");
        if (!(beta > 0.0)) throw std::invalid_argument("AdapterHyper: beta <= 0");
    }
};

/// Per-dimension posterior N(mu_j, P_j) with observation noise sigma2_j.
struct DecoderPosterior {
    std::vector<Eigen::VectorXd> mu;  // 17 rows, each length ell
    std::vector<MatrixXd> P;          // 17 covariances, ell x ell
    Vector17d sigma2 = Vector17d::Constant(2.5e-3);

    int latent_dim() const { return mu.empty() ? 0 : int(mu[0].size()); }

    DecoderMatrix theta() const {
        DecoderMatrix T(kStateDim, latent_dim());
        for (int j = 0; j < kStateDim; ++j) T.row(j) = mu[size_t(j)].transpose();
        return T;
    }
};

struct AdapterState {
    DecoderPosterior posterior;
    double g = 0.0;  // EWMA consistency statistic
    long step = 0;
    AdapterHyper hyper;
    double trace_ceiling = 0.0;  // per-dimension cap on trace(P)
};

struct StepDiagnostics {
    double psi = 0.0;
    double g = 0.0;
    double lambda = 1.0;
    Vector17d innovation = Vector17d::Zero();
    Vector17d S = Vector17d::Zero();
    Vector17d delta_hat = Vector17d::Zero();
    Vector17d gain_norm = Vector17d::Zero();
};

/// Posterior initialization: mu rows from Theta0, P = Lambda^-1 for every
/// output dimension, g = 0.
inline AdapterState adapter_init(const DecoderMatrix& Theta0,
                                 const MatrixXd& Lambda,
                                 const Vector17d& sigma2,
                                 const AdapterHyper& hyper = AdapterHyper{}) {
    hyper.validate();
    if (Theta0.rows() != kStateDim)
        throw std::invalid_argument("adapter_init: Theta0 must have 17 rows");
    const int ell = int(Theta0.cols());
    if (Lambda.rows() != ell || Lambda.cols() != ell)
        throw std::invalid_argument("adapter_init: Lambda shape mismatch");
    if (!Lambda.isApprox(Lambda.transpose(), 1e-10))
        throw std::invalid_argument("adapter_init: Lambda not symmetric");
    Eigen::LLT<MatrixXd> llt(Lambda);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument("adapter_init: Lambda not positive definite");
    if ((sigma2.array() <= 0.0).any())
        throw std::invalid_argument("adapter_init: sigma2 must be positive");

    MatrixXd P0 = llt.solve(MatrixXd::Identity(ell, ell));
    P0 = 0.5 * (P0 + P0.transpose().eval());

    AdapterState state;
    state.hyper = hyper;
    state.posterior.sigma2 = sigma2;
    state.posterior.mu.reserve(kStateDim);
    state.posterior.P.reserve(kStateDim);
    for (int j = 0; j < kStateDim; ++j) {
        state.posterior.mu.push_back(Theta0.row(j).transpose());
        state.posterior.P.push_back(P0);
    }
    state.trace_ceiling = 1e6 * P0.trace();
    return state;
}

/// lambda_k = 1 / (1 + beta * max(0, g_prev - eta)); exactly 1 when
/// g_prev <= eta.
inline double compute_lambda(double g_prev, const AdapterHyper& hyper) {
    const double excess = std::max(0.0, g_prev - hyper.eta);
    return 1.0 / (1.0 + hyper.beta * excess);
}

/// Covariance inflation P <- P / lambda (mean untouched), with a trace cap
/// guarding against unbounded growth under sustained mismatch.
inline void inflate(DecoderPosterior& posterior, double lambda,
                    double trace_ceiling = 0.0) {
    if (!(lambda > 0.0 && lambda <= 1.0))
        throw std::invalid_argument("inflate: lambda must be in (0,1]");
    if (lambda == 1.0 && trace_ceiling <= 0.0) return;
    for (auto& P : posterior.P) {
        if (lambda != 1.0) P /= lambda;
        if (trace_ceiling > 0.0) {
            const double tr = P.trace();
            if (tr > trace_ceiling) P *= trace_ceiling / tr;
        }
    }
}

/// Per-dimension predictive mean and variance: delta_hat_j = z^T mu_j,
/// S_j = z^T P_j z + sigma2_j.
inline std::pair<Vector17d, Vector17d> predict(const DecoderPosterior& posterior,
                                               const LatentFeature& z) {
    Vector17d delta_hat, S;
    for (int j = 0; j < kStateDim; ++j) {
        delta_hat(j) = posterior.mu[size_t(j)].dot(z);
        S(j) = z.dot(posterior.P[size_t(j)] * z) + posterior.sigma2(j);
    }
    return {delta_hat, S};
}

/// Joseph-form measurement update for every output dimension, followed by
/// symmetrization. Rank-1 forms keep the per-step cost at O(d * ell^2).
inline Vector17d update(DecoderPosterior& posterior, const LatentFeature& z,
                        const Vector17d& delta_obs) {
    if (!z.allFinite() || !delta_obs.allFinite())
        throw std::invalid_argument("update: non-finite input");
    Vector17d gain_norm;
    for (int j = 0; j < kStateDim; ++j) {
        Eigen::VectorXd& mu = posterior.mu[size_t(j)];
        MatrixXd& P = posterior.P[size_t(j)];
        const Eigen::VectorXd w = P * z;          // P z (P symmetric)
        const double S = z.dot(w) + posterior.sigma2(j);
        const Eigen::VectorXd K = w / S;
        mu += K * (delta_obs(j) - z.dot(mu));
        // (I - K z^T) P (I - K z^T)^T + sigma2 K K^T, expanded in rank-1 terms.
        // The transpose must be materialized: assigning P + P^T back into P
        // aliases otherwise and slowly destroys symmetry.
        P.noalias() -= K * w.transpose();
        P.noalias() -= w * K.transpose();
        P.noalias() += S * (K * K.transpose());
        P = 0.5 * (P + P.transpose().eval());
        gain_norm(j) = K.norm();
    }
    return gain_norm;
}

/// Normalized innovation squared: sum_j e_j^2 / S_j.
inline double innovation_score(const Vector17d& e, const Vector17d& S) {
    if ((S.array() <= 0.0).any())
        throw std::invalid_argument("innovation_score: S must be positive");
    return (e.array().square() / S.array()).sum();
}

/// EWMA of the consistency score.
inline double ewma(double g_prev, double psi, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw std::invalid_argument("ewma: alpha must be in (0,1]");
    return alpha * psi + (1.0 - alpha) * g_prev;
}

/// One full online tick in the published order: inflation from g_{k-1},
/// residual prediction (the value exported to the MPC), then after the
/// observation arrives the consistency statistics and the Joseph correction.
inline std::pair<Vector17d, StepDiagnostics> adapt_step(
    AdapterState& state, const LatentFeature& z, const Vector17d& delta_obs) {
    StepDiagnostics diag;
    diag.lambda = compute_lambda(state.g, state.hyper);
    inflate(state.posterior, diag.lambda, state.trace_ceiling);

    const auto [delta_hat, S] = predict(state.posterior, z);
    diag.delta_hat = delta_hat;
    diag.S = S;
    diag.innovation = delta_obs - delta_hat;
    diag.psi = innovation_score(diag.innovation, S);
    state.g = ewma(state.g, diag.psi, state.hyper.alpha);
    diag.g = state.g;

    diag.gain_norm = update(state.posterior, z, delta_obs);
    state.step += 1;
    return {delta_hat, diag};
}

}  // namespace ardl
