#pragma once

// Offline training of the encoder and initial decoder: mean squared
// prediction error with weight decay folded into the loss, exact
// reverse-mode gradients, Adam, and dataset standardization.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "ardl/encoder.hpp"
#include "ardl/simulation.hpp"

namespace ardl {

using Dataset = std::vector<SampleRecord>;

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 256;
    int epochs = 100;
    double weight_decay = 1e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t rng_seed = 0;
    bool standardize = true;

    void validate() const {
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (batch_size < 1)
            throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs < 0");
    }
};

struct TrainReport {
    std::vector<double> epoch_loss;
    double final_rmse = 0.0;
    double wall_clock_s = 0.0;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Standardization.
// ---------------------------------------------------------------------------

/// Affine per-column statistics for history columns and residual channels.
/// Zero-variance columns get their std clamped to 1.
struct Standardizer {
    Eigen::VectorXd h_mean = Eigen::VectorXd::Zero(kHistoryCols);
    Eigen::VectorXd h_std = Eigen::VectorXd::Ones(kHistoryCols);
    Vector17d d_mean = Vector17d::Zero();
    Vector17d d_std = Vector17d::Ones();

    MatrixXd standardize_history(const HistoryMatrix& H) const {
        return (H.rowwise() - h_mean.transpose()).array().rowwise() /
               h_std.transpose().array();
    }
    Vector17d standardize_delta(const Vector17d& d) const {
        return (d - d_mean).cwiseQuotient(d_std);
    }
    Vector17d destandardize_delta(const Vector17d& d) const {
        return d.cwiseProduct(d_std) + d_mean;
    }
};

inline Standardizer fit_standardizer(const Dataset& dataset) {
    if (dataset.empty())
        throw std::invalid_argument("fit_standardizer: empty dataset");
    Standardizer s;
    Eigen::VectorXd h_sum = Eigen::VectorXd::Zero(kHistoryCols);
    Eigen::VectorXd h_sq = Eigen::VectorXd::Zero(kHistoryCols);
    long h_rows = 0;
    Vector17d d_sum = Vector17d::Zero();
    Vector17d d_sq = Vector17d::Zero();
    for (const auto& rec : dataset) {
        h_sum += rec.H.colwise().sum().transpose();
        h_sq += rec.H.array().square().colwise().sum().matrix().transpose();
        h_rows += rec.H.rows();
        d_sum += rec.delta;
        d_sq += rec.delta.array().square().matrix();
    }
    const double n = static_cast<double>(dataset.size());
    s.h_mean = h_sum / static_cast<double>(h_rows);
    s.d_mean = d_sum / n;
    auto finish = [](Eigen::VectorXd& out_std, const Eigen::VectorXd& sq,
                     const Eigen::VectorXd& mean, double count) {
        Eigen::VectorXd var = sq / count - mean.array().square().matrix();
        out_std = var.cwiseMax(0.0).cwiseSqrt();
        for (Eigen::Index i = 0; i < out_std.size(); ++i)
            if (out_std(i) < 1e-12) out_std(i) = 1.0;
    };
    Eigen::VectorXd hs, ds;
    finish(hs, h_sq, s.h_mean, static_cast<double>(h_rows));
    finish(ds, d_sq, s.d_mean, n);
    s.h_std = hs;
    s.d_std = ds;
    return s;
}

/// Returns the scaled dataset plus the statistics used to scale it.
inline std::pair<Dataset, Standardizer> standardize(const Dataset& dataset) {
    const Standardizer s = fit_standardizer(dataset);
    Dataset scaled = dataset;
    for (auto& rec : scaled) {
        rec.H = s.standardize_history(rec.H);
        rec.delta = s.standardize_delta(rec.delta);
    }
    return {std::move(scaled), s};
}

// ---------------------------------------------------------------------------
// Loss and gradients.
// ---------------------------------------------------------------------------

struct BatchGradients {
    EncoderParams enc;
    DecoderMatrix theta;
    double loss = 0.0;
};

inline EncoderParams zero_like(EncoderParams p) {
    p.visit([](const std::string&, MatrixXd& m) { m.setZero(); });
    return p;
}

inline double weight_penalty(EncoderParams& params, const DecoderMatrix& Theta,
                             double weight_decay) {
    if (weight_decay == 0.0) return 0.0;
    double sq = Theta.squaredNorm();
    params.visit([&](const std::string&, MatrixXd& m) { sq += m.squaredNorm(); });
    return weight_decay * sq;
}

/// Mean squared residual prediction error over the batch plus
/// weight_decay * ||all weights||^2.
inline double batch_loss(EncoderParams& params, const DecoderMatrix& Theta,
                         const std::vector<const SampleRecord*>& batch,
                         const EncoderConfig& cfg, double weight_decay) {
    if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
    double data = 0.0;
    for (const SampleRecord* rec : batch) {
        const LatentFeature z = encode(rec->H, params, cfg);
        data += (rec->delta - Theta * z).squaredNorm();
    }
    return data / static_cast<double>(batch.size()) +
           weight_penalty(params, Theta, weight_decay);
}

inline double batch_loss(EncoderParams& params, const DecoderMatrix& Theta,
                         std::span<const SampleRecord> batch,
                         const EncoderConfig& cfg, double weight_decay) {
    std::vector<const SampleRecord*> ptrs;
    ptrs.reserve(batch.size());
    for (const auto& r : batch) ptrs.push_back(&r);
    return batch_loss(params, Theta, ptrs, cfg, weight_decay);
}

/// Exact reverse-mode gradient of batch_loss for every tensor and Theta.
inline BatchGradients gradient(EncoderParams& params,
                               const DecoderMatrix& Theta,
                               const std::vector<const SampleRecord*>& batch,
                               const EncoderConfig& cfg, double weight_decay) {
    if (batch.empty()) throw std::invalid_argument("gradient: empty batch");
    BatchGradients out;
    out.enc = zero_like(params);
    out.theta = DecoderMatrix::Zero(Theta.rows(), Theta.cols());

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    thread_local ad::Tape tape;
    for (const SampleRecord* rec : batch) {
        tape.clear();
        EncoderVars v = enc_detail::bind(tape, params);
        const ad::Var theta_var = tape.leaf(Theta);
        const ad::Var z = enc_detail::build_encode(tape, v, rec->H, cfg);
        // Row-vector prediction: z (1 x ell) times Theta^T gives 1 x 17.
        const ad::Var pred = tape.matmul(z, tape.transpose(theta_var));
        const ad::Var err =
            tape.sub(pred, tape.leaf(rec->delta.transpose()));
        const ad::Var loss = tape.squared_norm(err);
        out.loss += inv_b * tape.value(loss)(0, 0);
        tape.backward(loss, inv_b);

        std::vector<const ad::Var*> vars;
        v.visit([&](const std::string&, ad::Var& var) { vars.push_back(&var); });
        size_t i = 0;
        out.enc.visit([&](const std::string&, MatrixXd& g) {
            g += tape.grad(*vars[i++]);
        });
        out.theta += tape.grad(theta_var);
    }

    if (weight_decay != 0.0) {
        std::vector<const MatrixXd*> values;
        params.visit([&](const std::string&, MatrixXd& m) {
            values.push_back(&m);
        });
        size_t i = 0;
        out.enc.visit([&](const std::string&, MatrixXd& g) {
            g += 2.0 * weight_decay * (*values[i++]);
        });
        out.theta += 2.0 * weight_decay * Theta;
        out.loss += weight_penalty(params, Theta, weight_decay);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct AdamState {
    EncoderParams m_enc, v_enc;
    DecoderMatrix m_theta, v_theta;
    long step = 0;

    static AdamState init(EncoderParams& params, const DecoderMatrix& Theta) {
        AdamState s;
        s.m_enc = zero_like(params);
        s.v_enc = zero_like(params);
        s.m_theta = DecoderMatrix::Zero(Theta.rows(), Theta.cols());
        s.v_theta = DecoderMatrix::Zero(Theta.rows(), Theta.cols());
        return s;
    }
};

namespace trainer_detail {

inline void adam_update_tensor(MatrixXd& param, const MatrixXd& grad,
                               MatrixXd& m, MatrixXd& v, double lr, double b1,
                               double b2, double eps, double bc1, double bc2) {
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / bc1) /
                     ((v.array() / bc2).sqrt() + eps);
}

}  // namespace trainer_detail

/// Standard Adam with bias correction; weight decay is already part of the
/// loss gradients.
inline void adam_step(EncoderParams& params, DecoderMatrix& Theta,
                      const BatchGradients& grads, AdamState& state,
                      const TrainConfig& cfg) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(state.step));

    std::vector<MatrixXd*> gs, ms, vs;
    const_cast<EncoderParams&>(grads.enc)
        .visit([&](const std::string&, MatrixXd& g) { gs.push_back(&g); });
    state.m_enc.visit([&](const std::string&, MatrixXd& m) { ms.push_back(&m); });
    state.v_enc.visit([&](const std::string&, MatrixXd& m) { vs.push_back(&m); });
    size_t i = 0;
    params.visit([&](const std::string&, MatrixXd& p) {
        trainer_detail::adam_update_tensor(p, *gs[i], *ms[i], *vs[i],
                                           cfg.learning_rate, cfg.adam_beta1,
                                           cfg.adam_beta2, cfg.adam_eps, bc1,
                                           bc2);
        ++i;
    });
    trainer_detail::adam_update_tensor(Theta, grads.theta, state.m_theta,
                                       state.v_theta, cfg.learning_rate,
                                       cfg.adam_beta1, cfg.adam_beta2,
                                       cfg.adam_eps, bc1, bc2);
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainResult {
    EncoderParams params;
    DecoderMatrix theta0;
    Standardizer standardizer;
    TrainReport report;
};

/// Shuffled mini-batch epochs; deterministic given the seed. The dataset is
/// standardized internally when cfg.standardize is set, and theta0 lives in
/// standardized delta space.
inline TrainResult train(const Dataset& dataset, const EncoderConfig& enc_cfg,
                         const TrainConfig& cfg) {
    cfg.validate();
    enc_cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");

    const auto t_start = std::chrono::steady_clock::now();
    TrainResult result;
    Dataset scaled;
    if (cfg.standardize) {
        auto [ds, sc] = standardize(dataset);
        scaled = std::move(ds);
        result.standardizer = sc;
    } else {
        scaled = dataset;
    }

    result.params = init_encoder_params(enc_cfg, cfg.rng_seed);
    result.theta0 = DecoderMatrix::Zero(kStateDim, enc_cfg.ell);
    AdamState opt = AdamState::init(result.params, result.theta0);
    result.report.seed = cfg.rng_seed;

    std::mt19937_64 shuffle_rng(cfg.rng_seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<size_t> order(scaled.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        long counted = 0;
        for (size_t at = 0; at < order.size();
             at += static_cast<size_t>(cfg.batch_size)) {
            const size_t end =
                std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
            std::vector<const SampleRecord*> batch;
            batch.reserve(end - at);
            for (size_t k = at; k < end; ++k) batch.push_back(&scaled[order[k]]);

            BatchGradients grads = gradient(result.params, result.theta0, batch,
                                            enc_cfg, cfg.weight_decay);
            if (!std::isfinite(grads.loss))
                throw std::runtime_error(
                    "train: non-finite loss at epoch " + std::to_string(epoch) +
                    ", batch offset " + std::to_string(at));
            loss_sum += grads.loss * static_cast<double>(batch.size());
            counted += static_cast<long>(batch.size());
            adam_step(result.params, result.theta0, grads, opt, cfg);
        }
        result.report.epoch_loss.push_back(loss_sum /
                                           static_cast<double>(counted));
    }

    double sq = 0.0;
    for (const auto& rec : scaled) {
        const LatentFeature z = encode(rec.H, result.params, enc_cfg);
        sq += (rec.delta - result.theta0 * z).squaredNorm();
    }
    result.report.final_rmse = std::sqrt(
        sq / (static_cast<double>(scaled.size()) * double(kStateDim)));
    result.report.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      t_start)
            .count();
    return result;
}

}  // namespace ardl
