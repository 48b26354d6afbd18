#pragma once

// Experiment orchestration: config schema, scenario builders, the four
// runners (training, decoder ablation, encoder ablation, closed-loop
// tracking), the gradient check front-end, and metrics.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ardl/adapter.hpp"
#include "ardl/config.hpp"
#include "ardl/io.hpp"
#include "ardl/mpc.hpp"
#include "ardl/trainer.hpp"

namespace ardl::harness {

namespace fs = std::filesystem;

enum class EncoderVariant { Full, TemporalOnly, CurrentStateOnly };
enum class DecoderVariant { Fixed, BayesOnly, FixedForgetting, Adaptive };

inline std::string to_string(EncoderVariant v) {
    switch (v) {
        case EncoderVariant::Full: return "full";
        case EncoderVariant::TemporalOnly: return "temporal-only";
        case EncoderVariant::CurrentStateOnly: return "current-state-only";
    }
    return "?";
}

inline std::string to_string(DecoderVariant v) {
    switch (v) {
        case DecoderVariant::Fixed: return "fixed";
        case DecoderVariant::BayesOnly: return "bayes-only";
        case DecoderVariant::FixedForgetting: return "fixed-forgetting";
        case DecoderVariant::Adaptive: return "adaptive";
    }
    return "?";
}

inline std::string to_string(ResidualMode m) {
    switch (m) {
        case ResidualMode::None: return "nominal-only";
        case ResidualMode::Frozen: return "frozen-theta0";
        case ResidualMode::Adaptive: return "adaptive";
        case ResidualMode::Oracle: return "oracle";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Experiment configuration.
// ---------------------------------------------------------------------------

struct AdapterConfig {
    double lambda_prior = 10.0;      // Lambda = lambda_prior * I_ell
    double sigma2_table = 2.5e-3;    // flat observation noise variance
    bool calibrated_sigma2 = true;   // use training residual variances instead
    double sigma2_scale = 4.0;       // margin on the calibrated variances
    AdapterHyper hyper;
    double fixed_forgetting = 0.5;

    Vector17d sigma2_for(const io::Checkpoint& ckpt) const {
        if (!calibrated_sigma2) return Vector17d::Constant(sigma2_table);
        return (sigma2_scale * ckpt.sigma2_train.array())
            .cwiseMax(1e-12)
            .matrix();
    }
};

struct TrainingDataConfig {
    std::vector<double> payloads = {0.0, 0.2, 0.4};
    std::vector<RefPlane> planes = {RefPlane::XZ, RefPlane::YZ,
                                    RefPlane::XY_MajorX, RefPlane::XY_MajorY};
    double segment_duration = 10.0;  // per payload x plane segment
    double dt = 0.02;
    double amplitude = 0.8;
    double period = 8.0;
    double coupling_gain = 0.4;
    double lag_tau = 0.15;
    Vector17d noise_std = ScenarioConfig::default_noise_std();
    std::uint64_t seed = 1;
};

struct EvalScenarioConfig {
    RefPlane plane = RefPlane::XZ;
    RefPlane plane_after = RefPlane::YZ;
    bool switch_plane = false;       // tracking scenarios switch at the shift
    double duration = 60.0;
    double dt = 0.02;
    double amplitude = 0.8;
    double period = 8.0;
    double payload = 0.3;
    bool payload_drop = true;        // payload released at duration/2
    double coupling_gain = 0.4;
    // Releasing the payload lightens the arm, so its reaction coupling on
    // the body changes regime as well.
    double coupling_gain_after = 0.4;
    double lag_tau = 0.15;
    Vector17d noise_std = ScenarioConfig::default_noise_std();

    double shift_time() const { return payload_drop ? duration / 2.0 : -1.0; }
};

struct ExperimentConfig {
    TrainingDataConfig training;
    EvalScenarioConfig eval;
    EncoderConfig encoder;
    TrainConfig train;
    AdapterConfig adapter;
    MpcConfig mpc;
    EncoderVariant encoder_variant = EncoderVariant::Full;
    DecoderVariant decoder_variant = DecoderVariant::Adaptive;
    NominalParams nominal;
    std::vector<std::uint64_t> seeds = {1};
    std::string out_dir = "runs/out";
    long warmup_steps = 250;         // grace period for consistency checks
    long rmse_window = 50;           // steps in the windowed RMSE
};

inline RefPlane plane_from_string(const std::string& s) {
    if (s == "xz") return RefPlane::XZ;
    if (s == "yz") return RefPlane::YZ;
    if (s == "xy_x") return RefPlane::XY_MajorX;
    if (s == "xy_y") return RefPlane::XY_MajorY;
    throw cfg::ConfigError("unknown plane selector: " + s);
}

inline EncoderVariant encoder_variant_from_string(const std::string& s) {
    if (s == "full") return EncoderVariant::Full;
    if (s == "temporal-only") return EncoderVariant::TemporalOnly;
    if (s == "current-state-only") return EncoderVariant::CurrentStateOnly;
    throw cfg::ConfigError("unknown encoder variant: " + s);
}

inline DecoderVariant decoder_variant_from_string(const std::string& s) {
    if (s == "fixed") return DecoderVariant::Fixed;
    if (s == "bayes-only") return DecoderVariant::BayesOnly;
    if (s == "fixed-forgetting") return DecoderVariant::FixedForgetting;
    if (s == "adaptive") return DecoderVariant::Adaptive;
    throw cfg::ConfigError("unknown decoder variant: " + s);
}

/// Full schema load; unknown keys and missing required fields are errors.
inline ExperimentConfig load_experiment_config(const std::string& path) {
    cfg::Reader r(cfg::parse_toml_file(path));
    ExperimentConfig e;

    e.out_dir = r.string_or("out_dir", e.out_dir);
    {
        std::vector<long> seeds = r.integer_array_or("seeds", {1});
        e.seeds.assign(seeds.begin(), seeds.end());
    }

    // Required core fields.
    e.eval.duration = r.number("scenario.duration");
    e.eval.dt = r.number("scenario.dt");
    e.train.epochs = static_cast<int>(r.integer("train.epochs"));
    e.train.batch_size = static_cast<int>(r.integer("train.batch_size"));

    e.eval.plane = plane_from_string(r.string_or("scenario.plane", "xz"));
    e.eval.plane_after =
        plane_from_string(r.string_or("scenario.plane_after", "yz"));
    e.eval.switch_plane = r.boolean_or("scenario.switch_plane", false);
    e.eval.amplitude = r.number_or("scenario.amplitude", e.eval.amplitude);
    e.eval.period = r.number_or("scenario.period", e.eval.period);
    e.eval.payload = r.number_or("scenario.payload", e.eval.payload);
    e.eval.payload_drop = r.boolean_or("scenario.payload_drop", true);
    e.eval.coupling_gain =
        r.number_or("scenario.coupling_gain", e.eval.coupling_gain);
    e.eval.coupling_gain_after =
        r.number_or("scenario.coupling_gain_after", e.eval.coupling_gain);
    e.eval.lag_tau = r.number_or("scenario.lag_tau", e.eval.lag_tau);

    {
        auto payloads = r.number_array_or("training.payloads", {0.0, 0.2, 0.4});
        e.training.payloads = payloads;
        e.training.segment_duration =
            r.number_or("training.segment_duration", 10.0);
        e.training.dt = r.number_or("training.dt", e.eval.dt);
        e.training.amplitude = r.number_or("training.amplitude", e.eval.amplitude);
        e.training.period = r.number_or("training.period", e.eval.period);
        e.training.coupling_gain =
            r.number_or("training.coupling_gain", e.eval.coupling_gain);
        e.training.lag_tau = r.number_or("training.lag_tau", e.eval.lag_tau);
        e.training.seed =
            static_cast<std::uint64_t>(r.integer_or("training.seed", 1));
    }

    e.encoder.h = static_cast<int>(r.integer_or("encoder.h", e.encoder.h));
    e.encoder.L_seg =
        static_cast<int>(r.integer_or("encoder.L_seg", e.encoder.L_seg));
    e.encoder.d_model =
        static_cast<int>(r.integer_or("encoder.d_model", e.encoder.d_model));
    e.encoder.n_heads =
        static_cast<int>(r.integer_or("encoder.n_heads", e.encoder.n_heads));
    e.encoder.n_layers =
        static_cast<int>(r.integer_or("encoder.n_layers", e.encoder.n_layers));
    e.encoder.d_ff =
        static_cast<int>(r.integer_or("encoder.d_ff", e.encoder.d_ff));
    {
        std::vector<long> pd = r.integer_array_or("encoder.proj_dims", {32, 16});
        e.encoder.proj_dims.assign(pd.begin(), pd.end());
        e.encoder.ell = e.encoder.proj_dims.back();
    }
    e.encoder_variant = encoder_variant_from_string(
        r.string_or("encoder.variant", "full"));

    e.train.learning_rate = r.number_or("train.learning_rate", 1e-3);
    e.train.weight_decay = r.number_or("train.weight_decay", 1e-5);
    e.train.rng_seed = static_cast<std::uint64_t>(r.integer_or("train.seed", 0));

    e.adapter.lambda_prior = r.number_or("adapter.lambda_prior", 10.0);
    e.adapter.sigma2_table = r.number_or("adapter.sigma2", 2.5e-3);
    e.adapter.calibrated_sigma2 = r.boolean_or("adapter.calibrated_sigma2", true);
    e.adapter.sigma2_scale = r.number_or("adapter.sigma2_scale", 4.0);
    e.adapter.hyper.alpha = r.number_or("adapter.alpha", 0.1);
    e.adapter.hyper.eta = r.number_or("adapter.eta", 8.0);
    e.adapter.hyper.beta = r.number_or("adapter.beta", 2.0);
    e.adapter.fixed_forgetting = r.number_or("adapter.fixed_forgetting", 0.5);
    e.decoder_variant = decoder_variant_from_string(
        r.string_or("adapter.variant", "adaptive"));

    e.mpc.N = static_cast<int>(r.integer_or("mpc.N", e.mpc.N));
    e.mpc.dt = r.number_or("mpc.dt", e.mpc.dt);
    e.mpc.max_iters = static_cast<int>(r.integer_or("mpc.max_iters", 60));
    e.mpc.smoothness_weight = r.number_or("mpc.smoothness_weight", 10.0);
    e.mpc.soft_constraint_weight =
        r.number_or("mpc.soft_constraint_weight", 1000.0);
    if (r.boolean_or("mpc.pin_joint_inputs", false)) e.mpc.pin_joint_inputs();

    e.warmup_steps = r.integer_or("warmup_steps", e.warmup_steps);
    e.rmse_window = r.integer_or("rmse_window", e.rmse_window);

    r.done();
    e.encoder.validate();
    e.train.validate();
    e.adapter.hyper.validate();
    e.mpc.validate();
    return e;
}

// ---------------------------------------------------------------------------
// Scenario builders and encoder variants.
// ---------------------------------------------------------------------------

inline ScenarioConfig make_training_segment(const TrainingDataConfig& t,
                                            RefPlane plane, double payload,
                                            std::uint64_t seed) {
    ScenarioConfig s;
    s.reference.plane = plane;
    s.reference.amplitude = t.amplitude;
    s.reference.period = t.period;
    s.duration = t.segment_duration;
    s.dt = t.dt;
    s.noise_std = t.noise_std;
    s.rng_seed = seed;
    ResidualRegime regime;
    regime.payload_mass = payload;
    regime.coupling_gain = t.coupling_gain;
    regime.lag_tau = t.lag_tau;
    regime.active_from = 0.0;
    regime.active_until = t.segment_duration;
    s.regimes = {regime};
    return s;
}

inline ScenarioConfig make_eval_scenario(const EvalScenarioConfig& e,
                                         std::uint64_t seed) {
    ScenarioConfig s;
    s.reference.plane = e.plane;
    s.reference.amplitude = e.amplitude;
    s.reference.period = e.period;
    if (e.switch_plane) {
        s.reference.switch_time = e.duration / 2.0;
        s.reference.plane_after = e.plane_after;
    }
    s.duration = e.duration;
    s.dt = e.dt;
    s.noise_std = e.noise_std;
    s.rng_seed = seed;

    ResidualRegime carry;
    carry.payload_mass = e.payload;
    carry.coupling_gain = e.coupling_gain;
    carry.lag_tau = e.lag_tau;
    carry.active_from = 0.0;
    carry.active_until = e.payload_drop ? e.duration / 2.0 : e.duration;
    s.regimes = {carry};
    if (e.payload_drop) {
        ResidualRegime released = carry;
        released.payload_mass = 0.0;
        released.coupling_gain = e.coupling_gain_after;
        released.active_from = e.duration / 2.0;
        released.active_until = e.duration;
        s.regimes.push_back(released);
    }
    return s;
}

/// Config transform for the encoder ablation arms.
inline EncoderConfig make_variant_config(const EncoderConfig& base,
                                         EncoderVariant variant) {
    EncoderConfig cfg = base;
    switch (variant) {
        case EncoderVariant::Full:
            break;
        case EncoderVariant::TemporalOnly:
            cfg.cross_blocks = false;
            break;
        case EncoderVariant::CurrentStateOnly:
            // The last (x,u) row seen as one segment through an MLP:
            // no attention layers, an extra projection stage for capacity.
            cfg.h = kHistoryCols - 1;
            cfg.L_seg = kHistoryCols;
            cfg.n_channels = 1;
            cfg.n_layers = 0;
            cfg.cross_blocks = false;
            cfg.proj_dims.insert(cfg.proj_dims.begin(), base.d_model);
            break;
    }
    cfg.validate();
    return cfg;
}

/// Window transform matching make_variant_config.
inline MatrixXd variant_window(const HistoryMatrix& H_std,
                               EncoderVariant variant) {
    if (variant != EncoderVariant::CurrentStateOnly) return H_std;
    return H_std.row(H_std.rows() - 1).transpose();
}

inline Dataset transform_for_variant(const Dataset& standardized,
                                     EncoderVariant variant) {
    if (variant != EncoderVariant::CurrentStateOnly) return standardized;
    Dataset out = standardized;
    for (auto& rec : out) rec.H = variant_window(rec.H, variant);
    return out;
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

struct VariantMetrics {
    std::string variant;
    std::uint64_t seed = 0;
    double rmse_pred = 0.0;
    double rmse_track = 0.0;
    long recovery_steps = 0;
};

inline io::json metrics_to_json(const std::vector<VariantMetrics>& rows) {
    io::json arr = io::json::array();
    for (const auto& m : rows)
        arr.push_back({{"variant", m.variant},
                       {"seed", m.seed},
                       {"rmse_pred", m.rmse_pred},
                       {"rmse_track", m.rmse_track},
                       {"recovery_steps", m.recovery_steps}});
    return arr;
}

inline void save_metrics(const fs::path& path,
                         const std::vector<VariantMetrics>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << metrics_to_json(rows).dump(1) << "\n";
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Trailing-window RMSE per element: w(k) over err_sq = ||e_k||^2 series.
inline std::vector<double> windowed_rmse(const std::vector<double>& err_sq,
                                         long window, int dim) {
    std::vector<double> out(err_sq.size(), 0.0);
    double acc = 0.0;
    for (size_t k = 0; k < err_sq.size(); ++k) {
        acc += err_sq[k];
        if (k >= static_cast<size_t>(window)) acc -= err_sq[k - size_t(window)];
        const long n = std::min<long>(window, long(k) + 1);
        out[k] = std::sqrt(acc / (double(n) * double(dim)));
    }
    return out;
}

/// Steps after the shift until the windowed RMSE returns to 1.2x the
/// pre-shift level and stays there for one full window. The error must
/// first exceed the threshold (a variant the shift never perturbs recovers
/// in zero steps).
inline long recovery_steps(const std::vector<double>& wrmse, long shift_step,
                           long warmup, long window) {
    const long n = static_cast<long>(wrmse.size());
    if (shift_step <= warmup || shift_step >= n) return 0;
    double base = 0.0;
    long count = 0;
    const long base_from = warmup + (shift_step - warmup) / 2;
    for (long k = base_from; k < shift_step; ++k) {
        base += wrmse[size_t(k)];
        ++count;
    }
    base /= std::max(1L, count);
    const double threshold = 1.2 * base;

    long first_exceed = -1;
    for (long k = shift_step; k < n; ++k)
        if (wrmse[size_t(k)] > threshold) {
            first_exceed = k;
            break;
        }
    if (first_exceed < 0) return 0;

    for (long k = first_exceed; k < n; ++k) {
        if (wrmse[size_t(k)] > threshold) continue;
        bool sustained = true;
        const long dwell_end = std::min(n, k + window);
        for (long j = k; j < dwell_end; ++j)
            if (wrmse[size_t(j)] > threshold) {
                sustained = false;
                break;
            }
        if (sustained) return k - shift_step;
    }
    return n - shift_step;
}

// ---------------------------------------------------------------------------
// Training runner.
// ---------------------------------------------------------------------------

struct TrainOutput {
    io::Checkpoint checkpoint;
    TrainReport report;
    Dataset dataset;  // unscaled samples, for reuse by callers
};

/// Collects the multi-regime training corpus (payload x plane grid under the
/// PD policy), trains the requested encoder variant, and computes the
/// per-channel residual variances used as calibrated observation noise.
inline TrainOutput run_training(const ExperimentConfig& exp,
                                EncoderVariant variant) {
    Dataset all;
    std::uint64_t sub_seed = exp.training.seed;
    for (double payload : exp.training.payloads)
        for (RefPlane plane : exp.training.planes) {
            const ScenarioConfig seg = make_training_segment(
                exp.training, plane, payload, sub_seed++);
            const auto policy = make_pd_policy(seg, exp.nominal);
            Dataset part =
                generate_dataset(seg, exp.nominal, exp.encoder.h, policy);
            all.insert(all.end(), part.begin(), part.end());
        }
    if (all.empty()) throw std::runtime_error("run_training: no samples");

    const EncoderConfig variant_cfg = make_variant_config(exp.encoder, variant);

    auto [scaled, scaler] = standardize(all);
    const Dataset variant_ds = transform_for_variant(scaled, variant);

    TrainConfig tc = exp.train;
    tc.standardize = false;  // already scaled above
    TrainResult tr = train(variant_ds, variant_cfg, tc);

    TrainOutput out;
    out.checkpoint.config = variant_cfg;
    out.checkpoint.params = std::move(tr.params);
    out.checkpoint.theta0 = std::move(tr.theta0);
    out.checkpoint.standardizer = scaler;
    out.checkpoint.seed = tc.rng_seed;
    out.checkpoint.train_config = {
        {"learning_rate", tc.learning_rate},
        {"batch_size", tc.batch_size},
        {"epochs", tc.epochs},
        {"weight_decay", tc.weight_decay},
        {"variant", to_string(variant)}};
    out.report = tr.report;

    // Per-channel second moment of the training residual errors, the basis
    // for calibrated observation noise.
    Vector17d sq = Vector17d::Zero();
    for (const auto& rec : variant_ds) {
        const LatentFeature z =
            encode(rec.H, out.checkpoint.params, variant_cfg);
        const Vector17d e = rec.delta - out.checkpoint.theta0 * z;
        sq += e.array().square().matrix();
    }
    out.checkpoint.sigma2_train =
        (sq / double(variant_ds.size())).cwiseMax(1e-12);
    out.dataset = std::move(all);
    return out;
}

// ---------------------------------------------------------------------------
// Decoder-ablation (open-loop prediction) runner.
// ---------------------------------------------------------------------------

struct PredictionRun {
    // ||e||^2 per step in physical units (standardized errors rescaled by
    // the per-channel target std), so the noise-only kinematic channels do
    // not drown the dynamic ones.
    std::vector<double> err_sq;
    std::vector<double> lambda_trace;  // per step
    std::vector<double> psi_trace;
    std::vector<double> g_trace;
    std::vector<double> t;
    long shift_step = -1;
    double rmse_pred = 0.0;
    double rmse_track = 0.0;  // PD position tracking error
};

/// Open-loop prediction run under the PD policy: the decoder variant only
/// changes how (and whether) the posterior is updated.
inline PredictionRun run_prediction(const io::Checkpoint& ckpt,
                                    const ScenarioConfig& scenario,
                                    const NominalParams& params,
                                    DecoderVariant variant,
                                    const AdapterConfig& acfg,
                                    EncoderVariant enc_variant,
                                    std::uint64_t seed) {
    io::Checkpoint local = ckpt;  // params are touched by encode bindings
    const EncoderConfig& ecfg = local.config;
    const int ell = ecfg.ell;

    ScenarioConfig run_cfg = scenario;
    run_cfg.rng_seed = seed;
    run_cfg.validate();

    const MatrixXd Lambda =
        acfg.lambda_prior * MatrixXd::Identity(ell, ell);
    AdapterState state =
        adapter_init(local.theta0, Lambda, acfg.sigma2_for(local), acfg.hyper);

    const int n_steps =
        static_cast<int>(std::llround(run_cfg.duration / run_cfg.dt));
    std::mt19937_64 rng(run_cfg.rng_seed);
    SystemState x;
    x.p = reference_at(run_cfg.reference, 0.0).p;
    LagState lag = LagState::Zero();
    // CurrentStateOnly reuses the standard 16-row window (the transform picks
    // the last row), so warm-up is identical across variants.
    const int window_h = (enc_variant == EncoderVariant::CurrentStateOnly)
                             ? 15
                             : ecfg.h;
    HistoryBuffer buffer(window_h);

    PredictionRun out;
    double track_sq = 0.0;
    long track_count = 0;
    int prev_regime = run_cfg.regime_index(0.0);

    for (int k = 0; k < n_steps; ++k) {
        const double t = k * run_cfg.dt;
        const FlatReference ref = reference_at(run_cfg.reference, t);
        const ControlInput u = pd_tracking_control(x, ref, params, PdGains{});
        const HistoryMatrix H = push_history(buffer, x, u);
        const ResidualRegime regime = run_cfg.regime_at(t);
        const int regime_now = run_cfg.regime_index(t);
        if (regime_now != prev_regime && out.shift_step < 0)
            out.shift_step = k;
        prev_regime = regime_now;

        const auto [x_next, next_lag] = true_step(
            x, u, lag, regime, params, run_cfg.noise_std, rng, run_cfg.dt);
        const Vector17d delta =
            residual_target(x_next, x, u, params, run_cfg.dt);

        if (k >= window_h) {
            const MatrixXd H_std =
                variant_window(local.standardizer.standardize_history(H),
                               enc_variant);
            const LatentFeature z = encode(H_std, local.params, ecfg);
            const Vector17d delta_std =
                local.standardizer.standardize_delta(delta);

            double lambda = 1.0;
            switch (variant) {
                case DecoderVariant::Fixed:
                case DecoderVariant::BayesOnly:
                    lambda = 1.0;
                    break;
                case DecoderVariant::FixedForgetting:
                    lambda = acfg.fixed_forgetting;
                    break;
                case DecoderVariant::Adaptive:
                    lambda = compute_lambda(state.g, state.hyper);
                    break;
            }
            if (variant != DecoderVariant::Fixed)
                inflate(state.posterior, lambda, state.trace_ceiling);

            const auto [delta_hat, S] = predict(state.posterior, z);
            const Vector17d e = delta_std - delta_hat;
            const double psi = innovation_score(e, S);
            state.g = ewma(state.g, psi, state.hyper.alpha);
            if (variant != DecoderVariant::Fixed)
                update(state.posterior, z, delta_std);

            const Vector17d e_phys =
                e.cwiseProduct(local.standardizer.d_std);
            out.err_sq.push_back(e_phys.squaredNorm());
            out.lambda_trace.push_back(lambda);
            out.psi_trace.push_back(psi);
            out.g_trace.push_back(state.g);
            out.t.push_back(t);
        }
        track_sq += (x.p - ref.p).squaredNorm();
        ++track_count;
        x = x_next;
        lag = next_lag;
    }

    // shift_step was counted in world steps; errors start at window_h.
    if (out.shift_step >= 0) out.shift_step -= window_h;

    double sq = 0.0;
    for (double v : out.err_sq) sq += v;
    out.rmse_pred = std::sqrt(
        sq / (double(out.err_sq.size()) * double(kStateDim)));
    out.rmse_track = std::sqrt(track_sq / double(track_count));
    return out;
}

struct DecoderAblationReport {
    std::vector<VariantMetrics> rows;
    std::map<std::string, double> mean_rmse;
    std::map<std::string, double> mean_recovery;
    PredictionRun adaptive_example;  // seed[0] trace for the shift-shape check
    long warmup_steps = 0;
    long window = 0;
};

inline DecoderAblationReport run_decoder_ablation(const ExperimentConfig& exp,
                                                  const io::Checkpoint& ckpt) {
    DecoderAblationReport report;
    report.warmup_steps = exp.warmup_steps;
    report.window = exp.rmse_window;
    const ScenarioConfig scenario = make_eval_scenario(exp.eval, 0);

    const DecoderVariant variants[] = {
        DecoderVariant::Fixed, DecoderVariant::BayesOnly,
        DecoderVariant::FixedForgetting, DecoderVariant::Adaptive};
    std::map<std::string, std::vector<double>> rmses, recoveries;

    for (DecoderVariant variant : variants) {
        for (std::uint64_t seed : exp.seeds) {
            PredictionRun run =
                run_prediction(ckpt, scenario, exp.nominal, variant,
                               exp.adapter, exp.encoder_variant, seed);
            const auto wr =
                windowed_rmse(run.err_sq, exp.rmse_window, kStateDim);
            const long rec = recovery_steps(wr, run.shift_step,
                                            exp.warmup_steps, exp.rmse_window);
            VariantMetrics m;
            m.variant = to_string(variant);
            m.seed = seed;
            m.rmse_pred = run.rmse_pred;
            m.rmse_track = run.rmse_track;
            m.recovery_steps = rec;
            report.rows.push_back(m);
            rmses[m.variant].push_back(m.rmse_pred);
            recoveries[m.variant].push_back(double(rec));
            if (variant == DecoderVariant::Adaptive && seed == exp.seeds.front())
                report.adaptive_example = std::move(run);
        }
    }
    for (auto& [name, v] : rmses) report.mean_rmse[name] = mean_of(v);
    for (auto& [name, v] : recoveries) report.mean_recovery[name] = mean_of(v);
    return report;
}

// ---------------------------------------------------------------------------
// Encoder-ablation runner.
// ---------------------------------------------------------------------------

struct EncoderAblationReport {
    std::map<std::string, double> rmse;  // variant -> held-out RMSE
    std::vector<VariantMetrics> rows;
};

/// Trains all three encoder variants on the experiment's training corpus and
/// scores open-loop prediction (frozen decoders) on a held-out run.
inline EncoderAblationReport run_encoder_ablation(const ExperimentConfig& exp) {
    EncoderAblationReport report;
    const EncoderVariant variants[] = {EncoderVariant::CurrentStateOnly,
                                       EncoderVariant::TemporalOnly,
                                       EncoderVariant::Full};
    EvalScenarioConfig held = exp.eval;
    held.payload_drop = false;  // stationary held-out run per variant

    for (EncoderVariant variant : variants) {
        const TrainOutput trained = run_training(exp, variant);
        double sq_sum = 0.0;
        long count = 0;
        for (std::uint64_t seed : exp.seeds) {
            PredictionRun run = run_prediction(
                trained.checkpoint, make_eval_scenario(held, seed),
                exp.nominal, DecoderVariant::Fixed, exp.adapter, variant, seed);
            for (double v : run.err_sq) sq_sum += v;
            count += static_cast<long>(run.err_sq.size());

            VariantMetrics m;
            m.variant = to_string(variant);
            m.seed = seed;
            m.rmse_pred = run.rmse_pred;
            m.rmse_track = run.rmse_track;
            m.recovery_steps = 0;
            report.rows.push_back(m);
        }
        report.rmse[to_string(variant)] =
            std::sqrt(sq_sum / (double(count) * double(kStateDim)));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Closed-loop tracking runner.
// ---------------------------------------------------------------------------

struct TrackingRun {
    double rmse_track = 0.0;
    double rmse_pred = 0.0;
    std::vector<double> tick_cost;
    std::vector<double> lambda_trace;
};

inline Reference horizon_reference(const ReferenceSpec& spec, double t0,
                                   const MpcConfig& mpc,
                                   const NominalParams& params,
                                   const Vector4d& q_now) {
    Reference ref;
    ref.x.reserve(size_t(mpc.N) + 1);
    ref.u.reserve(size_t(mpc.N));
    for (int i = 0; i <= mpc.N; ++i) {
        const FlatReference fr = reference_at(spec, t0 + i * mpc.dt);
        SystemState xs;
        xs.p = fr.p;
        xs.v = fr.v;
        xs.q = Vector4d(1, 0, 0, 0);
        if (q_now(0) < 0.0) xs.q = -xs.q;  // stay in the state's hemisphere
        xs.qm = fr.qm;
        xs.vm = fr.vm;
        ref.x.push_back(xs.flatten());
        if (i < mpc.N) {
            ControlInput ur;
            ur.f = params.m * params.g0;
            ur.um = gravity_torque(fr.qm, params);
            ref.u.push_back(ur.flatten());
        }
    }
    return ref;
}

inline TrackingRun run_tracking_variant(const io::Checkpoint& ckpt,
                                        const EvalScenarioConfig& eval,
                                        const NominalParams& params,
                                        const MpcConfig& mpc,
                                        const AdapterConfig& acfg,
                                        ResidualMode mode,
                                        EncoderVariant enc_variant,
                                        std::uint64_t seed) {
    io::Checkpoint local = ckpt;
    const EncoderConfig& ecfg = local.config;

    ScenarioConfig run_cfg = make_eval_scenario(eval, seed);
    run_cfg.validate();

    const MatrixXd Lambda =
        acfg.lambda_prior * MatrixXd::Identity(ecfg.ell, ecfg.ell);
    AdapterState adapter = adapter_init(local.theta0, Lambda,
                                        acfg.sigma2_for(local), acfg.hyper);

    const int n_steps =
        static_cast<int>(std::llround(run_cfg.duration / run_cfg.dt));
    std::mt19937_64 rng(run_cfg.rng_seed);
    SystemState x;
    x.p = reference_at(run_cfg.reference, 0.0).p;
    LagState lag = LagState::Zero();
    const int window_h = (enc_variant == EncoderVariant::CurrentStateOnly)
                             ? 15
                             : ecfg.h;
    HistoryBuffer buffer(window_h);

    ControlSequence warm(size_t(mpc.N));
    ControlInput hover;
    hover.f = params.m * params.g0;
    for (auto& u : warm) u = hover.flatten();
    ControlInput prev_u = hover;

    TrackingRun out;
    double track_sq = 0.0, pred_sq = 0.0;
    long pred_count = 0;

    for (int k = 0; k < n_steps; ++k) {
        const double t = k * run_cfg.dt;
        const ResidualRegime regime = run_cfg.regime_at(t);
        const Reference ref =
            horizon_reference(run_cfg.reference, t, mpc, params, x.q);

        // Oracle mode feeds the current lagged injected residual directly.
        Vector17d oracle = Vector17d::Zero();
        if (mode == ResidualMode::Oracle) oracle = lag;

        LagState captured_lag = lag;
        auto world = [&](const SystemState& xs, const ControlInput& us) {
            auto [xn, nl] = true_step(xs, us, captured_lag, regime, params,
                                      run_cfg.noise_std, rng, run_cfg.dt);
            captured_lag = nl;
            return xn;
        };

        // The window transform for CurrentStateOnly needs the raw window;
        // control_step standardizes internally, so hand it a wrapped encoder
        // via the variant checkpoint shape (window_h == ecfg.h for the
        // standard variants).
        ControlTickResult tick;
        if (enc_variant == EncoderVariant::CurrentStateOnly &&
            (mode == ResidualMode::Frozen || mode == ResidualMode::Adaptive)) {
            // Build the tick manually so the variant transform applies.
            const HistoryMatrix H = push_history(buffer, x, prev_u);
            const MatrixXd H_std = variant_window(
                local.standardizer.standardize_history(H), enc_variant);
            const LatentFeature z = encode(H_std, local.params, ecfg);
            const DecoderMatrix theta = (mode == ResidualMode::Adaptive)
                                            ? adapter.posterior.theta()
                                            : local.theta0;
            const Vector17d delta_hat_std = predict_residual(z, theta);
            const Vector17d residual =
                local.standardizer.destandardize_delta(delta_hat_std) *
                (mpc.dt / run_cfg.dt);
            auto [controls, rep] = solve(x, ref, residual, params, mpc, warm);
            tick.solve = rep;
            tick.u = ControlInput::unflatten(controls[0]);
            buffer.amend_last_input(tick.u);
            warm = controls;
            for (size_t i = 0; i + 1 < warm.size(); ++i) warm[i] = warm[i + 1];
            tick.x_next = world(x, tick.u);
            tick.delta_hat_std = delta_hat_std;
            tick.delta_obs_std = local.standardizer.standardize_delta(
                residual_target(tick.x_next, x, tick.u, params, run_cfg.dt));
            if (mode == ResidualMode::Adaptive)
                tick.adapter_diag =
                    adapt_step(adapter, z, tick.delta_obs_std).second;
        } else {
            tick = control_step(x, prev_u, buffer, &adapter, local.theta0,
                                local.params, ecfg, local.standardizer, ref,
                                params, mpc, run_cfg.dt, warm, mode, oracle,
                                world);
        }
        lag = captured_lag;

        const FlatReference fr = reference_at(run_cfg.reference, t);
        track_sq += (x.p - fr.p).squaredNorm();
        out.tick_cost.push_back(tick.solve.final_cost);
        out.lambda_trace.push_back(tick.adapter_diag.lambda);
        if (k >= window_h &&
            (mode == ResidualMode::Frozen || mode == ResidualMode::Adaptive)) {
            pred_sq += ((tick.delta_obs_std - tick.delta_hat_std)
                            .cwiseProduct(local.standardizer.d_std))
                           .squaredNorm();
            ++pred_count;
        }
        x = tick.x_next;
        prev_u = tick.u;
    }
    out.rmse_track = std::sqrt(track_sq / double(n_steps));
    out.rmse_pred =
        pred_count > 0
            ? std::sqrt(pred_sq / (double(pred_count) * double(kStateDim)))
            : 0.0;
    return out;
}

struct TrackingReport {
    std::vector<VariantMetrics> rows;  // variant names carry scenario/payload
    std::map<std::string, double> mean_rmse;  // key: variant|scenario|payload
};

inline TrackingReport run_tracking(const ExperimentConfig& exp,
                                   const io::Checkpoint& ckpt) {
    TrackingReport report;
    struct ScenarioDef {
        std::string name;
        RefPlane plane, plane_after;
    };
    const ScenarioDef scenarios[] = {
        {"A", RefPlane::XZ, RefPlane::YZ},
        {"B", RefPlane::XY_MajorX, RefPlane::XY_MajorY}};
    const double payloads[] = {0.3, 0.5};
    const ResidualMode modes[] = {ResidualMode::None, ResidualMode::Frozen,
                                  ResidualMode::Adaptive};

    for (const auto& sc : scenarios)
        for (double payload : payloads)
            for (ResidualMode mode : modes) {
                std::vector<double> rmses;
                for (std::uint64_t seed : exp.seeds) {
                    EvalScenarioConfig ev = exp.eval;
                    ev.plane = sc.plane;
                    ev.plane_after = sc.plane_after;
                    ev.switch_plane = true;
                    ev.payload = payload;
                    ev.payload_drop = true;
                    TrackingRun run = run_tracking_variant(
                        ckpt, ev, exp.nominal, exp.mpc, exp.adapter, mode,
                        exp.encoder_variant, seed);
                    VariantMetrics m;
                    m.variant = to_string(mode) + "|" + sc.name + "|" +
                                std::to_string(payload);
                    m.seed = seed;
                    m.rmse_pred = run.rmse_pred;
                    m.rmse_track = run.rmse_track;
                    m.recovery_steps = 0;
                    report.rows.push_back(m);
                    rmses.push_back(run.rmse_track);
                }
                report.mean_rmse[to_string(mode) + "|" + sc.name + "|" +
                                 std::to_string(payload)] = mean_of(rmses);
            }
    return report;
}

// ---------------------------------------------------------------------------
// Gradient-check front-end.
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    int worst_index = -1;
    bool pass = false;
    std::map<std::string, double> per_tensor_worst;
};

/// Central finite differences against the reverse-mode gradient at a small
/// config. corrupt_tensor (when >= 0) scales that tensor's analytic gradient
/// by 1.01 to prove the checker bites.
inline GradCheckReport run_gradcheck(std::uint64_t seed, int n_coords = 200,
                                     double tol = 1e-5,
                                     int corrupt_tensor = -1) {
    EncoderConfig cfg;
    cfg.h = 5;
    cfg.L_seg = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.d_ff = 8;
    cfg.proj_dims = {8, 4};
    cfg.ell = 4;
    cfg.validate();

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    EncoderParams params = init_encoder_params(cfg, seed + 1);
    DecoderMatrix Theta(kStateDim, cfg.ell);
    for (int r = 0; r < Theta.rows(); ++r)
        for (int c = 0; c < Theta.cols(); ++c) Theta(r, c) = 0.3 * gauss(rng);

    Dataset batch(4);
    for (auto& rec : batch) {
        rec.H.resize(cfg.h + 1, cfg.n_channels);
        for (Eigen::Index r = 0; r < rec.H.rows(); ++r)
            for (Eigen::Index c = 0; c < rec.H.cols(); ++c)
                rec.H(r, c) = gauss(rng);
        for (int i = 0; i < kStateDim; ++i) rec.delta(i) = gauss(rng);
    }
    std::vector<const SampleRecord*> ptrs;
    for (const auto& r : batch) ptrs.push_back(&r);

    const double wd = 1e-4;
    BatchGradients grads = gradient(params, Theta, ptrs, cfg, wd);
    if (corrupt_tensor >= 0) {
        int idx = 0;
        grads.enc.visit([&](const std::string&, MatrixXd& g) {
            if (idx++ == corrupt_tensor) g *= 1.01;
        });
    }

    auto tensors = tensor_list(params);
    auto grad_tensors = tensor_list(grads.enc);
    tensors.emplace_back("Theta0", nullptr);  // handled separately

    GradCheckReport report;
    std::uniform_int_distribution<size_t> pick_tensor(0, tensors.size() - 1);
    for (int c = 0; c < n_coords; ++c) {
        const size_t ti = pick_tensor(rng);
        MatrixXd* target =
            (tensors[ti].second != nullptr) ? tensors[ti].second : &Theta;
        const MatrixXd* gmat = (tensors[ti].second != nullptr)
                                   ? grad_tensors[ti].second
                                   : &grads.theta;
        if (target->size() == 0) continue;
        std::uniform_int_distribution<Eigen::Index> pick(0, target->size() - 1);
        const Eigen::Index at = pick(rng);

        double* slot = target->data() + at;
        const double saved = *slot;
        const double h = 1e-6 * std::max(1.0, std::abs(saved));
        *slot = saved + h;
        const double up = batch_loss(params, Theta, ptrs, cfg, wd);
        *slot = saved - h;
        const double dn = batch_loss(params, Theta, ptrs, cfg, wd);
        *slot = saved;

        const double fd = (up - dn) / (2.0 * h);
        const double an = *(gmat->data() + at);
        const double rel =
            std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        auto& worst = report.per_tensor_worst[tensors[ti].first];
        worst = std::max(worst, rel);
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_tensor = tensors[ti].first;
            report.worst_index = static_cast<int>(at);
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace ardl::harness
