// Command-line front end: training, dataset generation, the ablation and
// tracking experiments, the gradient check, and the property suites.
// Exit codes: 0 success, 1 check/assertion failure, 2 configuration error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ardl/harness.hpp"
#include "ardl/properties.hpp"

namespace fs = std::filesystem;
using namespace ardl;

namespace {

std::uint64_t fnv1a_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::uint64_t h = 1469598103934665603ull;
    char c;
    while (in.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

void write_resolved_config(const fs::path& dir,
                           const harness::ExperimentConfig& exp) {
    io::json j;
    j["out_dir"] = exp.out_dir;
    io::json seeds = io::json::array();
    for (auto s : exp.seeds) seeds.push_back(s);
    j["seeds"] = std::move(seeds);
    j["scenario"] = {{"duration", exp.eval.duration},
                     {"dt", exp.eval.dt},
                     {"amplitude", exp.eval.amplitude},
                     {"period", exp.eval.period},
                     {"payload", exp.eval.payload},
                     {"payload_drop", exp.eval.payload_drop},
                     {"coupling_gain", exp.eval.coupling_gain},
                     {"lag_tau", exp.eval.lag_tau},
                     {"switch_plane", exp.eval.switch_plane}};
    j["training"] = {{"segment_duration", exp.training.segment_duration},
                     {"payloads", exp.training.payloads},
                     {"dt", exp.training.dt},
                     {"coupling_gain", exp.training.coupling_gain},
                     {"lag_tau", exp.training.lag_tau},
                     {"seed", exp.training.seed}};
    j["encoder"] = io::encoder_config_to_json(exp.encoder);
    j["encoder_variant"] = harness::to_string(exp.encoder_variant);
    j["train"] = {{"learning_rate", exp.train.learning_rate},
                  {"batch_size", exp.train.batch_size},
                  {"epochs", exp.train.epochs},
                  {"weight_decay", exp.train.weight_decay},
                  {"seed", exp.train.rng_seed}};
    j["adapter"] = {{"lambda_prior", exp.adapter.lambda_prior},
                    {"sigma2", exp.adapter.sigma2_table},
                    {"calibrated_sigma2", exp.adapter.calibrated_sigma2},
                    {"sigma2_scale", exp.adapter.sigma2_scale},
                    {"alpha", exp.adapter.hyper.alpha},
                    {"eta", exp.adapter.hyper.eta},
                    {"beta", exp.adapter.hyper.beta},
                    {"fixed_forgetting", exp.adapter.fixed_forgetting}};
    j["mpc"] = {{"N", exp.mpc.N},
                {"dt", exp.mpc.dt},
                {"max_iters", exp.mpc.max_iters},
                {"smoothness_weight", exp.mpc.smoothness_weight},
                {"soft_constraint_weight", exp.mpc.soft_constraint_weight}};
    std::ofstream out(dir / "resolved_config.json");
    out << j.dump(1) << "\n";
}

harness::ExperimentConfig load_config_or_die(const std::string& path,
                                             long seed_override,
                                             const std::string& out_override) {
    harness::ExperimentConfig exp = harness::load_experiment_config(path);
    if (seed_override >= 0) {
        exp.seeds = {static_cast<std::uint64_t>(seed_override)};
        exp.train.rng_seed = static_cast<std::uint64_t>(seed_override);
        exp.training.seed = static_cast<std::uint64_t>(seed_override) * 1000 + 1;
    }
    if (!out_override.empty()) exp.out_dir = out_override;
    return exp;
}

int cmd_train(const harness::ExperimentConfig& exp) {
    fs::create_directories(exp.out_dir);
    write_resolved_config(exp.out_dir, exp);

    harness::TrainOutput out = harness::run_training(exp, exp.encoder_variant);
    io::save_checkpoint(fs::path(exp.out_dir) / "checkpoint.json",
                        out.checkpoint);
    io::save_loss_curve(fs::path(exp.out_dir) / "loss_curve.csv",
                        out.report.epoch_loss);

    std::cout << "samples: " << out.dataset.size() << "\n";
    std::cout << "final train rmse (standardized): " << out.report.final_rmse
              << "\n";
    std::cout << "wall clock: " << out.report.wall_clock_s << " s\n";
    std::cout << "checkpoint: " << exp.out_dir << "/checkpoint.json"
              << " digest "
              << std::hex
              << fnv1a_file(fs::path(exp.out_dir) / "checkpoint.json")
              << std::dec << "\n";
    return 0;
}

int cmd_dataset(const harness::ExperimentConfig& exp) {
    fs::create_directories(exp.out_dir);
    write_resolved_config(exp.out_dir, exp);
    Dataset all;
    std::uint64_t sub_seed = exp.training.seed;
    for (double payload : exp.training.payloads)
        for (RefPlane plane : exp.training.planes) {
            const ScenarioConfig seg = harness::make_training_segment(
                exp.training, plane, payload, sub_seed++);
            Dataset part = generate_dataset(seg, exp.nominal, exp.encoder.h,
                                            make_pd_policy(seg, exp.nominal));
            all.insert(all.end(), part.begin(), part.end());
        }
    io::save_dataset_jsonl(fs::path(exp.out_dir) / "dataset.jsonl", all);
    io::save_dataset_binary(fs::path(exp.out_dir) / "dataset.bin", all);
    std::cout << "samples: " << all.size() << "\n";
    std::cout << "wrote " << exp.out_dir << "/dataset.jsonl and dataset.bin\n";
    return 0;
}

int cmd_ablate_decoder(const harness::ExperimentConfig& exp,
                       const std::string& checkpoint_path) {
    if (checkpoint_path.empty())
        throw cfg::ConfigError("missing config field: checkpoint");
    const io::Checkpoint ckpt = io::load_checkpoint(checkpoint_path);
    fs::create_directories(exp.out_dir);
    write_resolved_config(exp.out_dir, exp);

    harness::DecoderAblationReport report =
        harness::run_decoder_ablation(exp, ckpt);
    harness::save_metrics(fs::path(exp.out_dir) / "metrics.json", report.rows);

    {
        io::CsvWriter csv(fs::path(exp.out_dir) / "adaptive_trace.csv",
                          "t,err_sq,psi,g,lambda");
        const auto& run = report.adaptive_example;
        for (size_t i = 0; i < run.err_sq.size(); ++i)
            csv.row({run.t[i], run.err_sq[i], run.psi_trace[i], run.g_trace[i],
                     run.lambda_trace[i]});
    }

    std::cout << "per-variant mean prediction RMSE (standardized):\n";
    for (const auto& [name, rmse] : report.mean_rmse)
        std::cout << "  " << name << ": " << rmse
                  << "  (mean recovery " << report.mean_recovery.at(name)
                  << " steps)\n";
    return 0;
}

int cmd_ablate_encoder(const harness::ExperimentConfig& exp) {
    fs::create_directories(exp.out_dir);
    write_resolved_config(exp.out_dir, exp);
    harness::EncoderAblationReport report = harness::run_encoder_ablation(exp);
    harness::save_metrics(fs::path(exp.out_dir) / "metrics.json", report.rows);
    std::cout << "held-out open-loop prediction RMSE (standardized):\n";
    for (const auto& [name, rmse] : report.rmse)
        std::cout << "  " << name << ": " << rmse << "\n";
    return 0;
}

int cmd_track(const harness::ExperimentConfig& exp,
              const std::string& checkpoint_path) {
    if (checkpoint_path.empty())
        throw cfg::ConfigError("missing config field: checkpoint");
    const io::Checkpoint ckpt = io::load_checkpoint(checkpoint_path);
    fs::create_directories(exp.out_dir);
    write_resolved_config(exp.out_dir, exp);

    harness::TrackingReport report = harness::run_tracking(exp, ckpt);
    harness::save_metrics(fs::path(exp.out_dir) / "metrics.json", report.rows);
    std::cout << "mean tracking RMSE (m):\n";
    for (const auto& [key, rmse] : report.mean_rmse)
        std::cout << "  " << key << ": " << rmse << "\n";
    return 0;
}

int cmd_gradcheck(long seed) {
    const harness::GradCheckReport report =
        harness::run_gradcheck(seed < 0 ? 7 : std::uint64_t(seed));
    std::cout << "max relative error: " << report.max_rel_err << "\n";
    std::cout << "worst tensor: " << report.worst_tensor << " at coordinate "
              << report.worst_index << "\n";
    for (const auto& [name, worst] : report.per_tensor_worst)
        std::cout << "  " << name << ": " << worst << "\n";
    std::cout << (report.pass ? "PASS" : "FAIL") << " (threshold 1e-5)\n";
    return report.pass ? 0 : 1;
}

int cmd_properties(long seed) {
    const auto results =
        props::run_core_properties(seed < 0 ? 5 : std::uint64_t(seed));
    bool all = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << " — "
                  << r.detail << "\n";
        all = all && r.pass;
    }
    return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive residual dynamics learning workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint_path;
    long seed = -1;

    auto add_common = [&](CLI::App* cmd, bool needs_config) {
        auto* opt = cmd->add_option("--config", config_path, "config file");
        if (needs_config) opt->required();
        cmd->add_option("--seed", seed, "seed override");
        cmd->add_option("--out", out_dir, "output directory override");
    };

    auto* train = app.add_subcommand("train", "train encoder and decoder");
    add_common(train, true);
    auto* dataset = app.add_subcommand("dataset", "generate a dataset");
    add_common(dataset, true);
    auto* abl_dec = app.add_subcommand("ablate-decoder",
                                       "decoder-update ablation experiment");
    add_common(abl_dec, true);
    abl_dec->add_option("--checkpoint", checkpoint_path, "trained checkpoint");
    auto* abl_enc = app.add_subcommand("ablate-encoder",
                                       "encoder-structure ablation experiment");
    add_common(abl_enc, true);
    auto* track = app.add_subcommand("track", "closed-loop tracking runs");
    add_common(track, true);
    track->add_option("--checkpoint", checkpoint_path, "trained checkpoint");
    auto* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference gradient check");
    gradcheck->add_option("--seed", seed, "seed override");
    auto* properties =
        app.add_subcommand("properties", "run the invariant suites");
    properties->add_option("--seed", seed, "seed override");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gradcheck->parsed()) return cmd_gradcheck(seed);
        if (properties->parsed()) return cmd_properties(seed);

        const harness::ExperimentConfig exp =
            load_config_or_die(config_path, seed, out_dir);
        if (train->parsed()) return cmd_train(exp);
        if (dataset->parsed()) return cmd_dataset(exp);
        if (abl_dec->parsed()) return cmd_ablate_decoder(exp, checkpoint_path);
        if (abl_enc->parsed()) return cmd_ablate_encoder(exp);
        if (track->parsed()) return cmd_track(exp, checkpoint_path);
    } catch (const cfg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
