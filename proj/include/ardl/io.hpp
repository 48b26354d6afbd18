#pragma once

// File formats: checkpoint JSON, dataset serialization (JSONL and packed
// f64-le binary with a JSON sidecar header), CSV logs, and metrics JSON.
// Doubles go through shortest-round-trip JSON encoding, so both dataset
// formats round-trip bit-exactly.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ardl/encoder.hpp"
#include "ardl/simulation.hpp"
#include "ardl/trainer.hpp"

namespace ardl::io {

using nlohmann::json;

inline void require_little_endian() {
    const std::uint16_t probe = 1;
    if (*reinterpret_cast<const std::uint8_t*>(&probe) != 1)
        throw std::runtime_error("binary dataset format requires little-endian");
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

struct Checkpoint {
    EncoderConfig config;
    EncoderParams params;
    DecoderMatrix theta0;
    Standardizer standardizer;
    Vector17d sigma2_train = Vector17d::Ones();  // per-channel fit residual var
    std::uint64_t seed = 0;
    json train_config;  // snapshot for reproducibility
};

inline json tensor_to_json(const MatrixXd& m) {
    json j;
    j["shape"] = {m.rows(), m.cols()};
    std::vector<double> data;
    data.reserve(static_cast<size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    j["data"] = std::move(data);
    return j;
}

inline MatrixXd tensor_from_json(const json& j) {
    const auto shape = j.at("shape");
    const Eigen::Index rows = shape.at(0).get<Eigen::Index>();
    const Eigen::Index cols = shape.at(1).get<Eigen::Index>();
    const auto& data = j.at("data");
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw std::runtime_error("checkpoint tensor: data length != shape");
    MatrixXd m(rows, cols);
    size_t i = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = data.at(i++).get<double>();
    return m;
}

inline json encoder_config_to_json(const EncoderConfig& c) {
    return json{{"h", c.h},
                {"L_seg", c.L_seg},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"n_layers", c.n_layers},
                {"d_ff", c.d_ff},
                {"proj_dims", c.proj_dims},
                {"ell", c.ell},
                {"n_channels", c.n_channels},
                {"cross_blocks", c.cross_blocks}};
}

inline EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    c.h = j.at("h").get<int>();
    c.L_seg = j.at("L_seg").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.proj_dims = j.at("proj_dims").get<std::vector<int>>();
    c.ell = j.at("ell").get<int>();
    c.n_channels = j.at("n_channels").get<int>();
    c.cross_blocks = j.at("cross_blocks").get<bool>();
    c.validate();
    return c;
}

inline std::vector<double> vec_to_std(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

inline Eigen::VectorXd vec_from_std(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(),
                                             static_cast<Eigen::Index>(v.size()));
}

inline void save_checkpoint(const std::filesystem::path& path,
                            Checkpoint& ckpt) {
    json j;
    j["config"] = encoder_config_to_json(ckpt.config);
    j["seed"] = ckpt.seed;
    j["train_config"] = ckpt.train_config;
    json tensors;
    ckpt.params.visit([&](const std::string& name, MatrixXd& m) {
        tensors[name] = tensor_to_json(m);
    });
    tensors["Theta0"] = tensor_to_json(ckpt.theta0);
    j["tensors"] = std::move(tensors);
    j["standardizer"] = {{"h_mean", vec_to_std(ckpt.standardizer.h_mean)},
                         {"h_std", vec_to_std(ckpt.standardizer.h_std)},
                         {"d_mean", vec_to_std(ckpt.standardizer.d_mean)},
                         {"d_std", vec_to_std(ckpt.standardizer.d_std)}};
    j["sigma2_train"] = vec_to_std(ckpt.sigma2_train);

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(1) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    json j;
    in >> j;

    Checkpoint ckpt;
    ckpt.config = encoder_config_from_json(j.at("config"));
    ckpt.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("train_config")) ckpt.train_config = j.at("train_config");

    // Allocate with the right structure, then fill by name.
    ckpt.params = init_encoder_params(ckpt.config, 0);
    const json& tensors = j.at("tensors");
    ckpt.params.visit([&](const std::string& name, MatrixXd& m) {
        if (!tensors.contains(name))
            throw std::runtime_error("checkpoint missing tensor " + name);
        m = tensor_from_json(tensors.at(name));
    });
    ckpt.theta0 = tensor_from_json(tensors.at("Theta0"));
    check_shapes(ckpt.params, ckpt.config);
    if (ckpt.theta0.rows() != kStateDim || ckpt.theta0.cols() != ckpt.config.ell)
        throw std::runtime_error("checkpoint: bad Theta0 shape");

    const json& s = j.at("standardizer");
    ckpt.standardizer.h_mean = vec_from_std(s.at("h_mean").get<std::vector<double>>());
    ckpt.standardizer.h_std = vec_from_std(s.at("h_std").get<std::vector<double>>());
    ckpt.standardizer.d_mean = vec_from_std(s.at("d_mean").get<std::vector<double>>());
    ckpt.standardizer.d_std = vec_from_std(s.at("d_std").get<std::vector<double>>());
    if (ckpt.standardizer.h_mean.size() != kHistoryCols ||
        ckpt.standardizer.d_mean.size() != kStateDim)
        throw std::runtime_error("checkpoint: bad standardizer shapes");
    ckpt.sigma2_train =
        vec_from_std(j.at("sigma2_train").get<std::vector<double>>());
    return ckpt;
}

// ---------------------------------------------------------------------------
// Datasets.
// ---------------------------------------------------------------------------

inline json sample_to_json(const SampleRecord& rec) {
    json H = json::array();
    for (Eigen::Index r = 0; r < rec.H.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < rec.H.cols(); ++c) row.push_back(rec.H(r, c));
        H.push_back(std::move(row));
    }
    return json{{"t", rec.t},
                {"regime_id", rec.regime_id},
                {"H", std::move(H)},
                {"delta", vec_to_std(rec.delta)}};
}

inline SampleRecord sample_from_json(const json& j) {
    SampleRecord rec;
    rec.t = j.at("t").get<double>();
    rec.regime_id = j.at("regime_id").get<int>();
    const json& H = j.at("H");
    const Eigen::Index rows = static_cast<Eigen::Index>(H.size());
    const Eigen::Index cols = static_cast<Eigen::Index>(H.at(0).size());
    rec.H.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            rec.H(r, c) = H.at(size_t(r)).at(size_t(c)).get<double>();
    const auto d = j.at("delta").get<std::vector<double>>();
    if (d.size() != kStateDim)
        throw std::runtime_error("dataset record: delta length != 17");
    rec.delta = vec_from_std(d);
    return rec;
}

inline void save_dataset_jsonl(const std::filesystem::path& path,
                               const Dataset& dataset) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& rec : dataset) out << sample_to_json(rec).dump() << "\n";
}

inline Dataset load_dataset_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    Dataset out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(sample_from_json(json::parse(line)));
    }
    return out;
}

/// Packed binary: per record t, regime_id, H row-major, delta, all f64-le.
/// A JSON sidecar at <path>.json carries {h, n_c, d, count, dtype}.
inline void save_dataset_binary(const std::filesystem::path& path,
                                const Dataset& dataset) {
    require_little_endian();
    if (dataset.empty()) throw std::invalid_argument("empty dataset");
    const int h = static_cast<int>(dataset[0].H.rows()) - 1;
    const int n_c = static_cast<int>(dataset[0].H.cols());

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    auto put = [&](double v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(double));
    };
    for (const auto& rec : dataset) {
        put(rec.t);
        put(static_cast<double>(rec.regime_id));
        for (Eigen::Index r = 0; r < rec.H.rows(); ++r)
            for (Eigen::Index c = 0; c < rec.H.cols(); ++c) put(rec.H(r, c));
        for (int i = 0; i < kStateDim; ++i) put(rec.delta(i));
    }

    json sidecar{{"h", h},
                 {"n_c", n_c},
                 {"d", kStateDim},
                 {"count", dataset.size()},
                 {"dtype", "f64-le"}};
    std::ofstream side(path.string() + ".json");
    side << sidecar.dump(1) << "\n";
}

inline Dataset load_dataset_binary(const std::filesystem::path& path) {
    require_little_endian();
    std::ifstream side_in(path.string() + ".json");
    if (!side_in)
        throw std::runtime_error("cannot read sidecar for " + path.string());
    json sidecar;
    side_in >> sidecar;
    if (sidecar.at("dtype").get<std::string>() != "f64-le")
        throw std::runtime_error("unsupported dataset dtype");
    const int h = sidecar.at("h").get<int>();
    const int n_c = sidecar.at("n_c").get<int>();
    const int d = sidecar.at("d").get<int>();
    const size_t count = sidecar.at("count").get<size_t>();

    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    auto get = [&]() {
        double v;
        in.read(reinterpret_cast<char*>(&v), sizeof(double));
        if (!in) throw std::runtime_error("truncated dataset binary");
        return v;
    };
    Dataset out;
    out.reserve(count);
    for (size_t k = 0; k < count; ++k) {
        SampleRecord rec;
        rec.t = get();
        rec.regime_id = static_cast<int>(get());
        rec.H.resize(h + 1, n_c);
        for (int r = 0; r < h + 1; ++r)
            for (int c = 0; c < n_c; ++c) rec.H(r, c) = get();
        rec.delta.resize(d);
        for (int i = 0; i < d; ++i) rec.delta(i) = get();
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV and metrics.
// ---------------------------------------------------------------------------

/// CSV writer printing doubles with 17 significant digits so that reruns
/// produce byte-identical files.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::string& header)
        : out_(path) {
        if (!out_) throw std::runtime_error("cannot write " + path.string());
        out_ << header << "\n";
    }

    void row(const std::vector<double>& values) {
        char buf[32];
        for (size_t i = 0; i < values.size(); ++i) {
            if (i) out_ << ",";
            std::snprintf(buf, sizeof(buf), "%.17g", values[i]);
            out_ << buf;
        }
        out_ << "\n";
    }

private:
    std::ofstream out_;
};

inline std::string run_log_header() {
    std::string h = "t";
    for (int i = 0; i < kStateDim; ++i) h += ",x" + std::to_string(i);
    for (int i = 0; i < kInputDim; ++i) h += ",u" + std::to_string(i);
    for (int i = 0; i < kStateDim; ++i) h += ",delta" + std::to_string(i);
    h += ",regime_id";
    return h;
}

inline void save_run_log(const std::filesystem::path& path,
                         const std::vector<StepLogEntry>& log) {
    CsvWriter csv(path, run_log_header());
    for (const auto& e : log) {
        std::vector<double> row;
        row.reserve(1 + kStateDim + kInputDim + kStateDim + 1);
        row.push_back(e.t);
        for (int i = 0; i < kStateDim; ++i) row.push_back(e.x(i));
        for (int i = 0; i < kInputDim; ++i) row.push_back(e.u(i));
        for (int i = 0; i < kStateDim; ++i) row.push_back(e.delta(i));
        row.push_back(static_cast<double>(e.regime_id));
        csv.row(row);
    }
}

inline void save_loss_curve(const std::filesystem::path& path,
                            const std::vector<double>& losses) {
    CsvWriter csv(path, "epoch,mean_loss");
    for (size_t i = 0; i < losses.size(); ++i)
        csv.row({static_cast<double>(i), losses[i]});
}

}  // namespace ardl::io
