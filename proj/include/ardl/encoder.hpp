#pragma once

// Structured history encoder: per-channel segment embedding, alternating
// temporal and cross-variable attention blocks, attention pooling, and a
// small projection MLP producing the latent feature z. The linear decoder
// readout delta_hat = Theta * z lives here as well.
//
// Token tensors are stored flattened in channel-major order: the token for
// (segment i, channel c) is row c*L + i of an (L*n_c) x d_model matrix.

#include <Eigen/Dense>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ardl/autodiff.hpp"
#include "ardl/history.hpp"

namespace ardl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

using DecoderMatrix = MatrixXd;  // 17 x ell, rows are per-output decoders
using LatentFeature = VectorXd;  // length ell

struct EncoderConfig {
    int h = 15;
    int L_seg = 5;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 3;
    int d_ff = 64;
    std::vector<int> proj_dims = {32, 16};  // hidden sizes..output
    int ell = 16;
    int n_channels = kHistoryCols;
    bool cross_blocks = true;  // false drops the cross-variable stage

    int n_segments() const { return (h + 1 + L_seg - 1) / L_seg; }
    int pad_slots() const { return n_segments() * L_seg - (h + 1); }
    int d_head() const { return d_model / n_heads; }
    int n_tokens() const { return n_segments() * n_channels; }
    int token_row(int segment, int channel) const {
        return channel * n_segments() + segment;
    }

    void validate() const {
        if (h < 0 || L_seg < 1 || d_model < 1 || n_heads < 1 || n_layers < 0 ||
            d_ff < 1 || ell < 1 || n_channels < 1)
            throw std::invalid_argument("EncoderConfig: non-positive field");
        if (d_model % n_heads != 0)
            throw std::invalid_argument(
                "EncoderConfig: d_model must be divisible by n_heads");
        if (proj_dims.empty() || proj_dims.back() != ell)
            throw std::invalid_argument(
                "EncoderConfig: proj_dims must end in ell");
        if (n_segments() < 1)
            throw std::invalid_argument("EncoderConfig: no segments");
    }
};

// ---------------------------------------------------------------------------
// Parameter containers, shared between value (MatrixXd) and tape (Var) forms.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionHeadT {
    T Wq, Wk, Wv, Wo;
};

template <typename T>
struct AttentionBlockT {
    std::vector<AttentionHeadT<T>> heads;
    T ff1, ff1_b, ff2, ff2_b;
    T norm1_g, norm1_b, norm2_g, norm2_b;
};

template <typename T>
struct EncoderLayerT {
    AttentionBlockT<T> temporal;
    AttentionBlockT<T> cross;
};

template <typename T>
struct EncoderTensorsT {
    T W_emb;                 // d_model x L_seg
    T pos_embed;             // n_tokens x d_model, channel-major rows
    std::vector<EncoderLayerT<T>> layers;
    T pool_w;                // d_model x 1
    T pool_b;                // 1 x 1
    std::vector<T> proj_W;   // chained dims d_model -> proj_dims...
    std::vector<T> proj_b;   // 1 x dim

    // Enumerates every tensor with a stable name; the single source of truth
    // for checkpointing, optimizer state, and gradient pairing.
    template <typename F>
    void visit(F&& fn) {
        fn("W_emb", W_emb);
        fn("pos_embed", pos_embed);
        for (size_t l = 0; l < layers.size(); ++l) {
            auto block = [&](const char* tag, AttentionBlockT<T>& b) {
                const std::string base =
                    "layer" + std::to_string(l) + "." + tag + ".";
                for (size_t h = 0; h < b.heads.size(); ++h) {
                    const std::string hb = base + "head" + std::to_string(h) + ".";
                    fn(hb + "Wq", b.heads[h].Wq);
                    fn(hb + "Wk", b.heads[h].Wk);
                    fn(hb + "Wv", b.heads[h].Wv);
                    fn(hb + "Wo", b.heads[h].Wo);
                }
                fn(base + "ff1", b.ff1);
                fn(base + "ff1_b", b.ff1_b);
                fn(base + "ff2", b.ff2);
                fn(base + "ff2_b", b.ff2_b);
                fn(base + "norm1_g", b.norm1_g);
                fn(base + "norm1_b", b.norm1_b);
                fn(base + "norm2_g", b.norm2_g);
                fn(base + "norm2_b", b.norm2_b);
            };
            block("temporal", layers[l].temporal);
            block("cross", layers[l].cross);
        }
        fn("pool_w", pool_w);
        fn("pool_b", pool_b);
        for (size_t k = 0; k < proj_W.size(); ++k) {
            fn("proj" + std::to_string(k) + ".W", proj_W[k]);
            fn("proj" + std::to_string(k) + ".b", proj_b[k]);
        }
    }
};

using EncoderParams = EncoderTensorsT<MatrixXd>;
using EncoderVars = EncoderTensorsT<ad::Var>;

inline std::vector<std::pair<std::string, MatrixXd*>> tensor_list(
    EncoderParams& p) {
    std::vector<std::pair<std::string, MatrixXd*>> out;
    p.visit([&](const std::string& name, MatrixXd& m) {
        out.emplace_back(name, &m);
    });
    return out;
}

/// Fresh parameters: N(0, 1/fan_in) weights, N(0, 0.02^2) embeddings, unit
/// normalization gains, zero biases.
inline EncoderParams init_encoder_params(const EncoderConfig& cfg,
                                         std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto randn = [&](int r, int c, double std_dev) {
        MatrixXd m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = std_dev * gauss(rng);
        return m;
    };

    EncoderParams p;
    p.W_emb = randn(cfg.d_model, cfg.L_seg, 1.0 / std::sqrt(double(cfg.L_seg)));
    p.pos_embed = randn(cfg.n_tokens(), cfg.d_model, 0.02);

    const int dh = cfg.d_head();
    auto make_block = [&]() {
        AttentionBlockT<MatrixXd> b;
        b.heads.resize(static_cast<size_t>(cfg.n_heads));
        for (auto& hd : b.heads) {
            hd.Wq = randn(cfg.d_model, dh, 1.0 / std::sqrt(double(cfg.d_model)));
            hd.Wk = randn(cfg.d_model, dh, 1.0 / std::sqrt(double(cfg.d_model)));
            hd.Wv = randn(cfg.d_model, dh, 1.0 / std::sqrt(double(cfg.d_model)));
            hd.Wo = randn(dh, cfg.d_model, 1.0 / std::sqrt(double(dh)));
        }
        b.ff1 = randn(cfg.d_model, cfg.d_ff, 1.0 / std::sqrt(double(cfg.d_model)));
        b.ff1_b = MatrixXd::Zero(1, cfg.d_ff);
        b.ff2 = randn(cfg.d_ff, cfg.d_model, 1.0 / std::sqrt(double(cfg.d_ff)));
        b.ff2_b = MatrixXd::Zero(1, cfg.d_model);
        b.norm1_g = MatrixXd::Ones(1, cfg.d_model);
        b.norm1_b = MatrixXd::Zero(1, cfg.d_model);
        b.norm2_g = MatrixXd::Ones(1, cfg.d_model);
        b.norm2_b = MatrixXd::Zero(1, cfg.d_model);
        return b;
    };
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& layer : p.layers) {
        layer.temporal = make_block();
        layer.cross = make_block();
    }

    p.pool_w = randn(cfg.d_model, 1, 1.0 / std::sqrt(double(cfg.d_model)));
    p.pool_b = MatrixXd::Zero(1, 1);
    int prev = cfg.d_model;
    for (int dim : cfg.proj_dims) {
        p.proj_W.push_back(randn(prev, dim, 1.0 / std::sqrt(double(prev))));
        p.proj_b.push_back(MatrixXd::Zero(1, dim));
        prev = dim;
    }
    return p;
}

/// Validates every tensor shape against the config.
inline void check_shapes(EncoderParams& p, const EncoderConfig& cfg) {
    cfg.validate();
    auto expect = [](const MatrixXd& m, int r, int c, const std::string& name) {
        if (m.rows() != r || m.cols() != c)
            throw std::invalid_argument("EncoderParams: bad shape for " + name);
        if (!m.allFinite())
            throw std::invalid_argument("EncoderParams: non-finite " + name);
    };
    expect(p.W_emb, cfg.d_model, cfg.L_seg, "W_emb");
    expect(p.pos_embed, cfg.n_tokens(), cfg.d_model, "pos_embed");
    if (static_cast<int>(p.layers.size()) != cfg.n_layers)
        throw std::invalid_argument("EncoderParams: wrong layer count");
    const int dh = cfg.d_head();
    for (auto& layer : p.layers)
        for (auto* b : {&layer.temporal, &layer.cross}) {
            if (static_cast<int>(b->heads.size()) != cfg.n_heads)
                throw std::invalid_argument("EncoderParams: wrong head count");
            for (auto& hd : b->heads) {
                expect(hd.Wq, cfg.d_model, dh, "Wq");
                expect(hd.Wk, cfg.d_model, dh, "Wk");
                expect(hd.Wv, cfg.d_model, dh, "Wv");
                expect(hd.Wo, dh, cfg.d_model, "Wo");
            }
            expect(b->ff1, cfg.d_model, cfg.d_ff, "ff1");
            expect(b->ff1_b, 1, cfg.d_ff, "ff1_b");
            expect(b->ff2, cfg.d_ff, cfg.d_model, "ff2");
            expect(b->ff2_b, 1, cfg.d_model, "ff2_b");
            for (auto* g : {&b->norm1_g, &b->norm1_b, &b->norm2_g, &b->norm2_b})
                expect(*g, 1, cfg.d_model, "norm");
        }
    expect(p.pool_w, cfg.d_model, 1, "pool_w");
    expect(p.pool_b, 1, 1, "pool_b");
    if (p.proj_W.size() != cfg.proj_dims.size() ||
        p.proj_b.size() != cfg.proj_dims.size())
        throw std::invalid_argument("EncoderParams: wrong projection depth");
    int prev = cfg.d_model;
    for (size_t k = 0; k < p.proj_W.size(); ++k) {
        expect(p.proj_W[k], prev, cfg.proj_dims[k], "proj_W");
        expect(p.proj_b[k], 1, cfg.proj_dims[k], "proj_b");
        prev = cfg.proj_dims[k];
    }
}

// ---------------------------------------------------------------------------
// Forward graph builders.
// ---------------------------------------------------------------------------

namespace enc_detail {

inline EncoderVars bind(ad::Tape& t, EncoderParams& p) {
    EncoderVars v;
    v.layers.resize(p.layers.size());
    for (size_t l = 0; l < p.layers.size(); ++l) {
        v.layers[l].temporal.heads.resize(p.layers[l].temporal.heads.size());
        v.layers[l].cross.heads.resize(p.layers[l].cross.heads.size());
    }
    v.proj_W.resize(p.proj_W.size());
    v.proj_b.resize(p.proj_b.size());

    std::vector<ad::Var*> slots;
    v.visit([&](const std::string&, ad::Var& var) { slots.push_back(&var); });
    size_t i = 0;
    p.visit([&](const std::string&, MatrixXd& m) {
        *slots[i++] = t.leaf(m);
    });
    return v;
}

/// Padded per-channel columns: (L*L_seg) x n_c, oldest rows first. The first
/// pad_slots rows are synthetic; they are zeroed (masked) regardless of
/// their contents.
inline MatrixXd masked_padded(const MatrixXd& padded, const EncoderConfig& cfg) {
    MatrixXd out = padded;
    if (cfg.pad_slots() > 0) out.topRows(cfg.pad_slots()).setZero();
    return out;
}

inline MatrixXd pad_history(const HistoryMatrix& H, const EncoderConfig& cfg) {
    if (H.rows() != cfg.h + 1 || H.cols() != cfg.n_channels)
        throw std::invalid_argument("encoder: history window has wrong shape");
    MatrixXd padded = MatrixXd::Zero(cfg.n_segments() * cfg.L_seg,
                                     cfg.n_channels);
    padded.bottomRows(cfg.h + 1) = H;
    return padded;
}

/// Channel-major segment matrix: row c*L + i holds segment i of channel c.
inline MatrixXd segment_matrix(const MatrixXd& padded,
                               const EncoderConfig& cfg) {
    const MatrixXd cols = masked_padded(padded, cfg);
    const int L = cfg.n_segments();
    MatrixXd S(cfg.n_tokens(), cfg.L_seg);
    for (int c = 0; c < cfg.n_channels; ++c)
        for (int i = 0; i < L; ++i)
            S.row(c * L + i) =
                cols.col(c).segment(i * cfg.L_seg, cfg.L_seg).transpose();
    return S;
}

inline std::vector<int> to_segment_major_perm(const EncoderConfig& cfg) {
    const int L = cfg.n_segments(), C = cfg.n_channels;
    std::vector<int> perm(static_cast<size_t>(L * C));
    for (int i = 0; i < L; ++i)
        for (int c = 0; c < C; ++c)
            perm[static_cast<size_t>(i * C + c)] = c * L + i;
    return perm;
}

inline std::vector<int> to_channel_major_perm(const EncoderConfig& cfg) {
    const int L = cfg.n_segments(), C = cfg.n_channels;
    std::vector<int> perm(static_cast<size_t>(L * C));
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < L; ++i)
            perm[static_cast<size_t>(c * L + i)] = i * C + c;
    return perm;
}

inline ad::Var build_segment_embed(ad::Tape& t, const EncoderVars& v,
                                   const MatrixXd& segments) {
    return t.add(t.matmul(t.leaf(segments), t.transpose(v.W_emb)),
                 v.pos_embed);
}

/// Grouped multi-head self-attention over contiguous row blocks followed by
/// the post-norm feedforward stage.
inline ad::Var build_attention_block(ad::Tape& t, ad::Var X,
                                     const AttentionBlockT<ad::Var>& p,
                                     int groups, int group_size, int d_head) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
    ad::Var attn;
    for (size_t h = 0; h < p.heads.size(); ++h) {
        const auto& hd = p.heads[h];
        const ad::Var Q = t.matmul(X, hd.Wq);
        const ad::Var K = t.matmul(X, hd.Wk);
        const ad::Var V = t.matmul(X, hd.Wv);
        std::vector<ad::Var> outs;
        outs.reserve(static_cast<size_t>(groups));
        for (int g = 0; g < groups; ++g) {
            const int at = g * group_size;
            const ad::Var Qg = t.rows(Q, at, group_size);
            const ad::Var Kg = t.rows(K, at, group_size);
            const ad::Var Vg = t.rows(V, at, group_size);
            const ad::Var scores =
                t.scale(t.matmul(Qg, t.transpose(Kg)), inv_sqrt);
            outs.push_back(t.matmul(t.softmax_rows(scores), Vg));
        }
        const ad::Var head_out = t.matmul(t.vstack(outs), hd.Wo);
        attn = (h == 0) ? head_out : t.add(attn, head_out);
    }
    const ad::Var z1 =
        t.layer_norm_rows(t.add(X, attn), p.norm1_g, p.norm1_b);
    const ad::Var f = t.add_rowvec(
        t.matmul(t.elu(t.add_rowvec(t.matmul(z1, p.ff1), p.ff1_b)), p.ff2),
        p.ff2_b);
    return t.layer_norm_rows(t.add(z1, f), p.norm2_g, p.norm2_b);
}

inline ad::Var build_pool_project(ad::Tape& t, ad::Var Z,
                                  const EncoderVars& v) {
    const ad::Var scores = t.add_scalar(t.matmul(Z, v.pool_w), v.pool_b);
    const ad::Var alpha = t.softmax_all(scores);
    ad::Var h = t.matmul(t.transpose(alpha), Z);  // 1 x d_model
    for (size_t k = 0; k < v.proj_W.size(); ++k) {
        h = t.add_rowvec(t.matmul(h, v.proj_W[k]), v.proj_b[k]);
        if (k + 1 < v.proj_W.size()) h = t.elu(h);
    }
    return h;  // 1 x ell
}

/// Full forward graph from an already-standardized history window.
inline ad::Var build_encode(ad::Tape& t, const EncoderVars& v,
                            const HistoryMatrix& H_std,
                            const EncoderConfig& cfg) {
    ad::Var Z = build_segment_embed(
        t, v, segment_matrix(pad_history(H_std, cfg), cfg));
    const auto seg_major = to_segment_major_perm(cfg);
    const auto chan_major = to_channel_major_perm(cfg);
    for (const auto& layer : v.layers) {
        Z = build_attention_block(t, Z, layer.temporal, cfg.n_channels,
                                  cfg.n_segments(), cfg.d_head());
        if (cfg.cross_blocks) {
            Z = t.permute_rows(Z, seg_major);
            Z = build_attention_block(t, Z, layer.cross, cfg.n_segments(),
                                      cfg.n_channels, cfg.d_head());
            Z = t.permute_rows(Z, chan_major);
        }
    }
    return build_pool_project(t, Z, v);
}

}  // namespace enc_detail

// ---------------------------------------------------------------------------
// Public operations (forward only; each runs on a scratch tape).
// ---------------------------------------------------------------------------

/// Token tensor from a history window: (L*n_c) x d_model, channel-major.
inline MatrixXd segment_embed(const HistoryMatrix& H, EncoderParams& params,
                              const EncoderConfig& cfg) {
    ad::Tape t;
    const EncoderVars v = enc_detail::bind(t, params);
    return t.value(enc_detail::build_segment_embed(
        t, v, enc_detail::segment_matrix(enc_detail::pad_history(H, cfg), cfg)));
}

/// One temporal-attention block: per-channel self-attention over segments.
inline MatrixXd temporal_attention(const MatrixXd& Z, EncoderParams& params,
                                   int layer, const EncoderConfig& cfg) {
    ad::Tape t;
    const EncoderVars v = enc_detail::bind(t, params);
    return t.value(enc_detail::build_attention_block(
        t, t.leaf(Z), v.layers.at(static_cast<size_t>(layer)).temporal,
        cfg.n_channels, cfg.n_segments(), cfg.d_head()));
}

/// One cross-variable block: per-segment self-attention over channels.
/// Z is consumed and returned in channel-major order.
inline MatrixXd cross_variable_attention(const MatrixXd& Z,
                                         EncoderParams& params, int layer,
                                         const EncoderConfig& cfg) {
    ad::Tape t;
    const EncoderVars v = enc_detail::bind(t, params);
    ad::Var z = t.permute_rows(t.leaf(Z), enc_detail::to_segment_major_perm(cfg));
    z = enc_detail::build_attention_block(
        t, z, v.layers.at(static_cast<size_t>(layer)).cross, cfg.n_segments(),
        cfg.n_channels, cfg.d_head());
    return t.value(t.permute_rows(z, enc_detail::to_channel_major_perm(cfg)));
}

/// Attention pooling over all tokens followed by the projection MLP.
inline LatentFeature pool_and_project(const MatrixXd& Z, EncoderParams& params,
                                      const EncoderConfig& cfg) {
    if (Z.rows() != cfg.n_tokens() || Z.cols() != cfg.d_model)
        throw std::invalid_argument("pool_and_project: bad token tensor shape");
    ad::Tape t;
    const EncoderVars v = enc_detail::bind(t, params);
    const MatrixXd out =
        t.value(enc_detail::build_pool_project(t, t.leaf(Z), v));
    return out.row(0).transpose();
}

/// Latent feature z = phi(H). H must already be standardized.
inline LatentFeature encode(const HistoryMatrix& H, EncoderParams& params,
                            const EncoderConfig& cfg) {
    thread_local ad::Tape tape;
    tape.clear();
    const EncoderVars v = enc_detail::bind(tape, params);
    const MatrixXd out =
        tape.value(enc_detail::build_encode(tape, v, H, cfg));
    return out.row(0).transpose();
}

/// Linear residual readout delta_hat = Theta * z.
inline Vector17d predict_residual(const LatentFeature& z,
                                  const DecoderMatrix& Theta) {
    if (Theta.rows() != kStateDim || Theta.cols() != z.size())
        throw std::invalid_argument("predict_residual: shape mismatch");
    return Theta * z;
}

}  // namespace ardl
