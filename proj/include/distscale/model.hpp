// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "distscale/rng.hpp"
#include "distscale/task.hpp"

namespace distscale {

template <class Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using ColX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Thrown when training produces a non-finite loss.
struct divergence_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int depth = 1;
    int n_heads = 1;
    int head_dim = 64;
    int vocab_size = 0;
    int context_length = 0;
    int mlp_ratio = 4;

    int hidden() const { return n_heads * head_dim; }

    std::int64_t param_count() const {
        const std::int64_t h = hidden();
        const std::int64_t per_layer = 4 * h * h + 2 * mlp_ratio * h * h + 2 * h;
        return 2 * static_cast<std::int64_t>(vocab_size) * h + depth * per_layer + h;
    }

    std::string scale_label() const {
        return "d" + std::to_string(depth) + "_h" + std::to_string(hidden());
    }

    void validate() const {
        if (depth < 1 || n_heads < 1 || head_dim < 2 || vocab_size < 2 || context_length < 2 ||
            mlp_ratio < 1)
            throw std::invalid_argument("ModelConfig: nonpositive dimension");
        if (head_dim % 2 != 0) throw std::invalid_argument("ModelConfig: head_dim must be even");
    }
};

inline ModelConfig make_config(int depth, int hidden, int vocab, int context, int head_dim = 64,
                               int mlp_ratio = 4) {
    if (hidden % head_dim != 0)
        throw std::invalid_argument("make_config: hidden not a multiple of head_dim");
    ModelConfig c;
    c.depth = depth;
    c.n_heads = hidden / head_dim;
    c.head_dim = head_dim;
    c.vocab_size = vocab;
    c.context_length = context;
    c.mlp_ratio = mlp_ratio;
    c.validate();
    return c;
}

// Scale grids used throughout: width scaling holds depth fixed, depth scaling
// holds hidden size fixed. Head dimension is 64 everywhere.
inline std::vector<ModelConfig> count_fixed_depth_grid(int vocab, int context) {
    std::vector<ModelConfig> out;
    for (int h : {64, 128, 256, 384, 512, 640, 768, 1024}) out.push_back(make_config(4, h, vocab, context));
    return out;
}
inline std::vector<ModelConfig> count_fixed_width_grid(int vocab, int context) {
    std::vector<ModelConfig> out;
    for (int d : {1, 2, 4, 6, 8}) out.push_back(make_config(d, 512, vocab, context));
    return out;
}
inline std::vector<ModelConfig> addition_fixed_depth_grid(int vocab, int context) {
    std::vector<ModelConfig> out;
    for (int h : {64, 128, 256, 384, 512, 640, 768}) out.push_back(make_config(6, h, vocab, context));
    return out;
}
inline std::vector<ModelConfig> addition_fixed_width_grid(int vocab, int context) {
    std::vector<ModelConfig> out;
    for (int d : {1, 2, 3, 4, 6, 8, 10, 12}) out.push_back(make_config(d, 512, vocab, context));
    return out;
}

enum class TensorKind { embedding, norm_gain, projection };

template <class Scalar>
struct LayerParams {
    MatX<Scalar> ln1_g;  // h x 1
    MatX<Scalar> wq, wk, wv, wo;
    MatX<Scalar> ln2_g;  // h x 1
    MatX<Scalar> w_fc;   // h x rh
    MatX<Scalar> w_proj; // rh x h
};

/// All learnable tensors. Pre-norm residual blocks, no biases, untied
/// embedding and unembedding.
template <class Scalar>
struct Params {
    ModelConfig config;
    MatX<Scalar> embed;  // V x h
    std::vector<LayerParams<Scalar>> layers;
    MatX<Scalar> lnf_g;    // h x 1
    MatX<Scalar> unembed;  // h x V

    /// Visits every tensor in fixed serialization order.
    template <class F>
    void for_each_tensor(F&& fn) {
        fn("embed", TensorKind::embedding, embed);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            fn(p + "ln1_g", TensorKind::norm_gain, layers[l].ln1_g);
            fn(p + "wq", TensorKind::projection, layers[l].wq);
            fn(p + "wk", TensorKind::projection, layers[l].wk);
            fn(p + "wv", TensorKind::projection, layers[l].wv);
            fn(p + "wo", TensorKind::projection, layers[l].wo);
            fn(p + "ln2_g", TensorKind::norm_gain, layers[l].ln2_g);
            fn(p + "w_fc", TensorKind::projection, layers[l].w_fc);
            fn(p + "w_proj", TensorKind::projection, layers[l].w_proj);
        }
        fn("lnf_g", TensorKind::norm_gain, lnf_g);
        fn("unembed", TensorKind::projection, unembed);
    }

    template <class F>
    void for_each_tensor(F&& fn) const {
        const_cast<Params*>(this)->for_each_tensor(
            [&](const std::string& name, TensorKind kind, MatX<Scalar>& t) {
                fn(name, kind, static_cast<const MatX<Scalar>&>(t));
            });
    }

    static Params zeros(const ModelConfig& config) {
        config.validate();
        const int h = config.hidden();
        Params p;
        p.config = config;
        p.embed = MatX<Scalar>::Zero(config.vocab_size, h);
        p.layers.resize(config.depth);
        for (auto& layer : p.layers) {
            layer.ln1_g = MatX<Scalar>::Zero(h, 1);
            layer.wq = MatX<Scalar>::Zero(h, h);
            layer.wk = MatX<Scalar>::Zero(h, h);
            layer.wv = MatX<Scalar>::Zero(h, h);
            layer.wo = MatX<Scalar>::Zero(h, h);
            layer.ln2_g = MatX<Scalar>::Zero(h, 1);
            layer.w_fc = MatX<Scalar>::Zero(h, config.mlp_ratio * h);
            layer.w_proj = MatX<Scalar>::Zero(config.mlp_ratio * h, h);
        }
        p.lnf_g = MatX<Scalar>::Zero(h, 1);
        p.unembed = MatX<Scalar>::Zero(h, config.vocab_size);
        return p;
    }

    bool all_finite() const {
        bool ok = true;
        for_each_tensor([&](const std::string&, TensorKind, const MatX<Scalar>& t) {
            ok = ok && t.allFinite();
        });
        return ok;
    }
};

/// Deterministic initialization: scaled normal with variance 1/hidden for
/// projections and embeddings, residual-output projections further scaled by
/// 1/sqrt(2 * depth), norm gains at one. The unembedding starts at zero so
/// the initial predictive distribution is exactly uniform.
template <class Scalar>
Params<Scalar> init_params(const ModelConfig& config, std::uint64_t seed) {
    Params<Scalar> p = Params<Scalar>::zeros(config);
    Rng rng(seed);
    const double base_std = 1.0 / std::sqrt(static_cast<double>(config.hidden()));
    const double resid_scale = 1.0 / std::sqrt(2.0 * config.depth);
    p.for_each_tensor([&](const std::string& name, TensorKind kind, MatX<Scalar>& t) {
        if (kind == TensorKind::norm_gain) {
            t.setOnes();
            return;
        }
        if (name == "unembed") return;  // stays zero
        double std = base_std;
        if (name.ends_with(".wo") || name.ends_with(".w_proj")) std *= resid_scale;
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j)
                t(i, j) = static_cast<Scalar>(rng.normal(0.0, std));
    });
    return p;
}

inline constexpr double kRopeBase = 10000.0;
inline constexpr double kLayerNormEps = 1e-5;

/// Rotary position transform on a (n x head_dim) tensor: pair j of row i is
/// rotated by positions[i] * base^(-2j/head_dim).
template <class Scalar>
MatX<Scalar> rope_rotate(const MatX<Scalar>& x, std::span<const int> positions,
                         double base = kRopeBase) {
    const int dim = static_cast<int>(x.cols());
    if (dim % 2 != 0) throw std::invalid_argument("rope_rotate: head dim must be even");
    if (static_cast<std::size_t>(x.rows()) != positions.size())
        throw std::invalid_argument("rope_rotate: positions size mismatch");
    MatX<Scalar> out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (int j = 0; j < dim / 2; ++j) {
            const double theta =
                positions[r] * std::pow(base, -2.0 * j / static_cast<double>(dim));
            const Scalar c = static_cast<Scalar>(std::cos(theta));
            const Scalar s = static_cast<Scalar>(std::sin(theta));
            const Scalar a = x(r, 2 * j);
            const Scalar b = x(r, 2 * j + 1);
            out(r, 2 * j) = a * c - b * s;
            out(r, 2 * j + 1) = a * s + b * c;
        }
    }
    return out;
}

namespace detail {

/// Activation buffers are multi-megabyte and reallocated every step; keep
/// them on the heap free lists instead of round-tripping through mmap.
inline void tune_allocator_once() {
#if defined(__GLIBC__)
    static std::once_flag flag;
    std::call_once(flag, [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
    });
#endif
}

template <class Scalar>
struct RopeTable {
    MatX<Scalar> cos_t, sin_t;  // T x head_dim/2

    RopeTable(int seq, int head_dim) : cos_t(seq, head_dim / 2), sin_t(seq, head_dim / 2) {
        for (int t = 0; t < seq; ++t)
            for (int j = 0; j < head_dim / 2; ++j) {
                const double theta =
                    t * std::pow(kRopeBase, -2.0 * j / static_cast<double>(head_dim));
                cos_t(t, j) = static_cast<Scalar>(std::cos(theta));
                sin_t(t, j) = static_cast<Scalar>(std::sin(theta));
            }
    }

    /// Rotates every head slice of a (B*T x h) activation in place.
    /// inverse=true applies the transpose rotation (used for gradients).
    void apply(MatX<Scalar>& x, int batch, int seq, int n_heads, bool inverse) const {
        const int half = static_cast<int>(cos_t.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const int t = static_cast<int>(r % seq);
            (void)batch;
            Scalar* row = x.data() + r * x.cols();
            for (int head = 0; head < n_heads; ++head) {
                Scalar* hp = row + head * 2 * half;
                for (int j = 0; j < half; ++j) {
                    const Scalar c = cos_t(t, j);
                    const Scalar s = inverse ? -sin_t(t, j) : sin_t(t, j);
                    const Scalar a = hp[2 * j];
                    const Scalar b = hp[2 * j + 1];
                    hp[2 * j] = a * c - b * s;
                    hp[2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
};

template <class Scalar>
void layer_norm_forward(const MatX<Scalar>& x, const MatX<Scalar>& gain, MatX<Scalar>& xhat,
                        ColX<Scalar>& inv_std, MatX<Scalar>& y) {
    ColX<Scalar> mu = x.rowwise().mean();
    xhat = x;
    xhat.colwise() -= mu;
    ColX<Scalar> var = xhat.array().square().matrix().rowwise().mean();
    inv_std = (var.array() + static_cast<Scalar>(kLayerNormEps)).sqrt().inverse();
    xhat.array().colwise() *= inv_std.array();
    y = xhat.array().rowwise() * gain.col(0).transpose().array();
}

template <class Scalar>
void layer_norm_backward(const MatX<Scalar>& d_out, const MatX<Scalar>& xhat,
                         const ColX<Scalar>& inv_std, const MatX<Scalar>& gain,
                         MatX<Scalar>& d_gain, MatX<Scalar>& d_in) {
    d_gain = (d_out.array() * xhat.array()).colwise().sum().transpose();
    MatX<Scalar> d_xhat = d_out.array().rowwise() * gain.col(0).transpose().array();
    ColX<Scalar> m1 = d_xhat.rowwise().mean();
    ColX<Scalar> m2 = (d_xhat.array() * xhat.array()).rowwise().mean();
    d_in = d_xhat;
    d_in.colwise() -= m1;
    d_in.array() -= xhat.array().colwise() * m2.array();
    d_in.array().colwise() *= inv_std.array();
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

// tanh-approximation gelu, vectorized over whole activations
template <class Scalar>
MatX<Scalar> gelu_forward(const MatX<Scalar>& x) {
    const Scalar c = static_cast<Scalar>(kGeluC);
    const Scalar a = static_cast<Scalar>(kGeluA);
    const auto f = x.array();
    return (Scalar(0.5) * f * (Scalar(1) + (c * (f + a * f.cube())).tanh())).matrix();
}

template <class Scalar>
MatX<Scalar> gelu_backward(const MatX<Scalar>& pre_act, const MatX<Scalar>& d_act) {
    const Scalar c = static_cast<Scalar>(kGeluC);
    const Scalar a = static_cast<Scalar>(kGeluA);
    const auto f = pre_act.array();
    const auto t = (c * (f + a * f.cube())).tanh();
    const auto grad = Scalar(0.5) * (Scalar(1) + t) +
                      Scalar(0.5) * f * (Scalar(1) - t.square()) * c *
                          (Scalar(1) + Scalar(3) * a * f.square());
    return (d_act.array() * grad).matrix();
}

template <class Scalar>
struct LayerTrace {
    MatX<Scalar> xhat1, att_in, q, k, v, att, mix, xhat2, mlp_in, pre_act, act;
    ColX<Scalar> inv_std1, inv_std2;
};

}  // namespace detail

template <class Scalar>
struct ForwardTrace {
    int batch = 0, seq = 0;
    std::vector<detail::LayerTrace<Scalar>> layers;
    MatX<Scalar> xhatf;
    ColX<Scalar> inv_stdf;
    MatX<Scalar> final_hidden;
};

struct TokenBatch {
    const std::int32_t* tokens = nullptr;
    const std::uint8_t* loss_mask = nullptr;  // may be null for inference
    int batch = 0;
    int seq = 0;

    static TokenBatch from(const PackedBatch& b) {
        return {b.tokens.data(), b.loss_mask.data(), b.batch_size, b.context_length};
    }
    std::int32_t token_at(int row, int col) const {
        return tokens[static_cast<std::size_t>(row) * seq + col];
    }
    bool scored(int row, int col) const {
        return loss_mask && loss_mask[static_cast<std::size_t>(row) * seq + col] != 0;
    }
};

namespace detail {

/// Embedding lookup through all transformer blocks up to the final layer
/// norm. Returns the normalized final hidden state (B*T x h).
template <class Scalar>
MatX<Scalar> run_blocks(const Params<Scalar>& params, const TokenBatch& in,
                        ForwardTrace<Scalar>* trace) {
    tune_allocator_once();
    const ModelConfig& cfg = params.config;
    const int batch = in.batch, seq = in.seq;
    const int h = cfg.hidden(), hd = cfg.head_dim, heads = cfg.n_heads;
    const Eigen::Index rows = static_cast<Eigen::Index>(batch) * seq;
    if (seq > cfg.context_length) throw std::invalid_argument("sequence exceeds context_length");
    if (batch < 1 || seq < 1) throw std::invalid_argument("empty batch");

    MatX<Scalar> x(rows, h);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const std::int32_t id = in.tokens[r];
        if (id < 0 || id >= cfg.vocab_size) throw std::invalid_argument("token id out of range");
        x.row(r) = params.embed.row(id);
    }

    const RopeTable<Scalar> rope(seq, hd);
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd)));
    if (trace) {
        trace->batch = batch;
        trace->seq = seq;
        trace->layers.resize(cfg.depth);
    }

    MatX<Scalar> scores(seq, seq);
    for (int l = 0; l < cfg.depth; ++l) {
        const LayerParams<Scalar>& lp = params.layers[l];
        detail::LayerTrace<Scalar> lt;
        layer_norm_forward(x, lp.ln1_g, lt.xhat1, lt.inv_std1, lt.att_in);
        lt.q.noalias() = lt.att_in * lp.wq;
        lt.k.noalias() = lt.att_in * lp.wk;
        lt.v.noalias() = lt.att_in * lp.wv;
        rope.apply(lt.q, batch, seq, heads, false);
        rope.apply(lt.k, batch, seq, heads, false);

        // per-head attention weights live side by side: block (b*seq, head*seq)
        lt.att.resize(rows, static_cast<Eigen::Index>(heads) * seq);
        lt.mix.resize(rows, h);
        for (int b = 0; b < batch; ++b) {
            for (int head = 0; head < heads; ++head) {
                auto qb = lt.q.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd);
                auto kb = lt.k.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd);
                auto vb = lt.v.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd);
                scores.noalias() = qb * kb.transpose();
                scores *= scale;
                for (int i = 0; i < seq; ++i) {
                    auto row = scores.row(i).head(i + 1);
                    const Scalar m = row.maxCoeff();
                    row = (row.array() - m).exp();
                    row /= row.sum();
                    if (i + 1 < seq) scores.row(i).tail(seq - 1 - i).setZero();
                }
                lt.mix.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd).noalias() =
                    scores * vb;
                lt.att.block(static_cast<Eigen::Index>(b) * seq,
                             static_cast<Eigen::Index>(head) * seq, seq, seq) = scores;
            }
        }
        x.noalias() += lt.mix * lp.wo;

        layer_norm_forward(x, lp.ln2_g, lt.xhat2, lt.inv_std2, lt.mlp_in);
        lt.pre_act.noalias() = lt.mlp_in * lp.w_fc;
        lt.act = gelu_forward(lt.pre_act);
        x.noalias() += lt.act * lp.w_proj;
        if (trace) (*trace).layers[l] = std::move(lt);
    }

    MatX<Scalar> xhatf, final_hidden;
    ColX<Scalar> inv_stdf;
    layer_norm_forward(x, params.lnf_g, xhatf, inv_stdf, final_hidden);
    if (trace) {
        trace->xhatf = std::move(xhatf);
        trace->inv_stdf = std::move(inv_stdf);
        trace->final_hidden = final_hidden;
    }
    return final_hidden;
}

}  // namespace detail

template <class Scalar>
struct ForwardResult {
    MatX<Scalar> logits;  // (B*T) x V
    double mean_nll = 0.0;
    int scored_positions = 0;
};

/// Causal LM forward pass. mean_nll averages cross-entropy over positions
/// whose loss mask is set; requires at least one scored position when a mask
/// is supplied.
template <class Scalar>
ForwardResult<Scalar> forward(const Params<Scalar>& params, const TokenBatch& in,
                              ForwardTrace<Scalar>* trace = nullptr) {
    ForwardResult<Scalar> out;
    MatX<Scalar> hidden = detail::run_blocks(params, in, trace);
    out.logits.noalias() = hidden * params.unembed;

    if (in.loss_mask) {
        double total = 0.0;
        int count = 0;
        for (int b = 0; b < in.batch; ++b) {
            for (int t = 0; t < in.seq; ++t) {
                if (!in.scored(b, t)) continue;
                if (t + 1 >= in.seq)
                    throw std::invalid_argument("loss mask set at final position");
                const Eigen::Index r = static_cast<Eigen::Index>(b) * in.seq + t;
                const auto row = out.logits.row(r);
                const Scalar m = row.maxCoeff();
                const double lse =
                    static_cast<double>(m) +
                    std::log(static_cast<double>((row.array() - m).exp().sum()));
                total += lse - static_cast<double>(row(in.token_at(b, t + 1)));
                ++count;
            }
        }
        if (count == 0) throw std::invalid_argument("forward: no scored positions in mask");
        out.mean_nll = total / count;
        out.scored_positions = count;
    }
    return out;
}

/// Exact analytic gradients of mean_nll with respect to every parameter.
template <class Scalar>
std::pair<double, Params<Scalar>> loss_and_grad(const Params<Scalar>& params,
                                                const TokenBatch& in) {
    const ModelConfig& cfg = params.config;
    const int batch = in.batch, seq = in.seq;
    const int h = cfg.hidden(), hd = cfg.head_dim, heads = cfg.n_heads;
    const Eigen::Index rows = static_cast<Eigen::Index>(batch) * seq;
    if (!in.loss_mask) throw std::invalid_argument("loss_and_grad: loss mask required");

    ForwardTrace<Scalar> trace;
    ForwardResult<Scalar> fwd = forward(params, in, &trace);
    if (!std::isfinite(fwd.mean_nll))
        throw divergence_error("non-finite training loss");

    Params<Scalar> grads = Params<Scalar>::zeros(cfg);
    const Scalar inv_count = static_cast<Scalar>(1.0 / fwd.scored_positions);

    // d(mean nll)/d(logits): (softmax - onehot) / M at scored positions.
    MatX<Scalar> d_logits = MatX<Scalar>::Zero(rows, cfg.vocab_size);
    for (int b = 0; b < batch; ++b) {
        for (int t = 0; t < seq; ++t) {
            if (!in.scored(b, t)) continue;
            const Eigen::Index r = static_cast<Eigen::Index>(b) * seq + t;
            const auto row = fwd.logits.row(r);
            const Scalar m = row.maxCoeff();
            Eigen::Array<Scalar, 1, Eigen::Dynamic> p = (row.array() - m).exp();
            p /= p.sum();
            d_logits.row(r) = p.matrix() * inv_count;
            d_logits(r, in.token_at(b, t + 1)) -= inv_count;
        }
    }

    grads.unembed.noalias() = trace.final_hidden.transpose() * d_logits;
    MatX<Scalar> d_hidden = d_logits * params.unembed.transpose();

    MatX<Scalar> dx;
    detail::layer_norm_backward(d_hidden, trace.xhatf, trace.inv_stdf, params.lnf_g, grads.lnf_g,
                                dx);

    const detail::RopeTable<Scalar> rope(seq, hd);
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd)));

    MatX<Scalar> d_att(seq, seq), d_scores(seq, seq);
    for (int l = cfg.depth - 1; l >= 0; --l) {
        const LayerParams<Scalar>& lp = params.layers[l];
        const detail::LayerTrace<Scalar>& lt = trace.layers[l];
        LayerParams<Scalar>& lg = grads.layers[l];

        // MLP branch
        lg.w_proj.noalias() = lt.act.transpose() * dx;
        MatX<Scalar> d_act = dx * lp.w_proj.transpose();
        MatX<Scalar> d_pre = detail::gelu_backward(lt.pre_act, d_act);
        lg.w_fc.noalias() = lt.mlp_in.transpose() * d_pre;
        MatX<Scalar> d_mlp_in = d_pre * lp.w_fc.transpose();
        MatX<Scalar> d_resid;
        detail::layer_norm_backward(d_mlp_in, lt.xhat2, lt.inv_std2, lp.ln2_g, lg.ln2_g, d_resid);
        dx += d_resid;

        // attention branch
        lg.wo.noalias() = lt.mix.transpose() * dx;
        MatX<Scalar> d_mix = dx * lp.wo.transpose();
        MatX<Scalar> d_q(rows, h), d_k(rows, h), d_v(rows, h);
        for (int b = 0; b < batch; ++b) {
            for (int head = 0; head < heads; ++head) {
                auto qb = lt.q.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd);
                auto kb = lt.k.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd);
                auto vb = lt.v.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd);
                auto pb = lt.att.block(static_cast<Eigen::Index>(b) * seq,
                                       static_cast<Eigen::Index>(head) * seq, seq, seq);
                auto d_mix_b =
                    d_mix.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd);
                d_att.noalias() = d_mix_b * vb.transpose();
                d_v.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd).noalias() =
                    pb.transpose() * d_mix_b;
                ColX<Scalar> row_dot = (d_att.array() * pb.array()).rowwise().sum();
                d_scores = d_att;
                d_scores.colwise() -= row_dot;
                d_scores.array() *= pb.array();
                d_q.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd).noalias() =
                    d_scores * kb * scale;
                d_k.block(static_cast<Eigen::Index>(b) * seq, head * hd, seq, hd).noalias() =
                    d_scores.transpose() * qb * scale;
            }
        }
        rope.apply(d_q, batch, seq, heads, true);
        rope.apply(d_k, batch, seq, heads, true);
        lg.wq.noalias() = lt.att_in.transpose() * d_q;
        lg.wk.noalias() = lt.att_in.transpose() * d_k;
        lg.wv.noalias() = lt.att_in.transpose() * d_v;
        MatX<Scalar> d_att_in = d_q * lp.wq.transpose();
        d_att_in.noalias() += d_k * lp.wk.transpose();
        d_att_in.noalias() += d_v * lp.wv.transpose();
        detail::layer_norm_backward(d_att_in, lt.xhat1, lt.inv_std1, lp.ln1_g, lg.ln1_g, d_resid);
        dx += d_resid;
    }

    for (Eigen::Index r = 0; r < rows; ++r) grads.embed.row(in.tokens[r]) += dx.row(r);
    return {fwd.mean_nll, std::move(grads)};
}

/// Greedy continuation of equal-length prompts. Each row decodes until it
/// emits stop_id or max_new tokens; returned continuations exclude stop_id.
template <class Scalar>
std::vector<std::vector<std::int32_t>> generate_greedy_batch(
    const Params<Scalar>& params, const std::vector<std::vector<std::int32_t>>& prompts,
    int max_new, std::int32_t stop_id) {
    if (prompts.empty()) return {};
    const int batch = static_cast<int>(prompts.size());
    const int prompt_len = static_cast<int>(prompts.front().size());
    if (prompt_len < 1) throw std::invalid_argument("generate: empty prompt");
    for (const auto& p : prompts)
        if (static_cast<int>(p.size()) != prompt_len)
            throw std::invalid_argument("generate: prompts must share length");
    if (prompt_len + max_new > params.config.context_length)
        throw std::invalid_argument("generate: context overflow");

    std::vector<std::int32_t> buf(static_cast<std::size_t>(batch) * (prompt_len + max_new));
    for (int b = 0; b < batch; ++b)
        std::copy(prompts[b].begin(), prompts[b].end(),
                  buf.begin() + static_cast<std::size_t>(b) * (prompt_len + max_new));

    std::vector<std::vector<std::int32_t>> out(batch);
    std::vector<char> done(batch, 0);
    const int stride = prompt_len + max_new;

    for (int step = 0; step < max_new; ++step) {
        bool all_done = true;
        for (char d : done) all_done = all_done && d;
        if (all_done) break;

        const int cur = prompt_len + step;
        std::vector<std::int32_t> view(static_cast<std::size_t>(batch) * cur);
        for (int b = 0; b < batch; ++b)
            std::copy_n(buf.begin() + static_cast<std::size_t>(b) * stride, cur,
                        view.begin() + static_cast<std::size_t>(b) * cur);
        TokenBatch tb{view.data(), nullptr, batch, cur};
        MatX<Scalar> hidden = detail::run_blocks<Scalar>(params, tb, nullptr);
        for (int b = 0; b < batch; ++b) {
            std::int32_t id = stop_id;  // finished rows continue with stop_id
            if (!done[b]) {
                const Eigen::Index last = static_cast<Eigen::Index>(b) * cur + (cur - 1);
                Eigen::Matrix<Scalar, 1, Eigen::Dynamic> logits =
                    hidden.row(last) * params.unembed;
                Eigen::Index arg = 0;
                logits.maxCoeff(&arg);
                id = static_cast<std::int32_t>(arg);
                if (id == stop_id)
                    done[b] = 1;
                else
                    out[b].push_back(id);
            }
            buf[static_cast<std::size_t>(b) * stride + cur] = id;
        }
    }
    return out;
}

template <class Scalar>
std::vector<std::int32_t> generate_greedy(const Params<Scalar>& params,
                                          std::span<const std::int32_t> prompt, int max_new,
                                          std::int32_t stop_id) {
    std::vector<std::vector<std::int32_t>> prompts{
        std::vector<std::int32_t>(prompt.begin(), prompt.end())};
    return generate_greedy_batch(params, prompts, max_new, stop_id).front();
}

}  // namespace distscale
