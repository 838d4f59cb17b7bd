// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "distscale/metrics.hpp"
#include "distscale/model.hpp"
#include "distscale/rng.hpp"
#include "distscale/run_record.hpp"
#include "distscale/task.hpp"

namespace distscale {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// Cosine decay from peak_lr to zero over the step budget.
inline double lr_at(int step, int steps, double peak_lr) {
    if (step < 0 || step >= steps) throw std::invalid_argument("lr_at: step out of range");
    return peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * step / steps));
}

/// Schedule with an optional linear warmup ramp ahead of the cosine decay.
inline double lr_at(int step, const TrainConfig& config) {
    if (config.warmup_steps > 0 && step >= 0 && step < config.warmup_steps &&
        config.warmup_steps < config.steps)
        return config.peak_lr * (step + 1.0) / config.warmup_steps;
    return lr_at(step, config.steps, config.peak_lr);
}

template <class Scalar>
struct AdamState {
    Params<Scalar> m, v;

    static AdamState zeros(const ModelConfig& config) {
        return {Params<Scalar>::zeros(config), Params<Scalar>::zeros(config)};
    }
};

/// Adam with bias correction and decoupled weight decay. Decay applies to
/// projection tensors only (norm gains and the embedding table are exempt).
template <class Scalar>
void optimizer_step(Params<Scalar>& params, const Params<Scalar>& grads, AdamState<Scalar>& state,
                    int step, double lr, double weight_decay) {
    const Scalar b1 = static_cast<Scalar>(kAdamBeta1);
    const Scalar b2 = static_cast<Scalar>(kAdamBeta2);
    const Scalar eps = static_cast<Scalar>(kAdamEps);
    const Scalar bc1 = static_cast<Scalar>(1.0 - std::pow(kAdamBeta1, step + 1));
    const Scalar bc2 = static_cast<Scalar>(1.0 - std::pow(kAdamBeta2, step + 1));
    const Scalar lr_s = static_cast<Scalar>(lr);
    const Scalar wd_s = static_cast<Scalar>(weight_decay);

    // all four Params visit tensors in the same fixed order; zip them
    std::vector<MatX<Scalar>*> thetas, ms, vs;
    std::vector<const MatX<Scalar>*> gs;
    std::vector<TensorKind> kinds;
    params.for_each_tensor([&](const std::string&, TensorKind kind, MatX<Scalar>& t) {
        thetas.push_back(&t);
        kinds.push_back(kind);
    });
    grads.for_each_tensor(
        [&](const std::string&, TensorKind, const MatX<Scalar>& t) { gs.push_back(&t); });
    state.m.for_each_tensor([&](const std::string&, TensorKind, MatX<Scalar>& t) { ms.push_back(&t); });
    state.v.for_each_tensor([&](const std::string&, TensorKind, MatX<Scalar>& t) { vs.push_back(&t); });

    for (std::size_t i = 0; i < thetas.size(); ++i) {
        MatX<Scalar>& theta = *thetas[i];
        const MatX<Scalar>& g = *gs[i];
        if (g.rows() != theta.rows() || g.cols() != theta.cols())
            throw std::invalid_argument("optimizer_step: gradient shape mismatch");
        ms[i]->array() = b1 * ms[i]->array() + (1 - b1) * g.array();
        vs[i]->array() = b2 * vs[i]->array() + (1 - b2) * g.array().square();
        theta.array() -= lr_s * (ms[i]->array() / bc1) / ((vs[i]->array() / bc2).sqrt() + eps);
        if (wd_s != Scalar{0} && kinds[i] == TensorKind::projection)
            theta.array() -= lr_s * wd_s * theta.array();
    }
}

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// pre-clip norm.
template <class Scalar>
double clip_grad_norm(Params<Scalar>& grads, double max_norm) {
    double sq = 0.0;
    grads.for_each_tensor([&](const std::string&, TensorKind, MatX<Scalar>& t) {
        sq += static_cast<double>(t.template cast<double>().array().square().sum());
    });
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const Scalar scale = static_cast<Scalar>(max_norm / norm);
        grads.for_each_tensor(
            [&](const std::string&, TensorKind, MatX<Scalar>& t) { t *= scale; });
    }
    return norm;
}

namespace detail {

inline TaskSpec task_spec_from(const TrainConfig& c) {
    if (c.task == TaskKind::count) return TaskSpec::count_task(c.max_train_length);
    return TaskSpec::addition_task(c.max_train_length, c.max_eval_digits);
}

inline int eval_example_tokens(TaskKind task, int length) {
    if (task == TaskKind::count) return 5 + 2 * length - 1;
    return 8 * length + 4 * (length + 1) + 3;
}

}  // namespace detail

/// Validates a (model, train) pairing: vocabulary must match the task and
/// the model context must fit both packed training rows and the longest
/// evaluation example.
inline void validate_run_configs(const ModelConfig& model, const TrainConfig& train) {
    model.validate();
    const TaskSpec spec = detail::task_spec_from(train);
    if (model.vocab_size != spec.vocab.size)
        throw std::invalid_argument("model vocab_size does not match the task vocabulary (" +
                                    std::to_string(spec.vocab.size) + ")");
    if (model.context_length < train.context_length)
        throw std::invalid_argument("model context shorter than training context");
    for (int len : train.eval_lengths) {
        if (len < 1) throw std::invalid_argument("nonpositive eval length");
        if (train.task == TaskKind::addition && len > train.max_eval_digits)
            throw std::invalid_argument("eval length exceeds max_eval_digits");
        if (detail::eval_example_tokens(train.task, len) > model.context_length)
            throw std::invalid_argument("eval example does not fit model context");
    }
    if (train.steps < 0 || train.batch_size < 1) throw std::invalid_argument("bad train budget");
}

/// Trains one model on one task at one scale point and returns the complete
/// RunRecord. Deterministic given the configs; a diverged run is recorded
/// with status "diverged" rather than thrown.
template <class Scalar = float>
RunRecord train_run(const ModelConfig& model_config, const TrainConfig& train_config,
                    Params<Scalar>* trained_out = nullptr) {
    validate_run_configs(model_config, train_config);
    const auto t0 = std::chrono::steady_clock::now();

    RunRecord record;
    record.task = train_config.task;
    record.scale_label = model_config.scale_label();
    record.param_count = model_config.param_count();
    record.model_config = model_config;
    record.train_config = train_config;
    record.seed = train_config.seed;

    const SeedStreams streams = split_seed(train_config.seed);
    Params<Scalar> params = init_params<Scalar>(model_config, streams.init_seed);
    AdamState<Scalar> adam = AdamState<Scalar>::zeros(model_config);
    Rng data_rng(streams.data_seed);
    const TaskSpec spec = detail::task_spec_from(train_config);

    const int trace_stride = std::max(1, train_config.steps / 200);
    int perfect_id_checks = 0;

    for (int step = 0; step < train_config.steps; ++step) {
        PackedBatch batch =
            pack_batch(data_rng, spec, train_config.batch_size, train_config.context_length);
        double loss = 0.0;
        try {
            auto [l, grads] = loss_and_grad(params, TokenBatch::from(batch));
            loss = l;
            if (train_config.grad_clip > 0.0) clip_grad_norm(grads, train_config.grad_clip);
            optimizer_step(params, grads, adam, step, lr_at(step, train_config),
                           train_config.weight_decay);
        } catch (const divergence_error&) {
            record.status = "diverged";
            record.train_loss_trace.emplace_back(step, std::nan(""));
            break;
        }
        if (step % trace_stride == 0 || step + 1 == train_config.steps)
            record.train_loss_trace.emplace_back(step, loss);

        const bool want_eval_trace =
            train_config.eval_every > 0 && (step + 1) % train_config.eval_every == 0;
        const bool want_early_check = train_config.early_stop && (step + 1) % 100 == 0;
        if (want_eval_trace || want_early_check) {
            Rng eval_rng(train_config.eval_seed);
            const int len = train_config.eval_lengths.empty() ? train_config.max_train_length
                                                              : train_config.eval_lengths.front();
            const auto eval_set = build_eval_set(spec, len, std::min(train_config.eval_items, 32),
                                                 eval_rng);
            const double em = exact_match(params, eval_set, spec.vocab.id_sep);
            if (want_eval_trace) record.eval_trace.emplace_back(step + 1, em);
            if (want_early_check) {
                perfect_id_checks = em == 1.0 ? perfect_id_checks + 1 : 0;
                if (perfect_id_checks >= 2) break;  // sustained for 200 steps
            }
        }
    }

    if (record.status == "ok") {
        for (int len : train_config.eval_lengths) {
            std::uint64_t sm = train_config.eval_seed + static_cast<std::uint64_t>(len);
            Rng eval_rng(splitmix64_next(sm));
            const auto eval_set = build_eval_set(spec, len, train_config.eval_items, eval_rng);
            record.metrics["em"][len] = exact_match(params, eval_set, spec.vocab.id_sep);
            const TokenLossProfile profile = token_loss_profile(params, eval_set);
            record.metrics["continuous_error"][len] = continuous_error(profile);
            record.metrics["min_prob"][len] = min_prob(profile);
            record.metrics["mean_nll"][len] = mean_nll(profile);
        }
    }

    record.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (trained_out) *trained_out = std::move(params);
    return record;
}

}  // namespace distscale
