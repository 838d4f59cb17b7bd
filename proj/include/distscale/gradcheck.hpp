// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "distscale/model.hpp"
#include "distscale/rng.hpp"

namespace distscale {

/// Central finite differences against the analytic backward pass, tensor by
/// tensor. The numerical side only ever calls forward(), so it stays
/// independent of the gradient code it checks.
struct GradCheckReport {
    struct TensorReport {
        std::string name;
        double max_rel_err = 0.0;
        double max_abs_err = 0.0;
        std::int64_t entries = 0;
        bool pass = true;
    };
    std::vector<TensorReport> tensors;
    double worst_rel_err = 0.0;
    std::int64_t entries_checked = 0;
    bool pass = true;
};

struct GradCheckSettings {
    int batch = 2;
    int seq = 10;
    std::uint64_t seed = 0;
    double step = 1e-5;
    double rel_tol = 1e-4;
    double abs_floor = 1e-8;
};

inline GradCheckReport gradient_check(const ModelConfig& config,
                                      const GradCheckSettings& s = {}) {
    config.validate();
    Params<double> params = init_params<double>(config, s.seed);

    // synthetic batch: random tokens, roughly 70% of predictable positions scored
    Rng rng(s.seed + 1);
    std::vector<std::int32_t> tokens(static_cast<std::size_t>(s.batch) * s.seq);
    std::vector<std::uint8_t> mask(tokens.size(), 0);
    for (auto& t : tokens) t = static_cast<std::int32_t>(rng.uniform_int(0, config.vocab_size - 1));
    bool any = false;
    for (int b = 0; b < s.batch; ++b) {
        for (int t = 0; t + 1 < s.seq; ++t) {
            const bool on = rng.next_double() < 0.7;
            mask[static_cast<std::size_t>(b) * s.seq + t] = on ? 1 : 0;
            any = any || on;
        }
    }
    if (!any) mask[0] = 1;
    const TokenBatch batch{tokens.data(), mask.data(), s.batch, s.seq};

    const auto [loss, grads] = loss_and_grad(params, batch);
    (void)loss;

    GradCheckReport report;
    auto loss_at = [&]() { return forward(params, batch).mean_nll; };

    std::vector<MatX<double>*> tensors;
    std::vector<const MatX<double>*> grad_tensors;
    std::vector<std::string> names;
    params.for_each_tensor([&](const std::string& name, TensorKind, MatX<double>& t) {
        tensors.push_back(&t);
        names.push_back(name);
    });
    grads.for_each_tensor(
        [&](const std::string&, TensorKind, const MatX<double>& t) { grad_tensors.push_back(&t); });

    for (std::size_t k = 0; k < tensors.size(); ++k) {
        GradCheckReport::TensorReport tr;
        tr.name = names[k];
        MatX<double>& theta = *tensors[k];
        const MatX<double>& g = *grad_tensors[k];
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            const double saved = theta.data()[i];
            theta.data()[i] = saved + s.step;
            const double up = loss_at();
            theta.data()[i] = saved - s.step;
            const double down = loss_at();
            theta.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * s.step);
            const double analytic = g.data()[i];
            const double abs_err = std::fabs(numeric - analytic);
            const double scale = std::max(std::fabs(numeric), std::fabs(analytic));
            const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
            tr.max_abs_err = std::max(tr.max_abs_err, abs_err);
            if (abs_err > s.abs_floor) tr.max_rel_err = std::max(tr.max_rel_err, rel_err);
            if (abs_err > std::max(s.rel_tol * scale, s.abs_floor)) tr.pass = false;
            ++tr.entries;
        }
        report.worst_rel_err = std::max(report.worst_rel_err, tr.max_rel_err);
        report.entries_checked += tr.entries;
        report.pass = report.pass && tr.pass;
        report.tensors.push_back(std::move(tr));
    }
    return report;
}

}  // namespace distscale
