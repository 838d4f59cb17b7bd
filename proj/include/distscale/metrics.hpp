// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "distscale/model.hpp"
#include "distscale/task.hpp"

namespace distscale {

/// Probabilities are floored before logs so losses stay finite in f32.
inline constexpr double kProbFloor = 1e-30;

/// Teacher-forced per-token probabilities for a set of examples; losses are
/// derived as -ln(probability) so the two views stay exactly consistent.
struct TokenLossProfile {
    std::vector<std::vector<double>> probs;  // one vector per example, scored positions

    double loss(std::size_t example, std::size_t pos) const {
        return -std::log(probs[example][pos]);
    }

    void validate() const {
        for (const auto& ex : probs) {
            if (ex.empty()) throw std::invalid_argument("profile: example with no scored position");
            for (double p : ex)
                if (!(p > 0.0) || p > 1.0)
                    throw std::invalid_argument("profile: probability outside (0,1]");
        }
    }
};

/// Which positions of an example are scored by the continuous metrics:
/// every predictable position (all tokens after the first), or only the
/// answer span.
enum class ScoreSpan { full, answer_only };

/// Builds the teacher-forced profile for a set of examples. Each example is
/// scored standalone (no surrounding packed context).
template <class Scalar>
TokenLossProfile token_loss_profile(const Params<Scalar>& params,
                                    std::span<const Example> examples,
                                    ScoreSpan span = ScoreSpan::full) {
    TokenLossProfile profile;
    profile.probs.reserve(examples.size());

    // group by token length so rows can share a batch
    std::map<std::size_t, std::vector<std::size_t>> by_len;
    for (std::size_t i = 0; i < examples.size(); ++i)
        by_len[examples[i].tokens.size()].push_back(i);

    profile.probs.resize(examples.size());
    for (const auto& [len, idxs] : by_len) {
        if (len < 2) throw std::invalid_argument("token_loss_profile: example too short");
        const int batch = static_cast<int>(idxs.size());
        std::vector<std::int32_t> tokens(static_cast<std::size_t>(batch) * len);
        for (int b = 0; b < batch; ++b)
            std::copy(examples[idxs[b]].tokens.begin(), examples[idxs[b]].tokens.end(),
                      tokens.begin() + static_cast<std::size_t>(b) * len);
        TokenBatch tb{tokens.data(), nullptr, batch, static_cast<int>(len)};
        ForwardResult<Scalar> fwd = forward(params, tb);
        for (int b = 0; b < batch; ++b) {
            const Example& ex = examples[idxs[b]];
            const std::size_t first =
                span == ScoreSpan::full ? 1 : static_cast<std::size_t>(ex.answer_start);
            std::vector<double>& out = profile.probs[idxs[b]];
            for (std::size_t i = first; i < len; ++i) {
                const Eigen::Index r = static_cast<Eigen::Index>(b) * len + (i - 1);
                const auto row = fwd.logits.row(r);
                const Scalar m = row.maxCoeff();
                const double denom = static_cast<double>((row.array() - m).exp().sum());
                const double p =
                    std::exp(static_cast<double>(row(ex.tokens[i]) - m)) / denom;
                out.push_back(std::max(p, kProbFloor));
            }
        }
    }
    profile.validate();
    return profile;
}

/// Mean over examples of the maximum per-token loss.
inline double continuous_error(const TokenLossProfile& profile) {
    if (profile.probs.empty()) throw std::invalid_argument("continuous_error: empty profile");
    double total = 0.0;
    for (const auto& ex : profile.probs) {
        if (ex.empty()) throw std::invalid_argument("continuous_error: empty example");
        const double min_p = *std::min_element(ex.begin(), ex.end());
        total += -std::log(min_p);
    }
    return total / static_cast<double>(profile.probs.size());
}

/// Mean over examples of the minimum per-token probability.
inline double min_prob(const TokenLossProfile& profile) {
    if (profile.probs.empty()) throw std::invalid_argument("min_prob: empty profile");
    double total = 0.0;
    for (const auto& ex : profile.probs) {
        if (ex.empty()) throw std::invalid_argument("min_prob: empty example");
        total += *std::min_element(ex.begin(), ex.end());
    }
    return total / static_cast<double>(profile.probs.size());
}

/// Mean per-token loss, with examples weighted equally (each example
/// contributes its own mean). Coincides with the flat per-position mean on
/// equal-length evaluation sets and keeps mean_nll <= continuous_error on
/// ragged ones.
inline double mean_nll(const TokenLossProfile& profile) {
    if (profile.probs.empty()) throw std::invalid_argument("mean_nll: empty profile");
    double total = 0.0;
    for (const auto& ex : profile.probs) {
        if (ex.empty()) throw std::invalid_argument("mean_nll: empty example");
        double ex_total = 0.0;
        for (double p : ex) ex_total += -std::log(p);
        total += ex_total / static_cast<double>(ex.size());
    }
    return total / static_cast<double>(profile.probs.size());
}

/// Fraction of examples whose greedy generation from the prompt reproduces
/// the target answer token-for-token.
template <class Scalar>
double exact_match(const Params<Scalar>& params, std::span<const Example> examples,
                   std::int32_t stop_id) {
    if (examples.empty()) throw std::invalid_argument("exact_match: empty evaluation set");

    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < examples.size(); ++i)
        groups[{examples[i].prompt().size(), examples[i].answer().size()}].push_back(i);

    std::size_t matches = 0;
    for (const auto& [key, idxs] : groups) {
        const auto [prompt_len, answer_len] = key;
        std::vector<std::vector<std::int32_t>> prompts;
        prompts.reserve(idxs.size());
        for (std::size_t i : idxs) {
            const auto p = examples[i].prompt();
            prompts.emplace_back(p.begin(), p.end());
        }
        const auto outs =
            generate_greedy_batch(params, prompts, static_cast<int>(answer_len), stop_id);
        for (std::size_t b = 0; b < idxs.size(); ++b) {
            const auto answer = examples[idxs[b]].answer();
            if (outs[b].size() == answer.size() &&
                std::equal(outs[b].begin(), outs[b].end(), answer.begin()))
                ++matches;
        }
    }
    return static_cast<double>(matches) / static_cast<double>(examples.size());
}

}  // namespace distscale
