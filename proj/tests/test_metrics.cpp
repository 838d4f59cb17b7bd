// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: the worked arithmetic cases, the max-loss/min-prob
// duality, scaling behavior, and profile construction from a model.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "distscale/metrics.hpp"
#include "distscale/model.hpp"
#include "distscale/rng.hpp"
#include "distscale/task.hpp"

using namespace distscale;

namespace {

TokenLossProfile profile_from_losses(const std::vector<std::vector<double>>& losses) {
    TokenLossProfile p;
    for (const auto& ex : losses) {
        std::vector<double> probs;
        for (double l : ex) probs.push_back(std::exp(-l));
        p.probs.push_back(std::move(probs));
    }
    return p;
}

}  // namespace

TEST_CASE("continuous error: worked example") {
    const auto p = profile_from_losses({{0.1, 0.5}, {0.2, 0.3}});
    CHECK_THAT(continuous_error(p), Catch::Matchers::WithinAbs(0.4, 1e-12));
}

TEST_CASE("min prob: worked example") {
    TokenLossProfile p;
    p.probs = {{0.9, 0.4}, {0.8, 0.6}};
    CHECK_THAT(min_prob(p), Catch::Matchers::WithinAbs(0.5, 1e-15));
}

TEST_CASE("perfect predictions: zero error, unit min prob") {
    TokenLossProfile p;
    p.probs = {{1.0, 1.0, 1.0}, {1.0}};
    CHECK(continuous_error(p) == 0.0);
    CHECK(min_prob(p) == 1.0);
    CHECK(mean_nll(p) == 0.0);
}

TEST_CASE("mean nll: hand-computed three-example average") {
    const auto p = profile_from_losses({{0.1, 0.3}, {0.2}, {0.4, 0.5, 0.6}});
    // examples weighted equally: (0.2 + 0.2 + 0.5) / 3
    CHECK_THAT(mean_nll(p), Catch::Matchers::WithinAbs(0.3, 1e-12));
    // equal-length profile: identical to the flat per-position mean
    const auto q = profile_from_losses({{0.1, 0.3}, {0.4, 0.6}});
    CHECK_THAT(mean_nll(q), Catch::Matchers::WithinAbs(0.35, 1e-12));
}

TEST_CASE("duality: per-example max loss equals minus log min prob") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        TokenLossProfile p;
        const int n_pos = 1 + static_cast<int>(rng.uniform_int(0, 6));
        std::vector<double> probs;
        for (int i = 0; i < n_pos; ++i)
            probs.push_back(std::max(kProbFloor, rng.next_double()));
        p.probs.push_back(probs);
        double max_loss = 0.0, min_p = 1.0;
        for (double q : probs) {
            max_loss = std::max(max_loss, -std::log(q));
            min_p = std::min(min_p, q);
        }
        REQUIRE_THAT(continuous_error(p), Catch::Matchers::WithinAbs(-std::log(min_p), 1e-9));
        REQUIRE_THAT(max_loss, Catch::Matchers::WithinAbs(-std::log(min_p), 1e-9));
    }
}

TEST_CASE("scaling every per-token loss by c scales the error score by c") {
    Rng rng(6);
    std::vector<std::vector<double>> losses(5);
    for (auto& ex : losses)
        for (int i = 0; i < 4; ++i) ex.push_back(0.05 + 3.0 * rng.next_double());
    const double base = continuous_error(profile_from_losses(losses));
    for (const double c : {0.25, 0.6}) {
        auto scaled = losses;
        for (auto& ex : scaled)
            for (auto& l : ex) l *= c;
        CHECK_THAT(continuous_error(profile_from_losses(scaled)),
                   Catch::Matchers::WithinAbs(c * base, 1e-10));
    }
}

TEST_CASE("mean nll never exceeds the continuous error score") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        TokenLossProfile p;
        for (int e = 0; e < 4; ++e) {
            std::vector<double> probs;
            const int n_pos = 1 + static_cast<int>(rng.uniform_int(0, 5));
            for (int i = 0; i < n_pos; ++i)
                probs.push_back(std::max(kProbFloor, rng.next_double()));
            p.probs.push_back(std::move(probs));
        }
        REQUIRE(mean_nll(p) <= continuous_error(p) + 1e-12);
    }
}

TEST_CASE("the error score is 1-Lipschitz in per-token losses") {
    Rng rng(8);
    std::vector<std::vector<double>> losses(6);
    for (auto& ex : losses)
        for (int i = 0; i < 5; ++i) ex.push_back(0.1 + 2.0 * rng.next_double());
    const double base = continuous_error(profile_from_losses(losses));
    const double eps = 1e-3;
    auto shifted = losses;
    for (auto& ex : shifted)
        for (auto& l : ex) l += eps * (rng.next_double() * 2.0 - 1.0);
    const double moved = continuous_error(profile_from_losses(shifted));
    CHECK(std::fabs(moved - base) <= eps + 1e-12);
}

TEST_CASE("degenerate profiles are rejected") {
    TokenLossProfile empty;
    CHECK_THROWS_AS(continuous_error(empty), std::invalid_argument);
    CHECK_THROWS_AS(min_prob(empty), std::invalid_argument);
    CHECK_THROWS_AS(mean_nll(empty), std::invalid_argument);
    TokenLossProfile holey;
    holey.probs = {{0.5}, {}};
    CHECK_THROWS_AS(continuous_error(holey), std::invalid_argument);
    TokenLossProfile bad;
    bad.probs = {{1.5}};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("profile built from a model: bounds and answer-only suffix") {
    const ModelConfig mc = make_config(1, 8, 150, 64, 8);
    const auto params = init_params<float>(mc, 9);
    const Vocab vocab = Vocab::for_count();
    Rng rng(10);
    std::vector<Example> examples;
    for (int i = 0; i < 6; ++i)
        examples.push_back(gen_count_example(rng, 2, 8, vocab.numeric_max, vocab));

    const auto full = token_loss_profile(params, examples, ScoreSpan::full);
    const auto answer_only = token_loss_profile(params, examples, ScoreSpan::answer_only);
    REQUIRE(full.probs.size() == examples.size());
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto& ex = examples[e];
        REQUIRE(full.probs[e].size() == ex.tokens.size() - 1);
        REQUIRE(answer_only.probs[e].size() == ex.tokens.size() - ex.answer_start);
        // answer-only scores are the tail of the full-span scores
        const std::size_t offset = full.probs[e].size() - answer_only.probs[e].size();
        for (std::size_t i = 0; i < answer_only.probs[e].size(); ++i)
            REQUIRE(answer_only.probs[e][i] == full.probs[e][offset + i]);
        for (double p : full.probs[e]) {
            REQUIRE(p > 0.0);
            REQUIRE(p <= 1.0);
        }
    }
    const double em = exact_match(params, examples, vocab.id_sep);
    CHECK(em >= 0.0);
    CHECK(em <= 1.0);
}

TEST_CASE("uniform model scores exact match one on all-zero answers") {
    const ModelConfig mc = make_config(1, 8, 150, 64, 8);
    auto params = init_params<float>(mc, 11);
    params.unembed.setZero();  // argmax ties resolve to token id 0
    const Vocab vocab = Vocab::for_count();
    std::vector<Example> examples(3, make_count_example(0, 0, vocab));
    CHECK(exact_match(params, examples, vocab.id_sep) == 1.0);
}

TEST_CASE("untrained model has near-zero exact match at length 20") {
    const ModelConfig mc = make_config(1, 8, 150, 64, 8);
    const auto params = init_params<float>(mc, 12);
    const Vocab vocab = Vocab::for_count();
    Rng rng(13);
    std::vector<Example> examples;
    for (int i = 0; i < 30; ++i)
        examples.push_back(gen_count_example(rng, 20, 20, vocab.numeric_max, vocab));
    CHECK(exact_match(params, examples, vocab.id_sep) <= 0.01);
}

TEST_CASE("empty evaluation set is an error") {
    const ModelConfig mc = make_config(1, 8, 150, 64, 8);
    const auto params = init_params<float>(mc, 14);
    std::vector<Example> none;
    CHECK_THROWS_AS(exact_match(params, none, 0), std::invalid_argument);
}
