// SPDX-License-Identifier: Apache-2.0
//
// Population analytics: mixture decomposition, bootstrap, KDE and peak
// detection, Wasserstein-L2 with a quantile-integral oracle,
// breakthroughness/linearity, and record ingestion.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "distscale/analysis.hpp"
#include "distscale/rng.hpp"

using namespace distscale;

namespace {

// Brute-force W2 oracle: midpoint evaluation of the quantile functions on a
// common refinement with n*m cells, exact for step functions.
double w2_oracle(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const std::size_t cells = a.size() * b.size();
    double total = 0.0;
    for (std::size_t k = 0; k < cells; ++k) {
        const double q = (static_cast<double>(k) + 0.5) / static_cast<double>(cells);
        const double qa = a[static_cast<std::size_t>(q * static_cast<double>(a.size()))];
        const double qb = b[static_cast<std::size_t>(q * static_cast<double>(b.size()))];
        total += (qa - qb) * (qa - qb);
    }
    return std::sqrt(total / static_cast<double>(cells));
}

std::vector<double> random_values(Rng& rng, int n, double lo = 0.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = lo + (hi - lo) * rng.next_double();
    return v;
}

PopulationDistribution make_pop(const std::string& scale, std::int64_t params,
                                std::vector<double> values, const std::string& metric = "em@8") {
    PopulationDistribution p;
    p.task = TaskKind::count;
    p.scale_label = scale;
    p.param_count = params;
    p.metric_name = metric;
    p.values = std::move(values);
    for (std::size_t i = 0; i < p.values.size(); ++i) p.seed_ids.push_back(i);
    return p;
}

}  // namespace

TEST_CASE("mixture stats: worked decomposition") {
    const std::vector<double> values{0.0, 0.0, 1.0, 1.0};
    const MixtureStats s = mixture_stats(values, 0.2);
    CHECK(s.p_success == 0.5);
    CHECK(s.mean_success.value() == 1.0);
    CHECK(s.mean_fail.value() == 0.0);
    CHECK(s.mean_all == 0.5);
}

TEST_CASE("mixture stats: empty components stay absent") {
    const std::vector<double> lows{0.1, 0.15};
    const MixtureStats s = mixture_stats(lows, 0.2);
    CHECK(s.p_success == 0.0);
    CHECK_FALSE(s.mean_success.has_value());
    CHECK(s.mean_fail.value() == 0.125);
    const MixtureStats t = mixture_stats(lows, 0.05);
    CHECK(t.p_success == 1.0);
    CHECK_FALSE(t.mean_fail.has_value());
}

TEST_CASE("paper thresholds ship as the task defaults") {
    CHECK(default_success_threshold(TaskKind::addition) == 0.20);
    CHECK(default_success_threshold(TaskKind::count) == 0.50);
}

TEST_CASE("mixture decomposition identity holds on random populations") {
    Rng rng(21);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto values = random_values(rng, 2 + static_cast<int>(rng.uniform_int(0, 60)));
        const double threshold = rng.next_double();
        const MixtureStats s = mixture_stats(values, threshold);
        double recomposed = 0.0;
        if (s.mean_success) recomposed += s.p_success * *s.mean_success;
        if (s.mean_fail) recomposed += (1.0 - s.p_success) * *s.mean_fail;
        REQUIRE_THAT(recomposed, Catch::Matchers::WithinAbs(s.mean_all, 1e-12));
    }
}

TEST_CASE("bootstrap: constant vector gives a degenerate interval") {
    const std::vector<double> values(20, 0.7);
    const auto [lo, hi] = bootstrap_ci(values, BootstrapStatistic::mean, 0.5);
    CHECK(lo == hi);  // no variation, no width (up to the mean's own rounding)
    CHECK_THAT(lo, Catch::Matchers::WithinAbs(0.7, 1e-12));
}

TEST_CASE("bootstrap: fixed seed gives identical intervals") {
    Rng rng(22);
    const auto values = random_values(rng, 40);
    const auto a = bootstrap_ci(values, BootstrapStatistic::mean, 0.5, 500, 0.95, 7);
    const auto b = bootstrap_ci(values, BootstrapStatistic::mean, 0.5, 500, 0.95, 7);
    const auto c = bootstrap_ci(values, BootstrapStatistic::mean, 0.5, 500, 0.95, 8);
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("bootstrap: interval for a balanced binary sample straddles one half") {
    std::vector<double> values;
    for (int i = 0; i < 50; ++i) {
        values.push_back(0.0);
        values.push_back(1.0);
    }
    const auto [lo, hi] = bootstrap_ci(values, BootstrapStatistic::mean, 0.5, 1000, 0.95, 1);
    CHECK(lo < 0.5);
    CHECK(hi > 0.5);
    CHECK(lo > 0.3);
    CHECK(hi < 0.7);
}

TEST_CASE("bootstrap: undefined statistic resamples are redrawn up to a cap") {
    // one success among many failures: mean_success is undefined on most
    // resamples but defined often enough to finish
    std::vector<double> values(30, 0.0);
    values[0] = 1.0;
    const auto [lo, hi] =
        bootstrap_ci(values, BootstrapStatistic::mean_success, 0.5, 200, 0.95, 3);
    CHECK(lo == 1.0);
    CHECK(hi == 1.0);
    // no successes at all: the cap trips
    const std::vector<double> none(30, 0.0);
    CHECK_THROWS_AS(bootstrap_ci(none, BootstrapStatistic::mean_success, 0.5, 50, 0.95, 3),
                    std::runtime_error);
}

TEST_CASE("kde: single value is a gaussian bump at the value") {
    const std::vector<double> values{0.4};
    KdeSettings settings;
    settings.bandwidth = 0.1;
    settings.grid_lo = -0.6;
    settings.grid_hi = 1.4;
    settings.n_points = 1001;
    const KdeResult k = kde(values, settings);
    CHECK_THAT(k.argmax_grid(), Catch::Matchers::WithinAbs(0.4, 2e-3));
    const double peak = *std::max_element(k.density.begin(), k.density.end());
    CHECK_THAT(peak, Catch::Matchers::WithinRel(1.0 / (0.1 * std::sqrt(2 * M_PI)), 1e-3));
}

TEST_CASE("kde: density integrates to one on a wide grid") {
    Rng rng(23);
    const auto values = random_values(rng, 80);
    KdeSettings settings;
    settings.bandwidth = 0.07;
    settings.grid_lo = 0.0 - 6.0 * 0.07;
    settings.grid_hi = 1.0 + 6.0 * 0.07;
    settings.n_points = 2048;
    const KdeResult k = kde(values, settings);
    double integral = 0.0;
    for (std::size_t i = 0; i + 1 < k.grid.size(); ++i)
        integral += 0.5 * (k.density[i] + k.density[i + 1]) * (k.grid[i + 1] - k.grid[i]);
    CHECK_THAT(integral, Catch::Matchers::WithinAbs(1.0, 1e-3));
    for (double d : k.density) REQUIRE(d >= 0.0);
}

TEST_CASE("kde: degenerate all-equal sample applies the bandwidth floor") {
    const std::vector<double> values(10, 0.5);
    const KdeResult k = kde(values);
    CHECK(k.bandwidth == 1e-4);
    for (double d : k.density) REQUIRE(std::isfinite(d));
}

TEST_CASE("silverman bandwidth matches a hand evaluation") {
    // values 0..9: sd = sqrt(55/6) ~ 3.0277, iqr = 4.5, iqr/1.34 ~ 3.3582
    std::vector<double> values;
    for (int i = 0; i < 10; ++i) values.push_back(i);
    const double sd = std::sqrt(55.0 / 6.0);
    const double expect = 0.9 * std::min(sd, 4.5 / 1.34) * std::pow(10.0, -0.2);
    CHECK_THAT(silverman_bandwidth(values), Catch::Matchers::WithinRel(expect, 1e-12));
}

TEST_CASE("kde: two separated clusters yield exactly two peaks") {
    std::vector<double> values;
    for (int i = 0; i < 50; ++i) {
        values.push_back(0.0);
        values.push_back(1.0);
    }
    KdeSettings settings;
    settings.bandwidth = 0.05;
    settings.grid_lo = -0.3;
    settings.grid_hi = 1.3;
    settings.n_points = 512;
    const KdeResult k = kde(values, settings);
    const auto peaks = find_kde_peaks(k);
    REQUIRE(peaks.size() == 2);
    CHECK_THAT(peaks[0].x, Catch::Matchers::WithinAbs(0.0, 0.01));
    CHECK_THAT(peaks[1].x, Catch::Matchers::WithinAbs(1.0, 0.01));
    CHECK(kde_is_bimodal(k));
}

TEST_CASE("mode estimate follows the dominant cluster") {
    const std::vector<double> low{0.0, 0.0, 0.0, 1.0};
    const std::vector<double> high{0.0, 1.0, 1.0, 1.0};
    KdeSettings settings;
    settings.bandwidth = 0.05;
    settings.grid_lo = -0.2;
    settings.grid_hi = 1.2;
    CHECK(mode_estimate(low, settings) < 0.1);
    CHECK(mode_estimate(high, settings) > 0.9);
}

TEST_CASE("mode steps while the mean moves linearly in the mixing weight") {
    KdeSettings settings;
    settings.bandwidth = 0.05;
    settings.grid_lo = -0.2;
    settings.grid_hi = 1.2;
    const int n = 100;
    int transitions = 0;
    bool has_prev = false;
    double prev_mode = 0.0;
    for (int k = 30; k <= 70; k += 2) {
        std::vector<double> values(n, 0.0);
        for (int i = 0; i < k; ++i) values[i] = 1.0;
        const MixtureStats s = mixture_stats(values, 0.5);
        CHECK_THAT(s.mean_all, Catch::Matchers::WithinAbs(k / 100.0, 1e-12));
        const double mode = mode_estimate(values, settings);
        CHECK((mode < 0.1 || mode > 0.9));
        if (has_prev && std::fabs(mode - prev_mode) > 0.5) ++transitions;
        prev_mode = mode;
        has_prev = true;
    }
    CHECK(transitions == 1);
}

TEST_CASE("w2: trivial cases") {
    const std::vector<double> a{0.0, 0.0}, b{1.0, 1.0};
    CHECK(wasserstein2(a, a) == 0.0);
    CHECK_THAT(wasserstein2(a, b), Catch::Matchers::WithinAbs(1.0, 1e-15));
    const std::vector<double> c{0.0, 1.0}, d{1.0, 2.0};
    CHECK_THAT(wasserstein2(c, d), Catch::Matchers::WithinAbs(1.0, 1e-15));
}

TEST_CASE("w2: matches the quantile-integral oracle on unequal sizes") {
    Rng rng(24);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_int(0, 39));
        const int m = 1 + static_cast<int>(rng.uniform_int(0, 39));
        const auto a = random_values(rng, n, -2.0, 2.0);
        const auto b = random_values(rng, m, -2.0, 2.0);
        REQUIRE_THAT(wasserstein2(a, b), Catch::Matchers::WithinAbs(w2_oracle(a, b), 1e-9));
    }
}

TEST_CASE("w2: metric axioms on random samples") {
    Rng rng(25);
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = random_values(rng, 12), b = random_values(rng, 17), c = random_values(rng, 9);
        const double ab = wasserstein2(a, b), ba = wasserstein2(b, a);
        REQUIRE_THAT(ab, Catch::Matchers::WithinAbs(ba, 1e-12));
        REQUIRE(ab >= 0.0);
        REQUIRE(wasserstein2(a, a) <= 1e-12);
        REQUIRE(wasserstein2(a, c) <= ab + wasserstein2(b, c) + 1e-9);
    }
}

TEST_CASE("w2: translation behavior") {
    Rng rng(26);
    const auto a = random_values(rng, 20), b = random_values(rng, 20);
    std::vector<double> a_shift = a, b_shift = b;
    for (auto& v : a_shift) v += 0.37;
    for (auto& v : b_shift) v += 0.37;
    CHECK_THAT(wasserstein2(a_shift, b_shift),
               Catch::Matchers::WithinAbs(wasserstein2(a, b), 1e-12));
    CHECK_THAT(wasserstein2(a, a_shift), Catch::Matchers::WithinAbs(0.37, 1e-12));
}

TEST_CASE("wasserstein drift ends at zero and tracks convergence") {
    std::vector<PopulationDistribution> pops;
    for (int s = 0; s <= 4; ++s)
        pops.push_back(make_pop("s" + std::to_string(s), 100 + s,
                                std::vector<double>(20, 0.25 * s)));
    const ScalingCurve curve = wasserstein_drift(pops);
    REQUIRE(curve.y.size() == 5);
    CHECK(curve.y.back() == 0.0);
    for (std::size_t i = 1; i < curve.y.size(); ++i) CHECK(curve.y[i] < curve.y[i - 1]);

    std::vector<PopulationDistribution> same{make_pop("a", 1, {0.5, 0.6}),
                                             make_pop("b", 2, {0.5, 0.6})};
    const auto flat = wasserstein_drift(same);
    CHECK(flat.y == std::vector<double>{0.0, 0.0});

    std::vector<PopulationDistribution> mixed{make_pop("a", 1, {0.5}, "em@8"),
                                              make_pop("b", 2, {0.5}, "em@9")};
    CHECK_THROWS_AS(wasserstein_drift(mixed), std::invalid_argument);
}

TEST_CASE("bimodality onset fires at the constructed scale") {
    KdeSettings settings;
    settings.bandwidth = 0.05;
    settings.grid_lo = -0.3;
    settings.grid_hi = 1.3;
    std::vector<PopulationDistribution> pops;
    pops.push_back(make_pop("s1", 10, std::vector<double>(100, 0.0)));
    for (int s = 2; s <= 4; ++s) {
        std::vector<double> values(100, 0.0);
        for (int i = 0; i < 50; ++i) values[i] = 1.0;
        pops.push_back(make_pop("s" + std::to_string(s), 10 * s, values));
    }
    CHECK(bimodality_onset(pops, settings).value() == "s2");

    std::vector<PopulationDistribution> unimodal{make_pop("a", 1, std::vector<double>(50, 0.2)),
                                                 make_pop("b", 2, std::vector<double>(50, 0.8))};
    CHECK_FALSE(bimodality_onset(unimodal, settings).has_value());
}

TEST_CASE("bimodality detection ignores a single outlier") {
    KdeSettings settings;
    settings.bandwidth = 0.05;
    settings.grid_lo = -0.3;
    settings.grid_hi = 1.3;
    std::vector<double> values(100, 0.0);
    CHECK_FALSE(kde_is_bimodal(kde(values, settings)));
    values.push_back(1.0);  // one outlier seed must not flip the verdict
    CHECK_FALSE(kde_is_bimodal(kde(values, settings)));
}

TEST_CASE("breakthroughness and linearity on the reference curves") {
    const std::vector<double> ramp{0.0, 0.25, 0.5, 0.75, 1.0};
    CHECK_THAT(linearity(ramp), Catch::Matchers::WithinAbs(4.0, 1e-12));
    CHECK_THAT(breakthroughness(ramp), Catch::Matchers::WithinAbs(4.0, 1e-12));

    const std::vector<double> step{0.0, 0.0, 0.0, 0.0, 1.0};
    CHECK_THAT(linearity(step), Catch::Matchers::WithinAbs(2.0, 1e-12));
    CHECK(std::isinf(breakthroughness(step)));
    CHECK(breakthroughness(step) > 0);

    const std::vector<double> flat{0.3, 0.3, 0.3};
    CHECK(linearity(flat) == 0.0);
    CHECK(breakthroughness(flat) == 0.0);

    const std::vector<double> drop{1.0, 0.0, 0.0, 0.0, 0.0};
    CHECK(std::isinf(breakthroughness(drop)));
    CHECK(breakthroughness(drop) < 0);
}

TEST_CASE("curve metrics are invariant to positive rescaling") {
    Rng rng(27);
    for (int trial = 0; trial < 100; ++trial) {
        const auto y = random_values(rng, 6);
        const double l = linearity(y), b = breakthroughness(y);
        for (const double c : {0.3, 2.5}) {
            auto scaled = y;
            for (auto& v : scaled) v *= c;
            if (std::isfinite(l))
                REQUIRE_THAT(linearity(scaled), Catch::Matchers::WithinAbs(l, 1e-12));
            if (std::isfinite(b))
                REQUIRE_THAT(breakthroughness(scaled), Catch::Matchers::WithinAbs(b, 1e-12));
        }
    }
}

TEST_CASE("record ingestion: grouping, round-trip, and errors") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "distscale_ingest_test";
    fs::create_directories(dir);
    const fs::path path = dir / "records.jsonl";

    auto make_record = [](const std::string& scale, std::int64_t params, std::uint64_t seed,
                          double em) {
        RunRecord r;
        r.task = TaskKind::count;
        r.scale_label = scale;
        r.param_count = params;
        r.model_config = make_config(1, 64, 150, 64);
        r.train_config.task = TaskKind::count;
        r.train_config.eval_lengths = {8};
        r.seed = seed;
        r.metrics["em"][8] = em;
        r.metrics["mean_nll"][8] = 1.0 - em;
        r.train_loss_trace = {{0, 5.0}};
        return r;
    };

    SECTION("empty file gives an empty list") {
        std::ofstream(path).close();
        CHECK(ingest_run_records(path.string()).empty());
    }

    SECTION("three records over two scales group into two populations per metric") {
        std::ofstream os(path);
        os << run_record_to_line(make_record("d1_h64", 100, 0, 0.1)) << "\n"
           << run_record_to_line(make_record("d1_h64", 100, 1, 0.2)) << "\n"
           << run_record_to_line(make_record("d1_h128", 200, 0, 0.9)) << "\n";
        os.close();
        const auto pops = ingest_run_records(path.string());
        REQUIRE(pops.size() == 4);  // 2 metrics x 2 scales
        int em_pops = 0;
        for (const auto& p : pops)
            if (p.metric_name == "em@8") {
                ++em_pops;
                if (p.scale_label == "d1_h64") CHECK(p.values.size() == 2);
            }
        CHECK(em_pops == 2);
        // ascending parameter count within a metric group
        std::vector<std::int64_t> order;
        for (const auto& p : pops)
            if (p.metric_name == "em@8") order.push_back(p.param_count);
        CHECK(std::is_sorted(order.begin(), order.end()));
    }

    SECTION("parse errors carry the line number") {
        std::ofstream os(path);
        os << run_record_to_line(make_record("d1_h64", 100, 0, 0.1)) << "\n"
           << "{not json}\n";
        os.close();
        try {
            read_run_records(path.string());
            FAIL("expected parse error");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }

    SECTION("duplicate cells are rejected") {
        std::ofstream os(path);
        os << run_record_to_line(make_record("d1_h64", 100, 0, 0.1)) << "\n"
           << run_record_to_line(make_record("d1_h64", 100, 0, 0.3)) << "\n";
        os.close();
        CHECK_THROWS_AS(read_run_records(path.string()), std::runtime_error);
    }

    SECTION("version mismatch is rejected") {
        auto j = run_record_to_json(make_record("d1_h64", 100, 0, 0.1));
        j["format_version"] = 99;
        std::ofstream os(path);
        os << j.dump() << "\n";
        os.close();
        CHECK_THROWS_AS(read_run_records(path.string()), std::runtime_error);
    }

    SECTION("diverged records are excluded from populations") {
        auto r = make_record("d1_h64", 100, 0, 0.1);
        r.status = "diverged";
        r.metrics.clear();
        std::ofstream os(path);
        os << run_record_to_line(r) << "\n"
           << run_record_to_line(make_record("d1_h64", 100, 1, 0.2)) << "\n";
        os.close();
        const auto pops = ingest_run_records(path.string());
        for (const auto& p : pops) CHECK(p.values.size() == 1);
    }

    fs::remove_all(dir);
}

TEST_CASE("em histograms use twenty fixed bins on the unit interval") {
    const std::vector<double> values{0.0, 0.049, 0.5, 0.951, 1.0};
    const Histogram h = metric_histogram(values, "em@60");
    REQUIRE(h.counts.size() == 20);
    CHECK(h.bin_edges.front() == 0.0);
    CHECK(h.bin_edges.back() == 1.0);
    CHECK(h.counts[0] == 2);   // 0.0 and 0.049
    CHECK(h.counts[10] == 1);  // 0.5
    CHECK(h.counts[19] == 2);  // 0.951 and 1.0 (top edge clamps inward)
    int total = 0;
    for (int c : h.counts) total += c;
    CHECK(total == 5);
}
