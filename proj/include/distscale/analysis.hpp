// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "distscale/rng.hpp"
#include "distscale/run_record.hpp"

namespace distscale {

/// Per-seed metric values for one (task, scale, metric) cell.
struct PopulationDistribution {
    TaskKind task = TaskKind::count;
    std::string scale_label;
    std::int64_t param_count = 0;
    std::string metric_name;  // e.g. "em@60"
    std::vector<double> values;
    std::vector<std::uint64_t> seed_ids;

    void validate() const {
        if (values.empty() || values.size() != seed_ids.size())
            throw std::invalid_argument("population: empty or misaligned values/seeds");
        for (double v : values)
            if (!std::isfinite(v)) throw std::invalid_argument("population: non-finite value");
        auto sorted = seed_ids;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw std::invalid_argument("population: duplicate seed");
    }
};

/// Metric values across ascending model scales; one point per scale.
struct ScalingCurve {
    std::vector<std::string> scale_labels;
    std::vector<double> y;
};

/// Success/failure mixture summary at a threshold. Success means strictly
/// greater than the threshold (addition uses 0.20, count 0.50 by default).
struct MixtureStats {
    double threshold = 0.0;
    double p_success = 0.0;
    std::optional<double> mean_success;
    std::optional<double> mean_fail;
    double mean_all = 0.0;
};

inline double mean_of(std::span<const double> values) {
    double total = 0.0;
    for (double v : values) total += v;
    return total / static_cast<double>(values.size());
}

inline MixtureStats mixture_stats(std::span<const double> values, double threshold) {
    if (values.empty()) throw std::invalid_argument("mixture_stats: empty values");
    MixtureStats s;
    s.threshold = threshold;
    double sum_s = 0.0, sum_f = 0.0;
    std::size_t n_s = 0;
    for (double v : values) {
        if (v > threshold) {
            sum_s += v;
            ++n_s;
        } else {
            sum_f += v;
        }
    }
    const std::size_t n = values.size();
    s.p_success = static_cast<double>(n_s) / static_cast<double>(n);
    if (n_s > 0) s.mean_success = sum_s / static_cast<double>(n_s);
    if (n_s < n) s.mean_fail = sum_f / static_cast<double>(n - n_s);
    s.mean_all = (sum_s + sum_f) / static_cast<double>(n);
    return s;
}

inline double default_success_threshold(TaskKind task) {
    return task == TaskKind::count ? 0.50 : 0.20;
}

/// Linear-interpolation quantile of an already sorted sample.
inline double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw std::invalid_argument("quantile: empty sample");
    if (q <= 0.0) return sorted.front();
    if (q >= 1.0) return sorted.back();
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    // this form is exact when the two order statistics coincide
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

enum class BootstrapStatistic { mean, p_success, mean_success };

/// Percentile bootstrap interval. Resamples on which the statistic is
/// undefined (no successes for mean_success) are redrawn, with a counted cap.
inline std::pair<double, double> bootstrap_ci(std::span<const double> values,
                                              BootstrapStatistic statistic, double threshold,
                                              int n_resamples = 1000, double level = 0.95,
                                              std::uint64_t seed = 0) {
    if (values.empty()) throw std::invalid_argument("bootstrap_ci: empty values");
    if (n_resamples < 1 || level <= 0.0 || level >= 1.0)
        throw std::invalid_argument("bootstrap_ci: bad resample count or level");
    Rng rng(seed);
    const std::size_t n = values.size();
    std::vector<double> stats;
    stats.reserve(n_resamples);
    std::vector<double> sample(n);
    int redraws = 0;
    const int redraw_cap = 100 * n_resamples;
    while (static_cast<int>(stats.size()) < n_resamples) {
        for (std::size_t i = 0; i < n; ++i)
            sample[i] = values[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(n) - 1))];
        const MixtureStats m = mixture_stats(sample, threshold);
        switch (statistic) {
            case BootstrapStatistic::mean: stats.push_back(m.mean_all); break;
            case BootstrapStatistic::p_success: stats.push_back(m.p_success); break;
            case BootstrapStatistic::mean_success:
                if (m.mean_success) {
                    stats.push_back(*m.mean_success);
                } else if (++redraws > redraw_cap) {
                    throw std::runtime_error("bootstrap_ci: statistic undefined on too many resamples");
                }
                break;
        }
    }
    std::sort(stats.begin(), stats.end());
    const double alpha = 1.0 - level;
    return {quantile_sorted(stats, alpha / 2.0), quantile_sorted(stats, 1.0 - alpha / 2.0)};
}

struct KdeSettings {
    std::optional<double> bandwidth;  // auto (Silverman) when unset
    std::optional<double> grid_lo, grid_hi;
    int n_points = 512;
};

struct KdeResult {
    std::vector<double> grid;
    std::vector<double> density;
    double bandwidth = 0.0;

    double argmax_grid() const {
        std::size_t best = 0;
        for (std::size_t i = 1; i < density.size(); ++i)
            if (density[i] > density[best]) best = i;  // ties keep the lower grid value
        return grid[best];
    }
};

/// Silverman's rule of thumb, floored at 1e-4 of the data range (or 1e-4
/// absolute for degenerate all-equal samples).
inline double silverman_bandwidth(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("silverman_bandwidth: empty values");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double range = sorted.back() - sorted.front();
    const double floor = range > 0.0 ? 1e-4 * range : 1e-4;
    const std::size_t n = values.size();
    if (n < 2) return floor;
    const double mean = mean_of(values);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    double spread = sd;
    if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
    const double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
    return std::max(h, floor);
}

/// Gaussian-kernel density estimate on a uniform grid.
inline KdeResult kde(std::span<const double> values, const KdeSettings& settings = {}) {
    if (values.empty()) throw std::invalid_argument("kde: empty values");
    if (settings.n_points < 2) throw std::invalid_argument("kde: n_points < 2");
    if (settings.bandwidth && *settings.bandwidth <= 0.0)
        throw std::invalid_argument("kde: bandwidth must be positive");
    KdeResult out;
    out.bandwidth = settings.bandwidth ? *settings.bandwidth : silverman_bandwidth(values);

    const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
    const double lo = settings.grid_lo ? *settings.grid_lo : *mn_it - 4.0 * out.bandwidth;
    const double hi = settings.grid_hi ? *settings.grid_hi : *mx_it + 4.0 * out.bandwidth;
    if (!(hi > lo)) throw std::invalid_argument("kde: empty grid range");

    const int m = settings.n_points;
    out.grid.resize(m);
    out.density.resize(m);
    const double step = (hi - lo) / static_cast<double>(m - 1);
    const double norm =
        1.0 / (static_cast<double>(values.size()) * out.bandwidth * std::sqrt(2.0 * 3.14159265358979323846));
    for (int i = 0; i < m; ++i) {
        const double x = lo + i * step;
        out.grid[i] = x;
        double acc = 0.0;
        for (double v : values) {
            const double z = (x - v) / out.bandwidth;
            acc += std::exp(-0.5 * z * z);
        }
        out.density[i] = norm * acc;
    }
    return out;
}

/// Argmax of the KDE density over its grid; ties break toward lower values.
inline double mode_estimate(std::span<const double> values, const KdeSettings& settings = {}) {
    return kde(values, settings).argmax_grid();
}

struct KdePeak {
    int index = 0;
    double x = 0.0;
    double density = 0.0;
};

// Peaks below this fraction of the tallest peak are treated as noise (for
// example the bump a single outlier seed adds).
inline constexpr double kMinPeakFraction = 0.05;
// A pair of peaks counts as separate modes when the valley between them is
// at most this fraction of the smaller peak.
inline constexpr double kValleyRatio = 0.8;

/// Plateau-aware local maxima of a density curve, pruned at min_fraction of
/// the global maximum.
inline std::vector<KdePeak> find_kde_peaks(const KdeResult& k,
                                           double min_fraction = kMinPeakFraction) {
    const auto& d = k.density;
    std::vector<KdePeak> peaks;
    const double dmax = *std::max_element(d.begin(), d.end());
    std::size_t i = 0;
    while (i < d.size()) {
        std::size_t j = i;
        while (j + 1 < d.size() && d[j + 1] == d[i]) ++j;  // plateau [i, j]
        const bool rises_left = i == 0 || d[i - 1] < d[i];
        const bool falls_right = j + 1 == d.size() || d[j + 1] < d[i];
        if (rises_left && falls_right && d[i] >= min_fraction * dmax) {
            const std::size_t mid = (i + j) / 2;
            peaks.push_back({static_cast<int>(mid), k.grid[mid], d[mid]});
        }
        i = j + 1;
    }
    return peaks;
}

/// A distribution is bimodal when two surviving peaks are separated by a
/// valley at most kValleyRatio times the smaller of the two.
inline bool kde_is_bimodal(const KdeResult& k, double valley_ratio = kValleyRatio,
                           double min_fraction = kMinPeakFraction) {
    const auto peaks = find_kde_peaks(k, min_fraction);
    for (std::size_t a = 0; a < peaks.size(); ++a) {
        for (std::size_t b = a + 1; b < peaks.size(); ++b) {
            double valley = std::numeric_limits<double>::infinity();
            for (int i = peaks[a].index; i <= peaks[b].index; ++i)
                valley = std::min(valley, k.density[i]);
            if (valley <= valley_ratio * std::min(peaks[a].density, peaks[b].density)) return true;
        }
    }
    return false;
}

/// First scale (in the given ascending order) whose KDE is bimodal.
inline std::optional<std::string> bimodality_onset(
    std::span<const PopulationDistribution> populations, const KdeSettings& settings = {},
    double valley_ratio = kValleyRatio) {
    if (populations.empty()) throw std::invalid_argument("bimodality_onset: no populations");
    for (const auto& pop : populations) {
        if (kde_is_bimodal(kde(pop.values, settings), valley_ratio)) return pop.scale_label;
    }
    return std::nullopt;
}

/// Wasserstein-L2 distance between two empirical 1-D distributions, computed
/// exactly from the step quantile functions (sample sizes may differ).
inline double wasserstein2(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein2: empty sample");
    std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    const std::size_t n = sa.size(), m = sb.size();
    std::size_t i = 0, j = 0;
    double q = 0.0, total = 0.0;
    while (i < n && j < m) {
        // next breakpoint: min((i+1)/n, (j+1)/m), compared exactly
        const std::uint64_t lhs = static_cast<std::uint64_t>(i + 1) * m;
        const std::uint64_t rhs = static_cast<std::uint64_t>(j + 1) * n;
        const double qn = lhs <= rhs ? static_cast<double>(i + 1) / static_cast<double>(n)
                                     : static_cast<double>(j + 1) / static_cast<double>(m);
        const double diff = sa[i] - sb[j];
        total += diff * diff * (qn - q);
        q = qn;
        if (lhs <= rhs) ++i;
        if (rhs <= lhs) ++j;
    }
    return std::sqrt(std::max(total, 0.0));
}

/// W2 of each scale's values against the largest (last) scale's values.
inline ScalingCurve wasserstein_drift(std::span<const PopulationDistribution> populations) {
    if (populations.size() < 2) throw std::invalid_argument("wasserstein_drift: need >= 2 scales");
    for (const auto& p : populations)
        if (p.metric_name != populations.front().metric_name)
            throw std::invalid_argument("wasserstein_drift: metric mismatch");
    ScalingCurve curve;
    const auto& last = populations.back().values;
    for (const auto& p : populations) {
        curve.scale_labels.push_back(p.scale_label);
        curve.y.push_back(wasserstein2(p.values, last));
    }
    return curve;
}

namespace detail {

struct CurveDiffs {
    double intensity = 0.0;
    std::vector<double> sq_diffs;
};

inline CurveDiffs curve_diffs(std::span<const double> y) {
    if (y.size() < 2) throw std::invalid_argument("curve metrics: need >= 2 points");
    CurveDiffs out;
    std::size_t argmax = 0, argmin = 0;
    for (std::size_t i = 1; i < y.size(); ++i) {
        if (y[i] > y[argmax]) argmax = i;
        if (y[i] < y[argmin]) argmin = i;
    }
    const double sign = argmax > argmin ? 1.0 : (argmax < argmin ? -1.0 : 0.0);
    out.intensity = sign * (y[argmax] - y[argmin]);
    for (std::size_t i = 0; i + 1 < y.size(); ++i) {
        const double d = y[i + 1] - y[i];
        out.sq_diffs.push_back(d * d);
    }
    return out;
}

inline double ratio_with_sentinel(double intensity, double denom) {
    if (denom == 0.0) {
        if (intensity == 0.0) return 0.0;  // flat curve: no change, no signal
        return intensity > 0.0 ? std::numeric_limits<double>::infinity()
                               : -std::numeric_limits<double>::infinity();
    }
    return intensity / denom;
}

}  // namespace detail

/// Linearity L = I(y) / RootMeanSquare of consecutive differences.
inline double linearity(std::span<const double> y) {
    const auto d = detail::curve_diffs(y);
    const double rms = std::sqrt(mean_of(d.sq_diffs));
    return detail::ratio_with_sentinel(d.intensity, rms);
}

/// Breakthroughness B = I(y) / RootMedianSquare of consecutive differences;
/// an even count of differences takes the midpoint of the two central values,
/// so a pure step curve scores the +infinity sentinel.
inline double breakthroughness(std::span<const double> y) {
    auto d = detail::curve_diffs(y);
    std::sort(d.sq_diffs.begin(), d.sq_diffs.end());
    const std::size_t n = d.sq_diffs.size();
    const double median_sq = n % 2 == 1
                                 ? d.sq_diffs[n / 2]
                                 : 0.5 * (d.sq_diffs[n / 2 - 1] + d.sq_diffs[n / 2]);
    return detail::ratio_with_sentinel(d.intensity, std::sqrt(median_sq));
}

inline double linearity(const ScalingCurve& c) { return linearity(std::span<const double>(c.y)); }
inline double breakthroughness(const ScalingCurve& c) {
    return breakthroughness(std::span<const double>(c.y));
}

struct Histogram {
    std::vector<double> bin_edges;  // n_bins + 1
    std::vector<int> counts;
};

inline Histogram histogram(std::span<const double> values, int n_bins, double lo, double hi) {
    if (n_bins < 1 || !(hi > lo)) throw std::invalid_argument("histogram: bad bins or range");
    Histogram h;
    h.bin_edges.resize(n_bins + 1);
    h.counts.assign(n_bins, 0);
    for (int i = 0; i <= n_bins; ++i)
        h.bin_edges[i] = lo + (hi - lo) * static_cast<double>(i) / n_bins;
    for (double v : values) {
        int b = static_cast<int>((v - lo) / (hi - lo) * n_bins);
        b = std::clamp(b, 0, n_bins - 1);
        h.counts[b] += 1;
    }
    return h;
}

/// EM histograms use a fixed 20-bin [0,1] layout; unbounded metrics use their
/// data range.
inline Histogram metric_histogram(std::span<const double> values, const std::string& metric_name) {
    if (metric_name.starts_with("em") || metric_name.starts_with("min_prob"))
        return histogram(values, 20, 0.0, 1.0);
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    const double lo = *mn, hi = *mx > *mn ? *mx : *mn + 1.0;
    return histogram(values, 20, lo, hi);
}

/// Reads a JSONL file of run records. Throws with the 1-based line number on
/// parse or schema errors; rejects duplicate (task, scale, seed) cells.
inline std::vector<RunRecord> read_run_records(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open records file: " + path);
    std::vector<RunRecord> records;
    std::string line;
    int line_no = 0;
    std::map<std::string, int> seen;  // "task|scale|seed" -> line
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        RunRecord r;
        try {
            r = run_record_from_line(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("records line " + std::to_string(line_no) + ": " + e.what());
        }
        const std::string key = std::string(task_name(r.task)) + "|" + r.scale_label + "|" +
                                std::to_string(r.seed);
        if (auto it = seen.find(key); it != seen.end())
            throw std::runtime_error("records line " + std::to_string(line_no) +
                                     ": duplicate (scale, seed) cell also on line " +
                                     std::to_string(it->second));
        seen[key] = line_no;
        records.push_back(std::move(r));
    }
    return records;
}

/// Groups successful records into per-(task, scale, metric@length)
/// populations, ordered by task, metric, then ascending parameter count.
inline std::vector<PopulationDistribution> populations_from_records(
    std::span<const RunRecord> records) {
    std::map<std::tuple<std::string, std::string, std::int64_t, std::string>,
             PopulationDistribution>
        groups;
    for (const auto& r : records) {
        if (r.status != "ok") continue;
        for (const auto& [name, by_len] : r.metrics) {
            for (const auto& [len, value] : by_len) {
                const std::string metric = name + "@" + std::to_string(len);
                auto key = std::make_tuple(std::string(task_name(r.task)), metric, r.param_count,
                                           r.scale_label);
                auto& pop = groups[key];
                if (pop.values.empty()) {
                    pop.task = r.task;
                    pop.scale_label = r.scale_label;
                    pop.param_count = r.param_count;
                    pop.metric_name = metric;
                }
                pop.values.push_back(value);
                pop.seed_ids.push_back(r.seed);
            }
        }
    }
    std::vector<PopulationDistribution> out;
    out.reserve(groups.size());
    for (auto& [key, pop] : groups) {
        pop.validate();
        out.push_back(std::move(pop));
    }
    return out;
}

inline std::vector<PopulationDistribution> ingest_run_records(const std::string& path) {
    const auto records = read_run_records(path);
    return populations_from_records(records);
}

}  // namespace distscale
