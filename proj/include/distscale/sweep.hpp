// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <thread>
#include <vector>

#include <json.hpp>

#include "distscale/analysis.hpp"
#include "distscale/checkpoint.hpp"
#include "distscale/config_file.hpp"
#include "distscale/trainer.hpp"

namespace distscale {

/// A seed x scale grid plus the training recipe shared by every cell.
struct SweepConfig {
    TaskKind task = TaskKind::count;
    std::string axis;  // fixed_depth_scale_width | fixed_width_scale_depth
    std::vector<ModelConfig> scale_points;
    std::vector<std::uint64_t> seeds;
    TrainConfig train_template;
    std::string output_dir = "out";
    int max_parallel = 0;  // 0 = logical core count
    bool save_checkpoints = false;
    std::string config_hash;

    static SweepConfig load(const std::string& path) {
        ConfigFile cfg = ConfigFile::parse_file(path);
        return from_config(cfg);
    }

    static SweepConfig from_config(ConfigFile& cfg) {
        SweepConfig sc;
        sc.task = task_from_name(cfg.get_string(".task"));
        sc.axis = cfg.get_string(".axis");
        if (sc.axis != "fixed_depth_scale_width" && sc.axis != "fixed_width_scale_depth")
            throw std::runtime_error("config: axis must be fixed_depth_scale_width or "
                                     "fixed_width_scale_depth");

        TrainConfig& t = sc.train_template;
        t.task = sc.task;
        t.steps = static_cast<int>(cfg.get_int("train.steps"));
        t.batch_size = static_cast<int>(cfg.get_int("train.batch_size"));
        t.context_length = static_cast<int>(cfg.get_int("train.context_length"));
        t.peak_lr = cfg.get_double("train.peak_lr");
        t.weight_decay = cfg.get_double("train.weight_decay");
        t.max_train_length = static_cast<int>(cfg.get_int("train.max_train_length"));
        t.warmup_steps = static_cast<int>(cfg.get_int_or("train.warmup_steps", 0));
        t.grad_clip = cfg.get_double_or("train.grad_clip", 0.0);
        for (auto v : cfg.get_int_list("train.seeds")) {
            if (v < 0) throw std::runtime_error("config: negative seed");
            sc.seeds.push_back(static_cast<std::uint64_t>(v));
        }
        {
            std::set<std::uint64_t> unique(sc.seeds.begin(), sc.seeds.end());
            if (unique.size() != sc.seeds.size())
                throw std::runtime_error("config: duplicate seeds");
        }

        for (auto v : cfg.get_int_list("eval.lengths")) t.eval_lengths.push_back(static_cast<int>(v));
        t.eval_items = static_cast<int>(cfg.get_int_or("eval.items", 128));
        if (sc.task == TaskKind::addition) {
            std::int64_t max_len = 0;
            for (int v : t.eval_lengths) max_len = std::max<std::int64_t>(max_len, v);
            max_len = std::max<std::int64_t>(max_len, t.max_train_length);
            t.max_eval_digits = static_cast<int>(cfg.get_int_or("eval.max_eval_digits", max_len));
        }
        t.eval_seed = static_cast<std::uint64_t>(
            cfg.get_int_or("eval.seed", static_cast<std::int64_t>(t.eval_seed)));
        t.eval_every = static_cast<int>(cfg.get_int_or("run.eval_every", 0));

        const int head_dim = static_cast<int>(cfg.get_int_or("model.head_dim", 64));
        const int mlp_ratio = static_cast<int>(cfg.get_int_or("model.mlp_ratio", 4));
        std::vector<std::int64_t> depths = cfg.get_int_list("model.depths");
        std::vector<std::int64_t> hiddens = cfg.get_int_list("model.hiddens");
        if (sc.axis == "fixed_depth_scale_width" && depths.size() != 1)
            throw std::runtime_error("config: fixed_depth axis requires a single depth");
        if (sc.axis == "fixed_width_scale_depth" && hiddens.size() != 1)
            throw std::runtime_error("config: fixed_width axis requires a single hidden size");

        const TaskSpec spec = sc.task == TaskKind::count
                                  ? TaskSpec::count_task(t.max_train_length)
                                  : TaskSpec::addition_task(t.max_train_length, t.max_eval_digits);
        int model_context = t.context_length;
        for (int len : t.eval_lengths)
            model_context = std::max(model_context, detail::eval_example_tokens(sc.task, len));
        for (auto d : depths)
            for (auto h : hiddens)
                sc.scale_points.push_back(make_config(static_cast<int>(d), static_cast<int>(h),
                                                      spec.vocab.size, model_context, head_dim,
                                                      mlp_ratio));
        std::sort(sc.scale_points.begin(), sc.scale_points.end(),
                  [](const ModelConfig& a, const ModelConfig& b) {
                      return a.param_count() < b.param_count();
                  });
        for (std::size_t i = 1; i < sc.scale_points.size(); ++i)
            if (sc.scale_points[i].param_count() == sc.scale_points[i - 1].param_count())
                throw std::runtime_error("config: scale points must be strictly increasing in "
                                         "parameter count");

        sc.output_dir = cfg.get_string_or("run.output_dir", "out");
        sc.max_parallel = static_cast<int>(cfg.get_int_or("run.max_parallel", 0));
        sc.save_checkpoints = cfg.get_bool_or("run.save_checkpoints", false);
        cfg.reject_unknown_keys();
        sc.config_hash = fnv1a_hex(cfg.canonical());

        for (const auto& mc : sc.scale_points) validate_run_configs(mc, sc.train_template);
        return sc;
    }
};

struct SweepManifest {
    std::string config_hash;
    struct Cell {
        std::string scale_label;
        std::uint64_t seed = 0;
        std::string status = "pending";  // pending -> running -> done | failed
    };
    std::vector<Cell> cells;

    nlohmann::json to_json() const {
        nlohmann::json cells_json = nlohmann::json::array();
        for (const auto& c : cells)
            cells_json.push_back({{"scale", c.scale_label}, {"seed", c.seed}, {"status", c.status}});
        return {{"format_version", 1}, {"config_hash", config_hash}, {"cells", cells_json}};
    }

    static SweepManifest from_json(const nlohmann::json& j) {
        SweepManifest m;
        m.config_hash = j.at("config_hash").get<std::string>();
        for (const auto& c : j.at("cells"))
            m.cells.push_back({c.at("scale").get<std::string>(), c.at("seed").get<std::uint64_t>(),
                               c.at("status").get<std::string>()});
        return m;
    }
};

namespace detail {

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        os << content;
        os.flush();
        if (!os) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

/// Drops a trailing partial line (no final newline) left by a killed writer.
inline void trim_partial_tail(const std::filesystem::path& records_path) {
    std::error_code ec;
    if (!std::filesystem::exists(records_path, ec)) return;
    std::ifstream is(records_path, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (content.empty() || content.back() == '\n') return;
    const auto last_newline = content.find_last_of('\n');
    content.erase(last_newline == std::string::npos ? 0 : last_newline + 1);
    std::ofstream os(records_path, std::ios::binary | std::ios::trunc);
    os << content;
}

}  // namespace detail

struct SweepOptions {
    bool resume = false;
    int max_parallel = 0;  // 0 = take from config
    std::optional<std::pair<std::uint64_t, std::uint64_t>> seed_range;
    std::string out_override;
    bool save_checkpoints = false;
};

struct SweepResult {
    int executed = 0;
    int skipped = 0;
    int failed = 0;  // cells whose run diverged or threw
    std::string records_path;
};

/// Output dir precedence: --out flag, then DISTSCALE_OUT, then the config.
inline std::string resolve_output_dir(const SweepConfig& config, const SweepOptions& options) {
    if (!options.out_override.empty()) return options.out_override;
    if (const char* env = std::getenv("DISTSCALE_OUT"); env && *env) return env;
    return config.output_dir;
}

/// Executes all pending (scale, seed) cells with a worker pool. Records are
/// appended one full line per completed run; the manifest guards resumption
/// against config drift via the config hash.
inline SweepResult run_sweep(const SweepConfig& config, const SweepOptions& options = {}) {
    const std::filesystem::path out_dir = resolve_output_dir(config, options);
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path records_path = out_dir / "records.jsonl";
    const std::filesystem::path manifest_path = out_dir / "manifest.json";

    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s : config.seeds)
        if (!options.seed_range ||
            (s >= options.seed_range->first && s <= options.seed_range->second))
            seeds.push_back(s);

    // completed cells come from the records file itself; the manifest guards
    // against resuming under a different config
    std::set<std::pair<std::string, std::uint64_t>> done;
    if (std::filesystem::exists(records_path)) {
        if (!options.resume)
            throw std::runtime_error(records_path.string() +
                                     " already exists; pass --resume to continue the sweep");
        if (std::filesystem::exists(manifest_path)) {
            std::ifstream is(manifest_path);
            const auto manifest = SweepManifest::from_json(nlohmann::json::parse(is));
            if (manifest.config_hash != config.config_hash)
                throw std::runtime_error("manifest config hash mismatch: output dir belongs to a "
                                         "different sweep configuration");
        }
        detail::trim_partial_tail(records_path);
        for (const auto& r : read_run_records(records_path.string()))
            done.insert({r.scale_label, r.seed});
    }

    SweepManifest manifest;
    manifest.config_hash = config.config_hash;
    struct Job {
        ModelConfig model;
        std::uint64_t seed;
        std::size_t cell_index;
    };
    std::vector<Job> jobs;
    SweepResult result;
    result.records_path = records_path.string();
    for (const auto& mc : config.scale_points) {
        for (std::uint64_t seed : seeds) {
            SweepManifest::Cell cell{mc.scale_label(), seed, "pending"};
            if (done.count({cell.scale_label, seed})) {
                cell.status = "done";
                ++result.skipped;
            } else {
                jobs.push_back({mc, seed, manifest.cells.size()});
            }
            manifest.cells.push_back(cell);
        }
    }

    std::mutex io_mutex;
    const auto flush_manifest = [&] {
        detail::write_file_atomic(manifest_path, manifest.to_json().dump(2));
    };
    flush_manifest();
    if (jobs.empty()) return result;

    std::ofstream records_out(records_path, std::ios::app);
    if (!records_out) throw std::runtime_error("cannot open " + records_path.string());

    int workers = options.max_parallel > 0 ? options.max_parallel : config.max_parallel;
    if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));

    std::atomic<std::size_t> next{0};
    std::atomic<int> executed{0}, failed{0};
    const bool want_checkpoints = config.save_checkpoints || options.save_checkpoints;
    if (want_checkpoints) std::filesystem::create_directories(out_dir / "checkpoints");

    auto worker = [&] {
        while (true) {
            const std::size_t idx = next.fetch_add(1);
            if (idx >= jobs.size()) return;
            const Job& job = jobs[idx];
            {
                std::lock_guard<std::mutex> lock(io_mutex);
                manifest.cells[job.cell_index].status = "running";
                flush_manifest();
            }
            TrainConfig tc = config.train_template;
            tc.seed = job.seed;
            std::string status = "failed";
            std::string line;
            try {
                Params<float> trained;
                const RunRecord record =
                    train_run(job.model, tc, want_checkpoints ? &trained : nullptr);
                line = run_record_to_line(record) + "\n";
                status = record.status == "ok" ? "done" : "failed";
                if (want_checkpoints && record.status == "ok") {
                    const auto ckpt = out_dir / "checkpoints" /
                                      (record.scale_label + "_s" + std::to_string(job.seed) + ".bin");
                    save_checkpoint(ckpt.string(), trained, job.seed);
                }
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(io_mutex);
                manifest.cells[job.cell_index].status = "failed";
                flush_manifest();
                failed.fetch_add(1);
                continue;
            }
            {
                std::lock_guard<std::mutex> lock(io_mutex);
                records_out << line;
                records_out.flush();
                manifest.cells[job.cell_index].status = status;
                flush_manifest();
            }
            executed.fetch_add(1);
            if (status == "failed") failed.fetch_add(1);
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    result.executed = executed.load();
    result.failed = failed.load();
    return result;
}

// ---------------------------------------------------------------------------
// analysis reporting: tidy CSV tables backing the paper-style figures

struct AnalyzeOptions {
    std::string out_dir = "analysis";
    std::optional<double> threshold;  // overrides the per-task default
    int bootstrap_resamples = 1000;
    double bootstrap_level = 0.95;
    std::uint64_t bootstrap_seed = 0;
    int kde_points = 256;
    int top_seeds = 5;
};

namespace detail {

inline std::string fmt_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

/// Deterministic per-statistic bootstrap seed derived from a base seed and a
/// group/scale/statistic tag.
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
    std::uint64_t h = 0xcbf29ce484222325ull ^ base;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

struct CsvWriter {
    std::ofstream os;
    explicit CsvWriter(const std::filesystem::path& path, const std::string& header)
        : os(path, std::ios::trunc) {
        if (!os) throw std::runtime_error("cannot write " + path.string());
        os << header << "\n";
    }
    void row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) os << ",";
            os << fields[i];
        }
        os << "\n";
    }
};

}  // namespace detail

/// Emits every analysis table: summary-statistic curves with bootstrap CIs,
/// W2 drift, bimodality reports, per-seed breakthroughness/linearity with
/// top-seed rankings, KDE grids, and histograms.
inline void analyze_records(const std::string& records_path, const AnalyzeOptions& options) {
    const auto populations = ingest_run_records(records_path);
    if (populations.empty()) throw std::runtime_error("no usable records in " + records_path);
    const std::filesystem::path out_dir = options.out_dir;
    std::filesystem::create_directories(out_dir);

    // group by (task, metric@length), scales ascending inside each group
    std::map<std::pair<std::string, std::string>, std::vector<PopulationDistribution>> groups;
    for (const auto& pop : populations)
        groups[{std::string(task_name(pop.task)), pop.metric_name}].push_back(pop);

    detail::CsvWriter curves(out_dir / "curves.csv",
                             "task,metric,scale,param_count,statistic,threshold,value,ci_lo,ci_hi");
    detail::CsvWriter drift(out_dir / "wasserstein.csv",
                            "task,metric,scale,param_count,w2_to_largest");
    detail::CsvWriter bimodal(out_dir / "bimodality.csv",
                              "task,metric,scale,param_count,n_peaks,is_bimodal,valley_ratio,"
                              "min_peak_fraction,onset_scale");
    detail::CsvWriter kde_csv(out_dir / "kde.csv", "task,metric,scale,grid_point,density");
    detail::CsvWriter hist_csv(out_dir / "histogram.csv",
                               "task,metric,scale,bin_lo,bin_hi,count");
    detail::CsvWriter seeds_csv(out_dir / "seed_metrics.csv",
                                "task,metric,seed,breakthroughness,linearity,n_scales");
    detail::CsvWriter top_csv(out_dir / "top_seeds.csv", "task,metric,criterion,rank,seed,value");

    for (const auto& [key, pops] : groups) {
        const auto& [task_str, metric] = key;
        const TaskKind task = task_from_name(task_str);
        const double threshold =
            options.threshold ? *options.threshold : default_success_threshold(task);
        const bool mixture_applies = metric.starts_with("em@");

        // shared KDE grid across scales for comparable density plots
        double gmin = std::numeric_limits<double>::infinity(), gmax = -gmin, hmax = 0.0;
        for (const auto& pop : pops) {
            for (double v : pop.values) {
                gmin = std::min(gmin, v);
                gmax = std::max(gmax, v);
            }
            hmax = std::max(hmax, silverman_bandwidth(pop.values));
        }
        KdeSettings kde_settings;
        kde_settings.grid_lo = gmin - 4.0 * hmax;
        kde_settings.grid_hi = gmax + 4.0 * hmax;
        kde_settings.n_points = options.kde_points;

        const auto onset = bimodality_onset(pops, kde_settings);

        for (const auto& pop : pops) {
            const std::string pc = std::to_string(pop.param_count);
            auto stat_seed = [&](const char* stat) {
                return detail::derive_seed(options.bootstrap_seed, task_str + "|" + metric + "|" +
                                                                       pop.scale_label + "|" + stat);
            };

            const double mode = mode_estimate(pop.values, kde_settings);
            curves.row({task_str, metric, pop.scale_label, pc, "mode", detail::fmt_double(threshold),
                        detail::fmt_double(mode), "", ""});
            const MixtureStats mix = mixture_stats(pop.values, threshold);
            const auto [mean_lo, mean_hi] =
                bootstrap_ci(pop.values, BootstrapStatistic::mean, threshold,
                             options.bootstrap_resamples, options.bootstrap_level, stat_seed("mean"));
            curves.row({task_str, metric, pop.scale_label, pc, "mean", detail::fmt_double(threshold),
                        detail::fmt_double(mix.mean_all), detail::fmt_double(mean_lo),
                        detail::fmt_double(mean_hi)});
            if (mixture_applies) {
                const auto [p_lo, p_hi] = bootstrap_ci(pop.values, BootstrapStatistic::p_success,
                                                       threshold, options.bootstrap_resamples,
                                                       options.bootstrap_level, stat_seed("p"));
                curves.row({task_str, metric, pop.scale_label, pc, "p_success",
                            detail::fmt_double(threshold), detail::fmt_double(mix.p_success),
                            detail::fmt_double(p_lo), detail::fmt_double(p_hi)});
                if (mix.mean_success) {
                    const auto [s_lo, s_hi] =
                        bootstrap_ci(pop.values, BootstrapStatistic::mean_success, threshold,
                                     options.bootstrap_resamples, options.bootstrap_level,
                                     stat_seed("ms"));
                    curves.row({task_str, metric, pop.scale_label, pc, "mean_success",
                                detail::fmt_double(threshold), detail::fmt_double(*mix.mean_success),
                                detail::fmt_double(s_lo), detail::fmt_double(s_hi)});
                }
            }

            const KdeResult k = kde(pop.values, kde_settings);
            const auto peaks = find_kde_peaks(k);
            bimodal.row({task_str, metric, pop.scale_label, pc, std::to_string(peaks.size()),
                         kde_is_bimodal(k) ? "true" : "false", detail::fmt_double(kValleyRatio),
                         detail::fmt_double(kMinPeakFraction), onset.value_or("none")});
            for (std::size_t i = 0; i < k.grid.size(); ++i)
                kde_csv.row({task_str, metric, pop.scale_label, detail::fmt_double(k.grid[i]),
                             detail::fmt_double(k.density[i])});
            const Histogram h = metric_histogram(pop.values, metric);
            for (std::size_t b = 0; b < h.counts.size(); ++b)
                hist_csv.row({task_str, metric, pop.scale_label,
                              detail::fmt_double(h.bin_edges[b]),
                              detail::fmt_double(h.bin_edges[b + 1]),
                              std::to_string(h.counts[b])});
        }

        // W2 drift against the largest scale
        if (pops.size() == 1) {
            drift.row({task_str, metric, pops[0].scale_label,
                       std::to_string(pops[0].param_count), "0"});
        } else {
            const ScalingCurve curve = wasserstein_drift(pops);
            for (std::size_t i = 0; i < pops.size(); ++i)
                drift.row({task_str, metric, pops[i].scale_label,
                           std::to_string(pops[i].param_count), detail::fmt_double(curve.y[i])});
        }

        // per-seed scaling curves, for seeds present at every scale
        if (pops.size() >= 2) {
            std::map<std::uint64_t, std::vector<double>> per_seed;
            for (const auto& pop : pops)
                for (std::size_t i = 0; i < pop.seed_ids.size(); ++i)
                    per_seed[pop.seed_ids[i]].push_back(pop.values[i]);
            struct SeedScore {
                std::uint64_t seed;
                double b, l;
            };
            std::vector<SeedScore> scores;
            for (const auto& [seed, ys] : per_seed) {
                if (ys.size() != pops.size()) continue;  // missing at some scale
                SeedScore s{seed, breakthroughness(std::span<const double>(ys)),
                            linearity(std::span<const double>(ys))};
                scores.push_back(s);
                seeds_csv.row({task_str, metric, std::to_string(seed), detail::fmt_double(s.b),
                               detail::fmt_double(s.l), std::to_string(ys.size())});
            }
            auto emit_top = [&](const char* criterion, auto key_fn) {
                auto ranked = scores;
                std::stable_sort(ranked.begin(), ranked.end(),
                                 [&](const SeedScore& a, const SeedScore& b) {
                                     return key_fn(a) > key_fn(b);
                                 });
                const int top = std::min<int>(options.top_seeds, static_cast<int>(ranked.size()));
                for (int i = 0; i < top; ++i)
                    top_csv.row({task_str, metric, criterion, std::to_string(i + 1),
                                 std::to_string(ranked[i].seed),
                                 detail::fmt_double(key_fn(ranked[i]))});
            };
            emit_top("breakthroughness", [](const SeedScore& s) { return s.b; });
            emit_top("linearity", [](const SeedScore& s) { return s.l; });
        }
    }
}

}  // namespace distscale
