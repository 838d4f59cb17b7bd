// SPDX-License-Identifier: Apache-2.0
//
// distscale: train populations of small transformers on count/addition
// length-generalization tasks and characterize the per-seed performance
// distributions.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "distscale/analysis.hpp"
#include "distscale/gradcheck.hpp"
#include "distscale/sweep.hpp"
#include "distscale/task.hpp"

namespace {

int cmd_sweep(const std::string& config_path, const distscale::SweepOptions& options) {
    const auto config = distscale::SweepConfig::load(config_path);
    const auto result = distscale::run_sweep(config, options);
    std::cout << "sweep complete: " << result.executed << " executed, " << result.skipped
              << " skipped, " << result.failed << " failed\n"
              << "records: " << result.records_path << "\n";
    return 0;
}

int cmd_tasks_dump(const std::string& task_str, int n, int length, std::uint64_t seed,
                   int max_eval_digits) {
    const auto kind = distscale::task_from_name(task_str);
    distscale::Rng rng(seed);
    distscale::TaskSpec spec =
        kind == distscale::TaskKind::count
            ? distscale::TaskSpec::count_task(length)
            : distscale::TaskSpec::addition_task(length, max_eval_digits > 0 ? max_eval_digits
                                                                             : length + 2);
    spec.min_len = length;
    spec.max_len = length;
    for (int i = 0; i < n; ++i) {
        const distscale::Example ex = spec.sample(rng);
        std::cout << distscale::render_example(spec.vocab, ex) << "\n";
    }
    return 0;
}

int cmd_gradcheck(int depth, int heads, int head_dim, int vocab, int seq, int batch,
                  std::uint64_t seed, double step, double tol) {
    distscale::ModelConfig config;
    config.depth = depth;
    config.n_heads = heads;
    config.head_dim = head_dim;
    config.vocab_size = vocab;
    config.context_length = seq;
    distscale::GradCheckSettings settings;
    settings.batch = batch;
    settings.seq = seq;
    settings.seed = seed;
    settings.step = step;
    settings.rel_tol = tol;
    const auto report = distscale::gradient_check(config, settings);
    for (const auto& t : report.tensors)
        std::printf("%-16s entries %6lld  max_rel %.3e  max_abs %.3e  %s\n", t.name.c_str(),
                    static_cast<long long>(t.entries), t.max_rel_err, t.max_abs_err,
                    t.pass ? "ok" : "FAIL");
    std::printf("checked %lld entries, worst relative error %.3e: %s\n",
                static_cast<long long>(report.entries_checked), report.worst_rel_err,
                report.pass ? "PASS" : "FAIL");
    return report.pass ? 0 : 1;
}

int cmd_validate(const std::string& records_path) {
    std::ifstream is(records_path);
    if (!is) {
        std::cerr << "cannot open " << records_path << "\n";
        return 1;
    }
    std::string line;
    int line_no = 0, bad = 0, ok = 0;
    std::map<std::string, int> seen;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto r = distscale::run_record_from_line(line);
            const std::string key = std::string(distscale::task_name(r.task)) + "|" +
                                    r.scale_label + "|" + std::to_string(r.seed);
            if (auto it = seen.find(key); it != seen.end())
                throw std::runtime_error("duplicate (scale, seed) cell, first seen on line " +
                                         std::to_string(it->second));
            seen[key] = line_no;
            for (const auto& [name, by_len] : r.metrics) {
                for (const auto& [len, v] : by_len) {
                    if ((name == "em" || name == "min_prob") && (v < 0.0 || v > 1.0))
                        throw std::runtime_error(name + "@" + std::to_string(len) +
                                                 " outside [0,1]");
                    if ((name == "continuous_error" || name == "mean_nll") && v < 0.0)
                        throw std::runtime_error(name + "@" + std::to_string(len) + " negative");
                }
            }
            ++ok;
        } catch (const std::exception& e) {
            std::cerr << records_path << ":" << line_no << ": " << e.what() << "\n";
            ++bad;
        }
    }
    std::cout << ok << " valid records, " << bad << " invalid\n";
    return bad == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"distributional scaling toolkit for length-generalization task populations"};
    app.require_subcommand(1);

    // sweep
    auto* sweep = app.add_subcommand("sweep", "run a seed x scale training sweep");
    std::string sweep_config;
    std::string sweep_out;
    std::string seed_range;
    distscale::SweepOptions sweep_options;
    sweep->add_option("--config", sweep_config, "sweep config file")->required();
    sweep->add_option("--out", sweep_out, "output directory (overrides config and DISTSCALE_OUT)");
    sweep->add_option("--max-parallel", sweep_options.max_parallel,
                      "max concurrent runs (0 = logical cores)");
    sweep->add_flag("--resume", sweep_options.resume, "resume a partial sweep");
    sweep->add_option("--seed-range", seed_range, "restrict to seeds a..b (inclusive)");
    sweep->add_flag("--save-checkpoints", sweep_options.save_checkpoints,
                    "write parameter checkpoints for successful runs");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "emit analysis CSV tables from run records");
    std::string records_path;
    distscale::AnalyzeOptions analyze_options;
    double threshold = -1.0;
    analyze->add_option("records", records_path, "records.jsonl path")->required();
    analyze->add_option("--out", analyze_options.out_dir, "output directory for CSVs");
    analyze->add_option("--threshold", threshold,
                        "success threshold (default: 0.5 count, 0.2 addition)");
    analyze->add_option("--resamples", analyze_options.bootstrap_resamples, "bootstrap resamples");
    analyze->add_option("--level", analyze_options.bootstrap_level, "bootstrap confidence level");
    analyze->add_option("--kde-points", analyze_options.kde_points, "KDE grid resolution");
    analyze->add_option("--bootstrap-seed", analyze_options.bootstrap_seed, "bootstrap base seed");

    // tasks dump
    auto* tasks = app.add_subcommand("tasks", "task utilities");
    auto* dump = tasks->add_subcommand("dump", "print sampled examples in surface form");
    std::string dump_task = "count";
    int dump_n = 10, dump_length = 5, dump_max_eval = 0;
    std::uint64_t dump_seed = 0;
    dump->add_option("--task", dump_task, "count | addition")->required();
    dump->add_option("--n", dump_n, "number of examples");
    dump->add_option("--length", dump_length, "logical length (count range / digit count)");
    dump->add_option("--seed", dump_seed, "sampling seed");
    dump->add_option("--max-eval-digits", dump_max_eval,
                     "addition hint space (default: length + 2)");

    // gradcheck
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
    int gc_depth = 1, gc_heads = 1, gc_head_dim = 8, gc_vocab = 12, gc_seq = 10, gc_batch = 2;
    std::uint64_t gc_seed = 0;
    double gc_step = 1e-5, gc_tol = 1e-4;
    grad->add_option("--depth", gc_depth, "layers");
    grad->add_option("--heads", gc_heads, "attention heads");
    grad->add_option("--head-dim", gc_head_dim, "per-head width");
    grad->add_option("--vocab", gc_vocab, "vocabulary size");
    grad->add_option("--seq", gc_seq, "sequence length");
    grad->add_option("--batch", gc_batch, "batch size");
    grad->add_option("--seed", gc_seed, "seed");
    grad->add_option("--step", gc_step, "finite-difference step");
    grad->add_option("--tol", gc_tol, "relative tolerance");

    // validate
    auto* validate = app.add_subcommand("validate", "lint a records.jsonl file");
    std::string validate_path;
    validate->add_option("records", validate_path, "records.jsonl path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*sweep) {
            if (!seed_range.empty()) {
                const auto dots = seed_range.find("..");
                if (dots == std::string::npos)
                    throw std::runtime_error("--seed-range expects a..b");
                sweep_options.seed_range = {std::stoull(seed_range.substr(0, dots)),
                                            std::stoull(seed_range.substr(dots + 2))};
            }
            sweep_options.out_override = sweep_out;
            return cmd_sweep(sweep_config, sweep_options);
        }
        if (*analyze) {
            if (threshold >= 0.0) analyze_options.threshold = threshold;
            if (analyze_options.out_dir == "analysis") {
                if (const char* env = std::getenv("DISTSCALE_OUT"); env && *env)
                    analyze_options.out_dir = std::string(env) + "/analysis";
            }
            distscale::analyze_records(records_path, analyze_options);
            std::cout << "analysis tables written to " << analyze_options.out_dir << "\n";
            return 0;
        }
        if (*dump) return cmd_tasks_dump(dump_task, dump_n, dump_length, dump_seed, dump_max_eval);
        if (*grad)
            return cmd_gradcheck(gc_depth, gc_heads, gc_head_dim, gc_vocab, gc_seq, gc_batch,
                                 gc_seed, gc_step, gc_tol);
        if (*validate) return cmd_validate(validate_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
