// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "distscale/model.hpp"
#include "distscale/task.hpp"

namespace distscale {

inline constexpr int kRunRecordVersion = 1;

/// Optimization recipe for one run. Paper presets: count trains at lr 1e-3,
/// weight decay 0.1, 10000 steps, batch 128, context 256, lengths up to 30;
/// addition at lr 1e-4, weight decay 0, 30000 steps, batch 64, context 512,
/// lengths up to 35. Cosine decay, no warmup, in both cases.
struct TrainConfig {
    TaskKind task = TaskKind::count;
    int max_train_length = 0;
    int steps = 0;
    int batch_size = 0;
    int context_length = 0;
    double peak_lr = 0.0;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::vector<int> eval_lengths;
    int eval_items = 128;
    int max_eval_digits = 0;  // addition only
    std::uint64_t eval_seed = 0xd15c5ca1eull;  // shared across runs by default
    int eval_every = 0;       // 0 = evaluate at the end only
    bool early_stop = false;  // optional stop on sustained perfect ID accuracy
    double grad_clip = 0.0;   // global-norm clip; 0 disables
    int warmup_steps = 0;     // linear ramp to peak_lr before the cosine decay

    static TrainConfig count_paper() {
        TrainConfig c;
        c.task = TaskKind::count;
        c.max_train_length = 30;
        c.steps = 10000;
        c.batch_size = 128;
        c.context_length = 256;
        c.peak_lr = 1e-3;
        c.weight_decay = 0.1;
        c.eval_lengths = {30, 60};
        return c;
    }

    static TrainConfig addition_paper() {
        TrainConfig c;
        c.task = TaskKind::addition;
        c.max_train_length = 35;
        c.steps = 30000;
        c.batch_size = 64;
        c.context_length = 512;
        c.peak_lr = 1e-4;
        c.weight_decay = 0.0;
        c.eval_lengths = {35, 40};
        c.max_eval_digits = 40;
        return c;
    }

    // Desk-scale presets shrink the training lengths and budgets while
    // keeping the same recipe shape; the count learning rate is raised to
    // reach in-distribution convergence within the reduced step budget.
    static TrainConfig count_desk() {
        TrainConfig c;
        c.task = TaskKind::count;
        c.max_train_length = 10;
        c.steps = 2000;
        c.batch_size = 64;
        c.context_length = 128;
        c.peak_lr = 5e-3;
        c.weight_decay = 0.1;
        c.eval_lengths = {10, 20};
        c.eval_items = 100;
        c.warmup_steps = 100;
        return c;
    }

    static TrainConfig addition_desk() {
        TrainConfig c;
        c.task = TaskKind::addition;
        c.max_train_length = 6;
        c.steps = 6000;
        c.batch_size = 32;
        c.context_length = 192;
        c.peak_lr = 3e-4;
        c.weight_decay = 0.0;
        c.eval_lengths = {6, 8};
        c.eval_items = 100;
        c.max_eval_digits = 8;
        return c;
    }
};

/// One (task, scale, seed) outcome; the unit persisted to JSONL.
struct RunRecord {
    int format_version = kRunRecordVersion;
    TaskKind task = TaskKind::count;
    std::string scale_label;
    std::int64_t param_count = 0;
    ModelConfig model_config;
    TrainConfig train_config;
    std::uint64_t seed = 0;
    std::string status = "ok";  // "ok" | "diverged"
    // metric name -> evaluation length -> value
    std::map<std::string, std::map<int, double>> metrics;
    std::vector<std::pair<int, double>> train_loss_trace;
    std::vector<std::pair<int, double>> eval_trace;  // (step, em) when eval_every > 0
    double wall_time_s = 0.0;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"depth", c.depth},     {"n_heads", c.n_heads},
            {"head_dim", c.head_dim}, {"vocab_size", c.vocab_size},
            {"context_length", c.context_length}, {"mlp_ratio", c.mlp_ratio}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.depth = j.at("depth").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.context_length = j.at("context_length").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"task", std::string(task_name(c.task))},
            {"max_train_length", c.max_train_length},
            {"steps", c.steps},
            {"batch_size", c.batch_size},
            {"context_length", c.context_length},
            {"peak_lr", c.peak_lr},
            {"weight_decay", c.weight_decay},
            {"seed", c.seed},
            {"eval_lengths", c.eval_lengths},
            {"eval_items", c.eval_items},
            {"max_eval_digits", c.max_eval_digits},
            {"eval_seed", c.eval_seed},
            {"eval_every", c.eval_every},
            {"early_stop", c.early_stop},
            {"grad_clip", c.grad_clip},
            {"warmup_steps", c.warmup_steps},
            {"schedule", "cosine"},
            {"optimizer", "adamw_b1_0.9_b2_0.999_eps_1e-8"}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.task = task_from_name(j.at("task").get<std::string>());
    c.max_train_length = j.at("max_train_length").get<int>();
    c.steps = j.at("steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.context_length = j.at("context_length").get<int>();
    c.peak_lr = j.at("peak_lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.eval_lengths = j.at("eval_lengths").get<std::vector<int>>();
    c.eval_items = j.at("eval_items").get<int>();
    c.max_eval_digits = j.at("max_eval_digits").get<int>();
    c.eval_seed = j.at("eval_seed").get<std::uint64_t>();
    c.eval_every = j.at("eval_every").get<int>();
    c.early_stop = j.at("early_stop").get<bool>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    return c;
}

inline nlohmann::json run_record_to_json(const RunRecord& r) {
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [name, by_len] : r.metrics) {
        nlohmann::json m = nlohmann::json::object();
        for (const auto& [len, value] : by_len) m[std::to_string(len)] = value;
        metrics[name] = m;
    }
    nlohmann::json j{{"format_version", r.format_version},
                     {"task", std::string(task_name(r.task))},
                     {"scale_label", r.scale_label},
                     {"param_count", r.param_count},
                     {"model_config", model_config_to_json(r.model_config)},
                     {"train_config", train_config_to_json(r.train_config)},
                     {"seed", r.seed},
                     {"status", r.status},
                     {"metrics", metrics},
                     {"wall_time_s", r.wall_time_s},
                     // architecture facts the paper leaves open, recorded so
                     // results are self-describing
                     {"arch",
                      {{"norm", "pre_layernorm"},
                       {"activation", "gelu_tanh"},
                       {"bias", false},
                       {"tied_embeddings", false},
                       {"rope_base", kRopeBase},
                       {"init", "scaled_normal_1_over_sqrt_hidden"},
                       {"precision", "f32"}}}};
    j["train_loss_trace"] = nlohmann::json::array();
    for (const auto& [step, loss] : r.train_loss_trace)
        j["train_loss_trace"].push_back({step, loss});
    if (!r.eval_trace.empty()) {
        j["eval_trace"] = nlohmann::json::array();
        for (const auto& [step, em] : r.eval_trace) j["eval_trace"].push_back({step, em});
    }
    return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
    RunRecord r;
    r.format_version = j.at("format_version").get<int>();
    if (r.format_version != kRunRecordVersion)
        throw std::runtime_error("run record format_version mismatch: got " +
                                 std::to_string(r.format_version) + ", expected " +
                                 std::to_string(kRunRecordVersion));
    r.task = task_from_name(j.at("task").get<std::string>());
    r.scale_label = j.at("scale_label").get<std::string>();
    r.param_count = j.at("param_count").get<std::int64_t>();
    r.model_config = model_config_from_json(j.at("model_config"));
    r.train_config = train_config_from_json(j.at("train_config"));
    r.seed = j.at("seed").get<std::uint64_t>();
    r.status = j.at("status").get<std::string>();
    for (const auto& [name, by_len] : j.at("metrics").items())
        for (const auto& [len, value] : by_len.items())
            r.metrics[name][std::stoi(len)] = value.get<double>();
    for (const auto& pair : j.at("train_loss_trace"))
        r.train_loss_trace.emplace_back(pair.at(0).get<int>(), pair.at(1).get<double>());
    if (j.contains("eval_trace"))
        for (const auto& pair : j.at("eval_trace"))
            r.eval_trace.emplace_back(pair.at(0).get<int>(), pair.at(1).get<double>());
    r.wall_time_s = j.at("wall_time_s").get<double>();
    return r;
}

inline std::string run_record_to_line(const RunRecord& r) {
    return run_record_to_json(r).dump();
}

inline RunRecord run_record_from_line(const std::string& line) {
    return run_record_from_json(nlohmann::json::parse(line));
}

}  // namespace distscale
