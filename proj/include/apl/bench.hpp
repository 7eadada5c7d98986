// SPDX-License-Identifier: Apache-2.0
//
// Pruning comparison on synthetic tasks: Magnitude vs. Dare vs. APL-linear
// over a drop-ratio sweep. One base net is fine-tuned per task; each method
// prunes the delta at each ratio and the pruned model is scored on the
// task's test split.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "apl/calibration.hpp"
#include "apl/delta_ops.hpp"
#include "apl/errors.hpp"
#include "apl/importance.hpp"
#include "apl/partition.hpp"
#include "apl/rng.hpp"
#include "apl/tensor_map.hpp"
#include "apl/toy_data.hpp"
#include "apl/toy_lab.hpp"

namespace apl::bench {

inline constexpr const char* kMethods[] = {"magnitude", "dare", "apl-linear"};
inline constexpr const char* kCsvSchema = "apl.bench.v1";

struct BenchConfig {
    std::size_t task_count = 2;
    std::vector<double> ratios = {0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995};
    std::size_t seed_count = 5;
    double epsilon = 0.01; // capped per ratio so lambda +- epsilon stays in [0, 1)
    std::uint64_t seed = 0;
    unsigned threads = 0;
    toy::ToyNetSpec net;
    toy::SyntheticTaskSpec task_base;
    PartitionLevel level = PartitionLevel::hidden; // apl-linear importance granularity
    std::size_t pretrain_epochs = 150; // base training on the angle mixture; 0 = raw init
    std::size_t epochs = 300;
    double step_size = 0.3;

    BenchConfig() {
        net.input_dim = 8;
        net.hidden_dims = {64, 64};
        net.class_count = 4;
        task_base.noise_sigma = 0.4;
        task_base.train_size = 384;
        task_base.test_size = 600;
        task_base.fewshot_size = 64;
    }

    void validate() const {
        if (task_count == 0) throw ConfigError("bench needs at least one task");
        if (ratios.empty()) throw ConfigError("bench needs at least one drop ratio");
        for (double r : ratios) {
            if (!(r > 0.0) || !(r < 1.0)) {
                throw ConfigError("bench drop ratio " + std::to_string(r) +
                                  " is outside (0, 1)");
            }
        }
        if (seed_count == 0) throw ConfigError("bench needs at least one seed");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
        if (epochs == 0) throw ConfigError("bench needs at least one training epoch");
        if (!(step_size > 0.0)) throw ConfigError("step size must be positive");
        net.validate();
        task_base.validate();
    }
};

struct BenchRow {
    std::string task;
    std::string method;
    double ratio = 0.0;
    std::uint64_t seed = 0; // seed index within the sweep
    double accuracy = 0.0;
};

struct BenchResult {
    std::vector<BenchRow> rows; // task-major, then ratio, seed, method
    std::map<std::string, double> fine_accuracy; // task id -> unpruned accuracy

    double mean_accuracy(const std::string& method, double ratio) const {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& row : rows) {
            if (row.method == method && row.ratio == ratio) {
                sum += row.accuracy;
                ++n;
            }
        }
        if (n == 0) throw ValidationError("no bench rows for method '" + method + "'");
        return sum / static_cast<double>(n);
    }

    double mean_accuracy(const std::string& task, const std::string& method,
                         double ratio) const {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& row : rows) {
            if (row.task == task && row.method == method && row.ratio == ratio) {
                sum += row.accuracy;
                ++n;
            }
        }
        if (n == 0) {
            throw ValidationError("no bench rows for task '" + task + "', method '" +
                                  method + "'");
        }
        return sum / static_cast<double>(n);
    }
};

namespace detail {

inline std::uint64_t mask_seed(std::uint64_t seed, const std::string& task,
                               const char* method, std::size_t ratio_index,
                               std::size_t seed_index) {
    const std::string stream = task + "|" + method + "|r" + std::to_string(ratio_index) +
                               "|s" + std::to_string(seed_index);
    return mix64(seed ^ fnv1a64(stream));
}

} // namespace detail

inline BenchResult run_bench(const BenchConfig& cfg) {
    cfg.validate();

    toy::ToyNetSpec net = cfg.net;
    net.seed = mix64(cfg.seed ^ fnv1a64("net"));
    TensorMap base = toy::init_toy_net(net);
    if (cfg.pretrain_epochs > 0) {
        const toy::TaskData mix =
            toy::generate_task(toy::mixture_spec(cfg.task_base, cfg.seed));
        base = toy::toy_train(base, net, mix.train, cfg.pretrain_epochs, cfg.step_size);
    }
    const auto apl_partitions =
        build_partitions(base, PartitionSchema::default_for(cfg.level, base));
    const auto model_partitions =
        build_partitions(base, PartitionSchema::default_for(PartitionLevel::model, base));
    const std::string model_id = model_partitions.front().id;
    const toy::ToyEvaluator evaluator(net.class_count);

    const auto specs = toy::make_tasks(cfg.task_count, cfg.task_base, cfg.seed);

    BenchResult out;
    for (const auto& spec : specs) {
        const toy::TaskData data = toy::generate_task(spec);
        const TensorMap fine =
            toy::toy_train(base, net, data.train, cfg.epochs, cfg.step_size);
        const TensorMap delta = compute_delta(fine, base);
        out.fine_accuracy[spec.task_id] =
            toy::toy_evaluate(fine, net, data.test).accuracy;

        const ImportanceReport report =
            causal_importance(evaluator, fine, base, apl_partitions, data.fewshot,
                              cfg.level, cfg.threads);

        for (std::size_t ri = 0; ri < cfg.ratios.size(); ++ri) {
            const double ratio = cfg.ratios[ri];
            const double eps = std::min({cfg.epsilon, (1.0 - ratio) / 2.0, ratio});
            const std::map<std::string, double> apl_ratios =
                linear_rank_drop_ratios(report, ratio, eps, &apl_partitions);

            // The magnitude mask is deterministic, so build it once per ratio.
            const DropMask magnitude_mask =
                make_mask(delta, {{model_id, ratio}}, model_partitions,
                          MaskMode::magnitude, std::nullopt, cfg.threads);
            const double magnitude_acc =
                toy::toy_evaluate(reconstruct(base, apply_mask_rescale(delta, magnitude_mask)),
                                  net, data.test)
                    .accuracy;

            for (std::size_t k = 0; k < cfg.seed_count; ++k) {
                for (const char* method : kMethods) {
                    double accuracy;
                    if (std::string_view(method) == "magnitude") {
                        accuracy = magnitude_acc;
                    } else {
                        const bool apl = std::string_view(method) == "apl-linear";
                        const DropMask mask = make_mask(
                            delta, apl ? apl_ratios
                                       : std::map<std::string, double>{{model_id, ratio}},
                            apl ? apl_partitions : model_partitions, MaskMode::random,
                            detail::mask_seed(cfg.seed, spec.task_id, method, ri, k),
                            cfg.threads);
                        accuracy =
                            toy::toy_evaluate(
                                   reconstruct(base, apply_mask_rescale(delta, mask)), net,
                                   data.test)
                                .accuracy;
                    }
                    out.rows.push_back({spec.task_id, method, ratio, k, accuracy});
                }
            }
        }
    }
    return out;
}

/// CSV with a versioned schema comment, per-task unpruned accuracy comments,
/// a header row, and one data row per (task, ratio, seed, method).
inline std::string bench_csv(const BenchResult& result) {
    std::string out = "# schema ";
    out += kCsvSchema;
    out += "\n";
    char line[160];
    for (const auto& [task, acc] : result.fine_accuracy) {
        std::snprintf(line, sizeof(line), "# fine %s %.6f\n", task.c_str(), acc);
        out += line;
    }
    out += "task,method,ratio,seed,accuracy\n";
    for (const auto& row : result.rows) {
        std::snprintf(line, sizeof(line), "%s,%s,%g,%llu,%.6f\n", row.task.c_str(),
                      row.method.c_str(), row.ratio,
                      static_cast<unsigned long long>(row.seed), row.accuracy);
        out += line;
    }
    return out;
}

} // namespace apl::bench
