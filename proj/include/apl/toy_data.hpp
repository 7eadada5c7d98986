// SPDX-License-Identifier: Apache-2.0
//
// Synthetic classification tasks. Each class c sits in a Gaussian cluster
// whose mean is radius * e_c rotated by the task angle in the (c, c + d/2)
// plane, so rotating never moves one class onto another and the angle gap
// between two tasks measures how similar they are. A mixture task draws a
// fresh angle per sample, giving a rotation-robust pretraining distribution.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "apl/batch.hpp"
#include "apl/errors.hpp"
#include "apl/rng.hpp"

namespace apl::toy {

struct SyntheticTaskSpec {
    std::string task_id = "task";
    std::size_t input_dim = 8;
    std::size_t class_count = 4;
    double cluster_radius = 3.0;
    double noise_sigma = 0.6;
    double rotation_deg = 0.0;
    bool mixture = false; // per-sample angle uniform over [0, 90] degrees
    std::vector<int> label_permutation; // empty = identity
    std::size_t train_size = 512;
    std::size_t test_size = 1000;
    std::size_t fewshot_size = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (class_count < 2) throw ConfigError("tasks need at least 2 classes");
        if (input_dim < 2 * class_count) {
            throw ConfigError("input dim must be at least twice the class count so every "
                              "cluster has a rotation plane of its own");
        }
        if (!(cluster_radius > 0.0)) throw ConfigError("cluster radius must be positive");
        if (!(noise_sigma >= 0.0)) throw ConfigError("noise sigma must be nonnegative");
        if (train_size == 0 || test_size == 0 || fewshot_size == 0) {
            throw ConfigError("split sizes must be at least 1");
        }
        if (!label_permutation.empty()) {
            if (label_permutation.size() != class_count) {
                throw ConfigError("label permutation must list every class once");
            }
            std::vector<bool> seen(class_count, false);
            for (int label : label_permutation) {
                if (label < 0 || static_cast<std::size_t>(label) >= class_count ||
                    seen[static_cast<std::size_t>(label)]) {
                    throw ConfigError("label permutation must list every class once");
                }
                seen[static_cast<std::size_t>(label)] = true;
            }
        }
    }
};

struct TaskData {
    SyntheticTaskSpec spec;
    FewShotBatch train;
    FewShotBatch test;
    FewShotBatch fewshot;
};

namespace detail {

inline FewShotBatch sample_split(const SyntheticTaskSpec& spec, const std::string& split,
                                 std::size_t count) {
    SequentialRng rng(spec.seed, spec.task_id + ":" + split);
    FewShotBatch batch;
    batch.task_id = spec.task_id;
    batch.inputs.reserve(count);
    batch.labels.reserve(count);
    const double base_angle = spec.rotation_deg * std::numbers::pi / 180.0;
    for (std::size_t i = 0; i < count; ++i) {
        const auto cluster = i % spec.class_count; // balanced within +-1
        const double angle =
            spec.mixture ? rng.next_uniform() * (std::numbers::pi / 2.0) : base_angle;
        std::vector<double> x(spec.input_dim);
        for (auto& v : x) v = spec.noise_sigma * rng.next_gaussian();
        x[cluster] += spec.cluster_radius * std::cos(angle);
        x[cluster + spec.input_dim / 2] += spec.cluster_radius * std::sin(angle);
        const int label = spec.label_permutation.empty()
                              ? static_cast<int>(cluster)
                              : spec.label_permutation[cluster];
        batch.inputs.push_back(std::move(x));
        batch.labels.push_back(label);
    }
    return batch;
}

} // namespace detail

inline TaskData generate_task(const SyntheticTaskSpec& spec) {
    spec.validate();
    TaskData data;
    data.spec = spec;
    data.train = detail::sample_split(spec, "train", spec.train_size);
    data.test = detail::sample_split(spec, "test", spec.test_size);
    data.fewshot = detail::sample_split(spec, "fewshot", spec.fewshot_size);
    return data;
}

/// `count` variants of the template with rotation angles evenly spaced over
/// [0, 90] degrees, labels cyclically shifted by the task index, ids
/// "task1".."taskN", and per-task seeds derived from `seed`. Two tasks are
/// similar when their angles are close.
inline std::vector<SyntheticTaskSpec> make_tasks(std::size_t count,
                                                 const SyntheticTaskSpec& base,
                                                 std::uint64_t seed) {
    if (count == 0) throw ConfigError("task count must be at least 1");
    base.validate();
    std::vector<SyntheticTaskSpec> specs;
    specs.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        SyntheticTaskSpec spec = base;
        spec.task_id = "task" + std::to_string(k + 1);
        spec.rotation_deg =
            count == 1 ? base.rotation_deg
                       : 90.0 * static_cast<double>(k) / static_cast<double>(count - 1);
        spec.mixture = false;
        if (k > 0) {
            spec.label_permutation.resize(spec.class_count);
            for (std::size_t c = 0; c < spec.class_count; ++c) {
                spec.label_permutation[c] = static_cast<int>((c + k) % spec.class_count);
            }
        }
        spec.seed = mix64(seed ^ (k + 1));
        specs.push_back(std::move(spec));
    }
    return specs;
}

/// The base-model pretraining distribution: same clusters, angle drawn per
/// sample, so a net trained on it is competent at every task angle.
inline SyntheticTaskSpec mixture_spec(const SyntheticTaskSpec& base, std::uint64_t seed) {
    SyntheticTaskSpec spec = base;
    spec.task_id = "mixture";
    spec.mixture = true;
    spec.rotation_deg = 0.0;
    spec.seed = mix64(seed ^ 0x5eedULL);
    return spec;
}

inline nlohmann::json task_spec_to_json(const SyntheticTaskSpec& spec) {
    return {{"task_id", spec.task_id},
            {"input_dim", spec.input_dim},
            {"class_count", spec.class_count},
            {"cluster_radius", spec.cluster_radius},
            {"noise_sigma", spec.noise_sigma},
            {"rotation_deg", spec.rotation_deg},
            {"mixture", spec.mixture},
            {"label_permutation", spec.label_permutation},
            {"train_size", spec.train_size},
            {"test_size", spec.test_size},
            {"fewshot_size", spec.fewshot_size},
            {"seed", spec.seed}};
}

inline SyntheticTaskSpec task_spec_from_json(const nlohmann::json& j,
                                             const std::string& context) {
    SyntheticTaskSpec spec;
    try {
        spec.task_id = j.at("task_id").get<std::string>();
        spec.input_dim = j.at("input_dim").get<std::size_t>();
        spec.class_count = j.at("class_count").get<std::size_t>();
        spec.cluster_radius = j.at("cluster_radius").get<double>();
        spec.noise_sigma = j.at("noise_sigma").get<double>();
        spec.rotation_deg = j.at("rotation_deg").get<double>();
        if (j.contains("mixture")) spec.mixture = j.at("mixture").get<bool>();
        if (j.contains("label_permutation")) {
            spec.label_permutation = j.at("label_permutation").get<std::vector<int>>();
        }
        spec.train_size = j.at("train_size").get<std::size_t>();
        spec.test_size = j.at("test_size").get<std::size_t>();
        spec.fewshot_size = j.at("fewshot_size").get<std::size_t>();
        spec.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(context + ": " + e.what());
    }
    try {
        spec.validate();
    } catch (const Error& e) {
        throw FormatError(context + ": " + e.what());
    }
    return spec;
}

} // namespace apl::toy
