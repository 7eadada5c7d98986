// SPDX-License-Identifier: Apache-2.0
//
// Merge recipes: a declarative description of base + fine-tuned checkpoints,
// pruner, importance provider, and merge method, plus the staged runner that
// executes one. The runner is deterministic: the same recipe and seed give a
// byte-identical merged checkpoint.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "apl/batch.hpp"
#include "apl/calibration.hpp"
#include "apl/checkpoint.hpp"
#include "apl/delta_ops.hpp"
#include "apl/errors.hpp"
#include "apl/importance.hpp"
#include "apl/log.hpp"
#include "apl/merge.hpp"
#include "apl/partition.hpp"
#include "apl/rng.hpp"
#include "apl/tensor_map.hpp"

namespace apl {

enum class MergeMethod { task_arithmetic, mi_task_arithmetic };
enum class PrunerKind { none, dare, magnitude, apl_tanh, apl_linear };
enum class RecipeProvider { causal, gradient, file };

inline std::string to_string(MergeMethod method) {
    return method == MergeMethod::task_arithmetic ? "task-arithmetic" : "mi-task-arithmetic";
}

inline MergeMethod parse_merge_method(const std::string& text) {
    if (text == "task-arithmetic") return MergeMethod::task_arithmetic;
    if (text == "mi-task-arithmetic") return MergeMethod::mi_task_arithmetic;
    throw ConfigError("unknown merge method '" + text + "'");
}

inline std::string to_string(PrunerKind pruner) {
    switch (pruner) {
    case PrunerKind::none: return "none";
    case PrunerKind::dare: return "dare";
    case PrunerKind::magnitude: return "magnitude";
    case PrunerKind::apl_tanh: return "apl-tanh";
    default: return "apl-linear";
    }
}

inline PrunerKind parse_pruner(const std::string& text) {
    if (text == "none") return PrunerKind::none;
    if (text == "dare") return PrunerKind::dare;
    if (text == "magnitude") return PrunerKind::magnitude;
    if (text == "apl-tanh") return PrunerKind::apl_tanh;
    if (text == "apl-linear") return PrunerKind::apl_linear;
    throw ConfigError("unknown pruner '" + text + "'");
}

inline std::string to_string(RecipeProvider provider) {
    switch (provider) {
    case RecipeProvider::causal: return "causal";
    case RecipeProvider::gradient: return "gradient";
    default: return "file";
    }
}

inline RecipeProvider parse_recipe_provider(const std::string& text) {
    if (text == "causal") return RecipeProvider::causal;
    if (text == "gradient") return RecipeProvider::gradient;
    if (text == "file") return RecipeProvider::file;
    throw ConfigError("unknown importance provider '" + text + "'");
}

struct RecipeTask {
    std::string task_id;
    std::filesystem::path fine;
    std::optional<std::filesystem::path> batch;            // few-shot batch for this task
    std::optional<std::filesystem::path> importance;       // provider=file: partition report
    std::optional<std::filesystem::path> model_importance; // provider=file: model-level report
    std::optional<std::filesystem::path> gradient;         // provider=gradient: grad at base
};

struct MergeRecipe {
    std::filesystem::path base;
    std::vector<RecipeTask> tasks;
    MergeMethod method = MergeMethod::mi_task_arithmetic;
    PrunerKind pruner = PrunerKind::apl_tanh;
    RecipeProvider provider = RecipeProvider::causal;
    PartitionLevel level = PartitionLevel::layer;
    std::optional<std::filesystem::path> schema; // partition schema, default_for(level) if unset
    double lambda = 0.9;
    double epsilon = 0.01;
    double tau1 = 5.0;
    double tau2 = 5.0;
    double scale = 1.0; // task-arithmetic only
    std::uint64_t seed = 0;
    std::string evaluator = "toy";
    std::optional<std::filesystem::path> ood_batch; // one shared batch for every task

    bool wants_partition_importance() const {
        return pruner == PrunerKind::apl_tanh || pruner == PrunerKind::apl_linear;
    }

    bool wants_model_importance() const {
        return method == MergeMethod::mi_task_arithmetic;
    }

    void validate() const {
        if (base.empty()) throw ConfigError("recipe needs a base checkpoint path");
        if (tasks.empty()) throw ConfigError("recipe needs at least one task");
        std::map<std::string, std::size_t> seen;
        for (const auto& task : tasks) {
            if (task.task_id.empty()) throw ConfigError("recipe task without a task_id");
            if (task.fine.empty()) {
                throw ConfigError("task '" + task.task_id + "' needs a fine checkpoint path");
            }
            if (++seen[task.task_id] > 1) {
                throw ConfigError("duplicate task_id '" + task.task_id + "'");
            }
        }
        if (!std::isfinite(scale)) throw ConfigError("scale must be finite");

        if (wants_partition_importance()) {
            CalibrationConfig cfg;
            cfg.lambda = lambda;
            cfg.epsilon = epsilon;
            cfg.tau1 = tau1;
            cfg.tau2 = tau2;
            cfg.validate();
        } else if (pruner != PrunerKind::none) {
            if (!(lambda >= 0.0) || !(lambda < 1.0)) {
                throw ConfigError("drop ratio " + std::to_string(lambda) +
                                  " is outside [0, 1)");
            }
        }
        if (wants_model_importance() && !(tau2 > 0.0)) {
            throw ConfigError("merge temperature must be positive");
        }

        const bool wants_importance = wants_partition_importance() || wants_model_importance();
        if (ood_batch) {
            if (!wants_importance) {
                throw ConfigError("ood_batch given but nothing uses importance");
            }
            if (provider == RecipeProvider::file) {
                throw ConfigError("ood_batch cannot be combined with provider 'file'");
            }
            for (const auto& task : tasks) {
                if (task.batch) {
                    throw ConfigError("task '" + task.task_id +
                                      "' has a batch but ood_batch replaces per-task batches");
                }
            }
        }
        if (!wants_importance) return;

        for (const auto& task : tasks) {
            if (provider == RecipeProvider::file) {
                if (wants_partition_importance() && !task.importance) {
                    throw ConfigError("task '" + task.task_id +
                                      "' needs an importance file under provider 'file'");
                }
                if (wants_model_importance() && !task.model_importance) {
                    throw ConfigError("task '" + task.task_id +
                                      "' needs a model_importance file under provider 'file'");
                }
                continue;
            }
            const bool grad_file = provider == RecipeProvider::gradient && task.gradient;
            if (!ood_batch && !task.batch && !grad_file) {
                throw ConfigError("task '" + task.task_id + "' needs a batch (or ood_batch" +
                                  std::string(provider == RecipeProvider::gradient
                                                  ? ", or a gradient file)"
                                                  : ")"));
            }
        }
    }
};

/// Mask seed for one task of a recipe run. Distinct tasks get decorrelated
/// streams from the one recipe seed.
inline std::uint64_t task_mask_seed(std::uint64_t seed, const std::string& task_id) {
    return mix64(seed ^ fnv1a64(task_id));
}

/// Named evaluators a recipe can refer to.
using EvaluatorRegistry = std::map<std::string, std::shared_ptr<const Evaluator>>;

struct MergeRun {
    TensorMap merged;
    nlohmann::json report;
};

namespace detail {

class StageClock {
public:
    explicit StageClock(nlohmann::json& timings) : timings_(timings) {}

    template <typename Fn>
    auto run(std::string_view stage, Fn&& fn) -> decltype(fn()) {
        const auto start = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(fn())>) {
            run_stage(stage, std::forward<Fn>(fn));
            record(stage, start);
        } else {
            auto out = run_stage(stage, std::forward<Fn>(fn));
            record(stage, start);
            return out;
        }
    }

private:
    void record(std::string_view stage, std::chrono::steady_clock::time_point start) {
        const auto end = std::chrono::steady_clock::now();
        timings_[std::string(stage)] =
            std::chrono::duration<double, std::milli>(end - start).count();
    }

    nlohmann::json& timings_;
};

inline double model_magnitude(const ImportanceReport& report, const std::string& task_id) {
    if (report.level != PartitionLevel::model) {
        throw ValidationError("model importance for task '" + task_id +
                              "' is not a model-level report");
    }
    const ImportanceEntry* entry = report.find("model");
    if (entry == nullptr && report.entries.size() == 1) entry = &report.entries.front();
    if (entry == nullptr) {
        throw ValidationError("model importance for task '" + task_id +
                              "' needs a single entry or one with id 'model'");
    }
    return entry->magnitude;
}

} // namespace detail

/// Executes a recipe: load, delta, partitions, importance, calibration,
/// masks, prune, weights, merge. Failures carry the stage they occurred in.
/// Returns the merged model plus a run report.
inline MergeRun run_recipe(const MergeRecipe& recipe, const EvaluatorRegistry& registry,
                           unsigned threads = 0) {
    recipe.validate();

    const bool wants_partition = recipe.wants_partition_importance();
    const bool wants_model = recipe.wants_model_importance();
    const bool wants_importance = wants_partition || wants_model;
    const std::size_t task_count = recipe.tasks.size();

    nlohmann::json report;
    report["version"] = 1;
    report["method"] = to_string(recipe.method);
    report["pruner"] = to_string(recipe.pruner);
    report["seed"] = recipe.seed;
    {
        nlohmann::json ids = nlohmann::json::array();
        for (const auto& task : recipe.tasks) ids.push_back(task.task_id);
        report["tasks"] = std::move(ids);
    }
    if (recipe.pruner != PrunerKind::none) report["lambda"] = recipe.lambda;
    if (wants_partition) {
        report["epsilon"] = recipe.epsilon;
        report["tau1"] = recipe.tau1;
        report["level"] = to_string(recipe.level);
    }
    if (wants_model) report["tau2"] = recipe.tau2;
    if (wants_importance) report["provider"] = to_string(recipe.provider);
    if (recipe.method == MergeMethod::task_arithmetic) report["scale"] = recipe.scale;

    nlohmann::json timings = nlohmann::json::object();
    detail::StageClock clock(timings);

    // load
    struct TaskState {
        TensorMap fine;
        std::optional<FewShotBatch> batch;
        TensorMap delta;
        ImportanceReport partition_report;
        double model_magnitude = 0.0;
        std::map<std::string, double> ratios;
        TensorMap pruned;
    };
    TensorMap base;
    std::vector<TaskState> state(task_count);
    clock.run("load", [&] {
        base = load_checkpoint(recipe.base);
        std::optional<FewShotBatch> shared;
        if (recipe.ood_batch) shared = load_batch(*recipe.ood_batch);
        for (std::size_t t = 0; t < task_count; ++t) {
            state[t].fine = load_checkpoint(recipe.tasks[t].fine);
            if (shared) {
                state[t].batch = *shared;
            } else if (recipe.tasks[t].batch) {
                state[t].batch = load_batch(*recipe.tasks[t].batch);
            }
        }
    });

    // delta
    clock.run("delta", [&] {
        for (std::size_t t = 0; t < task_count; ++t) {
            base.require_aligned(state[t].fine, "task '" + recipe.tasks[t].task_id + "'");
            state[t].delta = compute_delta(state[t].fine, base);
        }
    });

    // partitions
    std::vector<Partition> partitions;
    std::vector<Partition> model_partitions;
    clock.run("partitions", [&] {
        if (recipe.pruner == PrunerKind::dare || recipe.pruner == PrunerKind::magnitude) {
            partitions = build_partitions(
                base, PartitionSchema::default_for(PartitionLevel::model, base));
        } else if (recipe.pruner != PrunerKind::none) {
            const PartitionSchema schema =
                recipe.schema ? PartitionSchema::load(*recipe.schema)
                              : PartitionSchema::default_for(recipe.level, base);
            partitions = build_partitions(base, schema);
        }
        if (wants_model && recipe.provider != RecipeProvider::file) {
            model_partitions = build_partitions(
                base, PartitionSchema::default_for(PartitionLevel::model, base));
        }
    });

    // importance
    if (wants_importance) {
        clock.run("importance", [&] {
            std::shared_ptr<const Evaluator> evaluator;
            const GradientEvaluator* grad_eval = nullptr;
            const bool needs_eval = [&] {
                if (recipe.provider == RecipeProvider::causal) return true;
                if (recipe.provider != RecipeProvider::gradient) return false;
                for (const auto& task : recipe.tasks) {
                    if (!task.gradient) return true;
                }
                return false;
            }();
            if (needs_eval) {
                const auto it = registry.find(recipe.evaluator);
                if (it == registry.end() || it->second == nullptr) {
                    throw ConfigError("unknown evaluator '" + recipe.evaluator + "'");
                }
                evaluator = it->second;
                if (recipe.provider == RecipeProvider::gradient) {
                    grad_eval = dynamic_cast<const GradientEvaluator*>(evaluator.get());
                    if (grad_eval == nullptr) {
                        throw ConfigError("evaluator '" + recipe.evaluator +
                                          "' cannot provide gradients");
                    }
                }
            }

            for (std::size_t t = 0; t < task_count; ++t) {
                const RecipeTask& task = recipe.tasks[t];
                TaskState& st = state[t];
                if (recipe.provider == RecipeProvider::causal) {
                    if (wants_partition) {
                        st.partition_report =
                            causal_importance(*evaluator, st.fine, base, partitions,
                                              *st.batch, recipe.level, threads);
                    }
                    if (wants_model) {
                        const ImportanceReport model_report =
                            causal_importance(*evaluator, st.fine, base, model_partitions,
                                              *st.batch, PartitionLevel::model, threads);
                        st.model_magnitude =
                            detail::model_magnitude(model_report, task.task_id);
                        report["model_importance"][task.task_id] =
                            importance_to_json(model_report);
                    }
                } else if (recipe.provider == RecipeProvider::gradient) {
                    const TensorMap grad = task.gradient
                                               ? load_checkpoint(*task.gradient)
                                               : grad_eval->loss_gradient(base, *st.batch);
                    const std::string fingerprint =
                        st.batch ? batch_fingerprint(*st.batch) : "";
                    if (wants_partition) {
                        st.partition_report =
                            gradient_importance(st.delta, grad, partitions, recipe.level,
                                                task.task_id, fingerprint, threads);
                    }
                    if (wants_model) {
                        const ImportanceReport model_report = gradient_importance(
                            st.delta, grad, model_partitions, PartitionLevel::model,
                            task.task_id, fingerprint, threads);
                        st.model_magnitude =
                            detail::model_magnitude(model_report, task.task_id);
                        report["model_importance"][task.task_id] =
                            importance_to_json(model_report);
                    }
                } else {
                    if (wants_partition) {
                        st.partition_report = load_importance(*task.importance);
                        for (const auto& partition : partitions) {
                            if (st.partition_report.find(partition.id) == nullptr) {
                                throw ValidationError("importance report for task '" +
                                                      task.task_id + "' lacks partition '" +
                                                      partition.id + "'");
                            }
                        }
                    }
                    if (wants_model) {
                        const ImportanceReport model_report =
                            load_importance(*task.model_importance);
                        st.model_magnitude =
                            detail::model_magnitude(model_report, task.task_id);
                        report["model_importance"][task.task_id] =
                            importance_to_json(model_report);
                    }
                }
                if (wants_partition) {
                    report["importance"][task.task_id] =
                        importance_to_json(st.partition_report);
                }
            }
        });
    }

    // calibration
    if (recipe.pruner != PrunerKind::none) {
        clock.run("calibration", [&] {
            for (std::size_t t = 0; t < task_count; ++t) {
                TaskState& st = state[t];
                switch (recipe.pruner) {
                case PrunerKind::dare:
                case PrunerKind::magnitude:
                    for (const auto& partition : partitions) {
                        st.ratios[partition.id] = recipe.lambda;
                    }
                    break;
                case PrunerKind::apl_tanh: {
                    CalibrationConfig cfg;
                    cfg.lambda = recipe.lambda;
                    cfg.epsilon = recipe.epsilon;
                    cfg.tau1 = recipe.tau1;
                    cfg.tau2 = recipe.tau2;
                    st.ratios = tanh_drop_ratios(st.partition_report, cfg);
                    break;
                }
                default:
                    st.ratios = linear_rank_drop_ratios(st.partition_report, recipe.lambda,
                                                        recipe.epsilon, &partitions);
                    break;
                }
                report["nominal_ratios"][recipe.tasks[t].task_id] = st.ratios;
            }
        });
    }

    // masks + prune
    if (recipe.pruner == PrunerKind::none) {
        for (std::size_t t = 0; t < task_count; ++t) state[t].pruned = state[t].delta;
    } else {
        std::vector<DropMask> masks(task_count);
        clock.run("masks", [&] {
            const MaskMode mode = recipe.pruner == PrunerKind::magnitude ? MaskMode::magnitude
                                                                         : MaskMode::random;
            for (std::size_t t = 0; t < task_count; ++t) {
                std::optional<std::uint64_t> mask_seed;
                if (mode == MaskMode::random) {
                    mask_seed = task_mask_seed(recipe.seed, recipe.tasks[t].task_id);
                }
                masks[t] = make_mask(state[t].delta, state[t].ratios, partitions, mode,
                                     mask_seed, threads);
                report["realized_drop"][recipe.tasks[t].task_id] = masks[t].realized_drop();
            }
        });
        clock.run("prune", [&] {
            for (std::size_t t = 0; t < task_count; ++t) {
                state[t].pruned = apply_mask_rescale(state[t].delta, masks[t]);
            }
        });
    }

    // weights + merge
    MergeRun out;
    if (recipe.method == MergeMethod::mi_task_arithmetic) {
        std::map<std::string, double> weights;
        clock.run("weights", [&] {
            std::vector<std::pair<std::string, double>> magnitudes;
            magnitudes.reserve(task_count);
            for (std::size_t t = 0; t < task_count; ++t) {
                magnitudes.emplace_back(recipe.tasks[t].task_id, state[t].model_magnitude);
            }
            weights = merge_weights(magnitudes, recipe.tau2);
            report["weights"] = weights;
        });
        clock.run("merge", [&] {
            std::vector<std::pair<std::string, TensorMap>> deltas;
            deltas.reserve(task_count);
            for (std::size_t t = 0; t < task_count; ++t) {
                deltas.emplace_back(recipe.tasks[t].task_id, std::move(state[t].pruned));
            }
            out.merged = merge_models(base, deltas, weights);
        });
    } else {
        clock.run("merge", [&] {
            std::vector<TensorMap> deltas;
            deltas.reserve(task_count);
            for (std::size_t t = 0; t < task_count; ++t) {
                deltas.push_back(std::move(state[t].pruned));
            }
            out.merged = task_arithmetic(base, deltas, recipe.scale);
        });
    }

    report["timings_ms"] = std::move(timings);
    out.report = std::move(report);
    return out;
}

namespace detail {

inline std::optional<std::filesystem::path> opt_path(const nlohmann::json& j,
                                                     const char* key,
                                                     const std::string& context) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_string()) {
        throw FormatError(context + ": field '" + key + "' must be a string path");
    }
    return std::filesystem::path(j[key].get<std::string>());
}

} // namespace detail

inline MergeRecipe recipe_from_json(const nlohmann::json& j, const std::string& context) {
    if (!j.is_object() || !j.contains("base") || !j.contains("tasks")) {
        throw FormatError(context + ": recipe needs base and tasks fields");
    }
    MergeRecipe recipe;
    try {
        recipe.base = std::filesystem::path(j["base"].get<std::string>());
        if (!j["tasks"].is_array()) throw FormatError(context + ": tasks must be an array");
        for (const auto& tj : j["tasks"]) {
            if (!tj.is_object() || !tj.contains("task_id") || !tj.contains("fine")) {
                throw FormatError(context + ": every task needs task_id and fine fields");
            }
            RecipeTask task;
            task.task_id = tj["task_id"].get<std::string>();
            task.fine = std::filesystem::path(tj["fine"].get<std::string>());
            task.batch = detail::opt_path(tj, "batch", context);
            task.importance = detail::opt_path(tj, "importance", context);
            task.model_importance = detail::opt_path(tj, "model_importance", context);
            task.gradient = detail::opt_path(tj, "gradient", context);
            recipe.tasks.push_back(std::move(task));
        }
        if (j.contains("method")) recipe.method = parse_merge_method(j["method"].get<std::string>());
        if (j.contains("pruner")) recipe.pruner = parse_pruner(j["pruner"].get<std::string>());
        if (j.contains("provider")) {
            recipe.provider = parse_recipe_provider(j["provider"].get<std::string>());
        }
        if (j.contains("level")) {
            recipe.level = parse_partition_level(j["level"].get<std::string>());
        }
        recipe.schema = detail::opt_path(j, "schema", context);
        if (j.contains("lambda")) recipe.lambda = j["lambda"].get<double>();
        if (j.contains("epsilon")) recipe.epsilon = j["epsilon"].get<double>();
        if (j.contains("tau1")) recipe.tau1 = j["tau1"].get<double>();
        if (j.contains("tau2")) recipe.tau2 = j["tau2"].get<double>();
        if (j.contains("scale")) recipe.scale = j["scale"].get<double>();
        if (j.contains("seed")) recipe.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("evaluator")) recipe.evaluator = j["evaluator"].get<std::string>();
        recipe.ood_batch = detail::opt_path(j, "ood_batch", context);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(context + ": " + e.what());
    }
    return recipe;
}

inline nlohmann::json recipe_to_json(const MergeRecipe& recipe) {
    nlohmann::json j;
    j["version"] = 1;
    j["base"] = recipe.base.string();
    j["method"] = to_string(recipe.method);
    j["pruner"] = to_string(recipe.pruner);
    j["provider"] = to_string(recipe.provider);
    j["level"] = to_string(recipe.level);
    if (recipe.schema) j["schema"] = recipe.schema->string();
    j["lambda"] = recipe.lambda;
    j["epsilon"] = recipe.epsilon;
    j["tau1"] = recipe.tau1;
    j["tau2"] = recipe.tau2;
    j["scale"] = recipe.scale;
    j["seed"] = recipe.seed;
    j["evaluator"] = recipe.evaluator;
    if (recipe.ood_batch) j["ood_batch"] = recipe.ood_batch->string();
    j["tasks"] = nlohmann::json::array();
    for (const auto& task : recipe.tasks) {
        nlohmann::json tj;
        tj["task_id"] = task.task_id;
        tj["fine"] = task.fine.string();
        if (task.batch) tj["batch"] = task.batch->string();
        if (task.importance) tj["importance"] = task.importance->string();
        if (task.model_importance) tj["model_importance"] = task.model_importance->string();
        if (task.gradient) tj["gradient"] = task.gradient->string();
        j["tasks"].push_back(std::move(tj));
    }
    return j;
}

namespace detail {

inline void resolve_path(std::optional<std::filesystem::path>& path,
                         const std::filesystem::path& dir) {
    if (path && path->is_relative()) *path = dir / *path;
}

} // namespace detail

/// Loads a recipe. Relative paths inside it are resolved against the
/// directory containing the recipe file.
inline MergeRecipe load_recipe(const std::filesystem::path& path) {
    const std::string text = read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("recipe '" + path.string() + "' is not valid JSON: " + e.what());
    }
    MergeRecipe recipe = recipe_from_json(j, "recipe '" + path.string() + "'");
    const std::filesystem::path dir = path.parent_path();
    if (!dir.empty()) {
        if (recipe.base.is_relative()) recipe.base = dir / recipe.base;
        detail::resolve_path(recipe.schema, dir);
        detail::resolve_path(recipe.ood_batch, dir);
        for (auto& task : recipe.tasks) {
            if (task.fine.is_relative()) task.fine = dir / task.fine;
            detail::resolve_path(task.batch, dir);
            detail::resolve_path(task.importance, dir);
            detail::resolve_path(task.model_importance, dir);
            detail::resolve_path(task.gradient, dir);
        }
    }
    return recipe;
}

inline void save_recipe(const MergeRecipe& recipe, const std::filesystem::path& path) {
    atomic_write_file(path, recipe_to_json(recipe).dump(2) + "\n");
}

} // namespace apl
