// SPDX-License-Identifier: Apache-2.0
//
// apl: checkpoint deltas, importance tracing, calibrated pruning, weighted
// merging, and a synthetic-task laboratory behind one binary.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 I/O error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "apl/batch.hpp"
#include "apl/bench.hpp"
#include "apl/calibration.hpp"
#include "apl/checkpoint.hpp"
#include "apl/delta_ops.hpp"
#include "apl/errors.hpp"
#include "apl/importance.hpp"
#include "apl/log.hpp"
#include "apl/merge.hpp"
#include "apl/partition.hpp"
#include "apl/recipe.hpp"
#include "apl/tensor_map.hpp"
#include "apl/toy_data.hpp"
#include "apl/toy_lab.hpp"

namespace {

/// Flag combinations CLI11 cannot express; reported as usage errors (code 1).
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& message) : std::runtime_error(message) {}
};

apl::RecipeProvider provider_from_flag(const std::string& text) {
    return apl::parse_recipe_provider(text == "grad" ? "gradient" : text);
}

/// Schema from --schema when given, else the default cut at --level. When a
/// schema file is used its own level wins.
apl::PartitionSchema schema_for(const apl::TensorMap& reference,
                                const std::string& schema_path,
                                const std::string& level_text) {
    if (schema_path.empty()) {
        return apl::PartitionSchema::default_for(apl::parse_partition_level(level_text),
                                                 reference);
    }
    return apl::PartitionSchema::load(schema_path);
}

/// The one evaluator this binary ships: the toy laboratory net, with its
/// class count read off the reference checkpoint.
std::shared_ptr<apl::toy::ToyEvaluator> toy_evaluator_for(const apl::TensorMap& net) {
    return std::make_shared<apl::toy::ToyEvaluator>(apl::toy::infer_toy_spec(net).class_count);
}

// ---------------------------------------------------------------- delta ---

struct DeltaOpts {
    std::string base, fine, out;
};

void run_delta(const DeltaOpts& o) {
    apl::TensorMap base, fine;
    apl::run_stage("load", [&] {
        base = apl::load_checkpoint(o.base);
        fine = apl::load_checkpoint(o.fine);
    });
    const apl::TensorMap delta =
        apl::run_stage("delta", [&] { return apl::compute_delta(fine, base); });
    apl::run_stage("write", [&] { apl::save_checkpoint(delta, o.out); });
    apl::log::info("wrote delta of " + std::to_string(delta.total_elements()) +
                   " elements to " + o.out);
}

// ---------------------------------------------------------------- prune ---

struct PruneOpts {
    std::string base, fine, out;
    std::string method = "dare";
    std::string emit = "model";
    std::string schema, level = "layer";
    std::string importance;
    double ratio = 0.9;
    double epsilon = 0.01;
    double tau1 = 5.0;
    std::uint64_t seed = 0;
    unsigned threads = 0;
};

void run_prune(const PruneOpts& o) {
    const apl::PrunerKind pruner = apl::parse_pruner(o.method);
    const bool apl_method =
        pruner == apl::PrunerKind::apl_tanh || pruner == apl::PrunerKind::apl_linear;
    if (apl_method && o.importance.empty()) {
        throw UsageError("method '" + o.method + "' needs --importance");
    }

    apl::TensorMap base, fine;
    apl::run_stage("load", [&] {
        base = apl::load_checkpoint(o.base);
        fine = apl::load_checkpoint(o.fine);
    });
    const apl::TensorMap delta =
        apl::run_stage("delta", [&] { return apl::compute_delta(fine, base); });

    const auto partitions = apl::run_stage("partitions", [&] {
        const apl::PartitionSchema schema =
            apl_method ? schema_for(base, o.schema, o.level) : schema_for(base, "", "model");
        return apl::build_partitions(base, schema);
    });

    const auto ratios = apl::run_stage("calibration", [&] {
        std::map<std::string, double> out;
        if (!apl_method) {
            for (const auto& partition : partitions) out[partition.id] = o.ratio;
            return out;
        }
        const apl::ImportanceReport report = apl::load_importance(o.importance);
        if (pruner == apl::PrunerKind::apl_tanh) {
            apl::CalibrationConfig cfg;
            cfg.lambda = o.ratio;
            cfg.epsilon = o.epsilon;
            cfg.tau1 = o.tau1;
            return apl::tanh_drop_ratios(report, cfg);
        }
        return apl::linear_rank_drop_ratios(report, o.ratio, o.epsilon, &partitions);
    });

    const apl::DropMask mask = apl::run_stage("masks", [&] {
        const apl::MaskMode mode = pruner == apl::PrunerKind::magnitude
                                       ? apl::MaskMode::magnitude
                                       : apl::MaskMode::random;
        std::optional<std::uint64_t> seed;
        if (mode == apl::MaskMode::random) seed = o.seed;
        return apl::make_mask(delta, ratios, partitions, mode, seed, o.threads);
    });
    const apl::TensorMap pruned =
        apl::run_stage("prune", [&] { return apl::apply_mask_rescale(delta, mask); });

    apl::run_stage("write", [&] {
        apl::save_checkpoint(o.emit == "delta" ? pruned : apl::reconstruct(base, pruned),
                             o.out);
    });
    const double realized = mask.total_elements() == 0
                                ? 0.0
                                : static_cast<double>(mask.drop_count()) /
                                      static_cast<double>(mask.total_elements());
    apl::log::info("dropped " + std::to_string(mask.drop_count()) + " of " +
                   std::to_string(mask.total_elements()) + " delta elements (" +
                   std::to_string(realized) + ")");
}

// ----------------------------------------------------------- trace/grad ---

struct TraceOpts {
    std::string base, fine, batch, out;
    std::string schema, level = "layer";
    std::string gradient; // grad subcommand only
    unsigned threads = 0;
};

void run_trace(const TraceOpts& o) {
    apl::TensorMap base, fine;
    apl::FewShotBatch batch;
    apl::run_stage("load", [&] {
        base = apl::load_checkpoint(o.base);
        fine = apl::load_checkpoint(o.fine);
        batch = apl::load_batch(o.batch);
    });
    const apl::PartitionSchema schema = apl::run_stage(
        "partitions", [&] { return schema_for(base, o.schema, o.level); });
    const auto partitions = apl::run_stage(
        "partitions", [&] { return apl::build_partitions(base, schema); });
    const apl::ImportanceReport report = apl::run_stage("importance", [&] {
        return apl::causal_importance(*toy_evaluator_for(fine), fine, base, partitions,
                                      batch, schema.level, o.threads);
    });
    apl::run_stage("write", [&] { apl::save_importance(report, o.out); });
    apl::log::info("wrote causal importance for " + std::to_string(report.entries.size()) +
                   " partitions to " + o.out);
}

void run_grad(const TraceOpts& o) {
    if (o.batch.empty() && o.gradient.empty()) {
        throw UsageError("grad needs --batch or --gradient");
    }
    apl::TensorMap base, fine;
    std::optional<apl::FewShotBatch> batch;
    apl::run_stage("load", [&] {
        base = apl::load_checkpoint(o.base);
        fine = apl::load_checkpoint(o.fine);
        if (!o.batch.empty()) batch = apl::load_batch(o.batch);
    });
    const apl::TensorMap delta =
        apl::run_stage("delta", [&] { return apl::compute_delta(fine, base); });
    const apl::PartitionSchema schema = apl::run_stage(
        "partitions", [&] { return schema_for(base, o.schema, o.level); });
    const auto partitions = apl::run_stage(
        "partitions", [&] { return apl::build_partitions(base, schema); });
    const apl::ImportanceReport report = apl::run_stage("importance", [&] {
        const apl::TensorMap gradient =
            o.gradient.empty() ? toy_evaluator_for(base)->loss_gradient(base, *batch)
                               : apl::load_checkpoint(o.gradient);
        return apl::gradient_importance(delta, gradient, partitions, schema.level,
                                        batch ? batch->task_id : "",
                                        batch ? apl::batch_fingerprint(*batch) : "",
                                        o.threads);
    });
    apl::run_stage("write", [&] { apl::save_importance(report, o.out); });
    apl::log::info("wrote gradient importance for " +
                   std::to_string(report.entries.size()) + " partitions to " + o.out);
}

// ------------------------------------------------------------ calibrate ---

struct CalibrateOpts {
    std::string importance, out;
    std::string mode = "tanh";
    double ratio = 0.9;
    double epsilon = 0.01;
    double tau1 = 5.0;
};

void run_calibrate(const CalibrateOpts& o) {
    const apl::ImportanceReport report = apl::run_stage(
        "load", [&] { return apl::load_importance(o.importance); });
    const auto ratios = apl::run_stage("calibration", [&] {
        if (o.mode == "tanh") {
            apl::CalibrationConfig cfg;
            cfg.lambda = o.ratio;
            cfg.epsilon = o.epsilon;
            cfg.tau1 = o.tau1;
            return apl::tanh_drop_ratios(report, cfg);
        }
        return apl::linear_rank_drop_ratios(report, o.ratio, o.epsilon);
    });
    apl::run_stage("write", [&] {
        nlohmann::json j;
        j["version"] = 1;
        j["mode"] = o.mode;
        j["lambda"] = o.ratio;
        j["epsilon"] = o.epsilon;
        if (o.mode == "tanh") j["tau1"] = o.tau1;
        j["ratios"] = ratios;
        apl::atomic_write_file(o.out, j.dump(2) + "\n");
    });
    apl::log::info("wrote " + std::to_string(ratios.size()) + " drop ratios to " + o.out);
}

// ---------------------------------------------------------------- merge ---

struct MergeOpts {
    std::string recipe, out, report;
    std::string provider; // optional override
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;
};

void run_merge(const MergeOpts& o) {
    apl::MergeRecipe recipe =
        apl::run_stage("load", [&] { return apl::load_recipe(o.recipe); });
    if (!o.provider.empty()) recipe.provider = provider_from_flag(o.provider);
    if (o.seed) recipe.seed = *o.seed;
    recipe.validate();

    apl::EvaluatorRegistry registry;
    const bool needs_eval = [&] {
        if (!recipe.wants_partition_importance() && !recipe.wants_model_importance()) {
            return false;
        }
        if (recipe.provider == apl::RecipeProvider::causal) return true;
        if (recipe.provider != apl::RecipeProvider::gradient) return false;
        return std::any_of(recipe.tasks.begin(), recipe.tasks.end(),
                           [](const apl::RecipeTask& t) { return !t.gradient; });
    }();
    if (needs_eval) {
        apl::run_stage("load", [&] {
            registry["toy"] = toy_evaluator_for(apl::load_checkpoint(recipe.base));
        });
    }

    const apl::MergeRun run = apl::run_recipe(recipe, registry, o.threads);
    const std::string report_path = o.report.empty() ? o.out + ".report.json" : o.report;
    apl::run_stage("write", [&] {
        apl::save_checkpoint(run.merged, o.out);
        apl::atomic_write_file(report_path, run.report.dump(2) + "\n");
    });
    apl::log::info("wrote merged checkpoint to " + o.out + " and run report to " +
                   report_path);
}

// ------------------------------------------------------------ toy-train ---

struct ToyTrainOpts {
    std::string data, out, init, save_init;
    std::vector<std::size_t> hidden = {32, 32};
    std::size_t classes = 0; // 0 = infer from labels
    std::size_t epochs = 200;
    double lr = 0.3;
    std::uint64_t seed = 0;
    std::vector<std::string> freeze;
};

void run_toy_train(const ToyTrainOpts& o) {
    apl::FewShotBatch data;
    apl::TensorMap net;
    apl::toy::ToyNetSpec spec;
    apl::run_stage("load", [&] {
        data = apl::load_batch(o.data);
        if (!o.init.empty()) {
            net = apl::load_checkpoint(o.init);
            spec = apl::toy::infer_toy_spec(net);
            return;
        }
        spec.input_dim = data.input_dim();
        spec.hidden_dims = o.hidden;
        spec.class_count = o.classes;
        if (spec.class_count == 0) {
            int top = 0;
            for (int label : data.labels) top = std::max(top, label);
            spec.class_count = static_cast<std::size_t>(top) + 1;
        }
        spec.seed = o.seed;
        net = apl::toy::init_toy_net(spec);
    });
    if (!o.save_init.empty()) {
        apl::run_stage("write", [&] { apl::save_checkpoint(net, o.save_init); });
    }
    const apl::TensorMap trained =
        apl::toy::toy_train(net, spec, data, o.epochs, o.lr, o.freeze);
    apl::run_stage("write", [&] { apl::save_checkpoint(trained, o.out); });
    const apl::toy::EvalResult result = apl::toy::toy_evaluate(trained, spec, data);
    apl::log::info("trained " + std::to_string(o.epochs) + " epochs; training accuracy " +
                   std::to_string(result.accuracy));
}

// ------------------------------------------------------- toy-make-tasks ---

struct MakeTasksOpts {
    std::string out_dir;
    std::size_t count = 2;
    std::uint64_t seed = 0;
    bool with_mixture = false;
    std::size_t input_dim = 8;
    std::size_t classes = 4;
    double radius = 3.0;
    double noise = 0.6;
    std::size_t train = 512;
    std::size_t test = 1000;
    std::size_t fewshot = 64;
};

void run_make_tasks(const MakeTasksOpts& o) {
    apl::toy::SyntheticTaskSpec base_spec;
    base_spec.input_dim = o.input_dim;
    base_spec.class_count = o.classes;
    base_spec.cluster_radius = o.radius;
    base_spec.noise_sigma = o.noise;
    base_spec.train_size = o.train;
    base_spec.test_size = o.test;
    base_spec.fewshot_size = o.fewshot;

    const auto specs = apl::toy::make_tasks(o.count, base_spec, o.seed);

    const std::filesystem::path dir(o.out_dir);
    apl::run_stage("write", [&] {
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw apl::IoError("cannot create directory '" + dir.string() + "'");

        nlohmann::json manifest;
        manifest["version"] = 1;
        manifest["seed"] = o.seed;
        manifest["tasks"] = nlohmann::json::array();
        for (const auto& spec : specs) {
            const apl::toy::TaskData data = apl::toy::generate_task(spec);
            const std::string id = spec.task_id;
            apl::atomic_write_file(dir / (id + ".spec.json"),
                                   apl::toy::task_spec_to_json(spec).dump(2) + "\n");
            apl::save_batch(data.train, dir / (id + ".train.json"));
            apl::save_batch(data.test, dir / (id + ".test.json"));
            apl::save_batch(data.fewshot, dir / (id + ".fewshot.json"));
            manifest["tasks"].push_back({{"task_id", id},
                                         {"spec", id + ".spec.json"},
                                         {"train", id + ".train.json"},
                                         {"test", id + ".test.json"},
                                         {"fewshot", id + ".fewshot.json"}});
        }
        if (o.with_mixture) {
            const auto mixture = apl::toy::mixture_spec(base_spec, o.seed);
            const apl::toy::TaskData data = apl::toy::generate_task(mixture);
            apl::save_batch(data.fewshot, dir / "mixture.fewshot.json");
            manifest["mixture"] = "mixture.fewshot.json";
        }
        apl::atomic_write_file(dir / "manifest.json", manifest.dump(2) + "\n");
    });
    apl::log::info("wrote " + std::to_string(specs.size()) + " tasks to " + o.out_dir);
}

// ---------------------------------------------------------------- bench ---

struct BenchOpts {
    std::size_t tasks = 2;
    std::vector<double> ratios = {0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995};
    std::size_t seeds = 5;
    std::string csv;
    double epsilon = 0.01;
    std::uint64_t seed = 0;
    unsigned threads = 0;
    std::vector<std::size_t> hidden;
    std::size_t epochs = 0;
    double lr = 0.0;
    std::string level = "hidden";
    long long pretrain = -1;
};

void print_bench_summary(const apl::bench::BenchResult& result,
                         const std::vector<double>& ratios) {
    char line[160];
    std::printf("%8s  %12s  %12s  %12s\n", "ratio", "magnitude", "dare", "apl-linear");
    for (double ratio : ratios) {
        std::snprintf(line, sizeof(line), "%8g  %12.4f  %12.4f  %12.4f\n", ratio,
                      result.mean_accuracy("magnitude", ratio),
                      result.mean_accuracy("dare", ratio),
                      result.mean_accuracy("apl-linear", ratio));
        std::fputs(line, stdout);
    }
    for (const auto& [task, acc] : result.fine_accuracy) {
        std::printf("# fine %s %.4f\n", task.c_str(), acc);
    }
}

void run_bench_cmd(const BenchOpts& o) {
    apl::bench::BenchConfig cfg;
    cfg.task_count = o.tasks;
    cfg.ratios = o.ratios;
    cfg.seed_count = o.seeds;
    cfg.epsilon = o.epsilon;
    cfg.seed = o.seed;
    cfg.threads = o.threads;
    if (!o.hidden.empty()) cfg.net.hidden_dims = o.hidden;
    if (o.epochs != 0) cfg.epochs = o.epochs;
    if (o.lr != 0.0) cfg.step_size = o.lr;
    cfg.level = apl::parse_partition_level(o.level);
    if (o.pretrain >= 0) cfg.pretrain_epochs = static_cast<std::size_t>(o.pretrain);

    const apl::bench::BenchResult result =
        apl::run_stage("bench", [&] { return apl::bench::run_bench(cfg); });
    if (!o.csv.empty()) {
        apl::run_stage("write", [&] {
            apl::atomic_write_file(o.csv, apl::bench::bench_csv(result));
        });
        apl::log::info("wrote " + std::to_string(result.rows.size()) + " rows to " + o.csv);
    }
    print_bench_summary(result, cfg.ratios);
}

// --------------------------------------------------------------- report ---

struct ReportOpts {
    std::string csv, out;
};

void run_report(const ReportOpts& o) {
    const std::string text =
        apl::run_stage("load", [&] { return apl::read_file_bytes(o.csv); });

    std::vector<apl::bench::BenchRow> rows;
    std::map<std::string, double> fine;
    apl::run_stage("report", [&] {
        std::istringstream in(text);
        std::string line;
        if (!std::getline(in, line) ||
            line != std::string("# schema ") + apl::bench::kCsvSchema) {
            throw apl::FormatError("'" + o.csv + "' does not start with '# schema " +
                                   std::string(apl::bench::kCsvSchema) + "'");
        }
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (line.rfind("# fine ", 0) == 0) {
                std::istringstream f(line.substr(7));
                std::string task;
                double acc;
                if (f >> task >> acc) fine[task] = acc;
                continue;
            }
            if (line[0] == '#' || line.rfind("task,", 0) == 0) continue;
            std::istringstream r(line);
            apl::bench::BenchRow row;
            std::string field;
            try {
                std::getline(r, row.task, ',');
                std::getline(r, row.method, ',');
                std::getline(r, field, ',');
                row.ratio = std::stod(field);
                std::getline(r, field, ',');
                row.seed = std::stoull(field);
                std::getline(r, field, ',');
                row.accuracy = std::stod(field);
            } catch (const std::exception&) {
                throw apl::FormatError("'" + o.csv + "': malformed row '" + line + "'");
            }
            rows.push_back(std::move(row));
        }
        if (rows.empty()) throw apl::FormatError("'" + o.csv + "' has no data rows");
    });

    apl::bench::BenchResult result;
    result.rows = std::move(rows);
    result.fine_accuracy = fine;
    std::vector<double> ratios;
    for (const auto& row : result.rows) {
        if (std::find(ratios.begin(), ratios.end(), row.ratio) == ratios.end()) {
            ratios.push_back(row.ratio);
        }
    }
    std::sort(ratios.begin(), ratios.end());
    print_bench_summary(result, ratios);

    if (!o.out.empty()) {
        apl::run_stage("write", [&] {
            nlohmann::json j;
            j["version"] = 1;
            j["schema"] = apl::bench::kCsvSchema;
            for (double ratio : ratios) {
                char key[32];
                std::snprintf(key, sizeof(key), "%g", ratio);
                for (const char* method : apl::bench::kMethods) {
                    j["mean_accuracy"][method][key] = result.mean_accuracy(method, ratio);
                }
            }
            j["fine"] = result.fine_accuracy;
            apl::atomic_write_file(o.out, j.dump(2) + "\n");
        });
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"delta-parameter pruning and model merging toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "apl 1.0.0");

    DeltaOpts delta_opts;
    auto* delta = app.add_subcommand("delta", "Write fine - base as a delta checkpoint");
    delta->add_option("--base", delta_opts.base, "base checkpoint")->required();
    delta->add_option("--fine", delta_opts.fine, "fine-tuned checkpoint")->required();
    delta->add_option("--out", delta_opts.out, "output delta checkpoint")->required();

    PruneOpts prune_opts;
    auto* prune = app.add_subcommand("prune", "Drop and rescale delta parameters");
    prune->add_option("--base", prune_opts.base, "base checkpoint")->required();
    prune->add_option("--fine", prune_opts.fine, "fine-tuned checkpoint")->required();
    prune->add_option("--out", prune_opts.out, "output checkpoint")->required();
    prune->add_option("--method", prune_opts.method, "pruning method")
        ->check(CLI::IsMember({"dare", "magnitude", "apl-tanh", "apl-linear"}));
    prune->add_option("--emit", prune_opts.emit, "write the pruned model or its delta")
        ->check(CLI::IsMember({"model", "delta"}));
    prune->add_option("--ratio", prune_opts.ratio, "drop ratio lambda");
    prune->add_option("--epsilon", prune_opts.epsilon, "calibration half-width");
    prune->add_option("--tau1", prune_opts.tau1, "calibration temperature");
    prune->add_option("--seed", prune_opts.seed, "mask seed");
    prune->add_option("--schema", prune_opts.schema, "partition schema JSON");
    prune->add_option("--level", prune_opts.level, "partition level")
        ->check(CLI::IsMember({"model", "layer", "hidden"}));
    prune->add_option("--importance", prune_opts.importance,
                      "importance report (apl methods)");
    prune->add_option("--threads", prune_opts.threads, "worker cap");

    TraceOpts trace_opts;
    auto* trace = app.add_subcommand("trace", "Causal importance via partition swaps");
    trace->add_option("--base", trace_opts.base, "base checkpoint")->required();
    trace->add_option("--fine", trace_opts.fine, "fine-tuned checkpoint")->required();
    trace->add_option("--batch", trace_opts.batch, "few-shot batch JSON")->required();
    trace->add_option("--out", trace_opts.out, "output importance report")->required();
    trace->add_option("--schema", trace_opts.schema, "partition schema JSON");
    trace->add_option("--level", trace_opts.level, "partition level")
        ->check(CLI::IsMember({"model", "layer", "hidden"}));
    trace->add_option("--threads", trace_opts.threads, "worker cap");

    TraceOpts grad_opts;
    auto* grad = app.add_subcommand("grad", "Gradient-approximated importance");
    grad->add_option("--base", grad_opts.base, "base checkpoint")->required();
    grad->add_option("--fine", grad_opts.fine, "fine-tuned checkpoint")->required();
    grad->add_option("--batch", grad_opts.batch, "few-shot batch JSON");
    grad->add_option("--gradient", grad_opts.gradient,
                     "precomputed loss gradient checkpoint");
    grad->add_option("--out", grad_opts.out, "output importance report")->required();
    grad->add_option("--schema", grad_opts.schema, "partition schema JSON");
    grad->add_option("--level", grad_opts.level, "partition level")
        ->check(CLI::IsMember({"model", "layer", "hidden"}));
    grad->add_option("--threads", grad_opts.threads, "worker cap");

    CalibrateOpts calibrate_opts;
    auto* calibrate =
        app.add_subcommand("calibrate", "Importance report to per-partition drop ratios");
    calibrate->add_option("--importance", calibrate_opts.importance, "importance report")
        ->required();
    calibrate->add_option("--out", calibrate_opts.out, "output ratios JSON")->required();
    calibrate->add_option("--mode", calibrate_opts.mode, "calibration mode")
        ->check(CLI::IsMember({"tanh", "linear"}));
    calibrate->add_option("--ratio", calibrate_opts.ratio, "drop ratio lambda");
    calibrate->add_option("--epsilon", calibrate_opts.epsilon, "calibration half-width");
    calibrate->add_option("--tau1", calibrate_opts.tau1, "calibration temperature");

    MergeOpts merge_opts;
    std::uint64_t merge_seed = 0;
    auto* merge = app.add_subcommand("merge", "Run a merge recipe");
    merge->add_option("--recipe", merge_opts.recipe, "recipe JSON")->required();
    merge->add_option("--out", merge_opts.out, "merged checkpoint")->required();
    merge->add_option("--report", merge_opts.report,
                      "run report path (default: <out>.report.json)");
    merge->add_option("--provider", merge_opts.provider, "importance provider override")
        ->check(CLI::IsMember({"causal", "grad", "gradient", "file"}));
    auto* merge_seed_opt = merge->add_option("--seed", merge_seed, "recipe seed override");
    merge->add_option("--threads", merge_opts.threads, "worker cap");

    ToyTrainOpts train_opts;
    auto* toy_train = app.add_subcommand("toy-train", "Train a toy net on a batch");
    toy_train->add_option("--data", train_opts.data, "training batch JSON")->required();
    toy_train->add_option("--out", train_opts.out, "trained checkpoint")->required();
    toy_train->add_option("--init", train_opts.init, "start from this checkpoint");
    toy_train->add_option("--save-init", train_opts.save_init,
                          "also write the untrained starting checkpoint");
    toy_train->add_option("--hidden", train_opts.hidden, "hidden layer widths")
        ->delimiter(',');
    toy_train->add_option("--classes", train_opts.classes,
                          "class count (default: infer from labels)");
    toy_train->add_option("--epochs", train_opts.epochs, "training epochs");
    toy_train->add_option("--lr", train_opts.lr, "step size");
    toy_train->add_option("--seed", train_opts.seed, "init seed");
    toy_train->add_option("--freeze", train_opts.freeze,
                          "glob of tensors to keep at their initial values");

    MakeTasksOpts tasks_opts;
    auto* make_tasks = app.add_subcommand("toy-make-tasks",
                                          "Generate synthetic classification tasks");
    make_tasks->add_option("--out-dir", tasks_opts.out_dir, "output directory")->required();
    make_tasks->add_option("--count", tasks_opts.count, "number of tasks");
    make_tasks->add_option("--seed", tasks_opts.seed, "generation seed");
    make_tasks->add_flag("--with-mixture", tasks_opts.with_mixture,
                         "also write a mixed-angle few-shot batch");
    make_tasks->add_option("--input-dim", tasks_opts.input_dim, "input dimension");
    make_tasks->add_option("--classes", tasks_opts.classes, "class count");
    make_tasks->add_option("--radius", tasks_opts.radius, "cluster radius");
    make_tasks->add_option("--noise", tasks_opts.noise, "noise sigma");
    make_tasks->add_option("--train", tasks_opts.train, "train split size");
    make_tasks->add_option("--test", tasks_opts.test, "test split size");
    make_tasks->add_option("--fewshot", tasks_opts.fewshot, "few-shot split size");

    BenchOpts bench_opts;
    auto* bench = app.add_subcommand(
        "bench", "Magnitude vs dare vs apl-linear over a drop-ratio sweep");
    bench->add_option("--tasks", bench_opts.tasks, "number of toy tasks");
    bench->add_option("--ratios", bench_opts.ratios, "drop ratios")->delimiter(',');
    bench->add_option("--seeds", bench_opts.seeds, "mask seeds per cell");
    bench->add_option("--csv", bench_opts.csv, "output CSV path");
    bench->add_option("--epsilon", bench_opts.epsilon, "apl-linear half-width");
    bench->add_option("--seed", bench_opts.seed, "world seed");
    bench->add_option("--threads", bench_opts.threads, "worker cap");
    bench->add_option("--hidden", bench_opts.hidden, "hidden layer widths")
        ->delimiter(',');
    bench->add_option("--epochs", bench_opts.epochs, "training epochs");
    bench->add_option("--lr", bench_opts.lr, "step size");
    bench->add_option("--level", bench_opts.level, "apl-linear partition level")
        ->check(CLI::IsMember({"model", "layer", "hidden"}));
    bench->add_option("--pretrain-epochs", bench_opts.pretrain,
                      "base training epochs on the task mixture (0 = raw init)");

    ReportOpts report_opts;
    auto* report = app.add_subcommand("report", "Summarize a bench CSV");
    report->add_option("--csv", report_opts.csv, "bench CSV")->required();
    report->add_option("--out", report_opts.out, "also write a JSON summary");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (app.got_subcommand(delta)) {
            run_delta(delta_opts);
        } else if (app.got_subcommand(prune)) {
            run_prune(prune_opts);
        } else if (app.got_subcommand(trace)) {
            run_trace(trace_opts);
        } else if (app.got_subcommand(grad)) {
            run_grad(grad_opts);
        } else if (app.got_subcommand(calibrate)) {
            run_calibrate(calibrate_opts);
        } else if (app.got_subcommand(merge)) {
            if (merge_seed_opt->count() > 0) merge_opts.seed = merge_seed;
            run_merge(merge_opts);
        } else if (app.got_subcommand(toy_train)) {
            run_toy_train(train_opts);
        } else if (app.got_subcommand(make_tasks)) {
            run_make_tasks(tasks_opts);
        } else if (app.got_subcommand(bench)) {
            run_bench_cmd(bench_opts);
        } else if (app.got_subcommand(report)) {
            run_report(report_opts);
        }
    } catch (const UsageError& e) {
        std::cerr << "apl: usage error: " << e.what() << '\n';
        return 1;
    } catch (const apl::Error& e) {
        std::cerr << "apl: error: " << e.what() << '\n';
        return e.kind() == apl::ErrorKind::io ? 3 : 2;
    } catch (const std::exception& e) {
        std::cerr << "apl: error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
