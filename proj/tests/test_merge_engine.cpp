// SPDX-License-Identifier: Apache-2.0
// Merge reductions and the recipe runner.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "apl/checkpoint.hpp"
#include "apl/delta_ops.hpp"
#include "apl/merge.hpp"
#include "apl/recipe.hpp"
#include "apl/toy_data.hpp"
#include "apl/toy_lab.hpp"
#include "test_util.hpp"

using test_util::TempDir;

namespace {

apl::TensorMap single(const std::string& name, std::vector<std::size_t> shape,
                      std::vector<double> values) {
    apl::TensorMap map;
    map.set(name, apl::DenseTensor(std::move(shape), std::move(values)));
    return map;
}

/// Worst elementwise difference, relative for large values and absolute
/// near zero (all toy values are order one).
double max_rel_diff(const apl::TensorMap& a, const apl::TensorMap& b) {
    double worst = 0.0;
    for (const auto& [name, at] : a) {
        const auto& av = at.values();
        const auto& bv = b.at(name).values();
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double denom = std::max({std::abs(av[i]), std::abs(bv[i]), 1.0});
            worst = std::max(worst, std::abs(av[i] - bv[i]) / denom);
        }
    }
    return worst;
}

} // namespace

TEST_CASE("merge_models handles single-task and hand-worked cases") {
    SECTION("one task with weight 1 reproduces the fine model bit for bit") {
        const apl::TensorMap base = test_util::random_f32_map(51);
        apl::TensorMap fine;
        for (const auto& [name, t] : base) {
            std::vector<double> v = t.values();
            // Same binade as base so base + (fine - base) is exact.
            for (auto& x : v) x = static_cast<double>(static_cast<float>(x * 1.5));
            fine.set(name, apl::DenseTensor(t.shape(), std::move(v)));
        }
        const apl::TensorMap delta = apl::compute_delta(fine, base);
        const apl::TensorMap merged =
            apl::merge_models(base, {{"only", delta}}, {{"only", 1.0}});
        CHECK(apl::bits_equal(merged, apl::reconstruct(base, delta)));
    }

    SECTION("two tasks, exactly representable arithmetic") {
        const apl::TensorMap base = single("w", {2}, {1.0, 2.0});
        const apl::TensorMap da = single("w", {2}, {1.0, 0.0});
        const apl::TensorMap db = single("w", {2}, {3.0, 2.0});
        const apl::TensorMap merged =
            apl::merge_models(base, {{"a", da}, {"b", db}}, {{"a", 0.25}, {"b", 0.75}});
        // 0.25 * [2, 2] + 0.75 * [4, 4] = [3.5, 3.5], exact in binary.
        CHECK(merged.at("w").values()[0] == 3.5);
        CHECK(merged.at("w").values()[1] == 3.5);
    }

    SECTION("matches base + sum of weighted deltas when weights sum to 1") {
        const apl::TensorMap base = test_util::random_f32_map(52);
        apl::TensorMap da = test_util::random_f32_map(53);
        apl::TensorMap db = test_util::random_f32_map(54);
        const double wa = 0.3125, wb = 0.6875;
        const apl::TensorMap merged =
            apl::merge_models(base, {{"a", da}, {"b", db}}, {{"a", wa}, {"b", wb}});
        apl::TensorMap expect;
        for (const auto& [name, t] : base) {
            std::vector<double> v(t.size());
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] = t.values()[i] + wa * da.at(name).values()[i] +
                       wb * db.at(name).values()[i];
            }
            expect.set(name, apl::DenseTensor(t.shape(), std::move(v)));
        }
        CHECK(max_rel_diff(merged, expect) < 1e-6);
    }

    SECTION("rejects missing, unknown, and misaligned inputs") {
        const apl::TensorMap base = single("w", {2}, {1.0, 2.0});
        const apl::TensorMap d = single("w", {2}, {0.5, 0.5});
        CHECK_THROWS_AS(apl::merge_models(base, {}, {}), apl::ValidationError);
        CHECK_THROWS_AS(apl::merge_models(base, {{"a", d}}, {{"b", 1.0}}),
                        apl::ValidationError);
        CHECK_THROWS_AS(
            apl::merge_models(base, {{"a", d}}, {{"a", 0.5}, {"ghost", 0.5}}),
            apl::ValidationError);
        const apl::TensorMap bad = single("w", {3}, {0.0, 0.0, 0.0});
        CHECK_THROWS_AS(apl::merge_models(base, {{"a", bad}}, {{"a", 1.0}}),
                        apl::AlignmentError);
    }
}

TEST_CASE("task_arithmetic scaling and accumulation") {
    const apl::TensorMap base = single("w", {1}, {1.0});

    SECTION("scale zero returns the base bit for bit") {
        const apl::TensorMap d = single("w", {1}, {123.456});
        const apl::TensorMap out = apl::task_arithmetic(base, {d}, 0.0);
        CHECK(apl::bits_equal(out, base));
    }

    SECTION("one delta at scale one reproduces the fine model") {
        const apl::TensorMap b = test_util::random_f32_map(61);
        apl::TensorMap f = test_util::random_f32_map(61);
        for (const auto& [name, t] : b) {
            std::vector<double> v = t.values();
            for (auto& x : v) x = static_cast<double>(static_cast<float>(x * 1.25));
            f.set(name, apl::DenseTensor(t.shape(), std::move(v)));
        }
        const apl::TensorMap d = apl::compute_delta(f, b);
        CHECK(apl::bits_equal(apl::task_arithmetic(b, {d}, 1.0), apl::reconstruct(b, d)));
    }

    SECTION("hand-worked two-delta sum") {
        const apl::TensorMap da = single("w", {1}, {0.5});
        const apl::TensorMap db = single("w", {1}, {0.25});
        const apl::TensorMap out = apl::task_arithmetic(base, {da, db}, 2.0);
        CHECK(out.at("w").values()[0] == 2.5);
    }

    SECTION("compensated accumulation keeps sub-ulp contributions") {
        const apl::TensorMap zero = single("w", {1}, {0.0});
        std::vector<apl::TensorMap> deltas;
        deltas.push_back(single("w", {1}, {1.0}));
        const double tiny = std::ldexp(1.0, -53);
        for (int i = 0; i < 8; ++i) deltas.push_back(single("w", {1}, {tiny}));
        const apl::TensorMap out = apl::task_arithmetic(zero, deltas, 1.0);
        // Naive left-to-right addition would round every 2^-53 away.
        CHECK(out.at("w").values()[0] == 1.0 + std::ldexp(1.0, -50));
    }

    SECTION("rejects empty and misaligned deltas") {
        CHECK_THROWS_AS(apl::task_arithmetic(base, {}, 1.0), apl::ValidationError);
        const apl::TensorMap bad = single("w", {2}, {0.0, 0.0});
        CHECK_THROWS_AS(apl::task_arithmetic(base, {bad}, 1.0), apl::AlignmentError);
    }
}

TEST_CASE("task_mask_seed separates tasks and reruns identically") {
    CHECK(apl::task_mask_seed(7, "alpha") == apl::task_mask_seed(7, "alpha"));
    CHECK(apl::task_mask_seed(7, "alpha") != apl::task_mask_seed(7, "beta"));
    CHECK(apl::task_mask_seed(7, "alpha") != apl::task_mask_seed(8, "alpha"));
}

TEST_CASE("recipe validation catches contradictory configurations") {
    const auto task = [](const std::string& id) {
        apl::RecipeTask t;
        t.task_id = id;
        t.fine = "fine_" + id + ".st";
        t.batch = "batch_" + id + ".json";
        return t;
    };
    apl::MergeRecipe good;
    good.base = "base.st";
    good.tasks = {task("a"), task("b")};
    CHECK_NOTHROW(good.validate());

    SECTION("structural holes") {
        apl::MergeRecipe r = good;
        r.base.clear();
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r = good;
        r.tasks.clear();
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r = good;
        r.tasks[1].task_id = "a";
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r = good;
        r.tasks[0].fine.clear();
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r = good;
        r.scale = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
    }

    SECTION("calibration bounds apply to the activated pruners") {
        apl::MergeRecipe r = good;
        r.lambda = 0.995;
        r.epsilon = 0.01; // would clamp above 1
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r.pruner = apl::PrunerKind::dare; // epsilon unused there
        CHECK_NOTHROW(r.validate());
        r.lambda = 1.0;
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
    }

    SECTION("merge temperature must stay positive for weighted merges") {
        apl::MergeRecipe r = good;
        r.pruner = apl::PrunerKind::dare;
        r.tau2 = 0.0;
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r.method = apl::MergeMethod::task_arithmetic;
        CHECK_NOTHROW(r.validate());
    }

    SECTION("shared ood batch excludes per-task batches and file provider") {
        apl::MergeRecipe r = good;
        r.ood_batch = "shared.json";
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r.tasks[0].batch.reset();
        r.tasks[1].batch.reset();
        CHECK_NOTHROW(r.validate());
        r.provider = apl::RecipeProvider::file;
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r.provider = apl::RecipeProvider::causal;
        r.pruner = apl::PrunerKind::none;
        r.method = apl::MergeMethod::task_arithmetic;
        CHECK_THROWS_AS(r.validate(), apl::ConfigError); // nothing uses it
    }

    SECTION("file provider needs the report paths") {
        apl::MergeRecipe r = good;
        r.provider = apl::RecipeProvider::file;
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r.tasks[0].importance = "imp_a.json";
        r.tasks[1].importance = "imp_b.json";
        CHECK_THROWS_AS(r.validate(), apl::ConfigError); // still no model reports
        r.tasks[0].model_importance = "mi_a.json";
        r.tasks[1].model_importance = "mi_b.json";
        CHECK_NOTHROW(r.validate());
    }

    SECTION("computed providers need a batch unless a gradient file stands in") {
        apl::MergeRecipe r = good;
        r.tasks[0].batch.reset();
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r.provider = apl::RecipeProvider::gradient;
        CHECK_THROWS_AS(r.validate(), apl::ConfigError);
        r.tasks[0].gradient = "grad_a.st";
        CHECK_NOTHROW(r.validate());
    }

    SECTION("plain task arithmetic without pruning needs no batches at all") {
        apl::MergeRecipe r = good;
        r.method = apl::MergeMethod::task_arithmetic;
        r.pruner = apl::PrunerKind::none;
        r.tasks[0].batch.reset();
        r.tasks[1].batch.reset();
        CHECK_NOTHROW(r.validate());
    }
}

TEST_CASE("recipe JSON round-trips and resolves relative paths") {
    apl::MergeRecipe recipe;
    recipe.base = "models/base.st";
    recipe.method = apl::MergeMethod::task_arithmetic;
    recipe.pruner = apl::PrunerKind::apl_linear;
    recipe.provider = apl::RecipeProvider::gradient;
    recipe.level = apl::PartitionLevel::hidden;
    recipe.schema = "schema.json";
    recipe.lambda = 0.8;
    recipe.epsilon = 0.05;
    recipe.tau1 = 2.0;
    recipe.tau2 = 3.0;
    recipe.scale = 0.5;
    recipe.seed = 99;
    apl::RecipeTask t;
    t.task_id = "a";
    t.fine = "models/fine_a.st";
    t.batch = "batches/a.json";
    t.gradient = "grads/a.st";
    recipe.tasks = {t};

    SECTION("field-faithful round-trip") {
        const apl::MergeRecipe back =
            apl::recipe_from_json(apl::recipe_to_json(recipe), "test");
        CHECK(back.base == recipe.base);
        CHECK(back.method == recipe.method);
        CHECK(back.pruner == recipe.pruner);
        CHECK(back.provider == recipe.provider);
        CHECK(back.level == recipe.level);
        REQUIRE(back.schema.has_value());
        CHECK(*back.schema == *recipe.schema);
        CHECK(back.lambda == recipe.lambda);
        CHECK(back.epsilon == recipe.epsilon);
        CHECK(back.tau1 == recipe.tau1);
        CHECK(back.tau2 == recipe.tau2);
        CHECK(back.scale == recipe.scale);
        CHECK(back.seed == recipe.seed);
        REQUIRE(back.tasks.size() == 1);
        CHECK(back.tasks[0].task_id == "a");
        CHECK(back.tasks[0].fine == t.fine);
        REQUIRE(back.tasks[0].batch.has_value());
        CHECK(*back.tasks[0].batch == *t.batch);
        REQUIRE(back.tasks[0].gradient.has_value());
        CHECK(*back.tasks[0].gradient == *t.gradient);
        CHECK_FALSE(back.tasks[0].importance.has_value());
    }

    SECTION("relative paths resolve against the recipe directory") {
        TempDir dir("recipe_paths");
        apl::save_recipe(recipe, dir.path("recipe.json"));
        const apl::MergeRecipe loaded = apl::load_recipe(dir.path("recipe.json"));
        CHECK(loaded.base == dir.path("models/base.st"));
        CHECK(loaded.tasks[0].fine == dir.path("models/fine_a.st"));
        CHECK(*loaded.tasks[0].batch == dir.path("batches/a.json"));
        CHECK(*loaded.schema == dir.path("schema.json"));
    }

    SECTION("malformed recipes are rejected with context") {
        CHECK_THROWS_AS(apl::recipe_from_json(nlohmann::json::array(), "test"),
                        apl::FormatError);
        nlohmann::json j = apl::recipe_to_json(recipe);
        j.erase("base");
        CHECK_THROWS_AS(apl::recipe_from_json(j, "test"), apl::FormatError);
        j = apl::recipe_to_json(recipe);
        j["method"] = "fisher";
        CHECK_THROWS_AS(apl::recipe_from_json(j, "test"), apl::ConfigError);
        j = apl::recipe_to_json(recipe);
        j["tasks"] = {{{"fine", "x.st"}}};
        CHECK_THROWS_AS(apl::recipe_from_json(j, "test"), apl::FormatError);
    }
}

namespace {

/// Base net plus two fine-tunes on rotated variants of one synthetic task,
/// everything saved to disk like a real run would see it.
struct MergeWorld {
    TempDir dir{"merge_world"};
    apl::toy::ToyNetSpec spec;
    apl::toy::TaskData task_a;
    apl::toy::TaskData task_b;
    apl::TensorMap base;
    apl::TensorMap fine_a;
    apl::TensorMap fine_b;
    apl::EvaluatorRegistry registry;

    MergeWorld() {
        spec.input_dim = 8;
        spec.hidden_dims = {16};
        spec.class_count = 4;
        spec.seed = 21;
        const apl::TensorMap init = apl::toy::init_toy_net(spec);

        apl::toy::SyntheticTaskSpec sa;
        sa.task_id = "alpha";
        sa.train_size = 96;
        sa.test_size = 300;
        sa.fewshot_size = 32;
        sa.noise_sigma = 0.5;
        sa.seed = 303;
        apl::toy::SyntheticTaskSpec sb = sa;
        sb.task_id = "beta";
        sb.rotation_deg = 90.0;
        sb.seed = 404;
        task_a = apl::toy::generate_task(sa);
        task_b = apl::toy::generate_task(sb);

        const apl::TensorMap trained_a = apl::toy::toy_train(init, spec, task_a.train, 150, 0.4);
        const apl::TensorMap trained_b = apl::toy::toy_train(init, spec, task_b.train, 150, 0.4);

        apl::save_checkpoint(init, dir.path("base.st"));
        apl::save_checkpoint(trained_a, dir.path("fine_a.st"));
        apl::save_checkpoint(trained_b, dir.path("fine_b.st"));
        apl::save_batch(task_a.fewshot, dir.path("batch_a.json"));
        apl::save_batch(task_b.fewshot, dir.path("batch_b.json"));

        base = apl::load_checkpoint(dir.path("base.st"));
        fine_a = apl::load_checkpoint(dir.path("fine_a.st"));
        fine_b = apl::load_checkpoint(dir.path("fine_b.st"));
        registry["toy"] = std::make_shared<apl::toy::ToyEvaluator>(4);
    }

    apl::MergeRecipe two_task_recipe() const {
        apl::MergeRecipe r;
        r.base = dir.path("base.st");
        apl::RecipeTask a;
        a.task_id = "alpha";
        a.fine = dir.path("fine_a.st");
        a.batch = dir.path("batch_a.json");
        apl::RecipeTask b;
        b.task_id = "beta";
        b.fine = dir.path("fine_b.st");
        b.batch = dir.path("batch_b.json");
        r.tasks = {a, b};
        r.seed = 17;
        return r;
    }

    double accuracy(const apl::TensorMap& net, const apl::FewShotBatch& batch) const {
        return apl::toy::toy_evaluate(net, apl::toy::infer_toy_spec(net), batch).accuracy;
    }
};

} // namespace

TEST_CASE("run_recipe end to end on trained toy checkpoints") {
    static const MergeWorld world;

    SECTION("no pruning, one task, scale one reproduces the fine checkpoint") {
        apl::MergeRecipe r = world.two_task_recipe();
        r.tasks.resize(1);
        r.method = apl::MergeMethod::task_arithmetic;
        r.pruner = apl::PrunerKind::none;
        r.scale = 1.0;
        const apl::MergeRun run = apl::run_recipe(r, world.registry);
        TempDir out("merge_identity");
        apl::save_checkpoint(run.merged, out.path("merged.st"));
        CHECK(apl::bits_equal(apl::load_checkpoint(out.path("merged.st")), world.fine_a));
        CHECK(run.report["method"] == "task-arithmetic");
        CHECK(run.report["pruner"] == "none");
        CHECK_FALSE(run.report.contains("weights"));
    }

    SECTION("scale half over two tasks equals the plain parameter average") {
        apl::MergeRecipe r = world.two_task_recipe();
        r.method = apl::MergeMethod::task_arithmetic;
        r.pruner = apl::PrunerKind::none;
        r.scale = 0.5;
        const apl::MergeRun run = apl::run_recipe(r, world.registry);
        apl::TensorMap mean;
        for (const auto& [name, t] : world.fine_a) {
            std::vector<double> v(t.size());
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] = 0.5 * (t.values()[i] + world.fine_b.at(name).values()[i]);
            }
            mean.set(name, apl::DenseTensor(t.shape(), std::move(v)));
        }
        CHECK(max_rel_diff(run.merged, mean) < 1e-9);
    }

    SECTION("weighted two-task merge with calibrated pruning helps both tasks") {
        apl::MergeRecipe r = world.two_task_recipe();
        r.method = apl::MergeMethod::mi_task_arithmetic;
        r.pruner = apl::PrunerKind::apl_tanh;
        r.lambda = 0.5;
        r.epsilon = 0.05;
        const apl::MergeRun run = apl::run_recipe(r, world.registry);

        double weight_sum = 0.0;
        for (const auto& [id, w] : run.report["weights"].items()) {
            weight_sum += w.get<double>();
        }
        CHECK(std::abs(weight_sum - 1.0) < 1e-12);

        for (const auto& [id, ratios] : run.report["nominal_ratios"].items()) {
            for (const auto& [pid, ratio] : ratios.items()) {
                CHECK(ratio.get<double>() >= r.lambda - r.epsilon - 1e-12);
                CHECK(ratio.get<double>() <= r.lambda + r.epsilon + 1e-12);
            }
        }

        const apl::ImportanceReport rep = apl::importance_from_json(
            run.report["importance"]["alpha"], "report");
        CHECK(rep.task_id == "alpha");
        CHECK_FALSE(rep.entries.empty());

        const double base_a = world.accuracy(world.base, world.task_a.test);
        const double base_b = world.accuracy(world.base, world.task_b.test);
        const double merged_a = world.accuracy(run.merged, world.task_a.test);
        const double merged_b = world.accuracy(run.merged, world.task_b.test);
        CHECK(merged_a > base_a);
        CHECK(merged_b > base_b);
        CHECK(merged_a >= 0.5);
        CHECK(merged_b >= 0.5);
    }

    SECTION("identical recipes give byte-identical checkpoints and reports") {
        apl::MergeRecipe r = world.two_task_recipe();
        r.pruner = apl::PrunerKind::apl_linear;
        r.lambda = 0.6;
        r.epsilon = 0.02;
        const apl::MergeRun one = apl::run_recipe(r, world.registry, 1);
        const apl::MergeRun two = apl::run_recipe(r, world.registry, 4);
        CHECK(apl::bits_equal(one.merged, two.merged));

        nlohmann::json ra = one.report;
        nlohmann::json rb = two.report;
        ra.erase("timings_ms");
        rb.erase("timings_ms");
        CHECK(ra == rb);

        TempDir out("merge_determinism");
        apl::save_checkpoint(one.merged, out.path("one.st"));
        apl::save_checkpoint(two.merged, out.path("two.st"));
        CHECK(apl::read_file_bytes(out.path("one.st")) ==
              apl::read_file_bytes(out.path("two.st")));
    }

    SECTION("per-task masks come from the documented seed split") {
        apl::MergeRecipe r = world.two_task_recipe();
        r.method = apl::MergeMethod::task_arithmetic;
        r.pruner = apl::PrunerKind::dare;
        r.lambda = 0.5;
        r.scale = 1.0;
        const apl::MergeRun run = apl::run_recipe(r, world.registry);

        const apl::TensorMap delta_a = apl::compute_delta(world.fine_a, world.base);
        const auto partitions = apl::build_partitions(
            world.base,
            apl::PartitionSchema::default_for(apl::PartitionLevel::model, world.base));
        const apl::DropMask mask = apl::make_mask(
            delta_a, {{"model", 0.5}}, partitions, apl::MaskMode::random,
            apl::task_mask_seed(r.seed, "alpha"));
        CHECK(run.report["realized_drop"]["alpha"]["model"].get<double>() ==
              mask.realized_drop().at("model"));
        CHECK(run.report["realized_drop"]["alpha"] != run.report["realized_drop"]["beta"]);
    }

    SECTION("shared out-of-distribution batch scores every task once") {
        apl::MergeRecipe r = world.two_task_recipe();
        r.method = apl::MergeMethod::mi_task_arithmetic;
        r.pruner = apl::PrunerKind::none;
        r.tasks[0].batch.reset();
        r.tasks[1].batch.reset();
        r.ood_batch = world.dir.path("batch_a.json");
        const apl::MergeRun run = apl::run_recipe(r, world.registry);
        const std::string fp_a =
            run.report["model_importance"]["alpha"]["batch_fingerprint"];
        const std::string fp_b =
            run.report["model_importance"]["beta"]["batch_fingerprint"];
        CHECK(fp_a == fp_b);
        CHECK(fp_a == apl::batch_fingerprint(world.task_a.fewshot));
    }

    SECTION("file provider replays saved reports to the same merged bytes") {
        apl::MergeRecipe live = world.two_task_recipe();
        live.method = apl::MergeMethod::mi_task_arithmetic;
        live.pruner = apl::PrunerKind::apl_linear;
        live.lambda = 0.5;
        live.epsilon = 0.05;
        const apl::MergeRun from_live = apl::run_recipe(live, world.registry);

        TempDir out("merge_file_provider");
        const auto partitions = apl::build_partitions(
            world.base,
            apl::PartitionSchema::default_for(apl::PartitionLevel::layer, world.base));
        const auto model_partitions = apl::build_partitions(
            world.base,
            apl::PartitionSchema::default_for(apl::PartitionLevel::model, world.base));
        const apl::toy::ToyEvaluator eval(4);
        const struct {
            const char* id;
            const apl::TensorMap* fine;
            const apl::FewShotBatch* batch;
        } tasks[] = {{"alpha", &world.fine_a, &world.task_a.fewshot},
                     {"beta", &world.fine_b, &world.task_b.fewshot}};
        for (const auto& t : tasks) {
            apl::save_importance(
                apl::causal_importance(eval, *t.fine, world.base, partitions, *t.batch),
                out.path(std::string("imp_") + t.id + ".json"));
            apl::save_importance(
                apl::causal_importance(eval, *t.fine, world.base, model_partitions,
                                       *t.batch, apl::PartitionLevel::model),
                out.path(std::string("mi_") + t.id + ".json"));
        }

        apl::MergeRecipe replay = live;
        replay.provider = apl::RecipeProvider::file;
        replay.tasks[0].batch.reset();
        replay.tasks[1].batch.reset();
        replay.tasks[0].importance = out.path("imp_alpha.json");
        replay.tasks[0].model_importance = out.path("mi_alpha.json");
        replay.tasks[1].importance = out.path("imp_beta.json");
        replay.tasks[1].model_importance = out.path("mi_beta.json");
        const apl::MergeRun from_files = apl::run_recipe(replay, apl::EvaluatorRegistry{});
        CHECK(apl::bits_equal(from_files.merged, from_live.merged));
    }

    SECTION("gradient checkpoints stand in for batches under the gradient provider") {
        const apl::toy::ToyEvaluator eval(4);
        TempDir out("merge_grad_files");
        apl::save_checkpoint(eval.loss_gradient(world.base, world.task_a.fewshot),
                             out.path("grad_a.st"));
        apl::save_checkpoint(eval.loss_gradient(world.base, world.task_b.fewshot),
                             out.path("grad_b.st"));

        apl::MergeRecipe live = world.two_task_recipe();
        live.provider = apl::RecipeProvider::gradient;
        live.pruner = apl::PrunerKind::apl_tanh;
        live.lambda = 0.5;
        live.epsilon = 0.05;
        const apl::MergeRun from_eval = apl::run_recipe(live, world.registry);

        apl::MergeRecipe filed = live;
        filed.tasks[0].batch.reset();
        filed.tasks[1].batch.reset();
        filed.tasks[0].gradient = out.path("grad_a.st");
        filed.tasks[1].gradient = out.path("grad_b.st");
        const apl::MergeRun from_files = apl::run_recipe(filed, apl::EvaluatorRegistry{});

        // The gradient survives its f32 round-trip only approximately, so
        // compare weights rather than bytes.
        for (const auto& [id, w] : from_eval.report["weights"].items()) {
            CHECK(from_files.report["weights"][id].get<double>() ==
                  Catch::Approx(w.get<double>()).margin(1e-4));
        }
    }

    SECTION("failures carry the stage they happened in") {
        apl::MergeRecipe r = world.two_task_recipe();
        r.base = world.dir.path("missing.st");
        try {
            apl::run_recipe(r, world.registry);
            FAIL("expected a stage error");
        } catch (const apl::StageError& e) {
            CHECK(e.stage() == "load");
            CHECK(e.kind() == apl::ErrorKind::io);
        }

        r = world.two_task_recipe();
        r.schema = world.dir.path("missing_schema.json");
        try {
            apl::run_recipe(r, world.registry);
            FAIL("expected a stage error");
        } catch (const apl::StageError& e) {
            CHECK(e.stage() == "partitions");
        }

        r = world.two_task_recipe();
        const apl::EvaluatorRegistry empty;
        try {
            apl::run_recipe(r, empty);
            FAIL("expected a stage error");
        } catch (const apl::StageError& e) {
            CHECK(e.stage() == "importance");
            CHECK(e.kind() == apl::ErrorKind::data);
        }
    }
}
