// SPDX-License-Identifier: Apache-2.0
// Pruning-comparison sweep: row contract, CSV schema, determinism.

#include <catch2/catch_amalgamated.hpp>

#include <sstream>
#include <string>

#include "apl/bench.hpp"

namespace {

apl::bench::BenchConfig tiny_config() {
    apl::bench::BenchConfig cfg;
    cfg.task_count = 2;
    cfg.ratios = {0.5, 0.9};
    cfg.seed_count = 2;
    cfg.seed = 11;
    cfg.net.hidden_dims = {12};
    cfg.task_base.train_size = 64;
    cfg.task_base.test_size = 120;
    cfg.task_base.fewshot_size = 24;
    cfg.epochs = 60;
    cfg.step_size = 0.4;
    return cfg;
}

} // namespace

TEST_CASE("bench emits one row per task, ratio, seed, and method") {
    const apl::bench::BenchResult result = apl::bench::run_bench(tiny_config());
    REQUIRE(result.rows.size() == 2 * 2 * 2 * 3);

    const auto& first = result.rows.front();
    CHECK(first.task == "task1");
    CHECK(first.method == "magnitude");
    CHECK(first.ratio == 0.5);
    CHECK(first.seed == 0);
    CHECK(result.rows[1].method == "dare");
    CHECK(result.rows[2].method == "apl-linear");
    CHECK(result.rows[3].seed == 1);
    CHECK(result.rows.back().task == "task2");
    CHECK(result.rows.back().ratio == 0.9);

    for (const auto& row : result.rows) {
        CHECK(row.accuracy >= 0.0);
        CHECK(row.accuracy <= 1.0);
    }
    REQUIRE(result.fine_accuracy.count("task1") == 1);
    REQUIRE(result.fine_accuracy.count("task2") == 1);
    CHECK(result.fine_accuracy.at("task1") >= 0.5);
    CHECK(result.fine_accuracy.at("task2") >= 0.5);
}

TEST_CASE("bench reruns are bit-identical and magnitude ignores the seed index") {
    const auto cfg = tiny_config();
    const apl::bench::BenchResult a = apl::bench::run_bench(cfg);
    const apl::bench::BenchResult b = apl::bench::run_bench(cfg);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].accuracy == b.rows[i].accuracy);
    }

    double magnitude_seed0 = -1.0, magnitude_seed1 = -2.0;
    double dare_seed0 = -1.0, dare_seed1 = -1.0;
    for (const auto& row : a.rows) {
        if (row.task != "task1" || row.ratio != 0.9) continue;
        if (row.method == "magnitude") {
            (row.seed == 0 ? magnitude_seed0 : magnitude_seed1) = row.accuracy;
        } else if (row.method == "dare") {
            (row.seed == 0 ? dare_seed0 : dare_seed1) = row.accuracy;
        }
    }
    CHECK(magnitude_seed0 == magnitude_seed1);
    // Different seed indices draw different dare masks; on a 12-unit net at
    // ratio 0.9 the two accuracies land apart for this frozen seed.
    CHECK(dare_seed0 != dare_seed1);
}

TEST_CASE("bench mean helper averages exactly the matching rows") {
    const apl::bench::BenchResult result = apl::bench::run_bench(tiny_config());
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& row : result.rows) {
        if (row.method == "dare" && row.ratio == 0.5) {
            sum += row.accuracy;
            ++n;
        }
    }
    REQUIRE(n == 4); // 2 tasks x 2 seeds
    CHECK(result.mean_accuracy("dare", 0.5) == sum / 4.0);
    CHECK_THROWS_AS(result.mean_accuracy("fisher", 0.5), apl::ValidationError);
    CHECK_THROWS_AS(result.mean_accuracy("task9", "dare", 0.5), apl::ValidationError);
}

TEST_CASE("bench CSV carries the schema tag, header, and all rows") {
    const apl::bench::BenchResult result = apl::bench::run_bench(tiny_config());
    const std::string csv = apl::bench::bench_csv(result);
    std::istringstream in(csv);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "# schema apl.bench.v1");
    std::size_t comments = 0, data = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.rfind("# fine ", 0) == 0) {
            ++comments;
        } else if (line == "task,method,ratio,seed,accuracy") {
            header_seen = true;
        } else if (!line.empty()) {
            ++data;
        }
    }
    CHECK(header_seen);
    CHECK(comments == 2);
    CHECK(data == result.rows.size());
    CHECK(csv.find("task1,magnitude,0.5,0,") != std::string::npos);
    CHECK(csv.find("task2,apl-linear,0.9,1,") != std::string::npos);
}

TEST_CASE("bench rejects out-of-range configurations") {
    apl::bench::BenchConfig cfg = tiny_config();
    cfg.ratios = {1.0};
    CHECK_THROWS_AS(apl::bench::run_bench(cfg), apl::ConfigError);
    cfg = tiny_config();
    cfg.seed_count = 0;
    CHECK_THROWS_AS(apl::bench::run_bench(cfg), apl::ConfigError);
    cfg = tiny_config();
    cfg.task_count = 0;
    CHECK_THROWS_AS(apl::bench::run_bench(cfg), apl::ConfigError);
    cfg = tiny_config();
    cfg.epsilon = 0.0;
    CHECK_THROWS_AS(apl::bench::run_bench(cfg), apl::ConfigError);
}
