// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "apl/rng.hpp"
#include "apl/tensor_map.hpp"

namespace test_util {

/// Random tensor whose doubles are exactly representable as f32, so
/// checkpoint round-trips are bit-exact.
inline apl::DenseTensor random_f32_tensor(std::vector<std::size_t> shape,
                                          std::uint64_t seed,
                                          const std::string& stream,
                                          double scale = 1.0) {
    apl::CounterRng rng(seed, stream);
    const std::size_t n = apl::DenseTensor::checked_element_count(shape);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double raw = (rng.uniform_at(i) * 2.0 - 1.0) * scale;
        values[i] = static_cast<double>(static_cast<float>(raw));
    }
    return apl::DenseTensor(std::move(shape), std::move(values));
}

inline apl::TensorMap random_f32_map(std::uint64_t seed) {
    apl::TensorMap map;
    map.set("layer1.bias", random_f32_tensor({4}, seed, "layer1.bias"));
    map.set("layer1.weight", random_f32_tensor({4, 3}, seed, "layer1.weight"));
    map.set("layer2.bias", random_f32_tensor({2}, seed, "layer2.bias"));
    map.set("layer2.weight", random_f32_tensor({2, 4}, seed, "layer2.weight"));
    return map;
}

/// Spearman rank correlation with average ranks on ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const std::size_t n = ra.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0 || vb == 0) return 0.0;
    return cov / std::sqrt(va * vb);
}

/// Worst per-tensor normwise disagreement ||a - n|| / (||a|| + ||n||)
/// between two aligned gradient maps.
inline double grad_agreement(const apl::TensorMap& analytic, const apl::TensorMap& numeric) {
    double worst = 0.0;
    for (const auto& [name, at] : analytic) {
        const auto& nv = numeric.at(name).values();
        const auto& av = at.values();
        double diff2 = 0, a2 = 0, n2 = 0;
        for (std::size_t i = 0; i < av.size(); ++i) {
            diff2 += (av[i] - nv[i]) * (av[i] - nv[i]);
            a2 += av[i] * av[i];
            n2 += nv[i] * nv[i];
        }
        const double denom = std::sqrt(a2) + std::sqrt(n2);
        if (denom > 0) worst = std::max(worst, std::sqrt(diff2) / denom);
    }
    return worst;
}

/// Unique scratch directory under the system temp dir, created fresh.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        base_ = std::filesystem::temp_directory_path() /
                ("apl_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(base_);
        std::filesystem::create_directories(base_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(base_, ec);
    }
    std::filesystem::path path(const std::string& name) const { return base_ / name; }
    const std::filesystem::path& root() const { return base_; }

private:
    std::filesystem::path base_;
};

} // namespace test_util
