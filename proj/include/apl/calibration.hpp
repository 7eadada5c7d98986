// SPDX-License-Identifier: Apache-2.0
//
// Drop-ratio calibration and merge weights. The tanh variant nudges each
// partition's ratio by beta = tanh(s / tau1), clamped to [lambda - eps,
// lambda + eps]. The linear-rank variant spreads ratios evenly over that
// interval by importance rank. Merge weights are a softmax of model-level
// importance magnitudes over temperature tau2.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "apl/errors.hpp"
#include "apl/importance.hpp"
#include "apl/log.hpp"
#include "apl/partition.hpp"

namespace apl {

struct CalibrationConfig {
    double lambda = 0.9;
    double epsilon = 0.01;
    double tau1 = 5.0;
    double tau2 = 5.0;

    void validate() const {
        if (!(lambda >= 0.0) || !(lambda < 1.0)) {
            throw ConfigError("base drop ratio " + std::to_string(lambda) +
                              " is outside [0, 1)");
        }
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
        if (lambda - epsilon < 0.0) {
            throw ConfigError("lambda - epsilon = " + std::to_string(lambda - epsilon) +
                              " is negative");
        }
        if (lambda + epsilon >= 1.0) {
            throw ConfigError("lambda + epsilon = " + std::to_string(lambda + epsilon) +
                              " is not below 1");
        }
        if (!(tau1 > 0.0) || !(tau2 > 0.0)) throw ConfigError("temperatures must be positive");
    }
};

/// beta_p = tanh(s_p / tau1); lambda*_p = lambda - eps if beta < -eps,
/// lambda + beta if |beta| <= eps, lambda + eps if beta > eps. Residual
/// partitions keep the base ratio.
inline std::map<std::string, double> tanh_drop_ratios(const ImportanceReport& report,
                                                      const CalibrationConfig& cfg) {
    cfg.validate();
    if (report.entries.empty()) throw ValidationError("importance report has no entries");
    std::map<std::string, double> out;
    for (const auto& entry : report.entries) {
        double ratio;
        if (entry.id == kResidualId) {
            ratio = cfg.lambda;
        } else {
            const double beta = std::tanh(entry.score / cfg.tau1);
            if (beta < -cfg.epsilon) {
                ratio = cfg.lambda - cfg.epsilon;
            } else if (beta > cfg.epsilon) {
                ratio = cfg.lambda + cfg.epsilon;
            } else {
                ratio = cfg.lambda + beta;
            }
        }
        if (!out.emplace(entry.id, ratio).second) {
            throw ValidationError("duplicate partition id '" + entry.id + "' in report");
        }
    }
    return out;
}

/// Ranks partitions by importance magnitude descending (ties by id) and
/// assigns lambda* = lambda - eps + 2 eps (r-1)/(L-1), so the most important
/// partition is pruned least and the mean ratio stays exactly lambda.
/// `partitions` is optional; when given, unequal element counts draw a
/// warning because only equal counts keep the expected kept-parameter total
/// at the uniform-lambda value.
inline std::map<std::string, double> linear_rank_drop_ratios(
    const ImportanceReport& report, double lambda, double epsilon,
    const std::vector<Partition>* partitions = nullptr) {
    CalibrationConfig cfg;
    cfg.lambda = lambda;
    cfg.epsilon = epsilon;
    cfg.validate();
    if (report.entries.empty()) throw ValidationError("importance report has no entries");

    if (partitions != nullptr) {
        std::size_t reference = 0;
        bool first = true;
        for (const auto& p : *partitions) {
            if (p.residual) continue;
            if (first) {
                reference = p.element_count;
                first = false;
            } else if (p.element_count != reference) {
                log::warn("partitions have unequal element counts; linear-rank calibration "
                          "no longer preserves the expected kept-parameter total");
                break;
            }
        }
    }

    std::map<std::string, double> out;
    std::vector<const ImportanceEntry*> ranked;
    for (const auto& entry : report.entries) {
        if (out.count(entry.id)) {
            throw ValidationError("duplicate partition id '" + entry.id + "' in report");
        }
        if (entry.id == kResidualId) {
            out[entry.id] = lambda;
        } else {
            out[entry.id] = lambda; // placeholder, overwritten below
            ranked.push_back(&entry);
        }
    }
    std::sort(ranked.begin(), ranked.end(), [](const ImportanceEntry* a, const ImportanceEntry* b) {
        if (a->magnitude != b->magnitude) return a->magnitude > b->magnitude;
        return a->id < b->id;
    });
    const std::size_t L = ranked.size();
    for (std::size_t r = 0; r < L; ++r) {
        out[ranked[r]->id] =
            L <= 1 ? lambda
                   : lambda - epsilon + 2.0 * epsilon * static_cast<double>(r) /
                                            static_cast<double>(L - 1);
    }
    return out;
}

/// w_t = exp(iota_t / tau2) / sum_u exp(iota_u / tau2), computed with the
/// max subtracted so large magnitudes cannot overflow.
inline std::map<std::string, double> merge_weights(
    const std::vector<std::pair<std::string, double>>& model_magnitudes, double tau2) {
    if (model_magnitudes.empty()) throw ValidationError("merge_weights needs at least one model");
    if (!(tau2 > 0.0)) throw ConfigError("temperature must be positive");
    double top = model_magnitudes.front().second;
    for (const auto& [id, m] : model_magnitudes) top = std::max(top, m);
    double total = 0.0;
    std::map<std::string, double> out;
    for (const auto& [id, m] : model_magnitudes) {
        const double e = std::exp((m - top) / tau2);
        if (!out.emplace(id, e).second) {
            throw ValidationError("duplicate task id '" + id + "' in merge weights");
        }
        total += e;
    }
    for (auto& [id, w] : out) w /= total;
    return out;
}

} // namespace apl
