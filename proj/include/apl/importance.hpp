// SPDX-License-Identifier: Apache-2.0
//
// Per-partition parameter importance. Two providers share one report shape:
//   causal    s = P* - P   (corrupted minus clean true-label probability)
//   gradient  s = -|delta . grad L|
// Both store magnitude iota = max(-s, 0), so more important partitions have
// larger iota under either provider and one calibration formula serves both.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "apl/batch.hpp"
#include "apl/checkpoint.hpp"
#include "apl/delta_ops.hpp"
#include "apl/errors.hpp"
#include "apl/parallel.hpp"
#include "apl/partition.hpp"
#include "apl/tensor_map.hpp"

namespace apl {

struct Score {
    double probability = 0.0; // mean true-label probability over the batch
    double loss = 0.0;        // mean cross-entropy over the same batch
};

/// A model scorer. Implementations must be pure: the same model and batch
/// always give the same score.
class Evaluator {
public:
    virtual ~Evaluator() = default;
    virtual Score score(const TensorMap& model, const FewShotBatch& batch) const = 0;
    virtual std::size_t class_count() const = 0;
};

/// An evaluator that can also differentiate its loss.
class GradientEvaluator : public Evaluator {
public:
    virtual TensorMap loss_gradient(const TensorMap& model, const FewShotBatch& batch) const = 0;
};

enum class ImportanceProvider { causal, gradient };

inline std::string to_string(ImportanceProvider provider) {
    return provider == ImportanceProvider::causal ? "causal" : "gradient";
}

inline ImportanceProvider parse_importance_provider(const std::string& text) {
    if (text == "causal") return ImportanceProvider::causal;
    if (text == "gradient") return ImportanceProvider::gradient;
    throw ConfigError("unknown importance provider '" + text + "'");
}

struct ImportanceEntry {
    std::string id;
    double score = 0.0;     // signed s
    double magnitude = 0.0; // iota = max(-s, 0)
};

struct ImportanceReport {
    PartitionLevel level = PartitionLevel::model;
    std::string task_id;
    ImportanceProvider provider = ImportanceProvider::causal;
    std::string batch_fingerprint;
    std::vector<ImportanceEntry> entries; // partition order

    const ImportanceEntry* find(const std::string& id) const {
        for (const auto& e : entries) {
            if (e.id == id) return &e;
        }
        return nullptr;
    }
};

/// Signed inner product sum_{i in partition} delta[i] * gradient[i], in
/// ascending (member, flat index) order.
inline double partition_inner_product(const TensorMap& delta, const TensorMap& gradient,
                                      const Partition& partition) {
    delta.require_aligned(gradient, "partition_inner_product");
    double sum = 0.0;
    for (const auto& member : partition.members) {
        if (!delta.contains(member.tensor)) {
            throw SchemaError("partition '" + partition.id + "' references unknown tensor '" +
                              member.tensor + "'");
        }
        const DenseTensor& d = delta.at(member.tensor);
        const DenseTensor& g = gradient.at(member.tensor);
        detail::check_member_bounds(member, d, partition.id);
        detail::for_each_slice_index(d.shape(), member.ranges, [&](std::size_t i) {
            sum += d.values()[i] * g.values()[i];
        });
    }
    return sum;
}

/// One clean run on the fine model, then one corrupted run per partition
/// with that partition's parameters replaced by base. Residual partitions
/// are never corrupted and score 0.
inline ImportanceReport causal_importance(const Evaluator& evaluator, const TensorMap& fine,
                                          const TensorMap& base,
                                          const std::vector<Partition>& partitions,
                                          const FewShotBatch& batch,
                                          PartitionLevel level = PartitionLevel::layer,
                                          unsigned threads = 0) {
    batch.validate();
    fine.require_aligned(base, "causal_importance");
    if (partitions.empty()) throw ValidationError("causal_importance needs partitions");

    const double clean = evaluator.score(fine, batch).probability;

    ImportanceReport report;
    report.level = level;
    report.task_id = batch.task_id;
    report.provider = ImportanceProvider::causal;
    report.batch_fingerprint = apl::batch_fingerprint(batch);
    report.entries.resize(partitions.size());

    parallel_for(partitions.size(), threads, [&](std::size_t p) {
        ImportanceEntry entry;
        entry.id = partitions[p].id;
        if (partitions[p].residual || partitions[p].members.empty()) {
            entry.score = 0.0;
        } else {
            const TensorMap corrupted = substitute(fine, base, partitions[p]);
            entry.score = evaluator.score(corrupted, batch).probability - clean;
        }
        entry.magnitude = std::max(-entry.score, 0.0);
        report.entries[p] = std::move(entry);
    });
    return report;
}

/// First-order proxy: iota_p = |sum_{i in p} delta[i] grad[i]|, s_p = -iota_p.
/// The gradient is L's gradient at the base parameters on the task batch.
inline ImportanceReport gradient_importance(const TensorMap& delta,
                                            const TensorMap& base_gradient,
                                            const std::vector<Partition>& partitions,
                                            PartitionLevel level = PartitionLevel::layer,
                                            const std::string& task_id = "",
                                            const std::string& fingerprint = "",
                                            unsigned threads = 0) {
    delta.require_aligned(base_gradient, "gradient_importance");
    if (partitions.empty()) throw ValidationError("gradient_importance needs partitions");

    ImportanceReport report;
    report.level = level;
    report.task_id = task_id;
    report.provider = ImportanceProvider::gradient;
    report.batch_fingerprint = fingerprint;
    report.entries.resize(partitions.size());

    parallel_for(partitions.size(), threads, [&](std::size_t p) {
        ImportanceEntry entry;
        entry.id = partitions[p].id;
        if (partitions[p].residual) {
            entry.score = 0.0;
            entry.magnitude = 0.0;
        } else {
            entry.magnitude = std::abs(partition_inner_product(delta, base_gradient, partitions[p]));
            entry.score = -entry.magnitude;
        }
        report.entries[p] = std::move(entry);
    });
    return report;
}

/// |sum_i M[i] delta[i] grad[i]|: the first-order prediction of the loss gap
/// between the fine model and its pruned-unrescaled counterpart.
inline double taylor_gap(const TensorMap& delta, const DropMask& mask,
                         const TensorMap& base_gradient) {
    delta.require_aligned(base_gradient, "taylor_gap");
    double sum = 0.0;
    for (const auto& [name, tensor] : delta) {
        const auto it = mask.bits.find(name);
        if (it == mask.bits.end() || it->second.size() != tensor.size()) {
            throw AlignmentError("mask is not aligned with delta on tensor '" + name + "'");
        }
        const auto& bits = it->second;
        const auto& dv = tensor.values();
        const auto& gv = base_gradient.at(name).values();
        for (std::size_t i = 0; i < dv.size(); ++i) {
            if (bits[i]) sum += dv[i] * gv[i];
        }
    }
    return std::abs(sum);
}

inline nlohmann::json importance_to_json(const ImportanceReport& report) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : report.entries) {
        entries.push_back({{"id", e.id}, {"score", e.score}, {"magnitude", e.magnitude}});
    }
    return {{"version", 1},
            {"task_id", report.task_id},
            {"level", to_string(report.level)},
            {"provider", to_string(report.provider)},
            {"batch_fingerprint", report.batch_fingerprint},
            {"entries", std::move(entries)}};
}

inline ImportanceReport importance_from_json(const nlohmann::json& j,
                                             const std::string& context) {
    const auto fail = [&](const std::string& msg) -> void {
        throw FormatError(context + ": " + msg);
    };
    if (!j.is_object()) fail("importance report must be a JSON object");
    for (const char* field : {"level", "provider", "entries"}) {
        if (!j.contains(field)) fail(std::string("missing field '") + field + "'");
    }
    ImportanceReport report;
    try {
        report.level = parse_partition_level(j["level"].get<std::string>());
        report.provider = parse_importance_provider(j["provider"].get<std::string>());
        if (j.contains("task_id")) report.task_id = j["task_id"].get<std::string>();
        if (j.contains("batch_fingerprint")) {
            report.batch_fingerprint = j["batch_fingerprint"].get<std::string>();
        }
        for (const auto& je : j["entries"]) {
            ImportanceEntry entry;
            entry.id = je.at("id").get<std::string>();
            entry.score = je.at("score").get<double>();
            entry.magnitude = je.at("magnitude").get<double>();
            report.entries.push_back(std::move(entry));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(e.what());
    } catch (const Error& e) {
        fail(e.what());
    }
    return report;
}

inline ImportanceReport load_importance(const std::filesystem::path& path) {
    const std::string text = read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("report '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return importance_from_json(j, "report '" + path.string() + "'");
}

inline void save_importance(const ImportanceReport& report, const std::filesystem::path& path) {
    atomic_write_file(path, importance_to_json(report).dump(2) + "\n");
}

} // namespace apl
