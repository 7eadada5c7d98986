// SPDX-License-Identifier: Apache-2.0
//
// Few-shot evaluation batches: the small labeled sample importance scoring
// runs on. Serialized as JSON {version, task_id, inputs: [[...]], labels}.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "apl/checkpoint.hpp"
#include "apl/errors.hpp"
#include "apl/rng.hpp"

namespace apl {

struct FewShotBatch {
    std::string task_id;
    std::vector<std::vector<double>> inputs;
    std::vector<int> labels;

    std::size_t size() const { return inputs.size(); }

    std::size_t input_dim() const { return inputs.empty() ? 0 : inputs.front().size(); }

    void validate() const {
        if (inputs.empty()) throw ValidationError("batch '" + task_id + "' is empty");
        if (labels.size() != inputs.size()) {
            throw ValidationError("batch '" + task_id + "' has " +
                                  std::to_string(inputs.size()) + " inputs but " +
                                  std::to_string(labels.size()) + " labels");
        }
        const std::size_t width = inputs.front().size();
        if (width == 0) throw ValidationError("batch '" + task_id + "' has zero-width inputs");
        for (const auto& row : inputs) {
            if (row.size() != width) {
                throw ValidationError("batch '" + task_id + "' has ragged input rows");
            }
        }
        for (int label : labels) {
            if (label < 0) throw ValidationError("batch '" + task_id + "' has a negative label");
        }
    }
};

/// Stable 64-bit digest of the batch contents, stored in importance reports
/// so a report can be matched to the data that produced it.
inline std::string batch_fingerprint(const FewShotBatch& batch) {
    std::uint64_t h = fnv1a64(batch.task_id);
    const auto mix_u64 = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& row : batch.inputs) {
        for (double v : row) mix_u64(std::bit_cast<std::uint64_t>(v));
    }
    for (int label : batch.labels) mix_u64(static_cast<std::uint64_t>(label));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

inline nlohmann::json batch_to_json(const FewShotBatch& batch) {
    return {{"version", 1},
            {"task_id", batch.task_id},
            {"inputs", batch.inputs},
            {"labels", batch.labels}};
}

inline FewShotBatch batch_from_json(const nlohmann::json& j, const std::string& context) {
    if (!j.is_object() || !j.contains("inputs") || !j.contains("labels")) {
        throw FormatError(context + ": batch needs inputs and labels fields");
    }
    FewShotBatch batch;
    try {
        if (j.contains("task_id")) batch.task_id = j["task_id"].get<std::string>();
        batch.inputs = j["inputs"].get<std::vector<std::vector<double>>>();
        batch.labels = j["labels"].get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(context + ": " + e.what());
    }
    try {
        batch.validate();
    } catch (const Error& e) {
        throw FormatError(context + ": " + e.what());
    }
    return batch;
}

inline FewShotBatch load_batch(const std::filesystem::path& path) {
    const std::string text = read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("batch '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return batch_from_json(j, "batch '" + path.string() + "'");
}

inline void save_batch(const FewShotBatch& batch, const std::filesystem::path& path) {
    atomic_write_file(path, batch_to_json(batch).dump() + "\n");
}

} // namespace apl
