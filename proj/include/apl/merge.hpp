// SPDX-License-Identifier: Apache-2.0
//
// Weight-space merging. The reduction over tasks runs in task order with
// compensated (Kahan) accumulation, so results are bit-identical across
// runs and thread counts.

#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "apl/errors.hpp"
#include "apl/tensor_map.hpp"

namespace apl {

namespace detail {

struct Kahan {
    double sum = 0.0;
    double carry = 0.0;

    void add(double v) {
        const double y = v - carry;
        const double t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
};

} // namespace detail

/// Model-importance-directed merge: theta = sum_t w_t (base + delta_t),
/// element-wise in task order.
inline TensorMap merge_models(const TensorMap& base,
                              const std::vector<std::pair<std::string, TensorMap>>& deltas,
                              const std::map<std::string, double>& weights) {
    if (deltas.empty()) throw ValidationError("merge needs at least one task delta");
    for (const auto& [task_id, delta] : deltas) {
        base.require_aligned(delta, "merge task '" + task_id + "'");
        if (!weights.count(task_id)) {
            throw ValidationError("no merge weight for task '" + task_id + "'");
        }
    }
    if (weights.size() != deltas.size()) {
        for (const auto& [task_id, w] : weights) {
            const bool known = std::any_of(deltas.begin(), deltas.end(),
                                           [&](const auto& d) { return d.first == task_id; });
            if (!known) throw ValidationError("merge weight for unknown task '" + task_id + "'");
        }
    }

    TensorMap out;
    for (const auto& [name, bt] : base) {
        const auto& bv = bt.values();
        std::vector<const std::vector<double>*> dv;
        std::vector<double> w;
        dv.reserve(deltas.size());
        w.reserve(deltas.size());
        for (const auto& [task_id, delta] : deltas) {
            dv.push_back(&delta.at(name).values());
            w.push_back(weights.at(task_id));
        }
        std::vector<double> values(bt.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            detail::Kahan acc;
            for (std::size_t t = 0; t < dv.size(); ++t) {
                acc.add(w[t] * (bv[i] + (*dv[t])[i]));
            }
            values[i] = acc.sum;
        }
        out.set(name, DenseTensor(bt.shape(), std::move(values)));
    }
    return out;
}

/// theta = base + scale * sum_t delta_t.
inline TensorMap task_arithmetic(const TensorMap& base, const std::vector<TensorMap>& deltas,
                                 double scale) {
    if (deltas.empty()) throw ValidationError("task arithmetic needs at least one delta");
    for (const auto& delta : deltas) base.require_aligned(delta, "task_arithmetic");

    TensorMap out;
    for (const auto& [name, bt] : base) {
        const auto& bv = bt.values();
        std::vector<const std::vector<double>*> dv;
        dv.reserve(deltas.size());
        for (const auto& delta : deltas) dv.push_back(&delta.at(name).values());
        std::vector<double> values(bt.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            detail::Kahan acc;
            for (const auto* d : dv) acc.add((*d)[i]);
            values[i] = bv[i] + scale * acc.sum;
        }
        out.set(name, DenseTensor(bt.shape(), std::move(values)));
    }
    return out;
}

} // namespace apl
