// SPDX-License-Identifier: Apache-2.0
//
// Delta parameters and drop-mask pruning. A delta map is fine - base,
// element-wise. Masks drop elements per partition, either Bernoulli(lambda*)
// with a counter-based generator keyed by (seed, tensor name, flat index) so
// any parallel schedule produces the same bits, or by smallest |delta|
// magnitude. Survivors are rescaled by 1/(1 - lambda*) using the nominal
// ratio recorded at sampling time, not the realized fraction.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "apl/errors.hpp"
#include "apl/parallel.hpp"
#include "apl/partition.hpp"
#include "apl/rng.hpp"
#include "apl/tensor_map.hpp"

namespace apl {

enum class MaskMode { random, magnitude };

inline std::string to_string(MaskMode mode) {
    return mode == MaskMode::random ? "random" : "magnitude";
}

struct DropMask {
    std::map<std::string, std::vector<std::uint8_t>> bits; // 1 = drop
    std::vector<Partition> partitions;
    std::map<std::string, double> nominal_ratios; // partition id -> lambda*
    std::optional<std::uint64_t> seed;
    MaskMode mode = MaskMode::random;
    std::shared_ptr<const RegionIndex> regions;

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, b] : bits) n += b.size();
        return n;
    }

    std::size_t drop_count() const {
        std::size_t n = 0;
        for (const auto& [name, b] : bits) {
            for (std::uint8_t v : b) n += v;
        }
        return n;
    }

    /// Realized drop fraction per partition id.
    std::map<std::string, double> realized_drop() const {
        std::vector<std::size_t> dropped(partitions.size(), 0);
        for (const auto& [name, b] : bits) {
            const auto& owners = regions->owners(name);
            for (std::size_t i = 0; i < b.size(); ++i) {
                if (b[i]) ++dropped[owners[i]];
            }
        }
        std::map<std::string, double> out;
        for (std::size_t p = 0; p < partitions.size(); ++p) {
            const std::size_t n = partitions[p].element_count;
            out[partitions[p].id] =
                n == 0 ? 0.0 : static_cast<double>(dropped[p]) / static_cast<double>(n);
        }
        return out;
    }
};

inline TensorMap compute_delta(const TensorMap& fine, const TensorMap& base) {
    fine.require_aligned(base, "compute_delta");
    TensorMap out;
    for (const auto& [name, ft] : fine) {
        const auto& bv = base.at(name).values();
        std::vector<double> values(ft.size());
        for (std::size_t i = 0; i < values.size(); ++i) values[i] = ft.values()[i] - bv[i];
        out.set(name, DenseTensor(ft.shape(), std::move(values)));
    }
    return out;
}

inline TensorMap reconstruct(const TensorMap& base, const TensorMap& delta) {
    base.require_aligned(delta, "reconstruct");
    TensorMap out;
    for (const auto& [name, bt] : base) {
        const auto& dv = delta.at(name).values();
        std::vector<double> values(bt.size());
        for (std::size_t i = 0; i < values.size(); ++i) values[i] = bt.values()[i] + dv[i];
        out.set(name, DenseTensor(bt.shape(), std::move(values)));
    }
    return out;
}

inline DropMask make_mask(const TensorMap& delta, const std::map<std::string, double>& ratios,
                          const std::vector<Partition>& partitions, MaskMode mode,
                          std::optional<std::uint64_t> seed = std::nullopt,
                          unsigned threads = 0) {
    if (delta.empty() || delta.total_elements() == 0) {
        throw ValidationError("cannot mask an empty delta map");
    }
    for (const auto& partition : partitions) {
        const auto it = ratios.find(partition.id);
        if (it == ratios.end()) {
            throw ValidationError("no drop ratio supplied for partition '" + partition.id + "'");
        }
        if (!(it->second >= 0.0) || !(it->second < 1.0)) {
            throw ValidationError("drop ratio " + std::to_string(it->second) +
                                  " for partition '" + partition.id +
                                  "' is outside [0, 1)");
        }
    }
    for (const auto& [id, ratio] : ratios) {
        const bool known = std::any_of(partitions.begin(), partitions.end(),
                                       [&](const Partition& p) { return p.id == id; });
        if (!known) throw ValidationError("drop ratio supplied for unknown partition '" + id + "'");
    }
    if (mode == MaskMode::random && !seed.has_value()) {
        throw ValidationError("random masks require a seed");
    }

    DropMask mask;
    mask.partitions = partitions;
    mask.nominal_ratios = ratios;
    mask.mode = mode;
    mask.seed = mode == MaskMode::random ? seed : std::nullopt;
    mask.regions = std::make_shared<RegionIndex>(delta, partitions, true);

    std::vector<double> ratio_of(partitions.size());
    for (std::size_t p = 0; p < partitions.size(); ++p) {
        ratio_of[p] = ratios.at(partitions[p].id);
    }

    for (const auto& [name, tensor] : delta) {
        mask.bits.emplace(name, std::vector<std::uint8_t>(tensor.size(), 0));
    }

    if (mode == MaskMode::random) {
        for (const auto& [name, tensor] : delta) {
            auto& bits = mask.bits.at(name);
            const auto& owners = mask.regions->owners(name);
            const CounterRng rng(*seed, name);
            parallel_for(tensor.size(), threads, [&](std::size_t i) {
                bits[i] = rng.uniform_at(i) < ratio_of[owners[i]] ? 1 : 0;
            });
        }
        return mask;
    }

    // magnitude: within each partition drop exactly floor(lambda* n) elements
    // of smallest |delta|, ties broken by ascending (tensor name, flat index).
    struct Cell {
        double magnitude;
        std::vector<std::uint8_t>* bits;
        std::size_t index;
    };
    std::vector<std::vector<Cell>> cells(partitions.size());
    for (std::size_t p = 0; p < partitions.size(); ++p) cells[p].reserve(partitions[p].element_count);
    for (const auto& [name, tensor] : delta) {
        const auto& owners = mask.regions->owners(name);
        auto& bits = mask.bits.at(name);
        const auto& values = tensor.values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            cells[owners[i]].push_back(Cell{std::abs(values[i]), &bits, i});
        }
    }
    for (std::size_t p = 0; p < partitions.size(); ++p) {
        auto& pool = cells[p];
        const auto k = static_cast<std::size_t>(
            std::floor(ratio_of[p] * static_cast<double>(pool.size())));
        if (k == 0) continue;
        // insertion order is (tensor name, flat index) ascending, so a stable
        // sort on magnitude breaks ties in that order
        std::stable_sort(pool.begin(), pool.end(),
                         [](const Cell& a, const Cell& b) { return a.magnitude < b.magnitude; });
        for (std::size_t i = 0; i < k; ++i) (*pool[i].bits)[pool[i].index] = 1;
    }
    return mask;
}

/// (1 - M) .* delta / (1 - lambda*), using each element's owning partition's
/// nominal ratio; `global_ratio` forces one ratio for every element instead.
inline TensorMap apply_mask_rescale(const TensorMap& delta, const DropMask& mask,
                                    std::optional<double> global_ratio = std::nullopt) {
    std::vector<double> scale_of(mask.partitions.size());
    for (std::size_t p = 0; p < mask.partitions.size(); ++p) {
        const double ratio = global_ratio.value_or(mask.nominal_ratios.at(mask.partitions[p].id));
        if (!(ratio >= 0.0) || !(ratio < 1.0)) {
            throw ValidationError("rescale ratio " + std::to_string(ratio) +
                                  " is outside [0, 1)");
        }
        scale_of[p] = 1.0 / (1.0 - ratio);
    }
    TensorMap out;
    for (const auto& [name, tensor] : delta) {
        const auto bit = mask.bits.find(name);
        if (bit == mask.bits.end() || bit->second.size() != tensor.size()) {
            throw AlignmentError("mask is not aligned with delta on tensor '" + name + "'");
        }
        const auto& owners = mask.regions->owners(name);
        const auto& bits = bit->second;
        std::vector<double> values(tensor.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] = bits[i] ? 0.0 : tensor.values()[i] * scale_of[owners[i]];
        }
        out.set(name, DenseTensor(tensor.shape(), std::move(values)));
    }
    if (out.tensor_count() != mask.bits.size()) {
        throw AlignmentError("mask covers tensors absent from the delta map");
    }
    return out;
}

} // namespace apl
