// SPDX-License-Identifier: Apache-2.0
//
// TensorMap: an ordered collection of named dense tensors. This is the one
// value type the whole toolkit trades in: base checkpoints, fine-tuned
// checkpoints, deltas, gradients and merged models are all TensorMaps.
// Elements are doubles in memory; the checkpoint format narrows to F32 at the
// file boundary (see checkpoint.hpp).

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "apl/errors.hpp"

namespace apl {

class DenseTensor {
public:
    DenseTensor() = default;

    explicit DenseTensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), values_(checked_element_count(shape_), 0.0) {}

    DenseTensor(std::vector<std::size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (values_.size() != checked_element_count(shape_)) {
            throw ValidationError("tensor element count " + std::to_string(values_.size()) +
                                  " does not match shape product " +
                                  std::to_string(checked_element_count(shape_)));
        }
    }

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }

    const std::vector<double>& values() const noexcept { return values_; }
    std::vector<double>& values() noexcept { return values_; }

    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    bool same_shape(const DenseTensor& other) const noexcept { return shape_ == other.shape_; }

    bool operator==(const DenseTensor& other) const = default;

    /// Product of extents; rejects zero extents and overflow. An empty shape
    /// is a scalar holding one element.
    static std::size_t checked_element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t extent : shape) {
            if (extent == 0) throw ValidationError("tensor shape has a zero extent");
            if (extent > std::numeric_limits<std::size_t>::max() / n) {
                throw ValidationError("tensor shape overflows size_t");
            }
            n *= extent;
        }
        return n;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
};

class TensorMap {
public:
    using Storage = std::map<std::string, DenseTensor>; // lexicographic iteration
    using const_iterator = Storage::const_iterator;

    TensorMap() = default;

    bool empty() const noexcept { return entries_.empty(); }
    std::size_t tensor_count() const noexcept { return entries_.size(); }

    std::size_t total_elements() const noexcept {
        std::size_t n = 0;
        for (const auto& [name, tensor] : entries_) n += tensor.size();
        return n;
    }

    bool contains(std::string_view name) const {
        return entries_.find(std::string(name)) != entries_.end();
    }

    const DenseTensor& at(std::string_view name) const {
        auto it = entries_.find(std::string(name));
        if (it == entries_.end()) {
            throw ValidationError("no tensor named '" + std::string(name) + "'");
        }
        return it->second;
    }

    DenseTensor& at(std::string_view name) {
        return const_cast<DenseTensor&>(std::as_const(*this).at(name));
    }

    void set(std::string name, DenseTensor tensor) {
        entries_.insert_or_assign(std::move(name), std::move(tensor));
    }

    const_iterator begin() const noexcept { return entries_.begin(); }
    const_iterator end() const noexcept { return entries_.end(); }

    bool aligned_with(const TensorMap& other) const noexcept {
        if (entries_.size() != other.entries_.size()) return false;
        auto a = entries_.begin();
        auto b = other.entries_.begin();
        for (; a != entries_.end(); ++a, ++b) {
            if (a->first != b->first || !a->second.same_shape(b->second)) return false;
        }
        return true;
    }

    /// Throws AlignmentError naming the first offending tensor.
    void require_aligned(const TensorMap& other, std::string_view context) const {
        for (const auto& [name, tensor] : entries_) {
            auto it = other.entries_.find(name);
            if (it == other.entries_.end()) {
                throw AlignmentError(std::string(context) + ": tensor '" + name +
                                     "' missing from the other map");
            }
            if (!tensor.same_shape(it->second)) {
                throw AlignmentError(std::string(context) + ": shape mismatch on tensor '" +
                                     name + "'");
            }
        }
        for (const auto& [name, tensor] : other.entries_) {
            if (entries_.find(name) == entries_.end()) {
                throw AlignmentError(std::string(context) + ": unexpected extra tensor '" +
                                     name + "'");
            }
        }
    }

    bool operator==(const TensorMap& other) const = default;

private:
    Storage entries_;
};

/// Bit-pattern equality; unlike operator== this treats NaN payloads as values.
inline bool bits_equal(const TensorMap& a, const TensorMap& b) {
    if (!a.aligned_with(b)) return false;
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end(); ++ia, ++ib) {
        const auto& va = ia->second.values();
        const auto& vb = ib->second.values();
        for (std::size_t i = 0; i < va.size(); ++i) {
            if (std::bit_cast<std::uint64_t>(va[i]) != std::bit_cast<std::uint64_t>(vb[i])) {
                return false;
            }
        }
    }
    return true;
}

} // namespace apl
