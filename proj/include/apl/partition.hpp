// SPDX-License-Identifier: Apache-2.0
//
// Parameter partitions at three granularities: the whole model, named layer
// groups, and per-hidden-unit slices. A hidden unit h owns row h of each
// weight tensor in its group (slice axis configurable, default 0) plus
// element h of the bias, the parameters that produce activation h.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "apl/checkpoint.hpp"
#include "apl/errors.hpp"
#include "apl/tensor_map.hpp"

namespace apl {

enum class PartitionLevel { model, layer, hidden };
enum class ResidualPolicy { error, implicit_residual_group };

/// Partition id reserved for tensors no group matched. The residual group is
/// never corrupted and keeps the base drop ratio.
inline constexpr std::string_view kResidualId = "__residual__";

inline std::string to_string(PartitionLevel level) {
    switch (level) {
        case PartitionLevel::model: return "model";
        case PartitionLevel::layer: return "layer";
        case PartitionLevel::hidden: return "hidden";
    }
    return "model";
}

inline PartitionLevel parse_partition_level(std::string_view text) {
    if (text == "model") return PartitionLevel::model;
    if (text == "layer") return PartitionLevel::layer;
    if (text == "hidden") return PartitionLevel::hidden;
    throw ConfigError("unknown partition level '" + std::string(text) +
                      "' (expected model, layer, or hidden)");
}

/// Full-name glob: '*' matches any run of characters, '?' exactly one.
inline bool glob_match(std::string_view pattern, std::string_view name) {
    std::size_t p = 0, n = 0;
    std::size_t star = std::string_view::npos, mark = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
            ++p;
            ++n;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = n;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            n = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

struct PatternSpec {
    std::string pattern;
    std::size_t axis = 0; // slice axis, hidden level only
};

struct PartitionGroup {
    std::string id;
    std::vector<PatternSpec> patterns;
};

struct PartitionSchema {
    PartitionLevel level = PartitionLevel::model;
    std::vector<PartitionGroup> groups;
    ResidualPolicy residual_policy = ResidualPolicy::error;

    /// One group per name prefix before the first '.', exact-name patterns,
    /// axis 0. Covers the toy-lab layer naming and any prefix-grouped net.
    static PartitionSchema default_for(PartitionLevel level, const TensorMap& map) {
        PartitionSchema schema;
        schema.level = level;
        std::map<std::string, PartitionGroup> by_prefix;
        for (const auto& [name, tensor] : map) {
            const std::size_t dot = name.find('.');
            const std::string prefix = dot == std::string::npos ? name : name.substr(0, dot);
            auto& group = by_prefix[prefix];
            group.id = prefix;
            group.patterns.push_back(PatternSpec{name, 0});
        }
        for (auto& [prefix, group] : by_prefix) schema.groups.push_back(std::move(group));
        return schema;
    }

    static PartitionSchema from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    static PartitionSchema load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

/// One rectangular slice of one tensor: a half-open [begin, end) range per
/// axis. A rank-0 (scalar) tensor has no ranges and one element.
struct SliceMember {
    std::string tensor;
    std::vector<std::array<std::size_t, 2>> ranges;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (const auto& r : ranges) n *= r[1] - r[0];
        return n;
    }
};

struct Partition {
    std::string id;
    std::vector<SliceMember> members;
    std::size_t element_count = 0;
    bool residual = false;
};

namespace detail {

inline SliceMember full_tensor_member(const std::string& name, const DenseTensor& tensor) {
    SliceMember member;
    member.tensor = name;
    for (std::size_t extent : tensor.shape()) member.ranges.push_back({0, extent});
    return member;
}

inline void check_member_bounds(const SliceMember& member, const DenseTensor& tensor,
                                const std::string& partition_id) {
    if (member.ranges.size() != tensor.shape().size()) {
        throw SchemaError("partition '" + partition_id + "' member '" + member.tensor +
                          "' has " + std::to_string(member.ranges.size()) +
                          " ranges for a rank-" + std::to_string(tensor.shape().size()) +
                          " tensor");
    }
    for (std::size_t a = 0; a < member.ranges.size(); ++a) {
        const auto [b, e] = member.ranges[a];
        if (b >= e || e > tensor.shape()[a]) {
            throw SchemaError("partition '" + partition_id + "' member '" + member.tensor +
                              "' range [" + std::to_string(b) + ", " + std::to_string(e) +
                              ") is out of bounds on axis " + std::to_string(a));
        }
    }
}

/// Calls fn with the flat row-major index of every element in the slice.
template <typename Fn>
void for_each_slice_index(const std::vector<std::size_t>& shape,
                          const std::vector<std::array<std::size_t, 2>>& ranges, Fn&& fn) {
    const std::size_t rank = shape.size();
    if (rank == 0) {
        fn(0);
        return;
    }
    std::vector<std::size_t> strides(rank, 1);
    for (std::size_t a = rank; a-- > 1;) strides[a - 1] = strides[a] * shape[a];
    std::vector<std::size_t> idx(rank);
    for (std::size_t a = 0; a < rank; ++a) idx[a] = ranges[a][0];
    while (true) {
        std::size_t flat = 0;
        for (std::size_t a = 0; a < rank; ++a) flat += idx[a] * strides[a];
        fn(flat);
        std::size_t a = rank;
        while (a-- > 0) {
            if (++idx[a] < ranges[a][1]) break;
            idx[a] = ranges[a][0];
            if (a == 0) return;
        }
    }
}

} // namespace detail

/// Resolves the schema against a concrete tensor map.
///   model  -> one partition covering every tensor
///   layer  -> one partition per group
///   hidden -> one partition per (group, slice index)
/// Unmatched tensors are a schema error or, under implicit-residual-group,
/// collected into a trailing residual partition.
inline std::vector<Partition> build_partitions(const TensorMap& map,
                                               const PartitionSchema& schema) {
    std::vector<Partition> out;
    if (map.empty()) throw SchemaError("cannot partition an empty tensor map");

    if (schema.level == PartitionLevel::model) {
        Partition p;
        p.id = "model";
        for (const auto& [name, tensor] : map) {
            p.members.push_back(detail::full_tensor_member(name, tensor));
            p.element_count += tensor.size();
        }
        out.push_back(std::move(p));
        return out;
    }

    std::set<std::string> group_ids;
    for (const auto& group : schema.groups) {
        if (group.id.empty()) throw SchemaError("partition group with empty id");
        if (group.id == kResidualId) {
            throw SchemaError("group id '" + std::string(kResidualId) + "' is reserved");
        }
        if (!group_ids.insert(group.id).second) {
            throw SchemaError("duplicate group id '" + group.id + "'");
        }
    }

    // tensor -> (group index, matching pattern's axis)
    struct Match {
        std::size_t group;
        std::size_t axis;
    };
    std::map<std::string, Match> matches;
    std::vector<std::string> residual_tensors;
    for (const auto& [name, tensor] : map) {
        bool matched = false;
        Match match{0, 0};
        for (std::size_t g = 0; g < schema.groups.size(); ++g) {
            for (const auto& spec : schema.groups[g].patterns) {
                if (!glob_match(spec.pattern, name)) continue;
                if (matched && match.group != g) {
                    throw SchemaError("tensor '" + name + "' matches both group '" +
                                      schema.groups[match.group].id + "' and group '" +
                                      schema.groups[g].id + "'");
                }
                matched = true;
                match = Match{g, spec.axis};
            }
        }
        if (matched) {
            matches[name] = match;
        } else if (schema.residual_policy == ResidualPolicy::error) {
            throw SchemaError("tensor '" + name + "' matches no partition group");
        } else {
            residual_tensors.push_back(name);
        }
    }

    if (schema.level == PartitionLevel::layer) {
        for (std::size_t g = 0; g < schema.groups.size(); ++g) {
            Partition p;
            p.id = schema.groups[g].id;
            for (const auto& [name, match] : matches) {
                if (match.group != g) continue;
                p.members.push_back(detail::full_tensor_member(name, map.at(name)));
                p.element_count += map.at(name).size();
            }
            out.push_back(std::move(p));
        }
    } else { // hidden
        for (std::size_t g = 0; g < schema.groups.size(); ++g) {
            // every member must agree on the sliced extent
            std::size_t slice_count = 0;
            bool first = true;
            std::vector<std::pair<std::string, std::size_t>> members; // (tensor, axis)
            for (const auto& [name, match] : matches) {
                if (match.group != g) continue;
                const DenseTensor& tensor = map.at(name);
                if (tensor.shape().empty() || match.axis >= tensor.shape().size()) {
                    throw SchemaError("slice axis " + std::to_string(match.axis) +
                                      " is out of range for tensor '" + name + "'");
                }
                const std::size_t extent = tensor.shape()[match.axis];
                if (first) {
                    slice_count = extent;
                    first = false;
                } else if (extent != slice_count) {
                    throw SchemaError("group '" + schema.groups[g].id +
                                      "' slices tensors of mismatched extent (" +
                                      std::to_string(slice_count) + " vs " +
                                      std::to_string(extent) + " on '" + name + "')");
                }
                members.emplace_back(name, match.axis);
            }
            for (std::size_t h = 0; h < slice_count; ++h) {
                Partition p;
                p.id = schema.groups[g].id + "[" + std::to_string(h) + "]";
                for (const auto& [name, axis] : members) {
                    SliceMember member = detail::full_tensor_member(name, map.at(name));
                    member.ranges[axis] = {h, h + 1};
                    p.members.push_back(std::move(member));
                    p.element_count += p.members.back().element_count();
                }
                out.push_back(std::move(p));
            }
        }
    }

    if (!residual_tensors.empty()) {
        Partition p;
        p.id = std::string(kResidualId);
        p.residual = true;
        for (const auto& name : residual_tensors) {
            p.members.push_back(detail::full_tensor_member(name, map.at(name)));
            p.element_count += map.at(name).size();
        }
        out.push_back(std::move(p));
    }
    return out;
}

/// Per-element partition-ordinal paint over a tensor map. Validates that
/// partitions stay in bounds, never overlap, and (optionally) cover every
/// element.
class RegionIndex {
public:
    static constexpr std::uint32_t kUnowned = 0xffffffffu;

    RegionIndex(const TensorMap& map, const std::vector<Partition>& partitions,
                bool require_cover = true) {
        if (partitions.size() >= kUnowned) throw SchemaError("too many partitions");
        for (const auto& [name, tensor] : map) {
            owner_.emplace(name, std::vector<std::uint32_t>(tensor.size(), kUnowned));
        }
        for (std::size_t p = 0; p < partitions.size(); ++p) {
            std::size_t painted = 0;
            for (const auto& member : partitions[p].members) {
                if (!map.contains(member.tensor)) {
                    throw SchemaError("partition '" + partitions[p].id +
                                      "' references unknown tensor '" + member.tensor + "'");
                }
                const DenseTensor& tensor = map.at(member.tensor);
                detail::check_member_bounds(member, tensor, partitions[p].id);
                auto& cells = owner_.at(member.tensor);
                detail::for_each_slice_index(tensor.shape(), member.ranges, [&](std::size_t i) {
                    if (cells[i] != kUnowned) {
                        throw SchemaError("partitions '" + partitions[cells[i]].id + "' and '" +
                                          partitions[p].id + "' overlap on tensor '" +
                                          member.tensor + "'");
                    }
                    cells[i] = static_cast<std::uint32_t>(p);
                    ++painted;
                });
            }
            if (painted != partitions[p].element_count) {
                throw SchemaError("partition '" + partitions[p].id + "' declares " +
                                  std::to_string(partitions[p].element_count) +
                                  " elements but its members hold " + std::to_string(painted));
            }
        }
        if (require_cover) {
            for (const auto& [name, cells] : owner_) {
                for (std::size_t i = 0; i < cells.size(); ++i) {
                    if (cells[i] == kUnowned) {
                        throw SchemaError("element " + std::to_string(i) + " of tensor '" +
                                          name + "' belongs to no partition");
                    }
                }
            }
        }
    }

    const std::vector<std::uint32_t>& owners(const std::string& tensor) const {
        return owner_.at(tensor);
    }

private:
    std::map<std::string, std::vector<std::uint32_t>> owner_;
};

/// The corrupted-model constructor: fine everywhere except the partition's
/// slices, which are copied from base. Inputs are untouched.
inline TensorMap substitute(const TensorMap& fine, const TensorMap& base,
                            const Partition& partition) {
    fine.require_aligned(base, "substitute");
    TensorMap out = fine;
    for (const auto& member : partition.members) {
        if (!fine.contains(member.tensor)) {
            throw SchemaError("partition '" + partition.id + "' references unknown tensor '" +
                              member.tensor + "'");
        }
        const DenseTensor& src = base.at(member.tensor);
        detail::check_member_bounds(member, src, partition.id);
        DenseTensor patched = out.at(member.tensor);
        detail::for_each_slice_index(src.shape(), member.ranges, [&](std::size_t i) {
            patched.values()[i] = src.values()[i];
        });
        out.set(member.tensor, std::move(patched));
    }
    return out;
}

inline PartitionSchema PartitionSchema::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw SchemaError("partition schema must be a JSON object");
    PartitionSchema schema;
    if (!j.contains("level") || !j["level"].is_string()) {
        throw SchemaError("partition schema lacks a level string");
    }
    schema.level = parse_partition_level(j["level"].get<std::string>());
    if (j.contains("residual_policy")) {
        const std::string policy = j["residual_policy"].get<std::string>();
        if (policy == "error") {
            schema.residual_policy = ResidualPolicy::error;
        } else if (policy == "implicit-residual-group") {
            schema.residual_policy = ResidualPolicy::implicit_residual_group;
        } else {
            throw SchemaError("unknown residual_policy '" + policy + "'");
        }
    }
    if (schema.level != PartitionLevel::model) {
        if (!j.contains("groups") || !j["groups"].is_array() || j["groups"].empty()) {
            throw SchemaError("partition schema needs a non-empty groups array");
        }
        for (const auto& jg : j["groups"]) {
            PartitionGroup group;
            if (!jg.contains("id") || !jg["id"].is_string()) {
                throw SchemaError("partition group lacks an id string");
            }
            group.id = jg["id"].get<std::string>();
            if (!jg.contains("patterns") || !jg["patterns"].is_array() ||
                jg["patterns"].empty()) {
                throw SchemaError("group '" + group.id + "' needs a non-empty patterns array");
            }
            for (const auto& jp : jg["patterns"]) {
                PatternSpec spec;
                if (jp.is_string()) {
                    spec.pattern = jp.get<std::string>();
                } else if (jp.is_object() && jp.contains("pattern") &&
                           jp["pattern"].is_string()) {
                    spec.pattern = jp["pattern"].get<std::string>();
                    if (jp.contains("axis")) {
                        if (!jp["axis"].is_number_unsigned()) {
                            throw SchemaError("pattern axis must be a nonnegative integer");
                        }
                        spec.axis = jp["axis"].get<std::size_t>();
                    }
                } else {
                    throw SchemaError("group '" + group.id +
                                      "' has a pattern that is neither a string nor an object");
                }
                group.patterns.push_back(std::move(spec));
            }
            schema.groups.push_back(std::move(group));
        }
    }
    return schema;
}

inline nlohmann::json PartitionSchema::to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["level"] = apl::to_string(level);
    j["residual_policy"] = residual_policy == ResidualPolicy::error
                               ? "error"
                               : "implicit-residual-group";
    j["groups"] = nlohmann::json::array();
    for (const auto& group : groups) {
        nlohmann::json jg;
        jg["id"] = group.id;
        jg["patterns"] = nlohmann::json::array();
        for (const auto& spec : group.patterns) {
            jg["patterns"].push_back({{"pattern", spec.pattern}, {"axis", spec.axis}});
        }
        j["groups"].push_back(std::move(jg));
    }
    return j;
}

inline PartitionSchema PartitionSchema::load(const std::filesystem::path& path) {
    const std::string text = read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("schema '" + path.string() + "' is not valid JSON: " + e.what());
    }
    try {
        return from_json(j);
    } catch (const Error& e) {
        throw SchemaError("schema '" + path.string() + "': " + e.what());
    }
}

inline void PartitionSchema::save(const std::filesystem::path& path) const {
    atomic_write_file(path, to_json().dump(2) + "\n");
}

} // namespace apl
