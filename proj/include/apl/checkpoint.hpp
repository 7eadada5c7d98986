// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint reader/writer, a safetensors-compatible subset:
//   bytes 0..7   unsigned 64-bit little-endian header length N
//   bytes 8..8+N UTF-8 JSON: name -> {dtype:"F32", shape:[...], data_offsets:[b,e]}
//   rest         packed little-endian f32, row-major, offsets relative here
// Only F32 is accepted; anything else is rejected rather than cast. Writes
// are byte-deterministic (names in lexicographic order, contiguous offsets)
// and atomic (temp file + rename).

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "apl/errors.hpp"
#include "apl/tensor_map.hpp"

namespace apl {

namespace detail {

inline void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void append_f32_le(std::string& out, float f) {
    const std::uint32_t v = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline float read_f32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(v);
}

} // namespace detail

/// Serializes to checkpoint bytes. Values are narrowed to F32; non-finite
/// values pass through verbatim.
inline std::string encode_checkpoint(const TensorMap& map) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : map) { // lexicographic
        const std::uint64_t nbytes = static_cast<std::uint64_t>(tensor.size()) * 4;
        header[name] = {
            {"dtype", "F32"},
            {"shape", tensor.shape()},
            {"data_offsets", {offset, offset + nbytes}},
        };
        offset += nbytes;
    }
    const std::string header_text = header.dump();

    std::string out;
    out.reserve(8 + header_text.size() + offset);
    detail::append_u64_le(out, header_text.size());
    out += header_text;
    for (const auto& [name, tensor] : map) {
        for (double v : tensor.values()) {
            detail::append_f32_le(out, static_cast<float>(v));
        }
    }
    return out;
}

inline TensorMap decode_checkpoint(std::string_view bytes, const std::string& context) {
    const auto fail = [&](const std::string& msg) -> void {
        throw FormatError(context + ": " + msg);
    };

    if (bytes.size() < 8) fail("file too short for the 8-byte header length");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint64_t header_len = detail::read_u64_le(raw);
    if (header_len > bytes.size() - 8) fail("declared header length exceeds file size");

    // Parse with a callback so duplicate tensor names are caught; nlohmann
    // would otherwise silently keep the last entry.
    std::vector<std::string> seen_keys;
    bool duplicate = false;
    std::string duplicate_name;
    const auto watch_keys = [&](int depth, nlohmann::json::parse_event_t event,
                                nlohmann::json& parsed) {
        if (depth == 1 && event == nlohmann::json::parse_event_t::key) {
            const std::string key = parsed.get<std::string>();
            for (const auto& k : seen_keys) {
                if (k == key && !duplicate) {
                    duplicate = true;
                    duplicate_name = key;
                }
            }
            seen_keys.push_back(key);
        }
        return true;
    };

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(8, header_len), watch_keys);
    } catch (const nlohmann::json::exception& e) {
        fail(std::string("metadata is not valid JSON: ") + e.what());
    }
    if (duplicate) fail("duplicate tensor name '" + duplicate_name + "'");
    if (!header.is_object()) fail("metadata is not a JSON object");

    const std::uint64_t data_size = bytes.size() - 8 - header_len;
    const unsigned char* data = raw + 8 + header_len;

    TensorMap map;
    std::uint64_t covered = 0;
    std::uint64_t max_end = 0;
    for (const auto& [name, info] : header.items()) {
        if (name == "__metadata__") continue; // reserved by the format
        if (!info.is_object()) fail("entry '" + name + "' is not an object");
        if (!info.contains("dtype") || !info["dtype"].is_string()) {
            fail("entry '" + name + "' lacks a dtype string");
        }
        const std::string dtype = info["dtype"].get<std::string>();
        if (dtype != "F32") fail("tensor '" + name + "' has unsupported dtype '" + dtype + "'");
        if (!info.contains("shape") || !info["shape"].is_array()) {
            fail("entry '" + name + "' lacks a shape array");
        }
        std::vector<std::size_t> shape;
        for (const auto& extent : info["shape"]) {
            if (!extent.is_number_unsigned() || extent.get<std::uint64_t>() == 0) {
                fail("tensor '" + name + "' has a non-positive shape extent");
            }
            shape.push_back(extent.get<std::size_t>());
        }
        if (!info.contains("data_offsets") || !info["data_offsets"].is_array() ||
            info["data_offsets"].size() != 2) {
            fail("entry '" + name + "' lacks data_offsets [begin, end]");
        }
        const std::uint64_t begin = info["data_offsets"][0].get<std::uint64_t>();
        const std::uint64_t end = info["data_offsets"][1].get<std::uint64_t>();
        std::size_t count = 0;
        try {
            count = DenseTensor::checked_element_count(shape);
        } catch (const Error& e) {
            fail(std::string("tensor '") + name + "': " + e.what());
        }
        if (end < begin || end - begin != static_cast<std::uint64_t>(count) * 4) {
            fail("tensor '" + name + "' declares " + std::to_string(end - begin) +
                 " data bytes but its shape needs " + std::to_string(count * 4));
        }
        if (end > data_size) {
            fail("tensor '" + name + "' data range [" + std::to_string(begin) + ", " +
                 std::to_string(end) + ") exceeds the " + std::to_string(data_size) +
                 "-byte data region");
        }
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) {
            values[i] = static_cast<double>(detail::read_f32_le(data + begin + 4 * i));
        }
        map.set(name, DenseTensor(std::move(shape), std::move(values)));
        covered += end - begin;
        if (end > max_end) max_end = end;
    }
    if (covered != data_size || max_end != data_size) {
        fail("metadata declares " + std::to_string(covered) + " data bytes but the file holds " +
             std::to_string(data_size));
    }
    return map;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
    return bytes;
}

/// Write-temp-then-rename so an interrupted write never leaves a partial
/// file at the destination.
inline void atomic_write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("write failure on '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::error_code ec2;
        std::filesystem::remove(tmp, ec2);
        throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " +
                      ec.message());
    }
}

inline void save_checkpoint(const TensorMap& map, const std::filesystem::path& path) {
    atomic_write_file(path, encode_checkpoint(map));
}

inline TensorMap load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file_bytes(path), "checkpoint '" + path.string() + "'");
}

} // namespace apl
