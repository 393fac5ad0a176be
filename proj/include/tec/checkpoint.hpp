// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout:
//   8 bytes   magic "TECCKPT1"
//   8 bytes   u64 little-endian length N of the metadata document
//   N bytes   UTF-8 JSON: format_version, kind, config, step, rng_state and
//             an array index {name, dtype, shape, offset, nbytes}
//   ...       raw little-endian array payloads; offsets are relative to the
//             first byte after the metadata
#pragma once

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tec/nn.hpp"

namespace tec {

inline constexpr char kCheckpointMagic[8] = {'T', 'E', 'C', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestionError("short write to " + path.string());
}

} // namespace detail

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> values;
    std::string dtype = "f32";
};

struct Checkpoint {
    std::string kind;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t step = 0;
    std::string rng_state;
    std::vector<NamedArray> arrays;

    bool has(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return true;
        return false;
    }

    const NamedArray& get(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return a;
        throw IngestionError("checkpoint has no array named " + name);
    }

    /// Arrays are written as f32. With dtype "auto" an array holding any value
    /// not exactly representable in f32 (e.g. a folded class token) is kept
    /// as f64 instead, so saving never changes a value.
    void add(const std::string& prefix, const NamedTensors& params, const std::string& dtype = "auto") {
        for (const auto& [name, t] : params) {
            std::string dt = dtype;
            if (dt == "auto") {
                dt = "f32";
                for (double v : t.data())
                    if (static_cast<double>(static_cast<float>(v)) != v) {
                        dt = "f64";
                        break;
                    }
            }
            arrays.push_back({prefix + name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()), dt});
        }
    }

    /// Copies arrays `prefix + name` into the given parameters.
    void restore(const std::string& prefix, NamedTensors& params) const {
        for (auto& [name, t] : params) {
            const NamedArray& a = get(prefix + name);
            if (a.shape != t.shape())
                throw IngestionError("shape mismatch for " + a.name + ": " + shape_str(a.shape) + " vs " +
                                     shape_str(t.shape()));
            auto d = t.mutable_data();
            std::copy(a.values.begin(), a.values.end(), d.begin());
        }
    }

    std::string to_bytes() const {
        nlohmann::json index = nlohmann::json::array();
        std::string payload;
        for (const auto& a : arrays) {
            if (shape_numel(a.shape) != a.values.size()) throw DimensionError("array " + a.name + " shape mismatch");
            const std::size_t offset = payload.size();
            if (a.dtype == "f32") {
                for (double v : a.values) detail::put_u32(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            } else if (a.dtype == "f64") {
                for (double v : a.values) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
            } else {
                throw ConfigError("unsupported dtype " + a.dtype);
            }
            index.push_back({{"name", a.name},
                             {"dtype", a.dtype},
                             {"shape", a.shape},
                             {"offset", offset},
                             {"nbytes", payload.size() - offset}});
        }
        nlohmann::json meta = {{"format_version", kCheckpointVersion},
                               {"kind", kind},
                               {"config", config},
                               {"step", step},
                               {"rng_state", rng_state},
                               {"arrays", index}};
        const std::string doc = meta.dump();
        std::string out(kCheckpointMagic, 8);
        detail::put_u64(out, doc.size());
        out += doc;
        out += payload;
        return out;
    }

    static Checkpoint from_bytes(const std::string& bytes, const std::string& origin = "<memory>") {
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
        if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
            throw IngestionError(origin + ": not a TECCKPT1 checkpoint");
        const std::uint64_t n = detail::get_u64(p + 8);
        if (bytes.size() < 16 + n) throw IngestionError(origin + ": truncated metadata");
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(bytes.substr(16, n));
        } catch (const nlohmann::json::exception& e) {
            throw IngestionError(origin + ": bad metadata: " + e.what());
        }
        if (meta.value("format_version", 0) != kCheckpointVersion)
            throw IngestionError(origin + ": unsupported checkpoint version");
        Checkpoint ck;
        ck.kind = meta.at("kind").get<std::string>();
        ck.config = meta.at("config");
        ck.step = meta.at("step").get<std::uint64_t>();
        ck.rng_state = meta.at("rng_state").get<std::string>();
        const std::size_t base = 16 + n;
        for (const auto& e : meta.at("arrays")) {
            NamedArray a;
            a.name = e.at("name").get<std::string>();
            a.dtype = e.at("dtype").get<std::string>();
            a.shape = e.at("shape").get<Shape>();
            const auto offset = e.at("offset").get<std::size_t>();
            const auto nbytes = e.at("nbytes").get<std::size_t>();
            const std::size_t count = shape_numel(a.shape);
            const std::size_t width = a.dtype == "f32" ? 4 : a.dtype == "f64" ? 8 : 0;
            if (width == 0) throw IngestionError(origin + ": unsupported dtype " + a.dtype);
            if (nbytes != count * width || base + offset + nbytes > bytes.size())
                throw IngestionError(origin + ": truncated array " + a.name);
            a.values.resize(count);
            const unsigned char* src = p + base + offset;
            for (std::size_t i = 0; i < count; ++i)
                a.values[i] = width == 4 ? static_cast<double>(std::bit_cast<float>(detail::get_u32(src + 4 * i)))
                                         : std::bit_cast<double>(detail::get_u64(src + 8 * i));
            ck.arrays.push_back(std::move(a));
        }
        return ck;
    }

    void save(const std::filesystem::path& path) const { detail::write_file(path, to_bytes()); }

    static Checkpoint load(const std::filesystem::path& path) {
        return from_bytes(detail::read_file(path), path.string());
    }
};

} // namespace tec
