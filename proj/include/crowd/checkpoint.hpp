#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "crowd/density.hpp" // binary put/get helpers
#include "crowd/errors.hpp"
#include "crowd/tensor.hpp"

namespace crowd {

// Ordered collection of named parameter tensors. Order is append order and
// defines both checkpoint layout and every gradient-reduction order, which
// keeps runs bit-reproducible.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (find(name)) throw Error("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }
    const Tensor* find(const std::string& name) const {
        for (auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }

    Tensor& at(const std::string& name) {
        if (Tensor* t = find(name)) return *t;
        throw Error("missing parameter: " + name);
    }
    const Tensor& at(const std::string& name) const {
        if (const Tensor* t = find(name)) return *t;
        throw Error("missing parameter: " + name);
    }

    std::size_t size() const { return items_.size(); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    void zero_grads() {
        for (auto& [n, t] : items_) t.zero_grad();
    }

    std::size_t value_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    ParamStore clone() const {
        ParamStore out;
        for (const auto& [n, t] : items_) out.items_.emplace_back(n, t.clone());
        return out;
    }

    void copy_values_from(const ParamStore& other) {
        if (other.items_.size() != items_.size())
            throw ShapeMismatch("copy_values_from: parameter count differs");
        for (std::size_t i = 0; i < items_.size(); ++i) {
            if (items_[i].first != other.items_[i].first ||
                items_[i].second.shape() != other.items_[i].second.shape())
                throw ShapeMismatch("copy_values_from: layout differs at " + items_[i].first);
            items_[i].second.values() = other.items_[i].second.values();
        }
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// ---------------------------------------------------------------------------
// checkpoint file: magic "LGDC", u32 version, then per parameter
// (u32 name length, name bytes, u32 rank, u32 dims..., float64 payload),
// all little-endian, parameters until EOF.

constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParamStore& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write("LGDC", 4);
    detail::put_u32(os, kCheckpointVersion);
    for (const auto& [name, t] : params) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
        for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(os, t.data()[i]);
    }
    if (!os) throw IoError("write failed: " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "LGDC", 4) != 0) throw IoError("bad checkpoint magic in " + path);
    const std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    ParamStore params;
    while (true) {
        const int peek = is.peek();
        if (peek == std::char_traits<char>::eof()) break;
        const std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("truncated parameter name in " + path);
        const std::uint32_t rank = detail::get_u32(is);
        Shape shape(rank);
        for (std::uint32_t i = 0; i < rank; ++i) shape[i] = detail::get_u32(is);
        Tensor t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = detail::get_f64(is);
        params.add(name, std::move(t));
    }
    return params;
}

// FNV-1a over file bytes; used as the report's checkpoint fingerprint.
inline std::uint64_t fnv1a(const unsigned char* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t hash_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a(reinterpret_cast<const unsigned char*>(buf),
                  static_cast<std::size_t>(is.gcount()), h);
    }
    return h;
}

} // namespace crowd
