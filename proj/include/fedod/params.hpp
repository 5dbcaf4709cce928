#pragma once

// Named parameter tensors, the deterministic generator used everywhere a
// random draw is needed, and the "FDW1" checkpoint/transport encoding.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fedod/error.hpp"
#include "fedod/wire.hpp"

namespace fedod {

class Tensor {
public:
    Tensor(std::string name, std::vector<std::uint32_t> dims)
        : name_(std::move(name)), dims_(std::move(dims)) {
        validate_shape();
        values_.assign(element_count(dims_), 0.0f);
    }

    Tensor(std::string name, std::vector<std::uint32_t> dims, std::vector<float> values)
        : name_(std::move(name)), dims_(std::move(dims)), values_(std::move(values)) {
        validate_shape();
        if (values_.size() != element_count(dims_))
            throw Error(ErrorKind::ShapeMismatch, "tensor '" + name_ + "' has " + std::to_string(values_.size()) +
                                                      " values for " + std::to_string(element_count(dims_)) + " elements");
    }

    const std::string& name() const { return name_; }
    const std::vector<std::uint32_t>& dims() const { return dims_; }
    std::size_t rank() const { return dims_.size(); }
    std::size_t size() const { return values_.size(); }

    std::span<const float> values() const { return values_; }
    std::span<float> values() { return values_; }

    friend bool operator==(const Tensor&, const Tensor&) = default;

    static std::size_t element_count(const std::vector<std::uint32_t>& dims) {
        return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                               [](std::size_t acc, std::uint32_t d) { return acc * d; });
    }

private:
    void validate_shape() const {
        if (name_.empty()) throw Error(ErrorKind::ShapeMismatch, "tensor name must be non-empty");
        if (dims_.empty() || dims_.size() > 4)
            throw Error(ErrorKind::ShapeMismatch, "tensor '" + name_ + "' rank must be 1..4");
        for (auto d : dims_)
            if (d == 0) throw Error(ErrorKind::ShapeMismatch, "tensor '" + name_ + "' has a zero dimension");
    }

    std::string name_;
    std::vector<std::uint32_t> dims_;
    std::vector<float> values_;
};

/// 64-bit FNV-1a over, per tensor in order: name bytes, rank as one byte,
/// each dim as u32 little-endian.
inline std::uint64_t schema_hash_of(std::span<const Tensor> tensors) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::uint8_t byte) {
        h ^= byte;
        h *= 0x100000001b3ULL;
    };
    for (const auto& t : tensors) {
        for (char c : t.name()) feed(static_cast<std::uint8_t>(c));
        feed(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.dims())
            for (int i = 0; i < 4; ++i) feed(static_cast<std::uint8_t>(d >> (8 * i)));
    }
    return h;
}

/// Ordered collection of uniquely named tensors. Order is creation order.
class ParamSet {
public:
    ParamSet() = default;

    explicit ParamSet(std::vector<Tensor> tensors) {
        for (auto& t : tensors) add(std::move(t));
    }

    void add(Tensor t) {
        for (const auto& existing : tensors_)
            if (existing.name() == t.name())
                throw Error(ErrorKind::SchemaMismatch, "duplicate tensor name '" + t.name() + "'");
        tensors_.push_back(std::move(t));
        hash_ = schema_hash_of(tensors_);
    }

    std::uint64_t schema_hash() const { return hash_; }
    std::size_t tensor_count() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

    const Tensor& operator[](std::size_t i) const { return tensors_.at(i); }
    Tensor& operator[](std::size_t i) { return tensors_.at(i); }

    const Tensor& at(std::string_view name) const {
        for (const auto& t : tensors_)
            if (t.name() == name) return t;
        throw Error(ErrorKind::SchemaMismatch, "no tensor named '" + std::string(name) + "'");
    }
    Tensor& at(std::string_view name) {
        return const_cast<Tensor&>(std::as_const(*this).at(name));
    }

    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }
    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }

    bool all_finite() const {
        for (const auto& t : tensors_)
            for (float v : t.values())
                if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.tensors_ == b.tensors_; }

private:
    std::vector<Tensor> tensors_;
    std::uint64_t hash_ = schema_hash_of({});
};

inline void require_compatible(const ParamSet& a, const ParamSet& b) {
    if (a.schema_hash() != b.schema_hash())
        throw Error(ErrorKind::SchemaMismatch, "parameter schemas differ");
}

inline ParamSet zeros_like(const ParamSet& p) {
    ParamSet out;
    for (const auto& t : p) out.add(Tensor(t.name(), t.dims()));
    return out;
}

/// alpha * x + y, elementwise; each element is computed in double and
/// rounded to float once.
inline ParamSet axpy(double alpha, const ParamSet& x, const ParamSet& y) {
    require_compatible(x, y);
    ParamSet out = y;
    for (std::size_t i = 0; i < x.tensor_count(); ++i) {
        auto xs = x[i].values();
        auto os = out[i].values();
        for (std::size_t j = 0; j < xs.size(); ++j)
            os[j] = static_cast<float>(alpha * static_cast<double>(xs[j]) + static_cast<double>(os[j]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer (Steele, Lea & Flood 2014).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Seed for an independent sub-stream, e.g. one per sample or per client.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept {
    return mix64(base ^ mix64(stream + 0x9E3779B97F4A7C15ULL));
}

/// SplitMix64 counter generator. Draw k (k = 1, 2, ...) is
/// mix64(seed + k * 0x9E3779B97F4A7C15) with wrapping arithmetic, so the
/// stream depends only on the seed and is identical on every platform.
///   uniform()   = (next() >> 11) * 2^-53            in [0, 1)
///   below(n)    = next() % n                        (n >= 1)
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix64(state_);
    }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t below(std::uint64_t n) { return next() % n; }
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// FDW1 encoding
// ---------------------------------------------------------------------------

inline constexpr std::string_view kWeightsMagic = "FDW1";

/// "FDW1" | u32 count | per tensor: u16 name len, name, u8 rank, rank x u32
/// dims, values as f32 LE | CRC-32 of everything after the magic.
inline wire::Bytes serialize(const ParamSet& p) {
    wire::ByteWriter w;
    w.raw(kWeightsMagic);
    w.u32(static_cast<std::uint32_t>(p.tensor_count()));
    for (const auto& t : p) {
        w.short_string(t.name());
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.dims()) w.u32(d);
        for (float v : t.values()) w.f32(v);
    }
    wire::Bytes out = std::move(w).take();
    const auto crc = wire::crc32(std::span(out).subspan(kWeightsMagic.size()));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    return out;
}

inline ParamSet deserialize(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t kMagic = kWeightsMagic.size();
    if (bytes.size() < kMagic + 4 + 4) throw Error(ErrorKind::MalformedPayload, "payload too short");
    if (!std::equal(kWeightsMagic.begin(), kWeightsMagic.end(), bytes.begin()))
        throw Error(ErrorKind::MalformedPayload, "bad magic");

    const auto body = bytes.subspan(kMagic, bytes.size() - kMagic - 4);
    wire::ByteReader trailer(bytes.subspan(bytes.size() - 4));
    if (trailer.u32() != wire::crc32(body)) throw Error(ErrorKind::MalformedPayload, "checksum mismatch");

    wire::ByteReader r(body);
    const auto count = r.u32();
    ParamSet out;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.short_string();
        const auto rank = r.u8();
        if (rank < 1 || rank > 4) throw Error(ErrorKind::MalformedPayload, "tensor rank out of range");
        std::vector<std::uint32_t> dims(rank);
        std::size_t n = 1;
        for (auto& d : dims) {
            d = r.u32();
            if (d == 0) throw Error(ErrorKind::MalformedPayload, "zero dimension");
            n *= d;
            if (n > r.remaining()) throw Error(ErrorKind::MalformedPayload, "dims exceed payload length");
        }
        std::vector<float> values(n);
        for (auto& v : values) {
            v = r.f32();
            if (!std::isfinite(v)) throw Error(ErrorKind::MalformedPayload, "non-finite value");
        }
        try {
            out.add(Tensor(std::move(name), std::move(dims), std::move(values)));
        } catch (const Error& e) {
            throw Error(ErrorKind::MalformedPayload, e.what());
        }
    }
    if (r.remaining() != 0) throw Error(ErrorKind::MalformedPayload, "trailing bytes after last tensor");
    return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamSet& p) {
    const auto bytes = serialize(p);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::IoFailure, "short write to " + path.string());
}

inline ParamSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot read " + path.string());
    wire::Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace fedod
