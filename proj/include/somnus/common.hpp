#pragma once
// Shared plumbing: error taxonomy, warning sink, FNV hashing and the
// deterministic RNG streams every stochastic component draws from.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace somnus {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed shapes or incompatible operand ranks.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values or other numeric breakdowns in the compute graph.
class NumericError : public Error {
public:
    using Error::Error;
};

// Bad configuration input (unknown keys, invalid values). CLI exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Missing or malformed data artifacts on disk. CLI exit code 3.
class DataError : public Error {
public:
    using Error::Error;
};

// Process-wide warning sink. Single-threaded by design: the gradient path is
// sequential, and eval-side emitters are only read after joins.
class Warnings {
public:
    static std::vector<std::string>& log() {
        static std::vector<std::string> entries;
        return entries;
    }
    static void emit(std::string msg) { log().push_back(std::move(msg)); }
    static void clear() { log().clear(); }
    static bool contains(std::string_view needle) {
        for (const auto& m : log())
            if (m.find(needle) != std::string::npos) return true;
        return false;
    }
};

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Derives an independent stream seed from a base seed and a label path, e.g.
// derive_seed(seed, "mask", epoch, subject). Streams are stable across runs
// and independent of call order, which is what makes training resumable.
inline std::uint64_t seed_mix(std::uint64_t h, std::uint64_t v) {
    return fnv1a64(&v, sizeof(v), h);
}

template <typename T>
std::uint64_t seed_mix_part(std::uint64_t h, const T& v) {
    if constexpr (std::is_convertible_v<T, std::string_view>)
        return fnv1a64(std::string_view(v), h);
    else
        return seed_mix(h, static_cast<std::uint64_t>(v));
}

template <typename... Parts>
std::uint64_t derive_seed(std::uint64_t base, std::string_view label, Parts... parts) {
    std::uint64_t h = fnv1a64(label, seed_mix(0xcbf29ce484222325ull, base));
    ((h = seed_mix_part(h, parts)), ...);
    return h;
}

// Deterministic RNG. mt19937_64 has a fully specified algorithm, and the
// distributions below are hand-rolled so draws are identical on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        // Rejection-free modulo is fine here: n is tiny relative to 2^64.
        return static_cast<std::size_t>(eng_() % n);
    }

    // Standard normal via Box-Muller (no cached spare, keeps streams simple).
    double normal() {
        double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    double exponential(double rate) {
        double u = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
        return -std::log(u) / rate;
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::mt19937_64 eng_;
};

inline std::string format_count(std::size_t n, const char* noun) {
    std::ostringstream os;
    os << n << ' ' << noun << (n == 1 ? "" : "s");
    return os.str();
}

}  // namespace somnus
