#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcml {

// Base error carrying a stable machine-readable code alongside the message.
// The CLI maps these to {"error": code, "message": ...} JSON on stderr.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& msg)
        : std::runtime_error(msg), code_(std::move(code)) {}
    const std::string& code() const { return code_; }

private:
    std::string code_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape_error", msg) {}
};
struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error("value_error", msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config_error", msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io_error", msg) {}
};
struct TrainError : Error {
    explicit TrainError(const std::string& msg) : Error("train_error", msg) {}
};

// Non-fatal conditions (zero-vector normalize, stabilized variance, clamped k)
// are flagged here rather than thrown. Tests drain the list; the CLI prints it.
inline std::vector<std::string>& warning_log() {
    thread_local std::vector<std::string> log;
    return log;
}

inline void push_warning(const std::string& msg) { warning_log().push_back(msg); }

inline std::vector<std::string> drain_warnings() {
    auto out = warning_log();
    warning_log().clear();
    return out;
}

// Deterministic RNG: engine state advances identically on every platform and
// the uniform/normal transforms are pinned here instead of relying on the
// implementation-defined std::*_distribution algorithms.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix(seed)) {}

    uint64_t next_u64() {
        // xorshift* generator
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545F4914F6CDD1DULL;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // index in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    double normal() {
        // Box-Muller, one value per call (the spare is discarded so the
        // stream does not depend on call parity)
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Derive an independent stream for a named component.
    Rng fork(uint64_t salt) const { return Rng(splitmix(state_ ^ (salt * 0x9E3779B97F4A7C15ULL))); }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = std::distance(first, last);
        for (auto i = n - 1; i > 0; --i) std::swap(first[i], first[below(uint64_t(i + 1))]);
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    uint64_t state_;
};

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(double(x))) return false;
    return true;
}

}  // namespace dcml
