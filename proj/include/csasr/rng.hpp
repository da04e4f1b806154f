#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "csasr/tensor.hpp"

namespace csasr {

/// mt19937_64 with hand-rolled draws. The standard distribution adaptors
/// are implementation-defined, which would make seeds non-portable and
/// break checkpoint-resume trace equality across stdlibs.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + next_unit() * (hi - lo); }

    /// Uniform integer in [0, n) by rejection (no modulo bias).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw ValueError("uniform_int: empty range");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    /// Box-Muller; draws exactly two uniforms per sample.
    double normal(double mean, double stddev) {
        double u1;
        do {
            u1 = next_unit();
        } while (u1 <= 0.0);
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.28318530717958647692 * u2);
    }

    /// In-place Fisher-Yates shuffle (std::shuffle is not reproducible
    /// across implementations).
    template <typename V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw ValueError("rng: malformed engine state");
    }

private:
    std::mt19937_64 engine_;
};

template <typename T>
void fill_uniform(const TensorPtr<T>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t->data) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(const TensorPtr<T>& t, Rng& rng, double mean, double stddev) {
    for (auto& v : t->data) v = static_cast<T>(rng.normal(mean, stddev));
}

/// Kaiming-uniform by fan-in: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
void fill_kaiming_uniform(const TensorPtr<T>& t, Rng& rng, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    fill_uniform(t, rng, -bound, bound);
}

}  // namespace csasr
