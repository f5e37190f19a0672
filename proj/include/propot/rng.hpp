#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "propot/tensor.hpp"

namespace propot {

// Deterministic xoshiro-free generator built on splitmix64. All randomness in
// the project is drawn from one seeded hierarchy: every consumer forks its own
// stream from (seed, tag), so evaluation order cannot change results.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // warm up so that small seeds decorrelate
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // standard normal via Box-Muller (deterministic across stdlibs)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 1e-300);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    Rng fork(const std::string& tag) const {
        uint64_t h = 1469598103934665603ULL;  // FNV-1a over tag mixed with state
        for (unsigned char c : tag) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return Rng(state_ ^ h ^ 0xa076bc9f8d51e2d3ULL);
    }

    Rng fork(uint64_t tag) const { return fork(std::to_string(tag)); }

    Tensor normal_tensor(int64_t rows, int64_t cols, double stddev) {
        Tensor t(rows, cols);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal() * stddev;
        return t;
    }

    Tensor uniform_tensor(int64_t rows, int64_t cols, double lo, double hi) {
        Tensor t(rows, cols);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * uniform();
        return t;
    }

    // Fisher-Yates over [0, n)
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(n);
        for (int64_t i = 0; i < n; ++i) p[i] = i;
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = uniform_int(i + 1);
            std::swap(p[i], p[j]);
        }
        return p;
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace propot
