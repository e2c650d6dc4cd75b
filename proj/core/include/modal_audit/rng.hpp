#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace modal_audit {

std::uint64_t splitmix64(std::uint64_t& state) noexcept;
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

// Order-sensitive combination of several keys into one seed.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) noexcept;

// mt19937_64 engine with hand-written distributions. The standard library's
// distributions are implementation-defined, which would make outputs differ
// between toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    static Rng keyed(std::initializer_list<std::uint64_t> keys) { return Rng(derive_seed(keys)); }

    std::uint64_t next() { return eng_(); }
    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    // Standard normal via Box-Muller; the second variate is cached.
    double normal();
    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace modal_audit
