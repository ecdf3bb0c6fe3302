#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace ssp {

/// Counter-based Philox4x32-10 generator.
///
/// State is (key, counter); every draw is a pure function of both, so a
/// stream can be split into independent child streams by deriving a new key.
/// There is no global instance: every stochastic operation takes one by
/// reference.
class Philox {
public:
    explicit Philox(std::uint64_t seed = 0, std::uint64_t stream = 0)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          counter_{0, 0, static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)} {}

    /// Independent generator for a named sub-stream.
    [[nodiscard]] Philox split(std::uint64_t stream_id) const {
        Philox probe = *this;
        probe.counter_[2] ^= 0x9E3779B9u;
        probe.counter_[3] ^= 0xBB67AE85u;
        const auto block = probe.block_for(stream_id);
        const std::uint64_t seed = (static_cast<std::uint64_t>(block[1]) << 32) | block[0];
        const std::uint64_t stream = (static_cast<std::uint64_t>(block[3]) << 32) | block[2];
        return Philox(seed, stream);
    }

    std::uint32_t next_u32() {
        if (lane_ == 4) {
            buffer_ = round_all(counter_, key_);
            increment();
            lane_ = 0;
        }
        return buffer_[lane_++];
    }

    std::uint64_t next_u64() {
        const std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in (0, 1]; safe argument for log().
    double uniform_open_low() { return 1.0 - uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t draw;
        do {
            draw = next_u64();
        } while (draw >= limit);
        return draw % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (the second variate is cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double radius = std::sqrt(-2.0 * std::log(uniform_open_low()));
        const double angle = 2.0 * std::numbers::pi * uniform();
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    using Block = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Block round_all(Block ctr, Key key) {
        constexpr std::uint32_t kMul0 = 0xD2511F53u;
        constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
        constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
        constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
            ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
                   static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }

    Block block_for(std::uint64_t index) const {
        Block ctr = counter_;
        ctr[0] ^= static_cast<std::uint32_t>(index);
        ctr[1] ^= static_cast<std::uint32_t>(index >> 32);
        return round_all(ctr, key_);
    }

    void increment() {
        for (auto& word : counter_) {
            if (++word != 0) break;
        }
    }

    Key key_;
    Block counter_;
    Block buffer_{};
    int lane_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ssp
