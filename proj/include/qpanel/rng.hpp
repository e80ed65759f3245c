#pragma once

#include <array>
#include <cstdint>
#include <cmath>
#include <string>

// Counter-based RNG (Philox4x64-10) so that replication r of a simulation
// draws from stream(seed, r) independently of scheduling or worker count.

namespace qpanel {

inline constexpr const char* kRngName = "philox4x64-10";

namespace detail {

inline void mulhilo64(uint64_t a, uint64_t b, uint64_t& hi, uint64_t& lo) {
    __uint128_t p = static_cast<__uint128_t>(a) * b;
    hi = static_cast<uint64_t>(p >> 64);
    lo = static_cast<uint64_t>(p);
}

} // namespace detail

class Philox {
public:
    // key = (seed, stream); each stream is an independent sequence.
    Philox(uint64_t seed, uint64_t stream) : key_{seed, stream}, ctr_{0, 0, 0, 0} {}

    uint64_t next_u64() {
        if (idx_ == 4) {
            block_ = round10(ctr_, key_);
            // 256-bit counter increment
            for (int i = 0; i < 4; ++i) {
                if (++ctr_[i] != 0) break;
            }
            idx_ = 0;
        }
        return block_[idx_++];
    }

    // uniform on [0,1), 53-bit resolution
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform on the open interval (0,1); safe input for quantile transforms
    double uniform_open() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal() { return normal_icdf(uniform_open()); }

    // Wichura's AS241 (PPND16) rational approximation of the standard
    // normal quantile; deterministic across platforms given IEEE doubles.
    static double normal_icdf(double p) {
        const double q = p - 0.5;
        if (std::fabs(q) <= 0.425) {
            const double r = 0.180625 - q * q;
            return q *
                (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                      6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
                    1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
                  1.3314166789178437745e+2) * r + 3.3871328727963666080e+0) /
                (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                      3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
                    5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
                  4.2313330701600911252e+1) * r + 1.0);
        }
        double r = (q < 0.0) ? p : 1.0 - p;
        r = std::sqrt(-std::log(r));
        double v;
        if (r <= 5.0) {
            r -= 1.6;
            v = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                      2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
                    3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
                  4.63033784615654529590e+0) * r + 1.42343711074968357734e+0) /
                (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                      1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                    6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
                  2.05319162663775882187e+0) * r + 1.0);
        } else {
            r -= 5.0;
            v = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                      1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                    2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
                  5.46378491116411436990e+0) * r + 6.65790464350110377720e+0) /
                (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                      1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                    1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
                  5.99832206555887937690e-1) * r + 1.0);
        }
        return (q < 0.0) ? -v : v;
    }

private:
    using Block = std::array<uint64_t, 4>;

    static Block round10(Block c, std::array<uint64_t, 2> k) {
        constexpr uint64_t M0 = 0xD2E7470EE14C6C93ull;
        constexpr uint64_t M1 = 0xCA5A826395121157ull;
        constexpr uint64_t W0 = 0x9E3779B97F4A7C15ull;
        constexpr uint64_t W1 = 0xBB67AE8584CAA73Bull;
        for (int r = 0; r < 10; ++r) {
            if (r > 0) {
                k[0] += W0;
                k[1] += W1;
            }
            uint64_t hi0, lo0, hi1, lo1;
            detail::mulhilo64(M0, c[0], hi0, lo0);
            detail::mulhilo64(M1, c[2], hi1, lo1);
            c = Block{hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
        }
        return c;
    }

    std::array<uint64_t, 2> key_;
    Block ctr_;
    Block block_{};
    int idx_ = 4;
};

} // namespace qpanel
