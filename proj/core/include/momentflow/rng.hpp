#pragma once

#include <cstdint>

#include "momentflow/matrix.hpp"

namespace momentflow {

/// Counter-based random generator with explicit streams.
///
/// Output at position n is a pure function of (seed, stream, n), so a fixed
/// (seed, stream) pair is bit-reproducible across runs and platforms, and
/// distinct streams share no state. `split` derives an independent stream;
/// the Monte-Carlo oracle keys one stream per sample index.
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0);

    /// Next raw 64-bit word; advances the counter.
    std::uint64_t next_u64();

    /// Uniform draw in (0, 1].
    double next_uniform();

    /// Standard normal draw (inverse-CDF transform of next_uniform).
    double next_normal();

    /// Independent generator for sub-stream `substream` of this stream.
    SeededRng split(std::uint64_t substream) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

  private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t key_ = 0;      // mixed (seed, stream)
    std::uint64_t counter_ = 0;  // advances by one word per draw
};

/// n i.i.d. standard normal draws from `rng` (advances it).
Vector standard_normal(SeededRng& rng, std::size_t n);

/// Inverse standard normal CDF (Wichura's AS241, double precision).
double inverse_normal_cdf(double p);

}  // namespace momentflow
