#pragma once

// Shared plumbing: error types, deterministic random streams, content
// hashing, little-endian float I/O and an order-independent worker fan-out.

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace detwin {

using cplx = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSpeedOfLight = 299792458.0;
inline constexpr double kMetersPerDegree = 111320.0;
inline constexpr double kMetersPerNauticalMile = 1852.0;

// ---------------------------------------------------------------------------
// Errors

/// Invalid parameters, shapes or file contents supplied by the caller.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Degenerate platform/patch geometry (zero slant range).
class GeometryError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Operation called in the wrong lifecycle state (e.g. backward before forward).
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A model's preprocessing spec does not match the data it is applied to.
class CompatibilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class TrainingFailure : public std::runtime_error {
public:
    TrainingFailure(const std::string& what, int epoch)
        : std::runtime_error(what), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

// ---------------------------------------------------------------------------
// Random numbers

/// splitmix64 finaliser; used to derive independent per-sample seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Seed of sample `index` under `master`. Independent of worker count and schedule.
std::uint64_t stable_hash(std::uint64_t master, std::uint64_t index) noexcept;

/// mt19937_64 with portable uniform/normal transforms (the std distributions
/// are implementation-defined, which would break cross-platform bit-equality).
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal (Box-Muller, both values used).
    double normal();
    /// Circular complex Gaussian with E|z|^2 = 1.
    cplx complex_normal();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Hashing and binary I/O

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);

/// Serialises values as little-endian float32.
std::vector<std::uint8_t> to_f32_le(std::span<const double> values);
std::vector<std::uint8_t> to_f32_le(std::span<const float> values);
std::vector<float> from_f32_le(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Parallelism

/// Runs fn(i) for i in [0, n) on `workers` threads. Each index is processed
/// exactly once and callers write results by index, so output never depends
/// on the worker count. Exceptions are rethrown after all workers join.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace detwin
