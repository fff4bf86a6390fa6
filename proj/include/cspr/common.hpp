#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cspr {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Precondition / contract violations (bad arguments, broken invariants).
struct ContractError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values detected during numeric evaluation.
struct NumericError : Error {
    using Error::Error;
};

// File / wire format problems (bad magic, truncation, CRC mismatch).
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Synthetic data generation failures (placement retries exhausted, empty patch).
struct GenerationError : Error {
    using Error::Error;
};

// Deterministic seed mixing (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Seeded generator with explicit output algorithms so that streams are a pure
// function of the seed within a build.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(mix_seed(seed)) {}

    std::uint64_t next_u64() {
        // xorshift64* on a splitmix-initialized state
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dULL;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    double normal(double mean = 0.0, double sigma = 1.0);

    Rng fork(std::uint64_t stream) { return Rng(mix_seed(next_u64(), stream)); }

  private:
    std::uint64_t state_;
};

// CRC-32 (IEEE, reflected polynomial 0xEDB88320).
std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed = 0);
std::uint32_t crc32(const std::vector<std::uint8_t>& data);

// Little-endian byte buffer writer/reader for the binary file formats.
class BinWriter {
  public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f64(double v);
    void bytes(const void* p, std::size_t n);
    void str(const std::string& s) { bytes(s.data(), s.size()); }
    // appends crc32 of everything written so far
    void finish_crc();
    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    void write_file(const std::string& path) const;

  private:
    std::vector<std::uint8_t> buf_;
};

class BinReader {
  public:
    explicit BinReader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}
    static BinReader from_file(const std::string& path);

    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string str(std::size_t n);
    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }
    // validates that the last 4 bytes are the crc32 of everything before them;
    // must be called before consuming, it only inspects the tail
    void check_crc(const std::string& what) const;

  private:
    void need(std::size_t n) const;
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

}  // namespace cspr
