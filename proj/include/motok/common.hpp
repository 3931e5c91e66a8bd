#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace motok {

// Error taxonomy; the CLI maps kinds onto its exit codes.
enum class ErrorKind { kConfig, kDependency, kIo, kNumeric, kDomain };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const { return kind_; }
  const std::string& code() const { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

[[noreturn]] inline void fail(ErrorKind kind, std::string code, const std::string& message) {
  throw Error(kind, std::move(code), message);
}

[[noreturn]] inline void fail_domain(std::string code, const std::string& message) {
  fail(ErrorKind::kDomain, std::move(code), message);
}

inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(uint64_t value, uint64_t h) {
  for (int i = 0; i < 8; ++i) {
    h ^= (value >> (8 * i)) & 0xffu;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Deterministic RNG with fully serializable state (engine plus the cached
// Box-Muller spare), so training can resume bit-exact.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(engine_() % span);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double k = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * k;
    has_spare_ = true;
    return u * k;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Child stream derived from the parent seed and a tag; independent of the
  // parent's draw position.
  Rng fork(std::string_view tag) const {
    return Rng(fnv1a64(tag, fnv1a64(seed_, 0xcbf29ce484222325ull)));
  }

  // The cached Box-Muller spare travels as a bit pattern so the round trip
  // is exact.
  void serialize(std::ostream& os) const {
    os << engine_ << ' ' << seed_ << ' ' << (has_spare_ ? 1 : 0) << ' '
       << std::bit_cast<uint64_t>(spare_);
  }

  void deserialize(std::istream& is) {
    int spare_flag = 0;
    uint64_t spare_bits = 0;
    is >> engine_ >> seed_ >> spare_flag >> spare_bits;
    has_spare_ = spare_flag != 0;
    spare_ = std::bit_cast<double>(spare_bits);
    if (!is) fail(ErrorKind::kIo, "CorruptFile", "bad rng state");
  }

  std::string state_string() const {
    std::ostringstream os;
    serialize(os);
    return os.str();
  }

  void restore_state(const std::string& s) {
    std::istringstream is(s);
    deserialize(is);
  }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

int num_threads();
void set_num_threads(int n);

}  // namespace motok
