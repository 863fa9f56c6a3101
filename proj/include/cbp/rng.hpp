#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <random>
#include <string>

namespace cbp {

// Deterministic standard-normal stream. Box-Muller over mt19937_64 so the
// byte-for-byte sequence does not depend on the standard library's
// distribution internals.
class GaussianRng {
 public:
  explicit GaussianRng(std::uint64_t seed) : eng_(seed) {}

  double uniform() {
    // 53-bit mantissa uniform in (0, 1]
    return (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return eng_() % n; }

  std::mt19937_64& engine() { return eng_; }

  void save(std::ostream& os) const {
    os << eng_ << "\n" << (has_spare_ ? 1 : 0) << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%a", spare_);
    os << buf << "\n";
  }

  void load(std::istream& is) {
    is >> eng_;
    int hs = 0;
    is >> hs;
    has_spare_ = hs != 0;
    std::string s;
    is >> s;
    spare_ = std::strtod(s.c_str(), nullptr);
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_{false};
  double spare_{0.0};
};

}  // namespace cbp
