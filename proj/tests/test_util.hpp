#pragma once

#include <cstdint>
#include <fstream>
#include <iterator>
#include <filesystem>
#include <string>
#include <vector>

#include "moediag/rng.hpp"

namespace moediag::testing {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("moediag_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::uint64_t> random_counts(Rng& rng, std::size_t n, std::uint64_t max_count,
                                                double zero_rate = 0.2) {
  std::vector<std::uint64_t> c(n);
  bool any = false;
  for (auto& x : c) {
    x = rng.uniform() < zero_rate ? 0 : rng.below(max_count + 1);
    any = any || x > 0;
  }
  if (!any) c[rng.below(n)] = 1 + rng.below(max_count);
  return c;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace moediag::testing
