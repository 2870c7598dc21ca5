#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "figrot/tensor.hpp"

namespace testing {

template <typename T>
figrot::Tensor<T> random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  figrot::Tensor<T> t(rows, cols);
  for (auto& v : t.storage()) v = static_cast<T>(n(rng));
  return t;
}

template <typename T>
figrot::Tensor<T> unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  auto t = random_tensor<T>(rows, cols, rng);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0;
    for (T v : t.row(r)) ss += double(v) * double(v);
    const double n = std::sqrt(ss);
    for (T& v : t.row(r)) v = static_cast<T>(double(v) / n);
  }
  return t;
}

inline double row_norm(std::span<const float> r) {
  double ss = 0;
  for (float v : r) ss += double(v) * double(v);
  return std::sqrt(ss);
}

inline double row_norm(std::span<const double> r) {
  double ss = 0;
  for (double v : r) ss += v * v;
  return std::sqrt(ss);
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("figrot_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

}  // namespace testing

