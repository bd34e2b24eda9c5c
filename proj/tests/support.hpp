#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lcmigrate/raster.hpp"
#include "lcmigrate/samples.hpp"

namespace testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("lcmigrate_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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

inline std::vector<lcmigrate::BandSpec> plain_bands(std::size_t n) {
  std::vector<lcmigrate::BandSpec> bands;
  for (std::size_t b = 0; b < n; ++b) bands.push_back({"b" + std::to_string(b), std::nullopt, std::nullopt});
  return bands;
}

inline lcmigrate::GeoTransform unit_transform() { return {0.0, 0.0, 1.0, -1.0}; }

/// Stack with iid standard normal values.
inline lcmigrate::RasterStack gaussian_stack(std::size_t w, std::size_t h, std::size_t bands, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<float> data(w * h * bands);
  for (auto& v : data) v = static_cast<float>(n01(rng));
  return lcmigrate::RasterStack(w, h, plain_bands(bands), std::move(data), unit_transform());
}

/// Stack from an (N pixels x B bands) matrix, values rounded to float.
inline lcmigrate::RasterStack stack_from_pixels(std::size_t w, std::size_t h, const Eigen::MatrixXd& px) {
  std::vector<float> data(static_cast<std::size_t>(px.size()));
  const auto n = static_cast<std::size_t>(px.rows());
  for (Eigen::Index b = 0; b < px.cols(); ++b) {
    for (Eigen::Index p = 0; p < px.rows(); ++p) data[static_cast<std::size_t>(b) * n + static_cast<std::size_t>(p)] = static_cast<float>(px(p, b));
  }
  return lcmigrate::RasterStack(w, h, plain_bands(static_cast<std::size_t>(px.cols())), std::move(data), unit_transform());
}

inline Eigen::MatrixXd gaussian_pixels(std::size_t n, std::size_t bands, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(bands));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = n01(rng);
  }
  return m;
}

inline lcmigrate::Legend legend_of(int n) {
  lcmigrate::Legend l;
  for (int c = 0; c < n; ++c) l[c] = "c" + std::to_string(c);
  return l;
}

/// Runs the command-line tool and returns its exit status.
inline int run_cli(const std::string& args) {
  const std::string cmd = std::string(LCMIGRATE_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Runs the command-line tool with stderr redirected to `err_file`.
inline int run_cli_stderr(const std::string& args, const std::filesystem::path& err_file) {
  const std::string cmd = std::string(LCMIGRATE_CLI) + " " + args + " > /dev/null 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace testing
