#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "hsd/autodiff.hpp"

namespace testing_support {

namespace fs = std::filesystem;

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("hsd-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << content;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string source_path(const std::string& rel) { return std::string(HSD_SOURCE_DIR) + "/" + rel; }

struct RunResult {
  int code = -1;
  std::string out;
};

// Runs a shell command, capturing stdout (stderr goes to the test log).
inline RunResult run(const std::string& cmd) {
  RunResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::string cli() { return std::string("'") + HSD_CLI_PATH + "'"; }

// Largest relative error between the analytic gradient of `loss` and a
// central finite difference, over every entry of every parameter. The
// denominator has an absolute floor of 1e-3.
inline double max_grad_error(hsd::ad::Params params, const std::function<hsd::ad::Var()>& loss, double h = 1e-6) {
  hsd::ad::zero_grads(params);
  hsd::ad::backward(loss());
  double worst = 0.0;
  for (auto& p : params) {
    hsd::ad::Matrix g = p.var.grad();
    if (g.size() == 0) g = hsd::ad::Matrix::Zero(p.var.rows(), p.var.cols());
    for (Eigen::Index i = 0; i < p.var.value().size(); ++i) {
      double& x = p.var.mutable_value().data()[i];
      const double orig = x;
      x = orig + h;
      const double up = loss().scalar();
      x = orig - h;
      const double down = loss().scalar();
      x = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g.data()[i];
      const double diff = std::abs(numeric - analytic);
      // floor keeps finite-difference roundoff on near-zero entries from dominating
      worst = std::max(worst, diff / std::max(std::abs(numeric) + std::abs(analytic), 1e-3));
    }
  }
  hsd::ad::zero_grads(params);
  return worst;
}

}  // namespace testing_support
