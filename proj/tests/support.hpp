#pragma once

// Shared test helpers: temp directories, central finite differences, and
// small fixtures.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cem/tensor.hpp"

namespace cem::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("cem-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

struct GradientSample {
  int param = 0;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool ok = false;
};

// Compares reverse-mode gradients against central differences at `samples`
// randomly chosen scalar coordinates. `loss` must compute the same scalar
// with or without a gradient sink. `include` restricts sampling by
// parameter name.
inline std::vector<GradientSample> check_gradients(ag::ParamStore& store,
                                                   const std::function<double(ag::Gradients*)>& loss, int samples,
                                                   std::uint64_t seed, double eps = 1e-5, double rtol = 1e-4,
                                                   double atol = 1e-9,
                                                   const std::function<bool(const std::string&)>& include = {}) {
  ag::Gradients grads(store);
  loss(&grads);
  std::mt19937_64 rng(seed);
  std::vector<std::pair<int, Eigen::Index>> coords;
  for (int p = 0; p < store.size(); ++p)
    if (!include || include(store.name(p)))
      for (Eigen::Index i = 0; i < store.value(p).size(); ++i) coords.emplace_back(p, i);
  std::vector<GradientSample> out;
  for (int s = 0; s < samples; ++s) {
    auto [p, i] = coords[rng() % coords.size()];
    double& x = store.value(p).data()[i];
    const double x0 = x;
    x = x0 + eps;
    double up = loss(nullptr);
    x = x0 - eps;
    double down = loss(nullptr);
    x = x0;
    GradientSample g;
    g.param = p;
    g.index = i;
    g.analytic = grads.has(p) ? grads.get(p)->data()[i] : 0.0;
    g.numeric = (up - down) / (2.0 * eps);
    g.ok = std::abs(g.analytic - g.numeric) <= rtol * std::max(std::abs(g.analytic), std::abs(g.numeric)) + atol;
    out.push_back(g);
  }
  return out;
}

}  // namespace cem::testing
