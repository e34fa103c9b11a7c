#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include <tempcal/dataset.hpp>
#include <tempcal/random.hpp>

namespace testutil {

/// Random dataset. With `discrete` the logits come from {0, 1, 2}, which
/// produces exact duplicate rows and hence tied confidences.
inline tempcal::CalibrationDataset random_dataset(tempcal::Rng& rng, std::size_t n, std::size_t k, std::size_t d,
                                                  double sigma, bool discrete = false) {
    std::vector<double> f(n * d), s(n * k);
    std::vector<std::uint32_t> y(n);
    for (auto& v : f) v = rng.normal();
    for (auto& v : s) v = discrete ? static_cast<double>(rng.below(3)) : sigma * rng.normal();
    for (auto& v : y) v = static_cast<std::uint32_t>(rng.below(k));
    return {n, d, k, std::move(f), std::move(s), std::move(y)};
}

/// Per-sample temperatures in [lo, hi], log-uniform.
inline std::vector<double> random_temperatures(tempcal::Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> t(n);
    for (auto& v : t) v = std::exp(std::log(lo) + rng.uniform() * (std::log(hi) - std::log(lo)));
    return t;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("tempcal_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
