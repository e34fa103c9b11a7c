#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "random.hpp"

namespace tempcal {

/// Payload shorter than the header declares.
class LengthError : public FormatError {
public:
    using FormatError::FormatError;
};

/// N samples of (feature vector, logit vector, label).
///
/// Values are held as doubles but rounded to single precision on
/// construction, which is the on-disk precision. This keeps
/// read(write(d)) == d exact for every dataset the type can hold.
class CalibrationDataset {
public:
    CalibrationDataset(std::size_t n, std::size_t d, std::size_t k, std::vector<double> features,
                       std::vector<double> logits, std::vector<std::uint32_t> labels)
        : n_(n), d_(d), k_(k), features_(std::move(features)), logits_(std::move(logits)),
          labels_(std::move(labels)) {
        require(n_ >= 1, "dataset: n must be at least 1");
        require(d_ >= 1, "dataset: feature dimension d must be at least 1");
        require(k_ >= 2, "dataset: class count k must be at least 2");
        require(features_.size() == n_ * d_, "dataset: features must have n*d entries");
        require(logits_.size() == n_ * k_, "dataset: logits must have n*k entries");
        require(labels_.size() == n_, "dataset: labels must have n entries");
        for (std::size_t i = 0; i < n_; ++i) {
            if (labels_[i] >= k_) {
                throw ValidationError("dataset: label " + std::to_string(labels_[i]) + " at row " +
                                      std::to_string(i) + " is not below k=" + std::to_string(k_));
            }
        }
        quantize(features_, d_, "feature");
        quantize(logits_, k_, "logit");
    }

    std::size_t size() const { return n_; }
    std::size_t feature_dim() const { return d_; }
    std::size_t num_classes() const { return k_; }

    std::span<const double> features(std::size_t i) const { return {features_.data() + i * d_, d_}; }
    std::span<const double> logits(std::size_t i) const { return {logits_.data() + i * k_, k_}; }
    std::uint32_t label(std::size_t i) const { return labels_[i]; }

    const std::vector<double>& feature_matrix() const { return features_; }
    const std::vector<double>& logit_matrix() const { return logits_; }
    const std::vector<std::uint32_t>& labels() const { return labels_; }

    friend bool operator==(const CalibrationDataset&, const CalibrationDataset&) = default;

private:
    void quantize(std::vector<double>& values, std::size_t width, const char* what) const {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double v = static_cast<double>(static_cast<float>(values[i]));
            if (!std::isfinite(v)) {
                throw ValidationError(std::string("dataset: non-finite ") + what + " at row " +
                                      std::to_string(i / width));
            }
            values[i] = v;
        }
    }

    std::size_t n_, d_, k_;
    std::vector<double> features_;
    std::vector<double> logits_;
    std::vector<std::uint32_t> labels_;
};

/// Rows `indices` of `d`, in the given order.
inline CalibrationDataset subset(const CalibrationDataset& d, std::span<const std::size_t> indices) {
    std::vector<double> f, s;
    std::vector<std::uint32_t> y;
    f.reserve(indices.size() * d.feature_dim());
    s.reserve(indices.size() * d.num_classes());
    y.reserve(indices.size());
    for (auto i : indices) {
        require(i < d.size(), "subset: index out of range");
        auto fi = d.features(i);
        auto si = d.logits(i);
        f.insert(f.end(), fi.begin(), fi.end());
        s.insert(s.end(), si.begin(), si.end());
        y.push_back(d.label(i));
    }
    return {indices.size(), d.feature_dim(), d.num_classes(), std::move(f), std::move(s), std::move(y)};
}

// ---------------------------------------------------------------------------
// CALD binary format (little-endian)
//
//   offset  size  field
//        0     4  magic "CALD"
//        4     2  version (u16) = 1
//        6     2  reserved (u16) = 0
//        8     8  n (u64)
//       16     4  d (u32)
//       20     4  k (u32)
//       24        n*d f32 features, row-major
//                 n*k f32 logits, row-major
//                 n   u32 labels
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kCaldVersion = 1;
inline constexpr std::size_t kCaldHeaderSize = 24;

namespace detail {

inline void put_le(std::vector<unsigned char>& out, std::uint64_t v, int bytes) {
    for (int b = 0; b < bytes; ++b) out.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xffu));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
    std::uint64_t v = 0;
    for (int b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
    return v;
}

}  // namespace detail

inline std::vector<unsigned char> encode_cald(const CalibrationDataset& d) {
    require(d.feature_dim() <= UINT32_MAX && d.num_classes() <= UINT32_MAX, "CALD: dimension exceeds u32");
    std::vector<unsigned char> out;
    out.reserve(kCaldHeaderSize + 4 * d.size() * (d.feature_dim() + d.num_classes() + 1));
    for (char c : {'C', 'A', 'L', 'D'}) out.push_back(static_cast<unsigned char>(c));
    detail::put_le(out, kCaldVersion, 2);
    detail::put_le(out, 0, 2);
    detail::put_le(out, d.size(), 8);
    detail::put_le(out, d.feature_dim(), 4);
    detail::put_le(out, d.num_classes(), 4);
    for (double v : d.feature_matrix()) detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    for (double v : d.logit_matrix()) detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    for (auto y : d.labels()) detail::put_le(out, y, 4);
    return out;
}

inline CalibrationDataset decode_cald(std::span<const unsigned char> bytes) {
    if (bytes.size() < kCaldHeaderSize) throw LengthError("CALD: file shorter than the 24-byte header");
    if (std::memcmp(bytes.data(), "CALD", 4) != 0) throw FormatError("CALD: bad magic");
    const auto version = detail::get_le(bytes.data() + 4, 2);
    if (version != kCaldVersion) throw FormatError("CALD: unsupported version " + std::to_string(version));
    if (detail::get_le(bytes.data() + 6, 2) != 0) throw FormatError("CALD: reserved field is not zero");
    const std::uint64_t n = detail::get_le(bytes.data() + 8, 8);
    const std::uint64_t d = detail::get_le(bytes.data() + 16, 4);
    const std::uint64_t k = detail::get_le(bytes.data() + 20, 4);

    // Guard the payload-size product against overflow before comparing.
    const std::uint64_t row_words = d + k + 1;
    const std::uint64_t avail = bytes.size() - kCaldHeaderSize;
    if (n != 0 && row_words > avail / 4 / n) {
        throw LengthError("CALD: payload truncated (header declares n=" + std::to_string(n) + ")");
    }
    const std::uint64_t payload = 4 * n * row_words;
    if (avail != payload) {
        throw FormatError("CALD: " + std::to_string(avail - payload) + " trailing bytes after payload");
    }

    const unsigned char* p = bytes.data() + kCaldHeaderSize;
    auto read_f32 = [&p] {
        const float f = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p, 4)));
        p += 4;
        return static_cast<double>(f);
    };
    std::vector<double> features(n * d), logits(n * k);
    std::vector<std::uint32_t> labels(n);
    for (auto& v : features) v = read_f32();
    for (auto& v : logits) v = read_f32();
    for (auto& y : labels) {
        y = static_cast<std::uint32_t>(detail::get_le(p, 4));
        p += 4;
    }
    return {n, d, k, std::move(features), std::move(logits), std::move(labels)};
}

inline CalibrationDataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("CALD: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_cald(bytes);
}

inline void write_dataset(const CalibrationDataset& d, const std::filesystem::path& path) {
    const auto bytes = encode_cald(d);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("CALD: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("CALD: write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct DatasetSplit {
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> holdout_indices;

    friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

/// Uniform shuffle (Rng::shuffle) of 0..n-1; the first round(f*n) indices,
/// clamped to [1, n-1], form the holdout. Both halves are returned sorted.
inline DatasetSplit split_dataset(const CalibrationDataset& d, double holdout_fraction, std::uint64_t seed) {
    const std::size_t n = d.size();
    require(n >= 2, "split: need at least 2 samples");
    require(holdout_fraction > 0.0 && holdout_fraction < 1.0, "split: holdout fraction must be in (0, 1)");
    auto h = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(n)));
    h = std::clamp<std::size_t>(h, 1, n - 1);

    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);

    DatasetSplit s;
    s.holdout_indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(h));
    s.train_indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(h), idx.end());
    std::sort(s.holdout_indices.begin(), s.holdout_indices.end());
    std::sort(s.train_indices.begin(), s.train_indices.end());
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// One region of feature space with its own overconfidence factor.
///
/// Inside a regime, class y has diagonal Gaussian features centred at
/// offset + separation * e_(y mod d) with per-dimension std `sigma`.
/// The regime's true posterior p(y | x) is the Bayes posterior of that
/// mixture under a uniform class prior.
struct SyntheticRegime {
    double weight = 1.0;
    std::vector<double> offset;  // d entries
    double separation = 2.0;
    std::vector<double> sigma;   // d entries, all > 0
    double inflation = 1.0;      // logits = inflation * log p(y | x)
};

struct SyntheticSpec {
    std::size_t num_classes = 4;
    std::size_t feature_dim = 9;
    std::size_t num_samples = 1000;
    std::vector<SyntheticRegime> regimes;
};

struct SyntheticData {
    CalibrationDataset dataset;
    std::vector<std::uint32_t> regime;  // regime index per sample
};

inline void validate(const SyntheticSpec& spec) {
    require(spec.num_classes >= 2, "synthetic: k must be at least 2");
    require(spec.feature_dim >= 1, "synthetic: d must be at least 1");
    require(spec.num_samples >= 1, "synthetic: n must be at least 1");
    require(!spec.regimes.empty(), "synthetic: at least one regime required");
    double total = 0.0;
    for (const auto& r : spec.regimes) {
        require(r.weight >= 0.0 && std::isfinite(r.weight), "synthetic: regime weight must be >= 0");
        require(r.inflation >= 0.0 && std::isfinite(r.inflation), "synthetic: inflation must be >= 0");
        require(r.offset.size() == spec.feature_dim, "synthetic: offset must have d entries");
        require(r.sigma.size() == spec.feature_dim, "synthetic: sigma must have d entries");
        for (double s : r.sigma) require(s > 0.0 && std::isfinite(s), "synthetic: covariance must be positive");
        total += r.weight;
    }
    require(total > 0.0, "synthetic: regime weights sum to zero");
}

/// Exact log p(y | x) for every class of a regime, written into `out`.
inline void regime_log_posterior(const SyntheticRegime& r, std::size_t k, std::span<const double> x,
                                 std::span<double> out) {
    const std::size_t d = x.size();
    for (std::size_t y = 0; y < k; ++y) {
        double ll = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double mean = r.offset[i] + (i == y % d ? r.separation : 0.0);
            const double z = (x[i] - mean) / r.sigma[i];
            ll -= 0.5 * z * z;
        }
        out[y] = ll;
    }
    double mx = out[0];
    for (std::size_t y = 1; y < k; ++y) mx = std::max(mx, out[y]);
    double sum = 0.0;
    for (std::size_t y = 0; y < k; ++y) sum += std::exp(out[y] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t y = 0; y < k; ++y) out[y] -= lse;
}

inline SyntheticData generate_synthetic_with_regimes(const SyntheticSpec& spec, std::uint64_t seed) {
    validate(spec);
    const std::size_t n = spec.num_samples, d = spec.feature_dim, k = spec.num_classes;
    double total = 0.0;
    for (const auto& r : spec.regimes) total += r.weight;

    Rng rng(seed);
    std::vector<double> features(n * d), logits(n * k);
    std::vector<std::uint32_t> labels(n), regime(n);
    std::vector<double> logpost(k);
    for (std::size_t s = 0; s < n; ++s) {
        double u = rng.uniform() * total;
        std::size_t j = 0;
        while (j + 1 < spec.regimes.size() && u >= spec.regimes[j].weight) {
            u -= spec.regimes[j].weight;
            ++j;
        }
        const auto& r = spec.regimes[j];
        const auto generating_class = static_cast<std::size_t>(rng.below(k));
        std::span<double> x(features.data() + s * d, d);
        for (std::size_t i = 0; i < d; ++i) {
            const double mean = r.offset[i] + (i == generating_class % d ? r.separation : 0.0);
            // Round to storage precision first so the posterior is exact for the stored point.
            x[i] = static_cast<double>(static_cast<float>(mean + r.sigma[i] * rng.normal()));
        }
        regime_log_posterior(r, k, x, logpost);

        double v = rng.uniform();
        std::size_t label = k - 1;
        for (std::size_t y = 0; y < k; ++y) {
            v -= std::exp(logpost[y]);
            if (v < 0.0) {
                label = y;
                break;
            }
        }
        for (std::size_t y = 0; y < k; ++y) logits[s * k + y] = r.inflation * logpost[y];
        labels[s] = static_cast<std::uint32_t>(label);
        regime[s] = static_cast<std::uint32_t>(j);
    }
    return {CalibrationDataset(n, d, k, std::move(features), std::move(logits), std::move(labels)),
            std::move(regime)};
}

inline CalibrationDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    return generate_synthetic_with_regimes(spec, seed).dataset;
}

/// One regime, k=4, d=9, separation 2, unit sigma, the given inflation.
inline SyntheticSpec single_regime_spec(double inflation, std::size_t n) {
    SyntheticSpec spec;
    spec.num_samples = n;
    spec.regimes.push_back({1.0, std::vector<double>(spec.feature_dim, 0.0), 2.0,
                            std::vector<double>(spec.feature_dim, 1.0), inflation});
    return spec;
}

/// Two equally likely regimes: a calibrated one (inflation 1, separation 2)
/// and a harder, overconfident one (inflation 3, separation 1.5) shifted by
/// 8 along the last feature axis.
inline SyntheticSpec two_regime_spec(std::size_t n, double inflation_a = 1.0, double inflation_b = 3.0) {
    SyntheticSpec spec;
    spec.num_samples = n;
    const std::size_t d = spec.feature_dim;
    std::vector<double> shifted(d, 0.0);
    shifted[d - 1] = 8.0;
    spec.regimes.push_back({1.0, std::vector<double>(d, 0.0), 2.0, std::vector<double>(d, 1.0), inflation_a});
    spec.regimes.push_back({1.0, shifted, 1.5, std::vector<double>(d, 1.0), inflation_b});
    return spec;
}

}  // namespace tempcal
