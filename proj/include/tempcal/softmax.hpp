#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "error.hpp"

namespace tempcal {

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

inline void check_temperature(double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ValidationError("temperature must be positive and finite");
}

/// log sum_i exp(s_i / t), max-shifted.
inline double log_sum_exp(std::span<const double> s, double t = 1.0) {
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : s) sum += std::exp((v - mx) / t);
    return mx / t + std::log(sum);
}

/// p_j = exp(s_j / t) / sum_i exp(s_i / t).
inline void softmax_with_temperature(std::span<const double> s, double t, std::span<double> out) {
    check_temperature(t);
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
        out[j] = std::exp((s[j] - mx) / t);
        sum += out[j];
    }
    for (std::size_t j = 0; j < s.size(); ++j) out[j] /= sum;
}

inline std::vector<double> softmax_with_temperature(std::span<const double> s, double t) {
    std::vector<double> p(s.size());
    softmax_with_temperature(s, t, p);
    return p;
}

inline std::vector<double> softmax(std::span<const double> s) { return softmax_with_temperature(s, 1.0); }

/// log softmax(s / t)_y without forming the probabilities.
inline double log_softmax_at(std::span<const double> s, double t, std::size_t y) {
    check_temperature(t);
    return s[y] / t - log_sum_exp(s, t);
}

/// Shannon entropy in nats, with 0 log 0 = 0.
inline double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

}  // namespace tempcal
