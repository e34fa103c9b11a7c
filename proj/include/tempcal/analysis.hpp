#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adats.hpp"
#include "dataset.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "softmax.hpp"

namespace tempcal {

// ---------------------------------------------------------------------------
// Temperature gradient of the NLL
// ---------------------------------------------------------------------------

/// d/dt [-log softmax(s / t)_y] = (s_y - sum_i p_i s_i) / t^2, p = softmax(s / t).
/// Evaluated as sum_i p_i (s_y - s_i) / t^2, which avoids cancellation when p_y is near 1.
inline double nll_temperature_gradient(std::span<const double> s, std::size_t y, double t) {
    check_temperature(t);
    require(y < s.size(), "nll_temperature_gradient: class index out of range");
    const auto p = softmax_with_temperature(s, t);
    double g = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) g += p[i] * (s[y] - s[i]);
    return g / (t * t);
}

/// The closed form as it is commonly printed:
///   (1/t^2) (s_y sum_{i!=y} e^{s_i/t} - sum_{j!=y} s_j e^{s_j/t})
/// This omits the softmax normaliser: it equals
/// nll_temperature_gradient(s, y, t) * sum_i e^{s_i/t}. Kept only to document that factor.
inline double printed_temperature_gradient(std::span<const double> s, std::size_t y, double t) {
    check_temperature(t);
    require(y < s.size(), "printed_temperature_gradient: class index out of range");
    // s_y a - b regrouped as sum_{i!=y} e^{s_i/t} (s_y - s_i).
    double g = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != y) g += std::exp(s[i] / t) * (s[y] - s[i]);
    return g / (t * t);
}

// ---------------------------------------------------------------------------
// Last-layer softmax cross-entropy gradient
// ---------------------------------------------------------------------------

/// dL/dw for s = w^T x, L = -log softmax(s)_y, with w stored D x k row-major:
/// dL/dw[d][j] = x_d (softmax(s)_j - [j == y]).
inline std::vector<double> last_layer_grad(std::span<const double> w, std::span<const double> x, std::size_t y,
                                           std::size_t k) {
    const std::size_t D = x.size();
    require(w.size() == D * k, "last_layer_grad: weight matrix must be D x k");
    require(y < k, "last_layer_grad: class index out of range");
    std::vector<double> s(k, 0.0);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t j = 0; j < k; ++j) s[j] += w[d * k + j] * x[d];
    const auto delta = nn::softmax_ce_logit_grad(s, y);
    std::vector<double> g(D * k);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t j = 0; j < k; ++j) g[d * k + j] = x[d] * delta[j];
    return g;
}

/// max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|); 0 when both are zero.
inline double scaled_max_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    }
    return scale == 0.0 ? diff : diff / scale;
}

namespace detail {

inline long double last_layer_loss_ld(std::span<const double> w, std::span<const double> x, std::size_t y,
                                      std::size_t k, std::size_t perturbed, long double delta) {
    const std::size_t D = x.size();
    std::vector<long double> s(k, 0.0L);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t j = 0; j < k; ++j) {
            long double wij = w[d * k + j];
            if (d * k + j == perturbed) wij += delta;
            s[j] += wij * x[d];
        }
    long double mx = s[0];
    for (auto v : s) mx = std::max(mx, v);
    long double sum = 0.0L;
    for (auto v : s) sum += std::exp(v - mx);
    return -(s[y] - mx - std::log(sum));
}

}  // namespace detail

/// Analytic last-layer gradient vs central differences (h = 1e-5, extended
/// precision); returns scaled_max_error of the two.
inline double verify_last_layer_grad(std::span<const double> w, std::span<const double> x, std::size_t y,
                                     std::size_t k) {
    const auto analytic = last_layer_grad(w, x, y, k);
    std::vector<double> numeric(analytic.size());
    const long double h = 1e-5L;
    for (std::size_t p = 0; p < analytic.size(); ++p)
        numeric[p] = static_cast<double>(
            (detail::last_layer_loss_ld(w, x, y, k, p, h) - detail::last_layer_loss_ld(w, x, y, k, p, -h)) / (2 * h));
    return scaled_max_error(analytic, numeric);
}

// ---------------------------------------------------------------------------
// Probes on a trained model
// ---------------------------------------------------------------------------

struct InterpolationTrace {
    std::size_t class_i = 0, class_j = 0;
    std::vector<double> alphas;
    std::vector<double> temperatures;
};

inline std::vector<double> class_mean_feature(const CalibrationDataset& d, std::size_t cls) {
    std::vector<double> mean(d.feature_dim(), 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.label(i) != cls) continue;
        auto f = d.features(i);
        for (std::size_t a = 0; a < mean.size(); ++a) mean[a] += f[a];
        ++count;
    }
    if (count == 0) throw ValidationError("class " + std::to_string(cls) + " has no samples");
    for (auto& v : mean) v /= static_cast<double>(count);
    return mean;
}

/// Temperatures along alpha * mean_i + (1 - alpha) * mean_j for alpha = 0, 1/(steps-1), ..., 1.
inline InterpolationTrace class_mean_interpolation(const AdaTsModel& m, const CalibrationDataset& d,
                                                   std::size_t class_i, std::size_t class_j, std::size_t steps) {
    require(steps >= 2, "interpolation: need at least 2 steps");
    require(class_i < d.num_classes() && class_j < d.num_classes(), "interpolation: class index out of range");
    const auto mi = class_mean_feature(d, class_i);
    const auto mj = class_mean_feature(d, class_j);
    InterpolationTrace tr{class_i, class_j, {}, {}};
    std::vector<double> phi(mi.size());
    for (std::size_t s = 0; s < steps; ++s) {
        const double alpha = s + 1 == steps ? 1.0 : static_cast<double>(s) / static_cast<double>(steps - 1);
        for (std::size_t a = 0; a < phi.size(); ++a) phi[a] = alpha * mi[a] + (1.0 - alpha) * mj[a];
        tr.alphas.push_back(alpha);
        tr.temperatures.push_back(predict_temperature(m, phi));
    }
    return tr;
}

enum class Partition { by_class, by_correctness };

inline Partition parse_partition(const std::string& s) {
    if (s == "class") return Partition::by_class;
    if (s == "correctness") return Partition::by_correctness;
    throw UsageError("unknown partition '" + s + "' (expected class or correctness)");
}

struct TemperatureGroup {
    std::string name;
    std::vector<double> values;
    double mean = 0.0;
    double stddev = 0.0;  // population
};

struct TemperatureHistogram {
    Partition partition = Partition::by_class;
    std::vector<TemperatureGroup> groups;
};

/// Predicted temperatures grouped by true class, or into correct / incorrect
/// predictions. Empty groups are omitted.
inline TemperatureHistogram temperature_histogram(const AdaTsModel& m, const CalibrationDataset& d,
                                                  Partition partition) {
    const auto temps = calibrate(m, d).temperatures;
    TemperatureHistogram h;
    h.partition = partition;
    std::vector<TemperatureGroup> groups;
    if (partition == Partition::by_class) {
        groups.resize(d.num_classes());
        for (std::size_t c = 0; c < groups.size(); ++c) groups[c].name = "class_" + std::to_string(c);
        for (std::size_t i = 0; i < d.size(); ++i) groups[d.label(i)].values.push_back(temps[i]);
    } else {
        groups.resize(2);
        groups[0].name = "correct";
        groups[1].name = "incorrect";
        for (std::size_t i = 0; i < d.size(); ++i)
            groups[argmax(d.logits(i)) == d.label(i) ? 0 : 1].values.push_back(temps[i]);
    }
    for (auto& g : groups) {
        if (g.values.empty()) continue;
        const double n = static_cast<double>(g.values.size());
        for (double v : g.values) g.mean += v;
        g.mean /= n;
        for (double v : g.values) g.stddev += (v - g.mean) * (v - g.mean);
        g.stddev = std::sqrt(g.stddev / n);
        h.groups.push_back(std::move(g));
    }
    return h;
}

inline nlohmann::json to_json(const InterpolationTrace& t) {
    return {{"kind", "interpolation"},
            {"class_pair", {t.class_i, t.class_j}},
            {"alphas", t.alphas},
            {"temperatures", t.temperatures}};
}

inline void write_csv(std::ostream& os, const InterpolationTrace& t) {
    os << "class_i,class_j,alpha,temperature\n";
    os.precision(17);
    for (std::size_t s = 0; s < t.alphas.size(); ++s)
        os << t.class_i << ',' << t.class_j << ',' << t.alphas[s] << ',' << t.temperatures[s] << '\n';
}

inline nlohmann::json to_json(const TemperatureHistogram& h) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : h.groups)
        groups.push_back({{"name", g.name}, {"count", g.values.size()}, {"mean", g.mean}, {"std", g.stddev},
                          {"values", g.values}});
    return {{"kind", "temperature_histogram"},
            {"partition", h.partition == Partition::by_class ? "class" : "correctness"},
            {"groups", groups}};
}

inline void write_csv(std::ostream& os, const TemperatureHistogram& h) {
    os << "group,temperature\n";
    os.precision(17);
    for (const auto& g : h.groups)
        for (double v : g.values) os << g.name << ',' << v << '\n';
}

/// CSV: sample,label,correct,contribution,z0..z{dz-1}. Contributions are
/// contribution_histogram(d, temps, bins); latents are posterior means.
inline void write_latents_csv(std::ostream& os, const AdaTsModel& m, const CalibrationDataset& d,
                              const Temperatures& temps = 1.0, std::size_t bins = kDefaultBins) {
    require(d.feature_dim() == m.d, "export_latents: feature dimension mismatch");
    const auto contrib = contribution_histogram(d, temps, bins);
    os << "sample,label,correct,contribution";
    for (std::size_t a = 0; a < m.dz; ++a) os << ",z" << a;
    os << '\n';
    os.precision(17);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto post = encode(m, d.features(i));
        os << i << ',' << d.label(i) << ',' << (argmax(d.logits(i)) == d.label(i) ? 1 : 0) << ','
           << contrib.per_sample[i];
        for (double v : post.mean) os << ',' << v;
        os << '\n';
    }
}

inline void export_latents(const AdaTsModel& m, const CalibrationDataset& d, const std::filesystem::path& path,
                           const Temperatures& temps = 1.0, std::size_t bins = kDefaultBins) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    write_latents_csv(out, m, d, temps, bins);
    if (!out) throw Error("write failed for " + path.string());
}

}  // namespace tempcal
