#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "softmax.hpp"

namespace tempcal {

inline constexpr int kDefaultBins = 15;

/// One temperature for every sample, or one per sample.
class Temperatures {
public:
    Temperatures(double t) : values_{t} { check_temperature(t); }  // NOLINT: implicit by intent
    Temperatures(std::vector<double> per_sample) : values_(std::move(per_sample)) {  // NOLINT
        for (double t : values_) check_temperature(t);
    }

    double operator[](std::size_t i) const { return values_.size() == 1 ? values_[0] : values_[i]; }
    bool is_constant() const { return values_.size() == 1; }

    void check_size(std::size_t n) const {
        if (values_.size() != 1 && values_.size() != n)
            throw ValidationError("temperatures: expected 1 or " + std::to_string(n) + " values, got " +
                                  std::to_string(values_.size()));
    }

private:
    std::vector<double> values_;
};

struct Predictions {
    std::vector<double> confidence;
    std::vector<std::uint8_t> correct;
    std::vector<std::uint32_t> predicted;
};

/// max softmax(s / T) = 1 / sum_j exp((s_j - max) / T), summed over the
/// sorted logits so that permuted rows give bit-identical confidences.
inline double max_probability(std::span<const double> s, double t, std::vector<double>& scratch) {
    check_temperature(t);
    scratch.assign(s.begin(), s.end());
    std::sort(scratch.begin(), scratch.end());
    const double mx = scratch.back();
    double z = 0.0;
    for (double v : scratch) z += std::exp((v - mx) / t);
    return 1.0 / z;
}

/// confidence_i = max softmax(s_i / T_i); correctness uses argmax of the raw logits.
inline Predictions confidences_and_correctness(const CalibrationDataset& d, const Temperatures& temps) {
    temps.check_size(d.size());
    Predictions out;
    out.confidence.resize(d.size());
    out.correct.resize(d.size());
    out.predicted.resize(d.size());
    std::vector<double> scratch;
    for (std::size_t i = 0; i < d.size(); ++i) {
        auto s = d.logits(i);
        const auto pred = argmax(s);
        out.predicted[i] = static_cast<std::uint32_t>(pred);
        out.confidence[i] = max_probability(s, temps[i], scratch);
        out.correct[i] = pred == d.label(i) ? 1 : 0;
    }
    return out;
}

inline std::vector<std::uint32_t> predicted_labels(const CalibrationDataset& d) {
    std::vector<std::uint32_t> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<std::uint32_t>(argmax(d.logits(i)));
    return out;
}

inline double accuracy(const CalibrationDataset& d) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < d.size(); ++i) hits += argmax(d.logits(i)) == d.label(i);
    return static_cast<double>(hits) / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Binning
// ---------------------------------------------------------------------------

enum class BinScheme { equal_width, equal_mass };

struct ReliabilityBin {
    double lower = 0.0;
    double upper = 0.0;
    std::size_t count = 0;
    double mean_confidence = 0.0;
    double accuracy = 0.0;
};

struct ReliabilityDiagram {
    std::vector<ReliabilityBin> bins;
    BinScheme scheme = BinScheme::equal_width;
    std::size_t total = 0;
    std::vector<std::size_t> assignment;  // bin index per sample
};

/// Equal-width bin for a confidence: bin i covers [i/B, (i+1)/B), last bin closed at 1.
inline std::size_t equal_width_bin(double conf, std::size_t bins) {
    const double b = static_cast<double>(bins);
    auto idx = static_cast<std::size_t>(std::clamp(std::floor(conf * b), 0.0, b - 1.0));
    // conf * B can round across an edge; the edge values i/B are authoritative.
    if (idx > 0 && conf < static_cast<double>(idx) / b) --idx;
    if (idx + 1 < bins && conf >= static_cast<double>(idx + 1) / b) ++idx;
    return idx;
}

inline ReliabilityDiagram reliability_from(std::span<const double> confidence,
                                           std::span<const std::uint8_t> correct, std::size_t bins,
                                           BinScheme scheme) {
    const std::size_t n = confidence.size();
    require(n == correct.size(), "reliability: confidence/correctness length mismatch");
    require(n >= 1, "reliability: no samples");
    require(bins >= 1, "reliability: bins must be at least 1");

    ReliabilityDiagram r;
    r.scheme = scheme;
    r.total = n;
    r.bins.resize(bins);
    r.assignment.resize(n);

    if (scheme == BinScheme::equal_width) {
        for (std::size_t b = 0; b < bins; ++b) {
            r.bins[b].lower = static_cast<double>(b) / static_cast<double>(bins);
            r.bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(bins);
        }
        for (std::size_t i = 0; i < n; ++i) r.assignment[i] = equal_width_bin(confidence[i], bins);
    } else {
        if (bins > n)
            throw ValidationError("equal-mass binning: bins (" + std::to_string(bins) + ") exceeds n (" +
                                  std::to_string(n) + ")");
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return confidence[a] < confidence[b]; });
        // Group b holds sorted ranks [floor(b n / B), floor((b+1) n / B)).
        for (std::size_t b = 0; b < bins; ++b) {
            const std::size_t lo = b * n / bins, hi = (b + 1) * n / bins;
            for (std::size_t rank = lo; rank < hi; ++rank) r.assignment[order[rank]] = b;
            r.bins[b].lower = confidence[order[lo]];
            r.bins[b].upper = confidence[order[hi - 1]];
        }
    }

    std::vector<double> conf_sum(bins, 0.0), hit_sum(bins, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto b = r.assignment[i];
        ++r.bins[b].count;
        conf_sum[b] += confidence[i];
        hit_sum[b] += correct[i];
    }
    for (std::size_t b = 0; b < bins; ++b) {
        if (r.bins[b].count == 0) continue;
        const double c = static_cast<double>(r.bins[b].count);
        r.bins[b].mean_confidence = conf_sum[b] / c;
        r.bins[b].accuracy = hit_sum[b] / c;
    }
    return r;
}

/// sum_b (count_b / total) |accuracy_b - mean_confidence_b|
inline double weighted_gap(const ReliabilityDiagram& r) {
    double e = 0.0;
    for (const auto& b : r.bins) {
        if (b.count == 0) continue;
        e += static_cast<double>(b.count) / static_cast<double>(r.total) * std::abs(b.accuracy - b.mean_confidence);
    }
    return e;
}

inline double ece_from(std::span<const double> confidence, std::span<const std::uint8_t> correct,
                       std::size_t bins = kDefaultBins) {
    return weighted_gap(reliability_from(confidence, correct, bins, BinScheme::equal_width));
}

inline double ada_ece_from(std::span<const double> confidence, std::span<const std::uint8_t> correct,
                           std::size_t bins = kDefaultBins) {
    return weighted_gap(reliability_from(confidence, correct, bins, BinScheme::equal_mass));
}

inline ReliabilityDiagram reliability(const CalibrationDataset& d, const Temperatures& temps, std::size_t bins,
                                      BinScheme scheme) {
    const auto pc = confidences_and_correctness(d, temps);
    return reliability_from(pc.confidence, pc.correct, bins, scheme);
}

inline double ece(const CalibrationDataset& d, const Temperatures& temps, std::size_t bins = kDefaultBins) {
    return weighted_gap(reliability(d, temps, bins, BinScheme::equal_width));
}

inline double ada_ece(const CalibrationDataset& d, const Temperatures& temps, std::size_t bins = kDefaultBins) {
    return weighted_gap(reliability(d, temps, bins, BinScheme::equal_mass));
}

// ---------------------------------------------------------------------------
// Per-sample contributions
// ---------------------------------------------------------------------------

/// Signed per-sample contribution confidence_i - accuracy_of_bin(i).
/// Positive values mean overconfident.
struct ContributionHistogram {
    std::vector<double> per_sample;
    std::vector<std::size_t> bin_assignment;
    ReliabilityDiagram diagram;
};

inline ContributionHistogram contribution_from(std::span<const double> confidence,
                                               std::span<const std::uint8_t> correct, std::size_t bins) {
    ContributionHistogram h;
    h.diagram = reliability_from(confidence, correct, bins, BinScheme::equal_width);
    h.bin_assignment = h.diagram.assignment;
    h.per_sample.resize(confidence.size());
    for (std::size_t i = 0; i < confidence.size(); ++i)
        h.per_sample[i] = confidence[i] - h.diagram.bins[h.bin_assignment[i]].accuracy;
    return h;
}

inline ContributionHistogram contribution_histogram(const CalibrationDataset& d, const Temperatures& temps,
                                                    std::size_t bins = kDefaultBins) {
    const auto pc = confidences_and_correctness(d, temps);
    return contribution_from(pc.confidence, pc.correct, bins);
}

// ---------------------------------------------------------------------------
// Proper scores
// ---------------------------------------------------------------------------

inline double nll(const CalibrationDataset& d, const Temperatures& temps) {
    temps.check_size(d.size());
    double total = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) total -= log_softmax_at(d.logits(i), temps[i], d.label(i));
    return total / static_cast<double>(d.size());
}

inline double brier(const CalibrationDataset& d, const Temperatures& temps) {
    temps.check_size(d.size());
    std::vector<double> p(d.num_classes());
    double total = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        softmax_with_temperature(d.logits(i), temps[i], p);
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double diff = p[j] - (j == d.label(i) ? 1.0 : 0.0);
            total += diff * diff;
        }
    }
    return total / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Rejection curves
// ---------------------------------------------------------------------------

enum class ScoreKind { confidence, entropy, dempster_shafer };

inline const char* to_string(ScoreKind k) {
    switch (k) {
        case ScoreKind::confidence: return "confidence";
        case ScoreKind::entropy: return "entropy";
        case ScoreKind::dempster_shafer: return "ds";
    }
    return "?";
}

inline ScoreKind parse_score_kind(const std::string& s) {
    if (s == "confidence") return ScoreKind::confidence;
    if (s == "entropy") return ScoreKind::entropy;
    if (s == "ds") return ScoreKind::dempster_shafer;
    throw UsageError("unknown score '" + s + "' (expected confidence, entropy or ds)");
}

inline const char* to_string(BinScheme s) { return s == BinScheme::equal_width ? "equal-width" : "equal-mass"; }

struct RejectionPoint {
    double rejection_rate = 0.0;
    double retained_accuracy = 1.0;
};

struct RejectionCurve {
    std::vector<RejectionPoint> points;
    ScoreKind score_kind = ScoreKind::confidence;
    double aurra = 0.0;
};

/// Higher score = more certain.
///   confidence: max p
///   entropy:    -H(p)
///   ds:         1 - k / (k + sum_j exp(s_j / T)), evaluated as sigmoid(lse(s/T) - log k)
/// Logits are sorted first so rows that are permutations of each other get
/// bit-identical scores and tie in the rejection order.
inline std::vector<double> certainty_scores(const CalibrationDataset& d, const Temperatures& temps, ScoreKind kind) {
    temps.check_size(d.size());
    const double log_k = std::log(static_cast<double>(d.num_classes()));
    std::vector<double> scores(d.size()), p(d.num_classes()), s(d.num_classes());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto row = d.logits(i);
        std::copy(row.begin(), row.end(), s.begin());
        std::sort(s.begin(), s.end());
        switch (kind) {
            case ScoreKind::confidence:
                scores[i] = max_probability(s, temps[i], p);
                break;
            case ScoreKind::entropy:
                softmax_with_temperature(s, temps[i], p);
                scores[i] = -entropy(p);
                break;
            case ScoreKind::dempster_shafer: {
                check_temperature(temps[i]);
                const double a = log_sum_exp(s, temps[i]) - log_k;
                scores[i] = a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
                break;
            }
        }
    }
    return scores;
}

/// Reject lowest-scored samples first. Point m (m = n..0 retained) is
/// (1 - m/n, accuracy of the m retained), with accuracy 1 when m = 0.
/// AURRA is the trapezoidal area over rejection rate in [0, 1].
inline RejectionCurve rejection_curve_from(std::span<const double> scores, std::span<const std::uint8_t> correct,
                                           ScoreKind kind) {
    const std::size_t n = scores.size();
    require(n >= 1 && n == correct.size(), "rejection curve: bad input sizes");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    // prefix_hits[m] = correct among the m highest-scored samples
    std::vector<std::size_t> prefix_hits(n + 1, 0);
    for (std::size_t m = 0; m < n; ++m) prefix_hits[m + 1] = prefix_hits[m] + correct[order[m]];

    RejectionCurve c;
    c.score_kind = kind;
    c.points.reserve(n + 1);
    for (std::size_t r = 0; r <= n; ++r) {
        const std::size_t m = n - r;
        RejectionPoint p;
        p.rejection_rate = static_cast<double>(r) / static_cast<double>(n);
        p.retained_accuracy = m == 0 ? 1.0 : static_cast<double>(prefix_hits[m]) / static_cast<double>(m);
        c.points.push_back(p);
    }
    for (std::size_t i = 0; i + 1 < c.points.size(); ++i) {
        const auto& a = c.points[i];
        const auto& b = c.points[i + 1];
        c.aurra += (b.rejection_rate - a.rejection_rate) * 0.5 * (a.retained_accuracy + b.retained_accuracy);
    }
    return c;
}

inline RejectionCurve rejection_curve(const CalibrationDataset& d, const Temperatures& temps, ScoreKind kind) {
    const auto scores = certainty_scores(d, temps, kind);
    const auto pc = confidences_and_correctness(d, temps);
    return rejection_curve_from(scores, pc.correct, kind);
}

// ---------------------------------------------------------------------------
// Serialization (JSON + flat CSV for plotting)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ReliabilityDiagram& r) {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : r.bins)
        bins.push_back({{"lower", b.lower},
                        {"upper", b.upper},
                        {"count", b.count},
                        {"mean_confidence", b.mean_confidence},
                        {"accuracy", b.accuracy}});
    return {{"kind", "reliability"}, {"scheme", to_string(r.scheme)}, {"total", r.total},
            {"weighted_gap", weighted_gap(r)}, {"bins", bins}};
}

inline void write_csv(std::ostream& os, const ReliabilityDiagram& r) {
    os << "bin,lower,upper,count,mean_confidence,accuracy\n";
    os.precision(17);
    for (std::size_t i = 0; i < r.bins.size(); ++i) {
        const auto& b = r.bins[i];
        os << i << ',' << b.lower << ',' << b.upper << ',' << b.count << ',' << b.mean_confidence << ','
           << b.accuracy << '\n';
    }
}

inline nlohmann::json to_json(const ContributionHistogram& h) {
    return {{"kind", "contribution"}, {"per_sample", h.per_sample}, {"bin_assignment", h.bin_assignment},
            {"ece", weighted_gap(h.diagram)}};
}

inline void write_csv(std::ostream& os, const ContributionHistogram& h) {
    os << "sample,bin,contribution\n";
    os.precision(17);
    for (std::size_t i = 0; i < h.per_sample.size(); ++i)
        os << i << ',' << h.bin_assignment[i] << ',' << h.per_sample[i] << '\n';
}

inline nlohmann::json to_json(const RejectionCurve& c) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : c.points) pts.push_back({p.rejection_rate, p.retained_accuracy});
    return {{"kind", "rejection"}, {"score", to_string(c.score_kind)}, {"aurra", c.aurra}, {"points", pts}};
}

inline void write_csv(std::ostream& os, const RejectionCurve& c) {
    os << "rejection_rate,retained_accuracy\n";
    os.precision(17);
    for (const auto& p : c.points) os << p.rejection_rate << ',' << p.retained_accuracy << '\n';
}

}  // namespace tempcal
