#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "softmax.hpp"

namespace tempcal {

enum class FitObjective { ece, nll };

inline const char* to_string(FitObjective o) { return o == FitObjective::ece ? "ece" : "nll"; }

inline FitObjective parse_objective(const std::string& s) {
    if (s == "ece") return FitObjective::ece;
    if (s == "nll") return FitObjective::nll;
    throw UsageError("unknown objective '" + s + "' (expected ece or nll)");
}

struct TemperatureGrid {
    double lo = 0.05;
    double hi = 10.0;
    double step = 0.005;

    /// Grid values lo + i*step up to hi, snapped to multiples of 1e-6 so that
    /// round values such as 1.0 are hit exactly.
    std::vector<double> values() const {
        if (!(lo > 0.0) || !(hi > lo) || !(step > 0.0) || !std::isfinite(hi))
            throw ValidationError("grid: need 0 < lo < hi and step > 0");
        const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
        std::vector<double> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i)
            out.push_back(std::round(lo * 1e6 + static_cast<double>(i) * step * 1e6) / 1e6);
        return out;
    }
};

/// Parses "lo:hi:step".
inline TemperatureGrid parse_grid(const std::string& s) {
    TemperatureGrid g;
    const auto a = s.find(':');
    const auto b = a == std::string::npos ? std::string::npos : s.find(':', a + 1);
    if (b == std::string::npos) throw UsageError("grid must be lo:hi:step, got '" + s + "'");
    try {
        g.lo = std::stod(s.substr(0, a));
        g.hi = std::stod(s.substr(a + 1, b - a - 1));
        g.step = std::stod(s.substr(b + 1));
    } catch (const std::exception&) {
        throw UsageError("grid must be lo:hi:step, got '" + s + "'");
    }
    if (!(g.lo > 0.0) || !(g.hi > g.lo) || !(g.step > 0.0)) throw UsageError("grid needs 0 < lo < hi, step > 0");
    return g;
}

struct VanillaScaler {
    double temperature = 1.0;
    FitObjective objective = FitObjective::ece;
    TemperatureGrid grid;
    int bins = kDefaultBins;
    double achieved_objective = 0.0;
};

inline double vanilla_objective(const CalibrationDataset& d, double t, FitObjective objective, int bins) {
    return objective == FitObjective::ece ? ece(d, t, static_cast<std::size_t>(bins)) : nll(d, t);
}

/// Exhaustive grid search; ties go to the smaller temperature.
inline VanillaScaler fit_vanilla(const CalibrationDataset& d, FitObjective objective = FitObjective::ece,
                                 const TemperatureGrid& grid = {}, int bins = kDefaultBins) {
    require(bins >= 1, "fit_vanilla: bins must be at least 1");
    const auto temps = grid.values();
    if (temps.empty()) throw ValidationError("fit_vanilla: empty grid");
    VanillaScaler best;
    best.objective = objective;
    best.grid = grid;
    best.bins = bins;
    best.achieved_objective = std::numeric_limits<double>::infinity();
    for (double t : temps) {
        const double v = vanilla_objective(d, t, objective, bins);
        if (v < best.achieved_objective) {
            best.achieved_objective = v;
            best.temperature = t;
        }
    }
    return best;
}

/// Row-major n x k probabilities at the scaler's temperature.
inline std::vector<double> apply_vanilla(const VanillaScaler& scaler, const CalibrationDataset& d) {
    const std::size_t k = d.num_classes();
    std::vector<double> probs(d.size() * k);
    for (std::size_t i = 0; i < d.size(); ++i)
        softmax_with_temperature(d.logits(i), scaler.temperature, std::span<double>(probs.data() + i * k, k));
    return probs;
}

inline nlohmann::json to_json(const VanillaScaler& s) {
    return {{"kind", "vanilla"},
            {"temperature", s.temperature},
            {"fit",
             {{"objective", to_string(s.objective)},
              {"grid_lo", s.grid.lo},
              {"grid_hi", s.grid.hi},
              {"grid_step", s.grid.step},
              {"bins", s.bins},
              {"achieved_objective", s.achieved_objective}}}};
}

inline VanillaScaler vanilla_from_json(const nlohmann::json& j) {
    try {
        if (j.at("kind") != "vanilla") throw FormatError("model JSON: kind is not 'vanilla'");
        VanillaScaler s;
        s.temperature = j.at("temperature").get<double>();
        check_temperature(s.temperature);
        const auto& f = j.at("fit");
        s.objective = f.at("objective") == "nll" ? FitObjective::nll : FitObjective::ece;
        s.grid = {f.at("grid_lo").get<double>(), f.at("grid_hi").get<double>(), f.at("grid_step").get<double>()};
        s.bins = f.at("bins").get<int>();
        s.achieved_objective = f.at("achieved_objective").get<double>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model JSON: ") + e.what());
    }
}

inline void save_vanilla(const VanillaScaler& s, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json(s).dump(2) << '\n';
}

}  // namespace tempcal
