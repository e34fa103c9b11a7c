#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "adats.hpp"
#include "analysis.hpp"
#include "dataset.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "selfcheck.hpp"
#include "tempscale.hpp"

namespace tempcal::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

inline std::string fixed(double v, int decimals = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

// ---------------------------------------------------------------------------
// Scalers loaded from model JSON
// ---------------------------------------------------------------------------

struct Scaler {
    std::string method;  // "vanilla" or "adats"
    std::filesystem::path path;
    std::optional<VanillaScaler> vanilla;
    std::optional<AdaTsModel> adats;

    Temperatures temperatures(const CalibrationDataset& d) const {
        if (vanilla) return vanilla->temperature;
        return calibrate(*adats, d).temperatures;
    }
};

inline Scaler load_scaler(const std::filesystem::path& path) {
    const auto j = read_json_file(path);
    const std::string kind = j.is_object() ? j.value("kind", "") : "";
    Scaler s{kind, path, std::nullopt, std::nullopt};
    if (kind == "vanilla")
        s.vanilla = vanilla_from_json(j);
    else if (kind == "adats")
        s.adats = adats_from_json(j);
    else
        throw FormatError(path.string() + ": unknown model kind '" + kind + "'");
    return s;
}

/// Method names for a list of scalers; repeated kinds get a numeric suffix.
inline std::vector<std::string> method_names(const std::vector<Scaler>& scalers) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < scalers.size(); ++i) {
        std::size_t same = 0, index = 0;
        for (std::size_t j = 0; j < scalers.size(); ++j)
            if (scalers[j].method == scalers[i].method) {
                if (j < i) ++index;
                ++same;
            }
        names.push_back(same > 1 ? scalers[i].method + "_" + std::to_string(index + 1) : scalers[i].method);
    }
    return names;
}

// ---------------------------------------------------------------------------
// Metric table shared by evaluate and sweep
// ---------------------------------------------------------------------------

using MetricRow = std::vector<std::pair<std::string, double>>;

inline MetricRow metric_row(const CalibrationDataset& d, const Temperatures& t, std::size_t bins) {
    t.check_size(d.size());
    double mean_t = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) mean_t += t[i];
    mean_t /= static_cast<double>(d.size());
    return {{"accuracy", accuracy(d)},
            {"ece", ece(d, t, bins)},
            {"ada_ece", ada_ece(d, t, bins)},
            {"nll", nll(d, t)},
            {"brier", brier(d, t)},
            {"aurra_confidence", rejection_curve(d, t, ScoreKind::confidence).aurra},
            {"aurra_entropy", rejection_curve(d, t, ScoreKind::entropy).aurra},
            {"aurra_ds", rejection_curve(d, t, ScoreKind::dempster_shafer).aurra},
            {"mean_temperature", mean_t}};
}

inline nlohmann::json to_json(const MetricRow& row) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : row) j[k] = v;
    return j;
}

struct Options {
    std::string data, out, manifest;
    std::vector<std::string> models;
    std::string objective = "ece", grid, score = "confidence", partition = "class", classes = "0:1";
    int bins = kDefaultBins;
    std::size_t steps = 11;
    std::uint64_t seed = 0;
    TrainConfig train;
};

inline nlohmann::json metadata(const Options& o, const std::string& command) {
    nlohmann::json m = {{"command", command}, {"seed", o.seed}};
    if (!o.data.empty()) m["data"] = o.data;
    if (!o.models.empty()) m["models"] = o.models;
    if (!o.manifest.empty()) m["manifest"] = o.manifest;
    return m;
}

/// CSV outputs start with a '#' line carrying the same metadata as JSON outputs.
inline void write_csv_metadata(std::ostream& os, const nlohmann::json& meta) { os << "# " << meta.dump() << '\n'; }

inline std::ofstream open_output(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    auto out = open_output(path);
    out << j.dump(2) << '\n';
    if (!out) throw Error("write failed for " + path.string());
}

inline std::vector<Scaler> load_scalers(const std::vector<std::string>& paths) {
    std::vector<Scaler> out;
    for (const auto& p : paths) out.push_back(load_scaler(p));
    return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_fit_vanilla(const Options& o, std::ostream& out) {
    const auto d = read_dataset(o.data);
    const auto grid = o.grid.empty() ? TemperatureGrid{} : parse_grid(o.grid);
    const auto s = fit_vanilla(d, parse_objective(o.objective), grid, o.bins);
    auto j = to_json(s);
    j["metadata"] = metadata(o, "fit-vanilla");
    write_json_file(o.out, j);
    out << "temperature " << fixed(s.temperature) << "  " << to_string(s.objective) << ' '
        << fixed(s.achieved_objective) << '\n';
    return kOk;
}

inline int cmd_fit_adats(const Options& o, std::ostream& out) {
    const auto d = read_dataset(o.data);
    auto cfg = o.train;
    cfg.seed = o.seed;
    try {
        cfg.validate();
    } catch (const ValidationError& e) {
        throw UsageError(e.what());
    }
    auto r = train(d, cfg);
    const auto& last = r.report.epochs.back();
    r.model.metadata["command"] = "fit-adats";
    r.model.metadata["data"] = o.data;
    r.model.metadata["report"] = to_json(r.report);
    save_model(r.model, o.out);
    out << "objective " << fixed(last.mean_elbo + last.mean_ce) << "  (elbo " << fixed(last.mean_elbo) << ", log-lik "
        << fixed(last.mean_ce) << ")  ece " << fixed(r.report.ece_before) << " -> " << fixed(r.report.ece_after)
        << "  mean T " << fixed(last.mean_temperature) << '\n';
    return kOk;
}

inline void print_table(std::ostream& out, const std::vector<std::string>& methods,
                        const std::vector<MetricRow>& rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-18s", "metric");
    out << buf;
    for (const auto& m : methods) {
        std::snprintf(buf, sizeof buf, "%14s", m.c_str());
        out << buf;
    }
    out << '\n';
    for (std::size_t r = 0; r < rows.front().size(); ++r) {
        std::snprintf(buf, sizeof buf, "%-18s", rows.front()[r].first.c_str());
        out << buf;
        for (const auto& row : rows) {
            std::snprintf(buf, sizeof buf, "%14s", fixed(row[r].second).c_str());
            out << buf;
        }
        out << '\n';
    }
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
    const auto d = read_dataset(o.data);
    const auto scalers = load_scalers(o.models);
    std::vector<std::string> methods{"raw"};
    for (auto& n : method_names(scalers)) methods.push_back(n);
    std::vector<MetricRow> rows{metric_row(d, 1.0, o.bins)};
    for (const auto& s : scalers) rows.push_back(metric_row(d, s.temperatures(d), o.bins));
    print_table(out, methods, rows);
    if (!o.out.empty()) {
        nlohmann::json j = {{"metadata", metadata(o, "evaluate")}, {"bins", o.bins}, {"samples", d.size()}};
        for (std::size_t m = 0; m < methods.size(); ++m) j["methods"][methods[m]] = to_json(rows[m]);
        write_json_file(o.out, j);
    }
    return kOk;
}

inline std::pair<std::size_t, std::size_t> parse_class_pair(const std::string& s) {
    const auto c = s.find(':');
    try {
        if (c == std::string::npos) throw std::invalid_argument(s);
        return {std::stoul(s.substr(0, c)), std::stoul(s.substr(c + 1))};
    } catch (const std::exception&) {
        throw UsageError("classes must be i:j, got '" + s + "'");
    }
}

inline int cmd_report(const Options& o, std::ostream& out) {
    namespace fs = std::filesystem;
    const auto d = read_dataset(o.data);
    const auto score = parse_score_kind(o.score);
    const auto partition = parse_partition(o.partition);
    const auto pair = parse_class_pair(o.classes);
    if (o.models.size() > 1) throw UsageError("report takes at most one --model");
    std::optional<Scaler> scaler;
    if (!o.models.empty()) scaler = load_scaler(o.models.front());
    const Temperatures temps = scaler ? scaler->temperatures(d) : Temperatures(1.0);
    const auto bins = static_cast<std::size_t>(o.bins);
    const fs::path dir = o.out;
    fs::create_directories(dir);
    const auto meta = metadata(o, "report");

    std::vector<std::string> written;
    auto emit = [&](const std::string& stem, nlohmann::json j, auto&& csv) {
        j["metadata"] = meta;
        write_json_file(dir / (stem + ".json"), j);
        auto f = open_output(dir / (stem + ".csv"));
        write_csv_metadata(f, meta);
        csv(f);
        if (!f) throw Error("write failed for " + (dir / (stem + ".csv")).string());
        written.push_back(stem);
    };

    const auto width = reliability(d, temps, bins, BinScheme::equal_width);
    emit("reliability", to_json(width), [&](std::ostream& f) { write_csv(f, width); });
    const auto mass = reliability(d, temps, bins, BinScheme::equal_mass);
    emit("reliability_equal_mass", to_json(mass), [&](std::ostream& f) { write_csv(f, mass); });
    const auto contrib = contribution_histogram(d, temps, bins);
    emit("contribution", to_json(contrib), [&](std::ostream& f) { write_csv(f, contrib); });
    const auto curve = rejection_curve(d, temps, score);
    emit("rejection", to_json(curve), [&](std::ostream& f) { write_csv(f, curve); });

    if (scaler && scaler->adats) {
        const auto& m = *scaler->adats;
        const auto hist = temperature_histogram(m, d, partition);
        emit("temperature_histogram", to_json(hist), [&](std::ostream& f) { write_csv(f, hist); });
        const auto trace = class_mean_interpolation(m, d, pair.first, pair.second, o.steps);
        emit("interpolation", to_json(trace), [&](std::ostream& f) { write_csv(f, trace); });
        auto f = open_output(dir / "latents.csv");
        write_csv_metadata(f, meta);
        write_latents_csv(f, m, d, temps, bins);
        if (!f) throw Error("write failed for " + (dir / "latents.csv").string());
        written.push_back("latents");
    }
    for (const auto& w : written) out << (dir / w).string() << '\n';
    return kOk;
}

struct ManifestEntry {
    std::filesystem::path path;
    std::string corruption;
    int severity = 0;
};

struct SweepManifest {
    std::filesystem::path baseline;
    std::vector<ManifestEntry> entries;
};

/// Relative paths are resolved against the manifest's directory.
inline SweepManifest read_manifest(const std::filesystem::path& path) {
    const auto j = read_json_file(path);
    const auto base = path.parent_path();
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path q(p);
        return q.is_absolute() ? q : base / q;
    };
    SweepManifest m;
    try {
        m.baseline = resolve(j.at("baseline").get<std::string>());
        for (const auto& e : j.at("entries")) {
            ManifestEntry me{resolve(e.at("path").get<std::string>()), e.at("corruption_name").get<std::string>(),
                             e.at("severity").get<int>()};
            if (me.corruption.empty()) throw FormatError("manifest: empty corruption_name");
            if (me.severity < 1 || me.severity > 5)
                throw FormatError("manifest: severity " + std::to_string(me.severity) + " for '" + me.corruption +
                                  "' is outside 1..5");
            m.entries.push_back(std::move(me));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (!std::filesystem::exists(m.baseline)) throw FormatError("manifest: missing " + m.baseline.string());
    for (const auto& e : m.entries)
        if (!std::filesystem::exists(e.path)) throw FormatError("manifest: missing " + e.path.string());
    return m;
}

inline int cmd_sweep(const Options& o, std::ostream& out) {
    const auto manifest = read_manifest(o.manifest);
    const auto scalers = load_scalers(o.models);
    std::vector<std::string> methods{"raw"};
    for (auto& n : method_names(scalers)) methods.push_back(n);

    auto evaluate = [&](const CalibrationDataset& d) {
        std::vector<MetricRow> rows{metric_row(d, 1.0, o.bins)};
        for (const auto& s : scalers) rows.push_back(metric_row(d, s.temperatures(d), o.bins));
        return rows;
    };

    const auto baseline = evaluate(read_dataset(manifest.baseline));
    out << "baseline " << manifest.baseline.string() << '\n';
    print_table(out, methods, baseline);

    auto f = open_output(o.out);
    write_csv_metadata(f, metadata(o, "sweep"));
    f << "corruption,severity,method,metric,value\n";
    f.precision(17);
    for (const auto& e : manifest.entries) {
        const auto rows = evaluate(read_dataset(e.path));
        for (std::size_t m = 0; m < methods.size(); ++m)
            for (const auto& [name, value] : rows[m])
                f << e.corruption << ',' << e.severity << ',' << methods[m] << ',' << name << ',' << value << '\n';
    }
    if (!f) throw Error("write failed for " + o.out);
    out << manifest.entries.size() << " entries x " << methods.size() << " methods -> " << o.out << '\n';
    return kOk;
}

inline int cmd_selfcheck(const Options& o, std::ostream& out) {
    SelfCheckOptions opt;
    opt.seed = o.seed;
    bool ok = true;
    for (const auto& r : run_selfcheck(opt)) {
        ok = ok && r.passed();
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-4s %-36s n=%-5zu max_err=%.3e tol=%.0e skipped=%zu", r.passed() ? "ok" : "FAIL",
                      r.name.c_str(), r.instances, r.max_error, r.tolerance, r.skipped);
        out << buf << '\n';
    }
    if (!ok) throw NumericalError("selfcheck failed");
    return kOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    Options o;
    CLI::App app{"Post-hoc temperature calibration toolkit", "tempcal"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "tempcal 1.0");

    auto data_opt = [&](CLI::App* c) { c->add_option("--data", o.data, "CALD dataset")->required(); };
    auto bins_opt = [&](CLI::App* c) {
        c->add_option("--bins", o.bins, "Calibration bins")->capture_default_str()->check(CLI::PositiveNumber);
    };
    auto seed_opt = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed")->capture_default_str(); };

    auto* fv = app.add_subcommand("fit-vanilla", "Fit a single temperature by grid search");
    data_opt(fv);
    fv->add_option("--out", o.out, "Model JSON to write")->required();
    fv->add_option("--objective", o.objective, "ece or nll")->capture_default_str()->check(CLI::IsMember({"ece", "nll"}));
    fv->add_option("--grid", o.grid, "lo:hi:step (default 0.05:10:0.005)");
    bins_opt(fv);
    seed_opt(fv);

    auto* fa = app.add_subcommand("fit-adats", "Train the adaptive temperature model");
    data_opt(fa);
    fa->add_option("--out", o.out, "Model JSON to write")->required();
    fa->add_option("--epochs", o.train.epochs)->capture_default_str();
    fa->add_option("--lr", o.train.lr)->capture_default_str();
    fa->add_option("--batch-size", o.train.batch_size)->capture_default_str();
    fa->add_option("--latent-dim", o.train.latent_dim)->capture_default_str();
    fa->add_option("--temp-floor", o.train.temp_floor)->capture_default_str();
    seed_opt(fa);

    auto* ev = app.add_subcommand("evaluate", "Metrics for raw logits and each model side by side");
    data_opt(ev);
    ev->add_option("--model", o.models, "Model JSON (repeatable)");
    ev->add_option("--out", o.out, "Optional JSON with the metric table");
    bins_opt(ev);
    seed_opt(ev);

    auto* rp = app.add_subcommand("report", "Reliability, contribution, rejection and temperature reports");
    data_opt(rp);
    rp->add_option("--model", o.models, "Model JSON; raw logits when omitted");
    rp->add_option("--out", o.out, "Output directory")->required();
    rp->add_option("--score", o.score)->capture_default_str()->check(CLI::IsMember({"confidence", "entropy", "ds"}));
    rp->add_option("--partition", o.partition)->capture_default_str()->check(CLI::IsMember({"class", "correctness"}));
    rp->add_option("--classes", o.classes, "Class pair i:j for interpolation")->capture_default_str();
    rp->add_option("--steps", o.steps, "Interpolation steps")->capture_default_str()->check(CLI::Range(2, 100000));
    bins_opt(rp);
    seed_opt(rp);

    auto* sw = app.add_subcommand("sweep", "Evaluate every manifest entry with every model");
    sw->add_option("--manifest", o.manifest, "Sweep manifest JSON")->required();
    sw->add_option("--model", o.models, "Model JSON (repeatable)");
    sw->add_option("--out", o.out, "Long-format CSV to write")->required();
    bins_opt(sw);
    seed_opt(sw);

    auto* sc = app.add_subcommand("selfcheck", "Gradient verification suites");
    seed_opt(sc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            app.exit(e, out, err);
            return kOk;
        }
        err << "tempcal: " << e.what() << '\n';
        return kUsage;
    }

    try {
        if (*fv) return cmd_fit_vanilla(o, out);
        if (*fa) return cmd_fit_adats(o, out);
        if (*ev) return cmd_evaluate(o, out);
        if (*rp) return cmd_report(o, out);
        if (*sw) return cmd_sweep(o, out);
        return cmd_selfcheck(o, out);
    } catch (const UsageError& e) {
        err << "tempcal: usage: " << e.what() << '\n';
        return kUsage;
    } catch (const NumericalError& e) {
        err << "tempcal: numerical: " << e.what() << '\n';
        return kNumerical;
    } catch (const std::exception& e) {
        err << "tempcal: data: " << e.what() << '\n';
        return kData;
    }
}

}  // namespace tempcal::cli
