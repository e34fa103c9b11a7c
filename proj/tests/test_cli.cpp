#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <tempcal/cli.hpp>

#include "test_util.hpp"

using namespace tempcal;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "tempcal");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Value printed for `metric` in column `col` (0 = raw) of the evaluate table.
double table_value(const std::string& table, const std::string& metric, std::size_t col) {
    std::istringstream is(table);
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string name;
        ls >> name;
        if (name != metric) continue;
        double v = 0;
        for (std::size_t c = 0; c <= col; ++c) ls >> v;
        return v;
    }
    return std::nan("");
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        write_dataset(generate_synthetic(single_regime_spec(2.0, 3000), 1), dir / "c2.cald");
        write_dataset(generate_synthetic(single_regime_spec(2.0, 1000), 2), dir / "c2_test.cald");
    }
    testutil::TempDir dir;
};

}  // namespace

TEST_F(CliTest, EvaluateAfterVanillaFitBeatsRawEce) {
    const auto fit = run({"fit-vanilla", "--data", (dir / "c2.cald").string(), "--out", (dir / "v.json").string()});
    ASSERT_EQ(fit.code, 0) << fit.err;
    EXPECT_NE(fit.out.find("temperature"), std::string::npos);
    const auto ev = run({"evaluate", "--data", (dir / "c2_test.cald").string(), "--model", (dir / "v.json").string(),
                         "--out", (dir / "eval.json").string()});
    ASSERT_EQ(ev.code, 0) << ev.err;
    EXPECT_LT(table_value(ev.out, "ece", 1), table_value(ev.out, "ece", 0));

    const auto j = nlohmann::json::parse(slurp(dir / "eval.json"));
    EXPECT_LT(j["methods"]["vanilla"]["ece"].get<double>(), j["methods"]["raw"]["ece"].get<double>());
    EXPECT_EQ(j["metadata"]["seed"], 0);
}

TEST_F(CliTest, PrintedMetricsEqualTheLibraryValues) {
    ASSERT_EQ(run({"fit-vanilla", "--data", (dir / "c2.cald").string(), "--out", (dir / "v.json").string(),
                   "--objective", "nll", "--grid", "0.5:4:0.01"})
                  .code,
              0);
    const auto ev = run({"evaluate", "--data", (dir / "c2_test.cald").string(), "--model", (dir / "v.json").string(),
                         "--bins", "10"});
    ASSERT_EQ(ev.code, 0) << ev.err;
    const auto d = read_dataset(dir / "c2_test.cald");
    const double t = vanilla_from_json(read_json_file(dir / "v.json")).temperature;
    EXPECT_EQ(table_value(ev.out, "ece", 1), std::stod(cli::fixed(ece(d, t, 10))));
    EXPECT_EQ(table_value(ev.out, "ada_ece", 1), std::stod(cli::fixed(ada_ece(d, t, 10))));
    EXPECT_EQ(table_value(ev.out, "nll", 0), std::stod(cli::fixed(nll(d, 1.0))));
    EXPECT_EQ(table_value(ev.out, "brier", 1), std::stod(cli::fixed(brier(d, t))));
    EXPECT_EQ(table_value(ev.out, "aurra_ds", 1),
              std::stod(cli::fixed(rejection_curve(d, t, ScoreKind::dempster_shafer).aurra)));
    EXPECT_EQ(table_value(ev.out, "mean_temperature", 1), std::stod(cli::fixed(t)));
}

TEST_F(CliTest, FitAdatsReportAndDeterminism) {
    const std::vector<std::string> base{"fit-adats", "--data", (dir / "c2.cald").string(), "--epochs", "2",
                                        "--batch-size", "128", "--seed", "7"};
    auto a = base, b = base;
    a.insert(a.end(), {"--out", (dir / "a.json").string()});
    b.insert(b.end(), {"--out", (dir / "b.json").string()});
    ASSERT_EQ(run(a).code, 0);
    ASSERT_EQ(run(b).code, 0);
    EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
    const auto m = load_model(dir / "a.json");
    EXPECT_EQ(m.metadata["seed"], 7);
    EXPECT_EQ(m.dz, 2u);

    const auto rp = run({"report", "--data", (dir / "c2_test.cald").string(), "--model", (dir / "a.json").string(),
                         "--out", (dir / "report").string(), "--partition", "correctness", "--score", "entropy"});
    ASSERT_EQ(rp.code, 0) << rp.err;
    for (const char* f : {"reliability.json", "reliability.csv", "reliability_equal_mass.json", "contribution.csv",
                          "rejection.json", "temperature_histogram.json", "interpolation.csv", "latents.csv"})
        EXPECT_TRUE(std::filesystem::exists(dir / "report" / f)) << f;
    const auto rej = nlohmann::json::parse(slurp(dir / "report" / "rejection.json"));
    EXPECT_EQ(rej["score"], "entropy");
    EXPECT_EQ(rej["metadata"]["seed"], 0);
    EXPECT_EQ(slurp(dir / "report" / "reliability.csv").rfind("# ", 0), 0u);
}

TEST_F(CliTest, ReportWithoutModelUsesRawLogits) {
    const auto rp = run({"report", "--data", (dir / "c2_test.cald").string(), "--out", (dir / "raw").string()});
    ASSERT_EQ(rp.code, 0) << rp.err;
    const auto j = nlohmann::json::parse(slurp(dir / "raw" / "reliability.json"));
    EXPECT_DOUBLE_EQ(j["weighted_gap"].get<double>(), ece(read_dataset(dir / "c2_test.cald"), 1.0));
    EXPECT_FALSE(std::filesystem::exists(dir / "raw" / "latents.csv"));
}

TEST_F(CliTest, SweepEmitsOneRowPerEntryMethodAndMetric) {
    for (int s = 1; s <= 3; ++s)
        write_dataset(generate_synthetic(single_regime_spec(1.0 + s, 300), 10 + s),
                      dir / ("noise_" + std::to_string(s) + ".cald"));
    nlohmann::json manifest = {{"baseline", "c2_test.cald"}, {"entries", nlohmann::json::array()}};
    for (int s = 1; s <= 3; ++s)
        manifest["entries"].push_back(
            {{"path", "noise_" + std::to_string(s) + ".cald"}, {"corruption_name", "noise"}, {"severity", s}});
    std::ofstream(dir / "manifest.json") << manifest.dump();
    ASSERT_EQ(run({"fit-vanilla", "--data", (dir / "c2.cald").string(), "--out", (dir / "v.json").string()}).code, 0);

    const auto sw = run({"sweep", "--manifest", (dir / "manifest.json").string(), "--model",
                         (dir / "v.json").string(), "--out", (dir / "sweep.csv").string()});
    ASSERT_EQ(sw.code, 0) << sw.err;
    std::istringstream is(slurp(dir / "sweep.csv"));
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line.rfind("# ", 0), 0u);
    std::getline(is, line);
    EXPECT_EQ(line, "corruption,severity,method,metric,value");
    std::size_t rows = 0;
    while (std::getline(is, line)) ++rows;
    const std::size_t methods = 2, metrics = 9;
    EXPECT_EQ(rows, 3 * methods * metrics);
}

TEST_F(CliTest, SweepManifestErrorsAreDataErrors) {
    std::ofstream(dir / "bad.json") << R"({"baseline": "c2.cald", "entries": [{"path": "c2.cald", "corruption_name": "x", "severity": 6}]})";
    EXPECT_EQ(run({"sweep", "--manifest", (dir / "bad.json").string(), "--out", (dir / "s.csv").string()}).code, 2);
    std::ofstream(dir / "missing.json") << R"({"baseline": "c2.cald", "entries": [{"path": "nope.cald", "corruption_name": "x", "severity": 1}]})";
    EXPECT_EQ(run({"sweep", "--manifest", (dir / "missing.json").string(), "--out", (dir / "s.csv").string()}).code, 2);
}

TEST_F(CliTest, ExitCodes) {
    EXPECT_EQ(run({}).code, 1);
    EXPECT_EQ(run({"frobnicate"}).code, 1);
    EXPECT_EQ(run({"fit-vanilla", "--data", (dir / "c2.cald").string()}).code, 1);  // missing --out
    EXPECT_EQ(run({"fit-vanilla", "--data", (dir / "c2.cald").string(), "--out", (dir / "v.json").string(),
                   "--objective", "brier"})
                  .code,
              1);
    EXPECT_EQ(run({"fit-vanilla", "--data", (dir / "c2.cald").string(), "--out", (dir / "v.json").string(),
                   "--grid", "1:0:1"})
                  .code,
              1);
    EXPECT_EQ(run({"fit-adats", "--data", (dir / "c2.cald").string(), "--out", (dir / "a.json").string(),
                   "--epochs", "0"})
                  .code,
              1);
    EXPECT_EQ(run({"--help"}).code, 0);

    EXPECT_EQ(run({"evaluate", "--data", (dir / "none.cald").string()}).code, 2);
    std::ofstream(dir / "junk.cald") << "not a dataset at all, just text";
    const auto junk = run({"evaluate", "--data", (dir / "junk.cald").string()});
    EXPECT_EQ(junk.code, 2);
    EXPECT_EQ(std::count(junk.err.begin(), junk.err.end(), '\n'), 1);
    std::ofstream(dir / "junk.json") << "{";
    EXPECT_EQ(run({"evaluate", "--data", (dir / "c2.cald").string(), "--model", (dir / "junk.json").string()}).code, 2);

    // Non-finite loss during training.
    const std::size_t n = 32;
    write_dataset(CalibrationDataset(n, 2, 2, std::vector<double>(n * 2, 1e30), std::vector<double>(n * 2, 0.0),
                                     std::vector<std::uint32_t>(n, 0)),
                  dir / "huge.cald");
    EXPECT_EQ(run({"fit-adats", "--data", (dir / "huge.cald").string(), "--out", (dir / "h.json").string(),
                   "--epochs", "1"})
                  .code,
              3);
}

TEST(Cli, SelfcheckExitsZero) {
    const char* argv[] = {"tempcal", "selfcheck"};
    std::ostringstream out, err;
    EXPECT_EQ(cli::run(2, argv, out, err), 0) << out.str();
    EXPECT_EQ(out.str().find("FAIL"), std::string::npos);
}
