#include <gtest/gtest.h>

#include <tempcal/tempscale.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace tempcal;

// ---- oracle checks ---------------------------------------------------------

TEST(TempScaleOracle, GridSearchMatchesBruteForceScan) {
    Rng rng(1);
    for (int rep = 0; rep < 5; ++rep) {
        const auto d = testutil::random_dataset(rng, 60, 4, 1, 2.0);
        const TemperatureGrid grid{0.1, 5.0, 0.01};
        for (auto obj : {FitObjective::ece, FitObjective::nll}) {
            double best_t = 0, best = 1e300;
            for (double t : grid.values()) {
                std::vector<double> tv(d.size(), t);
                const auto o = oracle::score(d, tv);
                const double v = obj == FitObjective::ece ? oracle::ece_equal_width(o.confidence, o.correct, 15)
                                                          : oracle::nll(d, tv);
                // The scan keeps the first strictly better value, so it
                // prefers the smaller of two equal temperatures.
                if (v < best - 1e-13) {
                    best = v;
                    best_t = t;
                }
            }
            const auto s = fit_vanilla(d, obj, grid);
            EXPECT_TRUE(oracle::close(s.achieved_objective, best, 1e-10, 1e-14));
            EXPECT_NEAR(s.temperature, best_t, 1e-9);
        }
    }
}

TEST(TempScaleOracle, RecoversTheInflationFactor) {
    // Logits are 2 x the true log posterior, so dividing by T = 2 restores calibration.
    const auto d = generate_synthetic(single_regime_spec(2.0, 8000), 11);
    EXPECT_NEAR(fit_vanilla(d, FitObjective::nll).temperature, 2.0, 0.1);
    EXPECT_NEAR(fit_vanilla(d, FitObjective::ece).temperature, 2.0, 0.2);
    const auto c1 = generate_synthetic(single_regime_spec(1.0, 8000), 12);
    EXPECT_NEAR(fit_vanilla(c1, FitObjective::nll).temperature, 1.0, 0.05);
}

// ---- properties ------------------------------------------------------------

TEST(TempScale, DefaultGridHitsRoundValuesExactly) {
    const auto v = TemperatureGrid{}.values();
    EXPECT_EQ(v.size(), 1991u);
    EXPECT_EQ(v.front(), 0.05);
    EXPECT_EQ(v.back(), 10.0);
    EXPECT_NE(std::find(v.begin(), v.end(), 1.0), v.end());
    EXPECT_NE(std::find(v.begin(), v.end(), 2.0), v.end());
    EXPECT_TRUE(std::is_sorted(v.begin(), v.end()));
}

TEST(TempScale, TiesGoToTheSmallerTemperature) {
    // Equal logits give confidence 1/k at every T, so the objective is flat.
    const CalibrationDataset d(2, 1, 2, {0, 0}, {1, 1, 3, 3}, {0, 1});
    const auto s = fit_vanilla(d, FitObjective::ece, {0.5, 2.0, 0.5});
    EXPECT_EQ(s.temperature, 0.5);
}

TEST(TempScale, FittedTemperatureImprovesTheObjective) {
    const auto d = generate_synthetic(single_regime_spec(2.5, 3000), 2);
    const auto s = fit_vanilla(d);
    EXPECT_LT(s.achieved_objective, ece(d, 1.0));
    EXPECT_EQ(s.achieved_objective, ece(d, s.temperature));
}

TEST(TempScale, ApplyGivesNormalisedRows) {
    Rng rng(3);
    const auto d = testutil::random_dataset(rng, 10, 5, 1, 1.0);
    VanillaScaler s;
    s.temperature = 1.7;
    const auto p = apply_vanilla(s, d);
    ASSERT_EQ(p.size(), 50u);
    for (std::size_t i = 0; i < 10; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 5; ++j) sum += p[i * 5 + j];
        EXPECT_NEAR(sum, 1.0, 1e-15);
    }
}

TEST(TempScale, ParsingAndValidation) {
    const auto g = parse_grid("0.5:3:0.25");
    EXPECT_EQ(g.values().size(), 11u);
    EXPECT_THROW(parse_grid("0.5:3"), UsageError);
    EXPECT_THROW(parse_grid("a:b:c"), UsageError);
    EXPECT_THROW(parse_grid("0:3:0.1"), UsageError);
    EXPECT_THROW(parse_grid("3:1:0.1"), UsageError);
    EXPECT_EQ(parse_objective("nll"), FitObjective::nll);
    EXPECT_THROW(parse_objective("brier"), UsageError);
    Rng rng(4);
    const auto d = testutil::random_dataset(rng, 10, 3, 1, 1.0);
    EXPECT_THROW(fit_vanilla(d, FitObjective::ece, {}, 0), ValidationError);
}

TEST(TempScale, JsonRoundTrip) {
    const auto d = generate_synthetic(single_regime_spec(1.5, 500), 5);
    const auto s = fit_vanilla(d, FitObjective::nll, {0.5, 3.0, 0.01}, 10);
    const auto back = vanilla_from_json(nlohmann::json::parse(to_json(s).dump()));
    EXPECT_EQ(back.temperature, s.temperature);
    EXPECT_EQ(back.objective, s.objective);
    EXPECT_EQ(back.bins, 10);
    EXPECT_EQ(back.achieved_objective, s.achieved_objective);
    auto j = to_json(s);
    j["kind"] = "adats";
    EXPECT_THROW(vanilla_from_json(j), FormatError);
    j = to_json(s);
    j.erase("temperature");
    EXPECT_THROW(vanilla_from_json(j), FormatError);
}
