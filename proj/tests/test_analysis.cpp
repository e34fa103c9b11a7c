#include <gtest/gtest.h>

#include <sstream>

#include <tempcal/analysis.hpp>
#include <tempcal/selfcheck.hpp>

#include "test_util.hpp"

using namespace tempcal;

namespace {

AdaTsModel trained_model(const CalibrationDataset& d) {
    TrainConfig c;
    c.epochs = 2;
    c.batch_size = 64;
    c.encoder_hidden = c.decoder_hidden = 16;
    c.temp_hidden = 8;
    return train(d, c).model;
}

}  // namespace

// ---- oracle checks ---------------------------------------------------------

TEST(AnalysisOracle, TemperatureGradientByHand) {
    const std::vector<double> s{2.0, 0.0};
    // (s_y - sum p_i s_i) / t^2 = 2 (1 - p_0) = 2 / (1 + e^2)
    EXPECT_NEAR(nll_temperature_gradient(s, 0, 1.0), 2.0 / (1.0 + std::exp(2.0)), 1e-15);
    EXPECT_NEAR(nll_temperature_gradient(s, 0, 1.0), 0.2384058440, 1e-10);
    EXPECT_NEAR(nll_temperature_gradient(s, 1, 1.0), -2.0 * std::exp(2.0) / (1.0 + std::exp(2.0)), 1e-15);
    // Printed form: (s_y e^{s_1} - s_1 e^{s_1}) = 2, i.e. exact * (e^2 + 1)
    EXPECT_NEAR(printed_temperature_gradient(s, 0, 1.0), 2.0, 1e-15);
}

TEST(AnalysisOracle, TemperatureGradientMatchesExtendedPrecisionDifferences) {
    Rng rng(1);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t k = 2 + rng.below(8);
        auto s = rng.normal_vector(k);
        for (auto& v : s) v *= 3;
        const auto y = static_cast<std::size_t>(rng.below(k));
        const double t = 0.2 + 5 * rng.uniform();
        const long double h = 1e-7L * t;
        const double fd =
            static_cast<double>((detail::nll_ld(s, y, t + h) - detail::nll_ld(s, y, t - h)) / (2 * h));
        const double g = nll_temperature_gradient(s, y, t);
        EXPECT_LE(std::abs(g - fd), 1e-7 * std::max(std::abs(g), std::abs(fd)));
    }
}

TEST(AnalysisOracle, LastLayerGradientByHand) {
    const std::vector<double> w{0.0, 0.0}, x{2.0};
    // softmax(0, 0) = (0.5, 0.5); x (p - onehot(0)) = (-1, 1)
    const auto g = last_layer_grad(w, x, 0, 2);
    EXPECT_DOUBLE_EQ(g[0], -1.0);
    EXPECT_DOUBLE_EQ(g[1], 1.0);
    EXPECT_LT(verify_last_layer_grad(w, x, 0, 2), 1e-9);
}

TEST(AnalysisOracle, ScaledMaxError) {
    EXPECT_EQ(scaled_max_error(std::vector<double>{1, 2}, std::vector<double>{1, 2}), 0.0);
    EXPECT_DOUBLE_EQ(scaled_max_error(std::vector<double>{1, 4}, std::vector<double>{1.5, 4}), 0.125);
    EXPECT_EQ(scaled_max_error(std::vector<double>{0}, std::vector<double>{0}), 0.0);
}

// ---- properties ------------------------------------------------------------

TEST(Analysis, GradientSignFollowsCorrectness) {
    Rng rng(2);
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t k = 2 + rng.below(8);
        const auto s = rng.normal_vector(k);
        const double t = 0.1 + 5 * rng.uniform();
        const auto top = argmax(s);
        // A correct argmax prediction always wants a smaller T.
        ASSERT_GT(nll_temperature_gradient(s, top, t), 0.0);
        // The least likely class always wants a larger T.
        const auto bottom = static_cast<std::size_t>(std::min_element(s.begin(), s.end()) - s.begin());
        ASSERT_LT(nll_temperature_gradient(s, bottom, t), 0.0);
    }
}

TEST(Analysis, SelfcheckPassesOnASmallBundle) {
    SelfCheckOptions o;
    o.scalar_instances = 100;
    o.model_configs = 5;
    for (const auto& r : run_selfcheck(o)) EXPECT_TRUE(r.passed()) << r.name << " max_err=" << r.max_error;
}

TEST(Analysis, InterpolationEndpointsAreTheClassMeans) {
    const auto d = generate_synthetic(single_regime_spec(1.0, 400), 3);
    const auto m = trained_model(d);
    const auto tr = class_mean_interpolation(m, d, 0, 2, 5);
    ASSERT_EQ(tr.alphas.size(), 5u);
    EXPECT_EQ(tr.alphas.front(), 0.0);
    EXPECT_EQ(tr.alphas.back(), 1.0);
    EXPECT_EQ(tr.alphas[2], 0.5);
    EXPECT_EQ(tr.temperatures.back(), predict_temperature(m, class_mean_feature(d, 0)));
    EXPECT_EQ(tr.temperatures.front(), predict_temperature(m, class_mean_feature(d, 2)));
    EXPECT_THROW(class_mean_interpolation(m, d, 0, 9, 5), ValidationError);
    EXPECT_THROW(class_mean_interpolation(m, d, 0, 1, 1), ValidationError);
}

TEST(Analysis, ClassMeanByHand) {
    const CalibrationDataset d(3, 2, 2, {1, 2, 3, 4, 10, 10}, {0, 0, 0, 0, 0, 0}, {0, 0, 1});
    EXPECT_EQ(class_mean_feature(d, 0), (std::vector<double>{2, 3}));
    EXPECT_EQ(class_mean_feature(d, 1), (std::vector<double>{10, 10}));
}

TEST(Analysis, TemperatureHistogramGroups) {
    const auto d = generate_synthetic(single_regime_spec(1.0, 400), 4);
    const auto m = trained_model(d);
    const auto temps = calibrate(m, d).temperatures;

    const auto by_class = temperature_histogram(m, d, Partition::by_class);
    std::size_t total = 0;
    for (const auto& g : by_class.groups) {
        total += g.values.size();
        double mean = 0;
        for (double v : g.values) mean += v;
        mean /= static_cast<double>(g.values.size());
        EXPECT_NEAR(g.mean, mean, 1e-12);
        EXPECT_GE(g.stddev, 0.0);
    }
    EXPECT_EQ(total, d.size());

    const auto by_corr = temperature_histogram(m, d, Partition::by_correctness);
    ASSERT_EQ(by_corr.groups.size(), 2u);
    EXPECT_EQ(by_corr.groups[0].name, "correct");
    EXPECT_EQ(static_cast<double>(by_corr.groups[0].values.size()), std::round(accuracy(d) * d.size()));
    EXPECT_EQ(to_json(by_corr)["partition"], "correctness");
    EXPECT_THROW(parse_partition("label"), UsageError);
}

TEST(Analysis, PopulationStdByHand) {
    // One-class dataset where every sample gets the same T: std must be 0.
    Rng rng(5);
    auto m = random_check_model(rng, 2, 2, 1, 4);
    std::fill(m.encoder.params().begin(), m.encoder.params().end(), 0.0);
    const CalibrationDataset d(3, 2, 2, {1, 2, 3, 4, 5, 6}, {1, 0, 1, 0, 1, 0}, {0, 0, 0});
    const auto h = temperature_histogram(m, d, Partition::by_class);
    ASSERT_EQ(h.groups.size(), 1u);
    EXPECT_EQ(h.groups[0].stddev, 0.0);
}

TEST(Analysis, LatentExportHasOneRowPerSample) {
    const auto d = generate_synthetic(single_regime_spec(1.0, 50), 6);
    const auto m = trained_model(d);
    std::ostringstream os;
    write_latents_csv(os, m, d);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "sample,label,correct,contribution,z0,z1");
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
    }
    EXPECT_EQ(rows, d.size());
}

TEST(Analysis, InterpolationCsv) {
    InterpolationTrace t{1, 3, {0.0, 1.0}, {1.5, 2.5}};
    std::ostringstream os;
    write_csv(os, t);
    EXPECT_EQ(os.str(), "class_i,class_j,alpha,temperature\n1,3,0,1.5\n1,3,1,2.5\n");
}
