#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "adats.hpp"
#include "analysis.hpp"
#include "nn.hpp"
#include "random.hpp"

namespace tempcal {

struct CheckResult {
    std::string name;
    std::size_t instances = 0;
    double max_error = 0.0;
    double tolerance = 0.0;
    std::size_t violations = 0;  // instances above tolerance (or failing a sign rule)
    std::size_t skipped = 0;     // coordinates dropped as non-differentiable points
    bool passed() const { return violations == 0; }
};

namespace detail {

/// -log softmax(s / t)_y = log1p(sum_{i!=y} exp((s_i - s_y) / t)), in extended precision.
inline long double nll_ld(std::span<const double> s, std::size_t y, long double t) {
    long double u = 0.0L;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != y) u += std::exp((static_cast<long double>(s[i]) - s[y]) / t);
    return std::log1p(u);
}

struct ParamView {
    std::span<double> params;
    std::span<const double> grads;
};

inline std::vector<ParamView> parameter_views(AdaTsModel& m, const ModelGradients& g) {
    std::vector<ParamView> v;
    v.push_back({m.encoder.params(), g.encoder});
    v.push_back({m.decoder.params(), g.decoder});
    v.push_back({m.temp_mlp.params(), g.temp});
    for (std::size_t j = 0; j < m.k; ++j) {
        v.push_back({m.priors[j].mean, std::span<const double>(g.prior_mean).subspan(j * m.dz, m.dz)});
        v.push_back({m.priors[j].log_std, std::span<const double>(g.prior_log_std).subspan(j * m.dz, m.dz)});
    }
    return v;
}

}  // namespace detail

/// Compares `grads` with central differences of `f` over every model
/// parameter. Two step sizes (h, h/2) are used; coordinates where they
/// disagree sit on a ReLU or |.| kink and are skipped. Returns the
/// scaled_max_error over the remaining coordinates, and the skip count.
inline std::pair<double, std::size_t> model_gradient_error(AdaTsModel& m, const ModelGradients& grads,
                                                           const std::function<double(const AdaTsModel&)>& f,
                                                           double h = 1e-5) {
    std::vector<double> analytic, numeric;
    std::size_t skipped = 0;
    for (auto& view : detail::parameter_views(m, grads)) {
        for (std::size_t p = 0; p < view.params.size(); ++p) {
            const double orig = view.params[p];
            auto central = [&](double step) {
                view.params[p] = orig + step;
                const double up = f(m);
                view.params[p] = orig - step;
                const double down = f(m);
                view.params[p] = orig;
                return (up - down) / (2 * step);
            };
            const double g1 = central(h), g2 = central(h / 2);
            if (std::abs(g1 - g2) > 1e-6 * (1.0 + std::abs(g2))) {
                ++skipped;
                continue;
            }
            analytic.push_back(view.grads[p]);
            numeric.push_back(g2);
        }
    }
    return {scaled_max_error(analytic, numeric), skipped};
}

struct SelfCheckOptions {
    std::uint64_t seed = 0;
    std::size_t scalar_instances = 1000;
    std::size_t model_configs = 50;
    std::size_t hidden = 16;
    double last_layer_tol = 1e-5;
    double temperature_tol = 1e-6;
    double printed_tol = 1e-8;
    double model_tol = 1e-4;
};

inline AdaTsModel random_check_model(Rng& rng, std::size_t d, std::size_t k, std::size_t dz, std::size_t hidden) {
    TrainConfig cfg;
    cfg.latent_dim = dz;
    cfg.encoder_hidden = cfg.decoder_hidden = cfg.temp_hidden = hidden;
    auto m = init_model(d, k, cfg, rng);
    for (auto& p : m.priors) {
        for (auto& v : p.mean) v = rng.normal();
        for (auto& v : p.log_std) v = 0.3 * rng.normal();
    }
    return m;
}

/// Gradient-verification bundle: last-layer softmax-CE gradient, the NLL
/// temperature derivative (and its printed, unnormalised form), and ELBO /
/// joint-objective parameter gradients of the adaptive model.
inline std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& o = {}) {
    Rng rng(o.seed);
    std::vector<CheckResult> out;

    {
        CheckResult r{"last_layer_gradient", o.scalar_instances, 0.0, o.last_layer_tol};
        for (std::size_t n = 0; n < o.scalar_instances; ++n) {
            const std::size_t D = 1 + rng.below(8), k = 2 + rng.below(9);
            const auto w = rng.normal_vector(D * k);
            const auto x = rng.normal_vector(D);
            const std::size_t y = rng.below(k);
            const double e = verify_last_layer_grad(w, x, y, k);
            r.max_error = std::max(r.max_error, e);
            r.violations += e > o.last_layer_tol;
        }
        out.push_back(r);
    }

    {
        CheckResult grad{"temperature_gradient", o.scalar_instances, 0.0, o.temperature_tol};
        CheckResult printed{"printed_temperature_gradient_factor", o.scalar_instances, 0.0, o.printed_tol};
        CheckResult sign{"temperature_gradient_sign", 0, 0.0, 0.0};
        for (std::size_t n = 0; n < o.scalar_instances; ++n) {
            const std::size_t k = 2 + rng.below(9);
            auto s = rng.normal_vector(k);
            for (auto& v : s) v *= 3.0;
            const std::size_t y = rng.below(k);
            const double t = std::exp(std::log(0.1) + rng.uniform() * std::log(100.0));

            const double exact = nll_temperature_gradient(s, y, t);
            const long double h = 1e-7L * t;
            const auto fd = static_cast<double>((detail::nll_ld(s, y, t + h) - detail::nll_ld(s, y, t - h)) / (2 * h));
            const double e = std::abs(exact - fd) / std::max({std::abs(exact), std::abs(fd), 1e-300});
            grad.max_error = std::max(grad.max_error, e);
            grad.violations += e > o.temperature_tol;

            double z = 0.0;
            for (double v : s) z += std::exp(v / t);
            const double p = printed_temperature_gradient(s, y, t);
            const double pe = std::abs(p - exact * z) / std::max({std::abs(p), std::abs(exact * z), 1e-300});
            printed.max_error = std::max(printed.max_error, pe);
            printed.violations += pe > o.printed_tol;

            // A confident correct prediction pushes T down under gradient descent.
            if (argmax(s) == y) {
                ++sign.instances;
                sign.violations += !(exact > 0.0);
            }
        }
        out.push_back(grad);
        out.push_back(printed);
        out.push_back(sign);
    }

    for (bool joint : {false, true}) {
        CheckResult r{joint ? "joint_objective_gradient" : "elbo_gradient", o.model_configs, 0.0, o.model_tol};
        for (std::size_t c = 0; c < o.model_configs; ++c) {
            const std::size_t d = 1 + rng.below(8), dz = 1 + rng.below(4), k = 2 + rng.below(4);
            auto m = random_check_model(rng, d, k, dz, o.hidden);
            auto phi = rng.normal_vector(d);
            for (auto& v : phi) v *= 2.0;
            auto logits = rng.normal_vector(k);
            for (auto& v : logits) v *= 3.0;
            const auto y = static_cast<std::size_t>(rng.below(k));
            const auto noise = rng.normal_vector(dz);

            ObjectiveOptions opt;
            opt.include_ce = joint;
            ModelGradients g(m);
            evaluate_objective(m, phi, logits, y, noise, opt, &g);
            auto f = [&](const AdaTsModel& mm) { return evaluate_objective(mm, phi, logits, y, noise, opt).value; };
            const auto [e, skipped] = model_gradient_error(m, g, f);
            r.max_error = std::max(r.max_error, e);
            r.violations += e > o.model_tol;
            r.skipped += skipped;
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace tempcal
