#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "random.hpp"
#include "softmax.hpp"

namespace tempcal::nn {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

enum class OutputActivation { identity, softplus };

/// Fully connected network, ReLU on hidden layers.
///
/// All parameters live in one flat vector; layer l stores its
/// (out x in) row-major weight matrix followed by its bias.
class Mlp {
public:
    /// Per-call activations kept for the backward pass.
    struct Trace {
        std::vector<std::vector<double>> inputs;  // input to each layer
        std::vector<std::vector<double>> pre;     // pre-activation of each layer
        std::vector<double> output;
    };

    Mlp() = default;

    Mlp(std::vector<std::size_t> layer_dims, OutputActivation out = OutputActivation::identity)
        : dims_(std::move(layer_dims)), out_act_(out) {
        require(dims_.size() >= 2, "Mlp: need at least input and output dims");
        for (auto d : dims_) require(d >= 1, "Mlp: layer dims must be positive");
        std::size_t total = 0;
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            offsets_.push_back(total);
            total += dims_[l + 1] * dims_[l] + dims_[l + 1];
        }
        params_.assign(total, 0.0);
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    void init_uniform(Rng& rng) {
        for (std::size_t l = 0; l < num_layers(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(dims_[l]));
            auto w = layer_block(l);
            for (auto& v : w) v = (2.0 * rng.uniform() - 1.0) * bound;
        }
    }

    std::size_t num_layers() const { return dims_.size() - 1; }
    std::size_t input_dim() const { return dims_.front(); }
    std::size_t output_dim() const { return dims_.back(); }
    const std::vector<std::size_t>& dims() const { return dims_; }
    OutputActivation output_activation() const { return out_act_; }

    std::span<double> params() { return params_; }
    std::span<const double> params() const { return params_; }

    std::span<double> weights(std::size_t l) { return {params_.data() + offsets_[l], dims_[l + 1] * dims_[l]}; }
    std::span<double> bias(std::size_t l) {
        return {params_.data() + offsets_[l] + dims_[l + 1] * dims_[l], dims_[l + 1]};
    }

    std::vector<double> forward(std::span<const double> x) const {
        Trace t;
        forward(x, t);
        return t.output;
    }

    void forward(std::span<const double> x, Trace& t) const {
        if (x.size() != input_dim())
            throw ValidationError("Mlp: input has " + std::to_string(x.size()) + " entries, expected " +
                                  std::to_string(input_dim()));
        const std::size_t L = num_layers();
        t.inputs.resize(L);
        t.pre.resize(L);
        t.inputs[0].assign(x.begin(), x.end());
        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t in = dims_[l], out = dims_[l + 1];
            const double* w = params_.data() + offsets_[l];
            const double* b = w + out * in;
            const auto& a = t.inputs[l];
            auto& z = t.pre[l];
            z.resize(out);
            for (std::size_t o = 0; o < out; ++o) {
                const double* row = w + o * in;
                double acc = b[o];
                for (std::size_t i = 0; i < in; ++i) acc += row[i] * a[i];
                z[o] = acc;
            }
            auto& next = l + 1 < L ? t.inputs[l + 1] : t.output;
            next.resize(out);
            if (l + 1 < L) {
                for (std::size_t o = 0; o < out; ++o) next[o] = z[o] > 0.0 ? z[o] : 0.0;
            } else if (out_act_ == OutputActivation::softplus) {
                for (std::size_t o = 0; o < out; ++o) next[o] = softplus(z[o]);
            } else {
                next = z;
            }
        }
    }

    /// Accumulates d(loss)/d(params) into `param_grad` (same layout as
    /// params()) and writes d(loss)/d(input) into `input_grad` if non-empty.
    void backward(const Trace& t, std::span<const double> upstream, std::span<double> param_grad,
                  std::span<double> input_grad = {}) const {
        require(upstream.size() == output_dim(), "Mlp: upstream gradient has wrong size");
        require(param_grad.size() == params_.size(), "Mlp: parameter gradient has wrong size");
        const std::size_t L = num_layers();
        std::vector<double> delta(upstream.begin(), upstream.end());
        if (out_act_ == OutputActivation::softplus)
            for (std::size_t o = 0; o < delta.size(); ++o) delta[o] *= sigmoid(t.pre[L - 1][o]);

        std::vector<double> below;
        for (std::size_t l = L; l-- > 0;) {
            const std::size_t in = dims_[l], out = dims_[l + 1];
            const double* w = params_.data() + offsets_[l];
            double* gw = param_grad.data() + offsets_[l];
            double* gb = gw + out * in;
            const auto& a = t.inputs[l];
            for (std::size_t o = 0; o < out; ++o) {
                const double g = delta[o];
                if (g == 0.0) continue;
                double* grow = gw + o * in;
                for (std::size_t i = 0; i < in; ++i) grow[i] += g * a[i];
                gb[o] += g;
            }
            if (l == 0 && input_grad.empty()) break;
            below.assign(in, 0.0);
            for (std::size_t o = 0; o < out; ++o) {
                const double g = delta[o];
                if (g == 0.0) continue;
                const double* row = w + o * in;
                for (std::size_t i = 0; i < in; ++i) below[i] += g * row[i];
            }
            if (l > 0) {
                const auto& z = t.pre[l - 1];
                for (std::size_t i = 0; i < in; ++i)
                    if (z[i] <= 0.0) below[i] = 0.0;
            }
            delta.swap(below);
        }
        if (!input_grad.empty()) {
            require(input_grad.size() == input_dim(), "Mlp: input gradient has wrong size");
            std::copy(delta.begin(), delta.end(), input_grad.begin());
        }
    }

    friend bool operator==(const Mlp&, const Mlp&) = default;

private:
    std::span<double> layer_block(std::size_t l) {
        return {params_.data() + offsets_[l], dims_[l + 1] * dims_[l] + dims_[l + 1]};
    }

    std::vector<std::size_t> dims_;
    OutputActivation out_act_ = OutputActivation::identity;
    std::vector<std::size_t> offsets_;
    std::vector<double> params_;
};

inline nlohmann::json to_json(const Mlp& m) {
    return {{"layer_dims", m.dims()},
            {"output_activation", m.output_activation() == OutputActivation::softplus ? "softplus" : "identity"},
            {"params", std::vector<double>(m.params().begin(), m.params().end())}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
    const auto act = j.at("output_activation").get<std::string>();
    if (act != "identity" && act != "softplus") throw FormatError("Mlp JSON: unknown activation " + act);
    Mlp m(j.at("layer_dims").get<std::vector<std::size_t>>(),
          act == "softplus" ? OutputActivation::softplus : OutputActivation::identity);
    const auto p = j.at("params").get<std::vector<double>>();
    if (p.size() != m.params().size()) throw FormatError("Mlp JSON: parameter count does not match layer dims");
    std::copy(p.begin(), p.end(), m.params().begin());
    return m;
}

// ---------------------------------------------------------------------------
// Distributions
// ---------------------------------------------------------------------------

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

struct DiagonalGaussian {
    std::vector<double> mean;
    std::vector<double> log_std;

    std::size_t dim() const { return mean.size(); }

    static DiagonalGaussian standard(std::size_t d) { return {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)}; }

    friend bool operator==(const DiagonalGaussian&, const DiagonalGaussian&) = default;
};

inline double gaussian_logpdf(const DiagonalGaussian& g, std::span<const double> z) {
    require(z.size() == g.dim() && g.log_std.size() == g.dim(), "gaussian_logpdf: dimension mismatch");
    double lp = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double u = (z[i] - g.mean[i]) * std::exp(-g.log_std[i]);
        lp -= 0.5 * kLog2Pi + g.log_std[i] + 0.5 * u * u;
    }
    return lp;
}

/// Adds the gradient of gaussian_logpdf(g, z), scaled by `w`, to the three outputs.
inline void gaussian_logpdf_grad(const DiagonalGaussian& g, std::span<const double> z, double w,
                                 std::span<double> d_mean, std::span<double> d_log_std, std::span<double> d_z) {
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double inv_var = std::exp(-2.0 * g.log_std[i]);
        const double r = z[i] - g.mean[i];
        d_mean[i] += w * r * inv_var;
        d_log_std[i] += w * (r * r * inv_var - 1.0);
        d_z[i] -= w * r * inv_var;
    }
}

/// -sum|x - loc| / scale - D log(2 scale)
inline double laplace_logpdf(std::span<const double> loc, double scale, std::span<const double> x) {
    require(scale > 0.0, "laplace_logpdf: scale must be positive");
    require(loc.size() == x.size(), "laplace_logpdf: dimension mismatch");
    double l1 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) l1 += std::abs(x[i] - loc[i]);
    return -l1 / scale - static_cast<double>(x.size()) * std::log(2.0 * scale);
}

/// d laplace_logpdf / d loc; the subgradient at a zero residual is 0.
inline void laplace_logpdf_grad_loc(std::span<const double> loc, double scale, std::span<const double> x,
                                    std::span<double> d_loc) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = x[i] - loc[i];
        d_loc[i] = (r > 0.0 ? 1.0 : r < 0.0 ? -1.0 : 0.0) / scale;
    }
}

/// z = mean + exp(log_std) * noise
inline std::vector<double> reparameterize(const DiagonalGaussian& g, std::span<const double> noise) {
    require(noise.size() == g.dim(), "reparameterize: dimension mismatch");
    std::vector<double> z(g.dim());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = g.mean[i] + std::exp(g.log_std[i]) * noise[i];
    return z;
}

/// Closed-form KL(q || p) for diagonal Gaussians.
inline double gaussian_kl(const DiagonalGaussian& q, const DiagonalGaussian& p) {
    require(q.dim() == p.dim(), "gaussian_kl: dimension mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < q.dim(); ++i) {
        const double var_ratio = std::exp(2.0 * (q.log_std[i] - p.log_std[i]));
        const double dm = (q.mean[i] - p.mean[i]) * std::exp(-p.log_std[i]);
        kl += p.log_std[i] - q.log_std[i] + 0.5 * (var_ratio + dm * dm) - 0.5;
    }
    return kl;
}

struct KlGrad {
    std::vector<double> q_mean, q_log_std, p_mean, p_log_std;
};

inline KlGrad gaussian_kl_grad(const DiagonalGaussian& q, const DiagonalGaussian& p) {
    const std::size_t d = q.dim();
    KlGrad g{std::vector<double>(d), std::vector<double>(d), std::vector<double>(d), std::vector<double>(d)};
    for (std::size_t i = 0; i < d; ++i) {
        const double inv_pvar = std::exp(-2.0 * p.log_std[i]);
        const double qvar = std::exp(2.0 * q.log_std[i]);
        const double dm = q.mean[i] - p.mean[i];
        g.q_mean[i] = dm * inv_pvar;
        g.p_mean[i] = -dm * inv_pvar;
        g.q_log_std[i] = qvar * inv_pvar - 1.0;
        g.p_log_std[i] = 1.0 - (qvar + dm * dm) * inv_pvar;
    }
    return g;
}

/// softmax(s) - onehot(y): gradient of -log softmax(s)_y with respect to s.
inline std::vector<double> softmax_ce_logit_grad(std::span<const double> s, std::size_t y) {
    require(y < s.size(), "softmax_ce_logit_grad: class index out of range");
    auto g = softmax(s);
    g[y] -= 1.0;
    return g;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<double> m;
    std::vector<double> v;

    AdamState() = default;
    AdamState(std::size_t n, double learning_rate) : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam: p -= lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads) {
    require(params.size() == grads.size() && params.size() == s.m.size() && s.m.size() == s.v.size(),
            "adam_step: shape mismatch");
    ++s.step;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
        const double m_hat = s.m[i] / bc1;
        const double v_hat = s.v[i] / bc2;
        params[i] -= s.lr * m_hat / (std::sqrt(v_hat) + s.eps);
    }
}

}  // namespace tempcal::nn
