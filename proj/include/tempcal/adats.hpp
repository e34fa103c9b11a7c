#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "nn.hpp"
#include "random.hpp"
#include "softmax.hpp"

namespace tempcal {

inline constexpr int kModelVersion = 1;

struct TrainConfig {
    int epochs = 50;
    double lr = 0.001;
    std::size_t batch_size = 256;
    std::uint64_t seed = 0;
    std::size_t latent_dim = 2;
    double elbo_weight = 1.0;
    double ce_weight = 1.0;
    double temp_floor = 0.05;
    std::size_t encoder_hidden = 128;
    std::size_t decoder_hidden = 128;
    std::size_t temp_hidden = 64;
    /// When false the temperature loss only updates the temperature MLP;
    /// when true it also reaches the priors and encoder through q~ and z.
    bool route_ce_into_vae = true;
    /// Encoder pinned to N(0, I) for every input and all priors pinned to
    /// N(0, I); neither is updated. q~ then carries no per-sample signal.
    bool frozen_density = false;

    void validate() const {
        require(epochs >= 1, "train config: epochs must be at least 1");
        require(lr > 0.0, "train config: lr must be positive");
        require(batch_size >= 1, "train config: batch size must be at least 1");
        require(latent_dim >= 1, "train config: latent dim must be at least 1");
        require(temp_floor > 0.0, "train config: temperature floor must be positive");
        require(encoder_hidden >= 1 && decoder_hidden >= 1 && temp_hidden >= 1, "train config: bad hidden width");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"latent_dim", c.latent_dim},
            {"elbo_weight", c.elbo_weight},
            {"ce_weight", c.ce_weight},
            {"temp_floor", c.temp_floor},
            {"encoder_hidden", c.encoder_hidden},
            {"decoder_hidden", c.decoder_hidden},
            {"temp_hidden", c.temp_hidden},
            {"route_ce_into_vae", c.route_ce_into_vae},
            {"frozen_density", c.frozen_density}};
}

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

struct AdaTsModel {
    std::size_t d = 0, k = 0, dz = 0;
    nn::Mlp encoder;   // d -> hidden -> 2*dz  (mean, log_std)
    nn::Mlp decoder;   // dz -> hidden -> d    (Laplace location)
    std::vector<nn::DiagonalGaussian> priors;  // one per class
    nn::Mlp temp_mlp;  // k -> hidden -> hidden -> 1, softplus output
    double temp_floor = 0.05;
    nlohmann::json metadata = nlohmann::json::object();

    void check_dims() const {
        require(encoder.input_dim() == d && encoder.output_dim() == 2 * dz, "model: encoder dims inconsistent");
        require(decoder.input_dim() == dz && decoder.output_dim() == d, "model: decoder dims inconsistent");
        require(temp_mlp.input_dim() == k && temp_mlp.output_dim() == 1, "model: temperature MLP dims inconsistent");
        require(temp_mlp.output_activation() == nn::OutputActivation::softplus, "model: temperature MLP needs softplus");
        require(priors.size() == k, "model: need one prior per class");
        for (const auto& p : priors) require(p.dim() == dz && p.log_std.size() == dz, "model: prior dims inconsistent");
        require(temp_floor > 0.0, "model: temperature floor must be positive");
    }
};

/// Randomly initialised model. Network weights are uniform in
/// +-1/sqrt(fan_in); prior means are N(0, 0.1^2), prior log-stds 0.
inline AdaTsModel init_model(std::size_t d, std::size_t k, const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    require(d >= 1 && k >= 2, "init_model: need d >= 1 and k >= 2");
    AdaTsModel m;
    m.d = d;
    m.k = k;
    m.dz = cfg.latent_dim;
    m.temp_floor = cfg.temp_floor;
    m.encoder = nn::Mlp({d, cfg.encoder_hidden, 2 * m.dz});
    m.decoder = nn::Mlp({m.dz, cfg.decoder_hidden, d});
    m.temp_mlp = nn::Mlp({k, cfg.temp_hidden, cfg.temp_hidden, 1}, nn::OutputActivation::softplus);
    m.encoder.init_uniform(rng);
    m.decoder.init_uniform(rng);
    m.temp_mlp.init_uniform(rng);
    m.priors.resize(k);
    for (auto& p : m.priors) {
        p.mean.resize(m.dz);
        for (auto& v : p.mean) v = 0.1 * rng.normal();
        p.log_std.assign(m.dz, 0.0);
    }
    if (cfg.frozen_density) {
        const auto last = m.encoder.num_layers() - 1;
        std::fill(m.encoder.weights(last).begin(), m.encoder.weights(last).end(), 0.0);
        std::fill(m.encoder.bias(last).begin(), m.encoder.bias(last).end(), 0.0);
        for (auto& p : m.priors) p = nn::DiagonalGaussian::standard(m.dz);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Inference path
// ---------------------------------------------------------------------------

inline nn::DiagonalGaussian split_posterior(std::span<const double> enc_out, std::size_t dz) {
    return {std::vector<double>(enc_out.begin(), enc_out.begin() + static_cast<std::ptrdiff_t>(dz)),
            std::vector<double>(enc_out.begin() + static_cast<std::ptrdiff_t>(dz), enc_out.end())};
}

/// q(z | phi)
inline nn::DiagonalGaussian encode(const AdaTsModel& m, std::span<const double> phi) {
    if (phi.size() != m.d)
        throw ValidationError("encode: feature vector has " + std::to_string(phi.size()) + " entries, model expects " +
                              std::to_string(m.d));
    return split_posterior(m.encoder.forward(phi), m.dz);
}

/// q~_j = log N(z; mu_j, sigma_j) for every class prior j, unnormalised across classes.
inline std::vector<double> pseudo_likelihood_vector(const AdaTsModel& m, std::span<const double> z) {
    require(z.size() == m.dz, "pseudo_likelihood_vector: latent dimension mismatch");
    std::vector<double> q(m.k);
    for (std::size_t j = 0; j < m.k; ++j) q[j] = nn::gaussian_logpdf(m.priors[j], z);
    return q;
}

inline double temperature_from_pseudo_likelihood(const AdaTsModel& m, std::span<const double> q) {
    return m.temp_mlp.forward(q)[0] + m.temp_floor;
}

/// T = softplus(g(q~(z))) + floor with z the posterior mean.
inline double predict_temperature(const AdaTsModel& m, std::span<const double> phi) {
    const auto post = encode(m, phi);
    return temperature_from_pseudo_likelihood(m, pseudo_likelihood_vector(m, post.mean));
}

struct Calibration {
    std::vector<double> temperatures;
    std::vector<double> probabilities;  // row-major n x k
};

inline Calibration calibrate(const AdaTsModel& m, const CalibrationDataset& d) {
    if (d.feature_dim() != m.d || d.num_classes() != m.k)
        throw ValidationError("calibrate: dataset dims (d=" + std::to_string(d.feature_dim()) + ", k=" +
                              std::to_string(d.num_classes()) + ") do not match model (d=" + std::to_string(m.d) +
                              ", k=" + std::to_string(m.k) + ")");
    Calibration c;
    c.temperatures.resize(d.size());
    c.probabilities.resize(d.size() * d.num_classes());
    for (std::size_t i = 0; i < d.size(); ++i) {
        c.temperatures[i] = predict_temperature(m, d.features(i));
        softmax_with_temperature(d.logits(i), c.temperatures[i],
                                 std::span<double>(c.probabilities.data() + i * m.k, m.k));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Training objective and its gradient
// ---------------------------------------------------------------------------

/// Gradient buffers laid out like the model parameters.
struct ModelGradients {
    std::vector<double> encoder, decoder, temp;
    std::vector<double> prior_mean, prior_log_std;  // k * dz, class-major

    explicit ModelGradients(const AdaTsModel& m)
        : encoder(m.encoder.params().size(), 0.0), decoder(m.decoder.params().size(), 0.0),
          temp(m.temp_mlp.params().size(), 0.0), prior_mean(m.k * m.dz, 0.0), prior_log_std(m.k * m.dz, 0.0) {}

    void zero() {
        for (auto* v : {&encoder, &decoder, &temp, &prior_mean, &prior_log_std}) std::fill(v->begin(), v->end(), 0.0);
    }
};

struct ObjectiveTerms {
    double elbo = 0.0;
    double ce = 0.0;  // log softmax(s / T)_y
    double temperature = 0.0;
    double value = 0.0;  // elbo_weight * elbo + ce_weight * ce
};

struct ObjectiveOptions {
    double elbo_weight = 1.0;
    double ce_weight = 1.0;
    bool include_ce = true;
    bool route_ce_into_vae = true;
};

/// Scratch buffers reused across samples.
struct ObjectiveWorkspace {
    nn::Mlp::Trace enc, dec, temp;
    std::vector<double> z, q, d_loc, d_dec_in, d_enc_out, d_q;
};

/// Evaluates elbo + log Cat(y | softmax(s / T)) on one reparameterised
/// sample z = mu + sigma * noise. If `grads` is non-null, adds
/// `scale` * d(value)/d(params) into it.
inline ObjectiveTerms evaluate_objective(const AdaTsModel& m, std::span<const double> phi,
                                         std::span<const double> logits, std::size_t y,
                                         std::span<const double> noise, const ObjectiveOptions& opt,
                                         ModelGradients* grads = nullptr, double scale = 1.0,
                                         ObjectiveWorkspace* ws = nullptr) {
    require(phi.size() == m.d, "objective: feature dimension mismatch");
    require(noise.size() == m.dz, "objective: noise dimension mismatch");
    require(y < m.k, "objective: label out of range");
    require(!opt.include_ce || logits.size() == m.k, "objective: logit dimension mismatch");
    ObjectiveWorkspace local;
    ObjectiveWorkspace& w = ws ? *ws : local;
    const std::size_t dz = m.dz;

    m.encoder.forward(phi, w.enc);
    const auto post = split_posterior(w.enc.output, dz);
    w.z.resize(dz);
    for (std::size_t i = 0; i < dz; ++i) w.z[i] = post.mean[i] + std::exp(post.log_std[i]) * noise[i];

    m.decoder.forward(w.z, w.dec);
    const auto& prior_y = m.priors[y];
    ObjectiveTerms t;
    t.elbo = nn::laplace_logpdf(w.dec.output, 1.0, phi) - nn::gaussian_kl(post, prior_y);
    t.value = opt.elbo_weight * t.elbo;

    double dce_dT = 0.0;
    if (opt.include_ce) {
        w.q.resize(m.k);
        for (std::size_t j = 0; j < m.k; ++j) w.q[j] = nn::gaussian_logpdf(m.priors[j], w.z);
        m.temp_mlp.forward(w.q, w.temp);
        const double T = w.temp.output[0] + m.temp_floor;
        t.temperature = T;
        if (!std::isfinite(T)) {
            // Let the caller report the non-finite loss with its own context.
            t.ce = t.value = std::numeric_limits<double>::quiet_NaN();
            return t;
        }
        t.ce = log_softmax_at(logits, T, y);
        t.value += opt.ce_weight * t.ce;
        // d/dT [s_y / T - lse(s / T)] = sum_i p_i (s_i - s_y) / T^2
        const auto p = softmax_with_temperature(logits, T);
        for (std::size_t i = 0; i < m.k; ++i) dce_dT += p[i] * (logits[i] - logits[y]);
        dce_dT /= T * T;
    }
    if (!grads) return t;

    // d(value)/dz, accumulated from the decoder, and from q~ when routed.
    std::vector<double> dz_total(dz, 0.0);

    // Temperature branch.
    if (opt.include_ce) {
        const double upstream = scale * opt.ce_weight * dce_dT;
        w.d_q.assign(m.k, 0.0);
        m.temp_mlp.backward(w.temp, std::span<const double>(&upstream, 1), grads->temp, w.d_q);
        if (opt.route_ce_into_vae) {
            for (std::size_t j = 0; j < m.k; ++j)
                nn::gaussian_logpdf_grad(m.priors[j], w.z, w.d_q[j],
                                         std::span<double>(grads->prior_mean.data() + j * dz, dz),
                                         std::span<double>(grads->prior_log_std.data() + j * dz, dz), dz_total);
        }
    }

    // Reconstruction branch: Laplace(phi; decoder(z), 1).
    w.d_loc.resize(m.d);
    nn::laplace_logpdf_grad_loc(w.dec.output, 1.0, phi, w.d_loc);
    for (auto& v : w.d_loc) v *= scale * opt.elbo_weight;
    w.d_dec_in.assign(dz, 0.0);
    m.decoder.backward(w.dec, w.d_loc, grads->decoder, w.d_dec_in);
    for (std::size_t i = 0; i < dz; ++i) dz_total[i] += w.d_dec_in[i];

    // KL branch: value contains -KL(q || prior_y).
    const auto klg = nn::gaussian_kl_grad(post, prior_y);
    const double kscale = -scale * opt.elbo_weight;
    w.d_enc_out.assign(2 * dz, 0.0);
    for (std::size_t i = 0; i < dz; ++i) {
        w.d_enc_out[i] = kscale * klg.q_mean[i];
        w.d_enc_out[dz + i] = kscale * klg.q_log_std[i];
        grads->prior_mean[y * dz + i] += kscale * klg.p_mean[i];
        grads->prior_log_std[y * dz + i] += kscale * klg.p_log_std[i];
    }

    // z = mu + exp(log_std) * noise
    for (std::size_t i = 0; i < dz; ++i) {
        w.d_enc_out[i] += dz_total[i];
        w.d_enc_out[dz + i] += dz_total[i] * std::exp(post.log_std[i]) * noise[i];
    }
    m.encoder.backward(w.enc, w.d_enc_out, grads->encoder);
    return t;
}

/// ELBO alone (Laplace reconstruction minus analytic KL to the label's prior).
inline double elbo(const AdaTsModel& m, std::span<const double> phi, std::size_t y, std::span<const double> noise,
                   ModelGradients* grads = nullptr) {
    ObjectiveOptions opt;
    opt.include_ce = false;
    return evaluate_objective(m, phi, {}, y, noise, opt, grads).elbo;
}

/// elbo + log softmax(s / T(q~))_y; logits are constants.
inline double joint_objective(const AdaTsModel& m, std::span<const double> phi, std::span<const double> logits,
                              std::size_t y, std::span<const double> noise, ModelGradients* grads = nullptr,
                              const ObjectiveOptions& opt = {}) {
    return evaluate_objective(m, phi, logits, y, noise, opt, grads).value;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochStats {
    double mean_elbo = 0.0;
    double mean_ce = 0.0;
    double mean_temperature = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    double ece_before = 0.0;  // raw logits
    double ece_after = 0.0;   // adaptive temperatures
};

inline nlohmann::json to_json(const TrainReport& r) {
    nlohmann::json ep = nlohmann::json::array();
    for (const auto& e : r.epochs)
        ep.push_back({{"mean_elbo", e.mean_elbo}, {"mean_ce", e.mean_ce}, {"mean_temperature", e.mean_temperature}});
    return {{"epochs", ep}, {"ece_before", r.ece_before}, {"ece_after", r.ece_after}};
}

struct TrainResult {
    AdaTsModel model;
    TrainReport report;
};

namespace detail {

struct ParamGroup {
    std::span<double> params;
    std::vector<double>* grads;
    nn::AdamState state;
};

}  // namespace detail

/// Mini-batch Adam on the batch-mean of -(elbo + log Cat). Each epoch
/// visits a fresh Rng::shuffle permutation; one noise draw per sample.
/// `validation` (defaults to `d`) is used for the ECE fields of the report.
inline TrainResult train(const CalibrationDataset& d, const TrainConfig& cfg,
                         const CalibrationDataset* validation = nullptr) {
    cfg.validate();
    Rng rng(cfg.seed);
    TrainResult result{init_model(d.feature_dim(), d.num_classes(), cfg, rng), {}};
    AdaTsModel& m = result.model;
    m.metadata = {{"seed", cfg.seed},
                  {"config", to_json(cfg)},
                  {"config_hash", fnv1a(to_json(cfg).dump())},
                  {"train_samples", d.size()}};

    ModelGradients grads(m);
    std::vector<double> prior_means(m.k * m.dz), prior_log_stds(m.k * m.dz);
    auto gather_priors = [&] {
        for (std::size_t j = 0; j < m.k; ++j)
            for (std::size_t i = 0; i < m.dz; ++i) {
                prior_means[j * m.dz + i] = m.priors[j].mean[i];
                prior_log_stds[j * m.dz + i] = m.priors[j].log_std[i];
            }
    };
    gather_priors();

    std::vector<detail::ParamGroup> groups;
    auto add = [&](std::span<double> p, std::vector<double>& g) {
        groups.push_back({p, &g, nn::AdamState(p.size(), cfg.lr)});
    };
    if (!cfg.frozen_density) {
        add(m.encoder.params(), grads.encoder);
        add(prior_means, grads.prior_mean);
        add(prior_log_stds, grads.prior_log_std);
    }
    add(m.decoder.params(), grads.decoder);
    add(m.temp_mlp.params(), grads.temp);

    ObjectiveOptions opt;
    opt.elbo_weight = cfg.elbo_weight;
    opt.ce_weight = cfg.ce_weight;
    opt.route_ce_into_vae = cfg.route_ce_into_vae;

    ObjectiveWorkspace ws;
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> noise(m.dz);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        EpochStats stats;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double scale = -1.0 / static_cast<double>(end - start);  // minimise the negated mean
            grads.zero();
            double batch_value = 0.0;
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t i = order[b];
                for (auto& v : noise) v = rng.normal();
                const auto t = evaluate_objective(m, d.features(i), d.logits(i), d.label(i), noise, opt, &grads,
                                                  scale, &ws);
                batch_value += t.value;
                stats.mean_elbo += t.elbo;
                stats.mean_ce += t.ce;
                stats.mean_temperature += t.temperature;
            }
            if (!std::isfinite(batch_value))
                throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batch_index));
            for (auto& g : groups) nn::adam_step(g.state, g.params, *g.grads);
            if (!cfg.frozen_density) {
                for (std::size_t j = 0; j < m.k; ++j)
                    for (std::size_t i = 0; i < m.dz; ++i) {
                        m.priors[j].mean[i] = prior_means[j * m.dz + i];
                        m.priors[j].log_std[i] = prior_log_stds[j * m.dz + i];
                    }
            }
        }
        const double n = static_cast<double>(d.size());
        stats.mean_elbo /= n;
        stats.mean_ce /= n;
        stats.mean_temperature /= n;
        result.report.epochs.push_back(stats);
    }

    const CalibrationDataset& val = validation ? *validation : d;
    result.report.ece_before = ece(val, 1.0);
    result.report.ece_after = ece(val, calibrate(m, val).temperatures);
    return result;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const AdaTsModel& m) {
    nlohmann::json priors = nlohmann::json::array();
    for (const auto& p : m.priors) priors.push_back({{"mean", p.mean}, {"log_std", p.log_std}});
    return {{"kind", "adats"},
            {"version", kModelVersion},
            {"dims", {{"d", m.d}, {"k", m.k}, {"d_z", m.dz}}},
            {"encoder", nn::to_json(m.encoder)},
            {"decoder", nn::to_json(m.decoder)},
            {"priors", priors},
            {"temp_mlp", nn::to_json(m.temp_mlp)},
            {"temp_floor", m.temp_floor},
            {"metadata", m.metadata}};
}

inline AdaTsModel adats_from_json(const nlohmann::json& j) {
    try {
        if (j.at("kind") != "adats") throw FormatError("model JSON: kind is not 'adats'");
        const int version = j.at("version").get<int>();
        if (version != kModelVersion)
            throw FormatError("model JSON: unsupported version " + std::to_string(version) + " (expected " +
                              std::to_string(kModelVersion) + ")");
        AdaTsModel m;
        m.d = j.at("dims").at("d").get<std::size_t>();
        m.k = j.at("dims").at("k").get<std::size_t>();
        m.dz = j.at("dims").at("d_z").get<std::size_t>();
        m.encoder = nn::mlp_from_json(j.at("encoder"));
        m.decoder = nn::mlp_from_json(j.at("decoder"));
        m.temp_mlp = nn::mlp_from_json(j.at("temp_mlp"));
        for (const auto& p : j.at("priors"))
            m.priors.push_back({p.at("mean").get<std::vector<double>>(), p.at("log_std").get<std::vector<double>>()});
        m.temp_floor = j.at("temp_floor").get<double>();
        m.metadata = j.value("metadata", nlohmann::json::object());
        try {
            m.check_dims();
        } catch (const ValidationError& e) {
            throw FormatError(std::string("model JSON: ") + e.what());
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model JSON: ") + e.what());
    }
}

inline void save_model(const AdaTsModel& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json(m).dump() << '\n';
    if (!out) throw Error("write failed for " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline AdaTsModel load_model(const std::filesystem::path& path) { return adats_from_json(read_json_file(path)); }

}  // namespace tempcal
