#pragma once

// One-sided CSI feedback: the UE applies a seeded linear projection (its
// entire stored state is the seed), the BS reconstructs iteratively with
// plug-and-play half-quadratic splitting around a pluggable denoiser. Also
// hosts the per-ratio learned-decoder baseline and UE-side state accounting.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "csifb/channelgen.hpp"
#include "csifb/nn.hpp"
#include "csifb/rng.hpp"

namespace csifb {

struct ProjectionSpec {
    std::uint64_t seed = 0;  // the single UE-side parameter
    double cr = 0.25;        // compression ratio in (0, 1]
    int n = 2048;            // source dimension (2 * n_delay * n_tx reals)

    int m() const { return static_cast<int>(std::lround(cr * n)); }

    void validate() const {
        config_require(n >= 1, "ProjectionSpec: n must be positive");
        config_require(cr > 0.0 && cr <= 1.0, "ProjectionSpec: cr must lie in (0, 1]");
        const int mm = m();
        config_require(mm >= 1 && mm <= n, "ProjectionSpec: require 1 <= m <= n");
    }
};

struct Measurement {
    std::vector<double> y;
    std::uint64_t seed = 0;
    double cr = 1.0;
    int n = 0;
    double snr_db = std::numeric_limits<double>::infinity();
};

// i.i.d. Gaussian entries, mean 0, variance 1/m, drawn row-major from the
// counter-based generator keyed by the spec seed.
inline Eigen::MatrixXd make_projection(const ProjectionSpec& spec) {
    spec.validate();
    const int m = spec.m();
    Eigen::MatrixXd a(m, spec.n);
    Rng rng(spec.seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(m));
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < spec.n; ++c) a(r, c) = s * rng.gauss();
    return a;
}

inline Measurement compress(const std::vector<double>& h, const ProjectionSpec& spec) {
    spec.validate();
    shape_require(static_cast<int>(h.size()) == spec.n, "compress: input length does not match spec.n");
    const Eigen::MatrixXd a = make_projection(spec);
    Eigen::Map<const Eigen::VectorXd> hv(h.data(), spec.n);
    Eigen::VectorXd y = a * hv;
    Measurement out;
    out.y.assign(y.data(), y.data() + y.size());
    out.seed = spec.seed;
    out.cr = spec.cr;
    out.n = spec.n;
    return out;
}

struct PppOptions {
    // A gentle penalty ramp keeps the data term active long enough for the
    // iterate to reach data consistency before it freezes; steeper ladders
    // (e.g. factor 1.6 over 20 iterations) stall well short of exact
    // recovery on sparse inputs.
    int iterations = 40;
    double mu0 = 0.01;          // penalty schedule mu_k = mu0 * mu_factor^k (increasing)
    double mu_factor = 1.15;
    double sigma0 = 0.25;       // denoiser strength, fraction of the unit dynamic range
    double sigma_factor = 0.8;  // geometric decay
    double sigma_floor = 1e-3;
    double stop_tol = 1e-6;     // relative iterate change

    void validate() const {
        config_require(iterations >= 1, "PppOptions: iterations must be >= 1");
        config_require(mu0 > 0 && mu_factor > 1.0, "PppOptions: mu schedule must be increasing");
        config_require(sigma0 > 0 && sigma_factor < 1.0 && sigma_factor > 0,
                       "PppOptions: sigma schedule must be decreasing");
        config_require(sigma_floor > 0, "PppOptions: sigma_floor must be positive");
    }
    double mu(int k) const { return mu0 * std::pow(mu_factor, k); }
    double sigma(int k) const { return std::max(sigma0 * std::pow(sigma_factor, k), sigma_floor); }
};

// sign(x) * max(|x| - lambda*sigma, 0), componentwise.
inline std::vector<double> soft_threshold_denoise(const std::vector<double>& x, double sigma,
                                                  double lambda) {
    config_require(sigma >= 0, "soft_threshold_denoise: sigma must be non-negative");
    std::vector<double> out(x.size());
    const double t = lambda * sigma;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double mag = std::abs(x[i]) - t;
        out[i] = mag > 0 ? (x[i] > 0 ? mag : -mag) : 0.0;
    }
    return out;
}

// Small DnCNN-style residual net; sigma enters as a constant extra channel.
inline ad::Tensor learned_denoise_forward(const nn::ParameterSet& ps, const ad::Tensor& noisy,
                                          const std::vector<double>& sigmas) {
    const int n = noisy.shape()[0], h = noisy.shape()[2], w = noisy.shape()[3];
    shape_require(noisy.shape()[1] == 2, "learned_denoise: expected 2 input channels");
    shape_require(sigmas.size() == static_cast<std::size_t>(n), "learned_denoise: sigma count mismatch");
    std::vector<double> data(static_cast<std::size_t>(n) * 3 * h * w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int i = 0; i < n; ++i) {
        const double* src = noisy.value().data() + static_cast<std::size_t>(i) * 2 * plane;
        double* dst = data.data() + static_cast<std::size_t>(i) * 3 * plane;
        std::copy(src, src + 2 * plane, dst);
        std::fill(dst + 2 * plane, dst + 3 * plane, sigmas[static_cast<std::size_t>(i)]);
    }
    auto x3 = ad::Tensor::leaf({n, 3, h, w}, std::move(data));
    auto t = ad::leaky_relu(nn::conv(ps, "dn.c1", x3));
    t = ad::leaky_relu(nn::conv(ps, "dn.c2", t));
    t = ad::leaky_relu(nn::conv(ps, "dn.c3", t));
    t = nn::conv(ps, "dn.c4", t);
    return ad::sub(noisy, t);  // predicts the noise residual
}

inline nn::ParameterSet make_denoiser_params(Rng& rng, int channels = 16) {
    nn::ParameterSet ps;
    nn::make_conv(ps, "dn.c1", 3, channels, 3, rng);
    nn::make_conv(ps, "dn.c2", channels, channels, 3, rng);
    nn::make_conv(ps, "dn.c3", channels, channels, 3, rng);
    nn::make_conv(ps, "dn.c4", channels, 2, 3, rng);
    ps.metadata["arch"] = "denoiser_conv3_16";
    return ps;
}

// Denoiser plugged into the PPP iteration. The learned variant needs the
// (height, width) of the CSI view to reshape the iterate.
struct Denoiser {
    enum class Kind { identity, soft_threshold, learned_small_conv };
    Kind kind = Kind::soft_threshold;
    double lambda = 1.0;
    const nn::ParameterSet* params = nullptr;
    int height = 0, width = 0;

    static Denoiser identity() { return {Kind::identity, 0.0, nullptr, 0, 0}; }
    static Denoiser soft(double lambda = 1.0) { return {Kind::soft_threshold, lambda, nullptr, 0, 0}; }
    static Denoiser learned(const nn::ParameterSet& ps, int height, int width) {
        return {Kind::learned_small_conv, 0.0, &ps, height, width};
    }

    std::vector<double> operator()(const std::vector<double>& x, double sigma) const {
        config_require(sigma >= 0, "Denoiser: sigma must be non-negative");
        switch (kind) {
            case Kind::identity: return x;
            case Kind::soft_threshold: return soft_threshold_denoise(x, sigma, lambda);
            case Kind::learned_small_conv: {
                shape_require(params != nullptr, "Denoiser: learned variant has no parameters");
                shape_require(static_cast<std::size_t>(2 * height * width) == x.size(),
                              "Denoiser: iterate size does not match 2 x height x width");
                ad::NoGrad ng;
                auto t = ad::Tensor::leaf({1, 2, height, width}, x);
                return learned_denoise_forward(*params, t, {sigma}).value();
            }
        }
        throw ComputeError("Denoiser: unreachable kind");
    }
};

// Holds the projection matrix and one Cholesky factor of (A A^T + mu_k I)
// per iteration; build once, then reconstruct any number of measurements.
class PppSolver {
  public:
    PppSolver(const ProjectionSpec& spec, const PppOptions& opts) : spec_(spec), opts_(opts) {
        spec.validate();
        opts.validate();
        a_ = make_projection(spec);
        const Eigen::MatrixXd gram = a_ * a_.transpose();
        factors_.reserve(opts.iterations);
        for (int k = 0; k < opts.iterations; ++k) {
            Eigen::MatrixXd g = gram;
            g.diagonal().array() += opts.mu(k);
            factors_.emplace_back(g.llt());
            if (factors_.back().info() != Eigen::Success)
                throw ComputeError("PppSolver: Cholesky factorization failed at iteration " +
                                   std::to_string(k));
        }
    }

    const Eigen::MatrixXd& projection() const { return a_; }

    // Half-quadratic splitting from z = 0: the x-step solves
    // argmin ||y - A x||^2 + mu_k ||x - z||^2 through the inversion lemma,
    // the z-step applies the denoiser at sigma_k. Returns the final z.
    std::vector<double> reconstruct(const Measurement& meas, const Denoiser& denoise) const {
        shape_require(meas.n == spec_.n && meas.seed == spec_.seed,
                      "PppSolver: measurement metadata does not match this solver");
        shape_require(static_cast<int>(meas.y.size()) == spec_.m(), "PppSolver: measurement length mismatch");
        Eigen::Map<const Eigen::VectorXd> y(meas.y.data(), static_cast<Eigen::Index>(meas.y.size()));
        const Eigen::VectorXd aty = a_.transpose() * y;

        std::vector<double> z(static_cast<std::size_t>(spec_.n), 0.0);
        Eigen::VectorXd x(spec_.n);
        for (int k = 0; k < opts_.iterations; ++k) {
            const double mu = opts_.mu(k);
            Eigen::Map<const Eigen::VectorXd> zv(z.data(), spec_.n);
            const Eigen::VectorXd r = aty + mu * zv;
            const Eigen::VectorXd s = factors_[static_cast<std::size_t>(k)].solve(a_ * r);
            x = (r - a_.transpose() * s) / mu;
            if (!x.allFinite())
                throw ComputeError("ppp_reconstruct: non-finite iterate at iteration " + std::to_string(k));
            std::vector<double> xz(x.data(), x.data() + x.size());
            std::vector<double> z_new = denoise(xz, opts_.sigma(k));

            double diff = 0.0, base = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) {
                const double d = z_new[i] - z[i];
                diff += d * d;
                base += z_new[i] * z_new[i];
            }
            z = std::move(z_new);
            if (base > 0 && std::sqrt(diff / base) < opts_.stop_tol) break;
        }
        return z;
    }

  private:
    ProjectionSpec spec_;
    PppOptions opts_;
    Eigen::MatrixXd a_;
    std::vector<Eigen::LLT<Eigen::MatrixXd>> factors_;
};

inline std::vector<double> ppp_reconstruct(const Measurement& meas, const Denoiser& denoise,
                                           const PppOptions& opts) {
    ProjectionSpec spec;
    spec.seed = meas.seed;
    spec.cr = meas.cr;
    spec.n = meas.n;
    return PppSolver(spec, opts).reconstruct(meas, denoise);
}

// ---- denoiser training ------------------------------------------------------------
//
// Trains on noisy CSI only; no projection matrix is involved anywhere, which
// is what makes the single model serve every compression ratio.

struct DenoiserTrainConfig {
    double sigma_lo = 0.05;
    double sigma_hi = 0.30;
    int epochs = 15;
    int batch = 32;
    double lr = 1e-3;
    int channels = 16;
};

inline nn::TrainLog train_denoiser(nn::ParameterSet& ps, const Dataset& ds,
                                   const DenoiserTrainConfig& cfg, std::uint64_t seed) {
    config_require(!ds.samples.empty(), "train_denoiser: empty dataset");
    const int h = ds.spec.n_delay, w = ds.spec.n_tx;
    std::vector<std::vector<double>> views(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) views[i] = to_real_view(ds.samples[i].h_da);

    nn::TrainLog log;
    nn::OptimizerState opt;
    opt.lr = cfg.lr;
    Rng order_rng(derive_seed(seed, {0xDE01}));
    Rng noise_rng(derive_seed(seed, {0xDE02}));

    for (int ep = 0; ep < cfg.epochs; ++ep) {
        auto order = nn::epoch_order(views.size(), order_rng);
        double acc = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch) {
            const std::size_t take = std::min<std::size_t>(cfg.batch, order.size() - off);
            std::vector<const std::vector<double>*> rows(take);
            for (std::size_t k = 0; k < take; ++k) rows[k] = &views[order[off + k]];
            auto clean = nn::stack_views(rows, {2, h, w});

            std::vector<double> sigmas(take);
            std::vector<double> noisy_data = clean.value();
            const std::size_t item = static_cast<std::size_t>(2) * h * w;
            for (std::size_t k = 0; k < take; ++k) {
                sigmas[k] = cfg.sigma_lo == cfg.sigma_hi ? cfg.sigma_lo
                                                         : noise_rng.uniform(cfg.sigma_lo, cfg.sigma_hi);
                for (std::size_t i = 0; i < item; ++i) noisy_data[k * item + i] += sigmas[k] * noise_rng.gauss();
            }
            auto noisy = ad::Tensor::leaf(clean.shape(), std::move(noisy_data));

            ps.zero_grad();
            auto loss = nn::mse(learned_denoise_forward(ps, noisy, sigmas), clean);
            ad::backward(loss);
            nn::adam_step(ps, opt);
            acc += loss.scalar();
            batches += 1;
        }
        log.epoch_loss.push_back(acc / static_cast<double>(batches));
    }
    return log;
}

// ---- learned-decoder baseline (per-ratio, CS-CsiNet style) --------------------------

struct LearnedDecoderConfig {
    double cr = 0.5;
    std::uint64_t projection_seed = 0;
    int epochs = 15;
    int batch = 32;
    double lr = 1e-3;
};

inline nn::ParameterSet make_learned_decoder_params(int m, int n, int height, int width, Rng& rng) {
    nn::ParameterSet ps;
    nn::make_dense(ps, "ld.fc", m, n, rng);
    nn::make_conv(ps, "ld.r1.c1", 2, 8, 3, rng);
    nn::make_conv(ps, "ld.r1.c2", 8, 2, 3, rng);
    nn::make_conv(ps, "ld.r2.c1", 2, 8, 3, rng);
    nn::make_conv(ps, "ld.r2.c2", 8, 2, 3, rng);
    ps.metadata["arch"] = "learned_decoder";
    ps.metadata["m"] = m;
    ps.metadata["n"] = n;
    ps.metadata["height"] = height;
    ps.metadata["width"] = width;
    return ps;
}

inline ad::Tensor learned_decode_forward(const nn::ParameterSet& ps, const ad::Tensor& y) {
    const int height = ps.metadata.at("height").get<int>();
    const int width = ps.metadata.at("width").get<int>();
    auto h = nn::dense(ps, "ld.fc", y);
    h = ad::reshape(h, {y.shape()[0], 2, height, width});
    auto r1 = ad::add(h, nn::conv(ps, "ld.r1.c2", ad::leaky_relu(nn::conv(ps, "ld.r1.c1", h))));
    return ad::add(r1, nn::conv(ps, "ld.r2.c2", ad::leaky_relu(nn::conv(ps, "ld.r2.c1", r1))));
}

// Trains the dense-plus-refinement decoder for one fixed compression ratio.
inline nn::TrainLog train_learned_decoder(nn::ParameterSet& ps, const Dataset& ds,
                                          const LearnedDecoderConfig& cfg, std::uint64_t seed) {
    config_require(!ds.samples.empty(), "train_learned_decoder: empty dataset");
    const int h = ds.spec.n_delay, w = ds.spec.n_tx;
    ProjectionSpec pspec{cfg.projection_seed, cfg.cr, 2 * h * w};
    pspec.validate();
    const Eigen::MatrixXd a = make_projection(pspec);
    const int m = pspec.m();
    shape_require(ps.metadata.at("m").get<int>() == m, "train_learned_decoder: params built for another cr");
    ps.metadata["cr"] = cfg.cr;
    ps.metadata["projection_seed"] = cfg.projection_seed;

    std::vector<std::vector<double>> views(ds.size()), measurements(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        views[i] = to_real_view(ds.samples[i].h_da);
        Eigen::Map<const Eigen::VectorXd> hv(views[i].data(), pspec.n);
        Eigen::VectorXd y = a * hv;
        measurements[i].assign(y.data(), y.data() + y.size());
    }

    nn::TrainLog log;
    nn::OptimizerState opt;
    opt.lr = cfg.lr;
    Rng order_rng(derive_seed(seed, {0x1D0}));
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        auto order = nn::epoch_order(views.size(), order_rng);
        double acc = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch) {
            const std::size_t take = std::min<std::size_t>(cfg.batch, order.size() - off);
            std::vector<const std::vector<double>*> xr(take), yr(take);
            for (std::size_t k = 0; k < take; ++k) {
                xr[k] = &views[order[off + k]];
                yr[k] = &measurements[order[off + k]];
            }
            auto x = nn::stack_views(xr, {2, h, w});
            auto y = nn::stack_views(yr, {m});
            ps.zero_grad();
            auto loss = nn::mse(ad::reshape(learned_decode_forward(ps, y), x.shape()), x);
            ad::backward(loss);
            nn::adam_step(ps, opt);
            acc += loss.scalar();
            batches += 1;
        }
        log.epoch_loss.push_back(acc / static_cast<double>(batches));
    }
    return log;
}

inline std::vector<double> decode_learned(const nn::ParameterSet& ps, const Measurement& meas) {
    const double trained_cr = ps.metadata.at("cr").get<double>();
    config_require(std::abs(trained_cr - meas.cr) < 1e-12,
                   "decode_learned: measurement cr does not match the trained ratio");
    shape_require(static_cast<int>(meas.y.size()) == ps.metadata.at("m").get<int>(),
                  "decode_learned: measurement length mismatch");
    ad::NoGrad ng;
    auto y = ad::Tensor::leaf({1, static_cast<int>(meas.y.size())}, meas.y);
    auto out = learned_decode_forward(ps, y);
    return out.value();
}

// ---- UE-side state accounting ---------------------------------------------------------

// Number of values the UE must store for a pipeline: a projection seed counts
// as one; learned UE-side encoders count every parameter.
inline std::size_t count_ue_side_state(const std::string& pipeline_id,
                                       const nn::ParameterSet* ue_side_params = nullptr) {
    if (pipeline_id == "onesided-ppp") return 1;
    if (pipeline_id == "onesided-learned-decoder") return 1;
    if (pipeline_id == "two-sided-djscc") {
        config_require(ue_side_params != nullptr,
                       "count_ue_side_state: two-sided pipeline needs its UE-side parameters");
        return ue_side_params->count_values();
    }
    throw ConfigError("count_ue_side_state: unknown pipeline " + pipeline_id);
}

}  // namespace csifb
