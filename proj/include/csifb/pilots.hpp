#pragma once

// Imperfect-CSI front end: downlink pilot transmission, least-squares
// estimation, and the two feedback pipelines built on them — classical
// estimate-then-compress and the direct compression of raw received pilots.

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <vector>

#include "csifb/channelgen.hpp"
#include "csifb/djscc.hpp"

namespace csifb {

struct PilotSpec {
    int n_tx = 16;
    int n_pilot = 16;            // N_p pilot symbols
    double pilot_snr_db = 10.0;  // relative to ref_power per received element
    double ref_power = 1.0;      // mean |channel element|^2 the SNR refers to
    CMat x;                      // n_tx x N_p, columns from a unitary DFT matrix

    void validate() const {
        config_require(n_tx >= 1 && n_pilot >= 1, "PilotSpec: positive dims required");
        shape_require(x.rows() == n_tx && x.cols() == n_pilot, "PilotSpec: pilot matrix shape mismatch");
        config_require(ref_power > 0, "PilotSpec: ref_power must be positive");
    }
    double noise_var() const {
        return std::isinf(pilot_snr_db) ? 0.0 : ref_power * std::pow(10.0, -pilot_snr_db / 10.0);
    }
};

// Columns are the first N_p columns of the n_tx-point unitary DFT matrix,
// scaled to unit per-symbol power.
inline PilotSpec make_pilot_spec(int n_tx, int n_pilot, double pilot_snr_db, double ref_power = 1.0) {
    PilotSpec spec;
    spec.n_tx = n_tx;
    spec.n_pilot = n_pilot;
    spec.pilot_snr_db = pilot_snr_db;
    spec.ref_power = ref_power;
    const auto& f = detail::dft_matrix(n_tx);
    spec.x = f.leftCols(std::min(n_pilot, n_tx));
    if (n_pilot > n_tx) {
        // repeat columns cyclically when more pilots than antennas are asked for
        spec.x.conservativeResize(n_tx, n_pilot);
        for (int c = n_tx; c < n_pilot; ++c) spec.x.col(c) = f.col(c % n_tx);
    }
    for (int c = 0; c < n_pilot; ++c) spec.x.col(c) /= spec.x.col(c).norm();
    spec.validate();
    return spec;
}

// Y = H X + N with circular complex noise of variance noise_var() per
// element; deterministic per seed. H rows are per-subcarrier channels.
inline CMat receive_pilots(const CMat& h, const PilotSpec& spec, std::uint64_t seed) {
    spec.validate();
    shape_require(h.cols() == spec.n_tx, "receive_pilots: channel/pilot antenna mismatch");
    CMat y = h * spec.x;
    const double nv = spec.noise_var();
    if (nv > 0) {
        Rng rng(seed);
        const double s = std::sqrt(nv / 2.0);
        for (int r = 0; r < y.rows(); ++r)
            for (int c = 0; c < y.cols(); ++c) y(r, c) += cplx(s * rng.gauss(), s * rng.gauss());
    }
    return y;
}

// H_hat = Y X^+ — the classical LS solution for full-rank wide pilots, the
// minimum-Frobenius-norm solution when N_p < n_tx.
inline CMat ls_estimate(const CMat& y, const PilotSpec& spec) {
    spec.validate();
    shape_require(y.cols() == spec.n_pilot, "ls_estimate: received pilot count mismatch");
    Eigen::JacobiSVD<CMat> svd(spec.x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double smax = svd.singularValues()(0);
    const double tol = 1e-10 * std::max(1.0, smax);
    int rank = 0;
    for (int i = 0; i < svd.singularValues().size(); ++i)
        if (svd.singularValues()(i) > tol) rank += 1;
    if (spec.n_pilot >= spec.n_tx && rank < spec.n_tx)
        throw ComputeError("ls_estimate: rank-deficient pilot matrix with N_p >= n_tx");
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(svd.singularValues().size());
    for (int i = 0; i < rank; ++i) inv(i) = 1.0 / svd.singularValues()(i);
    const CMat pinv = svd.matrixV() * inv.asDiagonal() * svd.matrixU().adjoint();  // N_p x n_tx
    return y * pinv;
}

// Predicted LS error energy per channel row: noise_var * tr((X X^H)^-1).
inline double ls_error_energy_per_row(const PilotSpec& spec) {
    const CMat g = spec.x * spec.x.adjoint();
    return spec.noise_var() * g.inverse().trace().real();
}

// ---- imperfect-CSI pipelines ----------------------------------------------------------

enum class CeMode { ce_then_compress, direct_pilot };

inline const char* to_string(CeMode m) { return m == CeMode::ce_then_compress ? "ce" : "direct"; }

// Per-sample UE-side multiply-accumulate count (complex MACs counted as 4
// real multiplies is irrelevant here; everything is in real MACs).
inline std::size_t ue_side_macs(CeMode mode, const DjsccArch& arch, const PilotSpec& pilots,
                                int n_sub) {
    std::size_t macs = djscc_encoder_macs(arch);
    if (mode == CeMode::ce_then_compress) {
        // LS pseudo-inverse apply: (n_sub x N_p) * (N_p x n_tx), complex -> 4 real MACs
        macs += 4ull * static_cast<std::size_t>(n_sub) * pilots.n_pilot * pilots.n_tx;
        // delay-angle transform GEMMs
        macs += 4ull * (static_cast<std::size_t>(n_sub) * n_sub * pilots.n_tx +
                        static_cast<std::size_t>(n_sub) * pilots.n_tx * pilots.n_tx);
    }
    return macs;
}

// Input view for one sample under the given mode: the truncated delay-angle
// LS estimate, or the raw received pilots.
inline std::vector<double> pipeline_input_view(CeMode mode, const CsiSample& sample,
                                               const ChannelSpec& cspec, const PilotSpec& pilots,
                                               std::uint64_t noise_seed) {
    shape_require(sample.h_sf.size() > 0, "pipeline_input_view: dataset lacks h_sf (generate with keep_sf)");
    CMat y = receive_pilots(sample.h_sf, pilots, noise_seed);
    if (mode == CeMode::direct_pilot) return to_real_view(y);
    CMat h_hat = ls_estimate(y, pilots);
    return to_real_view(truncate_delay(to_delay_angle(h_hat), cspec.n_delay));
}

struct CePipelineConfig {
    CeMode mode = CeMode::ce_then_compress;
    PilotSpec pilots;
    double uplink_snr_db = std::numeric_limits<double>::infinity();
    int epochs = 15;
    int batch = 32;
    double lr = 1e-3;
};

// Trains the DJSCC chain for one pipeline mode: inputs are mode-specific
// views of noisy pilots, the target is always the true truncated CSI. Pilot
// noise is redrawn every epoch.
inline nn::TrainLog train_ce_pipeline(DjsccModel& m, const Dataset& ds, const CePipelineConfig& cfg,
                                      std::uint64_t seed) {
    config_require(!ds.samples.empty(), "train_ce_pipeline: empty dataset");
    config_require(ds.has_sf, "train_ce_pipeline: dataset must carry h_sf");
    std::vector<std::vector<double>> targets(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) targets[i] = to_real_view(ds.samples[i].h_da);

    nn::TrainLog log;
    nn::OptimizerState opt;
    opt.lr = cfg.lr;
    Rng order_rng(derive_seed(seed, {0xCE0}));
    Rng noise_rng(derive_seed(seed, {0xCE1}));
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        auto order = nn::epoch_order(ds.size(), order_rng);
        double acc = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch) {
            const std::size_t take = std::min<std::size_t>(cfg.batch, order.size() - off);
            std::vector<std::vector<double>> in_rows(take);
            std::vector<const std::vector<double>*> in_ptrs(take), tgt_ptrs(take);
            for (std::size_t k = 0; k < take; ++k) {
                const std::size_t idx = order[off + k];
                in_rows[k] = pipeline_input_view(cfg.mode, ds.samples[idx], ds.spec, cfg.pilots,
                                                 derive_seed(seed, {0xCE2, static_cast<std::uint64_t>(ep), idx}));
                in_ptrs[k] = &in_rows[k];
                tgt_ptrs[k] = &targets[idx];
            }
            auto x = nn::stack_views(in_ptrs, {2, m.arch.in_h(), m.arch.in_w()});
            auto t = nn::stack_views(tgt_ptrs, {2, m.arch.height, m.arch.width});
            m.enc.zero_grad();
            m.dec.zero_grad();
            auto rx = awgn_tensor(djscc_encode(m, x), cfg.uplink_snr_db, noise_rng);
            auto loss = nn::mse(djscc_decode(m, rx), t);
            ad::backward(loss);
            nn::adam_step(m.enc, opt);
            nn::adam_step(m.dec, opt);
            acc += loss.scalar();
            batches += 1;
        }
        log.epoch_loss.push_back(acc / static_cast<double>(batches));
    }
    return log;
}

// End-to-end NMSE of a trained pipeline against the true truncated CSI.
inline double eval_ce_pipeline(const DjsccModel& m, const Dataset& ds, const CePipelineConfig& cfg,
                               std::uint64_t seed) {
    config_require(!ds.samples.empty(), "eval_ce_pipeline: empty dataset");
    config_require(ds.has_sf, "eval_ce_pipeline: dataset must carry h_sf");
    ad::NoGrad ng;
    std::vector<std::vector<double>> refs(ds.size()), recs(ds.size());
    Rng noise_rng(derive_seed(seed, {0xCE4}));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        refs[i] = to_real_view(ds.samples[i].h_da);
        auto in = pipeline_input_view(cfg.mode, ds.samples[i], ds.spec, cfg.pilots,
                                      derive_seed(seed, {0xCE3, i}));
        auto x = nn::stack_views({&in}, {2, m.arch.in_h(), m.arch.in_w()});
        auto rx = awgn_tensor(djscc_encode(m, x), cfg.uplink_snr_db, noise_rng);
        recs[i] = djscc_decode(m, rx).value();
    }
    return nmse_db_real(refs, recs).db;
}

}  // namespace csifb
