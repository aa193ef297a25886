#pragma once

// Joint feedback and precoding: eigen preprocessing at the UE, learned
// direction/power modules at the BS (the JMP module), the classical
// BD + water-filling baseline, and the differentiable sum-SE objective that
// couples the feedback chain to the precoder during joint training.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "csifb/djscc.hpp"
#include "csifb/nn.hpp"

namespace csifb {

struct MultiuserScene {
    int k_users = 2;
    int n_tx = 8;
    int n_rx = 2;
    std::vector<CMat> h;        // per-user n_rx x n_tx
    double total_power = 1.0;   // P
    double noise_power = 0.1;   // sigma^2 per receive antenna

    void validate() const {
        config_require(k_users >= 1 && n_tx >= 1 && n_rx >= 1, "MultiuserScene: bad dims");
        config_require(static_cast<int>(h.size()) == k_users, "MultiuserScene: channel count mismatch");
        config_require(total_power > 0 && noise_power > 0, "MultiuserScene: P and sigma^2 must be positive");
        for (const auto& hk : h)
            shape_require(hk.rows() == n_rx && hk.cols() == n_tx, "MultiuserScene: channel shape mismatch");
    }
};

struct SceneSpec {
    int k_users = 2;
    int n_tx = 8;
    int n_rx = 2;
    int n_paths = 6;
    double angle_spread = 0.1;
    double total_power = 1.0;
    double noise_power = 0.1;
};

// Clustered narrowband channels: few paths with tx/rx steering, so the top
// eigen direction carries most of the user's channel.
inline MultiuserScene make_scene(const SceneSpec& spec, Rng& rng) {
    MultiuserScene sc;
    sc.k_users = spec.k_users;
    sc.n_tx = spec.n_tx;
    sc.n_rx = spec.n_rx;
    sc.total_power = spec.total_power;
    sc.noise_power = spec.noise_power;
    sc.h.resize(spec.k_users);
    for (int k = 0; k < spec.k_users; ++k) {
        CMat h = CMat::Zero(spec.n_rx, spec.n_tx);
        for (int p = 0; p < spec.n_paths; ++p) {
            const double theta_t = rng.uniform(-std::numbers::pi / 3, std::numbers::pi / 3) +
                                   rng.laplacian(spec.angle_spread);
            const double theta_r = rng.uniform(-std::numbers::pi, std::numbers::pi);
            const cplx g = rng.cgauss() / std::sqrt(static_cast<double>(spec.n_paths));
            Eigen::VectorXcd at(spec.n_tx), ar(spec.n_rx);
            for (int m = 0; m < spec.n_tx; ++m) {
                const double a = 2.0 * std::numbers::pi * 0.5 * m * std::sin(theta_t);
                at(m) = cplx(std::cos(a), std::sin(a));
            }
            for (int m = 0; m < spec.n_rx; ++m) {
                const double a = 2.0 * std::numbers::pi * 0.5 * m * std::sin(theta_r);
                ar(m) = cplx(std::cos(a), std::sin(a));
            }
            h.noalias() += g * (ar * at.adjoint());
        }
        sc.h[k] = std::move(h);
    }
    return sc;
}

inline std::vector<MultiuserScene> make_scene_dataset(const SceneSpec& spec, std::size_t count,
                                                      std::uint64_t seed, Split split) {
    std::vector<MultiuserScene> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, {0x5CE7E, static_cast<std::uint64_t>(split), i}));
        out[i] = make_scene(spec, rng);
    }
    return out;
}

// ---- eigen preprocessing ------------------------------------------------------

struct EigenReport {
    Eigen::VectorXd eigvals;  // descending, length n_tx
    CMat eigvecs;             // n_tx x L, unit columns, phase-fixed
};

// Hermitian eigendecomposition of H^H H with a deterministic phase
// convention: the first non-negligible component of each kept eigenvector is
// made real-positive.
inline EigenReport eigen_preprocess(const CMat& h, int top_l = 1) {
    shape_require(h.allFinite(), "eigen_preprocess: non-finite input");
    const int n = static_cast<int>(h.cols());
    config_require(top_l >= 1 && top_l <= n, "eigen_preprocess: bad L");
    const CMat gram = h.adjoint() * h;
    Eigen::SelfAdjointEigenSolver<CMat> es(gram);
    if (es.info() != Eigen::Success) throw ComputeError("eigen_preprocess: eigensolver failed");

    EigenReport rep;
    rep.eigvals.resize(n);
    rep.eigvecs.resize(n, top_l);
    for (int i = 0; i < n; ++i) rep.eigvals(i) = std::max(es.eigenvalues()(n - 1 - i), 0.0);
    const double tol = 1e-12 * (1.0 + rep.eigvals(0));
    for (int i = 0; i < top_l; ++i) {
        Eigen::VectorXcd v = es.eigenvectors().col(n - 1 - i);
        for (int r = 0; r < n; ++r)
            if (std::abs(v(r)) > tol) {
                v *= std::conj(v(r)) / std::abs(v(r));
                break;
            }
        rep.eigvecs.col(i) = v;
    }
    return rep;
}

// ---- water-filling ---------------------------------------------------------------

// p_i = max(0, mu - sigma^2/gain_i) with sum p = P, mu found by bisection.
inline std::vector<double> waterfill(const std::vector<double>& gains, double total_power,
                                     double noise_power) {
    config_require(total_power > 0 && noise_power > 0, "waterfill: P and sigma^2 must be positive");
    config_require(!gains.empty(), "waterfill: no gains");
    double floor_min = std::numeric_limits<double>::infinity();
    for (double g : gains) {
        config_require(g > 0, "waterfill: gains must be positive");
        floor_min = std::min(floor_min, noise_power / g);
    }
    auto power_at = [&](double mu) {
        double s = 0.0;
        for (double g : gains) s += std::max(0.0, mu - noise_power / g);
        return s;
    };
    double lo = floor_min, hi = floor_min + total_power;
    while (power_at(hi) < total_power) hi += total_power;
    for (int it = 0; it < 200 && hi - lo > 0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (power_at(mid) < total_power)
            lo = mid;
        else
            hi = mid;
        if (std::abs(power_at(mid) - total_power) <= 1e-13 * std::max(1.0, total_power)) break;
    }
    const double mu = 0.5 * (lo + hi);
    std::vector<double> p(gains.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < gains.size(); ++i) {
        p[i] = std::max(0.0, mu - noise_power / gains[i]);
        sum += p[i];
    }
    // rescale the active set so the budget binds exactly
    if (sum > 0)
        for (auto& v : p) v *= total_power / sum;
    return p;
}

// ---- precoding solutions and the SE metric ------------------------------------------

struct PrecodingSolution {
    // per user: n_tx x n_streams, column norms squared are the allocated powers
    std::vector<CMat> w;
    double sum_se = 0.0;
};

enum class ReceiveModel {
    top_eigen,  // scalar effective channel g_k = u1^H H_k (single stream per user)
    mmse        // per-stream MMSE combining at each user's antennas
};

inline Eigen::RowVectorXcd effective_row_channel(const CMat& h) {
    // u1^H H for the top left singular vector u1 of H
    Eigen::JacobiSVD<CMat> svd(h, Eigen::ComputeThinU);
    return svd.matrixU().col(0).adjoint() * h;
}

// Sum spectral efficiency under the chosen receive model. Streams of other
// users (and the user's own other streams under mmse) count as interference.
inline double sum_se(const MultiuserScene& scene, const std::vector<CMat>& w, ReceiveModel model) {
    scene.validate();
    shape_require(static_cast<int>(w.size()) == scene.k_users, "sum_se: precoder count mismatch");
    double se = 0.0;
    if (model == ReceiveModel::top_eigen) {
        std::vector<Eigen::RowVectorXcd> g(static_cast<std::size_t>(scene.k_users));
        for (int k = 0; k < scene.k_users; ++k) {
            shape_require(w[static_cast<std::size_t>(k)].cols() == 1, "sum_se: top_eigen model expects single streams");
            g[static_cast<std::size_t>(k)] = effective_row_channel(scene.h[static_cast<std::size_t>(k)]);
        }
        for (int k = 0; k < scene.k_users; ++k) {
            const auto& gk = g[static_cast<std::size_t>(k)];
            double sig = 0.0, interf = 0.0;
            for (int j = 0; j < scene.k_users; ++j) {
                const double p = std::norm((gk * w[static_cast<std::size_t>(j)].col(0))(0));
                if (j == k)
                    sig = p;
                else
                    interf += p;
            }
            se += std::log2(1.0 + sig / (scene.noise_power + interf));
        }
        return se;
    }
    // mmse: per-stream SINR with optimal linear combining
    for (int k = 0; k < scene.k_users; ++k) {
        const CMat& hk = scene.h[static_cast<std::size_t>(k)];
        std::vector<Eigen::VectorXcd> rx;  // received stream vectors at user k
        std::vector<int> owner;
        for (int j = 0; j < scene.k_users; ++j)
            for (int c = 0; c < w[static_cast<std::size_t>(j)].cols(); ++c) {
                rx.push_back(hk * w[static_cast<std::size_t>(j)].col(c));
                owner.push_back(j);
            }
        for (std::size_t s = 0; s < rx.size(); ++s) {
            if (owner[s] != k) continue;
            CMat r = scene.noise_power * CMat::Identity(scene.n_rx, scene.n_rx);
            for (std::size_t t = 0; t < rx.size(); ++t)
                if (t != s) r.noalias() += rx[t] * rx[t].adjoint();
            const double sinr = (rx[s].adjoint() * r.ldlt().solve(rx[s]))(0).real();
            se += std::log2(1.0 + sinr);
        }
    }
    return se;
}

// ---- block diagonalization ---------------------------------------------------------

// For each user: orthonormal null-space basis of the stacked other-user
// channels (via SVD), per-user effective SVD, joint water-filling across all
// effective eigenvalues, interference-free sum SE.
inline PrecodingSolution bd_precode(const MultiuserScene& scene) {
    scene.validate();
    const int k_users = scene.k_users;
    int other_rows = 0;
    for (int j = 1; j < k_users; ++j) other_rows += static_cast<int>(scene.h[static_cast<std::size_t>(j)].rows());
    config_require(scene.n_tx > other_rows,
                   "bd_precode: infeasible dims, need n_tx > sum of other users' antennas (" +
                       std::to_string(scene.n_tx) + " <= " + std::to_string(other_rows) + ")");

    struct Candidate {
        int user;
        Eigen::VectorXcd dir;  // unit-norm precoding direction
        double gain;           // effective eigenvalue
    };
    std::vector<Candidate> cands;

    for (int k = 0; k < k_users; ++k) {
        Eigen::VectorXcd dir;
        CMat basis;
        if (k_users == 1) {
            basis = CMat::Identity(scene.n_tx, scene.n_tx);
        } else {
            CMat stacked(other_rows, scene.n_tx);
            int r = 0;
            for (int j = 0; j < k_users; ++j) {
                if (j == k) continue;
                stacked.middleRows(r, scene.h[static_cast<std::size_t>(j)].rows()) = scene.h[static_cast<std::size_t>(j)];
                r += static_cast<int>(scene.h[static_cast<std::size_t>(j)].rows());
            }
            Eigen::JacobiSVD<CMat> svd(stacked, Eigen::ComputeFullV);
            const double smax = svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
            int rank = 0;
            for (int i = 0; i < svd.singularValues().size(); ++i)
                if (svd.singularValues()(i) > 1e-12 * std::max(1.0, smax)) rank += 1;
            basis = svd.matrixV().rightCols(scene.n_tx - rank);
        }
        const CMat heff = scene.h[static_cast<std::size_t>(k)] * basis;
        Eigen::JacobiSVD<CMat> esvd(heff, Eigen::ComputeThinV);
        const int streams = std::min<int>(static_cast<int>(esvd.singularValues().size()), scene.n_rx);
        for (int s = 0; s < streams; ++s) {
            const double sv = esvd.singularValues()(s);
            if (sv <= 1e-12) continue;
            cands.push_back({k, basis * esvd.matrixV().col(s), sv * sv});
        }
    }
    config_require(!cands.empty(), "bd_precode: no usable streams");

    std::vector<double> gains(cands.size());
    for (std::size_t i = 0; i < cands.size(); ++i) gains[i] = cands[i].gain;
    const auto powers = waterfill(gains, scene.total_power, scene.noise_power);

    PrecodingSolution sol;
    sol.w.resize(static_cast<std::size_t>(k_users));
    std::vector<std::vector<Eigen::VectorXcd>> cols(static_cast<std::size_t>(k_users));
    for (std::size_t i = 0; i < cands.size(); ++i)
        if (powers[i] > 0)
            cols[static_cast<std::size_t>(cands[i].user)].push_back(std::sqrt(powers[i]) * cands[i].dir);
    for (int k = 0; k < k_users; ++k) {
        auto& ck = cols[static_cast<std::size_t>(k)];
        sol.w[static_cast<std::size_t>(k)].resize(scene.n_tx, ck.empty() ? 1 : static_cast<Eigen::Index>(ck.size()));
        if (ck.empty())
            sol.w[static_cast<std::size_t>(k)].setZero();
        else
            for (std::size_t c = 0; c < ck.size(); ++c) sol.w[static_cast<std::size_t>(k)].col(static_cast<Eigen::Index>(c)) = ck[c];
    }
    for (std::size_t i = 0; i < cands.size(); ++i)
        if (powers[i] > 0) sol.sum_se += std::log2(1.0 + powers[i] * cands[i].gain / scene.noise_power);
    return sol;
}

// ---- learned JMP modules --------------------------------------------------------------

struct JmpConfig {
    int k_users = 2;
    int n_tx = 8;
    int hidden = 256;
    int power_hidden = 16;
};

inline nn::ParameterSet make_jmp_params(const JmpConfig& cfg, Rng& rng) {
    nn::ParameterSet ps;
    const int in = cfg.k_users * 2 * cfg.n_tx;
    nn::make_dense(ps, "dir.fc1", in, cfg.hidden, rng);
    nn::make_dense(ps, "dir.fc2", cfg.hidden, cfg.hidden, rng);
    nn::make_dense(ps, "dir.fc3", cfg.hidden, in, rng);
    nn::make_dense(ps, "pow.fc1", cfg.k_users + 1, cfg.power_hidden, rng);
    nn::make_dense(ps, "pow.fc2", cfg.power_hidden, cfg.k_users, rng);
    ps.metadata["role"] = "jmp";
    ps.metadata["k_users"] = cfg.k_users;
    ps.metadata["n_tx"] = cfg.n_tx;
    return ps;
}

// Three dense layers with per-user unit-norm output directions.
inline ad::Tensor direction_module(const nn::ParameterSet& ps, const ad::Tensor& vhat, int n_tx) {
    auto h = ad::leaky_relu(nn::dense(ps, "dir.fc1", vhat));
    h = ad::leaky_relu(nn::dense(ps, "dir.fc2", h));
    h = nn::dense(ps, "dir.fc3", h);
    return ad::l2_normalize_groups(h, 2 * n_tx);
}

// Two dense layers, softmax scaled by P; always positive, sums to P exactly.
inline ad::Tensor power_module(const nn::ParameterSet& ps, const ad::Tensor& feats, double total_power) {
    auto h = ad::leaky_relu(nn::dense(ps, "pow.fc1", feats));
    return ad::mul_scalar(ad::softmax_rows(nn::dense(ps, "pow.fc2", h)), total_power);
}

// ---- batched scene views ---------------------------------------------------------------

// Everything the differentiable sum-SE path needs from a batch of scenes:
// true eigen directions (feedback source), effective channels (constants in
// the loss), eigenvalue features for the power module.
struct SceneBatch {
    int k_users = 0;
    int n_tx = 0;
    double total_power = 1.0;
    double noise_power = 0.1;
    std::vector<std::vector<double>> v_views;  // per user: (N, 2*n_tx) rows
    std::vector<std::vector<double>> g_re;     // per user: (N, n_tx)
    std::vector<std::vector<double>> g_im;
    std::vector<double> pow_feats;             // (N, k_users+1)
    int count = 0;
};

inline SceneBatch make_scene_batch(const std::vector<const MultiuserScene*>& scenes) {
    shape_require(!scenes.empty(), "make_scene_batch: empty batch");
    SceneBatch b;
    const auto& first = *scenes[0];
    b.k_users = first.k_users;
    b.n_tx = first.n_tx;
    b.total_power = first.total_power;
    b.noise_power = first.noise_power;
    b.count = static_cast<int>(scenes.size());
    b.v_views.assign(static_cast<std::size_t>(b.k_users), {});
    b.g_re.assign(static_cast<std::size_t>(b.k_users), {});
    b.g_im.assign(static_cast<std::size_t>(b.k_users), {});
    for (const auto* sp : scenes) {
        const auto& sc = *sp;
        sc.validate();
        shape_require(sc.k_users == b.k_users && sc.n_tx == b.n_tx, "make_scene_batch: mixed scene dims");
        for (int k = 0; k < b.k_users; ++k) {
            auto rep = eigen_preprocess(sc.h[static_cast<std::size_t>(k)], 1);
            for (int m = 0; m < b.n_tx; ++m) b.v_views[static_cast<std::size_t>(k)].push_back(rep.eigvecs(m, 0).real());
            for (int m = 0; m < b.n_tx; ++m) b.v_views[static_cast<std::size_t>(k)].push_back(rep.eigvecs(m, 0).imag());
            auto g = effective_row_channel(sc.h[static_cast<std::size_t>(k)]);
            for (int m = 0; m < b.n_tx; ++m) b.g_re[static_cast<std::size_t>(k)].push_back(g(m).real());
            for (int m = 0; m < b.n_tx; ++m) b.g_im[static_cast<std::size_t>(k)].push_back(g(m).imag());
            b.pow_feats.push_back(rep.eigvals(0) / static_cast<double>(b.n_tx));
        }
        b.pow_feats.push_back(sc.noise_power);
    }
    return b;
}

// Differentiable mean sum-SE of w_k = sqrt(p_k) * d_k under the top-eigen
// receive model. directions: (N, K*2*n_tx) unit per user; powers: (N, K).
inline ad::Tensor sum_se_graph(const SceneBatch& b, const ad::Tensor& directions,
                               const ad::Tensor& powers) {
    const int n = directions.shape()[0];
    shape_require(n == b.count, "sum_se_graph: batch size mismatch");
    const int ntx = b.n_tx;
    std::vector<ad::Tensor> wre(static_cast<std::size_t>(b.k_users)), wim(static_cast<std::size_t>(b.k_users));
    for (int k = 0; k < b.k_users; ++k) {
        auto dk = ad::slice_cols(directions, k * 2 * ntx, 2 * ntx);
        auto pk = ad::sqrt(ad::slice_cols(powers, k, 1));
        auto wk = ad::scale_rows(dk, pk);
        wre[static_cast<std::size_t>(k)] = ad::slice_cols(wk, 0, ntx);
        wim[static_cast<std::size_t>(k)] = ad::slice_cols(wk, ntx, ntx);
    }
    std::vector<ad::Tensor> gre(static_cast<std::size_t>(b.k_users)), gim(static_cast<std::size_t>(b.k_users));
    for (int k = 0; k < b.k_users; ++k) {
        gre[static_cast<std::size_t>(k)] = ad::Tensor::leaf({n, ntx}, b.g_re[static_cast<std::size_t>(k)]);
        gim[static_cast<std::size_t>(k)] = ad::Tensor::leaf({n, ntx}, b.g_im[static_cast<std::size_t>(k)]);
    }

    ad::Tensor se_total;
    for (int k = 0; k < b.k_users; ++k) {
        ad::Tensor sig, interf;
        for (int j = 0; j < b.k_users; ++j) {
            auto [re, im] = ad::complex_mul(gre[static_cast<std::size_t>(k)], gim[static_cast<std::size_t>(k)],
                                            wre[static_cast<std::size_t>(j)], wim[static_cast<std::size_t>(j)]);
            auto re_s = ad::reduce_sum_rows(re);
            auto im_s = ad::reduce_sum_rows(im);
            auto mag = ad::add(ad::mul(re_s, re_s), ad::mul(im_s, im_s));
            if (j == k)
                sig = mag;
            else
                interf = interf.defined() ? ad::add(interf, mag) : mag;
        }
        auto denom = interf.defined() ? ad::add_scalar(interf, b.noise_power)
                                      : ad::Tensor::full({n, 1}, b.noise_power);
        auto sinr = ad::div(sig, denom);
        auto se_k = ad::mul_scalar(ad::log(ad::add_scalar(sinr, 1.0)), 1.0 / std::numbers::ln2);
        se_total = se_total.defined() ? ad::add(se_total, se_k) : se_k;
    }
    return ad::reduce_mean(se_total);  // mean over the batch of per-scene sums
}

// ---- feedback of eigenvectors through the DJSCC link -------------------------------

// Per-user encode -> awgn -> decode with shared encoder/decoder parameters;
// returns (N, 2*n_tx) reconstructions. stream_tag keeps the noise draws of
// distinct users and grid points apart.
inline std::vector<ad::Tensor> feedback_eigvecs(const DjsccModel& fb, const SceneBatch& b,
                                                double snr_db, std::uint64_t noise_seed,
                                                std::uint64_t stream_tag) {
    std::vector<ad::Tensor> vhat(static_cast<std::size_t>(b.k_users));
    for (int k = 0; k < b.k_users; ++k) {
        auto x = ad::Tensor::leaf({b.count, 2, b.n_tx, 1}, b.v_views[static_cast<std::size_t>(k)]);
        auto sym = djscc_encode(fb, x, snr_db);
        auto rx = awgn_tensor_per_row(sym, snr_db, noise_seed,
                                      stream_tag * 64 + static_cast<std::uint64_t>(k));
        vhat[static_cast<std::size_t>(k)] = ad::reshape(djscc_decode(fb, rx, snr_db), {b.count, 2 * b.n_tx});
    }
    return vhat;
}

struct JfpTrainConfig {
    int epochs = 30;
    int batch = 32;
    double lr = 1e-3;
};

// MSE training of the eigenvector feedback link alone (the DJSCC_w_JMP
// feedback stage).
inline nn::TrainLog train_eig_feedback(DjsccModel& fb, const std::vector<MultiuserScene>& scenes,
                                       const SnrSpec& snr_spec, const JfpTrainConfig& cfg,
                                       std::uint64_t seed) {
    config_require(!scenes.empty(), "train_eig_feedback: empty dataset");
    nn::TrainLog log;
    nn::OptimizerState opt;
    opt.lr = cfg.lr;
    Rng order_rng(derive_seed(seed, {0xF1}));
    Rng snr_rng(derive_seed(seed, {0xF2}));
    Rng noise_rng(derive_seed(seed, {0xF3}));
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        auto order = nn::epoch_order(scenes.size(), order_rng);
        double acc = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch) {
            const std::size_t take = std::min<std::size_t>(cfg.batch, order.size() - off);
            std::vector<const MultiuserScene*> chunk(take);
            for (std::size_t k = 0; k < take; ++k) chunk[k] = &scenes[order[off + k]];
            auto b = make_scene_batch(chunk);
            const double snr = snr_spec.draw(snr_rng);
            fb.enc.zero_grad();
            fb.dec.zero_grad();
            ad::Tensor loss;
            for (int k = 0; k < b.k_users; ++k) {
                auto x = ad::Tensor::leaf({b.count, 2, b.n_tx, 1}, b.v_views[static_cast<std::size_t>(k)]);
                auto rx = awgn_tensor(djscc_encode(fb, x, snr), snr, noise_rng);
                auto vk = ad::reshape(djscc_decode(fb, rx, snr), {b.count, 2 * b.n_tx});
                auto l = nn::mse(vk, ad::Tensor::leaf({b.count, 2 * b.n_tx}, b.v_views[static_cast<std::size_t>(k)]));
                loss = loss.defined() ? ad::add(loss, l) : l;
            }
            loss = ad::mul_scalar(loss, 1.0 / b.k_users);
            ad::backward(loss);
            nn::adam_step(fb.enc, opt);
            nn::adam_step(fb.dec, opt);
            acc += loss.scalar();
            batches += 1;
        }
        log.epoch_loss.push_back(acc / static_cast<double>(batches));
    }
    return log;
}

// Builds the direction/power outputs for a batch from reconstructed (or
// perfect) eigenvectors, returning the scalar mean sum-SE tensor.
inline ad::Tensor jmp_se_objective(const nn::ParameterSet& jmp, const SceneBatch& b,
                                   const std::vector<ad::Tensor>& vhat) {
    auto cat = ad::concat_cols(vhat);
    auto dirs = direction_module(jmp, cat, b.n_tx);
    auto feats = ad::Tensor::leaf({b.count, b.k_users + 1}, b.pow_feats);
    auto powers = power_module(jmp, feats, b.total_power);
    return sum_se_graph(b, dirs, powers);
}

// Trains the JMP module on perfect CSI with the SE objective (the separate-
// training baseline).
inline nn::TrainLog train_jmp_perfect(nn::ParameterSet& jmp, const std::vector<MultiuserScene>& scenes,
                                      const JfpTrainConfig& cfg, std::uint64_t seed) {
    config_require(!scenes.empty(), "train_jmp_perfect: empty dataset");
    nn::TrainLog log;
    nn::OptimizerState opt;
    opt.lr = cfg.lr;
    Rng order_rng(derive_seed(seed, {0xF4}));
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        auto order = nn::epoch_order(scenes.size(), order_rng);
        double acc = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch) {
            const std::size_t take = std::min<std::size_t>(cfg.batch, order.size() - off);
            std::vector<const MultiuserScene*> chunk(take);
            for (std::size_t k = 0; k < take; ++k) chunk[k] = &scenes[order[off + k]];
            auto b = make_scene_batch(chunk);
            std::vector<ad::Tensor> v(static_cast<std::size_t>(b.k_users));
            for (int k = 0; k < b.k_users; ++k)
                v[static_cast<std::size_t>(k)] = ad::Tensor::leaf({b.count, 2 * b.n_tx}, b.v_views[static_cast<std::size_t>(k)]);
            jmp.zero_grad();
            auto loss = ad::mul_scalar(jmp_se_objective(jmp, b, v), -1.0);
            ad::backward(loss);
            nn::adam_step(jmp, opt);
            acc += -loss.scalar();
            batches += 1;
        }
        log.epoch_loss.push_back(acc / static_cast<double>(batches));  // mean sum-SE, higher is better
    }
    return log;
}

// Joint training: feedback encoder/decoder and both JMP modules updated
// together against the sum-SE objective, eigenvalues passing through
// losslessly as auxiliary information.
inline nn::TrainLog train_jfpnet(DjsccModel& fb, nn::ParameterSet& jmp,
                                 const std::vector<MultiuserScene>& scenes, const SnrSpec& snr_spec,
                                 const JfpTrainConfig& cfg, std::uint64_t seed) {
    config_require(!scenes.empty(), "train_jfpnet: empty dataset");
    nn::TrainLog log;
    nn::OptimizerState opt;
    opt.lr = cfg.lr;
    Rng order_rng(derive_seed(seed, {0xF5}));
    Rng snr_rng(derive_seed(seed, {0xF6}));
    Rng noise_rng(derive_seed(seed, {0xF7}));
    std::uint64_t step = 0;
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        auto order = nn::epoch_order(scenes.size(), order_rng);
        double acc = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch) {
            const std::size_t take = std::min<std::size_t>(cfg.batch, order.size() - off);
            std::vector<const MultiuserScene*> chunk(take);
            for (std::size_t k = 0; k < take; ++k) chunk[k] = &scenes[order[off + k]];
            auto b = make_scene_batch(chunk);
            const double snr = snr_spec.draw(snr_rng);
            fb.enc.zero_grad();
            fb.dec.zero_grad();
            jmp.zero_grad();
            auto vhat = feedback_eigvecs(fb, b, snr, noise_rng.next_u64(), step++);
            auto loss = ad::mul_scalar(jmp_se_objective(jmp, b, vhat), -1.0);
            ad::backward(loss);
            nn::adam_step(fb.enc, opt);
            nn::adam_step(fb.dec, opt);
            nn::adam_step(jmp, opt);
            acc += -loss.scalar();
            batches += 1;
        }
        log.epoch_loss.push_back(acc / static_cast<double>(batches));
    }
    return log;
}

// ---- figure-5 style evaluation -----------------------------------------------------------

enum class PrecodeMethod { jfpnet, djscc_w_jmp, djscc_bd_wf, pf_bd_wf };

inline const char* to_string(PrecodeMethod m) {
    switch (m) {
        case PrecodeMethod::jfpnet: return "JFPNet";
        case PrecodeMethod::djscc_w_jmp: return "DJSCC_w_JMP";
        case PrecodeMethod::djscc_bd_wf: return "DJSCC_BD_WF";
        case PrecodeMethod::pf_bd_wf: return "PF_BD_WF";
    }
    return "?";
}

struct SePoint {
    double snr_db = 0.0;
    double sum_se = 0.0;  // mean over scenes, bits/s/Hz
};

namespace detail {

// Rank-1 surrogate scene from (possibly reconstructed) eigen directions and
// the lossless eigenvalues; BD+WF then runs on exactly what was fed back.
inline MultiuserScene surrogate_scene(const MultiuserScene& truth,
                                      const std::vector<Eigen::VectorXcd>& vhat) {
    MultiuserScene s;
    s.k_users = truth.k_users;
    s.n_tx = truth.n_tx;
    s.n_rx = 1;
    s.total_power = truth.total_power;
    s.noise_power = truth.noise_power;
    s.h.resize(static_cast<std::size_t>(truth.k_users));
    for (int k = 0; k < truth.k_users; ++k) {
        const double l1 = eigen_preprocess(truth.h[static_cast<std::size_t>(k)], 1).eigvals(0);
        s.h[static_cast<std::size_t>(k)] = std::sqrt(l1) * vhat[static_cast<std::size_t>(k)].adjoint();
    }
    return s;
}

}  // namespace detail

// Mean sum-SE versus uplink SNR for one method. All methods share the same
// per-(grid point, scene, user) feedback noise streams under one seed.
inline std::vector<SePoint> eval_precoding_method(PrecodeMethod method,
                                                  const std::vector<MultiuserScene>& scenes,
                                                  const std::vector<double>& snr_grid,
                                                  const DjsccModel* fb, const nn::ParameterSet* jmp,
                                                  std::uint64_t seed) {
    config_require(!scenes.empty(), "eval_precoding_method: empty dataset");
    const bool needs_fb = method != PrecodeMethod::pf_bd_wf;
    config_require(!needs_fb || fb != nullptr, "eval_precoding_method: missing feedback checkpoint");
    const bool needs_jmp = method == PrecodeMethod::jfpnet || method == PrecodeMethod::djscc_w_jmp;
    config_require(!needs_jmp || jmp != nullptr, "eval_precoding_method: missing JMP checkpoint");

    ad::NoGrad ng;
    std::vector<const MultiuserScene*> all(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) all[i] = &scenes[i];
    auto b = make_scene_batch(all);

    std::vector<SePoint> out;
    for (std::size_t gi = 0; gi < snr_grid.size(); ++gi) {
        const double snr = snr_grid[gi];
        std::vector<ad::Tensor> vhat;
        if (needs_fb) {
            vhat = feedback_eigvecs(*fb, b, snr, derive_seed(seed, {0xE5, gi}), gi);
        } else {
            vhat.resize(static_cast<std::size_t>(b.k_users));
            for (int k = 0; k < b.k_users; ++k)
                vhat[static_cast<std::size_t>(k)] = ad::Tensor::leaf({b.count, 2 * b.n_tx}, b.v_views[static_cast<std::size_t>(k)]);
        }

        double acc = 0.0;
        if (needs_jmp) {
            auto dirs = direction_module(*jmp, ad::concat_cols(vhat), b.n_tx);
            auto feats = ad::Tensor::leaf({b.count, b.k_users + 1}, b.pow_feats);
            auto powers = power_module(*jmp, feats, b.total_power);
            for (std::size_t i = 0; i < scenes.size(); ++i) {
                std::vector<CMat> w(static_cast<std::size_t>(b.k_users));
                for (int k = 0; k < b.k_users; ++k) {
                    const double p = powers.value()[i * static_cast<std::size_t>(b.k_users) + static_cast<std::size_t>(k)];
                    const double* d = dirs.value().data() + (i * static_cast<std::size_t>(b.k_users) + static_cast<std::size_t>(k)) * 2 * b.n_tx;
                    CMat col(b.n_tx, 1);
                    for (int m = 0; m < b.n_tx; ++m) col(m, 0) = std::sqrt(p) * cplx(d[m], d[b.n_tx + m]);
                    w[static_cast<std::size_t>(k)] = col;
                }
                acc += sum_se(scenes[i], w, ReceiveModel::top_eigen);
            }
        } else {
            for (std::size_t i = 0; i < scenes.size(); ++i) {
                std::vector<Eigen::VectorXcd> vs(static_cast<std::size_t>(b.k_users));
                for (int k = 0; k < b.k_users; ++k) {
                    Eigen::VectorXcd v(b.n_tx);
                    const double* p = vhat[static_cast<std::size_t>(k)].value().data() + i * 2 * static_cast<std::size_t>(b.n_tx);
                    for (int m = 0; m < b.n_tx; ++m) v(m) = cplx(p[m], p[b.n_tx + m]);
                    const double nrm = v.norm();
                    if (nrm > 1e-12) v /= nrm;
                    vs[static_cast<std::size_t>(k)] = v;
                }
                auto sur = detail::surrogate_scene(scenes[i], vs);
                auto sol = bd_precode(sur);
                acc += sum_se(scenes[i], sol.w, ReceiveModel::top_eigen);
            }
        }
        out.push_back({snr, acc / static_cast<double>(scenes.size())});
    }
    return out;
}

}  // namespace csifb
