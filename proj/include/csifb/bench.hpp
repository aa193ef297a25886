#pragma once

// Experiment orchestration: config parsing, CSV emission, the figure-suite
// check logic, and the fast no-training oracle/gradient suites. The CLI
// `check` subcommand and the acceptance test binary share everything here.

#include <bit>
#include <cerrno>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <fcntl.h>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

#include "csifb/experiments.hpp"

namespace csifb::bench {

// ---- CSV -----------------------------------------------------------------------

inline std::string records_to_csv(const std::vector<ResultRecord>& records, bool with_wall = true) {
    std::ostringstream os;
    os << "experiment,method,axis,metric,value,seed,version";
    if (with_wall) os << ",wall_ms";
    os << "\n";
    char buf[64];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%.10g", r.value);
        os << r.experiment << "," << r.method << "," << r.axis << "," << r.metric << "," << buf << ","
           << r.seed << "," << r.version;
        if (with_wall) {
            std::snprintf(buf, sizeof buf, "%.3f", r.wall_ms);
            os << "," << buf;
        }
        os << "\n";
    }
    return os.str();
}

inline std::vector<ResultRecord> records_from_csv(const std::string& text) {
    std::vector<ResultRecord> out;
    std::istringstream is(text);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (header || line.empty()) {
            header = false;
            continue;
        }
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        shape_require(f.size() >= 7, "records_from_csv: malformed row: " + line);
        ResultRecord r;
        r.experiment = f[0];
        r.method = f[1];
        r.axis = f[2];
        r.metric = f[3];
        r.value = std::stod(f[4]);
        r.seed = std::stoull(f[5]);
        r.version = f[6];
        if (f.size() > 7) r.wall_ms = std::stod(f[7]);
        out.push_back(std::move(r));
    }
    return out;
}

// Strips the wall-time column; what determinism is judged on.
inline std::string stable_csv(const std::vector<ResultRecord>& records) {
    return records_to_csv(records, /*with_wall=*/false);
}

// ---- run-directory lock ------------------------------------------------------------

// One writer per output path: O_EXCL lockfile, removed on destruction.
class RunLock {
  public:
    explicit RunLock(const std::string& out_path) : path_(out_path + ".lock") {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw ComputeError("run lock busy (" + path_ + "): " + std::strerror(errno));
        ::close(fd);
    }
    ~RunLock() { ::unlink(path_.c_str()); }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    std::string path_;
};

// ---- check lines -------------------------------------------------------------------

struct CheckLine {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct CheckReport {
    std::vector<CheckLine> lines;
    bool all_pass() const {
        for (const auto& l : lines)
            if (!l.pass) return false;
        return true;
    }
    void add(const std::string& name, bool pass, const std::string& detail) {
        lines.push_back({name, pass, detail});
    }
    void merge(const CheckReport& other) {
        lines.insert(lines.end(), other.lines.begin(), other.lines.end());
    }
};

inline void print_report(const CheckReport& rep, std::FILE* out = stdout) {
    for (const auto& l : rep.lines)
        std::fprintf(out, "[%s] %s — %s\n", l.pass ? "PASS" : "FAIL", l.name.c_str(), l.detail.c_str());
}

namespace detail {

inline std::string fmt(const char* f, ...) {
    char buf[256];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof buf, f, args);
    va_end(args);
    return buf;
}

}  // namespace detail

// ---- oracle suite (no training) -----------------------------------------------------

inline CheckReport run_oracle_checks() {
    CheckReport rep;

    {  // water-filling against a 1e-6 mu grid search
        double worst = 0.0;
        for (int t = 0; t < 4; ++t) {
            Rng rng(derive_seed(0xAC1, {static_cast<std::uint64_t>(t)}));
            std::vector<double> gains(4);
            for (auto& g : gains) g = rng.uniform(0.05, 2.0);
            auto p = waterfill(gains, 1.0, 0.1);
            double best_mu = 0, best_err = 1e300;
            const double hi = 0.1 / *std::min_element(gains.begin(), gains.end()) + 2.0;
            for (double mu = 1e-6; mu <= hi; mu += 1e-6) {
                double s = 0;
                for (double g : gains) s += std::max(0.0, mu - 0.1 / g);
                if (std::abs(s - 1.0) < best_err) {
                    best_err = std::abs(s - 1.0);
                    best_mu = mu;
                }
            }
            for (std::size_t i = 0; i < gains.size(); ++i)
                worst = std::max(worst, std::abs(p[i] - std::max(0.0, best_mu - 0.1 / gains[i])));
        }
        rep.add("oracle.waterfill_kkt_vs_grid", worst <= 1e-5, detail::fmt("max |p - p_grid| = %.3g", worst));
    }

    {  // BD leakage and power budget over 100 random scenes
        SceneSpec spec;
        double worst_leak = 0.0, worst_pow = 0.0;
        for (int t = 0; t < 100; ++t) {
            Rng rng(derive_seed(0xAC2, {static_cast<std::uint64_t>(t)}));
            auto sc = make_scene(spec, rng);
            auto sol = bd_precode(sc);
            double total = 0.0;
            for (int k = 0; k < sc.k_users; ++k) {
                total += sol.w[static_cast<std::size_t>(k)].squaredNorm();
                for (int j = 0; j < sc.k_users; ++j)
                    if (j != k)
                        worst_leak = std::max(worst_leak,
                                              (sc.h[static_cast<std::size_t>(j)] * sol.w[static_cast<std::size_t>(k)]).norm());
            }
            worst_pow = std::max(worst_pow, std::abs(total - sc.total_power));
        }
        rep.add("oracle.bd_leakage", worst_leak < 1e-9, detail::fmt("max leakage %.3g", worst_leak));
        rep.add("oracle.bd_power_budget", worst_pow < 1e-9, detail::fmt("max |power-P| %.3g", worst_pow));
    }

    {  // Viterbi equals exhaustive ML for every block of 1..12 info bits
        bool ok = true;
        Rng rng(derive_seed(0xAC3, {}));
        for (int len = 1; len <= 12 && ok; ++len) {
            std::vector<std::uint32_t> codewords(1u << len);
            for (std::uint32_t w = 0; w < codewords.size(); ++w) {
                std::vector<std::uint8_t> info(static_cast<std::size_t>(len));
                for (int b = 0; b < len; ++b) info[static_cast<std::size_t>(b)] = (w >> b) & 1;
                auto c = conv_encode(info);
                std::uint32_t packed = 0;
                for (std::size_t i = 0; i < c.size(); ++i) packed |= static_cast<std::uint32_t>(c[i]) << i;
                codewords[w] = packed;
            }
            const int coded_bits = 2 * (len + 2);
            for (std::uint32_t w = 0; w < codewords.size() && ok; ++w) {
                for (int trial = 0; trial < 2; ++trial) {
                    std::uint32_t rx = codewords[w];
                    if (trial > 0)
                        for (int b = 0; b < coded_bits; ++b)
                            if (rng.uniform() < 0.12) rx ^= 1u << b;
                    std::vector<std::uint8_t> rx_bits(static_cast<std::size_t>(coded_bits));
                    for (int b = 0; b < coded_bits; ++b) rx_bits[static_cast<std::size_t>(b)] = (rx >> b) & 1;
                    auto recoded = conv_encode(viterbi_decode(rx_bits));
                    std::uint32_t vit = 0;
                    for (std::size_t i = 0; i < recoded.size(); ++i) vit |= static_cast<std::uint32_t>(recoded[i]) << i;
                    int best = 64;
                    for (auto cw : codewords) best = std::min(best, std::popcount(cw ^ rx));
                    if (std::popcount(vit ^ rx) != best) ok = false;
                }
            }
        }
        rep.add("oracle.viterbi_equals_ml", ok, "all info blocks of 1..12 bits, clean + noisy");
    }

    {  // conv2d against the nested-loop oracle
        Rng rng(derive_seed(0xAC4, {}));
        const int N = 1, Ci = 2, H = 8, W = 8, Co = 3, K = 3;
        std::vector<double> x(static_cast<std::size_t>(N) * Ci * H * W), w(static_cast<std::size_t>(Co) * Ci * K * K), b(Co);
        for (auto& v : x) v = rng.gauss();
        for (auto& v : w) v = rng.gauss();
        for (auto& v : b) v = rng.gauss();
        auto y = ad::conv2d(ad::Tensor::leaf({N, Ci, H, W}, x), ad::Tensor::leaf({Co, Ci, K, K}, w),
                            ad::Tensor::leaf({Co}, b));
        double worst = 0.0;
        const int p = K / 2;
        for (int co = 0; co < Co; ++co)
            for (int h = 0; h < H; ++h)
                for (int ww = 0; ww < W; ++ww) {
                    double acc = b[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int kh = 0; kh < K; ++kh)
                            for (int kw = 0; kw < K; ++kw) {
                                const int ih = h + kh - p, iw = ww + kw - p;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x[(static_cast<std::size_t>(ci) * H + ih) * W + iw] *
                                       w[((static_cast<std::size_t>(co) * Ci + ci) * K + kh) * K + kw];
                            }
                    worst = std::max(worst, std::abs(acc - y.value()[((static_cast<std::size_t>(co)) * H + h) * W + ww]));
                }
        rep.add("oracle.conv2d_vs_nested_loop", worst < 1e-12, detail::fmt("max abs err %.3g", worst));
    }

    {  // delay-angle unitarity and round trip
        Rng rng(derive_seed(0xAC5, {}));
        CMat h(64, 16);
        for (int r = 0; r < 64; ++r)
            for (int c = 0; c < 16; ++c) h(r, c) = rng.cgauss();
        CMat hd = to_delay_angle(h);
        const double norm_err = std::abs(hd.norm() - h.norm()) / h.norm();
        const double rt_err = (from_delay_angle(hd) - h).norm() / h.norm();
        rep.add("oracle.delay_angle_unitary", norm_err < 1e-12 && rt_err < 1e-12,
                detail::fmt("norm err %.3g, round trip %.3g", norm_err, rt_err));
    }

    {  // LS exact recovery with noiseless unitary pilots
        Rng rng(derive_seed(0xAC6, {}));
        auto spec = make_pilot_spec(8, 8, std::numeric_limits<double>::infinity());
        CMat h(16, 8);
        for (int r = 0; r < 16; ++r)
            for (int c = 0; c < 8; ++c) h(r, c) = rng.cgauss();
        const double err = (ls_estimate(receive_pilots(h, spec, 1), spec) - h).norm() / h.norm();
        rep.add("oracle.ls_exact_at_inf_snr", err < 1e-10, detail::fmt("relative err %.3g", err));
    }

    {  // quantizer idempotence on its own codebook
        bool ok = true;
        for (int bits = 1; bits <= 4; ++bits) {
            QuantizerSpec q{bits, 1.0};
            for (int i = 0; i < q.levels(); ++i) {
                const double mid = -1.0 + (i + 0.5) * q.step();
                auto r = quantize({mid}, q);
                if (dequantize(r.bits, q)[0] != mid) ok = false;
            }
        }
        rep.add("oracle.quantizer_idempotent", ok, "grid midpoints for B=1..4");
    }

    {  // PPP x-step against a direct dense solve at n=64
        const int n = 64;
        ProjectionSpec spec{9, 0.5, n};
        PppOptions opts;
        opts.iterations = 1;
        Rng rng(derive_seed(0xAC7, {}));
        std::vector<double> h(n);
        for (auto& v : h) v = rng.gauss();
        auto meas = compress(h, spec);
        auto x = ppp_reconstruct(meas, Denoiser::identity(), opts);
        auto a = make_projection(spec);
        Eigen::MatrixXd ata = a.transpose() * a;
        ata.diagonal().array() += opts.mu0;
        Eigen::Map<const Eigen::VectorXd> y(meas.y.data(), static_cast<Eigen::Index>(meas.y.size()));
        Eigen::VectorXd ref = ata.ldlt().solve(a.transpose() * y);
        double num = 0, den = 0;
        for (int i = 0; i < n; ++i) {
            num += (x[static_cast<std::size_t>(i)] - ref(i)) * (x[static_cast<std::size_t>(i)] - ref(i));
            den += ref(i) * ref(i);
        }
        const double err = std::sqrt(num / den);
        rep.add("oracle.ppp_xstep_vs_direct_solve", err < 1e-8, detail::fmt("relative err %.3g", err));
    }

    return rep;
}

// ---- gradient suite ------------------------------------------------------------------

inline CheckReport run_grad_checks() {
    CheckReport rep;

    {  // DJSCC encode -> awgn -> decode -> MSE (AF enabled), noise fixed
        Rng rng(derive_seed(0xAD1, {}));
        DjsccArch a;
        a.height = 8;
        a.width = 8;
        a.n_symbols = 8;
        a.channels = 8;
        a.af_enabled = true;
        auto m = make_djscc(a, rng);
        std::vector<double> v(128);
        for (auto& x : v) x = rng.gauss();
        auto x = nn::stack_views({&v}, {2, 8, 8});
        std::vector<double> noise(16);
        for (auto& nz : noise) nz = 0.4 * rng.gauss();
        nn::ParameterSet all;
        for (auto& [k, t] : m.enc.params) all.add(k, t);
        for (auto& [k, t] : m.dec.params) all.add(k, t);
        auto rep_g = nn::grad_check(
            [&]() {
                auto sym = djscc_encode(m, x, 3.0);
                auto rx = ad::add(sym, ad::Tensor::leaf({1, 16}, noise));
                return nn::mse(djscc_decode(m, rx, 3.0), x);
            },
            all, std::vector<double>{1e-5, 1e-6}, 60);
        rep.add("grad.djscc_chain", rep_g.max_rel_err < 1e-4,
                detail::fmt("max rel err %.3g (worst %s)", rep_g.max_rel_err, rep_g.worst_param.c_str()));
    }

    {  // AF module in isolation
        Rng rng(derive_seed(0xAD2, {}));
        nn::ParameterSet ps;
        csifb::detail::make_af(ps, "af", 6, rng);
        std::vector<double> fv(static_cast<std::size_t>(2) * 6 * 16);
        for (auto& v : fv) v = rng.gauss();
        auto feats = ad::Tensor::leaf({2, 6, 4, 4}, fv);
        auto rep_g = nn::grad_check(
            [&]() {
                auto out = af_apply(ps, "af", feats, -7.0);
                return ad::reduce_mean(ad::mul(out, out));
            },
            ps, std::vector<double>{1e-5, 1e-6});
        rep.add("grad.af_module", rep_g.max_rel_err < 1e-4, detail::fmt("max rel err %.3g", rep_g.max_rel_err));
    }

    {  // full JFPNet sum-SE path
        SceneSpec spec;
        spec.n_tx = 4;
        spec.n_paths = 3;
        auto scenes = make_scene_dataset(spec, 3, 0xAD3, Split::train);
        std::vector<const MultiuserScene*> ptrs;
        for (const auto& s : scenes) ptrs.push_back(&s);
        auto b = make_scene_batch(ptrs);
        Rng rng(derive_seed(0xAD4, {}));
        JmpConfig jc;
        jc.n_tx = 4;
        jc.hidden = 16;
        jc.power_hidden = 8;
        auto jmp = make_jmp_params(jc, rng);
        DjsccArch arch;
        arch.height = 4;
        arch.width = 1;
        arch.n_symbols = 6;
        arch.channels = 4;
        arch.down_h = 1;
        arch.down_w = 1;
        arch.af_enabled = true;
        auto fb = make_djscc(arch, rng);
        nn::ParameterSet all;
        for (auto& [k, t] : fb.enc.params) all.add(k, t);
        for (auto& [k, t] : fb.dec.params) all.add(k, t);
        for (auto& [k, t] : jmp.params) all.add(k, t);
        auto rep_g = nn::grad_check(
            [&]() {
                auto vhat = feedback_eigvecs(fb, b, 4.0, 555, 0);
                return ad::mul_scalar(jmp_se_objective(jmp, b, vhat), -1.0);
            },
            all, std::vector<double>{1e-5, 1e-6}, 40);
        rep.add("grad.jfpnet_sum_se_path", rep_g.max_rel_err < 1e-4,
                detail::fmt("max rel err %.3g (worst %s)", rep_g.max_rel_err, rep_g.worst_param.c_str()));
    }

    return rep;
}

// ---- figure-suite assertions ----------------------------------------------------------

inline CheckReport check_fig3(const Fig3Result& r, const Fig3Config& cfg) {
    CheckReport rep;
    bool hashes_equal = !r.sweep_ckpt_hashes.empty();
    for (auto h : r.sweep_ckpt_hashes) hashes_equal = hashes_equal && h == r.denoiser_ckpt_hash;
    rep.add("fig3.one_for_all_checkpoint", hashes_equal,
            detail::fmt("%zu sweep points share checkpoint hash %016llx", r.sweep_ckpt_hashes.size(),
                        static_cast<unsigned long long>(r.denoiser_ckpt_hash)));

    bool monotone = true;
    std::string curve;
    double prev = 1e300;
    for (double cr : cfg.cr_list) {
        const double v = r.nmse_ppp_learned.at(cr);
        if (v > prev + 0.5) monotone = false;
        prev = v;
        curve += detail::fmt("cr=%.4g:%.2fdB ", cr, v);
    }
    rep.add("fig3.nmse_monotone_in_cr", monotone, curve);

    const double ppp_half = r.nmse_ppp_learned.at(cfg.baseline_cr);
    rep.add("fig3.ppp_beats_learned_decoder_at_half", ppp_half <= r.nmse_baseline,
            detail::fmt("PPP %.2f dB vs baseline %.2f dB at cr=%.2g", ppp_half, r.nmse_baseline,
                        cfg.baseline_cr));

    rep.add("fig3.ue_state_counts",
            r.ue_state_ppp == 1 && r.ue_state_learned_decoder == 1 && r.ue_state_two_sided > 10000,
            detail::fmt("ppp=%zu decoder=%zu two-sided=%zu", r.ue_state_ppp, r.ue_state_learned_decoder,
                        r.ue_state_two_sided));
    return rep;
}

inline CheckReport check_fig4(const Fig4Result& r) {
    CheckReport rep;
    rep.add("fig4.sscc_cliff", r.cliff.has_cliff,
            detail::fmt("jump %.2f dB at %g dB SNR, flat spread above %.2f dB", r.cliff.jump_db,
                        r.cliff.cliff_snr_db, r.cliff.flat_spread_db));

    bool graceful = true;
    std::string detail_s;
    for (const auto& [train_snr, curve] : r.djscc_curves) {
        const double worst = max_step_degradation_db(curve);
        if (worst >= 5.0) graceful = false;
        detail_s += detail::fmt("djscc@%g: %.2f dB/step ", train_snr, worst);
    }
    {
        const double worst = max_step_degradation_db(r.adjscc_curve);
        if (worst >= 5.0) graceful = false;
        detail_s += detail::fmt("adjscc: %.2f dB/step", worst);
    }
    rep.add("fig4.djscc_graceful_degradation", graceful, detail_s);

    bool best_near_train = true;
    std::string near_s;
    for (const auto& [train_snr, curve] : r.djscc_curves) {
        double global_min = 1e300, window_min = 1e300;
        for (const auto& pt : curve) {
            global_min = std::min(global_min, pt.nmse_db);
            if (std::abs(pt.snr_db - train_snr) <= 2.0 + 1e-9) window_min = std::min(window_min, pt.nmse_db);
        }
        if (window_min > global_min + 0.5) best_near_train = false;
        near_s += detail::fmt("@%g: window %.2f vs best %.2f ", train_snr, window_min, global_min);
    }
    rep.add("fig4.djscc_best_near_training_snr", best_near_train, near_s);

    bool dominance = true;
    double worst_margin = 1e300;
    for (const auto& [train_snr, curve] : r.djscc_curves) {
        for (std::size_t i = 0; i < curve.size(); ++i) {
            if (std::abs(curve[i].snr_db - train_snr) < 4.0 - 1e-9) continue;
            const double margin = curve[i].nmse_db - r.adjscc_curve[i].nmse_db;  // >0: adjscc better
            worst_margin = std::min(worst_margin, margin);
            if (r.adjscc_curve[i].nmse_db > curve[i].nmse_db + 0.3) dominance = false;
        }
    }
    rep.add("fig4.adjscc_dominates_off_train", dominance,
            detail::fmt("worst ADJSCC margin %.2f dB (tolerance -0.3)", worst_margin));

    rep.add("fig4.overhead_parity_n16", r.n_parity == 16,
            detail::fmt("feedback_symbols(16,2,1/2,4) = %d", r.n_parity));

    rep.add("fig4.offset_module_gain", r.sscc_no_offset_db - r.sscc_quantized_floor_db >= 0.5,
            detail::fmt("no-offset %.2f dB vs offset %.2f dB", r.sscc_no_offset_db,
                        r.sscc_quantized_floor_db));

    rep.add("fig4.two_sided_ue_state", r.djscc_ue_state > 10000,
            detail::fmt("djscc encoder holds %zu values", r.djscc_ue_state));
    return rep;
}

inline CheckReport check_fig5(const Fig5Result& r) {
    CheckReport rep;
    const auto& jfp = r.curves.at("JFPNet");
    const auto& sep = r.curves.at("DJSCC_w_JMP");
    const auto& bdw = r.curves.at("DJSCC_BD_WF");
    const auto& pf = r.curves.at("PF_BD_WF");

    bool joint_wins = true;
    double worst = 1e300;
    for (std::size_t i = 0; i < jfp.size(); ++i) {
        worst = std::min(worst, jfp[i].sum_se - sep[i].sum_se);
        if (jfp[i].sum_se < sep[i].sum_se - 0.05) joint_wins = false;
    }
    rep.add("fig5.jfpnet_ge_separate", joint_wins, detail::fmt("worst margin %.3f bits/s/Hz", worst));

    bool pf_wins = true;
    worst = 1e300;
    for (std::size_t i = 0; i < pf.size(); ++i) {
        worst = std::min(worst, pf[i].sum_se - bdw[i].sum_se);
        if (pf[i].sum_se < bdw[i].sum_se - 1e-9) pf_wins = false;
    }
    rep.add("fig5.perfect_feedback_ge_learned_feedback_bd", pf_wins,
            detail::fmt("worst margin %.3f bits/s/Hz", worst));

    bool learned_precoder_robust = true;
    worst = 1e300;
    for (std::size_t i = 0; i < sep.size(); ++i) {
        if (sep[i].snr_db > 0.0 + 1e-9) continue;
        worst = std::min(worst, sep[i].sum_se - bdw[i].sum_se);
        if (sep[i].sum_se < bdw[i].sum_se - 1e-9) learned_precoder_robust = false;
    }
    rep.add("fig5.jmp_ge_bd_at_low_snr", learned_precoder_robust,
            detail::fmt("worst low-SNR margin %.3f bits/s/Hz", worst));

    rep.add("fig5.joint_objective_improves", r.joint_log.epoch_loss.back() > r.joint_log.epoch_loss.front(),
            detail::fmt("mean sum-SE %.3f -> %.3f", r.joint_log.epoch_loss.front(),
                        r.joint_log.epoch_loss.back()));
    return rep;
}

inline CheckReport check_ce(const CeResult& r) {
    CheckReport rep;
    rep.add("ce.inf_pilot_matches_perfect", std::abs(r.nmse_ce_inf_pilot_db - r.nmse_perfect_db) <= 0.2,
            detail::fmt("pipeline %.3f dB vs perfect %.3f dB", r.nmse_ce_inf_pilot_db, r.nmse_perfect_db));
    rep.add("ce.direct_within_3db_of_ce", r.nmse_direct_db <= r.nmse_ce_db + 3.0,
            detail::fmt("direct %.2f dB vs ce %.2f dB at 10 dB pilots", r.nmse_direct_db, r.nmse_ce_db));
    rep.add("ce.direct_cheaper_at_ue", r.macs_direct < r.macs_ce,
            detail::fmt("direct %zu MACs vs ce %zu MACs", r.macs_direct, r.macs_ce));
    return rep;
}

// ---- config handling -------------------------------------------------------------------

inline std::vector<double> grid_from_json(const nlohmann::json& j) {
    config_require(j.is_array() && j.size() == 3, "snr_grid: expected [lo, step, hi]");
    const double lo = j[0].get<double>(), step = j[1].get<double>(), hi = j[2].get<double>();
    config_require(step > 0 && hi >= lo, "snr_grid: require step > 0 and hi >= lo");
    std::vector<double> g;
    for (double s = lo; s <= hi + 1e-9; s += step) g.push_back(s);
    config_require(!g.empty(), "snr_grid: empty grid");
    return g;
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || it.key() == k;
        config_require(ok, "config: unknown field '" + it.key() + "'");
    }
}

// Runs one experiment described by a JSON config and returns its records.
// Deterministic given the config contents (wall_ms excluded).
inline std::vector<ResultRecord> run_from_config(const nlohmann::json& cfg) {
    config_require(cfg.contains("experiment"), "config: missing field 'experiment'");
    const std::string exp = cfg.at("experiment").get<std::string>();
    const std::uint64_t seed = cfg.value("seed", 1ull);

    if (exp == "fig3") {
        reject_unknown_keys(cfg, {"experiment", "seed", "out", "out_dir", "scenario", "train_count",
                                  "test_count", "cr_list", "denoiser_epochs", "baseline_epochs", "n_tx",
                                  "n_sub", "n_delay"});
        Fig3Config c;
        c.seed = seed;
        if (cfg.contains("scenario"))
            c.spec = cfg.at("scenario").get<std::string>() == "indoor_like" ? ChannelSpec::indoor_like()
                                                                            : ChannelSpec::uma_like();
        if (cfg.contains("n_tx")) c.spec.n_tx = cfg.at("n_tx").get<int>();
        if (cfg.contains("n_sub")) c.spec.n_sub = cfg.at("n_sub").get<int>();
        if (cfg.contains("n_delay")) c.spec.n_delay = cfg.at("n_delay").get<int>();
        c.train_count = cfg.value("train_count", c.train_count);
        c.test_count = cfg.value("test_count", c.test_count);
        if (cfg.contains("cr_list")) {
            c.cr_list = cfg.at("cr_list").get<std::vector<double>>();
            config_require(!c.cr_list.empty(), "config: cr_list must be non-empty");
            for (double cr : c.cr_list)
                config_require(cr > 0.0 && cr <= 1.0, "config: cr values must lie in (0, 1]");
        }
        c.denoiser_epochs = cfg.value("denoiser_epochs", c.denoiser_epochs);
        c.baseline_epochs = cfg.value("baseline_epochs", c.baseline_epochs);
        c.out_dir = cfg.value("out_dir", c.out_dir);
        return run_fig3(c).records;
    }
    if (exp == "fig4") {
        reject_unknown_keys(cfg, {"experiment", "seed", "out", "train_count", "test_count", "sscc_epochs",
                                  "djscc_epochs", "adjscc_epochs", "snr_grid"});
        Fig4Config c;
        c.seed = seed;
        c.train_count = cfg.value("train_count", c.train_count);
        c.test_count = cfg.value("test_count", c.test_count);
        c.sscc_epochs = cfg.value("sscc_epochs", c.sscc_epochs);
        c.djscc_epochs = cfg.value("djscc_epochs", c.djscc_epochs);
        c.adjscc_epochs = cfg.value("adjscc_epochs", c.adjscc_epochs);
        if (cfg.contains("snr_grid")) c.djscc_grid = grid_from_json(cfg.at("snr_grid"));
        return run_fig4(c).records;
    }
    if (exp == "fig5") {
        reject_unknown_keys(cfg, {"experiment", "seed", "out", "train_count", "test_count", "n_symbols",
                                  "snr_grid", "fb_epochs", "jmp_epochs", "joint_epochs"});
        Fig5Config c;
        c.seed = seed;
        c.train_count = cfg.value("train_count", c.train_count);
        c.test_count = cfg.value("test_count", c.test_count);
        c.n_symbols = cfg.value("n_symbols", c.n_symbols);
        if (cfg.contains("snr_grid")) c.snr_grid = grid_from_json(cfg.at("snr_grid"));
        c.fb_cfg.epochs = cfg.value("fb_epochs", c.fb_cfg.epochs);
        c.jmp_cfg.epochs = cfg.value("jmp_epochs", c.jmp_cfg.epochs);
        c.joint_cfg.epochs = cfg.value("joint_epochs", c.joint_cfg.epochs);
        return run_fig5(c).records;
    }
    if (exp == "ce") {
        reject_unknown_keys(cfg, {"experiment", "seed", "out", "train_count", "test_count", "pilot_snr_db",
                                  "n_pilot", "epochs"});
        CeConfig c;
        c.seed = seed;
        c.train_count = cfg.value("train_count", c.train_count);
        c.test_count = cfg.value("test_count", c.test_count);
        c.pilot_snr_db = cfg.value("pilot_snr_db", c.pilot_snr_db);
        c.n_pilot = cfg.value("n_pilot", c.n_pilot);
        c.epochs = cfg.value("epochs", c.epochs);
        return run_ce(c).records;
    }
    throw ConfigError("config: unknown experiment '" + exp + "'");
}

// Writes the records of a config run to its output path (atomic, locked).
inline void run_to_file(const nlohmann::json& cfg, double wall_ms_total = 0.0) {
    config_require(cfg.contains("out"), "config: missing field 'out'");
    const std::string out = cfg.at("out").get<std::string>();
    RunLock lock(out);
    auto records = run_from_config(cfg);
    for (auto& r : records) r.wall_ms = wall_ms_total;
    io::atomic_write(out, records_to_csv(records));
}

// ---- plot data emission -------------------------------------------------------------------

// One whitespace-separated curve file per (experiment, method, metric) with
// numeric axis values; plus an index file mapping methods to files.
inline std::vector<std::string> emit_plotdata(const std::vector<ResultRecord>& records,
                                              const std::string& out_dir) {
    std::map<std::string, std::vector<std::pair<double, double>>> curves;
    for (const auto& r : records) {
        const auto eq = r.axis.find('=');
        if (eq == std::string::npos) continue;  // scalar records are not curves
        const double x = std::stod(r.axis.substr(eq + 1));
        std::string key = r.experiment + "_" + r.method + "_" + r.metric;
        for (auto& ch : key)
            if (ch == '/' || ch == ' ') ch = '-';
        curves[key].push_back({x, r.value});
    }
    std::vector<std::string> files;
    std::string index;
    for (auto& [key, pts] : curves) {
        std::sort(pts.begin(), pts.end());
        std::string body;
        char buf[80];
        for (const auto& [x, y] : pts) {
            std::snprintf(buf, sizeof buf, "%.10g %.10g\n", x, y);
            body += buf;
        }
        const std::string fname = out_dir + "/" + key + ".dat";
        io::atomic_write(fname, body);
        files.push_back(fname);
        index += key + " " + fname + "\n";
    }
    io::atomic_write(out_dir + "/plots.idx", index);
    if (curves.empty()) std::fprintf(stderr, "warning: no curve records found, index is empty\n");
    return files;
}

}  // namespace csifb::bench
