#pragma once

// Desk-scale experiment suites mirroring the three figure studies plus the
// imperfect-CSI pipeline comparison. Each runner trains what it needs from
// seeds, evaluates on a held-out split, and returns both a rich result
// struct (for the acceptance gate) and flat metric records (for CSV).

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "csifb/channelgen.hpp"
#include "csifb/djscc.hpp"
#include "csifb/feedback_chain.hpp"
#include "csifb/onesided.hpp"
#include "csifb/pilots.hpp"
#include "csifb/precoding.hpp"

namespace csifb::bench {

struct ResultRecord {
    std::string experiment;
    std::string method;
    std::string axis;    // "cr=0.5", "snr_db=4", or "-"
    std::string metric;  // "nmse_db", "sum_se", "ue_state", ...
    double value = 0.0;
    std::uint64_t seed = 0;
    std::string version;
    double wall_ms = 0.0;
};

inline std::string version_hash() {
#ifdef CSIFB_GIT_HASH
    return CSIFB_GIT_HASH;
#else
    return "unknown";
#endif
}

inline std::string axis_of(const char* name, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s=%.10g", name, v);
    return buf;
}

// ---- fig. 3 analogue: one-sided one-for-all vs per-ratio learned decoder ----

struct Fig3Config {
    ChannelSpec spec = ChannelSpec::uma_like();
    std::size_t train_count = 1000;
    std::size_t test_count = 100;
    std::uint64_t seed = 1;
    std::uint64_t projection_seed = 77;
    std::vector<double> cr_list{1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2};
    DenoiserTrainConfig denoiser{};   // multi-sigma by default
    int denoiser_epochs = 20;
    int baseline_epochs = 40;
    double baseline_lr = 3e-3;
    double baseline_cr = 0.5;         // the head-to-head ratio
    PppOptions ppp{};
    double soft_lambda = 1.0;
    std::string out_dir = ".";
};

struct Fig3Result {
    std::uint64_t denoiser_ckpt_hash = 0;
    std::vector<std::uint64_t> sweep_ckpt_hashes;   // checkpoint reloaded per ratio
    std::map<double, double> nmse_ppp_learned;      // cr -> dB
    std::map<double, double> nmse_ppp_soft;
    double nmse_baseline = 0.0;                     // learned decoder at baseline_cr
    std::size_t ue_state_ppp = 0;
    std::size_t ue_state_learned_decoder = 0;
    std::size_t ue_state_two_sided = 0;
    std::vector<ResultRecord> records;
};

inline Fig3Result run_fig3(const Fig3Config& cfg) {
    cfg.spec.validate();
    Fig3Result res;
    const int n = cfg.spec.real_dim();

    Dataset train = generate_dataset(cfg.spec, cfg.train_count, cfg.seed, Split::train);
    Dataset test = generate_dataset(cfg.spec, cfg.test_count, cfg.seed, Split::test);

    Rng init(derive_seed(cfg.seed, {0x3A}));
    auto denoiser_params = make_denoiser_params(init);
    DenoiserTrainConfig dcfg = cfg.denoiser;
    dcfg.epochs = cfg.denoiser_epochs;
    train_denoiser(denoiser_params, train, dcfg, derive_seed(cfg.seed, {0x3B}));
    denoiser_params.metadata["trained_on"] = to_string(cfg.spec.scenario);
    const std::string ckpt_path = cfg.out_dir + "/fig3_denoiser.ckpt";
    nn::save_checkpoint(ckpt_path, denoiser_params);
    res.denoiser_ckpt_hash = nn::checkpoint_hash(denoiser_params);

    std::vector<std::vector<double>> refs(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) refs[i] = to_real_view(test.samples[i].h_da);

    for (double cr : cfg.cr_list) {
        // reload the checkpoint per sweep point: the one-for-all claim is
        // that the very same parameters serve every ratio
        auto sweep_params = nn::load_checkpoint(ckpt_path);
        res.sweep_ckpt_hashes.push_back(nn::checkpoint_hash(sweep_params));

        ProjectionSpec pspec{cfg.projection_seed, cr, n};
        PppSolver solver(pspec, cfg.ppp);
        auto learned = Denoiser::learned(sweep_params, cfg.spec.n_delay, cfg.spec.n_tx);
        auto soft = Denoiser::soft(cfg.soft_lambda);

        std::vector<std::vector<double>> rec_l(test.size()), rec_s(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) {
            auto meas = compress(refs[i], pspec);
            rec_l[i] = solver.reconstruct(meas, learned);
            rec_s[i] = solver.reconstruct(meas, soft);
        }
        res.nmse_ppp_learned[cr] = nmse_db_real(refs, rec_l).db;
        res.nmse_ppp_soft[cr] = nmse_db_real(refs, rec_s).db;
        res.records.push_back({"fig3", "CSI-PPPNet", axis_of("cr", cr), "nmse_db",
                               res.nmse_ppp_learned[cr], cfg.seed, version_hash(), 0});
        res.records.push_back({"fig3", "PPP-soft", axis_of("cr", cr), "nmse_db",
                               res.nmse_ppp_soft[cr], cfg.seed, version_hash(), 0});
    }

    // per-ratio learned-decoder baseline at the head-to-head ratio
    {
        ProjectionSpec pspec{cfg.projection_seed, cfg.baseline_cr, n};
        Rng binit(derive_seed(cfg.seed, {0x3C}));
        auto bl = make_learned_decoder_params(pspec.m(), n, cfg.spec.n_delay, cfg.spec.n_tx, binit);
        LearnedDecoderConfig bcfg;
        bcfg.cr = cfg.baseline_cr;
        bcfg.projection_seed = cfg.projection_seed;
        bcfg.epochs = cfg.baseline_epochs;
        bcfg.lr = cfg.baseline_lr;
        train_learned_decoder(bl, train, bcfg, derive_seed(cfg.seed, {0x3D}));

        std::vector<std::vector<double>> rec(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) rec[i] = decode_learned(bl, compress(refs[i], pspec));
        res.nmse_baseline = nmse_db_real(refs, rec).db;
        res.records.push_back({"fig3", "CS-CsiNet", axis_of("cr", cfg.baseline_cr), "nmse_db",
                               res.nmse_baseline, cfg.seed, version_hash(), 0});
    }

    // UE-side state accounting; the two-sided toy counts its encoder values
    res.ue_state_ppp = count_ue_side_state("onesided-ppp");
    res.ue_state_learned_decoder = count_ue_side_state("onesided-learned-decoder");
    {
        DjsccArch toy;
        toy.height = cfg.spec.n_delay;
        toy.width = cfg.spec.n_tx;
        toy.n_symbols = 16;
        Rng trng(derive_seed(cfg.seed, {0x3E}));
        auto toy_model = make_djscc(toy, trng);
        res.ue_state_two_sided = count_ue_side_state("two-sided-djscc", &toy_model.enc);
    }
    res.records.push_back({"fig3", "CSI-PPPNet", "-", "ue_state", static_cast<double>(res.ue_state_ppp),
                           cfg.seed, version_hash(), 0});
    res.records.push_back({"fig3", "CS-CsiNet", "-", "ue_state",
                           static_cast<double>(res.ue_state_learned_decoder), cfg.seed, version_hash(), 0});
    res.records.push_back({"fig3", "two-sided-djscc", "-", "ue_state",
                           static_cast<double>(res.ue_state_two_sided), cfg.seed, version_hash(), 0});
    return res;
}

// ---- fig. 4 analogue: SSCC cliff vs DJSCC graceful degradation vs ADJSCC ----

struct Fig4Config {
    ChannelSpec spec;  // indoor, desk dims set in the constructor below
    std::size_t train_count = 1000;
    std::size_t test_count = 200;
    std::uint64_t seed = 2;
    int e_dim = 16;
    QuantizerSpec quant{2, 1.0};
    ModemSpec modem{4};
    int sscc_epochs = 30;
    int offset_epochs = 12;
    std::vector<double> sscc_grid;   // wider, to catch the 16-QAM waterfall
    std::vector<double> djscc_grid;  // -10..10 step 2
    std::vector<double> fixed_train_snrs{0.0, 8.0};
    int djscc_epochs = 30;
    int adjscc_epochs = 45;
    int n_symbols = feedback_symbols(16, 2, 0.5, 4);

    Fig4Config() {
        spec = ChannelSpec::indoor_like();
        spec.n_sub = 128;
        spec.n_tx = 16;
        spec.n_delay = 16;
        for (double s = -10; s <= 16.0 + 1e-9; s += 2) sscc_grid.push_back(s);
        for (double s = -10; s <= 10.0 + 1e-9; s += 2) djscc_grid.push_back(s);
    }
};

struct Fig4Result {
    std::vector<SsccCurvePoint> sscc_curve;
    CliffReport cliff;
    double sscc_quantized_floor_db = 0.0;  // chain at +inf SNR
    double sscc_no_offset_db = 0.0;        // quantized path bypassing the offset net
    std::map<double, std::vector<DjsccCurvePoint>> djscc_curves;  // train snr -> curve
    std::vector<DjsccCurvePoint> adjscc_curve;
    double adjscc_train_loss_first = 0.0, adjscc_train_loss_last = 0.0;
    int n_parity = 0;
    std::size_t djscc_ue_state = 0;
    std::vector<ResultRecord> records;
};

inline Fig4Result run_fig4(const Fig4Config& cfg) {
    cfg.spec.validate();
    Fig4Result res;
    res.n_parity = feedback_symbols(cfg.e_dim, cfg.quant.bits, 0.5, cfg.modem.bits_per_symbol);

    Dataset train = generate_dataset(cfg.spec, cfg.train_count, cfg.seed, Split::train);
    Dataset test = generate_dataset(cfg.spec, cfg.test_count, cfg.seed, Split::test);

    // --- SSCC ---
    SsccModels sscc;
    sscc.cfg.e_dim = cfg.e_dim;
    sscc.cfg.height = cfg.spec.n_delay;
    sscc.cfg.width = cfg.spec.n_tx;
    sscc.cfg.epochs = cfg.sscc_epochs;
    sscc.cfg.offset_epochs = cfg.offset_epochs;
    sscc.cfg.quant = cfg.quant;
    Rng sinit(derive_seed(cfg.seed, {0x4A}));
    sscc_init(sscc, sinit);
    sscc_train(sscc, train, derive_seed(cfg.seed, {0x4B}));

    res.sscc_curve = sscc_eval(sscc, test, cfg.modem, cfg.sscc_grid, derive_seed(cfg.seed, {0x4C}));
    res.cliff = detect_cliff(res.sscc_curve);
    {
        const double inf = std::numeric_limits<double>::infinity();
        auto top = sscc_eval(sscc, test, cfg.modem, {inf}, derive_seed(cfg.seed, {0x4C}));
        res.sscc_quantized_floor_db = top[0].nmse_db;
        // same quantized path with the offset module bypassed
        ad::NoGrad ng;
        std::vector<std::vector<double>> refs(test.size()), recs(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) {
            refs[i] = to_real_view(test.samples[i].h_da);
            auto x = nn::stack_views({&refs[i]}, {2, sscc.cfg.height, sscc.cfg.width});
            auto q = quantize(sscc_encode(sscc, x).value(), cfg.quant);
            auto z = ad::Tensor::leaf({1, cfg.e_dim}, dequantize(q.bits, cfg.quant));
            recs[i] = sscc_decode(sscc, z).value();
        }
        res.sscc_no_offset_db = nmse_db_real(refs, recs).db;
    }
    for (const auto& pt : res.sscc_curve)
        res.records.push_back({"fig4", "SSCC_ed16_Q2_n4_R1/2", axis_of("snr_db", pt.snr_db), "nmse_db",
                               pt.nmse_db, cfg.seed, version_hash(), 0});

    // --- DJSCC fixed-SNR models ---
    DjsccArch arch;
    arch.height = cfg.spec.n_delay;
    arch.width = cfg.spec.n_tx;
    arch.n_symbols = cfg.n_symbols;
    DjsccTrainConfig dcfg;
    dcfg.epochs = cfg.djscc_epochs;
    for (double train_snr : cfg.fixed_train_snrs) {
        Rng rinit(derive_seed(cfg.seed, {0x4D, static_cast<std::uint64_t>(train_snr * 1000 + 100000)}));
        auto m = make_djscc(arch, rinit);
        train_e2e(m, train, SnrSpec::fixed(train_snr), dcfg, derive_seed(cfg.seed, {0x4E}));
        res.djscc_curves[train_snr] = eval_curve(m, test, cfg.djscc_grid, derive_seed(cfg.seed, {0x4F}));
        if (res.djscc_ue_state == 0) res.djscc_ue_state = count_ue_side_state("two-sided-djscc", &m.enc);
        char tag[48];
        std::snprintf(tag, sizeof tag, "DJSCC_s2m_train%g", train_snr);
        for (const auto& pt : res.djscc_curves[train_snr])
            res.records.push_back({"fig4", tag, axis_of("snr_db", pt.snr_db), "nmse_db", pt.nmse_db,
                                   cfg.seed, version_hash(), 0});
    }

    // --- ADJSCC ---
    {
        DjsccArch aarch = arch;
        aarch.af_enabled = true;
        Rng ainit(derive_seed(cfg.seed, {0x50}));
        auto m = make_djscc(aarch, ainit);
        DjsccTrainConfig acfg = dcfg;
        acfg.epochs = cfg.adjscc_epochs;
        auto log = train_e2e(m, train, SnrSpec::uniform(-10.0, 10.0), acfg, derive_seed(cfg.seed, {0x51}));
        res.adjscc_train_loss_first = log.epoch_loss.front();
        res.adjscc_train_loss_last = log.epoch_loss.back();
        res.adjscc_curve = eval_curve(m, test, cfg.djscc_grid, derive_seed(cfg.seed, {0x52}));
        for (const auto& pt : res.adjscc_curve)
            res.records.push_back({"fig4", "ADJSCC", axis_of("snr_db", pt.snr_db), "nmse_db", pt.nmse_db,
                                   cfg.seed, version_hash(), 0});
    }
    res.records.push_back({"fig4", "overhead", "-", "n_symbols", static_cast<double>(res.n_parity),
                           cfg.seed, version_hash(), 0});
    return res;
}

// ---- fig. 5 analogue: joint feedback + precoding orderings ----

struct Fig5Config {
    SceneSpec scene{};
    std::size_t train_count = 1500;
    std::size_t test_count = 300;
    std::uint64_t seed = 3;
    int n_symbols = 32;
    int fb_channels = 16;
    SnrSpec snr_train = SnrSpec::uniform(-10.0, 10.0);
    std::vector<double> snr_grid;
    JfpTrainConfig fb_cfg{};    // MSE feedback pretraining
    JfpTrainConfig jmp_cfg{};   // JMP on perfect CSI
    JfpTrainConfig joint_cfg{}; // JFPNet fine-tune

    Fig5Config() {
        for (double s = -10; s <= 10.0 + 1e-9; s += 2) snr_grid.push_back(s);
        fb_cfg.epochs = 30;
        jmp_cfg.epochs = 40;
        joint_cfg.epochs = 25;
        joint_cfg.lr = 3e-4;  // fine-tune gently from the separate solution
    }
};

struct Fig5Result {
    std::map<std::string, std::vector<SePoint>> curves;
    nn::TrainLog joint_log;  // mean sum-SE per epoch, should rise
    std::vector<ResultRecord> records;
};

inline Fig5Result run_fig5(const Fig5Config& cfg) {
    Fig5Result res;
    auto train = make_scene_dataset(cfg.scene, cfg.train_count, cfg.seed, Split::train);
    auto test = make_scene_dataset(cfg.scene, cfg.test_count, cfg.seed, Split::test);

    DjsccArch arch;
    arch.height = cfg.scene.n_tx;
    arch.width = 1;
    arch.n_symbols = cfg.n_symbols;
    arch.channels = cfg.fb_channels;
    arch.down_h = 1;
    arch.down_w = 1;
    arch.af_enabled = true;

    Rng finit(derive_seed(cfg.seed, {0x5A}));
    auto fb = make_djscc(arch, finit);
    train_eig_feedback(fb, train, cfg.snr_train, cfg.fb_cfg, derive_seed(cfg.seed, {0x5B}));

    JmpConfig jc;
    jc.k_users = cfg.scene.k_users;
    jc.n_tx = cfg.scene.n_tx;
    Rng jinit(derive_seed(cfg.seed, {0x5C}));
    auto jmp = make_jmp_params(jc, jinit);
    train_jmp_perfect(jmp, train, cfg.jmp_cfg, derive_seed(cfg.seed, {0x5D}));

    // JFPNet: joint fine-tune starting from the separately trained solution
    auto fb_joint = fb;
    auto jmp_joint = jmp;
    {
        // deep-copy parameters so joint training does not touch the originals
        auto clone = [](const nn::ParameterSet& src) {
            nn::ParameterSet dst;
            for (const auto& [k, t] : src.params) dst.add(k, ad::Tensor::param(t.shape(), t.value()));
            dst.metadata = src.metadata;
            return dst;
        };
        fb_joint.enc = clone(fb.enc);
        fb_joint.dec = clone(fb.dec);
        jmp_joint = clone(jmp);
    }
    res.joint_log =
        train_jfpnet(fb_joint, jmp_joint, train, cfg.snr_train, cfg.joint_cfg, derive_seed(cfg.seed, {0x5E}));

    const std::uint64_t eval_seed = derive_seed(cfg.seed, {0x5F});
    res.curves["JFPNet"] =
        eval_precoding_method(PrecodeMethod::jfpnet, test, cfg.snr_grid, &fb_joint, &jmp_joint, eval_seed);
    res.curves["DJSCC_w_JMP"] =
        eval_precoding_method(PrecodeMethod::djscc_w_jmp, test, cfg.snr_grid, &fb, &jmp, eval_seed);
    res.curves["DJSCC_BD_WF"] =
        eval_precoding_method(PrecodeMethod::djscc_bd_wf, test, cfg.snr_grid, &fb, nullptr, eval_seed);
    res.curves["PF_BD_WF"] =
        eval_precoding_method(PrecodeMethod::pf_bd_wf, test, cfg.snr_grid, nullptr, nullptr, eval_seed);

    for (const auto& [method, curve] : res.curves)
        for (const auto& pt : curve)
            res.records.push_back({"fig5", method, axis_of("snr_db", pt.snr_db), "sum_se", pt.sum_se,
                                   cfg.seed, version_hash(), 0});
    return res;
}

// ---- imperfect-CSI suite ----

struct CeConfig {
    ChannelSpec spec;
    std::size_t train_count = 600;
    std::size_t test_count = 120;
    std::uint64_t seed = 4;
    int n_pilot = 16;
    double pilot_snr_db = 10.0;
    int n_symbols = 32;
    int epochs = 20;

    CeConfig() {
        spec = ChannelSpec::indoor_like();
        spec.n_sub = 64;
        spec.n_tx = 16;
        spec.n_delay = 16;
    }
};

struct CeResult {
    double nmse_perfect_db = 0.0;      // perfect-CSI DJSCC on the test split
    double nmse_ce_inf_pilot_db = 0.0; // same model through the inf-SNR pilot pipeline
    double nmse_ce_db = 0.0;           // ce_then_compress at the working pilot SNR
    double nmse_direct_db = 0.0;       // direct_pilot at the working pilot SNR
    std::size_t macs_ce = 0;
    std::size_t macs_direct = 0;
    std::vector<ResultRecord> records;
};

inline CeResult run_ce(const CeConfig& cfg) {
    cfg.spec.validate();
    CeResult res;
    Dataset train = generate_dataset(cfg.spec, cfg.train_count, cfg.seed, Split::train, /*keep_sf=*/true);
    Dataset test = generate_dataset(cfg.spec, cfg.test_count, cfg.seed, Split::test, /*keep_sf=*/true);

    double ref_power = 0.0;
    std::size_t ref_count = 0;
    for (const auto& s : train.samples) {
        ref_power += s.h_sf.squaredNorm();
        ref_count += static_cast<std::size_t>(s.h_sf.size());
    }
    ref_power /= static_cast<double>(ref_count);

    DjsccArch ce_arch;
    ce_arch.height = cfg.spec.n_delay;
    ce_arch.width = cfg.spec.n_tx;
    ce_arch.n_symbols = cfg.n_symbols;

    DjsccArch direct_arch = ce_arch;
    direct_arch.enc_height = cfg.spec.n_sub;
    direct_arch.enc_width = cfg.n_pilot;
    direct_arch.enc_down_h = cfg.spec.n_sub / cfg.spec.n_delay * 2;  // extra x2: lighter UE
    direct_arch.enc_down_w = std::max(1, cfg.n_pilot / cfg.spec.n_tx * 2);
    direct_arch.s2c_first = true;

    const auto inf = std::numeric_limits<double>::infinity();
    auto pilots_inf = make_pilot_spec(cfg.spec.n_tx, cfg.n_pilot, inf, ref_power);
    auto pilots_work = make_pilot_spec(cfg.spec.n_tx, cfg.n_pilot, cfg.pilot_snr_db, ref_power);

    // perfect-CSI reference model
    Rng pinit(derive_seed(cfg.seed, {0x7A}));
    auto perfect = make_djscc(ce_arch, pinit);
    DjsccTrainConfig pcfg;
    pcfg.epochs = cfg.epochs;
    train_e2e(perfect, train, SnrSpec::fixed(inf), pcfg, derive_seed(cfg.seed, {0x7B}));
    {
        auto curve = eval_curve(perfect, test, {inf}, derive_seed(cfg.seed, {0x7C}));
        res.nmse_perfect_db = curve[0].nmse_db;
    }
    {
        CePipelineConfig e;
        e.mode = CeMode::ce_then_compress;
        e.pilots = pilots_inf;
        res.nmse_ce_inf_pilot_db = eval_ce_pipeline(perfect, test, e, derive_seed(cfg.seed, {0x7D}));
    }

    // pipeline models trained at the working pilot SNR
    auto train_mode = [&](CeMode mode, const DjsccArch& arch) {
        Rng init(derive_seed(cfg.seed, {0x7E, static_cast<std::uint64_t>(mode)}));
        auto m = make_djscc(arch, init);
        CePipelineConfig c;
        c.mode = mode;
        c.pilots = pilots_work;
        c.epochs = cfg.epochs;
        train_ce_pipeline(m, train, c, derive_seed(cfg.seed, {0x7F, static_cast<std::uint64_t>(mode)}));
        return eval_ce_pipeline(m, test, c, derive_seed(cfg.seed, {0x80}));
    };
    res.nmse_ce_db = train_mode(CeMode::ce_then_compress, ce_arch);
    res.nmse_direct_db = train_mode(CeMode::direct_pilot, direct_arch);

    res.macs_ce = ue_side_macs(CeMode::ce_then_compress, ce_arch, pilots_work, cfg.spec.n_sub);
    res.macs_direct = ue_side_macs(CeMode::direct_pilot, direct_arch, pilots_work, cfg.spec.n_sub);

    const auto ver = version_hash();
    res.records = {
        {"ce", "perfect", "-", "nmse_db", res.nmse_perfect_db, cfg.seed, ver, 0},
        {"ce", "ce_then_compress", axis_of("pilot_snr_db", inf), "nmse_db", res.nmse_ce_inf_pilot_db, cfg.seed, ver, 0},
        {"ce", "ce_then_compress", axis_of("pilot_snr_db", cfg.pilot_snr_db), "nmse_db", res.nmse_ce_db, cfg.seed, ver, 0},
        {"ce", "direct_pilot", axis_of("pilot_snr_db", cfg.pilot_snr_db), "nmse_db", res.nmse_direct_db, cfg.seed, ver, 0},
        {"ce", "ce_then_compress", "-", "ue_macs", static_cast<double>(res.macs_ce), cfg.seed, ver, 0},
        {"ce", "direct_pilot", "-", "ue_macs", static_cast<double>(res.macs_direct), cfg.seed, ver, 0},
    };
    return res;
}

}  // namespace csifb::bench
