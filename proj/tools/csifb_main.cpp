// csifb — CSI feedback simulation bench.
//
// Subcommand groups mirror the library modules: dataset generation, model
// training, per-module evaluation with fixed CSV schemas, experiment runs
// from JSON configs, the acceptance check suites, and plot-data emission.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

#include "csifb/bench.hpp"

using namespace csifb;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitAcceptance = 3;

std::vector<double> parse_grid(const std::string& s) {
    // "lo:step:hi" or a comma list
    std::vector<double> out;
    if (s.find(':') != std::string::npos) {
        double lo, step, hi;
        if (std::sscanf(s.c_str(), "%lf:%lf:%lf", &lo, &step, &hi) != 3 || step <= 0 || hi < lo)
            throw ConfigError("bad grid spec '" + s + "', expected lo:step:hi");
        for (double v = lo; v <= hi + 1e-9; v += step) out.push_back(v);
    } else {
        std::istringstream is(s);
        std::string tok;
        while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
    }
    config_require(!out.empty(), "empty grid spec");
    return out;
}

SnrSpec parse_snr_spec(const std::string& s) {
    double a, b;
    if (std::sscanf(s.c_str(), "fixed:%lf", &a) == 1) return SnrSpec::fixed(a);
    if (std::sscanf(s.c_str(), "uniform:%lf:%lf", &a, &b) == 2) return SnrSpec::uniform(a, b);
    if (s == "fixed:inf") return SnrSpec::fixed(std::numeric_limits<double>::infinity());
    throw ConfigError("bad snr spec '" + s + "', expected fixed:S or uniform:LO:HI");
}

nlohmann::json load_json(const std::string& path) {
    std::ifstream f(path);
    config_require(static_cast<bool>(f), "cannot open config file: " + path);
    try {
        return nlohmann::json::parse(f);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
}

void require_file(const std::string& path) {
    std::ifstream f(path);
    config_require(static_cast<bool>(f), "referenced file does not exist: " + path);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    config_require(static_cast<bool>(f), "cannot open file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

int env_threads() {
    const char* v = std::getenv("CSIFB_THREADS");
    if (!v) return 1;
    const int n = std::atoi(v);
    return n > 0 ? n : 1;
}

struct Cli {
    CLI::App app{"CSI feedback simulation bench"};
    int rc = kExitOk;
};

// ---- gen-data ------------------------------------------------------------------

void add_gen_data(Cli& cli) {
    auto* cmd = cli.app.add_subcommand("gen-data", "generate a channel dataset file");
    auto scenario = std::make_shared<std::string>("indoor_like");
    auto count = std::make_shared<std::size_t>(1000);
    auto seed = std::make_shared<std::uint64_t>(1);
    auto split = std::make_shared<std::string>("train");
    auto out = std::make_shared<std::string>();
    auto n_tx = std::make_shared<int>(0);
    auto n_sub = std::make_shared<int>(0);
    auto n_delay = std::make_shared<int>(0);
    auto keep_sf = std::make_shared<bool>(false);
    cmd->add_option("--scenario", *scenario)->check(CLI::IsMember({"indoor_like", "uma_like"}));
    cmd->add_option("--count", *count);
    cmd->add_option("--seed", *seed);
    cmd->add_option("--split", *split)->check(CLI::IsMember({"train", "val", "test"}));
    cmd->add_option("--out", *out)->required();
    cmd->add_option("--n-tx", *n_tx);
    cmd->add_option("--n-sub", *n_sub);
    cmd->add_option("--n-delay", *n_delay);
    cmd->add_flag("--keep-sf", *keep_sf, "also store the spatial-frequency matrices");
    cmd->callback([=]() {
        ChannelSpec spec = *scenario == "indoor_like" ? ChannelSpec::indoor_like() : ChannelSpec::uma_like();
        if (*n_tx) spec.n_tx = *n_tx;
        if (*n_sub) spec.n_sub = *n_sub;
        if (*n_delay) spec.n_delay = *n_delay;
        Split sp = *split == "train" ? Split::train : (*split == "val" ? Split::val : Split::test);
        Dataset ds = generate_dataset(spec, *count, *seed, sp, *keep_sf);
        save_dataset(*out, ds);
        std::printf("wrote %zu samples to %s (norm_scale %.6g)\n", ds.size(), out->c_str(), ds.norm_scale);
    });
}

// ---- train ---------------------------------------------------------------------

void add_train(Cli& cli) {
    auto* train = cli.app.add_subcommand("train", "train a model and write its checkpoint");
    train->require_subcommand(1);

    {
        auto* c = train->add_subcommand("denoiser", "one-for-all PPP denoiser");
        auto dataset = std::make_shared<std::string>();
        auto ckpt = std::make_shared<std::string>();
        auto epochs = std::make_shared<int>(20);
        auto seed = std::make_shared<std::uint64_t>(1);
        c->add_option("--dataset", *dataset)->required();
        c->add_option("--ckpt", *ckpt)->required();
        c->add_option("--epochs", *epochs);
        c->add_option("--seed", *seed);
        c->callback([=]() {
            require_file(*dataset);
            Dataset ds = load_dataset(*dataset);
            Rng init(derive_seed(*seed, {0xC11}));
            auto ps = make_denoiser_params(init);
            DenoiserTrainConfig cfg;
            cfg.epochs = *epochs;
            auto log = train_denoiser(ps, ds, cfg, *seed);
            nn::save_checkpoint(*ckpt, ps);
            std::printf("denoiser trained: loss %.6g -> %.6g, checkpoint %s\n", log.epoch_loss.front(),
                        log.epoch_loss.back(), ckpt->c_str());
        });
    }
    {
        auto* c = train->add_subcommand("learned-decoder", "per-ratio learned decoder baseline");
        auto dataset = std::make_shared<std::string>();
        auto ckpt = std::make_shared<std::string>();
        auto cr = std::make_shared<double>(0.5);
        auto proj_seed = std::make_shared<std::uint64_t>(77);
        auto epochs = std::make_shared<int>(40);
        auto seed = std::make_shared<std::uint64_t>(1);
        c->add_option("--dataset", *dataset)->required();
        c->add_option("--ckpt", *ckpt)->required();
        c->add_option("--cr", *cr);
        c->add_option("--proj-seed", *proj_seed);
        c->add_option("--epochs", *epochs);
        c->add_option("--seed", *seed);
        c->callback([=]() {
            require_file(*dataset);
            config_require(*cr > 0 && *cr <= 1.0, "cr must lie in (0, 1]");
            Dataset ds = load_dataset(*dataset);
            const int n = ds.spec.real_dim();
            ProjectionSpec pspec{*proj_seed, *cr, n};
            Rng init(derive_seed(*seed, {0xC12}));
            auto ps = make_learned_decoder_params(pspec.m(), n, ds.spec.n_delay, ds.spec.n_tx, init);
            LearnedDecoderConfig cfg;
            cfg.cr = *cr;
            cfg.projection_seed = *proj_seed;
            cfg.epochs = *epochs;
            cfg.lr = 3e-3;
            auto log = train_learned_decoder(ps, ds, cfg, *seed);
            nn::save_checkpoint(*ckpt, ps);
            std::printf("learned decoder (cr=%g) trained: loss %.6g -> %.6g, checkpoint %s\n", *cr,
                        log.epoch_loss.front(), log.epoch_loss.back(), ckpt->c_str());
        });
    }
    {
        auto* c = train->add_subcommand("sscc", "SSCC encoder/decoder + offset module");
        auto dataset = std::make_shared<std::string>();
        auto ckpt = std::make_shared<std::string>();
        auto e_dim = std::make_shared<int>(16);
        auto epochs = std::make_shared<int>(30);
        auto offset_epochs = std::make_shared<int>(12);
        auto bits = std::make_shared<int>(2);
        auto seed = std::make_shared<std::uint64_t>(1);
        c->add_option("--dataset", *dataset)->required();
        c->add_option("--ckpt", *ckpt)->required();
        c->add_option("--e-dim", *e_dim);
        c->add_option("--epochs", *epochs);
        c->add_option("--offset-epochs", *offset_epochs);
        c->add_option("--B", *bits);
        c->add_option("--seed", *seed);
        c->callback([=]() {
            require_file(*dataset);
            Dataset ds = load_dataset(*dataset);
            SsccModels m;
            m.cfg.e_dim = *e_dim;
            m.cfg.height = ds.spec.n_delay;
            m.cfg.width = ds.spec.n_tx;
            m.cfg.epochs = *epochs;
            m.cfg.offset_epochs = *offset_epochs;
            m.cfg.quant.bits = *bits;
            Rng init(derive_seed(*seed, {0xC13}));
            sscc_init(m, init);
            auto log = sscc_train(m, ds, *seed);
            save_sscc(*ckpt, m);
            std::printf("sscc trained: loss %.6g -> %.6g, checkpoint %s\n", log.epoch_loss.front(),
                        log.epoch_loss.back(), ckpt->c_str());
        });
    }
    {
        auto* c = train->add_subcommand("djscc", "DJSCC / ADJSCC end-to-end model");
        auto dataset = std::make_shared<std::string>();
        auto ckpt = std::make_shared<std::string>();
        auto n = std::make_shared<int>(16);
        auto snr = std::make_shared<std::string>("fixed:0");
        auto af = std::make_shared<std::string>("off");
        auto epochs = std::make_shared<int>(30);
        auto seed = std::make_shared<std::uint64_t>(1);
        c->add_option("--dataset", *dataset)->required();
        c->add_option("--ckpt", *ckpt)->required();
        c->add_option("--n", *n, "complex feedback symbols");
        c->add_option("--snr", *snr, "fixed:S or uniform:LO:HI");
        c->add_option("--af", *af)->check(CLI::IsMember({"on", "off"}));
        c->add_option("--epochs", *epochs);
        c->add_option("--seed", *seed);
        c->callback([=]() {
            require_file(*dataset);
            Dataset ds = load_dataset(*dataset);
            DjsccArch arch;
            arch.height = ds.spec.n_delay;
            arch.width = ds.spec.n_tx;
            arch.n_symbols = *n;
            arch.af_enabled = *af == "on";
            Rng init(derive_seed(*seed, {0xC14}));
            auto m = make_djscc(arch, init);
            DjsccTrainConfig cfg;
            cfg.epochs = *epochs;
            auto spec = parse_snr_spec(*snr);
            auto log = train_e2e(m, ds, spec, cfg, *seed);
            save_djscc(*ckpt, m);
            std::printf("djscc trained (%s, af %s): loss %.6g -> %.6g, checkpoint %s\n",
                        spec.tag().c_str(), af->c_str(), log.epoch_loss.front(), log.epoch_loss.back(),
                        ckpt->c_str());
        });
    }
    {
        auto* c = train->add_subcommand("jfpnet", "joint feedback + precoding (also writes the separate baselines)");
        auto out_prefix = std::make_shared<std::string>();
        auto scenes = std::make_shared<std::size_t>(1500);
        auto seed = std::make_shared<std::uint64_t>(3);
        auto n = std::make_shared<int>(32);
        auto fb_epochs = std::make_shared<int>(30);
        auto jmp_epochs = std::make_shared<int>(40);
        auto joint_epochs = std::make_shared<int>(25);
        c->add_option("--out-prefix", *out_prefix)->required();
        c->add_option("--scenes", *scenes);
        c->add_option("--seed", *seed);
        c->add_option("--n", *n, "feedback symbols per user");
        c->add_option("--fb-epochs", *fb_epochs);
        c->add_option("--jmp-epochs", *jmp_epochs);
        c->add_option("--joint-epochs", *joint_epochs);
        c->callback([=]() {
            bench::Fig5Config cfg;
            cfg.train_count = *scenes;
            cfg.test_count = 1;  // training only; evaluation runs via `precode eval`
            cfg.seed = *seed;
            cfg.n_symbols = *n;
            cfg.fb_cfg.epochs = *fb_epochs;
            cfg.jmp_cfg.epochs = *jmp_epochs;
            cfg.joint_cfg.epochs = *joint_epochs;

            auto train = make_scene_dataset(cfg.scene, cfg.train_count, cfg.seed, Split::train);
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
            save_djscc(*out_prefix + "_fb_separate.ckpt", fb);
            nn::save_checkpoint(*out_prefix + "_jmp_separate.ckpt", jmp);
            auto log = train_jfpnet(fb, jmp, train, cfg.snr_train, cfg.joint_cfg, derive_seed(cfg.seed, {0x5E}));
            save_djscc(*out_prefix + "_fb_joint.ckpt", fb);
            nn::save_checkpoint(*out_prefix + "_jmp_joint.ckpt", jmp);
            std::printf("jfpnet trained: mean sum-SE %.4f -> %.4f, checkpoints %s_*.ckpt\n",
                        log.epoch_loss.front(), log.epoch_loss.back(), out_prefix->c_str());
        });
    }
}

// ---- module eval groups -----------------------------------------------------------

void add_onesided(Cli& cli) {
    auto* grp = cli.app.add_subcommand("onesided", "one-sided PPP feedback");
    auto* c = grp->add_subcommand("eval", "reconstruct a test dataset over compression ratios");
    auto dataset = std::make_shared<std::string>();
    auto crs = std::make_shared<std::string>("0.0625,0.125,0.25,0.5");
    auto kind = std::make_shared<std::string>("soft");
    auto ckpt = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto proj_seed = std::make_shared<std::uint64_t>(77);
    auto seed = std::make_shared<std::uint64_t>(1);
    c->add_option("--dataset", *dataset)->required();
    c->add_option("--cr", *crs, "comma list of ratios");
    c->add_option("--denoiser", *kind)->check(CLI::IsMember({"soft", "learned"}));
    c->add_option("--ckpt", *ckpt, "denoiser checkpoint (learned variant)");
    c->add_option("--out", *out)->required();
    c->add_option("--proj-seed", *proj_seed);
    c->add_option("--seed", *seed);
    c->callback([=]() {
        require_file(*dataset);
        Dataset ds = load_dataset(*dataset);
        nn::ParameterSet dn_params;
        if (*kind == "learned") {
            config_require(!ckpt->empty(), "learned denoiser needs --ckpt");
            dn_params = nn::load_checkpoint(*ckpt);
        }
        const int n = ds.spec.real_dim();
        std::vector<std::vector<double>> refs(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) refs[i] = to_real_view(ds.samples[i].h_da);
        std::ostringstream os;
        os << "scenario,cr,method,nmse_db,samples,seed\n";
        PppOptions opts;
        for (double cr : parse_grid(*crs)) {
            config_require(cr > 0 && cr <= 1.0, "cr must lie in (0, 1]");
            ProjectionSpec pspec{*proj_seed, cr, n};
            PppSolver solver(pspec, opts);
            Denoiser den = *kind == "learned"
                               ? Denoiser::learned(dn_params, ds.spec.n_delay, ds.spec.n_tx)
                               : Denoiser::soft(1.0);
            std::vector<std::vector<double>> recs(ds.size());
            for (std::size_t i = 0; i < ds.size(); ++i)
                recs[i] = solver.reconstruct(compress(refs[i], pspec), den);
            char row[160];
            std::snprintf(row, sizeof row, "%s,%.10g,ppp_%s,%.6f,%zu,%llu\n", to_string(ds.spec.scenario),
                          cr, kind->c_str(), nmse_db_real(refs, recs).db, ds.size(),
                          static_cast<unsigned long long>(*seed));
            os << row;
        }
        io::atomic_write(*out, os.str());
        std::printf("wrote %s\n", out->c_str());
    });
}

void add_sscc(Cli& cli) {
    auto* grp = cli.app.add_subcommand("sscc", "digital SSCC feedback chain");
    auto* c = grp->add_subcommand("eval", "evaluate the full chain over an SNR grid");
    auto ckpt = std::make_shared<std::string>();
    auto dataset = std::make_shared<std::string>();
    auto snr = std::make_shared<std::string>("-10:1:10");
    auto bits = std::make_shared<int>(2);
    auto q = std::make_shared<int>(4);
    auto out = std::make_shared<std::string>();
    auto seed = std::make_shared<std::uint64_t>(1);
    c->add_option("--ckpt", *ckpt)->required();
    c->add_option("--dataset", *dataset)->required();
    c->add_option("--snr", *snr, "lo:step:hi");
    c->add_option("--B", *bits);
    c->add_option("--q", *q);
    c->add_option("--out", *out)->required();
    c->add_option("--seed", *seed);
    c->callback([=]() {
        require_file(*dataset);
        require_file(*ckpt);
        Dataset ds = load_dataset(*dataset);
        SsccModels m = load_sscc(*ckpt);
        m.cfg.quant.bits = *bits;
        ModemSpec modem{*q};
        auto curve = sscc_eval(m, ds, modem, parse_grid(*snr), *seed);
        detect_cliff(curve);
        std::ostringstream os;
        os << "snr_db,nmse_db,ber_pre_decoder,ber_post_decoder,cliff_flag\n";
        char row[160];
        for (const auto& pt : curve) {
            std::snprintf(row, sizeof row, "%.10g,%.6f,%.8g,%.8g,%d\n", pt.snr_db, pt.nmse_db,
                          pt.ber_pre_decoder, pt.ber_post_decoder, pt.cliff_flag ? 1 : 0);
            os << row;
        }
        io::atomic_write(*out, os.str());
        std::printf("wrote %s\n", out->c_str());
    });
}

void add_djscc_group(Cli& cli) {
    auto* grp = cli.app.add_subcommand("djscc", "end-to-end learned feedback");
    auto* c = grp->add_subcommand("eval", "NMSE-vs-SNR curve of a trained model");
    auto ckpt = std::make_shared<std::string>();
    auto dataset = std::make_shared<std::string>();
    auto grid = std::make_shared<std::string>("-10:2:10");
    auto out = std::make_shared<std::string>();
    auto seed = std::make_shared<std::uint64_t>(1);
    auto tag = std::make_shared<std::string>("djscc");
    auto train_tag = std::make_shared<std::string>("-");
    c->add_option("--ckpt", *ckpt)->required();
    c->add_option("--dataset", *dataset)->required();
    c->add_option("--snr-grid", *grid);
    c->add_option("--out", *out)->required();
    c->add_option("--seed", *seed);
    c->add_option("--tag", *tag, "model tag column");
    c->add_option("--train-snr-spec", *train_tag, "train snr spec column");
    c->callback([=]() {
        require_file(*dataset);
        require_file(*ckpt);
        Dataset ds = load_dataset(*dataset);
        auto m = load_djscc(*ckpt);
        auto curve = eval_curve(m, ds, parse_grid(*grid), *seed);
        std::ostringstream os;
        os << "model_tag,train_snr_spec,test_snr_db,nmse_db\n";
        char row[160];
        for (const auto& pt : curve) {
            std::snprintf(row, sizeof row, "%s,%s,%.10g,%.6f\n", tag->c_str(), train_tag->c_str(),
                          pt.snr_db, pt.nmse_db);
            os << row;
        }
        io::atomic_write(*out, os.str());
        std::printf("wrote %s\n", out->c_str());
    });
}

void add_precode(Cli& cli) {
    auto* grp = cli.app.add_subcommand("precode", "joint feedback and precoding");

    {
        auto* c = grp->add_subcommand("train-jfpnet", "alias of `train jfpnet`");
        auto out_prefix = std::make_shared<std::string>();
        c->add_option("--out-prefix", *out_prefix)->required();
        c->callback([=]() {
            std::printf("use `csifb train jfpnet --out-prefix %s` (same flags)\n", out_prefix->c_str());
        });
    }

    auto* c = grp->add_subcommand("eval", "sum-SE curves for the figure-5 methods");
    auto methods = std::make_shared<std::string>("jfp,djscc_jmp,djscc_bdwf,pf_bdwf");
    auto grid = std::make_shared<std::string>("-10:2:10");
    auto out = std::make_shared<std::string>();
    auto prefix = std::make_shared<std::string>();
    auto scenes = std::make_shared<std::size_t>(300);
    auto seed = std::make_shared<std::uint64_t>(3);
    c->add_option("--methods", *methods);
    c->add_option("--snr-grid", *grid);
    c->add_option("--out", *out)->required();
    c->add_option("--ckpt-prefix", *prefix, "prefix used by `train jfpnet`");
    c->add_option("--scenes", *scenes);
    c->add_option("--seed", *seed);
    c->callback([=]() {
        SceneSpec sspec;
        auto test = make_scene_dataset(sspec, *scenes, *seed, Split::test);
        auto grid_v = parse_grid(*grid);
        std::ostringstream os;
        os << "method,snr_db,sum_se,k_users,n_tx,n_symbols\n";

        std::map<std::string, PrecodeMethod> name_map{{"jfp", PrecodeMethod::jfpnet},
                                                      {"djscc_jmp", PrecodeMethod::djscc_w_jmp},
                                                      {"djscc_bdwf", PrecodeMethod::djscc_bd_wf},
                                                      {"pf_bdwf", PrecodeMethod::pf_bd_wf}};
        DjsccModel fb_sep, fb_joint;
        nn::ParameterSet jmp_sep, jmp_joint;
        bool have_sep = false, have_joint = false;
        int n_symbols = 0;

        std::istringstream ms(*methods);
        std::string tok;
        while (std::getline(ms, tok, ',')) {
            auto it = name_map.find(tok);
            config_require(it != name_map.end(), "unknown method '" + tok + "'");
            const PrecodeMethod method = it->second;
            const DjsccModel* fb = nullptr;
            const nn::ParameterSet* jmp = nullptr;
            if (method == PrecodeMethod::jfpnet) {
                if (!have_joint) {
                    require_file(*prefix + "_fb_joint.ckpt");
                    fb_joint = load_djscc(*prefix + "_fb_joint.ckpt");
                    jmp_joint = nn::load_checkpoint(*prefix + "_jmp_joint.ckpt");
                    have_joint = true;
                }
                fb = &fb_joint;
                jmp = &jmp_joint;
            } else if (method != PrecodeMethod::pf_bd_wf) {
                if (!have_sep) {
                    require_file(*prefix + "_fb_separate.ckpt");
                    fb_sep = load_djscc(*prefix + "_fb_separate.ckpt");
                    jmp_sep = nn::load_checkpoint(*prefix + "_jmp_separate.ckpt");
                    have_sep = true;
                }
                fb = &fb_sep;
                jmp = method == PrecodeMethod::djscc_w_jmp ? &jmp_sep : nullptr;
            }
            if (fb) n_symbols = fb->arch.n_symbols;
            auto curve = eval_precoding_method(method, test, grid_v, fb, jmp, *seed);
            char row[160];
            for (const auto& pt : curve) {
                std::snprintf(row, sizeof row, "%s,%.10g,%.6f,%d,%d,%d\n", to_string(method), pt.snr_db,
                              pt.sum_se, sspec.k_users, sspec.n_tx, n_symbols);
                os << row;
            }
        }
        io::atomic_write(*out, os.str());
        std::printf("wrote %s\n", out->c_str());
    });
}

void add_ce(Cli& cli) {
    auto* grp = cli.app.add_subcommand("ce", "imperfect-CSI pipelines");
    auto* c = grp->add_subcommand("eval", "evaluate a trained pipeline checkpoint");
    auto mode = std::make_shared<std::string>("ce");
    auto pilot_snr = std::make_shared<double>(10.0);
    auto np = std::make_shared<int>(16);
    auto ckpt = std::make_shared<std::string>();
    auto dataset = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto seed = std::make_shared<std::uint64_t>(4);
    c->add_option("--mode", *mode)->check(CLI::IsMember({"ce", "direct"}));
    c->add_option("--pilot-snr", *pilot_snr);
    c->add_option("--np", *np);
    c->add_option("--ckpt", *ckpt)->required();
    c->add_option("--dataset", *dataset)->required();
    c->add_option("--out", *out)->required();
    c->add_option("--seed", *seed);
    c->callback([=]() {
        require_file(*dataset);
        require_file(*ckpt);
        Dataset ds = load_dataset(*dataset);
        config_require(ds.has_sf, "ce eval needs a dataset generated with --keep-sf");
        auto m = load_djscc(*ckpt);
        double ref_power = 0.0;
        std::size_t cnt = 0;
        for (const auto& s : ds.samples) {
            ref_power += s.h_sf.squaredNorm();
            cnt += static_cast<std::size_t>(s.h_sf.size());
        }
        CePipelineConfig cfg;
        cfg.mode = *mode == "ce" ? CeMode::ce_then_compress : CeMode::direct_pilot;
        cfg.pilots = make_pilot_spec(ds.spec.n_tx, *np, *pilot_snr, ref_power / static_cast<double>(cnt));
        const double nmse = eval_ce_pipeline(m, ds, cfg, *seed);
        const auto macs = ue_side_macs(cfg.mode, m.arch, cfg.pilots, ds.spec.n_sub);
        std::ostringstream os;
        os << "mode,pilot_snr_db,np,nmse_db,ue_macs\n";
        char row[120];
        std::snprintf(row, sizeof row, "%s,%.10g,%d,%.6f,%zu\n", mode->c_str(), *pilot_snr, *np, nmse, macs);
        os << row;
        io::atomic_write(*out, os.str());
        std::printf("wrote %s\n", out->c_str());
    });
}

// ---- run / sweep / check / emit-plotdata --------------------------------------------

void add_run(Cli& cli) {
    auto* c = cli.app.add_subcommand("run", "run an experiment config and write its ResultRecord CSV");
    auto config = std::make_shared<std::string>();
    auto out_override = std::make_shared<std::string>();
    c->add_option("--config", *config)->required();
    c->add_option("--out", *out_override, "override the config's output path");
    c->callback([=]() {
        auto cfg = load_json(*config);
        if (!out_override->empty()) cfg["out"] = *out_override;
        const auto t0 = std::chrono::steady_clock::now();
        auto probe = cfg;  // validate before any heavy work
        probe.erase("out");
        (void)probe;
        bench::run_to_file(cfg, 0.0);
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        std::printf("run complete in %.1f s -> %s\n", ms / 1000.0, cfg.at("out").get<std::string>().c_str());
    });
}

void add_eval(Cli& cli) {
    auto* c = cli.app.add_subcommand("eval", "run an experiment config and print the CSV to stdout");
    auto config = std::make_shared<std::string>();
    c->add_option("--config", *config)->required();
    c->callback([=]() {
        auto records = bench::run_from_config(load_json(*config));
        std::fputs(bench::records_to_csv(records).c_str(), stdout);
    });
}

void add_sweep(Cli& cli) {
    auto* c = cli.app.add_subcommand("sweep", "run every config in a sweep file");
    auto config = std::make_shared<std::string>();
    c->add_option("--config", *config, "JSON file with a 'runs' array")->required();
    c->callback([=]() {
        auto sweep = load_json(*config);
        config_require(sweep.contains("runs") && sweep.at("runs").is_array() && !sweep.at("runs").empty(),
                       "sweep config: non-empty 'runs' array required");
        const int max_par = env_threads();
        std::vector<pid_t> children;
        for (const auto& run_cfg : sweep.at("runs")) {
            if (max_par <= 1) {
                bench::run_to_file(run_cfg);
                continue;
            }
            while (static_cast<int>(children.size()) >= max_par) {
                int status = 0;
                const pid_t done = ::wait(&status);
                std::erase(children, done);
                config_require(status == 0, "sweep: child run failed");
            }
            const pid_t pid = ::fork();
            if (pid == 0) {
                bench::run_to_file(run_cfg);
                std::_Exit(0);
            }
            children.push_back(pid);
        }
        for (pid_t pid : children) {
            int status = 0;
            ::waitpid(pid, &status, 0);
            config_require(status == 0, "sweep: child run failed");
        }
        std::printf("sweep complete: %zu runs\n", sweep.at("runs").size());
    });
}

void add_check(Cli& cli) {
    auto* c = cli.app.add_subcommand("check", "run acceptance suites (exit 3 on failure)");
    auto suite = std::make_shared<std::string>("oracles");
    auto rc = std::make_shared<int>(kExitOk);
    c->add_option("suite", *suite)
        ->check(CLI::IsMember({"oracles", "grad", "fig3", "fig4", "fig5", "ce", "determinism", "all"}));
    c->callback([&cli, suite]() {
        bench::CheckReport rep;
        auto want = [&](const char* s) { return *suite == s || *suite == "all"; };
        if (want("oracles")) rep.merge(bench::run_oracle_checks());
        if (want("grad")) rep.merge(bench::run_grad_checks());
        if (want("fig3")) {
            bench::Fig3Config cfg;
            cfg.out_dir = ".";
            rep.merge(bench::check_fig3(bench::run_fig3(cfg), cfg));
        }
        if (want("fig4")) rep.merge(bench::check_fig4(bench::run_fig4(bench::Fig4Config{})));
        if (want("fig5")) rep.merge(bench::check_fig5(bench::run_fig5(bench::Fig5Config{})));
        if (want("ce")) rep.merge(bench::check_ce(bench::run_ce(bench::CeConfig{})));
        if (want("determinism")) {
            nlohmann::json cfg{{"experiment", "fig3"}, {"seed", 9},        {"n_tx", 8},
                               {"n_sub", 64},          {"n_delay", 8},     {"train_count", 48},
                               {"test_count", 12},     {"denoiser_epochs", 2}, {"baseline_epochs", 2},
                               {"cr_list", {0.25, 0.5}}};
            const auto a = bench::stable_csv(bench::run_from_config(cfg));
            const auto b = bench::stable_csv(bench::run_from_config(cfg));
            rep.add("determinism.rerun_identical", a == b,
                    a == b ? "metric columns byte-identical across reruns" : "reruns differ");
        }
        bench::print_report(rep);
        cli.rc = rep.all_pass() ? kExitOk : kExitAcceptance;
    });
}

void add_emit_plotdata(Cli& cli) {
    auto* c = cli.app.add_subcommand("emit-plotdata", "turn a ResultRecord CSV into per-method curve files");
    auto csv = std::make_shared<std::string>();
    auto out_dir = std::make_shared<std::string>(".");
    c->add_option("--csv", *csv)->required();
    c->add_option("--out-dir", *out_dir);
    c->callback([=]() {
        require_file(*csv);
        auto records = bench::records_from_csv(read_file(*csv));
        auto files = bench::emit_plotdata(records, *out_dir);
        std::printf("emitted %zu curve files + %s/plots.idx\n", files.size(), out_dir->c_str());
    });
}

}  // namespace

int main(int argc, char** argv) {
    Cli cli;
    cli.app.require_subcommand(1);
    add_gen_data(cli);
    add_train(cli);
    add_onesided(cli);
    add_sscc(cli);
    add_djscc_group(cli);
    add_precode(cli);
    add_ce(cli);
    add_run(cli);
    add_eval(cli);
    add_sweep(cli);
    add_check(cli);
    add_emit_plotdata(cli);

    try {
        cli.app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return cli.app.exit(e) == 0 ? kExitOk : kExitConfig;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return cli.rc;
}
