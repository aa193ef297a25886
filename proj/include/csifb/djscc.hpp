#pragma once

// End-to-end learned feedback: encoder emits unit-power channel symbols,
// the decoder reconstructs through an in-graph AWGN channel, and an optional
// attention-feature (AF) module conditions every conv stage on the uplink
// SNR so one model covers the whole SNR range.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "csifb/channelgen.hpp"
#include "csifb/nn.hpp"

namespace csifb {

struct SnrSpec {
    enum class Mode { fixed, uniform };
    Mode mode = Mode::fixed;
    double lo_db = 0.0;
    double hi_db = 0.0;

    static SnrSpec fixed(double snr_db) { return {Mode::fixed, snr_db, snr_db}; }
    static SnrSpec uniform(double lo_db, double hi_db) {
        config_require(lo_db <= hi_db, "SnrSpec: require lo <= hi");
        return {Mode::uniform, lo_db, hi_db};
    }

    double draw(Rng& rng) const { return mode == Mode::fixed ? lo_db : rng.uniform(lo_db, hi_db); }

    std::string tag() const {
        char buf[64];
        if (mode == Mode::fixed)
            std::snprintf(buf, sizeof buf, "fixed:%g", lo_db);
        else
            std::snprintf(buf, sizeof buf, "uniform:%g:%g", lo_db, hi_db);
        return buf;
    }
};

struct DjsccArch {
    int height = 16;     // CSI view rows (n_delay); also the decoder output dims
    int width = 16;      // CSI view cols (n_tx)
    int n_symbols = 16;  // complex feedback symbols
    int channels = 16;
    int down_h = 2;      // space-to-channel factors of the transform stages
    int down_w = 2;      // (1,1) disables downsampling
    bool af_enabled = false;

    // Encoder input may differ from the CSI view (direct-pilot mode feeds raw
    // received pilots). 0 means "same as the CSI view". s2c_first reshuffles
    // before the first conv, trading channels for spatial size at the UE.
    int enc_height = 0;
    int enc_width = 0;
    int enc_down_h = 0;
    int enc_down_w = 0;
    bool s2c_first = false;

    int in_h() const { return enc_height > 0 ? enc_height : height; }
    int in_w() const { return enc_width > 0 ? enc_width : width; }
    int edh() const { return enc_down_h > 0 ? enc_down_h : down_h; }
    int edw() const { return enc_down_w > 0 ? enc_down_w : down_w; }

    void validate() const {
        config_require(height > 0 && width > 0 && n_symbols > 0 && channels > 0, "DjsccArch: bad dims");
        config_require(height % down_h == 0 && width % down_w == 0,
                       "DjsccArch: down factors must divide the view dims");
        config_require(in_h() % edh() == 0 && in_w() % edw() == 0,
                       "DjsccArch: encoder down factors must divide the input dims");
    }
    int enc_inner_h() const { return in_h() / edh(); }
    int enc_inner_w() const { return in_w() / edw(); }
    int inner_h() const { return height / down_h; }
    int inner_w() const { return width / down_w; }
};

// Encoder parameters live in `enc` (the UE side), decoder parameters in
// `dec` (the BS side); AF blocks sit with the side that owns the conv layer.
struct DjsccModel {
    DjsccArch arch;
    nn::ParameterSet enc;
    nn::ParameterSet dec;
};

namespace detail {

inline void make_af(nn::ParameterSet& ps, const std::string& prefix, int channels, Rng& rng) {
    nn::make_dense(ps, prefix + ".fc1", channels + 1, 8, rng);
    nn::make_dense(ps, prefix + ".fc2", 8, channels, rng);
}

}  // namespace detail

inline DjsccModel make_djscc(const DjsccArch& arch, Rng& rng) {
    arch.validate();
    DjsccModel m;
    m.arch = arch;
    const int c = arch.channels;
    const int flat = c * arch.inner_h() * arch.inner_w();
    const int enc_flat = c * arch.enc_inner_h() * arch.enc_inner_w();

    if (arch.s2c_first) {
        nn::make_conv(m.enc, "enc.t1", 2 * arch.edh() * arch.edw(), c, 3, rng);
        nn::make_conv(m.enc, "enc.c1", c, c, 3, rng);
    } else {
        nn::make_conv(m.enc, "enc.t1", 2, c, 3, rng);
        nn::make_conv(m.enc, "enc.c1", c * arch.edh() * arch.edw(), c, 3, rng);
    }
    nn::make_conv(m.enc, "enc.c2", c, c, 3, rng);
    nn::make_dense(m.enc, "enc.fc", enc_flat, 2 * arch.n_symbols, rng);

    nn::make_dense(m.dec, "dec.fc", 2 * arch.n_symbols, flat, rng);
    nn::make_conv(m.dec, "dec.t1", c, 2 * arch.down_h * arch.down_w, 3, rng);
    nn::make_conv(m.dec, "dec.r1.c1", 2, 8, 3, rng);
    nn::make_conv(m.dec, "dec.r1.c2", 8, 2, 3, rng);
    nn::make_conv(m.dec, "dec.r2.c1", 2, 8, 3, rng);
    nn::make_conv(m.dec, "dec.r2.c2", 8, 2, 3, rng);

    if (arch.af_enabled) {
        detail::make_af(m.enc, "enc.af_t1", c, rng);
        detail::make_af(m.enc, "enc.af_c1", c, rng);
        detail::make_af(m.enc, "enc.af_c2", c, rng);  // af channels track each conv's output
        detail::make_af(m.dec, "dec.af_t1", 2 * arch.down_h * arch.down_w, rng);
        detail::make_af(m.dec, "dec.af_r1", 8, rng);
        detail::make_af(m.dec, "dec.af_r2", 8, rng);
    }
    m.enc.metadata["role"] = "djscc-encoder";
    m.dec.metadata["role"] = "djscc-decoder";
    return m;
}

// Pool -> concat snr/20 -> dense(8) -> leaky_relu -> dense(C) -> sigmoid ->
// channelwise rescale.
inline ad::Tensor af_apply(const nn::ParameterSet& ps, const std::string& prefix,
                           const ad::Tensor& features, double snr_db) {
    config_require(std::isfinite(snr_db), "af_apply: snr must be finite");
    auto pooled = ad::global_average_pool(features);
    const int n = pooled.shape()[0];
    auto snr_col = ad::Tensor::full({n, 1}, snr_db / 20.0);
    auto h = ad::leaky_relu(nn::dense(ps, prefix + ".fc1", ad::concat_cols({pooled, snr_col})));
    auto scale = ad::sigmoid(nn::dense(ps, prefix + ".fc2", h));
    return ad::scale_channels(features, scale);
}

namespace detail {

inline ad::Tensor maybe_af(const DjsccModel& m, const nn::ParameterSet& side, const std::string& prefix,
                           const ad::Tensor& t, double snr_db) {
    if (!m.arch.af_enabled) return t;
    config_require(std::isfinite(snr_db), "djscc: finite snr required when the AF module is enabled");
    return af_apply(side, prefix, t, snr_db);
}

}  // namespace detail

// One checkpoint file holds both sides; parameter names already carry the
// enc./dec. prefixes and the arch rides in the metadata.
inline void save_djscc(const std::string& path, const DjsccModel& m) {
    nn::ParameterSet merged;
    for (const auto& [k, t] : m.enc.params) merged.add(k, t);
    for (const auto& [k, t] : m.dec.params) merged.add(k, t);
    merged.metadata = {{"role", "djscc"},
                       {"height", m.arch.height},
                       {"width", m.arch.width},
                       {"n_symbols", m.arch.n_symbols},
                       {"channels", m.arch.channels},
                       {"down_h", m.arch.down_h},
                       {"down_w", m.arch.down_w},
                       {"af_enabled", m.arch.af_enabled},
                       {"enc_height", m.arch.enc_height},
                       {"enc_width", m.arch.enc_width},
                       {"enc_down_h", m.arch.enc_down_h},
                       {"enc_down_w", m.arch.enc_down_w},
                       {"s2c_first", m.arch.s2c_first}};
    nn::save_checkpoint(path, merged);
}

inline DjsccModel load_djscc(const std::string& path) {
    auto merged = nn::load_checkpoint(path);
    DjsccModel m;
    const auto& md = merged.metadata;
    config_require(md.value("role", "") == "djscc", "load_djscc: not a djscc checkpoint: " + path);
    m.arch.height = md.at("height").get<int>();
    m.arch.width = md.at("width").get<int>();
    m.arch.n_symbols = md.at("n_symbols").get<int>();
    m.arch.channels = md.at("channels").get<int>();
    m.arch.down_h = md.at("down_h").get<int>();
    m.arch.down_w = md.at("down_w").get<int>();
    m.arch.af_enabled = md.at("af_enabled").get<bool>();
    m.arch.enc_height = md.value("enc_height", 0);
    m.arch.enc_width = md.value("enc_width", 0);
    m.arch.enc_down_h = md.value("enc_down_h", 0);
    m.arch.enc_down_w = md.value("enc_down_w", 0);
    m.arch.s2c_first = md.value("s2c_first", false);
    m.arch.validate();
    for (auto& [k, t] : merged.params) {
        if (k.rfind("enc.", 0) == 0)
            m.enc.add(k, t);
        else
            m.dec.add(k, t);
    }
    m.enc.metadata["role"] = "djscc-encoder";
    m.dec.metadata["role"] = "djscc-decoder";
    return m;
}

// x is (N, 2, H, W); returns (N, 2n) power-normalized so every sample's mean
// squared complex-symbol magnitude is exactly 1.
inline ad::Tensor djscc_encode(const DjsccModel& m, const ad::Tensor& x,
                               double snr_db = std::numeric_limits<double>::quiet_NaN()) {
    const auto& a = m.arch;
    shape_require(x.shape().size() == 4 && x.shape()[1] == 2 && x.shape()[2] == a.in_h() &&
                      x.shape()[3] == a.in_w(),
                  "djscc_encode: input shape mismatch");
    ad::Tensor t;
    if (a.s2c_first) {
        t = ad::space_to_channel(x, a.edh(), a.edw());
        t = ad::leaky_relu(nn::conv(m.enc, "enc.t1", t));
        t = detail::maybe_af(m, m.enc, "enc.af_t1", t, snr_db);
        t = ad::leaky_relu(nn::conv(m.enc, "enc.c1", t));
    } else {
        t = ad::leaky_relu(nn::conv(m.enc, "enc.t1", x));
        t = detail::maybe_af(m, m.enc, "enc.af_t1", t, snr_db);
        t = ad::space_to_channel(t, a.edh(), a.edw());
        t = ad::leaky_relu(nn::conv(m.enc, "enc.c1", t));
    }
    t = detail::maybe_af(m, m.enc, "enc.af_c1", t, snr_db);
    t = ad::leaky_relu(nn::conv(m.enc, "enc.c2", t));
    t = detail::maybe_af(m, m.enc, "enc.af_c2", t, snr_db);
    t = ad::reshape(t, {x.shape()[0], a.channels * a.enc_inner_h() * a.enc_inner_w()});
    auto sym = nn::dense(m.enc, "enc.fc", t);
    return ad::power_normalize_rows(sym, 0.5);  // 0.5 per real = unit power per complex symbol
}

// Static multiply-accumulate count of one encoder pass (per sample); used by
// the UE-side cost comparison between pipeline modes.
inline std::size_t djscc_encoder_macs(const DjsccArch& a) {
    const std::size_t hw_in = static_cast<std::size_t>(a.in_h()) * a.in_w();
    const std::size_t hw_inner = static_cast<std::size_t>(a.enc_inner_h()) * a.enc_inner_w();
    const int c = a.channels;
    std::size_t macs = 0;
    if (a.s2c_first) {
        macs += static_cast<std::size_t>(c) * (2 * a.edh() * a.edw()) * 9 * hw_inner;  // t1
        macs += static_cast<std::size_t>(c) * c * 9 * hw_inner;                        // c1
    } else {
        macs += static_cast<std::size_t>(c) * 2 * 9 * hw_in;                            // t1
        macs += static_cast<std::size_t>(c) * (c * a.edh() * a.edw()) * 9 * hw_inner;   // c1
    }
    macs += static_cast<std::size_t>(c) * c * 9 * hw_inner;                             // c2
    macs += static_cast<std::size_t>(c) * hw_inner * 2 * static_cast<std::size_t>(a.n_symbols);  // fc
    return macs;
}

// y is (N, 2n); returns (N, 2, H, W).
inline ad::Tensor djscc_decode(const DjsccModel& m, const ad::Tensor& y,
                               double snr_db = std::numeric_limits<double>::quiet_NaN()) {
    const auto& a = m.arch;
    shape_require(y.shape().size() == 2 && y.shape()[1] == 2 * a.n_symbols,
                  "djscc_decode: symbol vector shape mismatch");
    const int n = y.shape()[0];
    auto t = ad::leaky_relu(nn::dense(m.dec, "dec.fc", y));
    t = ad::reshape(t, {n, a.channels, a.inner_h(), a.inner_w()});
    t = ad::leaky_relu(nn::conv(m.dec, "dec.t1", t));
    t = detail::maybe_af(m, m.dec, "dec.af_t1", t, snr_db);
    t = ad::channel_to_space(t, a.down_h, a.down_w);

    auto r1 = ad::leaky_relu(nn::conv(m.dec, "dec.r1.c1", t));
    r1 = detail::maybe_af(m, m.dec, "dec.af_r1", r1, snr_db);
    t = ad::add(t, nn::conv(m.dec, "dec.r1.c2", r1));
    auto r2 = ad::leaky_relu(nn::conv(m.dec, "dec.r2.c1", t));
    r2 = detail::maybe_af(m, m.dec, "dec.af_r2", r2, snr_db);
    return ad::add(t, nn::conv(m.dec, "dec.r2.c2", r2));
}

// In-graph AWGN at unit symbol power: the noise is an additive constant
// leaf, so gradients pass through to the symbols with identity Jacobian.
inline ad::Tensor awgn_tensor(const ad::Tensor& symbols, double snr_db, Rng& rng) {
    if (std::isinf(snr_db) && snr_db > 0) return symbols;
    const double std_per_real = std::sqrt(std::pow(10.0, -snr_db / 10.0) / 2.0);
    std::vector<double> noise(symbols.size());
    for (auto& v : noise) v = std_per_real * rng.gauss();
    return ad::add(symbols, ad::Tensor::leaf(symbols.shape(), std::move(noise)));
}

// Variant keyed per row: row i of the batch always sees the stream derived
// from (seed, stream_tag, i), so evaluations agree across batch layouts and
// methods sharing a seed.
inline ad::Tensor awgn_tensor_per_row(const ad::Tensor& symbols, double snr_db, std::uint64_t seed,
                                      std::uint64_t stream_tag) {
    if (std::isinf(snr_db) && snr_db > 0) return symbols;
    const double std_per_real = std::sqrt(std::pow(10.0, -snr_db / 10.0) / 2.0);
    const int rows = symbols.shape()[0];
    const std::size_t row_len = symbols.size() / static_cast<std::size_t>(rows);
    std::vector<double> noise(symbols.size());
    for (int r = 0; r < rows; ++r) {
        Rng rng(derive_seed(seed, {stream_tag, static_cast<std::uint64_t>(r)}));
        for (std::size_t i = 0; i < row_len; ++i) noise[static_cast<std::size_t>(r) * row_len + i] = std_per_real * rng.gauss();
    }
    return ad::add(symbols, ad::Tensor::leaf(symbols.shape(), std::move(noise)));
}

struct DjsccTrainConfig {
    int epochs = 20;
    int batch = 64;
    double lr = 1e-3;
};

// MSE through encode -> awgn -> decode, SNR drawn per batch from snr_spec.
inline nn::TrainLog train_e2e(DjsccModel& m, const Dataset& ds, const SnrSpec& snr_spec,
                              const DjsccTrainConfig& cfg, std::uint64_t seed) {
    config_require(!ds.samples.empty(), "train_e2e: empty dataset");
    shape_require(ds.spec.n_delay == m.arch.height && ds.spec.n_tx == m.arch.width,
                  "train_e2e: dataset dims do not match the architecture");
    std::vector<std::vector<double>> views(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) views[i] = to_real_view(ds.samples[i].h_da);

    nn::TrainLog log;
    nn::OptimizerState opt;
    opt.lr = cfg.lr;
    Rng order_rng(derive_seed(seed, {0xD1}));
    Rng snr_rng(derive_seed(seed, {0xD2}));
    Rng noise_rng(derive_seed(seed, {0xD3}));

    for (int ep = 0; ep < cfg.epochs; ++ep) {
        auto order = nn::epoch_order(views.size(), order_rng);
        double acc = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch) {
            const std::size_t take = std::min<std::size_t>(cfg.batch, order.size() - off);
            std::vector<const std::vector<double>*> rows(take);
            for (std::size_t k = 0; k < take; ++k) rows[k] = &views[order[off + k]];
            auto x = nn::stack_views(rows, {2, m.arch.height, m.arch.width});
            const double snr = snr_spec.draw(snr_rng);

            m.enc.zero_grad();
            m.dec.zero_grad();
            auto sym = djscc_encode(m, x, snr);
            auto rx = awgn_tensor(sym, snr, noise_rng);
            auto loss = nn::mse(djscc_decode(m, rx, snr), x);
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

struct DjsccCurvePoint {
    double snr_db = 0.0;
    double nmse_db = 0.0;
};

// Mean NMSE at each grid SNR; the noise seed is fixed per (seed, point).
inline std::vector<DjsccCurvePoint> eval_curve(const DjsccModel& m, const Dataset& ds,
                                               const std::vector<double>& snr_grid, std::uint64_t seed) {
    config_require(!ds.samples.empty(), "eval_curve: empty dataset");
    ad::NoGrad ng;
    std::vector<std::vector<double>> views(ds.size());
    std::vector<const std::vector<double>*> rows(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        views[i] = to_real_view(ds.samples[i].h_da);
        rows[i] = &views[i];
    }
    auto x = nn::stack_views(rows, {2, m.arch.height, m.arch.width});

    std::vector<DjsccCurvePoint> curve;
    for (std::size_t gi = 0; gi < snr_grid.size(); ++gi) {
        const double snr = snr_grid[gi];
        Rng noise_rng(derive_seed(seed, {0xE7A1, gi}));
        auto sym = djscc_encode(m, x, snr);
        auto rx = awgn_tensor(sym, snr, noise_rng);
        auto rec = djscc_decode(m, rx, snr);

        std::vector<std::vector<double>> recs(ds.size());
        const std::size_t item = views[0].size();
        for (std::size_t i = 0; i < ds.size(); ++i)
            recs[i].assign(rec.value().begin() + static_cast<std::ptrdiff_t>(i * item),
                           rec.value().begin() + static_cast<std::ptrdiff_t>((i + 1) * item));
        curve.push_back({snr, nmse_db_real(views, recs).db});
    }
    return curve;
}

// Largest NMSE worsening per grid step as SNR decreases; the graceful-
// degradation check compares this against a budget.
inline double max_step_degradation_db(const std::vector<DjsccCurvePoint>& curve) {
    double worst = 0.0;
    for (std::size_t i = 0; i + 1 < curve.size(); ++i)
        worst = std::max(worst, curve[i].nmse_db - curve[i + 1].nmse_db);
    return worst;
}

}  // namespace csifb
