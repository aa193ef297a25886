#pragma once

// Digital SSCC feedback link: uniform quantizer, rate-1/2 (7,5) convolutional
// code with hard-decision Viterbi decoding, Gray-mapped QAM, AWGN, overhead
// accounting, and the SSCC autoencoder whose end-to-end curve exhibits the
// cliff effect.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "csifb/channelgen.hpp"
#include "csifb/nn.hpp"
#include "csifb/rng.hpp"

namespace csifb {

// ---- quantizer -----------------------------------------------------------------

struct QuantizerSpec {
    int bits = 2;       // B
    double clip = 1.0;  // symmetric range [-clip, clip]

    void validate() const {
        config_require(bits >= 1 && bits <= 16, "QuantizerSpec: bits must be in [1,16]");
        config_require(clip > 0, "QuantizerSpec: clip must be positive");
    }
    int levels() const { return 1 << bits; }
    double step() const { return 2.0 * clip / levels(); }
};

struct QuantizeResult {
    std::vector<std::uint8_t> bits;  // one bit per entry, MSB first per value
    std::size_t clipped = 0;
};

// Uniform midrise quantizer; out-of-range values clip silently (counted).
inline QuantizeResult quantize(const std::vector<double>& v, const QuantizerSpec& spec) {
    spec.validate();
    QuantizeResult out;
    out.bits.reserve(v.size() * static_cast<std::size_t>(spec.bits));
    const double step = spec.step();
    for (double x : v) {
        if (x < -spec.clip || x > spec.clip) out.clipped += 1;
        int idx = static_cast<int>(std::floor((x + spec.clip) / step));
        idx = std::clamp(idx, 0, spec.levels() - 1);
        for (int b = spec.bits - 1; b >= 0; --b) out.bits.push_back(static_cast<std::uint8_t>((idx >> b) & 1));
    }
    return out;
}

inline std::vector<double> dequantize(const std::vector<std::uint8_t>& bits, const QuantizerSpec& spec) {
    spec.validate();
    shape_require(bits.size() % static_cast<std::size_t>(spec.bits) == 0,
                  "dequantize: bit count not divisible by bits-per-value");
    std::vector<double> v(bits.size() / static_cast<std::size_t>(spec.bits));
    const double step = spec.step();
    for (std::size_t i = 0; i < v.size(); ++i) {
        int idx = 0;
        for (int b = 0; b < spec.bits; ++b) idx = (idx << 1) | bits[i * spec.bits + b];
        v[i] = -spec.clip + (idx + 0.5) * step;
    }
    return v;
}

// ---- convolutional code ----------------------------------------------------------

// Rate 1/2, constraint length 3, generators (7,5) octal, zero-tail terminated.
struct CodeSpec {
    static constexpr double rate = 0.5;
    static constexpr int constraint = 3;
    static constexpr int tail_bits = constraint - 1;
    static constexpr unsigned g0 = 07;  // 111
    static constexpr unsigned g1 = 05;  // 101
};

inline std::vector<std::uint8_t> conv_encode(const std::vector<std::uint8_t>& info) {
    shape_require(!info.empty(), "conv_encode: empty input");
    std::vector<std::uint8_t> out;
    out.reserve(2 * (info.size() + CodeSpec::tail_bits));
    unsigned s1 = 0, s2 = 0;  // two most recent input bits
    auto push = [&](unsigned u) {
        out.push_back(static_cast<std::uint8_t>(u ^ s1 ^ s2));  // g0 = 111
        out.push_back(static_cast<std::uint8_t>(u ^ s2));       // g1 = 101
        s2 = s1;
        s1 = u;
    };
    for (auto b : info) push(b & 1u);
    for (int t = 0; t < CodeSpec::tail_bits; ++t) push(0);
    return out;
}

// Hard-decision Viterbi over the terminated trellis; exact ML in Hamming
// distance (ties resolved toward the lower-state/zero-input path).
inline std::vector<std::uint8_t> viterbi_decode(const std::vector<std::uint8_t>& coded) {
    shape_require(coded.size() % 2 == 0, "viterbi_decode: input length must be even");
    const int total = static_cast<int>(coded.size() / 2);
    shape_require(total > CodeSpec::tail_bits, "viterbi_decode: input too short");
    const int len = total - CodeSpec::tail_bits;

    constexpr int nstates = 4;  // state = (s1<<1)|s2
    constexpr int inf = std::numeric_limits<int>::max() / 2;
    std::array<int, nstates> metric;
    metric.fill(inf);
    metric[0] = 0;
    std::vector<std::array<std::uint8_t, nstates>> prev_input(total);
    std::vector<std::array<std::uint8_t, nstates>> prev_state(total);

    for (int t = 0; t < total; ++t) {
        const int r0 = coded[2 * static_cast<std::size_t>(t)];
        const int r1 = coded[2 * static_cast<std::size_t>(t) + 1];
        std::array<int, nstates> next;
        next.fill(inf);
        std::array<std::uint8_t, nstates> in{}, st{};
        const int max_u = t < len ? 1 : 0;  // tail steps force zero input
        for (int s = 0; s < nstates; ++s) {
            if (metric[s] >= inf) continue;
            const unsigned s1 = static_cast<unsigned>(s) >> 1, s2 = static_cast<unsigned>(s) & 1;
            for (int u = 0; u <= max_u; ++u) {
                const unsigned c0 = static_cast<unsigned>(u) ^ s1 ^ s2;
                const unsigned c1 = static_cast<unsigned>(u) ^ s2;
                const int m = metric[s] + (static_cast<int>(c0) != r0) + (static_cast<int>(c1) != r1);
                const int ns = (u << 1) | static_cast<int>(s1);
                if (m < next[ns]) {
                    next[ns] = m;
                    in[ns] = static_cast<std::uint8_t>(u);
                    st[ns] = static_cast<std::uint8_t>(s);
                }
            }
        }
        metric = next;
        prev_input[t] = in;
        prev_state[t] = st;
    }

    std::vector<std::uint8_t> info(len);
    int s = 0;  // zero-tail termination ends in state 0
    for (int t = total - 1; t >= 0; --t) {
        const int u = prev_input[t][s];
        if (t < len) info[t] = static_cast<std::uint8_t>(u);
        s = prev_state[t][s];
    }
    return info;
}

// ---- QAM ------------------------------------------------------------------------

struct ModemSpec {
    int bits_per_symbol = 2;  // 2 -> 4-QAM, 4 -> 16-QAM

    void validate() const {
        config_require(bits_per_symbol == 2 || bits_per_symbol == 4,
                       "ModemSpec: bits_per_symbol must be 2 or 4");
    }
};

namespace detail {

// Gray axis levels for 16-QAM, indexed by the 2 axis bits; unit-energy scale.
// 00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3 (all /sqrt(10)).
inline double qam16_level(unsigned bits2) {
    static constexpr double lut[4] = {-3.0, -1.0, 3.0, 1.0};
    return lut[bits2 & 3] / std::sqrt(10.0);
}

// Slices one axis back to 2 bits; boundary ties go to the lower bit pattern.
inline unsigned qam16_slice(double x) {
    const double s = 1.0 / std::sqrt(10.0);
    if (x <= -2.0 * s) return 0b00;  // tie at -2s prefers 00 over 01
    if (x <= 0.0) return 0b01;       // tie at 0 prefers 01 over 11
    if (x < 2.0 * s) return 0b11;    // tie at +2s prefers 10 over 11
    return 0b10;
}

}  // namespace detail

inline std::vector<cplx> qam_mod(const std::vector<std::uint8_t>& bits, const ModemSpec& spec) {
    spec.validate();
    const int q = spec.bits_per_symbol;
    shape_require(bits.size() % static_cast<std::size_t>(q) == 0,
                  "qam_mod: bit count not divisible by bits per symbol");
    std::vector<cplx> out(bits.size() / static_cast<std::size_t>(q));
    const double a = 1.0 / std::numbers::sqrt2;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint8_t* b = bits.data() + i * static_cast<std::size_t>(q);
        if (q == 2) {
            out[i] = cplx(b[0] ? -a : a, b[1] ? -a : a);
        } else {
            const unsigned ib = static_cast<unsigned>(b[0] << 1 | b[1]);
            const unsigned qb = static_cast<unsigned>(b[2] << 1 | b[3]);
            out[i] = cplx(detail::qam16_level(ib), detail::qam16_level(qb));
        }
    }
    return out;
}

inline std::vector<std::uint8_t> qam_demod(const std::vector<cplx>& symbols, const ModemSpec& spec) {
    spec.validate();
    const int q = spec.bits_per_symbol;
    std::vector<std::uint8_t> bits(symbols.size() * static_cast<std::size_t>(q));
    for (std::size_t i = 0; i < symbols.size(); ++i) {
        std::uint8_t* b = bits.data() + i * static_cast<std::size_t>(q);
        if (q == 2) {
            // ties at zero prefer the positive point (lower index)
            b[0] = symbols[i].real() < 0.0 ? 1 : 0;
            b[1] = symbols[i].imag() < 0.0 ? 1 : 0;
        } else {
            const unsigned ib = detail::qam16_slice(symbols[i].real());
            const unsigned qb = detail::qam16_slice(symbols[i].imag());
            b[0] = static_cast<std::uint8_t>(ib >> 1);
            b[1] = static_cast<std::uint8_t>(ib & 1);
            b[2] = static_cast<std::uint8_t>(qb >> 1);
            b[3] = static_cast<std::uint8_t>(qb & 1);
        }
    }
    return bits;
}

// ---- AWGN -------------------------------------------------------------------------

// Adds circular complex Gaussian noise with total variance 10^(-snr/10)
// relative to unit symbol power. +inf passes symbols through untouched.
inline std::vector<cplx> awgn(const std::vector<cplx>& symbols, double snr_db, std::uint64_t seed) {
    if (std::isinf(snr_db) && snr_db > 0) return symbols;
    const double var = std::pow(10.0, -snr_db / 10.0);
    const double s = std::sqrt(var / 2.0);
    Rng rng(seed);
    std::vector<cplx> out(symbols.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = symbols[i] + cplx(s * rng.gauss(), s * rng.gauss());
    return out;
}

// ---- overhead accounting -------------------------------------------------------------

// Number of feedback symbols for e_dim quantized reals at B bits through a
// rate-R code and q-bit QAM. Tail bits are excluded by default, matching the
// e_dim=16, B=2, R=1/2, q=4 -> n=16 headline arithmetic; include_tail adds
// the zero-tail overhead of the terminated code.
inline int feedback_symbols(int e_dim, int bits, double rate, int q, bool include_tail = false) {
    config_require(e_dim > 0 && bits > 0 && rate > 0 && q > 0, "feedback_symbols: positive args required");
    const double info_bits = static_cast<double>(e_dim) * bits + (include_tail ? CodeSpec::tail_bits : 0);
    return static_cast<int>(std::ceil(info_bits / rate / q));
}

// ---- SSCC networks ---------------------------------------------------------------------

// Encoder: two conv layers, dense to e_dim, tanh squash into the quantizer
// clip range. Decoder: dense back to the CSI view plus two residual conv
// refinement blocks. Offset: two dense layers applied to the dequantized
// vector (residual), trained with the quantizer in the loop.
struct SsccConfig {
    int e_dim = 16;
    int channels = 16;
    int height = 16;  // n_delay of the dataset view
    int width = 16;   // n_tx of the dataset view
    int epochs = 20;
    int offset_epochs = 10;
    int batch = 64;
    double lr = 1e-3;
    QuantizerSpec quant{};
};

struct SsccModels {
    nn::ParameterSet encoder;
    nn::ParameterSet decoder;
    nn::ParameterSet offset;
    SsccConfig cfg;
};

namespace detail {

inline ad::Tensor refine_block(const nn::ParameterSet& ps, const std::string& prefix, ad::Tensor x) {
    auto h = ad::leaky_relu(nn::conv(ps, prefix + ".c1", x));
    auto r = nn::conv(ps, prefix + ".c2", h);
    return ad::add(x, r);
}

}  // namespace detail

inline void sscc_init(SsccModels& m, Rng& rng) {
    const auto& c = m.cfg;
    nn::make_conv(m.encoder, "enc.c1", 2, c.channels, 3, rng);
    nn::make_conv(m.encoder, "enc.c2", c.channels, c.channels, 3, rng);
    nn::make_dense(m.encoder, "enc.fc", c.channels * c.height * c.width, c.e_dim, rng);
    nn::make_dense(m.decoder, "dec.fc", c.e_dim, 2 * c.height * c.width, rng);
    nn::make_conv(m.decoder, "dec.r1.c1", 2, 8, 3, rng);
    nn::make_conv(m.decoder, "dec.r1.c2", 8, 2, 3, rng);
    nn::make_conv(m.decoder, "dec.r2.c1", 2, 8, 3, rng);
    nn::make_conv(m.decoder, "dec.r2.c2", 8, 2, 3, rng);
    nn::make_dense(m.offset, "off.fc1", c.e_dim, 4 * c.e_dim, rng);
    nn::make_dense(m.offset, "off.fc2", 4 * c.e_dim, c.e_dim, rng);
}

inline ad::Tensor sscc_encode(const SsccModels& m, const ad::Tensor& x) {
    const auto& c = m.cfg;
    auto h = ad::leaky_relu(nn::conv(m.encoder, "enc.c1", x));
    h = ad::leaky_relu(nn::conv(m.encoder, "enc.c2", h));
    h = ad::reshape(h, {x.shape()[0], c.channels * c.height * c.width});
    return ad::tanh(nn::dense(m.encoder, "enc.fc", h));
}

inline ad::Tensor sscc_decode(const SsccModels& m, const ad::Tensor& e) {
    const auto& c = m.cfg;
    auto h = nn::dense(m.decoder, "dec.fc", e);
    h = ad::reshape(h, {e.shape()[0], 2, c.height, c.width});
    h = detail::refine_block(m.decoder, "dec.r1", h);
    return detail::refine_block(m.decoder, "dec.r2", h);
}

inline ad::Tensor sscc_offset(const SsccModels& m, const ad::Tensor& deq) {
    auto h = ad::leaky_relu(nn::dense(m.offset, "off.fc1", deq));
    return ad::add(deq, nn::dense(m.offset, "off.fc2", h));
}

// Phase one: encoder+decoder on MSE with the quantizer bypassed. Phase two:
// offset module with quantize/dequantize in the loop, encoder and decoder
// frozen.
inline nn::TrainLog sscc_train(SsccModels& m, const Dataset& ds, std::uint64_t seed) {
    config_require(!ds.samples.empty(), "sscc_train: empty dataset");
    const auto& c = m.cfg;
    shape_require(ds.spec.n_delay == c.height && ds.spec.n_tx == c.width,
                  "sscc_train: dataset dims do not match model config");

    std::vector<std::vector<double>> views(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) views[i] = to_real_view(ds.samples[i].h_da);

    nn::TrainLog log;
    nn::OptimizerState opt;
    opt.lr = c.lr;
    Rng order_rng(derive_seed(seed, {0x55CC}));

    auto run_epochs = [&](int epochs, auto&& step_fn) {
        for (int ep = 0; ep < epochs; ++ep) {
            auto order = nn::epoch_order(views.size(), order_rng);
            double acc = 0.0;
            std::size_t batches = 0;
            for (std::size_t off = 0; off + 1 <= order.size(); off += c.batch) {
                const std::size_t take = std::min<std::size_t>(c.batch, order.size() - off);
                std::vector<const std::vector<double>*> rows(take);
                for (std::size_t k = 0; k < take; ++k) rows[k] = &views[order[off + k]];
                auto x = nn::stack_views(rows, {2, c.height, c.width});
                acc += step_fn(x);
                batches += 1;
            }
            log.epoch_loss.push_back(acc / static_cast<double>(batches));
        }
    };

    // phase 1: autoencoder
    run_epochs(c.epochs, [&](const ad::Tensor& x) {
        m.encoder.zero_grad();
        m.decoder.zero_grad();
        auto loss = nn::mse(sscc_decode(m, sscc_encode(m, x)), x);
        ad::backward(loss);
        nn::adam_step(m.encoder, opt);
        nn::adam_step(m.decoder, opt);
        return loss.scalar();
    });

    // phase 2: offset through the frozen decoder
    nn::OptimizerState opt2;
    opt2.lr = c.lr;
    run_epochs(c.offset_epochs, [&](const ad::Tensor& x) {
        std::vector<double> latent;
        {
            ad::NoGrad ng;
            latent = sscc_encode(m, x).value();
        }
        auto q = quantize(latent, c.quant);
        auto deq = dequantize(q.bits, c.quant);
        auto z = ad::Tensor::leaf({x.shape()[0], c.e_dim}, std::move(deq));
        m.offset.zero_grad();
        m.decoder.zero_grad();
        auto loss = nn::mse(sscc_decode(m, sscc_offset(m, z)), x);
        ad::backward(loss);
        nn::adam_step(m.offset, opt2);  // decoder gradients discarded: frozen
        return loss.scalar();
    });
    return log;
}

inline void save_sscc(const std::string& path, const SsccModels& m) {
    nn::ParameterSet merged;
    for (const auto& [k, t] : m.encoder.params) merged.add(k, t);
    for (const auto& [k, t] : m.decoder.params) merged.add(k, t);
    for (const auto& [k, t] : m.offset.params) merged.add(k, t);
    merged.metadata = {{"role", "sscc"},       {"e_dim", m.cfg.e_dim},   {"channels", m.cfg.channels},
                       {"height", m.cfg.height}, {"width", m.cfg.width}, {"quant_bits", m.cfg.quant.bits},
                       {"quant_clip", m.cfg.quant.clip}};
    nn::save_checkpoint(path, merged);
}

inline SsccModels load_sscc(const std::string& path) {
    auto merged = nn::load_checkpoint(path);
    config_require(merged.metadata.value("role", "") == "sscc", "load_sscc: not an sscc checkpoint: " + path);
    SsccModels m;
    m.cfg.e_dim = merged.metadata.at("e_dim").get<int>();
    m.cfg.channels = merged.metadata.at("channels").get<int>();
    m.cfg.height = merged.metadata.at("height").get<int>();
    m.cfg.width = merged.metadata.at("width").get<int>();
    m.cfg.quant.bits = merged.metadata.at("quant_bits").get<int>();
    m.cfg.quant.clip = merged.metadata.at("quant_clip").get<double>();
    for (auto& [k, t] : merged.params) {
        if (k.rfind("enc.", 0) == 0)
            m.encoder.add(k, t);
        else if (k.rfind("dec.", 0) == 0)
            m.decoder.add(k, t);
        else
            m.offset.add(k, t);
    }
    return m;
}

struct SsccCurvePoint {
    double snr_db = 0.0;
    double nmse_db = 0.0;
    double ber_pre_decoder = 0.0;   // coded-bit errors after demod
    double ber_post_decoder = 0.0;  // info-bit errors after Viterbi
    bool cliff_flag = false;        // set by detect_cliff for points below the cliff
};

struct CliffReport {
    bool has_cliff = false;
    double cliff_snr_db = 0.0;    // SNR of the grid point just above the jump
    double jump_db = 0.0;         // largest NMSE worsening across one grid step
    double flat_spread_db = 0.0;  // max-min NMSE above the cliff
};

// Scans a curve sorted by ascending SNR for the largest single-step NMSE
// worsening as SNR decreases, and measures flatness above that point.
inline CliffReport detect_cliff(std::vector<SsccCurvePoint>& curve, double jump_threshold_db = 10.0,
                                double flat_tolerance_db = 1.0) {
    CliffReport rep;
    if (curve.size() < 2) return rep;
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
        const double jump = curve[i].nmse_db - curve[i + 1].nmse_db;  // lower SNR minus higher SNR
        if (jump > rep.jump_db) {
            rep.jump_db = jump;
            best = i + 1;
        }
    }
    rep.cliff_snr_db = curve[best].snr_db;
    double lo = curve[best].nmse_db, hi = curve[best].nmse_db;
    for (std::size_t i = best; i < curve.size(); ++i) {
        lo = std::min(lo, curve[i].nmse_db);
        hi = std::max(hi, curve[i].nmse_db);
    }
    rep.flat_spread_db = hi - lo;
    rep.has_cliff = rep.jump_db > jump_threshold_db && rep.flat_spread_db <= flat_tolerance_db;
    for (std::size_t i = 0; i < curve.size(); ++i) curve[i].cliff_flag = rep.has_cliff && i < best;
    return rep;
}

// Full chain: encode -> quantize -> conv_encode -> qam_mod -> awgn ->
// qam_demod -> viterbi -> dequantize -> offset -> decode, per sample.
inline std::vector<SsccCurvePoint> sscc_eval(const SsccModels& m, const Dataset& ds,
                                             const ModemSpec& modem, const std::vector<double>& snr_grid,
                                             std::uint64_t seed) {
    config_require(!ds.samples.empty(), "sscc_eval: empty dataset");
    const auto& c = m.cfg;
    ad::NoGrad ng;

    // encode once; the latent is SNR-independent
    std::vector<std::vector<double>> views(ds.size()), latents(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        views[i] = to_real_view(ds.samples[i].h_da);
        auto x = nn::stack_views({&views[i]}, {2, c.height, c.width});
        latents[i] = sscc_encode(m, x).value();
    }

    std::vector<SsccCurvePoint> curve;
    for (double snr : snr_grid) {
        SsccCurvePoint pt;
        pt.snr_db = snr;
        std::size_t coded_errs = 0, coded_total = 0, info_errs = 0, info_total = 0;
        std::vector<std::vector<double>> recons(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) {
            auto q = quantize(latents[i], c.quant);
            auto coded = conv_encode(q.bits);
            const std::size_t coded_len = coded.size();
            while (coded.size() % static_cast<std::size_t>(modem.bits_per_symbol) != 0)
                coded.push_back(0);  // zero padding up to a whole symbol
            auto rx = qam_demod(awgn(qam_mod(coded, modem), snr,
                                     derive_seed(seed, {0xA36, static_cast<std::uint64_t>(i),
                                                        static_cast<std::uint64_t>(curve.size())})),
                                modem);
            for (std::size_t b = 0; b < coded_len; ++b) coded_errs += rx[b] != coded[b];
            coded_total += coded_len;
            rx.resize(coded_len);
            auto info = viterbi_decode(rx);
            for (std::size_t b = 0; b < info.size(); ++b) info_errs += info[b] != q.bits[b];
            info_total += info.size();
            auto deq = dequantize(info, c.quant);
            auto z = ad::Tensor::leaf({1, c.e_dim}, std::move(deq));
            recons[i] = sscc_decode(m, sscc_offset(m, z)).value();
        }
        pt.ber_pre_decoder = static_cast<double>(coded_errs) / static_cast<double>(coded_total);
        pt.ber_post_decoder = static_cast<double>(info_errs) / static_cast<double>(info_total);
        pt.nmse_db = nmse_db_real(views, recons).db;
        curve.push_back(pt);
    }
    return curve;
}

}  // namespace csifb
