#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cmath>

#include "csifb/feedback_chain.hpp"

using namespace csifb;

namespace {

double q_func(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

// Exhaustive hard-ML reference: minimum Hamming distance over all codewords.
struct CodeTable {
    std::vector<std::uint32_t> codewords;  // packed, one per info word
    int coded_bits;

    explicit CodeTable(int len) {
        coded_bits = 2 * (len + 2);
        codewords.resize(1u << len);
        for (std::uint32_t w = 0; w < codewords.size(); ++w) {
            std::vector<std::uint8_t> info(len);
            for (int b = 0; b < len; ++b) info[b] = (w >> b) & 1;
            auto coded = conv_encode(info);
            std::uint32_t packed = 0;
            for (std::size_t i = 0; i < coded.size(); ++i) packed |= static_cast<std::uint32_t>(coded[i]) << i;
            codewords[w] = packed;
        }
    }

    int min_distance(std::uint32_t received) const {
        int best = 64;
        for (auto cw : codewords) best = std::min(best, std::popcount(cw ^ received));
        return best;
    }
};

std::uint32_t pack_bits(const std::vector<std::uint8_t>& bits) {
    std::uint32_t p = 0;
    for (std::size_t i = 0; i < bits.size(); ++i) p |= static_cast<std::uint32_t>(bits[i]) << i;
    return p;
}

}  // namespace

TEST_CASE("quantizer mapping and idempotence") {
    QuantizerSpec q1{1, 1.0};
    SECTION("two-level midrise") {
        auto r = quantize({0.3}, q1);
        REQUIRE(dequantize(r.bits, q1)[0] == 0.5);
        auto r2 = quantize({-0.01}, q1);
        REQUIRE(dequantize(r2.bits, q1)[0] == -0.5);
    }
    SECTION("four levels at +-0.25 and +-0.75") {
        QuantizerSpec q2{2, 1.0};
        auto r = quantize({-0.8}, q2);
        REQUIRE(dequantize(r.bits, q2)[0] == -0.75);
        auto names = quantize({-0.9, -0.3, 0.3, 0.9}, q2);
        auto v = dequantize(names.bits, q2);
        REQUIRE(v == std::vector<double>{-0.75, -0.25, 0.25, 0.75});
    }
    SECTION("grid midpoints round-trip exactly") {
        for (int bits = 1; bits <= 4; ++bits) {
            QuantizerSpec q{bits, 1.0};
            for (int i = 0; i < q.levels(); ++i) {
                const double mid = -1.0 + (i + 0.5) * q.step();
                auto r = quantize({mid}, q);
                REQUIRE(dequantize(r.bits, q)[0] == mid);
            }
        }
    }
    SECTION("quantization error bound and clip counting") {
        QuantizerSpec q{3, 1.0};
        Rng rng(12);
        std::vector<double> v(500);
        for (auto& x : v) x = rng.uniform(-1.0, 1.0);
        auto r = quantize(v, q);
        REQUIRE(r.clipped == 0);
        auto back = dequantize(r.bits, q);
        for (std::size_t i = 0; i < v.size(); ++i)
            REQUIRE(std::abs(back[i] - v[i]) <= 1.0 / (1 << 3) + 1e-12);
        auto c = quantize({1.5, -2.0, 0.1}, q);
        REQUIRE(c.clipped == 2);
    }
    SECTION("monotone mapping") {
        QuantizerSpec q{2, 1.0};
        double prev = -10;
        for (double x = -1.2; x <= 1.2; x += 0.01) {
            auto r = quantize({x}, q);
            double d = dequantize(r.bits, q)[0];
            REQUIRE(d >= prev);
            prev = d;
        }
    }
}

TEST_CASE("convolutional encoder") {
    SECTION("all-zero input gives all-zero codeword of length 2(L+2)") {
        std::vector<std::uint8_t> z(8, 0);
        auto out = conv_encode(z);
        REQUIRE(out.size() == 20);
        for (auto b : out) REQUIRE(b == 0);
    }
    SECTION("hand-traced shift register for 1,0,1,1") {
        // G=(7,5), zero tail: state walk gives 11 10 00 01 01 11
        auto out = conv_encode({1, 0, 1, 1});
        REQUIRE(out == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 0, 1, 0, 1, 1, 1});
    }
}

TEST_CASE("viterbi round-trips all length-10 blocks and corrects single errors") {
    const int len = 10;
    for (std::uint32_t w = 0; w < (1u << len); ++w) {
        std::vector<std::uint8_t> info(len);
        for (int b = 0; b < len; ++b) info[b] = (w >> b) & 1;
        auto coded = conv_encode(info);
        REQUIRE(viterbi_decode(coded) == info);
        if (w % 8 == 0) {  // every coded position, on a sample of words
            for (std::size_t flip = 0; flip < coded.size(); ++flip) {
                auto corrupted = coded;
                corrupted[flip] ^= 1;
                REQUIRE(viterbi_decode(corrupted) == info);
            }
        }
    }
}

TEST_CASE("viterbi equals exhaustive ML for all blocks up to 12 info bits") {
    Rng rng(77);
    for (int len = 1; len <= 12; ++len) {
        CodeTable table(len);
        const std::uint32_t words = 1u << len;
        for (std::uint32_t w = 0; w < words; ++w) {
            std::vector<std::uint8_t> info(len);
            for (int b = 0; b < len; ++b) info[b] = (w >> b) & 1;
            auto coded = conv_encode(info);
            for (int trial = 0; trial < 2; ++trial) {
                auto rx = coded;
                if (trial > 0)
                    for (auto& b : rx)
                        if (rng.uniform() < 0.12) b ^= 1;
                auto decoded = viterbi_decode(rx);
                auto recoded = conv_encode(decoded);
                const int vit_dist = std::popcount(pack_bits(recoded) ^ pack_bits(rx));
                REQUIRE(vit_dist == table.min_distance(pack_bits(rx)));
            }
        }
    }
}

TEST_CASE("viterbi input validation") {
    REQUIRE_THROWS_AS(viterbi_decode({1, 0, 1}), ShapeError);
    REQUIRE_THROWS_AS(conv_encode({}), ShapeError);
}

TEST_CASE("QAM constellations") {
    SECTION("4-QAM points are (+-1 +- j)/sqrt(2) with unit mean power") {
        ModemSpec m{2};
        auto syms = qam_mod({0, 0, 0, 1, 1, 0, 1, 1}, m);
        const double a = 1.0 / std::numbers::sqrt2;
        REQUIRE(syms[0] == cplx(a, a));
        REQUIRE(syms[1] == cplx(a, -a));
        REQUIRE(syms[2] == cplx(-a, a));
        REQUIRE(syms[3] == cplx(-a, -a));
        double p = 0;
        for (auto s : syms) p += std::norm(s);
        REQUIRE_THAT(p / 4.0, Catch::Matchers::WithinAbs(1.0, 1e-15));
    }
    SECTION("16-QAM unit mean power and Gray neighbors") {
        ModemSpec m{4};
        double p = 0;
        for (unsigned w = 0; w < 16; ++w) {
            std::vector<std::uint8_t> bits{static_cast<std::uint8_t>((w >> 3) & 1), static_cast<std::uint8_t>((w >> 2) & 1),
                                           static_cast<std::uint8_t>((w >> 1) & 1), static_cast<std::uint8_t>(w & 1)};
            p += std::norm(qam_mod(bits, m)[0]);
        }
        REQUIRE_THAT(p / 16.0, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    SECTION("noiseless round trip") {
        Rng rng(3);
        for (int q : {2, 4}) {
            ModemSpec m{q};
            std::vector<std::uint8_t> bits(240);
            for (auto& b : bits) b = rng.next_u64() & 1;
            REQUIRE(qam_demod(qam_mod(bits, m), m) == bits);
        }
    }
    SECTION("indivisible bit count rejected") {
        ModemSpec m{4};
        REQUIRE_THROWS_AS(qam_mod({1, 0, 1}, m), ShapeError);
    }
    SECTION("demod matches brute-force nearest neighbor with index tie-break") {
        Rng rng(9);
        for (int q : {2, 4}) {
            ModemSpec m{q};
            // all constellation points, by index
            std::vector<cplx> points(1u << q);
            for (unsigned w = 0; w < points.size(); ++w) {
                std::vector<std::uint8_t> bits(q);
                for (int b = 0; b < q; ++b) bits[b] = (w >> (q - 1 - b)) & 1;
                points[w] = qam_mod(bits, m)[0];
            }
            auto brute = [&](cplx r) {
                unsigned best = 0;
                double bd = 1e300;
                for (unsigned w = 0; w < points.size(); ++w) {
                    const double d = std::norm(r - points[w]);
                    if (d < bd - 1e-15) {
                        bd = d;
                        best = w;
                    }
                }
                return best;
            };
            for (int t = 0; t < 2000; ++t) {
                cplx r(2.5 * (rng.uniform() - 0.5), 2.5 * (rng.uniform() - 0.5));
                auto bits = qam_demod({r}, m);
                unsigned got = 0;
                for (int b = 0; b < q; ++b) got = (got << 1) | bits[b];
                REQUIRE(got == brute(r));
            }
        }
    }
}

TEST_CASE("awgn channel statistics and determinism") {
    SECTION("+inf SNR is identity") {
        std::vector<cplx> s{{1, 2}, {-0.5, 0.25}};
        auto out = awgn(s, std::numeric_limits<double>::infinity(), 5);
        REQUIRE(out == s);
    }
    SECTION("same seed gives identical noise") {
        std::vector<cplx> s(64, cplx(1.0, 0.0));
        REQUIRE(awgn(s, 3.0, 42) == awgn(s, 3.0, 42));
        REQUIRE(awgn(s, 3.0, 42) != awgn(s, 3.0, 43));
    }
    SECTION("empirical SNR within 0.1 dB of nominal") {
        const std::size_t n = 1000000;
        std::vector<cplx> s(n, cplx(1.0, 0.0));
        for (double snr : {0.0, 10.0}) {
            auto out = awgn(s, snr, 7);
            double noise_p = 0.0;
            for (std::size_t i = 0; i < n; ++i) noise_p += std::norm(out[i] - s[i]);
            noise_p /= static_cast<double>(n);
            const double measured = -10.0 * std::log10(noise_p);
            REQUIRE(std::abs(measured - snr) < 0.1);
        }
    }
}

TEST_CASE("uncoded 4-QAM BER at 10 dB matches the Q-function") {
    const std::size_t nbits = 1000000;
    Rng rng(11);
    std::vector<std::uint8_t> bits(nbits);
    for (auto& b : bits) b = rng.next_u64() & 1;
    ModemSpec m{2};
    auto rx = qam_demod(awgn(qam_mod(bits, m), 10.0, 21), m);
    std::size_t errs = 0;
    for (std::size_t i = 0; i < nbits; ++i) errs += rx[i] != bits[i];
    const double ber = static_cast<double>(errs) / static_cast<double>(nbits);
    const double ref = q_func(std::sqrt(10.0));
    REQUIRE(std::abs(ber - ref) / ref < 0.10);
}

TEST_CASE("coded BER at infinite SNR is exactly zero") {
    Rng rng(4);
    std::vector<std::uint8_t> info(2048);
    for (auto& b : info) b = rng.next_u64() & 1;
    auto coded = conv_encode(info);
    ModemSpec m{2};
    auto rx = qam_demod(awgn(qam_mod(coded, m), std::numeric_limits<double>::infinity(), 1), m);
    REQUIRE(viterbi_decode(rx) == info);
}

TEST_CASE("feedback symbol accounting reproduces the headline arithmetic") {
    REQUIRE(feedback_symbols(16, 2, 0.5, 4) == 16);
    REQUIRE(feedback_symbols(16, 2, 1.0, 2) == 16);
    REQUIRE(feedback_symbols(32, 2, 0.5, 4) == 32);
    REQUIRE(feedback_symbols(16, 2, 0.5, 4, /*include_tail=*/true) == 17);
    REQUIRE_THROWS_AS(feedback_symbols(0, 2, 0.5, 4), ConfigError);
}

TEST_CASE("sscc training sanity on a tiny dataset") {
    ChannelSpec cs = ChannelSpec::indoor_like();
    cs.n_sub = 64;
    cs.n_tx = 8;
    cs.n_delay = 8;
    Dataset ds = generate_dataset(cs, 96, 31, Split::train);

    SsccModels m;
    m.cfg.e_dim = 8;
    m.cfg.channels = 8;
    m.cfg.height = 8;
    m.cfg.width = 8;
    m.cfg.epochs = 6;
    m.cfg.offset_epochs = 3;
    m.cfg.batch = 32;
    Rng rng(derive_seed(1234, {1}));
    sscc_init(m, rng);
    auto log = sscc_train(m, ds, 99);

    REQUIRE(log.epoch_loss.size() == 9);
    REQUIRE(log.epoch_loss[5] < log.epoch_loss[0]);  // autoencoder loss decreases

    // encoder output stays inside the quantizer clip range (tanh contract)
    ad::NoGrad ng;
    auto view = to_real_view(ds.samples[0].h_da);
    auto e = sscc_encode(m, nn::stack_views({&view}, {2, 8, 8}));
    for (double v : e.value()) {
        REQUIRE(v <= 1.0);
        REQUIRE(v >= -1.0);
    }
}

TEST_CASE("sscc eval at infinite SNR equals the quantized no-channel path") {
    ChannelSpec cs = ChannelSpec::indoor_like();
    cs.n_sub = 64;
    cs.n_tx = 8;
    cs.n_delay = 8;
    Dataset ds = generate_dataset(cs, 32, 5, Split::test);

    SsccModels m;
    m.cfg.e_dim = 8;
    m.cfg.channels = 8;
    m.cfg.height = 8;
    m.cfg.width = 8;
    m.cfg.epochs = 2;
    m.cfg.offset_epochs = 1;
    Rng rng(derive_seed(77, {1}));
    sscc_init(m, rng);
    sscc_train(m, ds, 3);

    ModemSpec modem{4};
    auto curve = sscc_eval(m, ds, modem, {std::numeric_limits<double>::infinity()}, 11);
    REQUIRE(curve.size() == 1);
    REQUIRE(curve[0].ber_pre_decoder == 0.0);
    REQUIRE(curve[0].ber_post_decoder == 0.0);

    // reference: quantize/dequantize with no channel in between
    ad::NoGrad ng;
    std::vector<std::vector<double>> views(ds.size()), recons(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        views[i] = to_real_view(ds.samples[i].h_da);
        auto x = nn::stack_views({&views[i]}, {2, 8, 8});
        auto q = quantize(sscc_encode(m, x).value(), m.cfg.quant);
        auto z = ad::Tensor::leaf({1, 8}, dequantize(q.bits, m.cfg.quant));
        recons[i] = sscc_decode(m, sscc_offset(m, z)).value();
    }
    REQUIRE_THAT(curve[0].nmse_db, Catch::Matchers::WithinAbs(nmse_db_real(views, recons).db, 1e-9));
}
