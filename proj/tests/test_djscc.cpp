#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "csifb/djscc.hpp"
#include "csifb/feedback_chain.hpp"

using namespace csifb;

namespace {

Dataset small_dataset(std::size_t count, std::uint64_t seed, Split split) {
    ChannelSpec cs = ChannelSpec::indoor_like();
    cs.n_sub = 64;
    cs.n_tx = 8;
    cs.n_delay = 8;
    return generate_dataset(cs, count, seed, split);
}

DjsccArch small_arch(bool af) {
    DjsccArch a;
    a.height = 8;
    a.width = 8;
    a.n_symbols = 8;
    a.channels = 8;
    a.af_enabled = af;
    return a;
}

}  // namespace

TEST_CASE("encoder output has unit power per complex symbol") {
    Rng rng(1);
    auto m = make_djscc(small_arch(false), rng);
    Dataset ds = small_dataset(6, 3, Split::test);
    ad::NoGrad ng;
    for (const auto& s : ds.samples) {
        auto v = to_real_view(s.h_da);
        auto sym = djscc_encode(m, nn::stack_views({&v}, {2, 8, 8}));
        REQUIRE(sym.shape()[1] == 16);
        double p = 0.0;
        for (int i = 0; i < 8; ++i) {
            const double re = sym.value()[i], im = sym.value()[8 + i];
            (void)re;
            (void)im;
        }
        for (double x : sym.value()) p += x * x;
        REQUIRE_THAT(p / 8.0, Catch::Matchers::WithinAbs(1.0, 1e-6));  // mean |complex|^2
    }
}

TEST_CASE("encode and decode are deterministic, shapes hold, zero input safe") {
    Rng rng(2);
    auto m = make_djscc(small_arch(false), rng);
    std::vector<double> v(128, 0.1);
    ad::NoGrad ng;
    auto x = nn::stack_views({&v}, {2, 8, 8});
    auto s1 = djscc_encode(m, x);
    auto s2 = djscc_encode(m, x);
    REQUIRE(s1.value() == s2.value());

    auto zero_syms = ad::Tensor::zeros({1, 16});
    auto out = djscc_decode(m, zero_syms);
    REQUIRE(out.shape() == ad::Shape{1, 2, 8, 8});
    for (double y : out.value()) REQUIRE(std::isfinite(y));
}

TEST_CASE("AF module requires and uses the snr input") {
    Rng rng(3);
    auto m = make_djscc(small_arch(true), rng);
    std::vector<double> v(128);
    for (auto& x : v) x = 0.05 * static_cast<double>(rng.gauss());
    ad::NoGrad ng;
    auto x = nn::stack_views({&v}, {2, 8, 8});

    SECTION("missing snr raises when af is enabled") {
        REQUIRE_THROWS_AS(djscc_encode(m, x), ConfigError);
    }
    SECTION("different snr changes the encoding") {
        auto lo = djscc_encode(m, x, -10.0);
        auto hi = djscc_encode(m, x, 10.0);
        double d = 0.0;
        for (std::size_t i = 0; i < lo.size(); ++i) d += (lo.value()[i] - hi.value()[i]) * (lo.value()[i] - hi.value()[i]);
        REQUIRE(d > 0.0);
    }
}

TEST_CASE("af_apply contract") {
    Rng rng(4);
    nn::ParameterSet ps;
    detail::make_af(ps, "af", 4, rng);

    SECTION("zero weights scale all channels by one half") {
        for (auto& [k, t] : ps.params)
            for (auto& v : t.value()) v = 0.0;
        auto f = ad::Tensor::full({2, 4, 3, 3}, 2.0);
        auto out = af_apply(ps, "af", f, 5.0);
        for (double v : out.value()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    SECTION("scales stay below one: output magnitude never exceeds input") {
        std::vector<double> fv(2 * 4 * 9);
        for (auto& v : fv) v = rng.gauss();
        auto f = ad::Tensor::leaf({2, 4, 3, 3}, fv);
        auto out = af_apply(ps, "af", f, -3.0);
        for (std::size_t i = 0; i < fv.size(); ++i) REQUIRE(std::abs(out.value()[i]) <= std::abs(fv[i]) + 1e-15);
    }
    SECTION("non-finite snr rejected") {
        auto f = ad::Tensor::full({1, 4, 2, 2}, 1.0);
        REQUIRE_THROWS_AS(af_apply(ps, "af", f, std::numeric_limits<double>::infinity()), ConfigError);
    }
}

TEST_CASE("overhead parity with the digital chain") {
    DjsccArch a = small_arch(false);
    a.n_symbols = feedback_symbols(16, 2, 0.5, 4);
    REQUIRE(a.n_symbols == 16);
}

TEST_CASE("gradients flow through encode, channel, and decode") {
    Rng rng(5);
    DjsccArch a;
    a.height = 4;
    a.width = 4;
    a.n_symbols = 4;
    a.channels = 4;
    a.af_enabled = true;
    auto m = make_djscc(a, rng);
    std::vector<double> v(32);
    for (auto& x : v) x = rng.gauss();
    auto x = nn::stack_views({&v}, {2, 4, 4});

    nn::ParameterSet all;
    for (auto& [k, t] : m.enc.params) all.add(k, t);
    for (auto& [k, t] : m.dec.params) all.add(k, t);

    Rng noise(77);
    std::vector<double> nv(8);
    for (auto& n : nv) n = 0.3 * noise.gauss();

    auto loss_fn = [&]() {
        auto sym = djscc_encode(m, x, 2.0);
        auto rx = ad::add(sym, ad::Tensor::leaf({1, 8}, nv));  // noise fixed per check
        return nn::mse(djscc_decode(m, rx, 2.0), x);
    };
    auto rep = nn::grad_check(loss_fn, all, 1e-5, 50);
    INFO("worst " << rep.worst_param << " err " << rep.max_rel_err);
    REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("training at infinite snr reduces the loss") {
    Rng rng(6);
    auto m = make_djscc(small_arch(false), rng);
    Dataset ds = small_dataset(96, 9, Split::train);
    DjsccTrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch = 32;
    auto log = train_e2e(m, ds, SnrSpec::fixed(std::numeric_limits<double>::infinity()), cfg, 10);
    REQUIRE(log.epoch_loss.back() < log.epoch_loss.front());
}

TEST_CASE("eval_curve: s2s point equals the s2m curve at the same snr") {
    Rng rng(7);
    auto m = make_djscc(small_arch(false), rng);
    Dataset ds = small_dataset(24, 11, Split::test);
    auto multi = eval_curve(m, ds, {-4.0, 0.0, 4.0}, 21);
    // same grid index for the 0 dB point reproduces the same noise stream
    auto single = eval_curve(m, ds, {-4.0, 0.0}, 21);
    REQUIRE(multi[1].nmse_db == single[1].nmse_db);
    REQUIRE(multi.size() == 3);
}

TEST_CASE("adjscc scale vectors differ across snr after training") {
    Rng rng(8);
    auto m = make_djscc(small_arch(true), rng);
    Dataset ds = small_dataset(64, 13, Split::train);
    DjsccTrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 32;
    train_e2e(m, ds, SnrSpec::uniform(-10.0, 10.0), cfg, 14);

    ad::NoGrad ng;
    auto v = to_real_view(ds.samples[0].h_da);
    auto x = nn::stack_views({&v}, {2, 8, 8});
    auto t = ad::leaky_relu(nn::conv(m.enc, "enc.t1", x));
    auto pool = ad::global_average_pool(t);
    auto scale_at = [&](double snr) {
        auto snr_col = ad::Tensor::full({1, 1}, snr / 20.0);
        auto h = ad::leaky_relu(nn::dense(m.enc, "enc.af_t1.fc1", ad::concat_cols({pool, snr_col})));
        return ad::sigmoid(nn::dense(m.enc, "enc.af_t1.fc2", h));
    };
    auto lo = scale_at(-10.0), hi = scale_at(10.0);
    double dist = 0.0;
    for (std::size_t i = 0; i < lo.size(); ++i) dist += (lo.value()[i] - hi.value()[i]) * (lo.value()[i] - hi.value()[i]);
    REQUIRE(std::sqrt(dist) > 0.0);
}
