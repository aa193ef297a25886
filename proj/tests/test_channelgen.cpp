#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "csifb/channelgen.hpp"

using namespace csifb;

namespace {

CMat random_cmat(int rows, int cols, Rng& rng) {
    CMat m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = rng.cgauss();
    return m;
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("to_delay_angle is unitary and invertible") {
    Rng rng(11);
    CMat h = random_cmat(64, 16, rng);

    SECTION("zero maps to zero") {
        CMat z = CMat::Zero(64, 16);
        REQUIRE(to_delay_angle(z).norm() == 0.0);
    }
    SECTION("Frobenius norm preserved") {
        CMat hd = to_delay_angle(h);
        REQUIRE_THAT(hd.norm(), Catch::Matchers::WithinRel(h.norm(), 1e-12));
    }
    SECTION("round trip") {
        CMat back = from_delay_angle(to_delay_angle(h));
        REQUIRE((back - h).norm() / h.norm() < 1e-12);
    }
}

TEST_CASE("truncate and zero_append") {
    Rng rng(5);
    ChannelSpec spec;
    spec.n_sub = 32;
    spec.n_delay = 8;
    spec.n_tx = 4;

    SECTION("zero_append rows are exactly zero") {
        CMat t = random_cmat(8, 4, rng);
        CMat full = zero_append(t, 32);
        REQUIRE(full.bottomRows(24).norm() == 0.0);
        REQUIRE((full.topRows(8) - t).norm() == 0.0);
    }
    SECTION("round trip when support is contained") {
        CMat x = CMat::Zero(32, 4);
        x.topRows(8) = random_cmat(8, 4, rng);
        CMat back = zero_append(truncate_delay(x, 8), 32);
        REQUIRE((back - x).norm() == 0.0);
    }
}

TEST_CASE("generate_dataset is deterministic down to serialized bytes") {
    ChannelSpec spec = ChannelSpec::indoor_like();
    spec.n_sub = 64;
    spec.n_tx = 8;
    spec.n_delay = 16;

    Dataset a = generate_dataset(spec, 20, 7, Split::train);
    Dataset b = generate_dataset(spec, 20, 7, Split::train);

    const char* pa = "cg_det_a.bin";
    const char* pb = "cg_det_b.bin";
    save_dataset(pa, a);
    save_dataset(pb, b);
    REQUIRE(file_bytes(pa) == file_bytes(pb));
    std::remove(pa);
    std::remove(pb);

    Dataset c = generate_dataset(spec, 20, 8, Split::train);
    REQUIRE((c.samples[0].h_da - a.samples[0].h_da).norm() > 0.0);
}

TEST_CASE("splits draw disjoint streams") {
    ChannelSpec spec = ChannelSpec::indoor_like();
    spec.n_sub = 64;
    spec.n_tx = 8;
    spec.n_delay = 16;
    Dataset tr = generate_dataset(spec, 4, 7, Split::train);
    Dataset te = generate_dataset(spec, 4, 7, Split::test);
    for (std::size_t i = 0; i < 4; ++i)
        REQUIRE((tr.samples[i].h_da * tr.norm_scale - te.samples[i].h_da * te.norm_scale).norm() > 0.0);
}

TEST_CASE("empty dataset has valid metadata") {
    ChannelSpec spec = ChannelSpec::indoor_like();
    Dataset ds = generate_dataset(spec, 0, 3, Split::val);
    REQUIRE(ds.samples.empty());
    REQUIRE(ds.norm_scale == 1.0);
    REQUIRE(ds.split == Split::val);
    REQUIRE(ds.seed == 3);
}

TEST_CASE("invalid spec is rejected") {
    ChannelSpec spec;
    spec.n_delay = spec.n_sub + 1;
    REQUIRE_THROWS_AS(generate_dataset(spec, 1, 0, Split::train), ConfigError);
    ChannelSpec spec2;
    spec2.n_paths = 0;
    REQUIRE_THROWS_AS(generate_dataset(spec2, 1, 0, Split::train), ConfigError);
    ChannelSpec spec3;
    spec3.delay_spread = 0.0;
    REQUIRE_THROWS_AS(generate_dataset(spec3, 1, 0, Split::train), ConfigError);
}

TEST_CASE("single path at zero delay and broadside concentrates in one bin") {
    // Analytic check: constant phasor in both axes lands all energy in (0,0).
    ChannelSpec spec;
    spec.n_paths = 1;
    spec.n_sub = 64;
    spec.n_tx = 8;
    spec.n_delay = 16;

    CMat h_sf = CMat::Ones(spec.n_sub, spec.n_tx);  // zero delay, broadside steering
    CMat h_da = to_delay_angle(h_sf);
    const double total = h_da.squaredNorm();
    const double peak = std::norm(h_da(0, 0));
    REQUIRE(peak / total >= 0.95);
}

TEST_CASE("dataset normalization pins max component to one") {
    ChannelSpec spec = ChannelSpec::indoor_like();
    spec.n_sub = 64;
    spec.n_tx = 8;
    spec.n_delay = 16;
    Dataset ds = generate_dataset(spec, 50, 42, Split::train);

    double max_abs = 0.0;
    for (const auto& s : ds.samples)
        for (int r = 0; r < s.h_da.rows(); ++r)
            for (int c = 0; c < s.h_da.cols(); ++c) {
                max_abs = std::max(max_abs, std::abs(s.h_da(r, c).real()));
                max_abs = std::max(max_abs, std::abs(s.h_da(r, c).imag()));
            }
    REQUIRE_THAT(max_abs, Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE(ds.norm_scale > 0.0);
}

TEST_CASE("indoor truncation keeps at least 90 percent of energy") {
    ChannelSpec spec = ChannelSpec::indoor_like();
    std::size_t count = 30;
    double ratio_sum = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(123, {0, i}));
        CMat h_sf = csifb::detail::draw_channel_sf(spec, rng);
        CMat full = to_delay_angle(h_sf);
        CMat trunc = truncate_delay(full, spec.n_delay);
        ratio_sum += trunc.squaredNorm() / full.squaredNorm();
    }
    REQUIRE(ratio_sum / static_cast<double>(count) >= 0.90);
}

TEST_CASE("uma_like spreads energy over more delay bins than indoor_like") {
    auto mean_occupied = [](const ChannelSpec& spec) {
        double acc = 0.0;
        for (std::size_t i = 0; i < 20; ++i) {
            Rng rng(derive_seed(99, {1, i}));
            CMat h_da = truncate_delay(to_delay_angle(csifb::detail::draw_channel_sf(spec, rng)), spec.n_delay);
            const double total = h_da.squaredNorm();
            Eigen::VectorXd row_e = h_da.rowwise().squaredNorm();
            int occupied = 0;
            for (int r = 0; r < row_e.size(); ++r)
                if (row_e(r) > 0.01 * total) occupied += 1;
            acc += occupied;
        }
        return acc / 20.0;
    };
    REQUIRE(mean_occupied(ChannelSpec::uma_like()) > mean_occupied(ChannelSpec::indoor_like()));
}

TEST_CASE("nmse_db definition and edge cases") {
    Rng rng(17);
    CMat h = random_cmat(16, 8, rng);

    SECTION("identical inputs clamp at the sentinel minimum") {
        auto r = nmse_db({h}, {h});
        REQUIRE(r.db == -300.0);
    }
    SECTION("zero estimate gives 0 dB") {
        auto r = nmse_db({h}, {CMat::Zero(16, 8)});
        REQUIRE_THAT(r.db, Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
    SECTION("scale law is exact") {
        auto r = nmse_db({h}, {CMat(1.1 * h)});
        REQUIRE_THAT(r.db, Catch::Matchers::WithinAbs(-20.0, 1e-9));
        for (double eps : {0.5, 0.01, 1e-4}) {
            auto s = nmse_db({h}, {CMat((1.0 + eps) * h)});
            REQUIRE_THAT(s.db, Catch::Matchers::WithinAbs(20.0 * std::log10(eps), 1e-9));
        }
    }
    SECTION("zero-reference samples are excluded and counted") {
        auto r = nmse_db({h, CMat::Zero(16, 8)}, {CMat::Zero(16, 8), h});
        REQUIRE(r.excluded == 1);
        REQUIRE(r.used == 1);
        REQUIRE_THAT(r.db, Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
}

TEST_CASE("real view round trip") {
    Rng rng(23);
    CMat h = random_cmat(8, 4, rng);
    auto v = to_real_view(h);
    REQUIRE(v.size() == 64);
    CMat back = from_real_view(v, 8, 4);
    REQUIRE((back - h).norm() == 0.0);
}

TEST_CASE("dataset file round trip preserves content and bytes") {
    ChannelSpec spec = ChannelSpec::indoor_like();
    spec.n_sub = 64;
    spec.n_tx = 8;
    spec.n_delay = 16;
    Dataset ds = generate_dataset(spec, 10, 5, Split::test, /*keep_sf=*/true);

    const char* p1 = "cg_rt_1.bin";
    const char* p2 = "cg_rt_2.bin";
    save_dataset(p1, ds);
    Dataset back = load_dataset(p1);
    REQUIRE(back.size() == ds.size());
    REQUIRE(back.spec.n_tx == spec.n_tx);
    REQUIRE(back.has_sf);
    REQUIRE(back.norm_scale == ds.norm_scale);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        REQUIRE((back.samples[i].h_da - ds.samples[i].h_da).norm() < 1e-6 * ds.samples[i].h_da.norm());
        REQUIRE((back.samples[i].h_sf - ds.samples[i].h_sf).norm() < 1e-6 * ds.samples[i].h_sf.norm());
    }
    save_dataset(p2, back);
    REQUIRE(file_bytes(p1) == file_bytes(p2));  // f32 re-serialization is exact
    std::remove(p1);
    std::remove(p2);
}
