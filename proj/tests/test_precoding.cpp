#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "csifb/precoding.hpp"

using namespace csifb;

namespace {

CMat random_channel(int rows, int cols, Rng& rng) {
    CMat h(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) h(r, c) = rng.cgauss();
    return h;
}

// 1-D grid search over the water level; independent of the bisection code.
std::vector<double> waterfill_grid_oracle(const std::vector<double>& gains, double p_total,
                                          double noise) {
    double best_mu = 0.0, best_err = 1e300;
    for (double mu = 1e-6; mu <= noise / *std::min_element(gains.begin(), gains.end()) + p_total + 1.0;
         mu += 1e-6) {
        double s = 0.0;
        for (double g : gains) s += std::max(0.0, mu - noise / g);
        const double err = std::abs(s - p_total);
        if (err < best_err) {
            best_err = err;
            best_mu = mu;
        }
        if (s > p_total + 1.0) break;
    }
    std::vector<double> p(gains.size());
    for (std::size_t i = 0; i < gains.size(); ++i) p[i] = std::max(0.0, best_mu - noise / gains[i]);
    return p;
}

}  // namespace

TEST_CASE("eigen_preprocess") {
    SECTION("identity channel has unit eigenvalues") {
        auto rep = eigen_preprocess(CMat::Identity(4, 4), 2);
        for (int i = 0; i < 4; ++i) REQUIRE_THAT(rep.eigvals(i), Catch::Matchers::WithinAbs(1.0, 1e-12));
        REQUIRE_THAT((rep.eigvecs.adjoint() * rep.eigvecs - CMat::Identity(2, 2)).norm(),
                     Catch::Matchers::WithinAbs(0.0, 1e-10));
    }
    SECTION("2x2 eigenvalues match the characteristic polynomial") {
        Rng rng(3);
        for (int t = 0; t < 25; ++t) {
            CMat h = random_channel(2, 2, rng);
            CMat g = h.adjoint() * h;
            const double tr = g.trace().real();
            const double det = (g(0, 0) * g(1, 1) - g(0, 1) * g(1, 0)).real();
            const double disc = std::sqrt(std::max(tr * tr / 4.0 - det, 0.0));
            auto rep = eigen_preprocess(h, 2);
            REQUIRE_THAT(rep.eigvals(0), Catch::Matchers::WithinAbs(tr / 2.0 + disc, 1e-10));
            REQUIRE_THAT(rep.eigvals(1), Catch::Matchers::WithinAbs(tr / 2.0 - disc, 1e-10));
        }
    }
    SECTION("orthonormality, eigen equation, and deterministic phase") {
        Rng rng(5);
        for (int t = 0; t < 20; ++t) {
            CMat h = random_channel(2, 6, rng);
            auto rep = eigen_preprocess(h, 2);
            REQUIRE((rep.eigvecs.adjoint() * rep.eigvecs - CMat::Identity(2, 2)).norm() < 1e-10);
            CMat g = h.adjoint() * h;
            for (int i = 0; i < 2; ++i) {
                const double resid =
                    (g * rep.eigvecs.col(i) - rep.eigvals(i) * rep.eigvecs.col(i)).norm();
                REQUIRE(resid < 1e-8 * std::max(1.0, rep.eigvals(0)));
            }
            // descending, non-negative, phase-fixed leading entry
            REQUIRE(rep.eigvals(0) >= rep.eigvals(1));
            REQUIRE(rep.eigvals(static_cast<int>(h.cols()) - 1) >= 0.0);
            REQUIRE(rep.eigvecs(0, 0).imag() == Catch::Approx(0.0).margin(1e-12));
            REQUIRE(rep.eigvecs(0, 0).real() >= 0.0);
        }
    }
    SECTION("non-finite input rejected") {
        CMat h = CMat::Zero(2, 2);
        h(0, 0) = cplx(std::numeric_limits<double>::quiet_NaN(), 0);
        REQUIRE_THROWS_AS(eigen_preprocess(h), ShapeError);
    }
}

TEST_CASE("waterfill") {
    SECTION("equal gains split evenly") {
        auto p = waterfill({2.0, 2.0, 2.0, 2.0}, 1.0, 0.1);
        for (double v : p) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.25, 1e-12));
    }
    SECTION("single channel takes everything") {
        auto p = waterfill({0.7}, 2.5, 0.3);
        REQUIRE_THAT(p[0], Catch::Matchers::WithinAbs(2.5, 1e-12));
    }
    SECTION("hand KKT solve for (1.0, 0.25)") {
        auto p = waterfill({1.0, 0.25}, 1.0, 0.1);
        REQUIRE_THAT(p[0], Catch::Matchers::WithinAbs(0.65, 1e-9));
        REQUIRE_THAT(p[1], Catch::Matchers::WithinAbs(0.35, 1e-9));
    }
    SECTION("matches the mu grid search within 1e-6") {
        Rng rng(9);
        for (int t = 0; t < 5; ++t) {
            std::vector<double> gains(4);
            for (auto& g : gains) g = rng.uniform(0.05, 2.0);
            auto p = waterfill(gains, 1.0, 0.1);
            auto ref = waterfill_grid_oracle(gains, 1.0, 0.1);
            for (std::size_t i = 0; i < gains.size(); ++i)
                REQUIRE_THAT(p[i], Catch::Matchers::WithinAbs(ref[i], 1e-5));
        }
    }
    SECTION("KKT consistency: budget exact, inactive channels below water level") {
        Rng rng(11);
        for (int t = 0; t < 30; ++t) {
            std::vector<double> gains(5);
            for (auto& g : gains) g = rng.uniform(0.01, 3.0);
            const double P = rng.uniform(0.5, 4.0);
            auto p = waterfill(gains, P, 0.2);
            double sum = 0.0, mu_active = -1.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                sum += p[i];
                if (p[i] > 0) mu_active = std::max(mu_active, p[i] + 0.2 / gains[i]);
            }
            REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(P, 1e-12));
            for (std::size_t i = 0; i < p.size(); ++i) {
                if (p[i] > 1e-12)
                    REQUIRE_THAT(p[i] + 0.2 / gains[i], Catch::Matchers::WithinAbs(mu_active, 1e-9));
                else
                    REQUIRE(0.2 / gains[i] >= mu_active - 1e-9);
            }
        }
    }
    SECTION("all-zero and negative gains rejected") {
        REQUIRE_THROWS_AS(waterfill({0.0, 0.0}, 1.0, 0.1), ConfigError);
        REQUIRE_THROWS_AS(waterfill({}, 1.0, 0.1), ConfigError);
    }
}

TEST_CASE("bd_precode") {
    SceneSpec spec;

    SECTION("single user reduces to eigen-beamforming with waterfill") {
        Rng rng(21);
        MultiuserScene sc;
        sc.k_users = 1;
        sc.n_tx = 4;
        sc.n_rx = 2;
        sc.h = {random_channel(2, 4, rng)};
        auto sol = bd_precode(sc);
        auto rep = eigen_preprocess(sc.h[0], 2);
        std::vector<double> gains;
        for (int i = 0; i < 2; ++i)
            if (rep.eigvals(i) > 1e-12) gains.push_back(rep.eigvals(i));
        auto p = waterfill(gains, sc.total_power, sc.noise_power);
        double se = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (p[i] > 0) se += std::log2(1.0 + p[i] * gains[i] / sc.noise_power);
        REQUIRE_THAT(sol.sum_se, Catch::Matchers::WithinAbs(se, 1e-9));
    }

    SECTION("zero inter-user leakage and exact power budget over random scenes") {
        for (int t = 0; t < 100; ++t) {
            Rng rng(derive_seed(300, {static_cast<std::uint64_t>(t)}));
            auto sc = make_scene(spec, rng);
            auto sol = bd_precode(sc);
            double total_p = 0.0;
            for (int k = 0; k < sc.k_users; ++k) {
                total_p += sol.w[static_cast<std::size_t>(k)].squaredNorm();
                for (int j = 0; j < sc.k_users; ++j) {
                    if (j == k) continue;
                    REQUIRE((sc.h[static_cast<std::size_t>(j)] * sol.w[static_cast<std::size_t>(k)]).norm() < 1e-9);
                }
            }
            REQUIRE_THAT(total_p, Catch::Matchers::WithinAbs(sc.total_power, 1e-9));
        }
    }

    SECTION("general mmse SE equals the interference-free decomposition") {
        for (int t = 0; t < 20; ++t) {
            Rng rng(derive_seed(400, {static_cast<std::uint64_t>(t)}));
            auto sc = make_scene(spec, rng);
            auto sol = bd_precode(sc);
            REQUIRE_THAT(sum_se(sc, sol.w, ReceiveModel::mmse), Catch::Matchers::WithinAbs(sol.sum_se, 1e-9));
        }
    }

    SECTION("infeasible dimensions produce a named error") {
        Rng rng(31);
        MultiuserScene sc;
        sc.k_users = 3;
        sc.n_tx = 4;
        sc.n_rx = 2;
        sc.h = {random_channel(2, 4, rng), random_channel(2, 4, rng), random_channel(2, 4, rng)};
        REQUIRE_THROWS_WITH(bd_precode(sc), Catch::Matchers::ContainsSubstring("n_tx"));
    }
}

TEST_CASE("sum_se properties") {
    Rng rng(41);
    SceneSpec spec;
    auto sc = make_scene(spec, rng);

    SECTION("zero precoders give zero SE") {
        std::vector<CMat> w(2, CMat::Zero(8, 1));
        REQUIRE(sum_se(sc, w, ReceiveModel::top_eigen) == 0.0);
        REQUIRE(sum_se(sc, w, ReceiveModel::mmse) == 0.0);
    }
    SECTION("single user matched beam hits the closed form") {
        MultiuserScene one;
        one.k_users = 1;
        one.n_tx = 8;
        one.n_rx = 2;
        one.h = {sc.h[0]};
        auto rep = eigen_preprocess(one.h[0], 1);
        std::vector<CMat> w{std::sqrt(one.total_power) * rep.eigvecs};
        const double expect = std::log2(1.0 + one.total_power * rep.eigvals(0) / one.noise_power);
        REQUIRE_THAT(sum_se(one, w, ReceiveModel::top_eigen), Catch::Matchers::WithinAbs(expect, 1e-9));
    }
    SECTION("invariant to a common phase rotation of any precoder") {
        std::vector<CMat> w(2);
        for (int k = 0; k < 2; ++k) {
            w[static_cast<std::size_t>(k)] = CMat(8, 1);
            for (int m = 0; m < 8; ++m) w[static_cast<std::size_t>(k)](m, 0) = rng.cgauss() * 0.5;
        }
        const double base = sum_se(sc, w, ReceiveModel::top_eigen);
        const cplx rot = std::polar(1.0, 1.234);
        auto w2 = w;
        w2[1] *= rot;
        REQUIRE_THAT(sum_se(sc, w2, ReceiveModel::top_eigen), Catch::Matchers::WithinAbs(base, 1e-10));
    }
}

TEST_CASE("direction and power modules") {
    Rng rng(51);
    JmpConfig cfg;
    auto jmp = make_jmp_params(cfg, rng);

    SECTION("directions are unit-norm per user and deterministic") {
        std::vector<double> in(3 * 2 * 2 * 8);
        for (auto& v : in) v = rng.gauss();
        auto x = ad::Tensor::leaf({3, 32}, in);
        auto d1 = direction_module(jmp, x, 8);
        auto d2 = direction_module(jmp, x, 8);
        REQUIRE(d1.value() == d2.value());
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 2; ++k) {
                double nrm = 0.0;
                for (int m = 0; m < 16; ++m) {
                    const double v = d1.value()[static_cast<std::size_t>(r) * 32 + k * 16 + m];
                    nrm += v * v;
                }
                REQUIRE_THAT(std::sqrt(nrm), Catch::Matchers::WithinAbs(1.0, 1e-9));
            }
    }

    SECTION("powers are positive and sum to P; symmetric weights give equal split") {
        // zero weights make the softmax exactly uniform
        for (auto& [name, t] : jmp.params)
            if (name.rfind("pow.", 0) == 0)
                for (auto& v : t.value()) v = 0.0;
        auto feats = ad::Tensor::leaf({2, 3}, {1.0, 1.0, 0.1, 2.0, 0.5, 0.1});
        auto p = power_module(jmp, feats, 3.0);
        for (int r = 0; r < 2; ++r) {
            double sum = 0.0;
            for (int k = 0; k < 2; ++k) {
                const double v = p.value()[static_cast<std::size_t>(r) * 2 + k];
                REQUIRE(v > 0.0);
                sum += v;
            }
            REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(3.0, 1e-9));
        }
        REQUIRE_THAT(p.value()[0], Catch::Matchers::WithinAbs(1.5, 1e-9));
    }

    SECTION("gradient flows through the normalization") {
        nn::ParameterSet ps;
        auto& raw = ps.add("raw", ad::Tensor::param({2, 8}, [&] {
            std::vector<double> v(16);
            for (auto& x : v) x = rng.gauss();
            return v;
        }()));
        auto rep = nn::grad_check([&]() {
            auto d = ad::l2_normalize_groups(raw, 4);
            return ad::reduce_mean(ad::mul(d, ad::add_scalar(raw, 0.2)));
        }, ps, 1e-5);
        REQUIRE(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("sum_se_graph agrees with the scalar evaluator") {
    SceneSpec spec;
    auto scenes = make_scene_dataset(spec, 5, 77, Split::test);
    std::vector<const MultiuserScene*> ptrs;
    for (const auto& s : scenes) ptrs.push_back(&s);
    auto b = make_scene_batch(ptrs);

    Rng rng(61);
    std::vector<double> draw(static_cast<std::size_t>(b.count) * 2 * 2 * 8);
    for (auto& v : draw) v = rng.gauss();
    auto dirs = ad::l2_normalize_groups(ad::Tensor::leaf({b.count, 32}, draw), 16);
    std::vector<double> praw(static_cast<std::size_t>(b.count) * 2, 0.5);
    auto powers = ad::Tensor::leaf({b.count, 2}, praw);

    auto se = sum_se_graph(b, dirs, powers);

    double acc = 0.0;
    for (int i = 0; i < b.count; ++i) {
        std::vector<CMat> w(2);
        for (int k = 0; k < 2; ++k) {
            CMat col(8, 1);
            for (int m = 0; m < 8; ++m) {
                const double re = dirs.value()[static_cast<std::size_t>(i) * 32 + k * 16 + m];
                const double im = dirs.value()[static_cast<std::size_t>(i) * 32 + k * 16 + 8 + m];
                col(m, 0) = std::sqrt(0.5) * cplx(re, im);
            }
            w[static_cast<std::size_t>(k)] = col;
        }
        acc += sum_se(scenes[static_cast<std::size_t>(i)], w, ReceiveModel::top_eigen);
    }
    REQUIRE_THAT(se.scalar(), Catch::Matchers::WithinAbs(acc / b.count, 1e-9));
}

TEST_CASE("jfp objective gradient check on a tiny instance") {
    SceneSpec spec;
    spec.n_tx = 4;
    spec.n_paths = 3;
    auto scenes = make_scene_dataset(spec, 3, 88, Split::train);
    std::vector<const MultiuserScene*> ptrs;
    for (const auto& s : scenes) ptrs.push_back(&s);
    auto b = make_scene_batch(ptrs);

    Rng rng(71);
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
    auto fb = make_djscc(arch, rng);

    nn::ParameterSet all;
    for (auto& [k, v] : fb.enc.params) all.add(k, v);
    for (auto& [k, v] : fb.dec.params) all.add(k, v);
    for (auto& [k, v] : jmp.params) all.add(k, v);

    auto loss_fn = [&]() {
        auto vhat = feedback_eigvecs(fb, b, 5.0, 1234, 0);
        return ad::mul_scalar(jmp_se_objective(jmp, b, vhat), -1.0);
    };
    auto rep = nn::grad_check(loss_fn, all, 1e-5, 40);
    INFO("worst " << rep.worst_param << " err " << rep.max_rel_err);
    REQUIRE(rep.max_rel_err < 1e-4);
}
