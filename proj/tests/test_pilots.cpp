#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "csifb/pilots.hpp"

using namespace csifb;

namespace {

CMat random_channel(int rows, int cols, Rng& rng) {
    CMat h(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) h(r, c) = rng.cgauss();
    return h;
}

}  // namespace

TEST_CASE("pilot matrix construction") {
    auto spec = make_pilot_spec(8, 8, 10.0);
    SECTION("square pilots are unitary up to scale") {
        CMat g = spec.x * spec.x.adjoint();
        REQUIRE((g - CMat::Identity(8, 8)).norm() < 1e-10);
    }
    SECTION("column powers are equal") {
        for (int c = 0; c < 8; ++c)
            REQUIRE_THAT(spec.x.col(c).norm(), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    SECTION("pseudo-inverse consistency X X+ X = X") {
        for (int np : {4, 8, 12}) {
            auto s = make_pilot_spec(8, np, 10.0);
            Eigen::JacobiSVD<CMat> svd(s.x, Eigen::ComputeThinU | Eigen::ComputeThinV);
            CMat pinv = svd.matrixV() *
                        svd.singularValues().array().inverse().matrix().asDiagonal() *
                        svd.matrixU().adjoint();
            REQUIRE((s.x * pinv * s.x - s.x).norm() < 1e-10);
        }
    }
}

TEST_CASE("receive_pilots") {
    Rng rng(5);
    CMat h = random_channel(32, 8, rng);

    SECTION("infinite SNR is exact") {
        auto spec = make_pilot_spec(8, 8, std::numeric_limits<double>::infinity());
        REQUIRE((receive_pilots(h, spec, 3) - h * spec.x).norm() == 0.0);
    }
    SECTION("linearity in the channel") {
        auto spec = make_pilot_spec(8, 8, std::numeric_limits<double>::infinity());
        CMat h2 = random_channel(32, 8, rng);
        CMat sum = receive_pilots(h + h2, spec, 3);
        REQUIRE((sum - receive_pilots(h, spec, 3) - receive_pilots(h2, spec, 3)).norm() < 1e-12);
    }
    SECTION("zero channel leaves pure noise at the configured variance") {
        auto spec = make_pilot_spec(8, 64, 7.0);
        CMat z = CMat::Zero(512, 8);
        CMat y = receive_pilots(z, spec, 11);
        const double power = y.squaredNorm() / static_cast<double>(y.size());
        REQUIRE(std::abs(power - spec.noise_var()) / spec.noise_var() < 0.05);
    }
    SECTION("determinism per seed") {
        auto spec = make_pilot_spec(8, 8, 10.0);
        REQUIRE((receive_pilots(h, spec, 4) - receive_pilots(h, spec, 4)).norm() == 0.0);
        REQUIRE((receive_pilots(h, spec, 4) - receive_pilots(h, spec, 5)).norm() > 0.0);
    }
}

TEST_CASE("ls_estimate") {
    Rng rng(7);

    SECTION("noiseless unitary pilots recover the channel exactly") {
        auto spec = make_pilot_spec(8, 8, std::numeric_limits<double>::infinity());
        CMat h = random_channel(16, 8, rng);
        CMat h_hat = ls_estimate(receive_pilots(h, spec, 1), spec);
        REQUIRE((h_hat - h).norm() < 1e-10 * h.norm());
    }

    SECTION("estimation error matches the LS variance prediction") {
        auto spec = make_pilot_spec(8, 8, 10.0);
        const int rows = 64, trials = 200;  // 12800 row realizations
        double err_energy = 0.0, ref_energy = 0.0;
        Eigen::VectorXcd mean_err = Eigen::VectorXcd::Zero(8);
        std::size_t row_count = 0;
        for (int t = 0; t < trials; ++t) {
            Rng crng(derive_seed(900, {static_cast<std::uint64_t>(t)}));
            CMat h = random_channel(rows, 8, crng);
            CMat h_hat = ls_estimate(receive_pilots(h, spec, derive_seed(901, {static_cast<std::uint64_t>(t)})), spec);
            err_energy += (h_hat - h).squaredNorm();
            ref_energy += h.squaredNorm();
            for (int r = 0; r < rows; ++r) mean_err += (h_hat - h).row(r).transpose();
            row_count += rows;
        }
        const double predicted_per_row = ls_error_energy_per_row(spec);
        const double measured_per_row = err_energy / static_cast<double>(row_count);
        REQUIRE(std::abs(10.0 * std::log10(measured_per_row / predicted_per_row)) < 0.5);
        // with E|h|^2 = 1 per element the NMSE sits at -(pilot SNR) dB
        const double nmse_db_val = 10.0 * std::log10(err_energy / ref_energy);
        REQUIRE(std::abs(nmse_db_val - (-10.0)) < 0.5);
        // unbiasedness: mean error within 3 standard errors of zero
        const double se = std::sqrt(predicted_per_row / 8.0 / static_cast<double>(row_count));
        for (int c = 0; c < 8; ++c) REQUIRE(std::abs(mean_err(c) / static_cast<double>(row_count)) < 3.0 * se);
    }

    SECTION("underdetermined pilots give the zero-residual minimum-norm solution") {
        auto spec = make_pilot_spec(8, 4, std::numeric_limits<double>::infinity());
        CMat h = random_channel(16, 8, rng);
        CMat y = receive_pilots(h, spec, 2);
        CMat h_hat = ls_estimate(y, spec);
        REQUIRE((h_hat * spec.x - y).norm() < 1e-10);

        // any null-space perturbation with the same residual has larger norm
        Eigen::JacobiSVD<CMat> svd(spec.x, Eigen::ComputeFullU);
        CMat null_dir = svd.matrixU().rightCols(4);  // directions X cannot see
        CMat perturbed = h_hat + random_channel(16, 4, rng) * null_dir.adjoint();
        REQUIRE((perturbed * spec.x - y).norm() < 1e-9);
        REQUIRE(perturbed.norm() > h_hat.norm());
    }

    SECTION("rank-deficient square pilots are rejected") {
        auto spec = make_pilot_spec(8, 8, 10.0);
        spec.x.col(3) = spec.x.col(2);
        CMat y = CMat::Zero(4, 8);
        REQUIRE_THROWS_AS(ls_estimate(y, spec), ComputeError);
    }
}

TEST_CASE("pipeline input views and MAC accounting") {
    ChannelSpec cs = ChannelSpec::indoor_like();
    cs.n_sub = 32;
    cs.n_tx = 8;
    cs.n_delay = 8;
    Dataset ds = generate_dataset(cs, 4, 21, Split::test, /*keep_sf=*/true);
    auto pilots = make_pilot_spec(8, 8, std::numeric_limits<double>::infinity());

    SECTION("infinite-SNR ce view equals the true truncated CSI view") {
        auto view = pipeline_input_view(CeMode::ce_then_compress, ds.samples[0], cs, pilots, 1);
        auto truth = to_real_view(ds.samples[0].h_da);
        double num = 0, den = 0;
        for (std::size_t i = 0; i < view.size(); ++i) {
            num += (view[i] - truth[i]) * (view[i] - truth[i]);
            den += truth[i] * truth[i];
        }
        REQUIRE(std::sqrt(num / den) < 1e-9);
    }

    SECTION("direct view is the raw received pilot block") {
        auto view = pipeline_input_view(CeMode::direct_pilot, ds.samples[0], cs, pilots, 1);
        REQUIRE(view.size() == static_cast<std::size_t>(2 * cs.n_sub * pilots.n_pilot));
    }

    SECTION("direct mode costs fewer UE-side MACs") {
        DjsccArch ce_arch;
        ce_arch.height = 8;
        ce_arch.width = 8;
        ce_arch.n_symbols = 16;
        DjsccArch direct_arch = ce_arch;
        direct_arch.enc_height = 32;
        direct_arch.enc_width = 8;
        direct_arch.enc_down_h = 8;
        direct_arch.enc_down_w = 2;
        direct_arch.s2c_first = true;
        const auto ce_macs = ue_side_macs(CeMode::ce_then_compress, ce_arch, pilots, cs.n_sub);
        const auto direct_macs = ue_side_macs(CeMode::direct_pilot, direct_arch, pilots, cs.n_sub);
        INFO("ce " << ce_macs << " vs direct " << direct_macs);
        REQUIRE(direct_macs < ce_macs);
    }
}

TEST_CASE("both pipeline modes are deterministic end to end") {
    ChannelSpec cs = ChannelSpec::indoor_like();
    cs.n_sub = 32;
    cs.n_tx = 8;
    cs.n_delay = 8;
    Dataset ds = generate_dataset(cs, 12, 31, Split::test, /*keep_sf=*/true);

    DjsccArch arch;
    arch.height = 8;
    arch.width = 8;
    arch.n_symbols = 8;
    arch.channels = 8;
    Rng rng(derive_seed(100, {2}));
    auto model = make_djscc(arch, rng);

    CePipelineConfig cfg;
    cfg.mode = CeMode::ce_then_compress;
    cfg.pilots = make_pilot_spec(8, 8, 10.0);
    const double a = eval_ce_pipeline(model, ds, cfg, 7);
    const double b = eval_ce_pipeline(model, ds, cfg, 7);
    REQUIRE(a == b);
}
