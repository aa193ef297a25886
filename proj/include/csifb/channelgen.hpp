#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "csifb/common.hpp"
#include "csifb/io.hpp"
#include "csifb/rng.hpp"

namespace csifb {

using CMat = Eigen::MatrixXcd;

enum class Scenario : std::uint8_t { indoor_like = 0, uma_like = 1 };
enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* to_string(Scenario s) { return s == Scenario::indoor_like ? "indoor_like" : "uma_like"; }
inline const char* to_string(Split s) { return s == Split::train ? "train" : (s == Split::val ? "val" : "test"); }

// Parameters of the clustered multipath generator. indoor_like draws few
// tight clusters (short delay spread, sparse delay-angle support); uma_like
// draws more clusters with a longer delay spread.
struct ChannelSpec {
    int n_tx = 32;
    int n_sub = 256;
    int n_delay = 32;
    int n_paths = 24;
    double delay_spread = 50e-9;   // seconds
    double angle_spread = 0.07;    // radians, per-cluster Laplacian scale
    Scenario scenario = Scenario::indoor_like;
    double carrier_spacing = 15e3; // Hz

    static ChannelSpec indoor_like() { return ChannelSpec{}; }

    static ChannelSpec uma_like() {
        ChannelSpec s;
        s.n_paths = 48;
        s.delay_spread = 1.0e-6;
        s.angle_spread = 0.14;
        s.scenario = Scenario::uma_like;
        return s;
    }

    int clusters() const { return scenario == Scenario::indoor_like ? 3 : 8; }
    int real_dim() const { return 2 * n_delay * n_tx; }

    void validate() const {
        config_require(n_tx > 0, "ChannelSpec: n_tx must be positive");
        config_require(n_sub > 0, "ChannelSpec: n_sub must be positive");
        config_require(n_delay > 0 && n_delay <= n_sub, "ChannelSpec: require 0 < n_delay <= n_sub");
        config_require(n_paths >= 1, "ChannelSpec: n_paths must be >= 1");
        config_require(delay_spread > 0, "ChannelSpec: delay_spread must be > 0");
        config_require(angle_spread >= 0, "ChannelSpec: angle_spread must be >= 0");
        config_require(carrier_spacing > 0, "ChannelSpec: carrier_spacing must be > 0");
    }
};

// One downlink channel realization. h_sf is n_sub x n_tx (spatial-frequency);
// h_da is the first n_delay rows of its delay-angle transform. h_sf may be
// left empty when only the compression target is needed.
struct CsiSample {
    CMat h_sf;
    CMat h_da;
    double norm_scale = 1.0;
};

struct Dataset {
    ChannelSpec spec;
    std::vector<CsiSample> samples;
    Split split = Split::train;
    std::uint64_t seed = 0;
    double norm_scale = 1.0;
    bool has_sf = false;

    std::size_t size() const { return samples.size(); }
};

namespace detail {

// Unitary DFT matrices are cached by size; generation and the transforms
// below are plain GEMMs, which keeps everything bit-reproducible.
inline const CMat& dft_matrix(int n) {
    static std::map<int, CMat> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    CMat w(n, n);
    const double c = 1.0 / std::sqrt(static_cast<double>(n));
    for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
            const double a = -2.0 * std::numbers::pi * j * k / n;
            w(j, k) = cplx(std::cos(a) * c, std::sin(a) * c);
        }
    return cache.emplace(n, std::move(w)).first->second;
}

}  // namespace detail

// Unitary DFT along the subcarrier axis, unitary IDFT along the antenna axis.
inline CMat to_delay_angle(const CMat& h_sf) {
    const auto& fd = detail::dft_matrix(static_cast<int>(h_sf.rows()));
    const auto& fa = detail::dft_matrix(static_cast<int>(h_sf.cols()));
    return fd * h_sf * fa.adjoint();
}

inline CMat from_delay_angle(const CMat& h_da_full) {
    const auto& fd = detail::dft_matrix(static_cast<int>(h_da_full.rows()));
    const auto& fa = detail::dft_matrix(static_cast<int>(h_da_full.cols()));
    return fd.adjoint() * h_da_full * fa;
}

inline CMat truncate_delay(const CMat& h_da_full, int n_delay) {
    shape_require(n_delay <= h_da_full.rows(), "truncate: n_delay exceeds row count");
    return h_da_full.topRows(n_delay);
}

inline CMat zero_append(const CMat& h_da, int n_sub) {
    shape_require(n_sub >= h_da.rows(), "zero_append: n_sub smaller than truncated rows");
    CMat full = CMat::Zero(n_sub, h_da.cols());
    full.topRows(h_da.rows()) = h_da;
    return full;
}

namespace detail {

// Sum over clustered paths of gain x delay phasor x ULA steering vector.
// Phasor signs are chosen so that energy lands in the leading delay bins and
// around angle bin zero at broadside.
inline CMat draw_channel_sf(const ChannelSpec& spec, Rng& rng) {
    const int n_cl = spec.clusters();
    const int rays_per_cluster = std::max(1, (spec.n_paths + n_cl - 1) / n_cl);

    struct Path {
        double delay, nu, p;
        cplx gain;
    };
    std::vector<Path> paths;
    paths.reserve(static_cast<std::size_t>(n_cl) * rays_per_cluster);

    double total_p = 0.0;
    for (int c = 0; c < n_cl; ++c) {
        const double tau_c = rng.exponential(spec.delay_spread);
        const double theta_c = rng.uniform(-std::numbers::pi / 3.0, std::numbers::pi / 3.0);
        const double shadow_db = 3.0 * rng.gauss();
        const double p_c = std::exp(-tau_c / spec.delay_spread) * std::pow(10.0, shadow_db / 10.0);
        for (int r = 0; r < rays_per_cluster; ++r) {
            if (static_cast<int>(paths.size()) >= spec.n_paths) break;
            Path p;
            p.delay = tau_c + rng.exponential(spec.delay_spread / 20.0);
            const double theta = theta_c + rng.laplacian(spec.angle_spread);
            p.nu = 0.5 * std::sin(theta);
            p.p = p_c / rays_per_cluster;
            p.gain = rng.cgauss();
            total_p += p.p;
            paths.push_back(p);
        }
    }

    CMat h = CMat::Zero(spec.n_sub, spec.n_tx);
    Eigen::VectorXcd freq(spec.n_sub);
    Eigen::RowVectorXcd steer(spec.n_tx);
    for (const auto& p : paths) {
        const cplx g = p.gain * std::sqrt(p.p / total_p);
        const double dphi = 2.0 * std::numbers::pi * spec.carrier_spacing * p.delay;
        for (int f = 0; f < spec.n_sub; ++f) freq(f) = cplx(std::cos(dphi * f), std::sin(dphi * f));
        const double aphi = 2.0 * std::numbers::pi * p.nu;
        for (int m = 0; m < spec.n_tx; ++m) steer(m) = cplx(std::cos(aphi * m), std::sin(aphi * m));
        h.noalias() += g * (freq * steer);
    }
    return h;
}

}  // namespace detail

// Deterministic in (spec, seed, split, count): sample i always uses the
// sub-seed derived from (seed, split, i). All h_da (and h_sf, when kept) are
// scaled by one per-dataset scalar so max |component| of h_da is exactly 1.
inline Dataset generate_dataset(const ChannelSpec& spec, std::size_t count, std::uint64_t seed,
                                Split split, bool keep_sf = false) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    ds.seed = seed;
    ds.split = split;
    ds.has_sf = keep_sf;
    ds.samples.resize(count);

    double max_abs = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(split), i}));
        CMat h_sf = detail::draw_channel_sf(spec, rng);
        CMat h_da = truncate_delay(to_delay_angle(h_sf), spec.n_delay);
        for (int r = 0; r < h_da.rows(); ++r)
            for (int c = 0; c < h_da.cols(); ++c) {
                max_abs = std::max(max_abs, std::abs(h_da(r, c).real()));
                max_abs = std::max(max_abs, std::abs(h_da(r, c).imag()));
            }
        ds.samples[i].h_da = std::move(h_da);
        if (keep_sf) ds.samples[i].h_sf = std::move(h_sf);
    }

    ds.norm_scale = max_abs > 0.0 ? max_abs : 1.0;
    for (auto& s : ds.samples) {
        s.h_da /= ds.norm_scale;
        if (keep_sf) s.h_sf /= ds.norm_scale;
        s.norm_scale = ds.norm_scale;
    }
    return ds;
}

// Planar real view (channel 0 = real, channel 1 = imag), row-major over
// (delay, antenna). This is the layout every learned model consumes.
inline std::vector<double> to_real_view(const CMat& h) {
    const int rows = static_cast<int>(h.rows());
    const int cols = static_cast<int>(h.cols());
    std::vector<double> v(static_cast<std::size_t>(2 * rows * cols));
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            v[static_cast<std::size_t>(r * cols + c)] = h(r, c).real();
            v[static_cast<std::size_t>(rows * cols + r * cols + c)] = h(r, c).imag();
        }
    return v;
}

inline CMat from_real_view(const std::vector<double>& v, int rows, int cols) {
    shape_require(v.size() == static_cast<std::size_t>(2 * rows * cols), "from_real_view: size mismatch");
    CMat h(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            h(r, c) = cplx(v[static_cast<std::size_t>(r * cols + c)],
                           v[static_cast<std::size_t>(rows * cols + r * cols + c)]);
    return h;
}

struct NmseResult {
    double db = 0.0;
    std::size_t used = 0;
    std::size_t excluded = 0;  // zero-reference samples skipped with a warning count
};

inline constexpr double kNmseFloorDb = -300.0;

// 10*log10( mean over samples of ||ref - est||^2 / ||ref||^2 ).
inline NmseResult nmse_db(const std::vector<CMat>& ref, const std::vector<CMat>& est) {
    shape_require(ref.size() == est.size(), "nmse_db: sample count mismatch");
    NmseResult out;
    double acc = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        shape_require(ref[i].rows() == est[i].rows() && ref[i].cols() == est[i].cols(),
                      "nmse_db: shape mismatch");
        const double rn = ref[i].squaredNorm();
        if (rn == 0.0) {
            out.excluded += 1;
            continue;
        }
        acc += (ref[i] - est[i]).squaredNorm() / rn;
        out.used += 1;
    }
    shape_require(out.used > 0, "nmse_db: no usable samples (all references zero)");
    const double mean = acc / static_cast<double>(out.used);
    out.db = mean > 0.0 ? std::max(10.0 * std::log10(mean), kNmseFloorDb) : kNmseFloorDb;
    return out;
}

inline NmseResult nmse_db_real(const std::vector<std::vector<double>>& ref,
                               const std::vector<std::vector<double>>& est) {
    shape_require(ref.size() == est.size(), "nmse_db: sample count mismatch");
    NmseResult out;
    double acc = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        shape_require(ref[i].size() == est[i].size(), "nmse_db: length mismatch");
        double rn = 0.0, dn = 0.0;
        for (std::size_t k = 0; k < ref[i].size(); ++k) {
            rn += ref[i][k] * ref[i][k];
            const double d = ref[i][k] - est[i][k];
            dn += d * d;
        }
        if (rn == 0.0) {
            out.excluded += 1;
            continue;
        }
        acc += dn / rn;
        out.used += 1;
    }
    shape_require(out.used > 0, "nmse_db: no usable samples (all references zero)");
    const double mean = acc / static_cast<double>(out.used);
    out.db = mean > 0.0 ? std::max(10.0 * std::log10(mean), kNmseFloorDb) : kNmseFloorDb;
    return out;
}

// ---- dataset file format -------------------------------------------------
//
// magic "CSIFB1"; u32 n_tx, n_sub, n_delay, count; u64 seed; u8 split;
// u8 flags (bit 0: h_sf payload present); f64 norm_scale. Then per sample
// 2*n_delay*n_tx little-endian f32 in row-major (real, imag) interleave of
// h_da, followed by h_sf the same way when the flag is set.

namespace detail {

inline void write_interleaved_f32(std::ostream& os, const CMat& h) {
    for (int r = 0; r < h.rows(); ++r)
        for (int c = 0; c < h.cols(); ++c) {
            io::write_pod<float>(os, static_cast<float>(h(r, c).real()));
            io::write_pod<float>(os, static_cast<float>(h(r, c).imag()));
        }
}

inline CMat read_interleaved_f32(std::istream& is, int rows, int cols) {
    CMat h(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double re = io::read_pod<float>(is);
            const double im = io::read_pod<float>(is);
            h(r, c) = cplx(re, im);
        }
    return h;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ComputeError("cannot open dataset file for writing: " + path);
    io::write_magic(os, "CSIFB1");
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.n_tx));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.n_sub));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.n_delay));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.samples.size()));
    io::write_pod<std::uint64_t>(os, ds.seed);
    io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(ds.split));
    io::write_pod<std::uint8_t>(os, ds.has_sf ? 1 : 0);
    io::write_pod<double>(os, ds.norm_scale);
    for (const auto& s : ds.samples) {
        detail::write_interleaved_f32(os, s.h_da);
        if (ds.has_sf) detail::write_interleaved_f32(os, s.h_sf);
    }
    if (!os) throw ComputeError("dataset write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ComputeError("cannot open dataset file: " + path);
    io::expect_magic(is, "CSIFB1");
    Dataset ds;
    ds.spec.n_tx = static_cast<int>(io::read_pod<std::uint32_t>(is));
    ds.spec.n_sub = static_cast<int>(io::read_pod<std::uint32_t>(is));
    ds.spec.n_delay = static_cast<int>(io::read_pod<std::uint32_t>(is));
    const auto count = io::read_pod<std::uint32_t>(is);
    ds.seed = io::read_pod<std::uint64_t>(is);
    ds.split = static_cast<Split>(io::read_pod<std::uint8_t>(is));
    ds.has_sf = (io::read_pod<std::uint8_t>(is) & 1) != 0;
    ds.norm_scale = io::read_pod<double>(is);
    ds.samples.resize(count);
    for (auto& s : ds.samples) {
        s.h_da = detail::read_interleaved_f32(is, ds.spec.n_delay, ds.spec.n_tx);
        if (ds.has_sf) s.h_sf = detail::read_interleaved_f32(is, ds.spec.n_sub, ds.spec.n_tx);
        s.norm_scale = ds.norm_scale;
    }
    return ds;
}

}  // namespace csifb
