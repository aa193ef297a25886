#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "csifb/io.hpp"
#include "csifb/tensor.hpp"

namespace csifb::nn {

using ad::Shape;
using ad::Tensor;

// Named parameter collection. std::map keeps serialization order stable so
// checkpoints are byte-reproducible.
struct ParameterSet {
    std::map<std::string, Tensor> params;
    nlohmann::json metadata = nlohmann::json::object();

    Tensor& at(const std::string& name) {
        auto it = params.find(name);
        shape_require(it != params.end(), "ParameterSet: unknown parameter " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = params.find(name);
        shape_require(it != params.end(), "ParameterSet: unknown parameter " + name);
        return it->second;
    }

    Tensor& add(const std::string& name, Tensor t) {
        shape_require(!params.count(name), "ParameterSet: duplicate parameter " + name);
        return params.emplace(name, std::move(t)).first->second;
    }

    std::size_t count_values() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params) n += v.size();
        return n;
    }

    void zero_grad() {
        for (auto& [k, v] : params) v.zero_grad();
    }
};

// ---- checkpoint file ---------------------------------------------------------
//
// magic "CKPT1"; u32 param count; per parameter: u32 name length, UTF-8 name,
// u32 rank, u32 dims, f32 data little-endian; then u32 JSON length and the
// metadata blob.

inline void save_checkpoint(const std::string& path, const ParameterSet& ps) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ComputeError("cannot open checkpoint for writing: " + path);
    io::write_magic(os, "CKPT1");
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ps.params.size()));
    for (const auto& [name, t] : ps.params) {
        io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        io::write_bytes(os, name.data(), name.size());
        io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        for (double v : t.value()) io::write_pod<float>(os, static_cast<float>(v));
    }
    const std::string meta = ps.metadata.dump();
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
    io::write_bytes(os, meta.data(), meta.size());
    if (!os) throw ComputeError("checkpoint write failed: " + path);
}

inline ParameterSet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ComputeError("cannot open checkpoint: " + path);
    io::expect_magic(is, "CKPT1");
    ParameterSet ps;
    const auto count = io::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = io::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        io::read_bytes(is, name.data(), name_len);
        const auto rank = io::read_pod<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(io::read_pod<std::uint32_t>(is));
        std::vector<double> data(ad::numel(shape));
        for (auto& v : data) v = io::read_pod<float>(is);
        ps.add(name, Tensor::param(std::move(shape), std::move(data)));
    }
    const auto meta_len = io::read_pod<std::uint32_t>(is);
    std::string meta(meta_len, '\0');
    io::read_bytes(is, meta.data(), meta_len);
    ps.metadata = nlohmann::json::parse(meta);
    return ps;
}

inline std::uint64_t checkpoint_hash(const ParameterSet& ps) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& [name, t] : ps.params) {
        h = io::fnv1a(name.data(), name.size(), h);
        for (double v : t.value()) {
            const float f = static_cast<float>(v);
            h = io::fnv1a(&f, sizeof(f), h);
        }
    }
    return h;
}

// ---- layers --------------------------------------------------------------------

inline Tensor make_dense(ParameterSet& ps, const std::string& prefix, int in, int out, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / (in + out));
    ps.add(prefix + ".W", Tensor::randn_param({in, out}, rng, std_dev));
    ps.add(prefix + ".b", Tensor::param({out}, std::vector<double>(out, 0.0)));
    return ps.at(prefix + ".W");
}

inline Tensor dense(const ParameterSet& ps, const std::string& prefix, const Tensor& x) {
    return ad::add_rowvec(ad::matmul(x, ps.at(prefix + ".W")), ps.at(prefix + ".b"));
}

inline void make_conv(ParameterSet& ps, const std::string& prefix, int cin, int cout, int k, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / (cin * k * k + cout));
    ps.add(prefix + ".W", Tensor::randn_param({cout, cin, k, k}, rng, std_dev));
    ps.add(prefix + ".b", Tensor::param({cout}, std::vector<double>(cout, 0.0)));
}

inline Tensor conv(const ParameterSet& ps, const std::string& prefix, const Tensor& x) {
    return ad::conv2d(x, ps.at(prefix + ".W"), ps.at(prefix + ".b"));
}

// Mean squared error over every element (batch and component averaged).
inline Tensor mse(const Tensor& pred, const Tensor& target) {
    Tensor d = ad::sub(pred, target);
    return ad::reduce_mean(ad::mul(d, d));
}

// Stacks per-sample flat views into one leaf tensor of shape {N, item...}.
inline Tensor stack_views(const std::vector<const std::vector<double>*>& rows, Shape item_shape) {
    shape_require(!rows.empty(), "stack_views: empty batch");
    const std::size_t item = ad::numel(item_shape);
    std::vector<double> data;
    data.reserve(rows.size() * item);
    for (const auto* r : rows) {
        shape_require(r->size() == item, "stack_views: item size mismatch");
        data.insert(data.end(), r->begin(), r->end());
    }
    Shape s{static_cast<int>(rows.size())};
    s.insert(s.end(), item_shape.begin(), item_shape.end());
    return Tensor::leaf(std::move(s), std::move(data));
}

struct TrainLog {
    std::vector<double> epoch_loss;
};

// Deterministic Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.next_u64() % i;
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

// ---- Adam ------------------------------------------------------------------------

struct OptimizerState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

// Standard Adam with bias correction. Requires every parameter to carry an
// accumulated gradient.
inline void adam_step(ParameterSet& ps, OptimizerState& st) {
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (auto& [name, t] : ps.params) {
        if (!t.has_grad())
            throw ComputeError("adam_step: missing gradient for parameter " + name);
        auto& g = t.grad();
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) m.assign(t.size(), 0.0);
        if (v.empty()) v.assign(t.size(), 0.0);
        shape_require(m.size() == t.size() && v.size() == t.size(), "adam_step: moment size mismatch");
        auto& val = t.value();
        for (std::size_t i = 0; i < val.size(); ++i) {
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            val[i] -= st.lr * mh / (std::sqrt(vh) + st.eps);
        }
    }
}

// ---- gradient checking --------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::map<std::string, double> per_param;
};

inline double rel_err(double a, double b) {
    const double denom = std::max(std::max(std::abs(a), std::abs(b)), 1e-6);
    return std::abs(a - b) / denom;
}

// Central finite differences against the analytic gradients of loss_fn.
// loss_fn must rebuild the graph on every call. When max_coords > 0, a
// deterministic strided subset of coordinates is checked per parameter.
// Each coordinate is probed at every step size and scored by its best
// agreement: small steps lose to roundoff where gradients are tiny, large
// steps lose to truncation where curvature is high.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, ParameterSet& ps,
                                  std::vector<double> steps, std::size_t max_coords = 0) {
    shape_require(!steps.empty(), "grad_check: need at least one step size");
    GradCheckReport rep;
    ps.zero_grad();
    Tensor loss = loss_fn();
    ad::backward(loss);
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, t] : ps.params) analytic[name] = t.grad_or_zeros();

    for (auto& [name, t] : ps.params) {
        const std::size_t n = t.size();
        std::size_t count = (max_coords == 0 || max_coords >= n) ? n : max_coords;
        double worst = 0.0;
        for (std::size_t k = 0; k < count; ++k) {
            const std::size_t i = (count == n) ? k : (k * n) / count;
            const double orig = t.value()[i];
            double best = std::numeric_limits<double>::infinity();
            for (double step : steps) {
                t.value()[i] = orig + step;
                const double up = loss_fn().scalar();
                t.value()[i] = orig - step;
                const double dn = loss_fn().scalar();
                t.value()[i] = orig;
                const double fd = (up - dn) / (2.0 * step);
                best = std::min(best, rel_err(analytic[name][i], fd));
            }
            worst = std::max(worst, best);
        }
        rep.per_param[name] = worst;
        if (worst > rep.max_rel_err) {
            rep.max_rel_err = worst;
            rep.worst_param = name;
        }
    }
    return rep;
}

inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, ParameterSet& ps,
                                  double step = 1e-5, std::size_t max_coords = 0) {
    return grad_check(loss_fn, ps, std::vector<double>{step}, max_coords);
}

}  // namespace csifb::nn
