#pragma once

// Minimal reverse-mode differentiation core. Tensors are dense double arrays
// with an optional tape: every op records a backward closure when a tracked
// parameter is reachable, and backward() replays them in reverse topological
// order. Complex quantities live as paired real channels throughout.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "csifb/common.hpp"
#include "csifb/rng.hpp"

namespace csifb::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

struct Node;
class Tensor;

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// Disables tape recording in a scope; evaluation paths use this.
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGrad() { grad_mode() = prev; }
};

struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // empty means "no gradient accumulated yet"
    bool requires_grad = false;
    bool tracked = false;  // participates in the tape
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.empty()) grad.assign(val.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor leaf(Shape shape, std::vector<double> data) {
        auto n = std::make_shared<Node>();
        shape_require(numel(shape) == data.size(), "Tensor::leaf: data size does not match shape");
        n->shape = std::move(shape);
        n->val = std::move(data);
        return Tensor(n);
    }

    static Tensor zeros(Shape shape) {
        std::vector<double> d(numel(shape), 0.0);
        return leaf(std::move(shape), std::move(d));
    }

    static Tensor full(Shape shape, double v) {
        std::vector<double> d(numel(shape), v);
        return leaf(std::move(shape), std::move(d));
    }

    static Tensor param(Shape shape, std::vector<double> data) {
        Tensor t = leaf(std::move(shape), std::move(data));
        t.node_->requires_grad = true;
        t.node_->tracked = true;
        return t;
    }

    static Tensor randn_param(Shape shape, Rng& rng, double std_dev) {
        std::vector<double> d(numel(shape));
        for (auto& x : d) x = std_dev * rng.gauss();
        return param(std::move(shape), std::move(d));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->val.size(); }
    const std::vector<double>& value() const { return node_->val; }
    std::vector<double>& value() { return node_->val; }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    // Accumulated gradient; zeros if backward never reached this tensor.
    std::vector<double> grad_or_zeros() const {
        return node_->grad.empty() ? std::vector<double>(size(), 0.0) : node_->grad;
    }
    const std::vector<double>& grad() const {
        shape_require(!node_->grad.empty(), "Tensor: gradient requested but none accumulated");
        return node_->grad;
    }

    void zero_grad() { node_->grad.clear(); }

    double scalar() const {
        shape_require(size() == 1, "Tensor: scalar() on non-scalar tensor");
        return node_->val[0];
    }

    std::shared_ptr<Node>& node() { return node_; }
    const std::shared_ptr<Node>& node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, const char* op, std::vector<Tensor> parents,
                      std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val.resize(numel(n->shape));
    n->op = op;
    bool track = false;
    if (grad_mode())
        for (const auto& p : parents) track = track || p.node()->tracked;
    if (track) {
        n->tracked = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

}  // namespace detail

// ---- elementwise arithmetic ------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = detail::make_op(a.shape(), "add", {a, b}, [](Node& n) {
        for (auto& p : n.parents) {
            p->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = a.value()[i] + b.value()[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = detail::make_op(a.shape(), "sub", {a, b}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        pa->ensure_grad();
        pb->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            pa->grad[i] += n.grad[i];
            pb->grad[i] -= n.grad[i];
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = a.value()[i] - b.value()[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    auto av = a.node(), bv = b.node();
    Tensor out = detail::make_op(a.shape(), "mul", {a, b}, [av, bv](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[1]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            n.parents[0]->grad[i] += n.grad[i] * bv->val[i];
            n.parents[1]->grad[i] += n.grad[i] * av->val[i];
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = a.value()[i] * b.value()[i];
    return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    auto av = a.node(), bv = b.node();
    Tensor out = detail::make_op(a.shape(), "div", {a, b}, [av, bv](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[1]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double inv = 1.0 / bv->val[i];
            n.parents[0]->grad[i] += n.grad[i] * inv;
            n.parents[1]->grad[i] -= n.grad[i] * av->val[i] * inv * inv;
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = a.value()[i] / b.value()[i];
    return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = detail::make_op(a.shape(), "add_scalar", {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.parents[0]->grad[i] += n.grad[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = a.value()[i] + c;
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    Tensor out = detail::make_op(a.shape(), "mul_scalar", {a}, [c](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.parents[0]->grad[i] += c * n.grad[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = c * a.value()[i];
    return out;
}

// ---- activations -----------------------------------------------------------

inline Tensor leaky_relu(const Tensor& a, double slope = 0.3) {
    auto av = a.node();
    Tensor out = detail::make_op(a.shape(), "leaky_relu", {a}, [av, slope](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad[i] += n.grad[i] * (av->val[i] > 0.0 ? 1.0 : slope);
    });
    for (std::size_t i = 0; i < out.size(); ++i)
        out.value()[i] = a.value()[i] > 0.0 ? a.value()[i] : slope * a.value()[i];
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out = detail::make_op(a.shape(), "sigmoid", {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double y = n.val[i];
            n.parents[0]->grad[i] += n.grad[i] * y * (1.0 - y);
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = 1.0 / (1.0 + std::exp(-a.value()[i]));
    return out;
}

inline Tensor tanh(const Tensor& a) {
    Tensor out = detail::make_op(a.shape(), "tanh", {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double y = n.val[i];
            n.parents[0]->grad[i] += n.grad[i] * (1.0 - y * y);
        }
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = std::tanh(a.value()[i]);
    return out;
}

inline Tensor exp(const Tensor& a) {
    Tensor out = detail::make_op(a.shape(), "exp", {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.parents[0]->grad[i] += n.grad[i] * n.val[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = std::exp(a.value()[i]);
    return out;
}

inline Tensor log(const Tensor& a) {
    auto av = a.node();
    Tensor out = detail::make_op(a.shape(), "log", {a}, [av](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.parents[0]->grad[i] += n.grad[i] / av->val[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = std::log(a.value()[i]);
    return out;
}

inline Tensor sqrt(const Tensor& a) {
    Tensor out = detail::make_op(a.shape(), "sqrt", {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            n.parents[0]->grad[i] += n.grad[i] * 0.5 / n.val[i];
    });
    for (std::size_t i = 0; i < out.size(); ++i) out.value()[i] = std::sqrt(a.value()[i]);
    return out;
}

// ---- reductions ------------------------------------------------------------

inline Tensor reduce_sum(const Tensor& a) {
    Tensor out = detail::make_op({1}, "reduce_sum", {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        for (auto& g : n.parents[0]->grad) g += n.grad[0];
    });
    out.value()[0] = std::accumulate(a.value().begin(), a.value().end(), 0.0);
    return out;
}

inline Tensor reduce_mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    Tensor out = detail::make_op({1}, "reduce_mean", {a}, [inv](Node& n) {
        n.parents[0]->ensure_grad();
        for (auto& g : n.parents[0]->grad) g += n.grad[0] * inv;
    });
    out.value()[0] = std::accumulate(a.value().begin(), a.value().end(), 0.0) * inv;
    return out;
}

// Row sums of an (N, M) tensor -> (N, 1).
inline Tensor reduce_sum_rows(const Tensor& a) {
    shape_require(a.shape().size() == 2, "reduce_sum_rows: expected rank-2 input");
    const int rows = a.shape()[0], cols = a.shape()[1];
    Tensor out = detail::make_op({rows, 1}, "reduce_sum_rows", {a}, [cols](Node& n) {
        n.parents[0]->ensure_grad();
        const int rows2 = n.shape[0];
        for (int r = 0; r < rows2; ++r)
            for (int c = 0; c < cols; ++c) n.parents[0]->grad[static_cast<std::size_t>(r) * cols + c] += n.grad[r];
    });
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int c = 0; c < cols; ++c) s += a.value()[static_cast<std::size_t>(r) * cols + c];
        out.value()[r] = s;
    }
    return out;
}

// ---- dense algebra ----------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    shape_require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: expected rank-2 inputs");
    if (a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    auto av = a.node(), bv = b.node();
    Tensor out = detail::make_op({n, m}, "matmul", {a, b}, [av, bv, n, k, m](Node& nd) {
        detail::CMapM G(nd.grad.data(), n, m);
        detail::CMapM A(av->val.data(), n, k);
        detail::CMapM B(bv->val.data(), k, m);
        nd.parents[0]->ensure_grad();
        nd.parents[1]->ensure_grad();
        detail::MapM dA(nd.parents[0]->grad.data(), n, k);
        detail::MapM dB(nd.parents[1]->grad.data(), k, m);
        dA.noalias() += G * B.transpose();
        dB.noalias() += A.transpose() * G;
    });
    detail::CMapM A(a.value().data(), n, k);
    detail::CMapM B(b.value().data(), k, m);
    detail::MapM C(out.value().data(), n, m);
    C.noalias() = A * B;
    return out;
}

// X (N, M) + row vector b (M) broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    shape_require(x.shape().size() == 2, "add_rowvec: expected rank-2 input");
    const int n = x.shape()[0], m = x.shape()[1];
    shape_require(static_cast<int>(b.size()) == m, "add_rowvec: bias length mismatch");
    Tensor out = detail::make_op({n, m}, "add_rowvec", {x, b}, [n, m](Node& nd) {
        nd.parents[0]->ensure_grad();
        nd.parents[1]->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < m; ++c) {
                const double g = nd.grad[static_cast<std::size_t>(r) * m + c];
                nd.parents[0]->grad[static_cast<std::size_t>(r) * m + c] += g;
                nd.parents[1]->grad[c] += g;
            }
    });
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c)
            out.value()[static_cast<std::size_t>(r) * m + c] = x.value()[static_cast<std::size_t>(r) * m + c] + b.value()[c];
    return out;
}

inline Tensor softmax_rows(const Tensor& x) {
    shape_require(x.shape().size() == 2, "softmax_rows: expected rank-2 input");
    const int n = x.shape()[0], m = x.shape()[1];
    Tensor out = detail::make_op({n, m}, "softmax_rows", {x}, [n, m](Node& nd) {
        nd.parents[0]->ensure_grad();
        for (int r = 0; r < n; ++r) {
            const std::size_t off = static_cast<std::size_t>(r) * m;
            double dot = 0.0;
            for (int c = 0; c < m; ++c) dot += nd.grad[off + c] * nd.val[off + c];
            for (int c = 0; c < m; ++c)
                nd.parents[0]->grad[off + c] += nd.val[off + c] * (nd.grad[off + c] - dot);
        }
    });
    for (int r = 0; r < n; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * m;
        double mx = x.value()[off];
        for (int c = 1; c < m; ++c) mx = std::max(mx, x.value()[off + c]);
        double sum = 0.0;
        for (int c = 0; c < m; ++c) {
            const double e = std::exp(x.value()[off + c] - mx);
            out.value()[off + c] = e;
            sum += e;
        }
        for (int c = 0; c < m; ++c) out.value()[off + c] /= sum;
    }
    return out;
}

// ---- shape ops --------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    shape_require(numel(shape) == a.size(), "reshape: element count mismatch");
    Tensor out = detail::make_op(std::move(shape), "reshape", {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.parents[0]->grad[i] += n.grad[i];
    });
    out.value() = a.value();
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    shape_require(!parts.empty(), "concat_cols: empty input list");
    const int n = parts[0].shape()[0];
    int total = 0;
    for (const auto& p : parts) {
        shape_require(p.shape().size() == 2 && p.shape()[0] == n, "concat_cols: row mismatch");
        total += p.shape()[1];
    }
    std::vector<int> widths;
    for (const auto& p : parts) widths.push_back(p.shape()[1]);
    Tensor out = detail::make_op({n, total}, "concat_cols", parts, [n, total, widths](Node& nd) {
        int off = 0;
        for (std::size_t k = 0; k < nd.parents.size(); ++k) {
            auto& p = nd.parents[k];
            p->ensure_grad();
            const int w = widths[k];
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < w; ++c)
                    p->grad[static_cast<std::size_t>(r) * w + c] += nd.grad[static_cast<std::size_t>(r) * total + off + c];
            off += w;
        }
    });
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.shape()[1];
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < w; ++c)
                out.value()[static_cast<std::size_t>(r) * total + off + c] = p.value()[static_cast<std::size_t>(r) * w + c];
        off += w;
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, int offset, int len) {
    shape_require(x.shape().size() == 2, "slice_cols: expected rank-2 input");
    const int n = x.shape()[0], m = x.shape()[1];
    shape_require(offset >= 0 && offset + len <= m, "slice_cols: range out of bounds");
    Tensor out = detail::make_op({n, len}, "slice_cols", {x}, [n, m, offset, len](Node& nd) {
        nd.parents[0]->ensure_grad();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < len; ++c)
                nd.parents[0]->grad[static_cast<std::size_t>(r) * m + offset + c] += nd.grad[static_cast<std::size_t>(r) * len + c];
    });
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < len; ++c)
            out.value()[static_cast<std::size_t>(r) * len + c] = x.value()[static_cast<std::size_t>(r) * m + offset + c];
    return out;
}

// (N, C, H, W) with factors (fh, fw) -> (N, C*fh*fw, H/fh, W/fw).
// Pure index permutation; used as the fixed down/upsampling in the learned
// transform stages.
inline Tensor space_to_channel(const Tensor& x, int fh, int fw) {
    shape_require(x.shape().size() == 4, "space_to_channel: expected NCHW input");
    const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    shape_require(H % fh == 0 && W % fw == 0, "space_to_channel: factors must divide H and W");
    const int Ho = H / fh, Wo = W / fw, Co = C * fh * fw;
    auto fwd_index = [=](int n, int c, int h, int w) {
        // destination (n, c*fh*fw + iy*fw + ix, h/fh, w/fw)
        const int iy = h % fh, ix = w % fw;
        const int co = c * fh * fw + iy * fw + ix;
        return ((static_cast<std::size_t>(n) * Co + co) * Ho + h / fh) * Wo + w / fw;
    };
    Tensor out = detail::make_op({N, Co, Ho, Wo}, "space_to_channel", {x}, [=](Node& nd) {
        nd.parents[0]->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        nd.parents[0]->grad[((static_cast<std::size_t>(n) * C + c) * H + h) * W + w] +=
                            nd.grad[fwd_index(n, c, h, w)];
    });
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    out.value()[fwd_index(n, c, h, w)] =
                        x.value()[((static_cast<std::size_t>(n) * C + c) * H + h) * W + w];
    return out;
}

inline Tensor channel_to_space(const Tensor& x, int fh, int fw) {
    shape_require(x.shape().size() == 4, "channel_to_space: expected NCHW input");
    const int N = x.shape()[0], Ci = x.shape()[1], Hi = x.shape()[2], Wi = x.shape()[3];
    shape_require(Ci % (fh * fw) == 0, "channel_to_space: channels must divide by factors");
    const int C = Ci / (fh * fw), H = Hi * fh, W = Wi * fw;
    auto src_index = [=](int n, int c, int h, int w) {
        const int iy = h % fh, ix = w % fw;
        const int ci = c * fh * fw + iy * fw + ix;
        return ((static_cast<std::size_t>(n) * Ci + ci) * Hi + h / fh) * Wi + w / fw;
    };
    Tensor out = detail::make_op({N, C, H, W}, "channel_to_space", {x}, [=](Node& nd) {
        nd.parents[0]->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        nd.parents[0]->grad[src_index(n, c, h, w)] +=
                            nd.grad[((static_cast<std::size_t>(n) * C + c) * H + h) * W + w];
    });
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    out.value()[((static_cast<std::size_t>(n) * C + c) * H + h) * W + w] =
                        x.value()[src_index(n, c, h, w)];
    return out;
}

// ---- conv / pooling ----------------------------------------------------------

// Stride-1 same-padding 2-D convolution in NCHW layout, weights (Cout, Cin,
// KH, KW), odd kernel sizes. Forward and backward run as per-sample im2col
// GEMMs.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    shape_require(x.shape().size() == 4, "conv2d: input must be NCHW, got " + shape_str(x.shape()));
    shape_require(w.shape().size() == 4, "conv2d: weight must be OIHW, got " + shape_str(w.shape()));
    const int N = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Co = w.shape()[0], KH = w.shape()[2], KW = w.shape()[3];
    if (w.shape()[1] != Ci)
        throw ShapeError("conv2d: channel mismatch input " + shape_str(x.shape()) + " weight " +
                         shape_str(w.shape()));
    shape_require(KH % 2 == 1 && KW % 2 == 1, "conv2d: kernel sizes must be odd");
    shape_require(static_cast<int>(b.size()) == Co, "conv2d: bias length mismatch");
    const int ph = KH / 2, pw = KW / 2;
    const int K = Ci * KH * KW, HW = H * W;

    auto xim2col = [=](const double* xs, double* col) {
        // col is (HW, K) row-major
        for (int h = 0; h < H; ++h)
            for (int ww = 0; ww < W; ++ww) {
                double* row = col + static_cast<std::size_t>(h * W + ww) * K;
                int idx = 0;
                for (int ci = 0; ci < Ci; ++ci)
                    for (int kh = 0; kh < KH; ++kh) {
                        const int ih = h + kh - ph;
                        for (int kw = 0; kw < KW; ++kw, ++idx) {
                            const int iw = ww + kw - pw;
                            row[idx] = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                           ? xs[(static_cast<std::size_t>(ci) * H + ih) * W + iw]
                                           : 0.0;
                        }
                    }
            }
    };

    auto xn = x.node(), wn = w.node();
    Tensor out = detail::make_op({N, Co, H, W}, "conv2d", {x, w, b}, [=](Node& nd) {
        nd.parents[0]->ensure_grad();
        nd.parents[1]->ensure_grad();
        nd.parents[2]->ensure_grad();
        detail::CMapM Wm(wn->val.data(), Co, K);
        detail::MapM dW(nd.parents[1]->grad.data(), Co, K);
        std::vector<double> col(static_cast<std::size_t>(HW) * K);
        std::vector<double> gmat(static_cast<std::size_t>(HW) * Co);
        std::vector<double> dcol(static_cast<std::size_t>(HW) * K);
        for (int n = 0; n < N; ++n) {
            const double* xs = xn->val.data() + static_cast<std::size_t>(n) * Ci * HW;
            const double* gs = nd.grad.data() + static_cast<std::size_t>(n) * Co * HW;
            xim2col(xs, col.data());
            // gather dY as (HW, Co)
            for (int co = 0; co < Co; ++co)
                for (int i = 0; i < HW; ++i) gmat[static_cast<std::size_t>(i) * Co + co] = gs[static_cast<std::size_t>(co) * HW + i];
            detail::CMapM Gm(gmat.data(), HW, Co);
            detail::CMapM Cm(col.data(), HW, K);
            dW.noalias() += Gm.transpose() * Cm;
            for (int co = 0; co < Co; ++co) {
                double s = 0.0;
                for (int i = 0; i < HW; ++i) s += gs[static_cast<std::size_t>(co) * HW + i];
                nd.parents[2]->grad[co] += s;
            }
            detail::MapM Dc(dcol.data(), HW, K);
            Dc.noalias() = Gm * Wm;
            // col2im scatter-add
            double* dx = nd.parents[0]->grad.data() + static_cast<std::size_t>(n) * Ci * HW;
            for (int h = 0; h < H; ++h)
                for (int ww = 0; ww < W; ++ww) {
                    const double* row = dcol.data() + static_cast<std::size_t>(h * W + ww) * K;
                    int idx = 0;
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int kh = 0; kh < KH; ++kh) {
                            const int ih = h + kh - ph;
                            for (int kw = 0; kw < KW; ++kw, ++idx) {
                                const int iw = ww + kw - pw;
                                if (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                    dx[(static_cast<std::size_t>(ci) * H + ih) * W + iw] += row[idx];
                            }
                        }
                }
        }
    });

    detail::CMapM Wm(w.value().data(), Co, K);
    std::vector<double> col(static_cast<std::size_t>(HW) * K);
    std::vector<double> ymat(static_cast<std::size_t>(HW) * Co);
    for (int n = 0; n < N; ++n) {
        const double* xs = x.value().data() + static_cast<std::size_t>(n) * Ci * HW;
        double* ys = out.value().data() + static_cast<std::size_t>(n) * Co * HW;
        xim2col(xs, col.data());
        detail::CMapM Cm(col.data(), HW, K);
        detail::MapM Ym(ymat.data(), HW, Co);
        Ym.noalias() = Cm * Wm.transpose();
        for (int co = 0; co < Co; ++co)
            for (int i = 0; i < HW; ++i) ys[static_cast<std::size_t>(co) * HW + i] = ymat[static_cast<std::size_t>(i) * Co + co] + b.value()[co];
    }
    return out;
}

// (N, C, H, W) -> (N, C) spatial mean.
inline Tensor global_average_pool(const Tensor& x) {
    shape_require(x.shape().size() == 4, "global_average_pool: expected NCHW input");
    const int N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    const double inv = 1.0 / HW;
    Tensor out = detail::make_op({N, C}, "global_average_pool", {x}, [N, C, HW, inv](Node& nd) {
        nd.parents[0]->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double g = nd.grad[static_cast<std::size_t>(n) * C + c] * inv;
                double* dst = nd.parents[0]->grad.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) dst[i] += g;
            }
    });
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = x.value().data() + (static_cast<std::size_t>(n) * C + c) * HW;
            double s = 0.0;
            for (int i = 0; i < HW; ++i) s += src[i];
            out.value()[static_cast<std::size_t>(n) * C + c] = s * inv;
        }
    return out;
}

// Multiplies row n of x (N, M) by s(n), s of shape (N, 1).
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
    shape_require(x.shape().size() == 2 && s.shape().size() == 2 && s.shape()[1] == 1,
                  "scale_rows: expected (N,M) and (N,1)");
    const int n = x.shape()[0], m = x.shape()[1];
    shape_require(s.shape()[0] == n, "scale_rows: row count mismatch");
    auto xn = x.node(), sn = s.node();
    Tensor out = detail::make_op(x.shape(), "scale_rows", {x, s}, [=](Node& nd) {
        nd.parents[0]->ensure_grad();
        nd.parents[1]->ensure_grad();
        for (int r = 0; r < n; ++r) {
            const double sv = sn->val[static_cast<std::size_t>(r)];
            double acc = 0.0;
            for (int c = 0; c < m; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * m + c;
                nd.parents[0]->grad[i] += nd.grad[i] * sv;
                acc += nd.grad[i] * xn->val[i];
            }
            nd.parents[1]->grad[static_cast<std::size_t>(r)] += acc;
        }
    });
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * m + c;
            out.value()[i] = x.value()[i] * s.value()[static_cast<std::size_t>(r)];
        }
    return out;
}

// Multiplies channel c of sample n by s(n, c).
inline Tensor scale_channels(const Tensor& x, const Tensor& s) {
    shape_require(x.shape().size() == 4 && s.shape().size() == 2, "scale_channels: bad ranks");
    const int N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    shape_require(s.shape()[0] == N && s.shape()[1] == C, "scale_channels: scale shape mismatch");
    auto xn = x.node(), sn = s.node();
    Tensor out = detail::make_op(x.shape(), "scale_channels", {x, s}, [=](Node& nd) {
        nd.parents[0]->ensure_grad();
        nd.parents[1]->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
                const double sv = sn->val[static_cast<std::size_t>(n) * C + c];
                double acc = 0.0;
                for (int i = 0; i < HW; ++i) {
                    nd.parents[0]->grad[off + i] += nd.grad[off + i] * sv;
                    acc += nd.grad[off + i] * xn->val[off + i];
                }
                nd.parents[1]->grad[static_cast<std::size_t>(n) * C + c] += acc;
            }
    });
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
            const double sv = s.value()[static_cast<std::size_t>(n) * C + c];
            for (int i = 0; i < HW; ++i) out.value()[off + i] = x.value()[off + i] * sv;
        }
    return out;
}

// ---- normalizations ----------------------------------------------------------

namespace detail {

// Shared machinery: scale each contiguous group of `len` values so its mean
// square equals target. Gradient flows through the norm (projection rule).
inline Tensor scaled_norm_groups(const Tensor& x, int len, double target, const char* opname) {
    shape_require(len > 0 && x.size() % static_cast<std::size_t>(len) == 0,
                  std::string(opname) + ": group length must divide element count");
    const std::size_t groups = x.size() / static_cast<std::size_t>(len);
    const double s = std::sqrt(target * static_cast<double>(len));
    auto xn = x.node();
    Tensor out = detail::make_op(x.shape(), opname, {x}, [xn, groups, len, s](Node& nd) {
        nd.parents[0]->ensure_grad();
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = g * static_cast<std::size_t>(len);
            double nrm2 = 0.0, dot = 0.0;
            for (int i = 0; i < len; ++i) {
                nrm2 += xn->val[off + i] * xn->val[off + i];
                dot += nd.grad[off + i] * xn->val[off + i];
            }
            const double nrm = std::sqrt(nrm2);
            if (nrm == 0.0) continue;
            const double c = s / nrm;
            for (int i = 0; i < len; ++i)
                nd.parents[0]->grad[off + i] += c * (nd.grad[off + i] - xn->val[off + i] * dot / nrm2);
        }
    });
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t off = g * static_cast<std::size_t>(len);
        double nrm2 = 0.0;
        for (int i = 0; i < len; ++i) nrm2 += x.value()[off + i] * x.value()[off + i];
        const double nrm = std::sqrt(nrm2);
        const double c = nrm == 0.0 ? 0.0 : s / nrm;
        for (int i = 0; i < len; ++i) out.value()[off + i] = c * x.value()[off + i];
    }
    return out;
}

}  // namespace detail

// Scales the whole tensor so the mean squared value equals target_power.
inline Tensor power_normalize(const Tensor& x, double target_power) {
    return detail::scaled_norm_groups(x, static_cast<int>(x.size()), target_power, "power_normalize");
}

// Per-row variant for batched (N, L) tensors.
inline Tensor power_normalize_rows(const Tensor& x, double target_power) {
    shape_require(x.shape().size() == 2, "power_normalize_rows: expected rank-2 input");
    return detail::scaled_norm_groups(x, x.shape()[1], target_power, "power_normalize_rows");
}

// Within each row, normalizes every contiguous group of group_len values to
// unit L2 norm.
inline Tensor l2_normalize_groups(const Tensor& x, int group_len) {
    return detail::scaled_norm_groups(x, group_len, 1.0 / group_len, "l2_normalize_groups");
}

// ---- complex composite -------------------------------------------------------

// (ar + i*ai) * (br + i*bi), all tensors same shape.
inline std::pair<Tensor, Tensor> complex_mul(const Tensor& ar, const Tensor& ai, const Tensor& br,
                                             const Tensor& bi) {
    Tensor re = sub(mul(ar, br), mul(ai, bi));
    Tensor im = add(mul(ar, bi), mul(ai, br));
    return {re, im};
}

// ---- backward ------------------------------------------------------------------

inline void backward(const Tensor& loss) {
    shape_require(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.node()->tracked && !loss.node()->requires_grad) return;  // constant graph: nothing to do

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->tracked && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order)
        if (!n->requires_grad) n->grad.assign(n->val.size(), 0.0);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }

    for (Node* n : order)
        for (double g : n->grad)
            if (!std::isfinite(g))
                throw ComputeError(std::string("backward: non-finite gradient in op ") + n->op);
}

}  // namespace csifb::ad
