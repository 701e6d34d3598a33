#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation. The op set
// covers exactly what the segmentation network needs: elementwise arithmetic
// and activations, linear maps, 2-D (de)convolutions, deformable convolution,
// layer norm, bilinear upsampling, channel reductions and reductions to
// scalars. Everything runs single-threaded on the reference path.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "msmu/common.hpp"

namespace msmu {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::string name;  // set on parameter leaves
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;  // accumulates into parents' grads

    long long size() const { return static_cast<long long>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node>();
        long long count = numel(shape);
        check(count >= 0, "tensor shape has negative extent: ", shape_str(shape));
        n->shape = std::move(shape);
        n->data.assign(static_cast<size_t>(count), value);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        check(numel(shape) == static_cast<long long>(data.size()),
              "tensor data length ", data.size(), " does not match shape ", shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    long long size() const { return n_->size(); }

    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    bool has_grad() const { return n_ && n_->grad.size() == n_->data.size(); }
    std::vector<double>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    const std::vector<double>& grad() const { return n_->grad; }
    void zero_grad() { n_->grad.assign(n_->data.size(), 0.0); }
    void drop_grad() { n_->grad.clear(); }

    const std::string& name() const { return n_->name; }
    void set_name(std::string name) { n_->name = std::move(name); }

    double item() const {
        check(n_ && n_->size() == 1, "item() requires a scalar tensor");
        return n_->data[0];
    }

    // Reverse pass from a scalar. Gradients of every tensor reachable through
    // the graph are reset, then populated by accumulation (shared
    // subexpressions sum, they do not overwrite).
    void backward() const {
        check(n_ && n_->size() == 1, "backward() must start from a scalar, got shape ",
              n_ ? shape_str(n_->shape) : "[]");
        std::vector<detail::Node*> order;
        topo_sort(order);
        for (detail::Node* node : order) {
            if (node->requires_grad) {
                node->grad.assign(node->data.size(), 0.0);
            }
        }
        n_->grad.assign(1, 1.0);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward) (*it)->backward();
        }
    }

    std::shared_ptr<detail::Node> node() const { return n_; }

    // Same data, detached from the graph.
    Tensor detach() const {
        auto n = std::make_shared<detail::Node>();
        n->shape = n_->shape;
        n->data = n_->data;
        return Tensor(std::move(n));
    }

private:
    void topo_sort(std::vector<detail::Node*>& order) const {
        std::unordered_set<detail::Node*> seen;
        std::vector<std::pair<detail::Node*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* p = node->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) {
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<detail::Node> n_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::initializer_list<Tensor> inputs) {
    auto n = std::make_shared<Node>();
    long long count = numel(shape);
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(count), 0.0);
    for (const Tensor& t : inputs) {
        if (!t.defined()) continue;
        if (t.requires_grad()) n->requires_grad = true;
        n->parents.push_back(t.node());
    }
    return Tensor(std::move(n));
}

// Row-major strides with zeros on broadcast (size-1) axes.
inline std::vector<long long> bcast_strides(const Shape& operand, const Shape& out) {
    std::vector<long long> st(out.size(), 0);
    long long acc = 1;
    for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
        size_t u = static_cast<size_t>(i);
        st[u] = (operand[u] == 1 && out[u] != 1) ? 0 : acc;
        acc *= operand[u];
    }
    return st;
}

// Visits every element of `out` with the linear offsets of both operands.
template <class F>
inline void for_each_bcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
    const long long n = numel(out);
    if (a == b) {
        for (long long i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const auto sa = bcast_strides(a, out);
    const auto sb = bcast_strides(b, out);
    const int r = static_cast<int>(out.size());
    std::vector<int> idx(static_cast<size_t>(r), 0);
    long long oa = 0, ob = 0;
    for (long long i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (int ax = r - 1; ax >= 0; --ax) {
            size_t u = static_cast<size_t>(ax);
            ++idx[u];
            oa += sa[u];
            ob += sb[u];
            if (idx[u] < out[u]) break;
            oa -= sa[u] * out[u];
            ob -= sb[u] * out[u];
            idx[u] = 0;
        }
    }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    check(a.size() == b.size(), op, ": operands must have equal rank, got ", shape_str(a),
          " vs ", shape_str(b));
    Shape out(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1) {
            out[i] = a[i];
        } else if (a[i] == 1) {
            out[i] = b[i];
        } else {
            fail(op, ": axis ", i, " not broadcastable: ", shape_str(a), " vs ", shape_str(b));
        }
    }
    return out;
}

}  // namespace detail

// -------------------- elementwise unary --------------------

// f: value -> value, df: (x, y) -> dy/dx
template <class F, class DF>
inline Tensor unary_op(const Tensor& a, F&& f, DF&& df) {
    Tensor out = detail::make_result(a.shape(), {a});
    const auto& xd = a.data();
    auto& yd = out.data();
    for (size_t i = 0; i < xd.size(); ++i) yd[i] = f(xd[i]);
    if (out.requires_grad()) {
        auto an = a.node();
        auto on = out.node();
        out.node()->backward = [an = an.get(), on = on.get(), df]() {
            an->ensure_grad();
            for (size_t i = 0; i < an->data.size(); ++i) {
                an->grad[i] += on->grad[i] * df(an->data[i], on->data[i]);
            }
        };
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    // subgradient at 0 is 0
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a,
        [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& a) {
    return unary_op(
        a,
        [](double x) {
            double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return x * s;
        },
        [](double x, double) {
            double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Tensor softplus(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Tensor exp_op(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log_op(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor neg(const Tensor& a) {
    return unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary_op(
        a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Tensor scale(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

// -------------------- elementwise binary (trailing-1 broadcasting) --------------------

namespace detail {

// combine: (a, b) -> out; da/db: (a, b, g) -> gradient contribution
template <class F, class DA, class DB>
inline Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F&& f, DA&& da, DB&& db) {
    Shape os = broadcast_shape(a.shape(), b.shape(), name);
    Tensor out = make_result(os, {a, b});
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for_each_bcast(os, a.shape(), b.shape(),
                   [&](long long i, long long ia, long long ib) { od[i] = f(ad[ia], bd[ib]); });
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        Shape ash = a.shape(), bsh = b.shape(), osh = os;
        out.node()->backward = [an = an.get(), bn = bn.get(), on = on.get(), ash, bsh, osh, da, db]() {
            const bool ga = an->requires_grad;
            const bool gb = bn->requires_grad;
            if (ga) an->ensure_grad();
            if (gb) bn->ensure_grad();
            for_each_bcast(osh, ash, bsh, [&](long long i, long long ia, long long ib) {
                const double g = on->grad[i];
                if (ga) an->grad[ia] += da(an->data[ia], bn->data[ib], g);
                if (gb) bn->grad[ib] += db(an->data[ia], bn->data[ib], g);
            });
        };
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y, double g) { return g * y; },
        [](double x, double, double g) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y, double g) { return g / y; },
        [](double x, double y, double g) { return -g * x / (y * y); });
}

// -------------------- reductions --------------------

inline Tensor sum_all(const Tensor& a) {
    Tensor out = detail::make_result({1}, {a});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out.data()[0] = acc;
    if (out.requires_grad()) {
        auto an = a.node();
        auto on = out.node();
        out.node()->backward = [an = an.get(), on = on.get()]() {
            an->ensure_grad();
            const double g = on->grad[0];
            for (auto& gv : an->grad) gv += g;
        };
    }
    return out;
}

inline Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

// Sums everything but the leading (batch) axis: [B, ...] -> [B].
inline Tensor sum_per_image(const Tensor& a) {
    check(a.rank() >= 1, "sum_per_image: rank must be >= 1");
    const int batch = a.dim(0);
    const long long inner = a.size() / batch;
    Tensor out = detail::make_result({batch}, {a});
    const auto& xd = a.data();
    auto& yd = out.data();
    for (int b = 0; b < batch; ++b) {
        double acc = 0.0;
        const double* row = xd.data() + b * inner;
        for (long long i = 0; i < inner; ++i) acc += row[i];
        yd[static_cast<size_t>(b)] = acc;
    }
    if (out.requires_grad()) {
        auto an = a.node();
        auto on = out.node();
        out.node()->backward = [an = an.get(), on = on.get(), batch, inner]() {
            an->ensure_grad();
            for (int b = 0; b < batch; ++b) {
                const double g = on->grad[static_cast<size_t>(b)];
                double* row = an->grad.data() + b * inner;
                for (long long i = 0; i < inner; ++i) row[i] += g;
            }
        };
    }
    return out;
}

// -------------------- shape ops --------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    check(numel(shape) == a.size(), "reshape: ", shape_str(a.shape()), " has ", a.size(),
          " elements, target ", shape_str(shape), " has ", numel(shape));
    Tensor out = detail::make_result(std::move(shape), {a});
    out.data() = a.data();
    if (out.requires_grad()) {
        auto an = a.node();
        auto on = out.node();
        out.node()->backward = [an = an.get(), on = on.get()]() {
            an->ensure_grad();
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
        };
    }
    return out;
}

inline Tensor concat_channels(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "concat_channels: empty input list");
    const Tensor& first = xs.front();
    check(first.rank() == 4, "concat_channels: expects [B,C,H,W] tensors");
    const int B = first.dim(0), H = first.dim(2), W = first.dim(3);
    int ctotal = 0;
    for (const Tensor& t : xs) {
        check(t.rank() == 4 && t.dim(0) == B && t.dim(2) == H && t.dim(3) == W,
              "concat_channels: mismatched non-channel axes: ", shape_str(t.shape()), " vs ",
              shape_str(first.shape()));
        ctotal += t.dim(1);
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = {B, ctotal, H, W};
    n->data.assign(static_cast<size_t>(numel(n->shape)), 0.0);
    for (const Tensor& t : xs) {
        if (t.requires_grad()) n->requires_grad = true;
        n->parents.push_back(t.node());
    }
    Tensor out(n);
    const long long plane = static_cast<long long>(H) * W;
    auto& od = out.data();
    for (int b = 0; b < B; ++b) {
        long long coff = 0;
        for (const Tensor& t : xs) {
            const int c = t.dim(1);
            const double* src = t.data().data() + static_cast<long long>(b) * c * plane;
            double* dst = od.data() + (static_cast<long long>(b) * ctotal + coff) * plane;
            std::copy(src, src + static_cast<long long>(c) * plane, dst);
            coff += c;
        }
    }
    if (out.requires_grad()) {
        std::vector<int> widths;
        for (const Tensor& t : xs) widths.push_back(t.dim(1));
        auto on = out.node();
        out.node()->backward = [on = on.get(), widths, B, ctotal, plane]() {
            for (int b = 0; b < B; ++b) {
                long long coff = 0;
                for (size_t k = 0; k < widths.size(); ++k) {
                    detail::Node* p = on->parents[k].get();
                    const int c = widths[k];
                    if (p->requires_grad) {
                        p->ensure_grad();
                        const double* src =
                            on->grad.data() + (static_cast<long long>(b) * ctotal + coff) * plane;
                        double* dst = p->grad.data() + static_cast<long long>(b) * c * plane;
                        for (long long i = 0; i < static_cast<long long>(c) * plane; ++i) dst[i] += src[i];
                    }
                    coff += c;
                }
            }
        };
    }
    return out;
}

inline Tensor slice_channels(const Tensor& x, int c0, int c1) {
    check(x.rank() == 4, "slice_channels: expects [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels: range [", c0, ",", c1,
          ") invalid for C=", C);
    const int c = c1 - c0;
    const long long plane = static_cast<long long>(H) * W;
    Tensor out = detail::make_result({B, c, H, W}, {x});
    auto& od = out.data();
    for (int b = 0; b < B; ++b) {
        const double* src = x.data().data() + (static_cast<long long>(b) * C + c0) * plane;
        double* dst = od.data() + static_cast<long long>(b) * c * plane;
        std::copy(src, src + static_cast<long long>(c) * plane, dst);
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), on = on.get(), B, C, c0, c, plane]() {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const double* src = on->grad.data() + static_cast<long long>(b) * c * plane;
                double* dst = xn->grad.data() + (static_cast<long long>(b) * C + c0) * plane;
                for (long long i = 0; i < static_cast<long long>(c) * plane; ++i) dst[i] += src[i];
            }
        };
    }
    return out;
}

// -------------------- linear --------------------

// y[..., e] = sum_d x[..., d] * w[d, e] (+ bias[e]); bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
    check(w.rank() == 2, "linear: weight must be [D,E], got ", shape_str(w.shape()));
    const int d_in = w.dim(0), d_out = w.dim(1);
    check(x.dim(x.rank() - 1) == d_in, "linear: last axis of x is ", x.dim(x.rank() - 1),
          " but weight expects ", d_in);
    if (bias.defined()) {
        check(bias.size() == d_out, "linear: bias length ", bias.size(), " != ", d_out);
    }
    Shape os = x.shape();
    os.back() = d_out;
    const long long rows = x.size() / d_in;
    Tensor out = detail::make_result(os, {x, w, bias});
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    double* yd = out.data().data();
    for (long long m = 0; m < rows; ++m) {
        double* yrow = yd + m * d_out;
        if (bias.defined()) {
            const double* bd = bias.data().data();
            for (int e = 0; e < d_out; ++e) yrow[e] = bd[e];
        }
        const double* xrow = xd + m * d_in;
        for (int d = 0; d < d_in; ++d) {
            const double xv = xrow[d];
            const double* wrow = wd + static_cast<long long>(d) * d_out;
            for (int e = 0; e < d_out; ++e) yrow[e] += xv * wrow[e];
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), wn = wn.get(), bn = bn.get(), on = on.get(), rows,
                                d_in, d_out]() {
            const double* g = on->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (long long m = 0; m < rows; ++m) {
                    const double* grow = g + m * d_out;
                    double* gxrow = xn->grad.data() + m * d_in;
                    for (int d = 0; d < d_in; ++d) {
                        const double* wrow = wn->data.data() + static_cast<long long>(d) * d_out;
                        double acc = 0.0;
                        for (int e = 0; e < d_out; ++e) acc += grow[e] * wrow[e];
                        gxrow[d] += acc;
                    }
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (long long m = 0; m < rows; ++m) {
                    const double* grow = g + m * d_out;
                    const double* xrow = xn->data.data() + m * d_in;
                    for (int d = 0; d < d_in; ++d) {
                        const double xv = xrow[d];
                        double* gwrow = wn->grad.data() + static_cast<long long>(d) * d_out;
                        for (int e = 0; e < d_out; ++e) gwrow[e] += xv * grow[e];
                    }
                }
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (long long m = 0; m < rows; ++m) {
                    const double* grow = g + m * d_out;
                    for (int e = 0; e < d_out; ++e) bn->grad[static_cast<size_t>(e)] += grow[e];
                }
            }
        };
    }
    return out;
}

// -------------------- conv2d --------------------

namespace detail {

inline void conv_out_range(int extent, int off, int stride, int out_extent, int& lo, int& hi) {
    // valid o satisfy 0 <= o*stride + off < extent
    lo = off < 0 ? ceil_div(-off, stride) : 0;
    hi = std::min(out_extent - 1, (extent - 1 - off) / stride);
}

}  // namespace detail

// Cross-correlation. Output spatial size floor((H + 2p - d*(k-1) - 1)/s) + 1.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = {}, int stride = 1,
                     int padding = 0, int dilation = 1) {
    check(x.rank() == 4, "conv2d: input must be [B,Cin,H,W], got ", shape_str(x.shape()));
    check(w.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got ", shape_str(w.shape()));
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(1) == Ci, "conv2d: channel axis mismatch: input has Cin=", Ci,
          " but weight expects Cin=", w.dim(1));
    check(stride >= 1 && dilation >= 1 && padding >= 0, "conv2d: bad stride/padding/dilation");
    if (bias.defined()) check(bias.size() == Co, "conv2d: bias length ", bias.size(), " != Cout=", Co);
    const int Ho = (H + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    const int Wo = (W + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    check(Ho >= 1 && Wo >= 1, "conv2d: kernel ", kh, "x", kw, " does not fit input ", H, "x", W,
          " with padding ", padding);

    Tensor out = detail::make_result({B, Co, Ho, Wo}, {x, w, bias});
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    double* yd = out.data().data();
    const long long xplane = static_cast<long long>(H) * W;
    const long long yplane = static_cast<long long>(Ho) * Wo;

    for (int b = 0; b < B; ++b) {
        for (int co = 0; co < Co; ++co) {
            double* ybase = yd + (static_cast<long long>(b) * Co + co) * yplane;
            if (bias.defined()) {
                const double bv = bias.data()[static_cast<size_t>(co)];
                for (long long i = 0; i < yplane; ++i) ybase[i] = bv;
            }
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xbase = xd + (static_cast<long long>(b) * Ci + ci) * xplane;
                const double* wbase = wd + ((static_cast<long long>(co) * Ci + ci) * kh) * kw;
                for (int u = 0; u < kh; ++u) {
                    const int hoff = u * dilation - padding;
                    int oh_lo, oh_hi;
                    detail::conv_out_range(H, hoff, stride, Ho, oh_lo, oh_hi);
                    for (int v = 0; v < kw; ++v) {
                        const double wv = wbase[u * kw + v];
                        if (wv == 0.0) continue;
                        const int woff = v * dilation - padding;
                        int ow_lo, ow_hi;
                        detail::conv_out_range(W, woff, stride, Wo, ow_lo, ow_hi);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const double* xrow = xbase + static_cast<long long>(oh * stride + hoff) * W;
                            double* yrow = ybase + static_cast<long long>(oh) * Wo;
                            if (stride == 1) {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow) yrow[ow] += wv * xrow[ow + woff];
                            } else {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    yrow[ow] += wv * xrow[ow * stride + woff];
                            }
                        }
                    }
                }
            }
        }
    }

    if (out.requires_grad()) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), wn = wn.get(), bn = bn.get(), on = on.get(), B, Ci,
                                Co, H, W, Ho, Wo, kh, kw, stride, padding, dilation, xplane,
                                yplane]() {
            const double* g = on->grad.data();
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                for (int co = 0; co < Co; ++co) {
                    const double* gbase = g + (static_cast<long long>(b) * Co + co) * yplane;
                    for (int ci = 0; ci < Ci; ++ci) {
                        const double* xbase = xn->data.data() + (static_cast<long long>(b) * Ci + ci) * xplane;
                        double* gxbase =
                            xn->requires_grad
                                ? xn->grad.data() + (static_cast<long long>(b) * Ci + ci) * xplane
                                : nullptr;
                        const long long widx0 = (static_cast<long long>(co) * Ci + ci) * kh * kw;
                        for (int u = 0; u < kh; ++u) {
                            const int hoff = u * dilation - padding;
                            int oh_lo, oh_hi;
                            detail::conv_out_range(H, hoff, stride, Ho, oh_lo, oh_hi);
                            for (int v = 0; v < kw; ++v) {
                                const int woff = v * dilation - padding;
                                int ow_lo, ow_hi;
                                detail::conv_out_range(W, woff, stride, Wo, ow_lo, ow_hi);
                                const double wv = wn->data[static_cast<size_t>(widx0 + u * kw + v)];
                                double wacc = 0.0;
                                for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                    const double* grow = gbase + static_cast<long long>(oh) * Wo;
                                    const long long xrow0 = static_cast<long long>(oh * stride + hoff) * W;
                                    if (wn->requires_grad) {
                                        const double* xrow = xbase + xrow0;
                                        if (stride == 1) {
                                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                                wacc += grow[ow] * xrow[ow + woff];
                                        } else {
                                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                                wacc += grow[ow] * xrow[ow * stride + woff];
                                        }
                                    }
                                    if (gxbase) {
                                        double* gxrow = gxbase + xrow0;
                                        if (stride == 1) {
                                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                                gxrow[ow + woff] += wv * grow[ow];
                                        } else {
                                            for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                                gxrow[ow * stride + woff] += wv * grow[ow];
                                        }
                                    }
                                }
                                if (wn->requires_grad) wn->grad[static_cast<size_t>(widx0 + u * kw + v)] += wacc;
                            }
                        }
                    }
                    if (bn && bn->requires_grad) {
                        bn->ensure_grad();
                        double acc = 0.0;
                        for (long long i = 0; i < yplane; ++i) acc += gbase[i];
                        bn->grad[static_cast<size_t>(co)] += acc;
                    }
                }
            }
        };
    }
    return out;
}

// Transposed convolution, weight [Cin,Cout,k,k], no padding.
// Output spatial size (H-1)*stride + k.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias = {},
                               int stride = 1) {
    check(x.rank() == 4, "conv_transpose2d: input must be [B,Cin,H,W]");
    check(w.rank() == 4, "conv_transpose2d: weight must be [Cin,Cout,k,k]");
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(0) == Ci, "conv_transpose2d: channel axis mismatch: input Cin=", Ci,
          " weight expects Cin=", w.dim(0));
    const int Ho = (H - 1) * stride + kh;
    const int Wo = (W - 1) * stride + kw;
    Tensor out = detail::make_result({B, Co, Ho, Wo}, {x, w, bias});
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    double* yd = out.data().data();
    const long long xplane = static_cast<long long>(H) * W;
    const long long yplane = static_cast<long long>(Ho) * Wo;
    for (int b = 0; b < B; ++b) {
        for (int co = 0; co < Co; ++co) {
            double* ybase = yd + (static_cast<long long>(b) * Co + co) * yplane;
            if (bias.defined()) {
                const double bv = bias.data()[static_cast<size_t>(co)];
                for (long long i = 0; i < yplane; ++i) ybase[i] = bv;
            }
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xbase = xd + (static_cast<long long>(b) * Ci + ci) * xplane;
                const double* wbase = wd + ((static_cast<long long>(ci) * Co + co) * kh) * kw;
                for (int ih = 0; ih < H; ++ih) {
                    for (int iw = 0; iw < W; ++iw) {
                        const double xv = xbase[static_cast<long long>(ih) * W + iw];
                        if (xv == 0.0) continue;
                        double* ydst = ybase + static_cast<long long>(ih * stride) * Wo + iw * stride;
                        for (int u = 0; u < kh; ++u) {
                            for (int v = 0; v < kw; ++v) {
                                ydst[static_cast<long long>(u) * Wo + v] += xv * wbase[u * kw + v];
                            }
                        }
                    }
                }
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), wn = wn.get(), bn = bn.get(), on = on.get(), B, Ci,
                                Co, H, W, Ho, Wo, kh, kw, stride, xplane, yplane]() {
            const double* g = on->grad.data();
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                for (int ci = 0; ci < Ci; ++ci) {
                    const double* xbase = xn->data.data() + (static_cast<long long>(b) * Ci + ci) * xplane;
                    double* gxbase = xn->requires_grad
                                         ? xn->grad.data() + (static_cast<long long>(b) * Ci + ci) * xplane
                                         : nullptr;
                    for (int co = 0; co < Co; ++co) {
                        const double* gbase = g + (static_cast<long long>(b) * Co + co) * yplane;
                        const long long widx0 = (static_cast<long long>(ci) * Co + co) * kh * kw;
                        for (int ih = 0; ih < H; ++ih) {
                            for (int iw = 0; iw < W; ++iw) {
                                const double* grow =
                                    gbase + static_cast<long long>(ih * stride) * Wo + iw * stride;
                                const double xv = xbase[static_cast<long long>(ih) * W + iw];
                                double gx = 0.0;
                                for (int u = 0; u < kh; ++u) {
                                    for (int v = 0; v < kw; ++v) {
                                        const double gv = grow[static_cast<long long>(u) * Wo + v];
                                        gx += gv * wn->data[static_cast<size_t>(widx0 + u * kw + v)];
                                        if (wn->requires_grad)
                                            wn->grad[static_cast<size_t>(widx0 + u * kw + v)] += gv * xv;
                                    }
                                }
                                if (gxbase) gxbase[static_cast<long long>(ih) * W + iw] += gx;
                            }
                        }
                    }
                }
                if (bn && bn->requires_grad) {
                    bn->ensure_grad();
                    for (int co = 0; co < Co; ++co) {
                        const double* gbase = g + (static_cast<long long>(b) * Co + co) * yplane;
                        double acc = 0.0;
                        for (long long i = 0; i < yplane; ++i) acc += gbase[i];
                        bn->grad[static_cast<size_t>(co)] += acc;
                    }
                }
            }
        };
    }
    return out;
}

// -------------------- deformable conv2d --------------------

namespace detail {

struct BilinearTap {
    int iy0, ix0;
    double ly, lx;
    bool inside;  // any corner in bounds
};

inline double bilinear_sample(const double* plane, int H, int W, double py, double px) {
    const int y0 = static_cast<int>(std::floor(py));
    const int x0 = static_cast<int>(std::floor(px));
    const double ly = py - y0, lx = px - x0;
    double v = 0.0;
    for (int dy = 0; dy < 2; ++dy) {
        const int y = y0 + dy;
        if (y < 0 || y >= H) continue;
        const double wy = dy ? ly : 1.0 - ly;
        for (int dx = 0; dx < 2; ++dx) {
            const int x = x0 + dx;
            if (x < 0 || x >= W) continue;
            v += wy * (dx ? lx : 1.0 - lx) * plane[static_cast<long long>(y) * W + x];
        }
    }
    return v;
}

}  // namespace detail

// 3x3 stride-1 same-size deformable convolution. offsets[B, 2*k*k, H, W]
// holds (dy, dx) per kernel tap; sampling outside the frame reads 0.
inline Tensor deformable_conv2d(const Tensor& x, const Tensor& w, const Tensor& offsets,
                                const Tensor& bias = {}) {
    check(x.rank() == 4, "deformable_conv2d: input must be [B,C,H,W]");
    check(w.rank() == 4, "deformable_conv2d: weight must be [Cout,Cin,k,k]");
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), k = w.dim(2);
    check(w.dim(1) == Ci, "deformable_conv2d: channel axis mismatch: input Cin=", Ci,
          " weight expects Cin=", w.dim(1));
    check(w.dim(3) == k && k % 2 == 1, "deformable_conv2d: kernel must be odd square");
    const int K = k * k;
    check(offsets.rank() == 4 && offsets.dim(0) == B && offsets.dim(2) == H && offsets.dim(3) == W,
          "deformable_conv2d: offsets must be [B,2*k*k,H,W]");
    check(offsets.dim(1) == 2 * K, "deformable_conv2d: offset channel count ", offsets.dim(1),
          " != 2*k*k = ", 2 * K);
    const int pad = (k - 1) / 2;
    const long long plane = static_cast<long long>(H) * W;

    Tensor out = detail::make_result({B, Co, H, W}, {x, w, offsets, bias});
    // sampled input patches, kept for the backward pass
    auto cols = std::make_shared<std::vector<double>>(
        static_cast<size_t>(B) * Ci * K * plane, 0.0);
    const double* xd = x.data().data();
    const double* od = offsets.data().data();
    double* yd = out.data().data();

    for (int b = 0; b < B; ++b) {
        double* col = cols->data() + static_cast<long long>(b) * Ci * K * plane;
        const double* obase = od + static_cast<long long>(b) * 2 * K * plane;
        for (int t = 0; t < K; ++t) {
            const int u = t / k, v = t % k;
            const double* offy = obase + static_cast<long long>(2 * t) * plane;
            const double* offx = obase + static_cast<long long>(2 * t + 1) * plane;
            for (long long p = 0; p < plane; ++p) {
                const int oh = static_cast<int>(p / W), ow = static_cast<int>(p % W);
                const double py = oh + u - pad + offy[p];
                const double px = ow + v - pad + offx[p];
                for (int ci = 0; ci < Ci; ++ci) {
                    col[(static_cast<long long>(ci) * K + t) * plane + p] = detail::bilinear_sample(
                        xd + (static_cast<long long>(b) * Ci + ci) * plane, H, W, py, px);
                }
            }
        }
        const double* wd = w.data().data();
        for (int co = 0; co < Co; ++co) {
            double* yrow = yd + (static_cast<long long>(b) * Co + co) * plane;
            const double bv = bias.defined() ? bias.data()[static_cast<size_t>(co)] : 0.0;
            for (long long p = 0; p < plane; ++p) yrow[p] = bv;
            const double* wrow = wd + static_cast<long long>(co) * Ci * K;
            for (int q = 0; q < Ci * K; ++q) {
                const double wv = wrow[q];
                if (wv == 0.0) continue;
                const double* crow = col + static_cast<long long>(q) * plane;
                for (long long p = 0; p < plane; ++p) yrow[p] += wv * crow[p];
            }
        }
    }

    if (out.requires_grad()) {
        auto xn = x.node();
        auto wn = w.node();
        auto ofn = offsets.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), wn = wn.get(), ofn = ofn.get(), bn = bn.get(),
                                on = on.get(), cols, B, Ci, Co, H, W, k, K, pad, plane]() {
            const double* g = on->grad.data();
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            if (ofn->requires_grad) ofn->ensure_grad();
            std::vector<double> gcol(static_cast<size_t>(Ci) * K * plane);
            for (int b = 0; b < B; ++b) {
                const double* col = cols->data() + static_cast<long long>(b) * Ci * K * plane;
                const double* gbase = g + static_cast<long long>(b) * Co * plane;
                // dW and column gradients
                std::fill(gcol.begin(), gcol.end(), 0.0);
                for (int co = 0; co < Co; ++co) {
                    const double* grow = gbase + static_cast<long long>(co) * plane;
                    double* gwrow =
                        wn->requires_grad ? wn->grad.data() + static_cast<long long>(co) * Ci * K : nullptr;
                    const double* wrow = wn->data.data() + static_cast<long long>(co) * Ci * K;
                    for (int q = 0; q < Ci * K; ++q) {
                        const double* crow = col + static_cast<long long>(q) * plane;
                        double* gcrow = gcol.data() + static_cast<long long>(q) * plane;
                        const double wv = wrow[q];
                        double wacc = 0.0;
                        for (long long p = 0; p < plane; ++p) {
                            wacc += grow[p] * crow[p];
                            gcrow[p] += wv * grow[p];
                        }
                        if (gwrow) gwrow[q] += wacc;
                    }
                    if (bn && bn->requires_grad) {
                        bn->ensure_grad();
                        double acc = 0.0;
                        for (long long p = 0; p < plane; ++p) acc += grow[p];
                        bn->grad[static_cast<size_t>(co)] += acc;
                    }
                }
                // scatter through the bilinear sampler
                const double* obase = ofn->data.data() + static_cast<long long>(b) * 2 * K * plane;
                for (int t = 0; t < K; ++t) {
                    const int u = t / k, v = t % k;
                    const double* offy = obase + static_cast<long long>(2 * t) * plane;
                    const double* offx = obase + static_cast<long long>(2 * t + 1) * plane;
                    double* goffy = ofn->requires_grad
                                        ? ofn->grad.data() + (static_cast<long long>(b) * 2 * K + 2 * t) * plane
                                        : nullptr;
                    double* goffx = ofn->requires_grad ? goffy + plane : nullptr;
                    for (long long p = 0; p < plane; ++p) {
                        const int oh = static_cast<int>(p / W), ow = static_cast<int>(p % W);
                        const double py = oh + u - pad + offy[p];
                        const double px = ow + v - pad + offx[p];
                        const int y0 = static_cast<int>(std::floor(py));
                        const int x0 = static_cast<int>(std::floor(px));
                        const double ly = py - y0, lx = px - x0;
                        double dvdy = 0.0, dvdx = 0.0;
                        for (int ci = 0; ci < Ci; ++ci) {
                            const double gc = gcol[(static_cast<long long>(ci) * K + t) * plane + p];
                            if (gc == 0.0 && !ofn->requires_grad) continue;
                            const double* xplane =
                                xn->data.data() + (static_cast<long long>(b) * Ci + ci) * plane;
                            double* gxplane =
                                xn->requires_grad
                                    ? xn->grad.data() + (static_cast<long long>(b) * Ci + ci) * plane
                                    : nullptr;
                            double vy = 0.0, vx = 0.0;
                            for (int dy = 0; dy < 2; ++dy) {
                                const int yy = y0 + dy;
                                if (yy < 0 || yy >= H) continue;
                                const double wy = dy ? ly : 1.0 - ly;
                                const double sy = dy ? 1.0 : -1.0;
                                for (int dx = 0; dx < 2; ++dx) {
                                    const int xx = x0 + dx;
                                    if (xx < 0 || xx >= W) continue;
                                    const double wx = dx ? lx : 1.0 - lx;
                                    const double sx = dx ? 1.0 : -1.0;
                                    const double xv = xplane[static_cast<long long>(yy) * W + xx];
                                    vy += sy * wx * xv;
                                    vx += sx * wy * xv;
                                    if (gxplane)
                                        gxplane[static_cast<long long>(yy) * W + xx] += gc * wy * wx;
                                }
                            }
                            dvdy += gc * vy;
                            dvdx += gc * vx;
                        }
                        if (goffy) {
                            goffy[p] += dvdy;
                            goffx[p] += dvdx;
                        }
                    }
                }
            }
        };
    }
    return out;
}

// -------------------- layer norm --------------------

// Normalizes the last axis to zero mean / unit variance, then applies the
// per-feature affine. eps = 1e-5 inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                         double eps = 1e-5) {
    const int D = x.dim(x.rank() - 1);
    check(D >= 1, "layer_norm: last axis must be >= 1");
    check(gain.size() == D && shift.size() == D, "layer_norm: affine size mismatch: D=", D,
          " gain=", gain.size(), " shift=", shift.size());
    const long long rows = x.size() / D;
    Tensor out = detail::make_result(x.shape(), {x, gain, shift});
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    auto means = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    const double* xd = x.data().data();
    const double* gd = gain.data().data();
    const double* sd = shift.data().data();
    double* yd = out.data().data();
    for (long long m = 0; m < rows; ++m) {
        const double* row = xd + m * D;
        double mean = 0.0;
        for (int d = 0; d < D; ++d) mean += row[d];
        mean /= D;
        double var = 0.0;
        for (int d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
        var /= D;
        const double is = 1.0 / std::sqrt(var + eps);
        (*means)[static_cast<size_t>(m)] = mean;
        (*inv_std)[static_cast<size_t>(m)] = is;
        double* yrow = yd + m * D;
        for (int d = 0; d < D; ++d) yrow[d] = (row[d] - mean) * is * gd[d] + sd[d];
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto gn = gain.node();
        auto sn = shift.node();
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), gn = gn.get(), sn = sn.get(), on = on.get(), rows, D,
                                inv_std, means]() {
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (sn->requires_grad) sn->ensure_grad();
            for (long long m = 0; m < rows; ++m) {
                const double* row = xn->data.data() + m * D;
                const double* grow = on->grad.data() + m * D;
                const double mean = (*means)[static_cast<size_t>(m)];
                const double is = (*inv_std)[static_cast<size_t>(m)];
                double sum_gg = 0.0, sum_ggx = 0.0;
                for (int d = 0; d < D; ++d) {
                    const double xhat = (row[d] - mean) * is;
                    const double gg = grow[d] * gn->data[static_cast<size_t>(d)];
                    sum_gg += gg;
                    sum_ggx += gg * xhat;
                    if (gn->requires_grad) gn->grad[static_cast<size_t>(d)] += grow[d] * xhat;
                    if (sn->requires_grad) sn->grad[static_cast<size_t>(d)] += grow[d];
                }
                if (xn->requires_grad) {
                    double* gxrow = xn->grad.data() + m * D;
                    for (int d = 0; d < D; ++d) {
                        const double xhat = (row[d] - mean) * is;
                        const double gg = grow[d] * gn->data[static_cast<size_t>(d)];
                        gxrow[d] += is * (gg - sum_gg / D - xhat * sum_ggx / D);
                    }
                }
            }
        };
    }
    return out;
}

// -------------------- bilinear upsampling --------------------

namespace detail {

struct LerpTap {
    int i0, i1;
    double frac;
};

// half-pixel centers; samples beyond the frame clamp to the border
inline std::vector<LerpTap> lerp_taps(int out_extent, int in_extent, int factor) {
    std::vector<LerpTap> taps(static_cast<size_t>(out_extent));
    for (int o = 0; o < out_extent; ++o) {
        double src = (o + 0.5) / factor - 0.5;
        if (src < 0.0) src = 0.0;
        if (src > in_extent - 1) src = in_extent - 1;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in_extent - 2) i0 = std::max(0, in_extent - 2);
        const int i1 = std::min(in_extent - 1, i0 + 1);
        taps[static_cast<size_t>(o)] = {i0, i1, src - i0};
    }
    return taps;
}

}  // namespace detail

inline Tensor upsample_bilinear(const Tensor& x, int factor) {
    check(x.rank() == 4, "upsample_bilinear: input must be [B,C,H,W]");
    check(factor >= 1, "upsample_bilinear: factor must be >= 1, got ", factor);
    if (factor == 1) return reshape(x, x.shape());
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = H * factor, Wo = W * factor;
    const auto ytaps = detail::lerp_taps(Ho, H, factor);
    const auto xtaps = detail::lerp_taps(Wo, W, factor);
    Tensor out = detail::make_result({B, C, Ho, Wo}, {x});
    const double* xd = x.data().data();
    double* yd = out.data().data();
    const long long xplane = static_cast<long long>(H) * W;
    const long long yplane = static_cast<long long>(Ho) * Wo;
    for (long long bc = 0; bc < static_cast<long long>(B) * C; ++bc) {
        const double* xp = xd + bc * xplane;
        double* yp = yd + bc * yplane;
        for (int oh = 0; oh < Ho; ++oh) {
            const auto& ty = ytaps[static_cast<size_t>(oh)];
            const double* r0 = xp + static_cast<long long>(ty.i0) * W;
            const double* r1 = xp + static_cast<long long>(ty.i1) * W;
            double* yrow = yp + static_cast<long long>(oh) * Wo;
            for (int ow = 0; ow < Wo; ++ow) {
                const auto& tx = xtaps[static_cast<size_t>(ow)];
                const double top = r0[tx.i0] + tx.frac * (r0[tx.i1] - r0[tx.i0]);
                const double bot = r1[tx.i0] + tx.frac * (r1[tx.i1] - r1[tx.i0]);
                yrow[ow] = top + ty.frac * (bot - top);
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), on = on.get(), B, C, H, W, Ho, Wo, ytaps, xtaps,
                                xplane, yplane]() {
            xn->ensure_grad();
            for (long long bc = 0; bc < static_cast<long long>(B) * C; ++bc) {
                double* gx = xn->grad.data() + bc * xplane;
                const double* gy = on->grad.data() + bc * yplane;
                for (int oh = 0; oh < Ho; ++oh) {
                    const auto& ty = ytaps[static_cast<size_t>(oh)];
                    const double* grow = gy + static_cast<long long>(oh) * Wo;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const auto& tx = xtaps[static_cast<size_t>(ow)];
                        const double g = grow[ow];
                        gx[static_cast<long long>(ty.i0) * W + tx.i0] += (1 - ty.frac) * (1 - tx.frac) * g;
                        gx[static_cast<long long>(ty.i0) * W + tx.i1] += (1 - ty.frac) * tx.frac * g;
                        gx[static_cast<long long>(ty.i1) * W + tx.i0] += ty.frac * (1 - tx.frac) * g;
                        gx[static_cast<long long>(ty.i1) * W + tx.i1] += ty.frac * tx.frac * g;
                    }
                }
            }
        };
    }
    return out;
}

// -------------------- channel reductions --------------------

inline Tensor global_avg_pool(const Tensor& x) {
    check(x.rank() == 4, "global_avg_pool: input must be [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1);
    const long long plane = static_cast<long long>(x.dim(2)) * x.dim(3);
    Tensor out = detail::make_result({B, C, 1, 1}, {x});
    const double* xd = x.data().data();
    auto& od = out.data();
    for (long long bc = 0; bc < static_cast<long long>(B) * C; ++bc) {
        double acc = 0.0;
        const double* p = xd + bc * plane;
        for (long long i = 0; i < plane; ++i) acc += p[i];
        od[static_cast<size_t>(bc)] = acc / plane;
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), on = on.get(), B, C, plane]() {
            xn->ensure_grad();
            for (long long bc = 0; bc < static_cast<long long>(B) * C; ++bc) {
                const double g = on->grad[static_cast<size_t>(bc)] / plane;
                double* p = xn->grad.data() + bc * plane;
                for (long long i = 0; i < plane; ++i) p[i] += g;
            }
        };
    }
    return out;
}

inline Tensor channel_mean(const Tensor& x) {
    check(x.rank() == 4, "channel_mean: input must be [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const long long plane = static_cast<long long>(H) * W;
    Tensor out = detail::make_result({B, 1, H, W}, {x});
    const double* xd = x.data().data();
    double* od = out.data().data();
    for (int b = 0; b < B; ++b) {
        double* orow = od + static_cast<long long>(b) * plane;
        for (long long p = 0; p < plane; ++p) orow[p] = 0.0;
        for (int c = 0; c < C; ++c) {
            const double* xrow = xd + (static_cast<long long>(b) * C + c) * plane;
            for (long long p = 0; p < plane; ++p) orow[p] += xrow[p];
        }
        for (long long p = 0; p < plane; ++p) orow[p] /= C;
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), on = on.get(), B, C, plane]() {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const double* grow = on->grad.data() + static_cast<long long>(b) * plane;
                for (int c = 0; c < C; ++c) {
                    double* gx = xn->grad.data() + (static_cast<long long>(b) * C + c) * plane;
                    for (long long p = 0; p < plane; ++p) gx[p] += grow[p] / C;
                }
            }
        };
    }
    return out;
}

inline Tensor channel_max(const Tensor& x) {
    check(x.rank() == 4, "channel_max: input must be [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const long long plane = static_cast<long long>(H) * W;
    Tensor out = detail::make_result({B, 1, H, W}, {x});
    auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(B) * plane, 0);
    const double* xd = x.data().data();
    double* od = out.data().data();
    for (int b = 0; b < B; ++b) {
        double* orow = od + static_cast<long long>(b) * plane;
        int* arow = argmax->data() + static_cast<long long>(b) * plane;
        const double* x0 = xd + static_cast<long long>(b) * C * plane;
        for (long long p = 0; p < plane; ++p) orow[p] = x0[p];
        for (int c = 1; c < C; ++c) {
            const double* xrow = x0 + static_cast<long long>(c) * plane;
            for (long long p = 0; p < plane; ++p) {
                if (xrow[p] > orow[p]) {
                    orow[p] = xrow[p];
                    arow[p] = c;
                }
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), on = on.get(), B, C, plane, argmax]() {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const double* grow = on->grad.data() + static_cast<long long>(b) * plane;
                const int* arow = argmax->data() + static_cast<long long>(b) * plane;
                for (long long p = 0; p < plane; ++p) {
                    xn->grad[(static_cast<long long>(b) * C + arow[p]) * plane + p] += grow[p];
                }
            }
        };
    }
    return out;
}

// -------------------- depthwise causal 1-D conv --------------------

// y[b,l,d] = bias[d] + sum_j w[d,j] * x[b, l-(k-1)+j, d], zero history.
inline Tensor causal_conv1d_depthwise(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
    check(x.rank() == 3, "causal_conv1d_depthwise: input must be [B,L,D]");
    check(w.rank() == 2, "causal_conv1d_depthwise: weight must be [D,k]");
    const int B = x.dim(0), L = x.dim(1), D = x.dim(2);
    const int k = w.dim(1);
    check(w.dim(0) == D, "causal_conv1d_depthwise: channel axis mismatch: D=", D, " weight has ",
          w.dim(0));
    Tensor out = detail::make_result(x.shape(), {x, w, bias});
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    double* yd = out.data().data();
    for (int b = 0; b < B; ++b) {
        const double* xb = xd + static_cast<long long>(b) * L * D;
        double* yb = yd + static_cast<long long>(b) * L * D;
        for (int l = 0; l < L; ++l) {
            double* yrow = yb + static_cast<long long>(l) * D;
            if (bias.defined()) {
                const double* bd = bias.data().data();
                for (int d = 0; d < D; ++d) yrow[d] = bd[d];
            }
            for (int j = 0; j < k; ++j) {
                const int src = l - (k - 1) + j;
                if (src < 0) continue;
                const double* xrow = xb + static_cast<long long>(src) * D;
                for (int d = 0; d < D; ++d) yrow[d] += wd[static_cast<long long>(d) * k + j] * xrow[d];
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto on = out.node();
        out.node()->backward = [xn = xn.get(), wn = wn.get(), bn = bn.get(), on = on.get(), B, L, D,
                                k]() {
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            if (bn && bn->requires_grad) bn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const double* gb = on->grad.data() + static_cast<long long>(b) * L * D;
                const double* xb = xn->data.data() + static_cast<long long>(b) * L * D;
                for (int l = 0; l < L; ++l) {
                    const double* grow = gb + static_cast<long long>(l) * D;
                    for (int j = 0; j < k; ++j) {
                        const int src = l - (k - 1) + j;
                        if (src < 0) continue;
                        const double* xrow = xb + static_cast<long long>(src) * D;
                        for (int d = 0; d < D; ++d) {
                            const double wv = wn->data[static_cast<size_t>(d) * k + j];
                            if (xn->requires_grad)
                                xn->grad[(static_cast<long long>(b) * L + src) * D + d] += wv * grow[d];
                            if (wn->requires_grad)
                                wn->grad[static_cast<size_t>(d) * k + j] += xrow[d] * grow[d];
                        }
                    }
                    if (bn && bn->requires_grad) {
                        for (int d = 0; d < D; ++d) bn->grad[static_cast<size_t>(d)] += grow[d];
                    }
                }
            }
        };
    }
    return out;
}

// -------------------- init helpers --------------------

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = stddev * rng.normal();
    return t;
}

// Kaiming-style fan-in scaling for conv/linear weights feeding ReLU-ish paths.
inline Tensor he_normal(Shape shape, long long fan_in, Rng& rng, bool requires_grad = true) {
    return randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)), requires_grad);
}

}  // namespace msmu
