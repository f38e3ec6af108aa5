#include "mrdetr/ops.hpp"

#include <algorithm>
#include <cmath>

namespace mrdetr::ad {

using detail::make_result;

namespace {

void pre(OpKind kind, std::initializer_list<const Tensor*> ins) {
    for (auto* t : ins) {
        if (!t->defined()) throw ShapeError(std::string(op_name(kind)) + ": undefined input");
        if (strict()) detail::check_finite(kind, t->values());
    }
}

std::size_t norm_axis(OpKind kind, int axis, std::size_t rank) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
        throw ShapeError(std::string(op_name(kind)) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
    return static_cast<std::size_t>(a);
}

// outer × len × inner view around one axis.
struct AxisView {
    std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
    v.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

struct Broadcast {
    Shape out;
    bool same = false;
    std::vector<std::size_t> ia, ib;
};

Broadcast broadcast(OpKind kind, const Shape& a, const Shape& b) {
    Broadcast bc;
    if (a == b) {
        bc.out = a;
        bc.same = true;
        return bc;
    }
    const std::size_t r = std::max(a.size(), b.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    bc.out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
            throw ShapeError(std::string(op_name(kind)) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        bc.out[i] = std::max(pa[i], pb[i]);
    }
    // Strides with zero on broadcast dims.
    std::vector<std::size_t> sa(r, 0), sb(r, 0);
    std::size_t acc_a = 1, acc_b = 1;
    for (std::size_t i = r; i-- > 0;) {
        sa[i] = pa[i] == 1 ? 0 : acc_a;
        sb[i] = pb[i] == 1 ? 0 : acc_b;
        acc_a *= pa[i];
        acc_b *= pb[i];
    }
    const std::size_t n = numel(bc.out);
    bc.ia.resize(n);
    bc.ib.resize(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t f = 0; f < n; ++f) {
        bc.ia[f] = oa;
        bc.ib[f] = ob;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < bc.out[d]) break;
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
    return bc;
}

// Shared driver for broadcasting binaries. fwd(x, y) gives the value,
// dfa/dfb give partials given (x, y, out).
template <class F, class DA, class DB>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F fwd, DA dfa, DB dfb) {
    pre(kind, {&a, &b});
    auto bc = std::make_shared<Broadcast>(broadcast(kind, a.shape(), b.shape()));
    const std::size_t n = numel(bc->out);
    std::vector<double> out(n);
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    if (bc->same) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[bc->ia[i]], bv[bc->ib[i]]);
    }
    Shape shape = bc->out;
    return make_result(kind, std::move(shape), std::move(out), {a, b}, [bc, dfa, dfb](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        const std::size_t n = self.value.size();
        if (na.requires_grad) na.ensure_grad();
        if (nb.requires_grad) nb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = bc->same ? i : bc->ia[i];
            const std::size_t ib = bc->same ? i : bc->ib[i];
            const double g = self.grad[i];
            if (g == 0.0) continue;
            const double x = na.value[ia], y = nb.value[ib], o = self.value[i];
            if (na.requires_grad) na.grad[ia] += g * dfa(x, y, o);
            if (nb.requires_grad) nb.grad[ib] += g * dfb(x, y, o);
        }
    });
}

template <class F, class D>
Tensor unary(OpKind kind, const Tensor& a, F fwd, D df) {
    pre(kind, {&a});
    const auto& av = a.node()->value;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return make_result(kind, a.shape(), std::move(out), {a}, [df](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i)
            na.grad[i] += self.grad[i] * df(na.value[i], self.value[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        OpKind::Add, a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        OpKind::Sub, a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        OpKind::Mul, a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        OpKind::Div, a, b, [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; }, [](double x, double y, double) { return -x / (y * y); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return binary(
        OpKind::Maximum, a, b, [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    return binary(
        OpKind::Minimum, a, b, [](double x, double y) { return x <= y ? x : y; },
        [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
        [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double s) {
    return unary(
        OpKind::Scale, a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(
        OpKind::AddScalar, a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
    return unary(
        OpKind::Exp, a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

Tensor log(const Tensor& a) {
    return unary(
        OpKind::Log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor pow(const Tensor& a, double p) {
    return unary(
        OpKind::Pow, a, [p](double x) { return std::pow(x, p); },
        [p](double x, double) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

Tensor sqrt(const Tensor& a) {
    return unary(
        OpKind::Sqrt, a, [](double x) { return std::sqrt(x); }, [](double, double o) { return 0.5 / o; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        OpKind::Sigmoid, a,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double o) { return o * (1.0 - o); });
}

Tensor softplus(const Tensor& a) {
    return unary(
        OpKind::Softplus, a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        });
}

Tensor relu(const Tensor& a) {
    return unary(
        OpKind::Relu, a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
    return unary(
        OpKind::Abs, a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
    return unary(
        OpKind::Clamp, a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& a, int axis) {
    pre(OpKind::Softmax, {&a});
    const std::size_t ax = norm_axis(OpKind::Softmax, axis, a.rank());
    const AxisView v = axis_view(a.shape(), ax);
    const auto& x = a.node()->value;
    std::vector<double> y(x.size());
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            double mx = x[base];
            for (std::size_t l = 1; l < v.len; ++l) mx = std::max(mx, x[base + l * v.inner]);
            double s = 0.0;
            for (std::size_t l = 0; l < v.len; ++l) {
                const double e = std::exp(x[base + l * v.inner] - mx);
                y[base + l * v.inner] = e;
                s += e;
            }
            const double inv = 1.0 / s;
            for (std::size_t l = 0; l < v.len; ++l) y[base + l * v.inner] *= inv;
        }
    return make_result(OpKind::Softmax, a.shape(), std::move(y), {a}, [v](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t in = 0; in < v.inner; ++in) {
                const std::size_t base = o * v.len * v.inner + in;
                double dot = 0.0;
                for (std::size_t l = 0; l < v.len; ++l) {
                    const std::size_t i = base + l * v.inner;
                    dot += self.grad[i] * self.value[i];
                }
                for (std::size_t l = 0; l < v.len; ++l) {
                    const std::size_t i = base + l * v.inner;
                    na.grad[i] += self.value[i] * (self.grad[i] - dot);
                }
            }
    });
}

Tensor layer_norm(const Tensor& a, int axis, double eps) {
    pre(OpKind::LayerNorm, {&a});
    const std::size_t ax = norm_axis(OpKind::LayerNorm, axis, a.rank());
    const AxisView v = axis_view(a.shape(), ax);
    const auto& x = a.node()->value;
    std::vector<double> y(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(v.outer * v.inner);
    const double len = static_cast<double>(v.len);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            double mu = 0.0;
            for (std::size_t l = 0; l < v.len; ++l) mu += x[base + l * v.inner];
            mu /= len;
            double var = 0.0;
            for (std::size_t l = 0; l < v.len; ++l) {
                const double d = x[base + l * v.inner] - mu;
                var += d * d;
            }
            var /= len;
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[o * v.inner + in] = is;
            for (std::size_t l = 0; l < v.len; ++l) y[base + l * v.inner] = (x[base + l * v.inner] - mu) * is;
        }
    return make_result(OpKind::LayerNorm, a.shape(), std::move(y), {a}, [v, inv_std, len](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t in = 0; in < v.inner; ++in) {
                const std::size_t base = o * v.len * v.inner + in;
                double mg = 0.0, mgy = 0.0;
                for (std::size_t l = 0; l < v.len; ++l) {
                    const std::size_t i = base + l * v.inner;
                    mg += self.grad[i];
                    mgy += self.grad[i] * self.value[i];
                }
                mg /= len;
                mgy /= len;
                const double is = (*inv_std)[o * v.inner + in];
                for (std::size_t l = 0; l < v.len; ++l) {
                    const std::size_t i = base + l * v.inner;
                    na.grad[i] += is * (self.grad[i] - mg - self.value[i] * mgy);
                }
            }
    });
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
    pre(OpKind::Sum, {&a});
    const std::size_t ax = norm_axis(OpKind::Sum, axis, a.rank());
    const AxisView v = axis_view(a.shape(), ax);
    Shape out_shape = a.shape();
    if (keepdim)
        out_shape[ax] = 1;
    else
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    const auto& x = a.node()->value;
    std::vector<double> y(v.outer * v.inner, 0.0);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t l = 0; l < v.len; ++l)
            for (std::size_t in = 0; in < v.inner; ++in)
                y[o * v.inner + in] += x[(o * v.len + l) * v.inner + in];
    return make_result(OpKind::Sum, std::move(out_shape), std::move(y), {a}, [v](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t l = 0; l < v.len; ++l)
                for (std::size_t in = 0; in < v.inner; ++in)
                    na.grad[(o * v.len + l) * v.inner + in] += self.grad[o * v.inner + in];
    });
}

Tensor sum(const Tensor& a) {
    pre(OpKind::Sum, {&a});
    double s = 0.0;
    for (double x : a.values()) s += x;
    return make_result(OpKind::Sum, {}, {s}, {a}, [](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        const double g = self.grad[0];
        for (auto& x : na.grad) x += g;
    });
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(OpKind::Mean, axis, a.rank());
    return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[ax]));
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    for (auto& p : parts) pre(OpKind::Concat, {&p});
    const std::size_t ax = norm_axis(OpKind::Concat, axis, parts[0].rank());
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (auto& p : parts) {
        const auto& s = p.shape();
        bool ok = s.size() == out_shape.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i)
            if (i != ax && s[i] != out_shape[i]) ok = false;
        if (!ok)
            throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " + shape_str(s) +
                             " on axis " + std::to_string(ax));
        out_shape[ax] += s[ax];
    }
    const AxisView v = axis_view(out_shape, ax);
    std::vector<double> y(numel(out_shape));
    auto offsets = std::make_shared<std::vector<std::size_t>>();
    std::size_t off = 0;
    for (auto& p : parts) {
        offsets->push_back(off);
        const std::size_t plen = p.shape()[ax];
        const auto& x = p.node()->value;
        for (std::size_t o = 0; o < v.outer; ++o)
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * plen * v.inner), plen * v.inner,
                        y.begin() + static_cast<std::ptrdiff_t>((o * v.len + off) * v.inner));
        off += plen;
    }
    return make_result(OpKind::Concat, std::move(out_shape), std::move(y), parts, [v, offsets, ax](Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            Node& np = *self.inputs[k];
            if (!np.requires_grad) continue;
            np.ensure_grad();
            const std::size_t plen = np.shape[ax];
            const std::size_t off = (*offsets)[k];
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t j = 0; j < plen * v.inner; ++j)
                    np.grad[o * plen * v.inner + j] += self.grad[(o * v.len + off) * v.inner + j];
        }
    });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
    pre(OpKind::Slice, {&a});
    const std::size_t ax = norm_axis(OpKind::Slice, axis, a.rank());
    if (begin >= end || end > a.shape()[ax])
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_str(a.shape()) + " axis " + std::to_string(ax));
    const AxisView v = axis_view(a.shape(), ax);
    Shape out_shape = a.shape();
    out_shape[ax] = end - begin;
    const std::size_t plen = end - begin;
    std::vector<double> y(v.outer * plen * v.inner);
    const auto& x = a.node()->value;
    for (std::size_t o = 0; o < v.outer; ++o)
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * v.len + begin) * v.inner), plen * v.inner,
                    y.begin() + static_cast<std::ptrdiff_t>(o * plen * v.inner));
    return make_result(OpKind::Slice, std::move(out_shape), std::move(y), {a}, [v, begin, plen](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t j = 0; j < plen * v.inner; ++j)
                na.grad[(o * v.len + begin) * v.inner + j] += self.grad[o * plen * v.inner + j];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    pre(OpKind::MatMul, {&a, &b});
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1);
    const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
    const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
    if (k != kb)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + (transpose_b ? " x T" : " x ") +
                         shape_str(b.shape()));
    detail::count_macs(static_cast<std::uint64_t>(m) * k * n);
    const double* A = a.node()->value.data();
    const double* B = b.node()->value.data();
    std::vector<double> y(m * n, 0.0);
    double* Y = y.data();
    if (!transpose_b) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = A[i * k + p];
                const double* brow = B + p * n;
                double* yrow = Y + i * n;
                for (std::size_t j = 0; j < n; ++j) yrow[j] += aip * brow[j];
            }
    } else {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                const double* arow = A + i * k;
                const double* brow = B + j * k;
                for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                Y[i * n + j] = s;
            }
    }
    return make_result(OpKind::MatMul, {m, n}, std::move(y), {a, b}, [m, k, n, transpose_b](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        const double* G = self.grad.data();
        const double* A = na.value.data();
        const double* B = nb.value.data();
        if (na.requires_grad) {
            na.ensure_grad();
            double* GA = na.grad.data();
            // dA = G · Bᵀ  (or G · B when b was transposed)
            if (!transpose_b) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        const double* grow = G + i * n;
                        const double* brow = B + p * n;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        GA[i * k + p] += s;
                    }
            } else {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = G[i * n + j];
                        if (g == 0.0) continue;
                        const double* brow = B + j * k;
                        double* garow = GA + i * k;
                        for (std::size_t p = 0; p < k; ++p) garow[p] += g * brow[p];
                    }
            }
        }
        if (nb.requires_grad) {
            nb.ensure_grad();
            double* GB = nb.grad.data();
            if (!transpose_b) {
                // dB = Aᵀ · G
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = A[i * k + p];
                        if (aip == 0.0) continue;
                        const double* grow = G + i * n;
                        double* gbrow = GB + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                    }
            } else {
                // dB = Gᵀ · A
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = G[i * n + j];
                        if (g == 0.0) continue;
                        const double* arow = A + i * k;
                        double* gbrow = GB + j * k;
                        for (std::size_t p = 0; p < k; ++p) gbrow[p] += g * arow[p];
                    }
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    pre(OpKind::Transpose, {&a});
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    const auto& x = a.node()->value;
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
    return make_result(OpKind::Transpose, {c, r}, std::move(y), {a}, [r, c](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) na.grad[i * c + j] += self.grad[j * r + i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    pre(OpKind::Reshape, {&a});
    if (numel(shape) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
    return make_result(OpKind::Reshape, std::move(shape), a.node()->value, {a}, [](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
    });
}

Tensor masked_fill(const Tensor& a, const std::vector<bool>& mask, double value) {
    pre(OpKind::MaskedFill, {&a});
    if (mask.size() != a.size())
        throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) + " entries for " +
                         shape_str(a.shape()));
    std::vector<double> y(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < y.size(); ++i)
        if (mask[i]) y[i] = value;
    auto m = std::make_shared<std::vector<bool>>(mask);
    return make_result(OpKind::MaskedFill, a.shape(), std::move(y), {a}, [m](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (!(*m)[i]) na.grad[i] += self.grad[i];
    });
}

Tensor take(const Tensor& a, const std::vector<std::size_t>& index, Shape out_shape) {
    pre(OpKind::Take, {&a});
    if (numel(out_shape) != index.size())
        throw ShapeError("take: " + std::to_string(index.size()) + " indices for output " + shape_str(out_shape));
    std::vector<double> y(index.size());
    const auto& x = a.node()->value;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.size())
            throw ShapeError("take: index " + std::to_string(index[i]) + " out of range for " + shape_str(a.shape()));
        y[i] = x[index[i]];
    }
    auto idx = std::make_shared<std::vector<std::size_t>>(index);
    return make_result(OpKind::Take, std::move(out_shape), std::move(y), {a}, [idx](Node& self) {
        Node& na = *self.inputs[0];
        na.ensure_grad();
        for (std::size_t i = 0; i < idx->size(); ++i) na.grad[(*idx)[i]] += self.grad[i];
    });
}

Tensor index_select_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
    if (a.rank() != 2) throw ShapeError("index_select_rows: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t c = a.dim(1);
    std::vector<std::size_t> idx;
    idx.reserve(rows.size() * c);
    for (auto r : rows) {
        if (r >= a.dim(0))
            throw ShapeError("index_select_rows: row " + std::to_string(r) + " out of range for " +
                             shape_str(a.shape()));
        for (std::size_t j = 0; j < c; ++j) idx.push_back(r * c + j);
    }
    return take(a, idx, {rows.size(), c});
}

Tensor index_add_rows(std::size_t n_rows, const std::vector<std::size_t>& rows, const Tensor& src) {
    pre(OpKind::IndexAddRows, {&src});
    if (src.rank() != 2 || src.dim(0) != rows.size())
        throw ShapeError("index_add_rows: source " + shape_str(src.shape()) + " does not match " +
                         std::to_string(rows.size()) + " rows");
    const std::size_t c = src.dim(1);
    std::vector<double> y(n_rows * c, 0.0);
    const auto& x = src.node()->value;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n_rows) throw ShapeError("index_add_rows: row index out of range");
        for (std::size_t j = 0; j < c; ++j) y[rows[i] * c + j] += x[i * c + j];
    }
    auto rs = std::make_shared<std::vector<std::size_t>>(rows);
    return make_result(OpKind::IndexAddRows, {n_rows, c}, std::move(y), {src}, [rs, c](Node& self) {
        Node& ns = *self.inputs[0];
        ns.ensure_grad();
        for (std::size_t i = 0; i < rs->size(); ++i)
            for (std::size_t j = 0; j < c; ++j) ns.grad[i * c + j] += self.grad[(*rs)[i] * c + j];
    });
}

}  // namespace mrdetr::ad
