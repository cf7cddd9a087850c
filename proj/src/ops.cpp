#include "soap/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <stdexcept>

#include "soap/tape.hpp"

namespace soap {
namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        st[i] = st[i + 1] * s[i + 1];
    }
    return st;
}

// Walks every flat index of `shape` in row-major order while maintaining a
// second offset computed from per-axis strides (0 entries broadcast).
template <class F>
void for_each_mapped(const Shape& shape, const std::vector<std::size_t>& mapped_stride, F&& f) {
    const std::size_t n = shape_numel(shape);
    const std::size_t rank = shape.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, off);
        for (std::size_t d = rank; d-- > 0;) {
            idx[d]++;
            off += mapped_stride[d];
            if (idx[d] < shape[d]) break;
            off -= shape[d] * mapped_stride[d];
            idx[d] = 0;
        }
    }
}

void check_broadcast(const char* op, const Shape& a, const Shape& b) {
    bool ok = a.size() == b.size();
    if (ok) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (b[i] != a[i] && b[i] != 1) {
                ok = false;
                break;
            }
        }
    }
    if (!ok) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                    shape_str(b));
    }
}

std::vector<std::size_t> broadcast_strides(const Shape& a, const Shape& b) {
    std::vector<std::size_t> st = strides_of(b);
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (b[i] == 1 && a[i] != 1) st[i] = 0;
    }
    return st;
}

enum class Bin { Add, Sub, Mul };

// raw kernels; closures call these so nothing records during backward

Tensor binary_fw(Bin kind, const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    if (a.shape() == b.shape()) {
        const std::size_t n = a.size();
        switch (kind) {
            case Bin::Add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
            case Bin::Sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
            case Bin::Mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
        }
        return out;
    }
    auto bst = broadcast_strides(a.shape(), b.shape());
    switch (kind) {
        case Bin::Add: for_each_mapped(a.shape(), bst, [&](std::size_t i, std::size_t j) { po[i] = pa[i] + pb[j]; }); break;
        case Bin::Sub: for_each_mapped(a.shape(), bst, [&](std::size_t i, std::size_t j) { po[i] = pa[i] - pb[j]; }); break;
        case Bin::Mul: for_each_mapped(a.shape(), bst, [&](std::size_t i, std::size_t j) { po[i] = pa[i] * pb[j]; }); break;
    }
    return out;
}

// sum a full-shaped gradient down to a broadcast operand's shape
Tensor reduce_to_shape(const Tensor& g, const Shape& bshape) {
    if (g.shape() == bshape) return g;
    Tensor out(bshape);
    auto bst = broadcast_strides(g.shape(), bshape);
    const double* pg = g.data();
    double* po = out.data();
    for_each_mapped(g.shape(), bst, [&](std::size_t i, std::size_t j) { po[j] += pg[i]; });
    return out;
}

Tensor negate(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = -x[i];
    return out;
}

double stable_sigmoid(double v) {
    double s;
    if (v >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-v));
    } else {
        double e = std::exp(v);
        s = e / (1.0 + e);
    }
    // keep the contract that outputs lie strictly inside (0, 1)
    const double lo = std::numeric_limits<double>::denorm_min();
    const double hi = std::nextafter(1.0, 0.0);
    return std::min(std::max(s, lo), hi);
}

Tensor binary_op(const char* name, Bin kind, const Tensor& a, const Tensor& b) {
    check_broadcast(name, a.shape(), b.shape());
    Tensor out = binary_fw(kind, a, b);
    Tape* tp = Tape::active();
    if (!tp) return out;
    const int na = tp->node_of(a);
    const int nb = tp->node_of(b);
    if (na < 0 && nb < 0) return out;
    const bool ta = na >= 0, tb = nb >= 0;
    std::vector<int> ins;
    if (ta) ins.push_back(na);
    if (tb) ins.push_back(nb);
    Tape::BackwardFn fn;
    const Shape bshape = b.shape();
    switch (kind) {
        case Bin::Add:
            fn = [ta, tb, bshape](const Tensor& g) {
                std::vector<Tensor> gs;
                if (ta) gs.push_back(g);
                if (tb) gs.push_back(reduce_to_shape(g, bshape));
                return gs;
            };
            break;
        case Bin::Sub:
            fn = [ta, tb, bshape](const Tensor& g) {
                std::vector<Tensor> gs;
                if (ta) gs.push_back(g);
                if (tb) gs.push_back(negate(reduce_to_shape(g, bshape)));
                return gs;
            };
            break;
        case Bin::Mul: {
            auto av = tb ? std::make_shared<const Tensor>(a) : nullptr;
            auto bv = ta ? std::make_shared<const Tensor>(b) : nullptr;
            fn = [ta, tb, bshape, av, bv](const Tensor& g) {
                std::vector<Tensor> gs;
                if (ta) gs.push_back(binary_fw(Bin::Mul, g, *bv));
                if (tb) gs.push_back(reduce_to_shape(binary_fw(Bin::Mul, g, *av), bshape));
                return gs;
            };
            break;
        }
    }
    out.node_id = tp->attach(std::move(ins), std::move(fn), out.shape());
    return out;
}

// ---- convolution kernels ----

struct ConvDims {
    std::size_t batch, cin, cout;
    std::size_t s[3];
    std::size_t k[3];
    std::size_t p[3];
    std::size_t plane() const { return s[0] * s[1] * s[2]; }
    std::size_t taps() const { return k[0] * k[1] * k[2]; }
};

// Each output row is accumulated in a local buffer that stays in L1 while
// the input-channel and tap loops run, then stored once.
void conv_fw(const double* __restrict in, const double* __restrict w, const double* __restrict bias,
             double* __restrict out, const ConvDims& d) {
    const std::size_t plane = d.plane();
    const std::size_t taps = d.taps();
    std::vector<double> row(d.s[2]);
    double* __restrict acc = row.data();
    for (std::size_t b = 0; b < d.batch; ++b) {
        const double* bplane = in + b * d.cin * plane;
        for (std::size_t oc = 0; oc < d.cout; ++oc) {
            double* __restrict oplane = out + (b * d.cout + oc) * plane;
            const double init = bias ? bias[oc] : 0.0;
            for (std::size_t z = 0; z < d.s[0]; ++z) {
                const std::size_t k0lo = d.p[0] > z ? d.p[0] - z : 0;
                const std::size_t k0hi = std::min(d.k[0], d.s[0] + d.p[0] - z);
                for (std::size_t y = 0; y < d.s[1]; ++y) {
                    const std::size_t k1lo = d.p[1] > y ? d.p[1] - y : 0;
                    const std::size_t k1hi = std::min(d.k[1], d.s[1] + d.p[1] - y);
                    for (std::size_t x = 0; x < d.s[2]; ++x) acc[x] = init;
                    for (std::size_t ic = 0; ic < d.cin; ++ic) {
                        const double* iplane = bplane + ic * plane;
                        const double* wbase = w + (oc * d.cin + ic) * taps;
                        for (std::size_t k0 = k0lo; k0 < k0hi; ++k0) {
                            const std::size_t zi = z + k0 - d.p[0];
                            for (std::size_t k1 = k1lo; k1 < k1hi; ++k1) {
                                const std::size_t yi = y + k1 - d.p[1];
                                const double* __restrict irow = iplane + (zi * d.s[1] + yi) * d.s[2];
                                const double* wrow = wbase + (k0 * d.k[1] + k1) * d.k[2];
                                const long s2 = static_cast<long>(d.s[2]);
                                if (d.k[2] == 3 && s2 >= 2) {
                                    const double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                    acc[0] += w1 * irow[0] + w2 * irow[1];
                                    for (long x = 1; x < s2 - 1; ++x) {
                                        acc[x] += w0 * irow[x - 1] + w1 * irow[x] + w2 * irow[x + 1];
                                    }
                                    acc[s2 - 1] += w0 * irow[s2 - 2] + w1 * irow[s2 - 1];
                                } else {
                                    for (std::size_t k2 = 0; k2 < d.k[2]; ++k2) {
                                        const double wv = wrow[k2];
                                        const long shift = static_cast<long>(k2) - static_cast<long>(d.p[2]);
                                        const long xlo = std::max(0L, -shift);
                                        const long xhi = std::min<long>(s2, s2 - shift);
                                        const double* __restrict ishift = irow + shift;
                                        for (long x = xlo; x < xhi; ++x) acc[x] += wv * ishift[x];
                                    }
                                }
                            }
                        }
                    }
                    double* __restrict orow = oplane + (z * d.s[1] + y) * d.s[2];
                    for (std::size_t x = 0; x < d.s[2]; ++x) orow[x] = acc[x];
                }
            }
        }
    }
}

// The input gradient is the output gradient correlated with the reflected
// kernel; gathered row by row with the same local-buffer scheme as conv_fw.
void conv_bw_input(const double* __restrict g, const double* __restrict w, double* __restrict din,
                   const ConvDims& d) {
    const std::size_t plane = d.plane();
    const std::size_t taps = d.taps();
    std::vector<double> row(d.s[2]);
    double* __restrict acc = row.data();
    for (std::size_t b = 0; b < d.batch; ++b) {
        const double* gbatch = g + b * d.cout * plane;
        for (std::size_t ic = 0; ic < d.cin; ++ic) {
            double* __restrict dplane = din + (b * d.cin + ic) * plane;
            for (std::size_t zi = 0; zi < d.s[0]; ++zi) {
                for (std::size_t yi = 0; yi < d.s[1]; ++yi) {
                    for (std::size_t x = 0; x < d.s[2]; ++x) acc[x] = 0.0;
                    for (std::size_t oc = 0; oc < d.cout; ++oc) {
                        const double* gplane = gbatch + oc * plane;
                        const double* wbase = w + (oc * d.cin + ic) * taps;
                        for (std::size_t k0 = 0; k0 < d.k[0]; ++k0) {
                            const std::size_t zo = zi + d.p[0] - k0;  // may wrap; checked below
                            if (zi + d.p[0] < k0 || zo >= d.s[0]) continue;
                            for (std::size_t k1 = 0; k1 < d.k[1]; ++k1) {
                                const std::size_t yo = yi + d.p[1] - k1;
                                if (yi + d.p[1] < k1 || yo >= d.s[1]) continue;
                                const double* __restrict grow = gplane + (zo * d.s[1] + yo) * d.s[2];
                                const double* wrow = wbase + (k0 * d.k[1] + k1) * d.k[2];
                                const long s2 = static_cast<long>(d.s[2]);
                                if (d.k[2] == 3 && s2 >= 2) {
                                    // xo = xi + p2 - k2: k2=0 reads grow[x+1], k2=2 reads grow[x-1]
                                    const double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                    acc[0] += w0 * grow[1] + w1 * grow[0];
                                    for (long x = 1; x < s2 - 1; ++x) {
                                        acc[x] += w0 * grow[x + 1] + w1 * grow[x] + w2 * grow[x - 1];
                                    }
                                    acc[s2 - 1] += w1 * grow[s2 - 1] + w2 * grow[s2 - 2];
                                } else {
                                    for (std::size_t k2 = 0; k2 < d.k[2]; ++k2) {
                                        const double wv = wrow[k2];
                                        const long shift = static_cast<long>(d.p[2]) - static_cast<long>(k2);
                                        const long xlo = std::max(0L, -shift);
                                        const long xhi = std::min<long>(s2, s2 - shift);
                                        const double* __restrict gshift = grow + shift;
                                        for (long x = xlo; x < xhi; ++x) acc[x] += wv * gshift[x];
                                    }
                                }
                            }
                        }
                    }
                    double* __restrict drow = dplane + (zi * d.s[1] + yi) * d.s[2];
                    for (std::size_t x = 0; x < d.s[2]; ++x) drow[x] += acc[x];
                }
            }
        }
    }
}

void conv_bw_kernel(const double* __restrict g, const double* __restrict in, double* __restrict dw,
                    const ConvDims& d) {
    const std::size_t plane = d.plane();
    const std::size_t taps = d.taps();
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t oc = 0; oc < d.cout; ++oc) {
            const double* gplane = g + (b * d.cout + oc) * plane;
            for (std::size_t ic = 0; ic < d.cin; ++ic) {
                const double* iplane = in + (b * d.cin + ic) * plane;
                double* dwbase = dw + (oc * d.cin + ic) * taps;
                for (std::size_t z = 0; z < d.s[0]; ++z) {
                    const std::size_t k0lo = d.p[0] > z ? d.p[0] - z : 0;
                    const std::size_t k0hi = std::min(d.k[0], d.s[0] + d.p[0] - z);
                    for (std::size_t k0 = k0lo; k0 < k0hi; ++k0) {
                        const std::size_t zi = z + k0 - d.p[0];
                        for (std::size_t y = 0; y < d.s[1]; ++y) {
                            const std::size_t k1lo = d.p[1] > y ? d.p[1] - y : 0;
                            const std::size_t k1hi = std::min(d.k[1], d.s[1] + d.p[1] - y);
                            const double* grow = gplane + (z * d.s[1] + y) * d.s[2];
                            for (std::size_t k1 = k1lo; k1 < k1hi; ++k1) {
                                const std::size_t yi = y + k1 - d.p[1];
                                const double* __restrict irow = iplane + (zi * d.s[1] + yi) * d.s[2];
                                double* dwrow = dwbase + (k0 * d.k[1] + k1) * d.k[2];
                                const long s2 = static_cast<long>(d.s[2]);
                                if (d.k[2] == 3 && s2 >= 2) {
                                    const double* __restrict gsrc = grow;
                                    double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                                    a1 += gsrc[0] * irow[0];
                                    a2 += gsrc[0] * irow[1];
                                    for (long x = 1; x < s2 - 1; ++x) {
                                        const double gv = gsrc[x];
                                        a0 += gv * irow[x - 1];
                                        a1 += gv * irow[x];
                                        a2 += gv * irow[x + 1];
                                    }
                                    a0 += gsrc[s2 - 1] * irow[s2 - 2];
                                    a1 += gsrc[s2 - 1] * irow[s2 - 1];
                                    dwrow[0] += a0;
                                    dwrow[1] += a1;
                                    dwrow[2] += a2;
                                } else {
                                    for (std::size_t k2 = 0; k2 < d.k[2]; ++k2) {
                                        const long shift = static_cast<long>(k2) - static_cast<long>(d.p[2]);
                                        const long xlo = std::max(0L, -shift);
                                        const long xhi = std::min<long>(s2, s2 - shift);
                                        const double* __restrict ishift = irow + shift;
                                        const double* __restrict gsrc = grow;
                                        double acc = 0.0;
                                        for (long x = xlo; x < xhi; ++x) acc += gsrc[x] * ishift[x];
                                        dwrow[k2] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv_bw_bias(const double* g, double* db, const ConvDims& d) {
    const std::size_t plane = d.plane();
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t oc = 0; oc < d.cout; ++oc) {
            const double* gplane = g + (b * d.cout + oc) * plane;
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += gplane[i];
            db[oc] += acc;
        }
    }
}

// ---- shared by softmax / layer_norm: (outer, axis length, inner) view ----

struct LaneView {
    std::size_t outer, len, inner;
};

LaneView lanes_of(const Shape& shape, std::size_t axis) {
    LaneView v{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

Tensor transpose_fw(const Tensor& x, const std::vector<std::size_t>& perm) {
    Shape oshape(x.rank());
    for (std::size_t j = 0; j < perm.size(); ++j) oshape[j] = x.shape()[perm[j]];
    Tensor out(oshape);
    auto ost = strides_of(oshape);
    // out axis j reads input axis perm[j]; walk the input with mapped strides
    std::vector<std::size_t> mapped(x.rank(), 0);
    for (std::size_t j = 0; j < perm.size(); ++j) mapped[perm[j]] = ost[j];
    const double* pi = x.data();
    double* po = out.data();
    for_each_mapped(x.shape(), mapped, [&](std::size_t i, std::size_t o) { po[o] = pi[i]; });
    return out;
}

Tensor slice_fw(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop) {
    LaneView v = lanes_of(x.shape(), axis);
    Shape oshape = x.shape();
    oshape[axis] = stop - start;
    Tensor out(oshape);
    const std::size_t in_block = v.len * v.inner;
    const std::size_t out_block = (stop - start) * v.inner;
    for (std::size_t o = 0; o < v.outer; ++o) {
        std::memcpy(out.data() + o * out_block, x.data() + o * in_block + start * v.inner,
                    out_block * sizeof(double));
    }
    return out;
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", Bin::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", Bin::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", Bin::Mul, a, b); }

Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x[i]);
    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    auto sv = std::make_shared<const Tensor>(out);
    auto fn = [sv](const Tensor& g) {
        const Tensor& y = *sv;
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * y[i] * (1.0 - y[i]);
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

Tensor tanh(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    auto yv = std::make_shared<const Tensor>(out);
    auto fn = [yv](const Tensor& g) {
        const Tensor& y = *yv;
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * (1.0 - y[i] * y[i]);
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

Tensor isru(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / std::sqrt(1.0 + x[i] * x[i]);
    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    auto xv = std::make_shared<const Tensor>(x);
    auto fn = [xv](const Tensor& g) {
        const Tensor& xs = *xv;
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = 1.0 + xs[i] * xs[i];
            gx[i] = g[i] / (s * std::sqrt(s));
        }
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

Tensor scale(const Tensor& x, double factor) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    auto fn = [factor](const Tensor& g) {
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = factor * g[i];
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

Tensor elementwise(ElemKind kind, const Tensor& a, const Tensor* b) {
    switch (kind) {
        case ElemKind::Add:
        case ElemKind::Sub:
        case ElemKind::Mul:
            if (!b) throw std::invalid_argument("elementwise: binary kind requires two operands");
            if (kind == ElemKind::Add) return add(a, *b);
            if (kind == ElemKind::Sub) return sub(a, *b);
            return mul(a, *b);
        case ElemKind::Sigmoid:
            if (b) throw std::invalid_argument("elementwise: sigmoid takes one operand");
            return sigmoid(a);
        case ElemKind::Tanh:
            if (b) throw std::invalid_argument("elementwise: tanh takes one operand");
            return tanh(a);
        case ElemKind::Isru:
            if (b) throw std::invalid_argument("elementwise: isru takes one operand");
            return isru(a);
    }
    throw std::invalid_argument("elementwise: unknown kind");
}

// ---- convolution ----

Tensor convolve(const Tensor& input, const Tensor& kernel, int rank, const Tensor* bias) {
    if (rank < 1 || rank > 3) {
        throw std::invalid_argument("convolve: rank must be 1, 2 or 3, got " + std::to_string(rank));
    }
    const std::size_t want = static_cast<std::size_t>(rank) + 2;
    if (input.rank() != want) {
        throw std::invalid_argument("convolve: rank-" + std::to_string(rank) + " input must have shape (batch, channels, spatial...), got " +
                                    shape_str(input.shape()));
    }
    if (kernel.rank() != want) {
        throw std::invalid_argument("convolve: rank-" + std::to_string(rank) + " kernel must have shape (out, in, taps...), got " +
                                    shape_str(kernel.shape()));
    }
    if (kernel.dim(1) != input.dim(1)) {
        throw std::invalid_argument("convolve: channel mismatch, input " + shape_str(input.shape()) +
                                    " vs kernel " + shape_str(kernel.shape()));
    }
    ConvDims d{};
    d.batch = input.dim(0);
    d.cin = input.dim(1);
    d.cout = kernel.dim(0);
    for (int i = 0; i < 3; ++i) {
        d.s[i] = 1;
        d.k[i] = 1;
        d.p[i] = 0;
    }
    for (int i = 0; i < rank; ++i) {
        const int slot = 3 - rank + i;
        d.s[slot] = input.dim(2 + static_cast<std::size_t>(i));
        d.k[slot] = kernel.dim(2 + static_cast<std::size_t>(i));
        if (d.k[slot] % 2 == 0) {
            throw std::invalid_argument("convolve: even kernel extent " + std::to_string(d.k[slot]) +
                                        " in " + shape_str(kernel.shape()) + " (same padding undefined)");
        }
        d.p[slot] = d.k[slot] / 2;
    }
    if (bias) {
        if (bias->rank() != 1 || bias->dim(0) != d.cout) {
            throw std::invalid_argument("convolve: bias shape " + shape_str(bias->shape()) +
                                        " does not match out channels " + std::to_string(d.cout));
        }
    }

    Shape oshape = input.shape();
    oshape[1] = d.cout;
    Tensor out(oshape);
    conv_fw(input.data(), kernel.data(), bias ? bias->data() : nullptr, out.data(), d);

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int ni = tp->node_of(input);
    const int nk = tp->node_of(kernel);
    const int nb = bias ? tp->node_of(*bias) : -1;
    if (ni < 0 && nk < 0 && nb < 0) return out;
    const bool ti = ni >= 0, tk = nk >= 0, tb = nb >= 0;
    std::vector<int> ins;
    if (ti) ins.push_back(ni);
    if (tk) ins.push_back(nk);
    if (tb) ins.push_back(nb);
    auto inv = tk ? std::make_shared<const Tensor>(input) : nullptr;
    auto kv = ti ? std::make_shared<const Tensor>(kernel) : nullptr;
    const Shape ishape = input.shape();
    const Shape kshape = kernel.shape();
    const std::size_t cout = d.cout;
    auto fn = [ti, tk, tb, d, inv, kv, ishape, kshape, cout](const Tensor& g) {
        std::vector<Tensor> gs;
        if (ti) {
            Tensor gi(ishape);
            conv_bw_input(g.data(), kv->data(), gi.data(), d);
            gs.push_back(std::move(gi));
        }
        if (tk) {
            Tensor gk(kshape);
            conv_bw_kernel(g.data(), inv->data(), gk.data(), d);
            gs.push_back(std::move(gk));
        }
        if (tb) {
            Tensor gb(Shape{cout});
            conv_bw_bias(g.data(), gb.data(), d);
            gs.push_back(std::move(gb));
        }
        return gs;
    };
    out.node_id = tp->attach(std::move(ins), std::move(fn), out.shape());
    return out;
}

// ---- reductions ----

Tensor reduce(ReduceKind kind, const Tensor& x, const std::vector<std::size_t>& axes, bool keep_dims) {
    if (axes.empty()) throw std::invalid_argument("reduce: empty axis list");
    std::vector<bool> reduced(x.rank(), false);
    for (std::size_t a : axes) {
        if (a >= x.rank()) {
            throw std::invalid_argument("reduce: axis " + std::to_string(a) + " out of range for " +
                                        shape_str(x.shape()));
        }
        if (reduced[a]) throw std::invalid_argument("reduce: duplicate axis " + std::to_string(a));
        reduced[a] = true;
    }

    Shape kshape = x.shape();  // keep-dims shape; same flat layout as squeezed
    std::size_t count = 1;
    for (std::size_t a = 0; a < x.rank(); ++a) {
        if (reduced[a]) {
            count *= kshape[a];
            kshape[a] = 1;
        }
    }
    std::vector<std::size_t> ost = strides_of(kshape);
    for (std::size_t a = 0; a < x.rank(); ++a) {
        if (reduced[a]) ost[a] = 0;
    }

    std::vector<double> acc(shape_numel(kshape), 0.0);
    const double* px = x.data();
    for_each_mapped(x.shape(), ost, [&](std::size_t i, std::size_t o) { acc[o] += px[i]; });
    const double factor = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(count) : 1.0;
    if (kind == ReduceKind::Mean) {
        for (double& v : acc) v *= factor;
    }

    Shape oshape;
    if (keep_dims) {
        oshape = kshape;
    } else {
        for (std::size_t a = 0; a < x.rank(); ++a) {
            if (!reduced[a]) oshape.push_back(x.shape()[a]);
        }
        if (oshape.empty()) oshape = {1};
    }
    Tensor out(oshape, std::move(acc));

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    const Shape ishape = x.shape();
    auto fn = [ishape, ost, factor](const Tensor& g) {
        Tensor gx(ishape);
        const double* pg = g.data();
        double* pgx = gx.data();
        for_each_mapped(ishape, ost, [&](std::size_t i, std::size_t o) { pgx[i] = pg[o] * factor; });
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

Tensor reduce_mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keep_dims) {
    return reduce(ReduceKind::Mean, x, axes, keep_dims);
}

Tensor reduce_sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keep_dims) {
    return reduce(ReduceKind::Sum, x, axes, keep_dims);
}

// ---- matmul ----

namespace {

void matmul_fw(const double* __restrict a, const double* __restrict b, double* __restrict c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* __restrict crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a[i * k + kk];
            const double* __restrict brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: dimension mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    matmul_fw(a.data(), b.data(), out.data(), m, k, n);

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int na = tp->node_of(a);
    const int nb = tp->node_of(b);
    if (na < 0 && nb < 0) return out;
    const bool ta = na >= 0, tb = nb >= 0;
    std::vector<int> ins;
    if (ta) ins.push_back(na);
    if (tb) ins.push_back(nb);
    auto av = tb ? std::make_shared<const Tensor>(a) : nullptr;
    auto bv = ta ? std::make_shared<const Tensor>(b) : nullptr;
    auto fn = [ta, tb, av, bv, m, k, n](const Tensor& g) {
        std::vector<Tensor> gs;
        if (ta) {
            Tensor ga(Shape{m, k});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* __restrict grow = g.data() + i * n;
                    const double* __restrict brow = bv->data() + kk * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + kk] = acc;
                }
            }
            gs.push_back(std::move(ga));
        }
        if (tb) {
            Tensor gb(Shape{k, n});
            for (std::size_t i = 0; i < m; ++i) {
                const double* __restrict grow = g.data() + i * n;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double avv = (*av)[i * k + kk];
                    double* __restrict gbrow = gb.data() + kk * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += avv * grow[j];
                }
            }
            gs.push_back(std::move(gb));
        }
        return gs;
    };
    out.node_id = tp->attach(std::move(ins), std::move(fn), out.shape());
    return out;
}

// ---- softmax ----

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(x.shape()));
    }
    LaneView v = lanes_of(x.shape(), axis);
    Tensor out(x.shape());
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < v.len; ++l) mx = std::max(mx, x[base + l * v.inner]);
            double sum = 0.0;
            for (std::size_t l = 0; l < v.len; ++l) {
                const double e = std::exp(x[base + l * v.inner] - mx);
                out[base + l * v.inner] = e;
                sum += e;
            }
            for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] /= sum;
        }
    }

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    auto yv = std::make_shared<const Tensor>(out);
    auto fn = [yv, v](const Tensor& g) {
        const Tensor& y = *yv;
        Tensor gx(g.shape());
        for (std::size_t o = 0; o < v.outer; ++o) {
            for (std::size_t in = 0; in < v.inner; ++in) {
                const std::size_t base = o * v.len * v.inner + in;
                double dot = 0.0;
                for (std::size_t l = 0; l < v.len; ++l) {
                    const std::size_t p = base + l * v.inner;
                    dot += g[p] * y[p];
                }
                for (std::size_t l = 0; l < v.len; ++l) {
                    const std::size_t p = base + l * v.inner;
                    gx[p] = y[p] * (g[p] - dot);
                }
            }
        }
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& x, std::size_t axis, double epsilon) {
    if (axis >= x.rank()) {
        throw std::invalid_argument("layer_norm: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(x.shape()));
    }
    LaneView v = lanes_of(x.shape(), axis);
    Tensor out(x.shape());
    std::vector<double> inv_std(v.outer * v.inner);
    const double len = static_cast<double>(v.len);
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            double mean = 0.0;
            for (std::size_t l = 0; l < v.len; ++l) mean += x[base + l * v.inner];
            mean /= len;
            double var = 0.0;
            for (std::size_t l = 0; l < v.len; ++l) {
                const double c = x[base + l * v.inner] - mean;
                var += c * c;
            }
            var /= len;
            const double inv = 1.0 / std::sqrt(var + epsilon);
            inv_std[o * v.inner + in] = inv;
            for (std::size_t l = 0; l < v.len; ++l) {
                out[base + l * v.inner] = (x[base + l * v.inner] - mean) * inv;
            }
        }
    }

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    auto yv = std::make_shared<const Tensor>(out);
    auto fn = [yv, v, inv_std, len](const Tensor& g) {
        const Tensor& ynorm = *yv;
        Tensor gx(g.shape());
        for (std::size_t o = 0; o < v.outer; ++o) {
            for (std::size_t in = 0; in < v.inner; ++in) {
                const std::size_t base = o * v.len * v.inner + in;
                double gmean = 0.0, gy = 0.0;
                for (std::size_t l = 0; l < v.len; ++l) {
                    const std::size_t p = base + l * v.inner;
                    gmean += g[p];
                    gy += g[p] * ynorm[p];
                }
                gmean /= len;
                gy /= len;
                const double inv = inv_std[o * v.inner + in];
                for (std::size_t l = 0; l < v.len; ++l) {
                    const std::size_t p = base + l * v.inner;
                    gx[p] = inv * (g[p] - gmean - ynorm[p] * gy);
                }
            }
        }
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

// ---- layout transforms ----

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot reshape " + shape_str(x.shape()) + " (" +
                                    std::to_string(x.size()) + " elements) to " + shape_str(new_shape) +
                                    " (" + std::to_string(shape_numel(new_shape)) + " elements)");
    }
    Tensor out(std::move(new_shape), x.raw());

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    const Shape ishape = x.shape();
    auto fn = [ishape](const Tensor& g) {
        return std::vector<Tensor>{Tensor(ishape, g.raw())};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

Tensor flatten(const Tensor& x) {
    if (x.rank() == 0) throw std::invalid_argument("flatten: empty shape");
    return reshape(x, {x.dim(0), x.size() / x.dim(0)});
}

Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.rank()) {
        throw std::invalid_argument("transpose: permutation size " + std::to_string(perm.size()) +
                                    " does not match rank of " + shape_str(x.shape()));
    }
    std::vector<bool> seen(x.rank(), false);
    for (std::size_t p : perm) {
        if (p >= x.rank() || seen[p]) throw std::invalid_argument("transpose: invalid permutation");
        seen[p] = true;
    }
    Tensor out = transpose_fw(x, perm);

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t j = 0; j < perm.size(); ++j) inv[perm[j]] = j;
    auto fn = [inv](const Tensor& g) {
        return std::vector<Tensor>{transpose_fw(g, inv)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no tensors given");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) {
        throw std::invalid_argument("concat: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(first));
    }
    std::size_t total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != first.size()) {
            throw std::invalid_argument("concat: rank mismatch " + shape_str(first) + " vs " +
                                        shape_str(t.shape()));
        }
        for (std::size_t d = 0; d < first.size(); ++d) {
            if (d != axis && t.shape()[d] != first[d]) {
                throw std::invalid_argument("concat: shapes disagree off axis " + std::to_string(axis) +
                                            ": " + shape_str(first) + " vs " + shape_str(t.shape()));
            }
        }
        total += t.dim(axis);
    }
    Shape oshape = first;
    oshape[axis] = total;
    Tensor out(oshape);
    LaneView v = lanes_of(oshape, axis);
    std::size_t pos = 0;
    for (const Tensor& t : parts) {
        const std::size_t block = t.dim(axis) * v.inner;
        for (std::size_t o = 0; o < v.outer; ++o) {
            std::memcpy(out.data() + o * total * v.inner + pos * v.inner,
                        t.data() + o * block, block * sizeof(double));
        }
        pos += t.dim(axis);
    }

    Tape* tp = Tape::active();
    if (!tp) return out;
    std::vector<int> ins;
    std::vector<std::pair<std::size_t, std::size_t>> tracked_ranges;  // [start, stop) along axis
    std::size_t at = 0;
    for (const Tensor& t : parts) {
        const int n = tp->node_of(t);
        if (n >= 0) {
            ins.push_back(n);
            tracked_ranges.emplace_back(at, at + t.dim(axis));
        }
        at += t.dim(axis);
    }
    if (ins.empty()) return out;
    auto fn = [tracked_ranges, axis](const Tensor& g) {
        std::vector<Tensor> gs;
        gs.reserve(tracked_ranges.size());
        for (const auto& [start, stop] : tracked_ranges) {
            gs.push_back(slice_fw(g, axis, start, stop));
        }
        return gs;
    };
    out.node_id = tp->attach(std::move(ins), std::move(fn), out.shape());
    return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop) {
    if (axis >= x.rank() || start >= stop || stop > x.dim(axis)) {
        throw std::invalid_argument("slice: invalid range [" + std::to_string(start) + "," +
                                    std::to_string(stop) + ") on axis " + std::to_string(axis) +
                                    " of " + shape_str(x.shape()));
    }
    Tensor out = slice_fw(x, axis, start, stop);

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    const Shape ishape = x.shape();
    LaneView v = lanes_of(ishape, axis);
    auto fn = [ishape, v, start, stop](const Tensor& g) {
        Tensor gx(ishape);
        const std::size_t block = (stop - start) * v.inner;
        for (std::size_t o = 0; o < v.outer; ++o) {
            std::memcpy(gx.data() + o * v.len * v.inner + start * v.inner,
                        g.data() + o * block, block * sizeof(double));
        }
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

// ---- linear ----

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
    if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.dim(0)) {
        throw std::invalid_argument("linear: dimension mismatch input " + shape_str(x.shape()) +
                                    " vs weight " + shape_str(weight.shape()));
    }
    const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
    if (bias && (bias->rank() != 1 || bias->dim(0) != out_dim)) {
        throw std::invalid_argument("linear: bias shape " + shape_str(bias->shape()) +
                                    " does not match output dimension " + std::to_string(out_dim));
    }
    const std::size_t batch = x.size() / in;
    Tensor y = matmul(reshape(x, {batch, in}), weight);
    if (bias) y = add(y, reshape(*bias, {1, out_dim}));
    Shape oshape = x.shape();
    oshape.back() = out_dim;
    return reshape(y, std::move(oshape));
}

// ---- norms and loss primitives ----

Tensor frobenius_norm(const Tensor& x) {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sq += x[i] * x[i];
    const double s = std::sqrt(sq);
    Tensor out = Tensor::scalar(s);

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(x);
    if (nx < 0) return out;
    auto xv = std::make_shared<const Tensor>(x);
    auto fn = [xv, s](const Tensor& g) {
        const Tensor& xs = *xv;
        Tensor gx(xs.shape());
        if (s > 0.0) {
            const double c = g[0] / s;
            for (std::size_t i = 0; i < xs.size(); ++i) gx[i] = c * xs[i];
        }
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::size_t target) {
    if (logits.rank() != 1) {
        throw std::invalid_argument("softmax_cross_entropy: logits must be rank 1, got " +
                                    shape_str(logits.shape()));
    }
    const std::size_t n = logits.dim(0);
    if (target >= n) {
        throw std::invalid_argument("softmax_cross_entropy: target " + std::to_string(target) +
                                    " out of range for " + std::to_string(n) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, logits[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(logits[i] - mx);
    const double lse = mx + std::log(sum);
    Tensor out = Tensor::scalar(lse - logits[target]);

    Tape* tp = Tape::active();
    if (!tp) return out;
    const int nx = tp->node_of(logits);
    if (nx < 0) return out;
    std::vector<double> probs(n);
    for (std::size_t i = 0; i < n; ++i) probs[i] = std::exp(logits[i] - lse);
    auto fn = [probs, target, n](const Tensor& g) {
        Tensor gx(Shape{n});
        for (std::size_t i = 0; i < n; ++i) {
            gx[i] = g[0] * (probs[i] - (i == target ? 1.0 : 0.0));
        }
        return std::vector<Tensor>{std::move(gx)};
    };
    out.node_id = tp->attach({nx}, std::move(fn), out.shape());
    return out;
}

}  // namespace soap
