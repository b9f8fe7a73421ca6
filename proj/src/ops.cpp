#include "tcl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "tcl/parallel.hpp"

namespace tcl {

namespace {

bool tracing(std::initializer_list<const Tensor*> ins) {
    if (!Tape::active()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

void record(Tensor& out, Tape::BackFn back) {
    out.set_requires_grad(true);
    Tape::active()->push(out.handle(), std::move(back));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data_mut();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (tracing({&a, &b})) {
        auto ah = a.handle(), bh = b.handle();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        record(out, [ah, bh, na, nb](const std::vector<double>& g, Tape::GradMap& m) {
            if (na) {
                auto& ga = Tape::slot(m, ah);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nb) {
                auto& gb = Tape::slot(m, bh);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data_mut();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (tracing({&a, &b})) {
        auto ah = a.handle(), bh = b.handle();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        record(out, [ah, bh, na, nb](const std::vector<double>& g, Tape::GradMap& m) {
            if (na) {
                auto& ga = Tape::slot(m, ah);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nb) {
                auto& gb = Tape::slot(m, bh);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data_mut();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (tracing({&a, &b})) {
        auto ah = a.handle(), bh = b.handle();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        record(out, [ah, bh, na, nb](const std::vector<double>& g, Tape::GradMap& m) {
            if (na) {
                auto& ga = Tape::slot(m, ah);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bh->value[i];
            }
            if (nb) {
                auto& gb = Tape::slot(m, bh);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ah->value[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data_mut();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
    if (tracing({&x})) {
        auto xh = x.handle();
        record(out, [xh, c](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data_mut();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + c;
    if (tracing({&x})) {
        auto xh = x.handle();
        record(out, [xh](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data_mut();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    if (tracing({&x})) {
        auto xh = x.handle();
        record(out, [xh](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xh->value[i] > 0.0) gx[i] += g[i];
        });
    }
    return out;
}

Tensor sqrt_shift(const Tensor& x, double eps) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data_mut();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(xv[i] + eps);
    if (tracing({&x})) {
        auto xh = x.handle(), oh = out.handle();
        record(out, [xh, oh](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 0.5 / oh->value[i];
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (tracing({&x})) {
        auto xh = x.handle();
        record(out, [xh](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor out = Tensor::zeros({m, n});
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* ov = out.data_mut().data();
    parallel_for(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = av[i * k + kk];
                const double* __restrict brow = bv + kk * n;
                double* __restrict orow = ov + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
    });
    if (tracing({&a, &b})) {
        auto ah = a.handle(), bh = b.handle();
        const bool na = a.requires_grad(), nb = b.requires_grad();
        record(out, [ah, bh, na, nb, m, k, n](const std::vector<double>& g, Tape::GradMap& mm) {
            if (na) {
                auto& ga = Tape::slot(mm, ah);
                parallel_for(m, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t i = lo; i < hi; ++i)
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            double acc = 0.0;
                            const double* grow = g.data() + i * n;
                            const double* brow = bh->value.data() + kk * n;
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            ga[i * k + kk] += acc;
                        }
                });
            }
            if (nb) {
                auto& gb = Tape::slot(mm, bh);
                parallel_for(k, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t kk = lo; kk < hi; ++kk)
                        for (std::size_t i = 0; i < m; ++i) {
                            const double aik = ah->value[i * k + kk];
                            const double* grow = g.data() + i * n;
                            double* gbrow = gb.data() + kk * n;
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                        }
                });
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& x) { return permute(x, {1, 0}); }

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t r = x.rank();
    if (axes.size() != r) throw DimensionError("permute: axes count mismatch");
    std::vector<bool> seen(r, false);
    for (std::size_t a : axes) {
        if (a >= r || seen[a]) throw DimensionError("permute: invalid axes");
        seen[a] = true;
    }
    Shape oshape(r);
    for (std::size_t i = 0; i < r; ++i) oshape[i] = x.extent(axes[i]);

    std::vector<std::size_t> in_strides(r, 1), out_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.extent(i);
    for (std::size_t i = r; i-- > 1;) out_strides[i - 1] = out_strides[i] * oshape[i];

    // map: linear output index -> linear input index
    const std::size_t n = x.size();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t in = 0;
        for (std::size_t i = 0; i < r; ++i) in += idx[i] * in_strides[axes[i]];
        src[o] = in;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < oshape[i]) break;
            idx[i] = 0;
        }
    }
    Tensor out = Tensor::zeros(oshape);
    const auto& xv = x.data();
    auto& ov = out.data_mut();
    for (std::size_t o = 0; o < n; ++o) ov[o] = xv[src[o]];
    if (tracing({&x})) {
        auto xh = x.handle();
        auto srcp = std::make_shared<std::vector<std::size_t>>(std::move(src));
        record(out, [xh, srcp](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t o = 0; o < g.size(); ++o) gx[(*srcp)[o]] += g[o];
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    Tensor out = Tensor::from_data(std::move(shape), x.data());
    if (tracing({&x})) {
        auto xh = x.handle();
        record(out, [xh](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor concat_vecs(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw PreconditionError("concat_vecs: empty input list");
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 1) throw DimensionError("concat_vecs: all parts must be rank 1");
        total += p.size();
    }
    Tensor out = Tensor::zeros({total});
    auto& ov = out.data_mut();
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), ov.begin() + off);
        off += p.size();
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (Tape::active() && any) {
        std::vector<std::shared_ptr<TensorImpl>> hs;
        for (const Tensor& p : parts) hs.push_back(p.handle());
        record(out, [hs](const std::vector<double>& g, Tape::GradMap& m) {
            std::size_t off = 0;
            for (const auto& h : hs) {
                if (h->requires_grad) {
                    auto& gp = Tape::slot(m, h);
                    for (std::size_t i = 0; i < h->value.size(); ++i) gp[i] += g[off + i];
                }
                off += h->value.size();
            }
        });
    }
    return out;
}

Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw PreconditionError("stack: empty input list");
    const Shape base = parts[0].shape();
    for (const Tensor& p : parts)
        if (p.shape() != base)
            throw DimensionError("stack: mixed shapes " + shape_str(base) + " and " +
                                 shape_str(p.shape()));
    Shape oshape;
    oshape.push_back(parts.size());
    oshape.insert(oshape.end(), base.begin(), base.end());
    Tensor out = Tensor::zeros(oshape);
    auto& ov = out.data_mut();
    const std::size_t chunk = parts[0].size();
    for (std::size_t s = 0; s < parts.size(); ++s)
        std::copy(parts[s].data().begin(), parts[s].data().end(), ov.begin() + s * chunk);
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (Tape::active() && any) {
        std::vector<std::shared_ptr<TensorImpl>> hs;
        for (const Tensor& p : parts) hs.push_back(p.handle());
        record(out, [hs, chunk](const std::vector<double>& g, Tape::GradMap& m) {
            for (std::size_t s = 0; s < hs.size(); ++s) {
                if (!hs[s]->requires_grad) continue;
                auto& gp = Tape::slot(m, hs[s]);
                for (std::size_t i = 0; i < chunk; ++i) gp[i] += g[s * chunk + i];
            }
        });
    }
    return out;
}

Tensor take_index(const Tensor& x, std::size_t i) {
    if (x.rank() < 2) throw DimensionError("take_index: rank must be >= 2");
    if (i >= x.extent(0))
        throw PreconditionError("take_index: index " + std::to_string(i) + " out of range");
    Shape oshape(x.shape().begin() + 1, x.shape().end());
    const std::size_t chunk = shape_numel(oshape);
    Tensor out = Tensor::zeros(oshape);
    std::copy(x.data().begin() + i * chunk, x.data().begin() + (i + 1) * chunk,
              out.data_mut().begin());
    if (tracing({&x})) {
        auto xh = x.handle();
        record(out, [xh, i, chunk](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t j = 0; j < chunk; ++j) gx[i * chunk + j] += g[j];
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.extent(0) != x.extent(1))
        throw DimensionError("add_rowvec: shapes " + shape_str(x.shape()) + " and " +
                             shape_str(b.shape()) + " incompatible");
    const std::size_t m = x.extent(0), n = x.extent(1);
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    const auto& bv = b.data();
    auto& ov = out.data_mut();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + bv[j];
    if (tracing({&x, &b})) {
        auto xh = x.handle(), bh = b.handle();
        const bool nx = x.requires_grad(), nb = b.requires_grad();
        record(out, [xh, bh, nx, nb, m, n](const std::vector<double>& g, Tape::GradMap& mm) {
            if (nx) {
                auto& gx = Tape::slot(mm, xh);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (nb) {
                auto& gb = Tape::slot(mm, bh);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    }
    return out;
}

Tensor add_chanvec(const Tensor& x, const Tensor& b) {
    if (x.rank() != 3 || b.rank() != 1 || b.extent(0) != x.extent(0))
        throw DimensionError("add_chanvec: shapes " + shape_str(x.shape()) + " and " +
                             shape_str(b.shape()) + " incompatible");
    const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    const auto& bv = b.data();
    auto& ov = out.data_mut();
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t s = 0; s < hw; ++s) ov[ci * hw + s] = xv[ci * hw + s] + bv[ci];
    if (tracing({&x, &b})) {
        auto xh = x.handle(), bh = b.handle();
        const bool nx = x.requires_grad(), nb = b.requires_grad();
        record(out, [xh, bh, nx, nb, c, hw](const std::vector<double>& g, Tape::GradMap& mm) {
            if (nx) {
                auto& gx = Tape::slot(mm, xh);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (nb) {
                auto& gb = Tape::slot(mm, bh);
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t s = 0; s < hw; ++s) gb[ci] += g[ci * hw + s];
            }
        });
    }
    return out;
}

namespace {

struct ConvDims {
    std::size_t cin, h, w, cout, kh, kw, ho, wo;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, int stride, int pad) {
    if (x.rank() != 3 || k.rank() != 4)
        throw DimensionError("conv2d: expected input [C,H,W] and kernel [Co,Ci,kh,kw], got " +
                             shape_str(x.shape()) + " and " + shape_str(k.shape()));
    if (stride < 1 || pad < 0) throw PreconditionError("conv2d: stride must be >= 1, pad >= 0");
    ConvDims d;
    d.cin = x.extent(0);
    d.h = x.extent(1);
    d.w = x.extent(2);
    d.cout = k.extent(0);
    d.kh = k.extent(2);
    d.kw = k.extent(3);
    d.stride = stride;
    d.pad = pad;
    if (k.extent(1) != d.cin)
        throw DimensionError("conv2d: input channels of " + shape_str(x.shape()) +
                             " do not match kernel " + shape_str(k.shape()));
    if (d.kh > d.h + 2 * static_cast<std::size_t>(pad) ||
        d.kw > d.w + 2 * static_cast<std::size_t>(pad))
        throw DimensionError("conv2d: kernel " + shape_str(k.shape()) +
                             " larger than padded input " + shape_str(x.shape()));
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

// valid output range [lo, hi) for one kernel offset kk given input extent
inline void conv_range(std::size_t extent, std::size_t out_extent, std::size_t kk, int stride,
                       int pad, std::size_t& lo, std::size_t& hi) {
    // in = out*stride + kk - pad must lie in [0, extent)
    long first = static_cast<long>(pad) - static_cast<long>(kk);
    lo = first <= 0 ? 0
                    : static_cast<std::size_t>((first + stride - 1) / stride);
    long last = static_cast<long>(extent) - 1 + static_cast<long>(pad) - static_cast<long>(kk);
    hi = last < 0 ? 0 : std::min<std::size_t>(out_extent, static_cast<std::size_t>(last / stride) + 1);
    if (lo > hi) lo = hi;
}

} // namespace

namespace {

// stride-1 row update fusing all kw taps into one pass
inline void conv_row_stride1(double* __restrict orow, const double* __restrict xrow,
                             const double* __restrict wrow, std::size_t kw, std::size_t wo,
                             long shift, std::size_t w) {
    for (std::size_t c = 0; c < kw; ++c) {
        const double wv = wrow[c];
        if (wv == 0.0) continue;
        const long off = shift + static_cast<long>(c);
        const std::size_t lo = off < 0 ? static_cast<std::size_t>(-off) : 0;
        const std::size_t hi =
            std::min<std::size_t>(wo, off >= static_cast<long>(w)
                                          ? 0
                                          : static_cast<std::size_t>(static_cast<long>(w) - off));
        const double* __restrict xs = xrow + off;
        for (std::size_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xs[ow];
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
    const ConvDims d = conv_dims(x, k, stride, pad);
    Tensor out = Tensor::zeros({d.cout, d.ho, d.wo});
    const double* xv = x.data().data();
    const double* kv = k.data().data();
    double* ov = out.data_mut().data();
    parallel_for(d.cout, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t co = lo; co < hi; ++co)
            for (std::size_t ci = 0; ci < d.cin; ++ci)
                for (std::size_t r = 0; r < d.kh; ++r) {
                    const double* wrow = kv + ((co * d.cin + ci) * d.kh + r) * d.kw;
                    std::size_t oh_lo, oh_hi;
                    conv_range(d.h, d.ho, r, stride, pad, oh_lo, oh_hi);
                    if (stride == 1) {
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const std::size_t ih = oh + r - pad;
                            conv_row_stride1(ov + (co * d.ho + oh) * d.wo,
                                             xv + (ci * d.h + ih) * d.w, wrow, d.kw, d.wo,
                                             -static_cast<long>(pad), d.w);
                        }
                        continue;
                    }
                    for (std::size_t c = 0; c < d.kw; ++c) {
                        const double wv = wrow[c];
                        if (wv == 0.0) continue;
                        std::size_t ow_lo, ow_hi;
                        conv_range(d.w, d.wo, c, stride, pad, ow_lo, ow_hi);
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const std::size_t ih = oh * stride + r - pad;
                            const double* __restrict xrow = xv + (ci * d.h + ih) * d.w;
                            double* __restrict orow = ov + (co * d.ho + oh) * d.wo;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                orow[ow] += wv * xrow[ow * stride + c - pad];
                        }
                    }
                }
    });
    if (tracing({&x, &k})) {
        auto xh = x.handle(), kh_ = k.handle();
        const bool nx = x.requires_grad(), nk = k.requires_grad();
        record(out, [xh, kh_, nx, nk, d, stride, pad](const std::vector<double>& g,
                                                      Tape::GradMap& m) {
            const double* kv = kh_->value.data();
            const double* xv = xh->value.data();
            if (nx) {
                auto& gx = Tape::slot(m, xh);
                parallel_for(d.cin, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t ci = lo; ci < hi; ++ci)
                        for (std::size_t co = 0; co < d.cout; ++co)
                            for (std::size_t r = 0; r < d.kh; ++r) {
                                const double* wrow = kv + ((co * d.cin + ci) * d.kh + r) * d.kw;
                                std::size_t oh_lo, oh_hi;
                                conv_range(d.h, d.ho, r, stride, pad, oh_lo, oh_hi);
                                if (stride == 1) {
                                    // gx[ih, ow+c-pad] += w[c] * g[oh, ow]: per input row,
                                    // gather each tap's contribution in one pass
                                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        const std::size_t ih = oh + r - pad;
                                        double* __restrict gxrow =
                                            gx.data() + (ci * d.h + ih) * d.w;
                                        const double* __restrict grow =
                                            g.data() + (co * d.ho + oh) * d.wo;
                                        for (std::size_t c = 0; c < d.kw; ++c) {
                                            const double wv = wrow[c];
                                            if (wv == 0.0) continue;
                                            const long off =
                                                static_cast<long>(c) - static_cast<long>(pad);
                                            const std::size_t lo2 =
                                                off < 0 ? static_cast<std::size_t>(-off) : 0;
                                            const std::size_t hi2 = std::min<std::size_t>(
                                                d.wo,
                                                off >= static_cast<long>(d.w)
                                                    ? 0
                                                    : static_cast<std::size_t>(
                                                          static_cast<long>(d.w) - off));
                                            double* __restrict gxs = gxrow + off;
                                            for (std::size_t ow = lo2; ow < hi2; ++ow)
                                                gxs[ow] += wv * grow[ow];
                                        }
                                    }
                                    continue;
                                }
                                for (std::size_t c = 0; c < d.kw; ++c) {
                                    const double wv = wrow[c];
                                    if (wv == 0.0) continue;
                                    std::size_t ow_lo, ow_hi;
                                    conv_range(d.w, d.wo, c, stride, pad, ow_lo, ow_hi);
                                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        const std::size_t ih = oh * stride + r - pad;
                                        double* __restrict gxrow =
                                            gx.data() + (ci * d.h + ih) * d.w;
                                        const double* __restrict grow =
                                            g.data() + (co * d.ho + oh) * d.wo;
                                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                            gxrow[ow * stride + c - pad] += wv * grow[ow];
                                    }
                                }
                            }
                });
            }
            if (nk) {
                auto& gk = Tape::slot(m, kh_);
                parallel_for(d.cout, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t co = lo; co < hi; ++co)
                        for (std::size_t ci = 0; ci < d.cin; ++ci)
                            for (std::size_t r = 0; r < d.kh; ++r)
                                for (std::size_t c = 0; c < d.kw; ++c) {
                                    std::size_t oh_lo, oh_hi, ow_lo, ow_hi;
                                    conv_range(d.h, d.ho, r, stride, pad, oh_lo, oh_hi);
                                    conv_range(d.w, d.wo, c, stride, pad, ow_lo, ow_hi);
                                    double acc = 0.0;
                                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        const std::size_t ih = oh * stride + r - pad;
                                        const double* __restrict xrow =
                                            xv + (ci * d.h + ih) * d.w;
                                        const double* __restrict grow =
                                            g.data() + (co * d.ho + oh) * d.wo;
                                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                            acc += grow[ow] * xrow[ow * stride + c - pad];
                                    }
                                    gk[((co * d.cin + ci) * d.kh + r) * d.kw + c] += acc;
                                }
                });
            }
        });
    }
    return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank())
        throw PreconditionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(x.shape()));
    const std::size_t kdim = x.extent(axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);

    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data_mut();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * kdim * inner + in;
            double mx = xv[base];
            for (std::size_t j = 1; j < kdim; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < kdim; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                ov[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < kdim; ++j) ov[base + j * inner] /= z;
        }
    if (tracing({&x})) {
        auto xh = x.handle(), oh = out.handle();
        record(out, [xh, oh, outer, inner, kdim](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            const auto& y = oh->value;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * kdim * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < kdim; ++j)
                        dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < kdim; ++j) {
                        const std::size_t idx = base + j * inner;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
        });
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3)
        throw DimensionError("global_avg_pool: expected [C,H,W], got " + shape_str(x.shape()));
    const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
    const double inv = 1.0 / static_cast<double>(hw);
    Tensor out = Tensor::zeros({c});
    const auto& xv = x.data();
    auto& ov = out.data_mut();
    for (std::size_t ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (std::size_t s = 0; s < hw; ++s) acc += xv[ci * hw + s];
        ov[ci] = acc * inv;
    }
    if (tracing({&x})) {
        auto xh = x.handle();
        record(out, [xh, c, hw, inv](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t s = 0; s < hw; ++s) gx[ci * hw + s] += g[ci] * inv;
        });
    }
    return out;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    if (x.rank() != 1 && x.rank() != 2)
        throw DimensionError("l2_normalize_rows: expected rank 1 or 2, got " +
                             shape_str(x.shape()));
    const std::size_t rows = x.rank() == 2 ? x.extent(0) : 1;
    const std::size_t n = x.rank() == 2 ? x.extent(1) : x.extent(0);
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data_mut();
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < n; ++j) sq += xv[r * n + j] * xv[r * n + j];
        const double norm = std::max(std::sqrt(sq), eps);
        norms[r] = norm;
        for (std::size_t j = 0; j < n; ++j) ov[r * n + j] = xv[r * n + j] / norm;
    }
    if (tracing({&x})) {
        auto xh = x.handle(), oh = out.handle();
        auto normsp = std::make_shared<std::vector<double>>(std::move(norms));
        record(out, [xh, oh, normsp, rows, n](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gx = Tape::slot(m, xh);
            const auto& y = oh->value;
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                const double inv = 1.0 / (*normsp)[r];
                for (std::size_t j = 0; j < n; ++j)
                    gx[r * n + j] += (g[r * n + j] - dot * y[r * n + j]) * inv;
            }
        });
    }
    return out;
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw DimensionError("cross_entropy_logits: expected [B,C], got " +
                             shape_str(logits.shape()));
    const std::size_t b = logits.extent(0), c = logits.extent(1);
    if (labels.size() != b)
        throw PreconditionError("cross_entropy_logits: label count " +
                                std::to_string(labels.size()) + " != batch " + std::to_string(b));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw PreconditionError("cross_entropy_logits: label " + std::to_string(y) +
                                    " out of range for " + std::to_string(c) + " classes");
    const auto& lv = logits.data();
    std::vector<double> probs(b * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double mx = lv[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double e = std::exp(lv[i * c + j] - mx);
            probs[i * c + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
        loss += std::log(z) + mx - lv[i * c + labels[i]];
    }
    loss /= static_cast<double>(b);
    Tensor out = Tensor::scalar(loss);
    if (tracing({&logits})) {
        auto lh = logits.handle();
        auto probsp = std::make_shared<std::vector<double>>(std::move(probs));
        auto labelsp = std::make_shared<std::vector<int>>(labels);
        record(out, [lh, probsp, labelsp, b, c](const std::vector<double>& g, Tape::GradMap& m) {
            auto& gl = Tape::slot(m, lh);
            const double s = g[0] / static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    double d = (*probsp)[i * c + j];
                    if (static_cast<std::size_t>((*labelsp)[i]) == j) d -= 1.0;
                    gl[i * c + j] += s * d;
                }
        });
    }
    return out;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnStats& stats,
                 BnMode mode, double momentum, double eps, bool update_running,
                 BnBatchStats* batch_out) {
    if (x.rank() != 2 && x.rank() != 4)
        throw DimensionError("batchnorm: expected [B,C] or [B,C,H,W], got " +
                             shape_str(x.shape()));
    const std::size_t b = x.extent(0), c = x.extent(1);
    const std::size_t sp = x.size() / (b * c);
    if (gamma.size() != c || beta.size() != c)
        throw DimensionError("batchnorm: gamma/beta length must equal channel count " +
                             std::to_string(c) + ", got " + shape_str(gamma.shape()) + " and " +
                             shape_str(beta.shape()));
    if (b == 0) throw PreconditionError("batchnorm: zero batch");
    if (stats.mean.size() != c || stats.var.size() != c)
        throw PreconditionError("batchnorm: running stats not sized for " + std::to_string(c) +
                                " channels");

    const std::size_t cnt = b * sp;
    const auto& xv = x.data();
    std::vector<double> mean(c, 0.0), var(c, 0.0), istd(c, 0.0);
    if (mode == BnMode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t s = 0; s < sp; ++s) acc += xv[(i * c + ch) * sp + s];
            mean[ch] = acc / static_cast<double>(cnt);
            double vacc = 0.0;
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t s = 0; s < sp; ++s) {
                    const double d = xv[(i * c + ch) * sp + s] - mean[ch];
                    vacc += d * d;
                }
            var[ch] = vacc / static_cast<double>(cnt);
        }
        if (update_running) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch];
            }
        }
        if (batch_out) {
            batch_out->mean = mean;
            batch_out->var = var;
        }
    } else {
        mean = stats.mean;
        var = stats.var;
    }
    for (std::size_t ch = 0; ch < c; ++ch) istd[ch] = 1.0 / std::sqrt(var[ch] + eps);

    Tensor out = Tensor::zeros(x.shape());
    auto& ov = out.data_mut();
    std::vector<double> xhat(x.size());
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t s = 0; s < sp; ++s) {
                const std::size_t idx = (i * c + ch) * sp + s;
                xhat[idx] = (xv[idx] - mean[ch]) * istd[ch];
                ov[idx] = gv[ch] * xhat[idx] + bv[ch];
            }

    if (tracing({&x, &gamma, &beta})) {
        auto xh = x.handle(), gh = gamma.handle(), bh = beta.handle();
        const bool nx = x.requires_grad(), ng = gamma.requires_grad(), nb = beta.requires_grad();
        auto xhatp = std::make_shared<std::vector<double>>(std::move(xhat));
        auto istdp = std::make_shared<std::vector<double>>(std::move(istd));
        const bool train = mode == BnMode::train;
        record(out, [xh, gh, bh, nx, ng, nb, xhatp, istdp, b, c, sp, cnt,
                     train](const std::vector<double>& g, Tape::GradMap& m) {
            const auto& xhat = *xhatp;
            // per-channel reductions shared by all gradients
            std::vector<double> gsum(c, 0.0), gxhat(c, 0.0);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t s = 0; s < sp; ++s) {
                        const std::size_t idx = (i * c + ch) * sp + s;
                        gsum[ch] += g[idx];
                        gxhat[ch] += g[idx] * xhat[idx];
                    }
            if (nb) {
                auto& gb = Tape::slot(m, bh);
                for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += gsum[ch];
            }
            if (ng) {
                auto& gg = Tape::slot(m, gh);
                for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += gxhat[ch];
            }
            if (nx) {
                auto& gx = Tape::slot(m, xh);
                const double invcnt = 1.0 / static_cast<double>(cnt);
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double k = gh->value[ch] * (*istdp)[ch];
                        for (std::size_t s = 0; s < sp; ++s) {
                            const std::size_t idx = (i * c + ch) * sp + s;
                            if (train)
                                gx[idx] += k * (g[idx] - gsum[ch] * invcnt -
                                                xhat[idx] * gxhat[ch] * invcnt);
                            else
                                gx[idx] += k * g[idx];
                        }
                    }
            }
        });
    }
    return out;
}

} // namespace tcl
