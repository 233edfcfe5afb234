#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crowd/errors.hpp"

namespace crowd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

class GradTape;

struct TensorData {
    Shape shape;
    std::vector<double> v;
    std::vector<double> g;   // allocated lazily; empty means "all zero / untouched"
    bool requires_grad = false;
    const GradTape* tape = nullptr; // tape that recorded the producing op, if any
};

inline void ensure_grad(TensorData& t) {
    if (t.g.empty()) t.g.assign(t.v.size(), 0.0);
}

// Value-semantics handle onto shared row-major float64 storage. Values are
// immutable once an op has consumed them; only grad buffers accumulate.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : d_(std::make_shared<TensorData>()) {
        d_->shape = std::move(shape);
        d_->v.assign(shape_numel(d_->shape), fill);
    }

    Tensor(Shape shape, std::vector<double> values)
        : d_(std::make_shared<TensorData>()) {
        if (shape_numel(shape) != values.size())
            throw ShapeMismatch("tensor init: " + shape_str(shape) + " vs " +
                                std::to_string(values.size()) + " values");
        d_->shape = std::move(shape);
        d_->v = std::move(values);
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
    static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->v.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

    double* data() { return d_->v.data(); }
    const double* data() const { return d_->v.data(); }
    std::vector<double>& values() { return d_->v; }
    const std::vector<double>& values() const { return d_->v; }

    double item() const {
        if (size() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
        return d_->v[0];
    }

    double& operator[](std::size_t i) { return d_->v[i]; }
    double operator[](std::size_t i) const { return d_->v[i]; }

    Tensor& set_requires_grad(bool b = true) {
        d_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return d_ && d_->requires_grad; }

    // Zero-filled on first access so callers can always read a full buffer.
    std::vector<double>& grad() {
        ensure_grad(*d_);
        return d_->g;
    }
    const std::vector<double>* grad_if() const { return d_->g.empty() ? nullptr : &d_->g; }
    void zero_grad() {
        if (!d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), 0.0);
    }

    // Deep copy of values; fresh grad state.
    Tensor clone() const {
        Tensor t(d_->shape, d_->v);
        t.d_->requires_grad = d_->requires_grad;
        return t;
    }

    // Same values, no gradient participation.
    Tensor detach() const { return Tensor(d_->shape, d_->v); }

    std::shared_ptr<TensorData> node() const { return d_; }

private:
    std::shared_ptr<TensorData> d_;
};

// Append-only reverse-mode tape. Constructing one activates it for the
// current thread; ops record backward closures while a tape is active and
// at least one input requires grad. Closures run once each, in reverse
// append order, which is a valid topological order by construction.
class GradTape {
public:
    GradTape() : prev_(active_ref()) { active_ref() = this; }
    ~GradTape() { active_ref() = prev_; }
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape* active() { return active_ref(); }

    void record(TensorData* out, std::function<void()> back) {
        out->tape = this;
        nodes_.push_back(std::move(back));
    }

    std::size_t node_count() const { return nodes_.size(); }

    void backward(const Tensor& loss) {
        if (loss.size() != 1)
            throw NotScalar("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (loss.node()->tape != this)
            throw DetachedGraph("backward: loss was not produced on this tape");
        ensure_grad(*loss.node());
        loss.node()->g[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    static GradTape*& active_ref() {
        thread_local GradTape* t = nullptr;
        return t;
    }

    std::vector<std::function<void()>> nodes_;
    GradTape* prev_;
};

namespace detail {

inline bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (!GradTape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void mark_out(Tensor& out, std::function<void()> back) {
    out.set_requires_grad(true);
    GradTape::active()->record(out.node().get(), std::move(back));
}

// Trailing-dimension broadcast plan: shapes are right-aligned, each dim must
// match or be 1. Strides of broadcast dims are zero.
struct BcastPlan {
    Shape out;
    std::vector<std::size_t> sa, sb; // per-out-dim strides into a and b
    bool identical = false;
};

inline BcastPlan make_bcast(const Shape& a, const Shape& b) {
    BcastPlan p;
    const std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    p.out.resize(r);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    // row-major strides of a and b
    std::vector<std::size_t> stra(ra), strb(rb);
    std::size_t acc = 1;
    for (std::size_t i = ra; i-- > 0;) { stra[i] = acc; acc *= a[i]; }
    acc = 1;
    for (std::size_t i = rb; i-- > 0;) { strb[i] = acc; acc *= b[i]; }
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - ra ? 1 : a[i - (r - ra)];
        const std::size_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            throw ShapeMismatch("broadcast: " + shape_str(a) + " vs " + shape_str(b));
        p.out[i] = std::max(da, db);
        if (da != 1) p.sa[i] = stra[i - (r - ra)];
        if (db != 1) p.sb[i] = strb[i - (r - rb)];
    }
    p.identical = (a == b);
    return p;
}

// Walks the broadcast output space calling f(out_index, a_offset, b_offset).
template <typename F>
inline void bcast_walk(const BcastPlan& p, F&& f) {
    const std::size_t r = p.out.size();
    const std::size_t n = shape_numel(p.out);
    std::vector<std::size_t> coord(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (std::size_t d = r; d-- > 0;) {
            oa += p.sa[d];
            ob += p.sb[d];
            if (++coord[d] < p.out[d]) break;
            oa -= p.sa[d] * p.out[d];
            ob -= p.sb[d] * p.out[d];
            coord[d] = 0;
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

enum class OpKind { Add, Sub, Mul };

namespace detail {

// Hot broadcast layouts: b varying only along the leading dim of a
// (channel bias), or b constant along it (shared plane).
enum class BcastFast { none, channel, plane };

inline BcastFast classify_fast(const BcastPlan& p, const Shape& a, const Shape& b) {
    if (p.identical || p.out != a || b.size() == 0) return BcastFast::none;
    bool tail_zero = true;
    for (std::size_t d = 1; d < p.sb.size(); ++d) tail_zero &= p.sb[d] == 0;
    if (tail_zero && p.sb[0] != 0) return BcastFast::channel;
    if (p.sb[0] == 0 && b.size() == shape_numel(p.out) / p.out[0]) {
        std::size_t stride = 1;
        bool dense = true;
        for (std::size_t d = p.sb.size(); d-- > 1;) {
            dense &= (p.sb[d] == stride || p.out[d] == 1);
            stride *= p.out[d];
        }
        if (dense) return BcastFast::plane;
    }
    return BcastFast::none;
}

} // namespace detail

inline Tensor elementwise(OpKind kind, const Tensor& a, const Tensor& b) {
    auto plan = detail::make_bcast(a.shape(), b.shape());
    Tensor out(plan.out);
    const double* av = a.data();
    const double* bv = b.data();
    double* ov = out.data();
    const auto fast = detail::classify_fast(plan, a.shape(), b.shape());
    if (plan.identical) {
        const std::size_t n = out.size();
        switch (kind) {
            case OpKind::Add: for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i]; break;
            case OpKind::Sub: for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i]; break;
            case OpKind::Mul: for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i]; break;
        }
    } else if (fast == detail::BcastFast::channel) {
        const std::size_t c = plan.out[0], inner = out.size() / plan.out[0];
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double s = bv[ci * plan.sb[0]];
            const double* ap = av + ci * inner;
            double* op = ov + ci * inner;
            switch (kind) {
                case OpKind::Add: for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] + s; break;
                case OpKind::Sub: for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] - s; break;
                case OpKind::Mul: for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] * s; break;
            }
        }
    } else if (fast == detail::BcastFast::plane) {
        const std::size_t c = plan.out[0], inner = out.size() / plan.out[0];
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double* ap = av + ci * inner;
            double* op = ov + ci * inner;
            switch (kind) {
                case OpKind::Add: for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] + bv[i]; break;
                case OpKind::Sub: for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] - bv[i]; break;
                case OpKind::Mul: for (std::size_t i = 0; i < inner; ++i) op[i] = ap[i] * bv[i]; break;
            }
        }
    } else {
        detail::bcast_walk(plan, [&](std::size_t i, std::size_t oa, std::size_t ob) {
            switch (kind) {
                case OpKind::Add: ov[i] = av[oa] + bv[ob]; break;
                case OpKind::Sub: ov[i] = av[oa] - bv[ob]; break;
                case OpKind::Mul: ov[i] = av[oa] * bv[ob]; break;
            }
        });
    }
    if (detail::want_grad({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        const bool need_ga = a.requires_grad();
        const bool need_gb = b.requires_grad();
        detail::mark_out(out, [kind, plan, fast, an, bn, on, need_ga, need_gb]() {
            if (on->g.empty()) return;
            if (need_ga) ensure_grad(*an);
            if (need_gb) ensure_grad(*bn);
            const double* g = on->g.data();
            double* ga = need_ga ? an->g.data() : nullptr;
            double* gb = need_gb ? bn->g.data() : nullptr;
            const double* av2 = an->v.data();
            const double* bv2 = bn->v.data();
            if (fast == detail::BcastFast::channel || fast == detail::BcastFast::plane) {
                const std::size_t c = plan.out[0], inner = on->v.size() / plan.out[0];
                const double sign = kind == OpKind::Sub ? -1.0 : 1.0;
                for (std::size_t ci = 0; ci < c; ++ci) {
                    const double* gp = g + ci * inner;
                    const double* ap = av2 + ci * inner;
                    double* gap = ga ? ga + ci * inner : nullptr;
                    if (fast == detail::BcastFast::channel) {
                        const std::size_t boff = ci * plan.sb[0];
                        if (kind == OpKind::Mul) {
                            const double s = bv2[boff];
                            if (gap)
                                for (std::size_t i = 0; i < inner; ++i) gap[i] += gp[i] * s;
                            if (gb) {
                                double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
                                std::size_t i = 0;
                                for (; i + 4 <= inner; i += 4) {
                                    acc0 += gp[i] * ap[i];
                                    acc1 += gp[i + 1] * ap[i + 1];
                                    acc2 += gp[i + 2] * ap[i + 2];
                                    acc3 += gp[i + 3] * ap[i + 3];
                                }
                                for (; i < inner; ++i) acc0 += gp[i] * ap[i];
                                gb[boff] += acc0 + acc1 + acc2 + acc3;
                            }
                        } else {
                            if (gap)
                                for (std::size_t i = 0; i < inner; ++i) gap[i] += gp[i];
                            if (gb) {
                                double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
                                std::size_t i = 0;
                                for (; i + 4 <= inner; i += 4) {
                                    acc0 += gp[i];
                                    acc1 += gp[i + 1];
                                    acc2 += gp[i + 2];
                                    acc3 += gp[i + 3];
                                }
                                for (; i < inner; ++i) acc0 += gp[i];
                                gb[boff] += sign * (acc0 + acc1 + acc2 + acc3);
                            }
                        }
                    } else { // plane
                        if (kind == OpKind::Mul) {
                            if (gap)
                                for (std::size_t i = 0; i < inner; ++i) gap[i] += gp[i] * bv2[i];
                            if (gb)
                                for (std::size_t i = 0; i < inner; ++i) gb[i] += gp[i] * ap[i];
                        } else {
                            if (gap)
                                for (std::size_t i = 0; i < inner; ++i) gap[i] += gp[i];
                            if (gb)
                                for (std::size_t i = 0; i < inner; ++i) gb[i] += sign * gp[i];
                        }
                    }
                }
            } else if (plan.identical) {
                const std::size_t n = on->v.size();
                for (std::size_t i = 0; i < n; ++i) {
                    switch (kind) {
                        case OpKind::Add:
                            if (ga) ga[i] += g[i];
                            if (gb) gb[i] += g[i];
                            break;
                        case OpKind::Sub:
                            if (ga) ga[i] += g[i];
                            if (gb) gb[i] -= g[i];
                            break;
                        case OpKind::Mul:
                            if (ga) ga[i] += g[i] * bv2[i];
                            if (gb) gb[i] += g[i] * av2[i];
                            break;
                    }
                }
            } else {
                detail::bcast_walk(plan, [&](std::size_t i, std::size_t oa, std::size_t ob) {
                    switch (kind) {
                        case OpKind::Add:
                            if (ga) ga[oa] += g[i];
                            if (gb) gb[ob] += g[i];
                            break;
                        case OpKind::Sub:
                            if (ga) ga[oa] += g[i];
                            if (gb) gb[ob] -= g[i];
                            break;
                        case OpKind::Mul:
                            if (ga) ga[oa] += g[i] * bv2[ob];
                            if (gb) gb[ob] += g[i] * av2[oa];
                            break;
                    }
                });
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(OpKind::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(OpKind::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(OpKind::Mul, a, b); }

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* av = a.data();
    double* ov = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] * c;
    if (detail::want_grad({&a})) {
        auto an = a.node(), on = out.node();
        detail::mark_out(out, [c, an, on]() {
            if (on->g.empty()) return;
            ensure_grad(*an);
            for (std::size_t i = 0; i < on->g.size(); ++i) an->g[i] += c * on->g[i];
        });
    }
    return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + c;
    if (detail::want_grad({&a})) {
        auto an = a.node(), on = out.node();
        detail::mark_out(out, [an, on]() {
            if (on->g.empty()) return;
            ensure_grad(*an);
            for (std::size_t i = 0; i < on->g.size(); ++i) an->g[i] += on->g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeMismatch("matmul: need rank-2 operands, got " + shape_str(a.shape()) +
                            " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeMismatch("matmul: inner dims " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    Tensor out(Shape{m, n});
    const double* av = a.data();
    const double* bv = b.data();
    double* ov = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = ov + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    if (detail::want_grad({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        const bool need_ga = a.requires_grad();
        const bool need_gb = b.requires_grad();
        detail::mark_out(out, [m, k, n, an, bn, on, need_ga, need_gb]() {
            if (on->g.empty()) return;
            const double* g = on->g.data();
            const double* av2 = an->v.data();
            const double* bv2 = bn->v.data();
            if (need_ga) {
                ensure_grad(*an);
                double* ga = an->g.data();
                // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* grow = g + i * n;
                        const double* brow = bv2 + p * n;
                        double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                        std::size_t j = 0;
                        for (; j + 4 <= n; j += 4) {
                            a0 += grow[j] * brow[j];
                            a1 += grow[j + 1] * brow[j + 1];
                            a2 += grow[j + 2] * brow[j + 2];
                            a3 += grow[j + 3] * brow[j + 3];
                        }
                        for (; j < n; ++j) a0 += grow[j] * brow[j];
                        ga[i * k + p] += (a0 + a1) + (a2 + a3);
                    }
            }
            if (need_gb) {
                ensure_grad(*bn);
                double* gb = bn->g.data();
                // dB = A^T * dC
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double aip = av2[i * k + p];
                        const double* grow = g + i * n;
                        double* gbrow = gb + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: single image, cross-correlation semantics

struct Conv2dSpec {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
};

namespace detail {

inline std::vector<double>& conv_scratch() {
    thread_local std::vector<double> buf;
    return buf;
}

inline std::vector<double>& conv_scratch2() {
    thread_local std::vector<double> buf;
    return buf;
}

} // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dSpec& spec = {}) {
    if (x.rank() != 3 || w.rank() != 4)
        throw ShapeMismatch("conv2d: expected x rank 3 and w rank 4, got " +
                            shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int cin = static_cast<int>(x.dim(0));
    const int h = static_cast<int>(x.dim(1));
    const int wd = static_cast<int>(x.dim(2));
    const int cout = static_cast<int>(w.dim(0));
    const int k = static_cast<int>(w.dim(2));
    if (static_cast<int>(w.dim(1)) != cin || static_cast<int>(w.dim(3)) != k)
        throw ShapeMismatch("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                            shape_str(x.shape()));
    if (k % 2 == 0) throw InvalidHyperparameter("conv2d: kernel size must be odd");
    if (spec.dilation < 1) throw InvalidHyperparameter("conv2d: dilation must be >= 1");
    if (spec.stride < 1) throw InvalidHyperparameter("conv2d: stride must be >= 1");
    if (spec.pad < 0) throw InvalidHyperparameter("conv2d: pad must be >= 0");
    const int span = spec.dilation * (k - 1) + 1;
    const int ho = (h + 2 * spec.pad - span) / spec.stride + 1;
    const int wo = (wd + 2 * spec.pad - span) / spec.stride + 1;
    if (h + 2 * spec.pad < span || wd + 2 * spec.pad < span || ho < 1 || wo < 1)
        throw ShapeMismatch("conv2d: kernel span exceeds padded input");

    // zero-padded input copy; rows become contiguous saxpy operands
    const int hp = h + 2 * spec.pad, wp = wd + 2 * spec.pad;
    auto& xp = detail::conv_scratch();
    xp.assign(static_cast<std::size_t>(cin) * hp * wp, 0.0);
    const double* xv = x.data();
    for (int c = 0; c < cin; ++c)
        for (int y = 0; y < h; ++y)
            std::copy(xv + (static_cast<std::size_t>(c) * h + y) * wd,
                      xv + (static_cast<std::size_t>(c) * h + y + 1) * wd,
                      xp.begin() + (static_cast<std::size_t>(c) * hp + y + spec.pad) * wp + spec.pad);

    Tensor out(Shape{static_cast<std::size_t>(cout), static_cast<std::size_t>(ho),
                     static_cast<std::size_t>(wo)});
    const double* wv = w.data();
    double* ov = out.data();
    const int s = spec.stride, d = spec.dilation;
    for (int oc = 0; oc < cout; ++oc) {
        double* oplane = ov + static_cast<std::size_t>(oc) * ho * wo;
        for (int ic = 0; ic < cin; ++ic) {
            const double* xplane = xp.data() + static_cast<std::size_t>(ic) * hp * wp;
            const double* wbase = wv + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double wval = wbase[ky * k + kx];
                    if (wval == 0.0) continue;
                    for (int oy = 0; oy < ho; ++oy) {
                        const double* xrow = xplane + (oy * s + ky * d) * wp + kx * d;
                        double* orow = oplane + oy * wo;
                        if (s == 1) {
                            for (int ox = 0; ox < wo; ++ox) orow[ox] += wval * xrow[ox];
                        } else {
                            for (int ox = 0; ox < wo; ++ox) orow[ox] += wval * xrow[ox * s];
                        }
                    }
                }
        }
    }

    if (detail::want_grad({&x, &w})) {
        auto xn = x.node(), wn = w.node(), on = out.node();
        const bool need_gx = x.requires_grad();
        const bool need_gw = w.requires_grad();
        Conv2dSpec sp = spec;
        detail::mark_out(out, [=]() {
            if (on->g.empty()) return;
            const int s2 = sp.stride, d2 = sp.dilation, p2 = sp.pad;
            const double* g = on->g.data();
            // rebuild padded input (scratch is shared, cannot persist)
            auto& xp2 = detail::conv_scratch();
            xp2.assign(static_cast<std::size_t>(cin) * hp * wp, 0.0);
            const double* xv2 = xn->v.data();
            for (int c = 0; c < cin; ++c)
                for (int y = 0; y < h; ++y)
                    std::copy(xv2 + (static_cast<std::size_t>(c) * h + y) * wd,
                              xv2 + (static_cast<std::size_t>(c) * h + y + 1) * wd,
                              xp2.begin() + (static_cast<std::size_t>(c) * hp + y + p2) * wp + p2);
            if (need_gw) {
                ensure_grad(*wn);
                double* gw = wn->g.data();
                for (int oc = 0; oc < cout; ++oc) {
                    const double* gplane = g + static_cast<std::size_t>(oc) * ho * wo;
                    for (int ic = 0; ic < cin; ++ic) {
                        const double* xplane = xp2.data() + static_cast<std::size_t>(ic) * hp * wp;
                        double* gwbase = gw + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                double acc = 0.0;
                                for (int oy = 0; oy < ho; ++oy) {
                                    const double* xrow = xplane + (oy * s2 + ky * d2) * wp + kx * d2;
                                    const double* grow = gplane + oy * wo;
                                    if (s2 == 1) {
                                        double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                                        int ox = 0;
                                        for (; ox + 4 <= wo; ox += 4) {
                                            a0 += grow[ox] * xrow[ox];
                                            a1 += grow[ox + 1] * xrow[ox + 1];
                                            a2 += grow[ox + 2] * xrow[ox + 2];
                                            a3 += grow[ox + 3] * xrow[ox + 3];
                                        }
                                        for (; ox < wo; ++ox) a0 += grow[ox] * xrow[ox];
                                        acc += (a0 + a1) + (a2 + a3);
                                    } else {
                                        for (int ox = 0; ox < wo; ++ox) acc += grow[ox] * xrow[ox * s2];
                                    }
                                }
                                gwbase[ky * k + kx] += acc;
                            }
                    }
                }
            }
            if (need_gx) {
                ensure_grad(*xn);
                auto& gxp = detail::conv_scratch2();
                gxp.assign(static_cast<std::size_t>(cin) * hp * wp, 0.0);
                const double* wv2 = wn->v.data();
                for (int oc = 0; oc < cout; ++oc) {
                    const double* gplane = g + static_cast<std::size_t>(oc) * ho * wo;
                    for (int ic = 0; ic < cin; ++ic) {
                        double* gxplane = gxp.data() + static_cast<std::size_t>(ic) * hp * wp;
                        const double* wbase = wv2 + (static_cast<std::size_t>(oc) * cin + ic) * k * k;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const double wval = wbase[ky * k + kx];
                                if (wval == 0.0) continue;
                                for (int oy = 0; oy < ho; ++oy) {
                                    double* gxrow = gxplane + (oy * s2 + ky * d2) * wp + kx * d2;
                                    const double* grow = gplane + oy * wo;
                                    if (s2 == 1) {
                                        for (int ox = 0; ox < wo; ++ox) gxrow[ox] += wval * grow[ox];
                                    } else {
                                        for (int ox = 0; ox < wo; ++ox) gxrow[ox * s2] += wval * grow[ox];
                                    }
                                }
                            }
                    }
                }
                double* gx = xn->g.data();
                for (int c = 0; c < cin; ++c)
                    for (int y = 0; y < h; ++y) {
                        const double* src = gxp.data() + (static_cast<std::size_t>(c) * hp + y + p2) * wp + p2;
                        double* dst = gx + (static_cast<std::size_t>(c) * h + y) * wd;
                        for (int xcol = 0; xcol < wd; ++xcol) dst[xcol] += src[xcol];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// activations

inline Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->g.size(); ++i)
                if (xn->v[i] > 0.0) xn->g[i] += on->g[i];
        });
    }
    return out;
}

inline double softplus_val(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline Tensor softplus(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = softplus_val(x.data()[i]);
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->g.size(); ++i) {
                const double sig = 1.0 / (1.0 + std::exp(-xn->v[i]));
                xn->g[i] += sig * on->g[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax along an axis, max-subtracted for stability

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= std::max<std::size_t>(x.rank(), 1))
        throw ShapeMismatch("softmax: axis " + std::to_string(axis) + " out of range for " +
                            shape_str(x.shape()));
    const Shape& s = x.shape();
    const std::size_t n = s.empty() ? 1 : s[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    Tensor out(x.shape());
    const double* xv = x.data();
    double* ov = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = -1e300;
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            double denom = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                ov[base + j * inner] = e;
                denom += e;
            }
            for (std::size_t j = 0; j < n; ++j) ov[base + j * inner] /= denom;
        }

    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [outer, inner, n, xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            const double* y = on->v.data();
            const double* g = on->g.data();
            double* gx = xn->g.data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j)
                        gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2

inline Tensor maxpool2(const Tensor& x) {
    if (x.rank() != 3) throw ShapeMismatch("maxpool2: expected rank 3, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 || w % 2)
        throw IndivisibleShape("maxpool2: spatial dims must be even, got " + shape_str(x.shape()));
    const std::size_t ho = h / 2, wo = w / 2;
    Tensor out(Shape{c, ho, wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const double* xv = x.data();
    double* ov = out.data();
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::size_t i0 = (ci * h + 2 * oy) * w + 2 * ox;
                std::size_t best = i0;
                double bv = xv[i0];
                const std::size_t cand[3] = {i0 + 1, i0 + w, i0 + w + 1};
                for (std::size_t t : cand)
                    if (xv[t] > bv) { bv = xv[t]; best = t; }
                const std::size_t oi = (ci * ho + oy) * wo + ox;
                ov[oi] = bv;
                (*argmax)[oi] = best;
            }
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [xn, on, argmax]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->g.size(); ++i) xn->g[(*argmax)[i]] += on->g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape plumbing

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw ShapeMismatch("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), x.values());
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->g.size(); ++i) xn->g[i] += on->g[i];
        });
    }
    return out;
}

inline Tensor transpose2(const Tensor& x) {
    if (x.rank() != 2) throw ShapeMismatch("transpose2: expected rank 2, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = x.data()[i * n + j];
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [m, n, xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xn->g[i * n + j] += on->g[j * m + i];
        });
    }
    return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw ShapeMismatch("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t ca = a.dim(0), cb = b.dim(0), hw = a.dim(1) * a.dim(2);
    Tensor out(Shape{ca + cb, a.dim(1), a.dim(2)});
    std::copy(a.data(), a.data() + ca * hw, out.data());
    std::copy(b.data(), b.data() + cb * hw, out.data() + ca * hw);
    if (detail::want_grad({&a, &b})) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::mark_out(out, [ca, cb, hw, an, bn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*an);
            ensure_grad(*bn);
            for (std::size_t i = 0; i < ca * hw; ++i) an->g[i] += on->g[i];
            for (std::size_t i = 0; i < cb * hw; ++i) bn->g[i] += on->g[ca * hw + i];
        });
    }
    return out;
}

inline Tensor slice_channels(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 3 || c1 > x.dim(0) || c0 >= c1)
        throw ShapeMismatch("slice_channels: [" + std::to_string(c0) + "," + std::to_string(c1) +
                            ") of " + shape_str(x.shape()));
    const std::size_t hw = x.dim(1) * x.dim(2);
    Tensor out(Shape{c1 - c0, x.dim(1), x.dim(2)});
    std::copy(x.data() + c0 * hw, x.data() + c1 * hw, out.data());
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [c0, hw, xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->g.size(); ++i) xn->g[c0 * hw + i] += on->g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    Tensor out = Tensor::scalar(acc);
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            const double g = on->g[0];
            for (std::size_t i = 0; i < xn->g.size(); ++i) xn->g[i] += g;
        });
    }
    return out;
}

// (C,h,w) -> (1,C): per-channel spatial sum
inline Tensor sum_spatial(const Tensor& x) {
    if (x.rank() != 3) throw ShapeMismatch("sum_spatial: expected rank 3, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out(Shape{1, c});
    for (std::size_t ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        const double* p = x.data() + ci * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        out.data()[ci] = acc;
    }
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [c, hw, xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t ci = 0; ci < c; ++ci) {
                const double g = on->g[ci];
                double* p = xn->g.data() + ci * hw;
                for (std::size_t i = 0; i < hw; ++i) p[i] += g;
            }
        });
    }
    return out;
}

// (C,h,w) -> (h*w, C): one row per spatial cell
inline Tensor spatial_rows(const Tensor& x) {
    if (x.rank() != 3) throw ShapeMismatch("spatial_rows: expected rank 3, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out(Shape{hw, c});
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < hw; ++i) out.data()[i * c + ci] = x.data()[ci * hw + i];
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [c, hw, xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t i = 0; i < hw; ++i) xn->g[ci * hw + i] += on->g[i * c + ci];
        });
    }
    return out;
}

// (h*w, C) -> (C,h,w): inverse of spatial_rows
inline Tensor rows_to_spatial(const Tensor& rows, std::size_t h, std::size_t w) {
    if (rows.rank() != 2 || rows.dim(0) != h * w)
        throw ShapeMismatch("rows_to_spatial: " + shape_str(rows.shape()) + " vs " +
                            std::to_string(h) + "x" + std::to_string(w));
    const std::size_t c = rows.dim(1), hw = h * w;
    Tensor out(Shape{c, h, w});
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t ci = 0; ci < c; ++ci) out.data()[ci * hw + i] = rows.data()[i * c + ci];
    if (detail::want_grad({&rows})) {
        auto rn = rows.node(), on = out.node();
        detail::mark_out(out, [c, hw, rn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*rn);
            for (std::size_t i = 0; i < hw; ++i)
                for (std::size_t ci = 0; ci < c; ++ci) rn->g[i * c + ci] += on->g[ci * hw + i];
        });
    }
    return out;
}

// (1,C) -> (n,C)
inline Tensor tile_rows(const Tensor& x, std::size_t n) {
    if (x.rank() != 2 || x.dim(0) != 1)
        throw ShapeMismatch("tile_rows: expected (1,C), got " + shape_str(x.shape()));
    const std::size_t c = x.dim(1);
    Tensor out(Shape{n, c});
    for (std::size_t i = 0; i < n; ++i) std::copy(x.data(), x.data() + c, out.data() + i * c);
    if (detail::want_grad({&x})) {
        auto xn = x.node(), on = out.node();
        detail::mark_out(out, [n, c, xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) xn->g[j] += on->g[i * c + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// cosine similarity of constant unit prototypes against feature columns.
// protos: (V,C) treated as constants (no gradient); x: (C,h,w).
// Columns with norm below the guard yield 0 similarity and 0 gradient.

inline Tensor cosine_map(const Tensor& protos, const Tensor& x, double norm_guard = 1e-12) {
    if (protos.rank() != 2 || x.rank() != 3 || protos.dim(1) != x.dim(0))
        throw ShapeMismatch("cosine_map: " + shape_str(protos.shape()) + " vs " + shape_str(x.shape()));
    const std::size_t v = protos.dim(0), c = protos.dim(1), hw = x.dim(1) * x.dim(2);
    Tensor out(Shape{v, x.dim(1), x.dim(2)});
    const double* pv = protos.data();
    const double* xv = x.data();
    for (std::size_t i = 0; i < hw; ++i) {
        double nrm2 = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double u = xv[ci * hw + i];
            nrm2 += u * u;
        }
        const double nrm = std::sqrt(nrm2);
        for (std::size_t vi = 0; vi < v; ++vi) {
            double dot = 0.0;
            const double* prow = pv + vi * c;
            for (std::size_t ci = 0; ci < c; ++ci) dot += prow[ci] * xv[ci * hw + i];
            double pn = 0.0;
            for (std::size_t ci = 0; ci < c; ++ci) pn += prow[ci] * prow[ci];
            pn = std::sqrt(pn);
            const double denom = nrm * pn;
            out.data()[vi * hw + i] = denom < norm_guard ? 0.0 : dot / denom;
        }
    }
    if (detail::want_grad({&x})) {
        auto pn_ = protos.node(), xn = x.node(), on = out.node();
        detail::mark_out(out, [v, c, hw, norm_guard, pn_, xn, on]() {
            if (on->g.empty()) return;
            ensure_grad(*xn);
            const double* pv2 = pn_->v.data();
            const double* xv2 = xn->v.data();
            const double* g = on->g.data();
            for (std::size_t i = 0; i < hw; ++i) {
                double nrm2 = 0.0;
                for (std::size_t ci = 0; ci < c; ++ci) {
                    const double u = xv2[ci * hw + i];
                    nrm2 += u * u;
                }
                const double nrm = std::sqrt(nrm2);
                for (std::size_t vi = 0; vi < v; ++vi) {
                    const double* prow = pv2 + vi * c;
                    double pnorm2 = 0.0, dot = 0.0;
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        pnorm2 += prow[ci] * prow[ci];
                        dot += prow[ci] * xv2[ci * hw + i];
                    }
                    const double pnorm = std::sqrt(pnorm2);
                    const double denom = nrm * pnorm;
                    if (denom < norm_guard) continue;
                    const double gv = g[vi * hw + i];
                    if (gv == 0.0) continue;
                    // d/du (p.u / (|p||u|)) = p/(|p||u|) - (p.u) u / (|p||u|^3)
                    const double inv = 1.0 / denom;
                    const double coef = dot / (denom * nrm2);
                    for (std::size_t ci = 0; ci < c; ++ci)
                        xn->g[ci * hw + i] += gv * (prow[ci] * inv - coef * xv2[ci * hw + i]);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// finite checks; NaN/Inf anywhere is an error state

inline void check_finite(const Tensor& t, const std::string& what) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t.data()[i]))
            throw Error(what + ": non-finite value at index " + std::to_string(i));
}

} // namespace crowd
