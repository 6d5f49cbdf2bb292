#include "stssad/augment.hpp"

#include <cmath>

namespace stssad::augment {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kCovEps = 1e-6;  // regularizer added to L L^T

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

Tensor comp(const Tensor& a, int64_t i) { return slice_rows(a, i, i + 1); }

// Channel-tile map: expands a per-pixel vector [P] to [P*c] (identity when c==1).
std::shared_ptr<const std::vector<int64_t>> tile_map(int64_t p, int64_t c) {
    std::vector<int64_t> map(size_t(p * c));
    for (int64_t t = 0; t < p * c; ++t) map[size_t(t)] = t / c;
    return std::make_shared<const std::vector<int64_t>>(std::move(map));
}

Tensor tile_channels(const Tensor& per_pixel, int64_t c) {
    if (c == 1) return per_pixel;
    return gather_cols(per_pixel, tile_map(per_pixel.shape()[per_pixel.rank() - 1], c));
}

}  // namespace

std::string_view kind_name(Kind k) {
    switch (k) {
        case Kind::CutDiff: return "cutdiff";
        case Kind::Rotation: return "rotation";
        case Kind::CutOut: return "cutout";
        case Kind::CutPaste: return "cutpaste";
    }
    return "?";
}

Kind kind_from_name(std::string_view name) {
    if (name == "cutdiff") return Kind::CutDiff;
    if (name == "rotation") return Kind::Rotation;
    if (name == "cutout") return Kind::CutOut;
    if (name == "cutpaste") return Kind::CutPaste;
    fail("unknown augmentation kind: " + std::string(name));
}

int64_t param_count(Kind kind) {
    switch (kind) {
        case Kind::CutDiff: return 3;
        case Kind::Rotation: return 1;
        case Kind::CutOut: return 1;
        case Kind::CutPaste: return 2;
    }
    return 0;
}

AugParams make_params(Kind kind, const std::vector<double>& raw) {
    if (int64_t(raw.size()) != param_count(kind))
        fail("make_params: " + std::string(kind_name(kind)) + " takes " +
             std::to_string(param_count(kind)) + " raw values, got " +
             std::to_string(raw.size()));
    AugParams p;
    p.kind = kind;
    p.a = Tensor::from({param_count(kind)}, raw);
    p.a.set_requires_grad(true);
    switch (kind) {
        case Kind::CutDiff: p.domain = {{1e-5, -1.5, 1e-5}, {1.5, 1.5, 1.5}}; break;
        case Kind::Rotation: p.domain = {{0.0}, {kTwoPi}}; break;
        case Kind::CutOut: p.domain = {{0.01}, {0.49}}; break;
        case Kind::CutPaste: p.domain = {{0.01, 0.25}, {0.49, 4.0}}; break;
    }
    return p;
}

void project(AugParams& params) {
    std::vector<double> v = params.a.data();
    if (params.kind == Kind::Rotation) {
        v[0] = std::fmod(v[0], kTwoPi);
        if (v[0] < 0.0) v[0] += kTwoPi;
    } else {
        for (size_t i = 0; i < v.size(); ++i)
            v[i] = std::min(std::max(v[i], params.domain.lo[i]), params.domain.hi[i]);
    }
    params.a = Tensor::from(params.a.shape(), std::move(v));
    params.a.set_requires_grad(true);
}

Tensor sample_random(Kind kind, RandomStream& rng) {
    switch (kind) {
        case Kind::CutDiff: {
            const double s = rng.log_uniform(5e-3, 0.3);
            const double r = rng.log_uniform(0.25, 4.0);
            return Tensor::from({3}, {s / r, 0.0, s * r});
        }
        case Kind::Rotation: return Tensor::from({1}, {rng.uniform(0.0, kTwoPi)});
        case Kind::CutOut: return Tensor::from({1}, {rng.uniform(0.01, 0.49)});
        case Kind::CutPaste:
            return Tensor::from({2}, {rng.uniform(0.01, 0.49), rng.log_uniform(0.25, 4.0)});
    }
    fail("sample_random: bad kind");
}

std::vector<Tensor> init_grid(Kind kind) {
    std::vector<Tensor> grid;
    switch (kind) {
        case Kind::CutDiff:
            for (double s : {1e-4, 1e-3, 1e-2, 1e-1})
                grid.push_back(Tensor::from({3}, {s, 0.0, s}));  // L = diag(s, s)
            break;
        case Kind::Rotation:
            for (double deg : {45.0, 135.0, 225.0, 315.0})
                grid.push_back(Tensor::from({1}, {deg * kTwoPi / 360.0}));
            break;
        case Kind::CutOut:
            for (double f : {0.02, 0.08, 0.18, 0.32}) grid.push_back(Tensor::from({1}, {f}));
            break;
        case Kind::CutPaste:
            for (double f : {0.02, 0.08, 0.18, 0.32})
                grid.push_back(Tensor::from({2}, {f, 1.0}));
            break;
    }
    return grid;
}

Tensor cutdiff_patch(int64_t m, int64_t n, const Tensor& a,
                     const std::vector<std::array<double, 2>>& mu) {
    if (a.shape() != Shape{3}) fail("cutdiff: parameter vector must have shape [3]");
    if (int64_t(mu.size()) != n)
        fail("cutdiff: need one center per image, got " + std::to_string(mu.size()) +
             " for batch of " + std::to_string(n));

    // Inverse of M = L L^T + eps I via the 2x2 adjugate, all in scalar tensor ops
    // so the patch stays differentiable in a.
    Tensor a0 = comp(a, 0), a1 = comp(a, 1), a2 = comp(a, 2);
    Tensor eps = Tensor::scalar(kCovEps);
    Tensor m00 = add(square(a0), eps);
    Tensor m01 = mul(a0, a1);
    Tensor m11 = add(add(square(a1), square(a2)), eps);
    Tensor det = sub(mul(m00, m11), square(m01));
    Tensor q00 = div(m11, det);
    Tensor q01 = neg(div(m01, det));
    Tensor q11 = div(m00, det);

    // Constant per-batch offsets from the 1-indexed grid ((r+1)/m, (c+1)/m).
    const int64_t p = m * m;
    std::vector<double> d1v(size_t(n * p)), d2v(size_t(n * p));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t r = 0; r < m; ++r)
            for (int64_t col = 0; col < m; ++col) {
                const size_t k = size_t(i * p + r * m + col);
                d1v[k] = double(r + 1) / double(m) - mu[size_t(i)][0];
                d2v[k] = double(col + 1) / double(m) - mu[size_t(i)][1];
            }
    Tensor d1 = Tensor::from({n, p}, std::move(d1v));
    Tensor d2 = Tensor::from({n, p}, std::move(d2v));

    const Shape bs{n, p};
    Tensor quad = add(add(mul(broadcast(q00, bs), square(d1)),
                          mul(broadcast(scale(q01, 2.0), bs), mul(d1, d2))),
                      mul(broadcast(q11, bs), square(d2)));
    return exp(neg(quad));
}

Tensor cutdiff(const Tensor& x, int64_t m, int64_t c, const Tensor& a,
               const std::vector<std::array<double, 2>>& mu) {
    if (x.rank() != 2 || x.shape()[1] != m * m * c)
        fail("cutdiff: batch shape " + shape_str(x.shape()) + " does not match m=" +
             std::to_string(m) + " c=" + std::to_string(c));
    Tensor patch = cutdiff_patch(m, x.shape()[0], a, mu);
    return clamp01(sub(x, tile_channels(patch, c)));
}

Tensor affine_grid(const Tensor& angle, int64_t m) {
    if (angle.size() != 1) fail("affine_grid: angle must be scalar");
    if (m < 1) fail("affine_grid: m must be positive");
    const int64_t p = m * m;
    std::vector<double> gx(static_cast<size_t>(p)), gy(static_cast<size_t>(p));
    for (int64_t r = 0; r < m; ++r)
        for (int64_t col = 0; col < m; ++col) {
            const double y = m > 1 ? 2.0 * double(r) / double(m - 1) - 1.0 : 0.0;
            const double x = m > 1 ? 2.0 * double(col) / double(m - 1) - 1.0 : 0.0;
            gx[size_t(r * m + col)] = x;
            gy[size_t(r * m + col)] = y;
        }
    Tensor gx0 = Tensor::from({p}, std::move(gx));
    Tensor gy0 = Tensor::from({p}, std::move(gy));
    Tensor ca = broadcast(cos(angle), {p});
    Tensor sa = broadcast(sin(angle), {p});
    Tensor xs = add(mul(ca, gx0), mul(sa, gy0));
    Tensor ys = sub(mul(ca, gy0), mul(sa, gx0));
    return concat_rows({reshape(xs, {1, p}), reshape(ys, {1, p})});
}

Tensor bilinear_sample(const Tensor& x, int64_t m, int64_t c, const Tensor& coords) {
    if (x.rank() != 2 || x.shape()[1] != m * m * c)
        fail("bilinear_sample: batch shape " + shape_str(x.shape()) + " does not match m=" +
             std::to_string(m) + " c=" + std::to_string(c));
    if (coords.rank() != 2 || coords.shape()[0] != 2)
        fail("bilinear_sample: coords must be [2,P], got " + shape_str(coords.shape()));
    const int64_t p = coords.shape()[1];
    const double half = m > 1 ? double(m - 1) / 2.0 : 0.0;

    Tensor one = Tensor::full({p}, 1.0);
    Tensor px = scale(add(reshape(slice_rows(coords, 0, 1), {p}), one), half);
    Tensor py = scale(add(reshape(slice_rows(coords, 1, 2), {p}), one), half);

    // Corner indices are constants extracted from the forward values; the
    // fractional offsets keep the differentiable path to the coords.
    std::vector<double> fx0(static_cast<size_t>(p)), fy0(static_cast<size_t>(p));
    for (int64_t k = 0; k < p; ++k) {
        fx0[size_t(k)] = std::floor(px.data()[size_t(k)]);
        fy0[size_t(k)] = std::floor(py.data()[size_t(k)]);
    }
    Tensor fxc = Tensor::from({p}, fx0);
    Tensor fyc = Tensor::from({p}, fy0);
    Tensor fx = sub(px, fxc);
    Tensor fy = sub(py, fyc);

    Tensor wx1 = fx, wx0 = sub(one, fx);
    Tensor wy1 = fy, wy0 = sub(one, fy);

    auto corner_map = [&](int dy, int dx) {
        std::vector<int64_t> map(size_t(p * c));
        for (int64_t k = 0; k < p; ++k) {
            const int64_t ix = int64_t(fx0[size_t(k)]) + dx;
            const int64_t iy = int64_t(fy0[size_t(k)]) + dy;
            const bool in = ix >= 0 && ix < m && iy >= 0 && iy < m;
            for (int64_t ch = 0; ch < c; ++ch)
                map[size_t(k * c + ch)] = in ? (iy * m + ix) * c + ch : -1;
        }
        return std::make_shared<const std::vector<int64_t>>(std::move(map));
    };

    const Shape bs{x.shape()[0], p * c};
    Tensor out;
    const Tensor* wys[2] = {&wy0, &wy1};
    const Tensor* wxs[2] = {&wx0, &wx1};
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            Tensor w = tile_channels(mul(*wys[dy], *wxs[dx]), c);
            Tensor term = mul(broadcast(w, bs), gather_cols(x, corner_map(dy, dx)));
            out = out.defined() ? add(out, term) : term;
        }
    return out;
}

Tensor rotate(const Tensor& x, int64_t m, int64_t c, const Tensor& angle) {
    return bilinear_sample(x, m, c, affine_grid(angle, m));
}

Tensor cutout(const Tensor& x, int64_t m, int64_t c, double size_frac, RandomStream& rng) {
    if (size_frac <= 0.0 || size_frac >= 1.0) fail("cutout: size fraction must be in (0,1)");
    const int64_t n = x.shape()[0];
    const int64_t side = std::max<int64_t>(1, int64_t(std::lround(std::sqrt(size_frac) * double(m))));
    std::vector<double> v = x.data();
    for (int64_t i = 0; i < n; ++i) {
        const int64_t r0 = int64_t(rng.uniform_int(uint64_t(m - side + 1)));
        const int64_t c0 = int64_t(rng.uniform_int(uint64_t(m - side + 1)));
        for (int64_t r = r0; r < r0 + side; ++r)
            for (int64_t col = c0; col < c0 + side; ++col)
                for (int64_t ch = 0; ch < c; ++ch)
                    v[size_t(i * m * m * c + (r * m + col) * c + ch)] = 0.0;
    }
    return Tensor::from(x.shape(), std::move(v));
}

Tensor cutpaste(const Tensor& x, int64_t m, int64_t c, double size_frac, double ratio,
                RandomStream& rng) {
    if (size_frac <= 0.0 || size_frac >= 1.0) fail("cutpaste: size fraction must be in (0,1)");
    if (ratio <= 0.0) fail("cutpaste: ratio must be positive");
    const int64_t n = x.shape()[0];
    const double area = size_frac * double(m * m);
    int64_t h = std::max<int64_t>(1, int64_t(std::lround(std::sqrt(area * ratio))));
    int64_t w = std::max<int64_t>(1, int64_t(std::lround(std::sqrt(area / ratio))));
    h = std::min(h, m);
    w = std::min(w, m);
    std::vector<double> v = x.data();
    for (int64_t i = 0; i < n; ++i) {
        const int64_t sr = int64_t(rng.uniform_int(uint64_t(m - h + 1)));
        const int64_t sc = int64_t(rng.uniform_int(uint64_t(m - w + 1)));
        const int64_t dr = int64_t(rng.uniform_int(uint64_t(m - h + 1)));
        const int64_t dc = int64_t(rng.uniform_int(uint64_t(m - w + 1)));
        // Copy from the original values so overlapping source/target is well defined.
        const auto& src = x.data();
        for (int64_t r = 0; r < h; ++r)
            for (int64_t col = 0; col < w; ++col)
                for (int64_t ch = 0; ch < c; ++ch)
                    v[size_t(i * m * m * c + ((dr + r) * m + dc + col) * c + ch)] =
                        src[size_t(i * m * m * c + ((sr + r) * m + sc + col) * c + ch)];
    }
    return Tensor::from(x.shape(), std::move(v));
}

std::array<double, 4> compose_L(double g, double s, double r) {
    const double c = std::cos(g), q = std::sin(g);
    return {c * s / r, -q * s * r, q * s / r, c * s * r};
}

GSR decompose_L(const std::array<double, 4>& L) {
    const double det = L[0] * L[3] - L[1] * L[2];
    if (std::fabs(det) < 1e-300) fail("decompose_L: singular matrix");
    const double n1 = std::hypot(L[0], L[2]);  // first column = (s/r)(cos g, sin g)
    const double n2 = std::hypot(L[1], L[3]);  // second column = (s r)(-sin g, cos g)
    const double dot = L[0] * L[1] + L[2] * L[3];
    GSR out;
    if (std::fabs(dot) <= 1e-9 * n1 * n2) {
        out.g = std::atan2(L[2], L[0]);
        out.s = std::sqrt(n1 * n2);
        out.r = std::sqrt(n2 / n1);
        // Column convention check: second column should be (-sin g, cos g) scaled
        // positively; if it points the other way, fold the sign into the angle.
        if (-std::sin(out.g) * L[1] + std::cos(out.g) * L[3] < 0.0) {
            out.g = std::atan2(-L[2], -L[0]);
        }
        return out;
    }
    // Sheared L: report the axes of the ellipse x^T (L L^T)^(-1) x = 1 instead.
    const double m00 = L[0] * L[0] + L[1] * L[1];
    const double m01 = L[0] * L[2] + L[1] * L[3];
    const double m11 = L[2] * L[2] + L[3] * L[3];
    const double tr = m00 + m11;
    const double gap = std::sqrt(std::max(0.0, (m00 - m11) * (m00 - m11) + 4.0 * m01 * m01));
    const double l1 = 0.5 * (tr - gap);
    const double l2 = 0.5 * (tr + gap);
    // The half-angle formula points along the larger axis (eigenvalue l2), so the
    // aspect must satisfy s^2/r^2 = l2 for compose_L to rebuild the same ellipse.
    out.g = 0.5 * std::atan2(2.0 * m01, m00 - m11);
    out.s = std::sqrt(std::fabs(det));
    out.r = std::pow(std::max(l1, 1e-300) / std::max(l2, 1e-300), 0.25);
    return out;
}

std::array<double, 4> cutdiff_L(const Tensor& a) {
    if (a.shape() != Shape{3}) fail("cutdiff_L: parameter vector must have shape [3]");
    return {a.data()[0], 0.0, a.data()[1], a.data()[2]};
}

Tensor apply(const AugParams& params, const Tensor& x, int64_t m, int64_t c,
             RandomStream& rng) {
    switch (params.kind) {
        case Kind::CutDiff: {
            std::vector<std::array<double, 2>> mu(size_t(x.shape()[0]));
            for (auto& u : mu) {
                u[0] = rng.uniform();
                u[1] = rng.uniform();
            }
            return cutdiff(x, m, c, params.a, mu);
        }
        case Kind::Rotation:
            return rotate(x, m, c, params.a);
        case Kind::CutOut:
            return cutout(x, m, c, params.a.data()[0], rng);
        case Kind::CutPaste:
            return cutpaste(x, m, c, params.a.data()[0], params.a.data()[1], rng);
    }
    fail("apply: bad augmentation kind");
}

}  // namespace stssad::augment
