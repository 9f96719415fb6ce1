#pragma once

// Deterministic 2D Gaussian splat rasterizer with an exact analytic adjoint.
// Splats are composited front-to-back in (depth, index) order per pixel:
//   alpha_j = min(opacity_j * G_j(p), 0.99),  skipped where opacity_j*G_j < 1/255
//   C(p)    = sum_j color_j * alpha_j * T_j + background * T_end,
//   T_j     = prod_{k<j} (1 - alpha_k).
// All arithmetic is double precision; pixel evaluation happens at (x+0.5, y+0.5).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "lapis/core.hpp"
#include "lapis/image.hpp"

namespace lapis {

inline constexpr double kAlphaClamp = 0.99;
inline constexpr double kMinAlpha = 1.0 / 255.0;

struct RenderOptions {
    std::array<float, 3> background{0.f, 0.f, 0.f};
    int threads = 0;  // 0: LAPIS_THREADS env var, else hardware concurrency
};

struct SplatGrad {
    std::array<double, 2> position{0.0, 0.0};
    std::array<double, 2> scale{0.0, 0.0};
    double rotation = 0.0;
    std::array<double, 3> color{0.0, 0.0, 0.0};
    double opacity = 0.0;
};
using SplatGrads = std::vector<SplatGrad>;

namespace detail {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("LAPIS_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp(hw, 1u, 16u));
}

// Runs fn(chunk) for chunk in [0, count) across up to `threads` workers with
// a static stride schedule. Chunk identity, not thread count, determines all
// downstream reduction order.
template <class Fn>
void parallel_chunks(int count, int threads, Fn&& fn) {
    threads = std::min(threads, count);
    if (threads <= 1) {
        for (int c = 0; c < count; ++c) fn(c);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            for (int c = t; c < count; c += threads) fn(c);
        });
    for (auto& th : pool) th.join();
}

struct Prepared {
    double cx, cy;
    double ia, ib, id;      // inverse covariance entries
    double cos_t, sin_t;
    double sx, sy;          // scale stddevs
    double sigma;           // opacity
    std::array<double, 3> color;
    int x0, x1, y0, y1;     // inclusive pixel bbox, empty if x0 > x1
    std::size_t src;        // index into caller's splat list
};

inline void check_splat(const Splat2D& s, std::size_t idx) {
    auto bad = [&](const char* what) {
        throw std::invalid_argument("render: splat " + std::to_string(idx) + " " + what);
    };
    if (!(s.scale[0] > 0.f) || !(s.scale[1] > 0.f)) bad("has non-positive scale");
    if (!std::isfinite(s.scale[0]) || !std::isfinite(s.scale[1]) ||
        !std::isfinite(s.position[0]) || !std::isfinite(s.position[1]) ||
        !std::isfinite(s.rotation) || !std::isfinite(s.opacity))
        bad("has non-finite parameters");
}

inline std::vector<Prepared> prepare_splats(std::span<const Splat2D> splats, int width,
                                            int height) {
    std::vector<std::size_t> order(splats.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return splats[a].depth < splats[b].depth;
    });

    std::vector<Prepared> out;
    out.reserve(splats.size());
    for (std::size_t oi : order) {
        const Splat2D& s = splats[oi];
        check_splat(s, oi);
        double sigma = s.opacity;
        if (!(sigma * 1.0 >= kMinAlpha)) continue;  // cannot pass the alpha cut anywhere
        double q_cut = 2.0 * std::log(255.0 * sigma);
        if (!(q_cut > 0.0)) continue;

        Prepared p;
        p.cx = s.position[0];
        p.cy = s.position[1];
        p.cos_t = std::cos(static_cast<double>(s.rotation));
        p.sin_t = std::sin(static_cast<double>(s.rotation));
        p.sx = s.scale[0];
        p.sy = s.scale[1];
        double isx = 1.0 / (p.sx * p.sx), isy = 1.0 / (p.sy * p.sy);
        p.ia = p.cos_t * p.cos_t * isx + p.sin_t * p.sin_t * isy;
        p.ib = p.cos_t * p.sin_t * (isx - isy);
        p.id = p.sin_t * p.sin_t * isx + p.cos_t * p.cos_t * isy;
        p.sigma = sigma;
        p.color = {s.color[0], s.color[1], s.color[2]};
        p.src = oi;

        // Conservative bbox of the q <= q_cut ellipse; the exact alpha test
        // still runs per pixel.
        double sxx = p.cos_t * p.cos_t * p.sx * p.sx + p.sin_t * p.sin_t * p.sy * p.sy;
        double syy = p.sin_t * p.sin_t * p.sx * p.sx + p.cos_t * p.cos_t * p.sy * p.sy;
        double ex = std::sqrt(q_cut * sxx) + 1e-9;
        double ey = std::sqrt(q_cut * syy) + 1e-9;
        p.x0 = std::max(0, static_cast<int>(std::ceil(p.cx - ex - 0.5)));
        p.x1 = std::min(width - 1, static_cast<int>(std::floor(p.cx + ex - 0.5)));
        p.y0 = std::max(0, static_cast<int>(std::ceil(p.cy - ey - 0.5)));
        p.y1 = std::min(height - 1, static_cast<int>(std::floor(p.cy + ey - 0.5)));
        if (p.x0 > p.x1 || p.y0 > p.y1) continue;
        out.push_back(p);
    }
    return out;
}

inline constexpr int kRowChunk = 16;

}  // namespace detail

// G(p) = exp(-0.5 * d^T Sigma^-1 d), d = p - center. 1 exactly at the center.
inline double gaussian_weight(const Splat2D& s, double px, double py) {
    if (!(s.scale[0] > 0.f) || !(s.scale[1] > 0.f) || !std::isfinite(s.scale[0]) ||
        !std::isfinite(s.scale[1]) || !std::isfinite(s.rotation))
        throw std::invalid_argument("gaussian_weight: covariance not positive-definite");
    double c = std::cos(static_cast<double>(s.rotation)), n = std::sin(static_cast<double>(s.rotation));
    double isx = 1.0 / (double(s.scale[0]) * s.scale[0]);
    double isy = 1.0 / (double(s.scale[1]) * s.scale[1]);
    double ia = c * c * isx + n * n * isy;
    double ib = c * n * (isx - isy);
    double id = n * n * isx + c * c * isy;
    double dx = px - s.position[0], dy = py - s.position[1];
    double q = ia * dx * dx + 2.0 * ib * dx * dy + id * dy * dy;
    return std::exp(-0.5 * q);
}

template <class T>
BasicImage<T> render_as(std::span<const Splat2D> splats, int width, int height,
                        const RenderOptions& opts = {}) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("render: zero-dimension image");
    const auto prepared = detail::prepare_splats(splats, width, height);
    BasicImage<T> img(width, height);
    const double bg[3] = {opts.background[0], opts.background[1], opts.background[2]};

    int chunks = (height + detail::kRowChunk - 1) / detail::kRowChunk;
    detail::parallel_chunks(chunks, detail::resolve_threads(opts.threads), [&](int chunk) {
        int ybeg = chunk * detail::kRowChunk;
        int yend = std::min(height, ybeg + detail::kRowChunk);
        std::vector<const detail::Prepared*> row;
        row.reserve(prepared.size());
        for (int y = ybeg; y < yend; ++y) {
            row.clear();
            for (const auto& p : prepared)
                if (y >= p.y0 && y <= p.y1) row.push_back(&p);
            double py = y + 0.5;
            for (int x = 0; x < width; ++x) {
                double px = x + 0.5;
                double r = 0, g = 0, b = 0, trans = 1.0;
                for (const auto* p : row) {
                    if (x < p->x0 || x > p->x1) continue;
                    double dx = px - p->cx, dy = py - p->cy;
                    double q = p->ia * dx * dx + 2.0 * p->ib * dx * dy + p->id * dy * dy;
                    double alpha = p->sigma * std::exp(-0.5 * q);
                    if (alpha < kMinAlpha) continue;
                    if (alpha > kAlphaClamp) alpha = kAlphaClamp;
                    double w = alpha * trans;
                    r += p->color[0] * w;
                    g += p->color[1] * w;
                    b += p->color[2] * w;
                    trans *= 1.0 - alpha;
                }
                img.at(x, y, 0) = static_cast<T>(r + bg[0] * trans);
                img.at(x, y, 1) = static_cast<T>(g + bg[1] * trans);
                img.at(x, y, 2) = static_cast<T>(b + bg[2] * trans);
            }
        }
    });
    return img;
}

inline Image render(std::span<const Splat2D> splats, int width, int height,
                    const RenderOptions& opts = {}) {
    return render_as<float>(splats, width, height, opts);
}

inline ImageD render_d(std::span<const Splat2D> splats, int width, int height,
                       const RenderOptions& opts = {}) {
    return render_as<double>(splats, width, height, opts);
}

// Exact partials of L = sum_p <loss_grad(p), C(p)> w.r.t. every splat
// parameter. The alpha clamp and the 1/255 cut are zero-gradient regions.
inline SplatGrads render_backward(std::span<const Splat2D> splats, int width, int height,
                                  const ImageD& loss_grad, const RenderOptions& opts = {}) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("render_backward: zero dims");
    if (loss_grad.width != width || loss_grad.height != height)
        throw std::invalid_argument("render_backward: loss gradient dimension mismatch");
    const auto prepared = detail::prepare_splats(splats, width, height);
    const double bg[3] = {opts.background[0], opts.background[1], opts.background[2]};

    int chunks = (height + detail::kRowChunk - 1) / detail::kRowChunk;
    // One accumulator per row chunk, indexed by prepared order; reduced in
    // chunk order afterwards so results do not depend on thread count.
    std::vector<SplatGrads> partial(chunks);

    detail::parallel_chunks(chunks, detail::resolve_threads(opts.threads), [&](int chunk) {
        SplatGrads& acc = partial[chunk];
        acc.assign(prepared.size(), SplatGrad{});
        int ybeg = chunk * detail::kRowChunk;
        int yend = std::min(height, ybeg + detail::kRowChunk);

        struct Hit {
            std::size_t pi;   // prepared index
            double w;         // gaussian value
            double alpha;     // after clamp
            double trans;     // transmittance before this splat
            bool clamped;
        };
        std::vector<Hit> hits;
        std::vector<const detail::Prepared*> row;
        std::vector<std::size_t> rowidx;
        row.reserve(prepared.size());
        rowidx.reserve(prepared.size());

        for (int y = ybeg; y < yend; ++y) {
            row.clear();
            rowidx.clear();
            for (std::size_t i = 0; i < prepared.size(); ++i)
                if (y >= prepared[i].y0 && y <= prepared[i].y1) {
                    row.push_back(&prepared[i]);
                    rowidx.push_back(i);
                }
            double py = y + 0.5;
            for (int x = 0; x < width; ++x) {
                double px = x + 0.5;
                hits.clear();
                double trans = 1.0;
                for (std::size_t k = 0; k < row.size(); ++k) {
                    const auto* p = row[k];
                    if (x < p->x0 || x > p->x1) continue;
                    double dx = px - p->cx, dy = py - p->cy;
                    double q = p->ia * dx * dx + 2.0 * p->ib * dx * dy + p->id * dy * dy;
                    double w = std::exp(-0.5 * q);
                    double raw = p->sigma * w;
                    if (raw < kMinAlpha) continue;
                    bool clamped = raw > kAlphaClamp;
                    double alpha = clamped ? kAlphaClamp : raw;
                    hits.push_back({rowidx[k], w, alpha, trans, clamped});
                    trans *= 1.0 - alpha;
                }
                if (hits.empty()) continue;

                const double gc[3] = {loss_grad.at(x, y, 0), loss_grad.at(x, y, 1),
                                      loss_grad.at(x, y, 2)};
                // Suffix color sum S_j = sum_{k>j} c_k a_k T_k + bg * T_end.
                double S[3] = {bg[0] * trans, bg[1] * trans, bg[2] * trans};
                for (std::size_t h = hits.size(); h-- > 0;) {
                    const Hit& hit = hits[h];
                    const detail::Prepared& p = prepared[hit.pi];
                    SplatGrad& g = acc[hit.pi];
                    double at = hit.alpha * hit.trans;
                    g.color[0] += gc[0] * at;
                    g.color[1] += gc[1] * at;
                    g.color[2] += gc[2] * at;

                    if (!hit.clamped) {
                        double dalpha = 0.0;
                        for (int c = 0; c < 3; ++c)
                            dalpha += gc[c] * (p.color[c] * hit.trans - S[c] / (1.0 - hit.alpha));
                        g.opacity += dalpha * hit.w;
                        // dq through w = exp(-q/2)
                        double dq = dalpha * p.sigma * hit.w * -0.5;
                        double dx = px - p.cx, dy = py - p.cy;
                        double ux = p.ia * dx + p.ib * dy;
                        double uy = p.ib * dx + p.id * dy;
                        g.position[0] += dq * (-2.0 * ux);
                        g.position[1] += dq * (-2.0 * uy);
                        // a = R^T u, b = R'^T u
                        double a0 = p.cos_t * ux + p.sin_t * uy;
                        double a1 = -p.sin_t * ux + p.cos_t * uy;
                        double b0 = -p.sin_t * ux + p.cos_t * uy;
                        double b1 = -p.cos_t * ux - p.sin_t * uy;
                        g.scale[0] += dq * (-2.0 * p.sx * a0 * a0);
                        g.scale[1] += dq * (-2.0 * p.sy * a1 * a1);
                        g.rotation +=
                            dq * (-2.0 * (p.sx * p.sx * a0 * b0 + p.sy * p.sy * a1 * b1));
                    }
                    for (int c = 0; c < 3; ++c) S[c] += p.color[c] * at;
                }
            }
        }
    });

    SplatGrads out(splats.size());
    for (int c = 0; c < chunks; ++c) {
        const SplatGrads& acc = partial[c];
        if (acc.empty()) continue;
        for (std::size_t i = 0; i < prepared.size(); ++i) {
            SplatGrad& dst = out[prepared[i].src];
            const SplatGrad& src = acc[i];
            dst.position[0] += src.position[0];
            dst.position[1] += src.position[1];
            dst.scale[0] += src.scale[0];
            dst.scale[1] += src.scale[1];
            dst.rotation += src.rotation;
            dst.color[0] += src.color[0];
            dst.color[1] += src.color[1];
            dst.color[2] += src.color[2];
            dst.opacity += src.opacity;
        }
    }
    return out;
}

// Maps splats from full-resolution coordinates into the frame of an image
// scaled by `factor` (positions and stddevs scale linearly).
inline std::vector<Splat2D> scale_splats(std::span<const Splat2D> splats, double factor) {
    if (!(factor > 0.0)) throw std::invalid_argument("scale_splats: non-positive factor");
    std::vector<Splat2D> out(splats.begin(), splats.end());
    for (auto& s : out) {
        s.position[0] = static_cast<float>(s.position[0] * factor);
        s.position[1] = static_cast<float>(s.position[1] * factor);
        s.scale[0] = static_cast<float>(s.scale[0] * factor);
        s.scale[1] = static_cast<float>(s.scale[1] * factor);
    }
    return out;
}

}  // namespace lapis
