#pragma once

// Ground-truth pyramid construction and the training loss:
//   total_loss = lambda * L1 + (1 - lambda) * (1 - SSIM) / 2
// SSIM uses an 11x11 Gaussian window (stddev 1.5), C1 = 0.01^2, C2 = 0.03^2,
// evaluated on fully interior windows and averaged over channels.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "lapis/image.hpp"

namespace lapis {

struct ImagePyramid {
    std::vector<Image> levels;        // coarse to fine, last = full image
    std::vector<float> resolutions;   // matching scale fractions, last = 1
};

namespace detail {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline const std::array<double, kSsimWindow>& ssim_kernel() {
    static const std::array<double, kSsimWindow> k = [] {
        std::array<double, kSsimWindow> v{};
        double sum = 0;
        for (int i = 0; i < kSsimWindow; ++i) {
            double d = i - (kSsimWindow - 1) / 2.0;
            v[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += v[i];
        }
        for (auto& x : v) x /= sum;
        return v;
    }();
    return k;
}

// Separable valid correlation of a WxH plane: output (W-10)x(H-10).
inline std::vector<double> conv_valid(const std::vector<double>& plane, int w, int h) {
    const auto& k = ssim_kernel();
    int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
    std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < kSsimWindow; ++i) s += k[i] * plane[y * w + x + i];
            tmp[y * ow + x] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(ow) * oh);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < kSsimWindow; ++i) s += k[i] * tmp[(y + i) * ow + x];
            out[y * ow + x] = s;
        }
    return out;
}

// Adjoint of conv_valid: scatters a (W-10)x(H-10) map back onto WxH pixels.
inline std::vector<double> conv_scatter(const std::vector<double>& pos, int w, int h) {
    const auto& k = ssim_kernel();
    int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
    std::vector<double> tmp(static_cast<std::size_t>(ow) * h, 0.0);
    for (int py = 0; py < oh; ++py)
        for (int x = 0; x < ow; ++x) {
            double v = pos[py * ow + x];
            if (v == 0.0) continue;
            for (int i = 0; i < kSsimWindow; ++i) tmp[(py + i) * ow + x] += k[i] * v;
        }
    std::vector<double> out(static_cast<std::size_t>(w) * h, 0.0);
    for (int y = 0; y < h; ++y)
        for (int px = 0; px < ow; ++px) {
            double v = tmp[y * ow + px];
            if (v == 0.0) continue;
            for (int i = 0; i < kSsimWindow; ++i) out[y * w + px + i] += k[i] * v;
        }
    return out;
}

template <class T>
std::vector<double> channel_plane(const BasicImage<T>& img, int c) {
    std::vector<double> out(static_cast<std::size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out[static_cast<std::size_t>(y) * img.width + x] = img.at(x, y, c);
    return out;
}

template <class A, class B>
void require_same_dims(const BasicImage<A>& a, const BasicImage<B>& b, const char* op) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument(std::string(op) + ": image dimension mismatch");
}

}  // namespace detail

// Mean absolute difference over all channels.
template <class A, class B>
double l1(const BasicImage<A>& a, const BasicImage<B>& b) {
    detail::require_same_dims(a, b, "l1");
    double sum = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i)
        sum += std::abs(static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]));
    return sum / static_cast<double>(a.pixels.size());
}

template <class A, class B>
double ssim(const BasicImage<A>& a, const BasicImage<B>& b) {
    detail::require_same_dims(a, b, "ssim");
    if (a.width < detail::kSsimWindow || a.height < detail::kSsimWindow)
        throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    int w = a.width, h = a.height;
    int ow = w - detail::kSsimWindow + 1, oh = h - detail::kSsimWindow + 1;
    double total = 0;
    for (int c = 0; c < 3; ++c) {
        auto x = detail::channel_plane(a, c);
        auto y = detail::channel_plane(b, c);
        std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        auto mx = detail::conv_valid(x, w, h);
        auto my = detail::conv_valid(y, w, h);
        auto mxx = detail::conv_valid(xx, w, h);
        auto myy = detail::conv_valid(yy, w, h);
        auto mxy = detail::conv_valid(xy, w, h);
        double acc = 0;
        for (std::size_t p = 0; p < mx.size(); ++p) {
            double vx = mxx[p] - mx[p] * mx[p];
            double vy = myy[p] - my[p] * my[p];
            double cv = mxy[p] - mx[p] * my[p];
            double a1 = 2.0 * mx[p] * my[p] + detail::kSsimC1;
            double b1 = mx[p] * mx[p] + my[p] * my[p] + detail::kSsimC1;
            double a2 = 2.0 * cv + detail::kSsimC2;
            double b2 = vx + vy + detail::kSsimC2;
            acc += (a1 * a2) / (b1 * b2);
        }
        total += acc / (static_cast<double>(ow) * oh);
    }
    return total / 3.0;
}

template <class A, class B>
double total_loss(const BasicImage<A>& render, const BasicImage<B>& truth, double lambda) {
    detail::require_same_dims(render, truth, "total_loss");
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("total_loss: lambda out of [0,1]");
    double dssim = (1.0 - ssim(render, truth)) / 2.0;
    return lambda * l1(render, truth) + (1.0 - lambda) * dssim;
}

// Exact gradient of total_loss with respect to the rendered pixels.
template <class A, class B>
ImageD total_loss_backward(const BasicImage<A>& render, const BasicImage<B>& truth,
                           double lambda) {
    detail::require_same_dims(render, truth, "total_loss_backward");
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("total_loss_backward: lambda out of [0,1]");
    if (render.width < detail::kSsimWindow || render.height < detail::kSsimWindow)
        throw std::invalid_argument("total_loss_backward: image smaller than the 11x11 window");
    int w = render.width, h = render.height;
    int ow = w - detail::kSsimWindow + 1, oh = h - detail::kSsimWindow + 1;
    const double n_values = static_cast<double>(render.pixels.size());
    const double pos_count = static_cast<double>(ow) * oh;
    // d(D-SSIM)/d(ssim_p) = -1 / (2 * 3 * P)
    const double dssim_scale = -(1.0 - lambda) / (2.0 * 3.0 * pos_count);

    ImageD grad(w, h);
    for (std::size_t i = 0; i < grad.pixels.size(); ++i) {
        double d = static_cast<double>(render.pixels[i]) - static_cast<double>(truth.pixels[i]);
        grad.pixels[i] = lambda * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n_values;
    }

    for (int c = 0; c < 3; ++c) {
        auto x = detail::channel_plane(render, c);
        auto y = detail::channel_plane(truth, c);
        std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        auto mx = detail::conv_valid(x, w, h);
        auto my = detail::conv_valid(y, w, h);
        auto mxx = detail::conv_valid(xx, w, h);
        auto myy = detail::conv_valid(yy, w, h);
        auto mxy = detail::conv_valid(xy, w, h);

        // Per-position coefficients: dssim_p/dx_i = w_i (c0 + cy*y_i + cx*x_i).
        std::vector<double> c0(mx.size()), cxm(mx.size()), cym(mx.size());
        for (std::size_t p = 0; p < mx.size(); ++p) {
            double vx = mxx[p] - mx[p] * mx[p];
            double vy = myy[p] - my[p] * my[p];
            double cv = mxy[p] - mx[p] * my[p];
            double a1 = 2.0 * mx[p] * my[p] + detail::kSsimC1;
            double b1 = mx[p] * mx[p] + my[p] * my[p] + detail::kSsimC1;
            double a2 = 2.0 * cv + detail::kSsimC2;
            double b2 = vx + vy + detail::kSsimC2;
            double inv = 1.0 / (b1 * b2);
            double s = a1 * a2 * inv;
            double dA1 = a2 * inv;
            double dA2 = a1 * inv;
            double dB1 = -s / b1;
            double dB2 = -s / b2;
            cym[p] = 2.0 * dA2;
            cxm[p] = 2.0 * dB2;
            c0[p] = 2.0 * my[p] * dA1 + 2.0 * mx[p] * dB1 - 2.0 * my[p] * dA2 -
                    2.0 * mx[p] * dB2;
        }
        auto s0 = detail::conv_scatter(c0, w, h);
        auto sx = detail::conv_scatter(cxm, w, h);
        auto sy = detail::conv_scatter(cym, w, h);
        for (int yy2 = 0; yy2 < h; ++yy2)
            for (int xx2 = 0; xx2 < w; ++xx2) {
                std::size_t i = static_cast<std::size_t>(yy2) * w + xx2;
                grad.at(xx2, yy2, c) +=
                    dssim_scale * (s0[i] + y[i] * sy[i] + x[i] * sx[i]);
            }
    }
    return grad;
}

struct LossAndGrad {
    double loss = 0;
    ImageD grad;
};

// total_loss and its pixel gradient in one pass (shares the SSIM windows).
template <class A, class B>
LossAndGrad total_loss_with_grad(const BasicImage<A>& render, const BasicImage<B>& truth,
                                 double lambda) {
    detail::require_same_dims(render, truth, "total_loss_with_grad");
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("total_loss_with_grad: lambda out of [0,1]");
    if (render.width < detail::kSsimWindow || render.height < detail::kSsimWindow)
        throw std::invalid_argument("total_loss_with_grad: image smaller than the 11x11 window");
    int w = render.width, h = render.height;
    int ow = w - detail::kSsimWindow + 1, oh = h - detail::kSsimWindow + 1;
    const double n_values = static_cast<double>(render.pixels.size());
    const double pos_count = static_cast<double>(ow) * oh;
    const double dssim_scale = -(1.0 - lambda) / (2.0 * 3.0 * pos_count);

    LossAndGrad out;
    out.grad = ImageD(w, h);
    double l1_sum = 0;
    for (std::size_t i = 0; i < out.grad.pixels.size(); ++i) {
        double d = static_cast<double>(render.pixels[i]) - static_cast<double>(truth.pixels[i]);
        l1_sum += std::abs(d);
        out.grad.pixels[i] = lambda * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n_values;
    }

    double ssim_sum = 0;
    for (int c = 0; c < 3; ++c) {
        auto x = detail::channel_plane(render, c);
        auto y = detail::channel_plane(truth, c);
        std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        auto mx = detail::conv_valid(x, w, h);
        auto my = detail::conv_valid(y, w, h);
        auto mxx = detail::conv_valid(xx, w, h);
        auto myy = detail::conv_valid(yy, w, h);
        auto mxy = detail::conv_valid(xy, w, h);
        std::vector<double> c0(mx.size()), cxm(mx.size()), cym(mx.size());
        for (std::size_t p = 0; p < mx.size(); ++p) {
            double vx = mxx[p] - mx[p] * mx[p];
            double vy = myy[p] - my[p] * my[p];
            double cv = mxy[p] - mx[p] * my[p];
            double a1 = 2.0 * mx[p] * my[p] + detail::kSsimC1;
            double b1 = mx[p] * mx[p] + my[p] * my[p] + detail::kSsimC1;
            double a2 = 2.0 * cv + detail::kSsimC2;
            double b2 = vx + vy + detail::kSsimC2;
            double inv = 1.0 / (b1 * b2);
            double s = a1 * a2 * inv;
            ssim_sum += s;
            double dA1 = a2 * inv;
            double dA2 = a1 * inv;
            double dB1 = -s / b1;
            double dB2 = -s / b2;
            cym[p] = 2.0 * dA2;
            cxm[p] = 2.0 * dB2;
            c0[p] = 2.0 * my[p] * dA1 + 2.0 * mx[p] * dB1 - 2.0 * my[p] * dA2 -
                    2.0 * mx[p] * dB2;
        }
        auto s0 = detail::conv_scatter(c0, w, h);
        auto sx = detail::conv_scatter(cxm, w, h);
        auto sy = detail::conv_scatter(cym, w, h);
        for (int yy2 = 0; yy2 < h; ++yy2)
            for (int xx2 = 0; xx2 < w; ++xx2) {
                std::size_t i = static_cast<std::size_t>(yy2) * w + xx2;
                out.grad.at(xx2, yy2, c) += dssim_scale * (s0[i] + y[i] * sy[i] + x[i] * sx[i]);
            }
    }
    double ssim_val = ssim_sum / (3.0 * pos_count);
    out.loss = lambda * (l1_sum / n_values) + (1.0 - lambda) * (1.0 - ssim_val) / 2.0;
    return out;
}

// One 2x box-average halving; odd dimensions are edge-replicated to even.
template <class T>
BasicImage<T> box_downsample(const BasicImage<T>& img) {
    int w = img.width, h = img.height;
    int pw = (w % 2) ? w + 1 : w;
    int ph = (h % 2) ? h + 1 : h;
    BasicImage<T> out(pw / 2, ph / 2);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c) {
                int x0 = std::min(2 * x, w - 1), x1 = std::min(2 * x + 1, w - 1);
                int y0 = std::min(2 * y, h - 1), y1 = std::min(2 * y + 1, h - 1);
                double s = static_cast<double>(img.at(x0, y0, c)) + img.at(x1, y0, c) +
                           img.at(x0, y1, c) + img.at(x1, y1, c);
                out.at(x, y, c) = static_cast<T>(s / 4.0);
            }
    return out;
}

// Builds the ground-truth pyramid by repeated 2x box halving of the full
// image. Scales must be strictly increasing powers of two ending at 1.
inline ImagePyramid build_pyramid(const Image& full, std::span<const float> scales) {
    if (full.width <= 0 || full.height <= 0 || full.pixels.empty())
        throw std::invalid_argument("build_pyramid: empty image");
    if (scales.empty()) throw std::invalid_argument("build_pyramid: empty scale list");
    if (scales.back() != 1.f) throw std::invalid_argument("build_pyramid: last scale must be 1");
    std::vector<int> halvings(scales.size(), 0);  // from the next finer level
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (!(scales[i] > 0.f && scales[i] <= 1.f))
            throw std::invalid_argument("build_pyramid: scale out of (0,1]");
        if (i == 0) continue;
        if (!(scales[i - 1] < scales[i]))
            throw std::invalid_argument("build_pyramid: scales not strictly increasing");
        double ratio = static_cast<double>(scales[i]) / scales[i - 1];
        int m = static_cast<int>(std::lround(std::log2(ratio)));
        if (m < 1 || std::abs(ratio - std::ldexp(1.0, m)) > 1e-9)
            throw std::invalid_argument("build_pyramid: non-dyadic scale list");
        halvings[i - 1] = m;
    }
    ImagePyramid pyr;
    pyr.resolutions.assign(scales.begin(), scales.end());
    pyr.levels.resize(scales.size());
    pyr.levels.back() = full;
    for (std::size_t i = scales.size() - 1; i-- > 0;) {
        Image img = pyr.levels[i + 1];
        for (int m = 0; m < halvings[i]; ++m) img = box_downsample(img);
        pyr.levels[i] = std::move(img);
    }
    return pyr;
}

}  // namespace lapis
