// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Image losses and metrics: L1, SSIM (11x11 Gaussian window, sigma 1.5),
// the combined splat loss and PSNR. Backward passes return dL/d(render).
//
#pragma once

#include <hogs/common.hpp>

#include <array>
#include <limits>

namespace hogs {

inline constexpr double kSsimC1      = 0.01 * 0.01;
inline constexpr double kSsimC2      = 0.03 * 0.03;
inline constexpr int kSsimRadius     = 5;
inline constexpr double kSsimSigma   = 1.5;
inline constexpr double kPsnrCap     = 99.0;

namespace detail {

inline const std::array<double, 2 * kSsimRadius + 1> &ssim_window() {
    static const auto w = [] {
        std::array<double, 2 * kSsimRadius + 1> k{};
        for (int i = -kSsimRadius; i <= kSsimRadius; ++i)
            k[i + kSsimRadius] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
        return k;
    }();
    return w;
}

/// Separable Gaussian blur of a single-channel W x H plane. The window is renormalized over the
/// in-bounds taps, so constant planes are preserved at the border.
inline std::vector<double> blur(const std::vector<double> &src, int w, int h) {
    const auto &k = ssim_window();
    std::vector<double> tmp(src.size()), out(src.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0, z = 0;
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int xx = x + d;
                if (xx < 0 || xx >= w) continue;
                acc += k[d + kSsimRadius] * src[std::size_t(y) * w + xx];
                z += k[d + kSsimRadius];
            }
            tmp[std::size_t(y) * w + x] = acc / z;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0, z = 0;
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int yy = y + d;
                if (yy < 0 || yy >= h) continue;
                acc += k[d + kSsimRadius] * tmp[std::size_t(yy) * w + x];
                z += k[d + kSsimRadius];
            }
            out[std::size_t(y) * w + x] = acc / z;
        }
    return out;
}

/// Adjoint of blur().
inline std::vector<double> blur_transpose(const std::vector<double> &g, int w, int h) {
    const auto &k = ssim_window();
    auto norm = [&](int i, int n) {
        double z = 0;
        for (int d = -kSsimRadius; d <= kSsimRadius; ++d)
            if (i + d >= 0 && i + d < n) z += k[d + kSsimRadius];
        return z;
    };
    std::vector<double> zx(w), zy(h);
    for (int x = 0; x < w; ++x) zx[x] = norm(x, w);
    for (int y = 0; y < h; ++y) zy[y] = norm(y, h);
    std::vector<double> tmp(g.size(), 0.0), out(g.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = g[std::size_t(y) * w + x] / zy[y];
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int yy = y + d;
                if (yy >= 0 && yy < h) tmp[std::size_t(yy) * w + x] += k[d + kSsimRadius] * v;
            }
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = tmp[std::size_t(y) * w + x] / zx[x];
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int xx = x + d;
                if (xx >= 0 && xx < w) out[std::size_t(y) * w + xx] += k[d + kSsimRadius] * v;
            }
        }
    return out;
}

template <typename T> std::vector<double> plane(const Image<T> &img, int c) {
    std::vector<double> p(img.pixel_count());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = double(img.data[i * img.channels + c]);
    return p;
}

struct SsimMaps {
    std::vector<double> mu_x, mu_y, sxx, syy, sxy;
};

inline SsimMaps ssim_maps(const std::vector<double> &x, const std::vector<double> &y, int w, int h) {
    SsimMaps m;
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    m.mu_x = blur(x, w, h);
    m.mu_y = blur(y, w, h);
    m.sxx  = blur(xx, w, h);
    m.syy  = blur(yy, w, h);
    m.sxy  = blur(xy, w, h);
    for (std::size_t i = 0; i < x.size(); ++i) {
        m.sxx[i] -= m.mu_x[i] * m.mu_x[i];
        m.syy[i] -= m.mu_y[i] * m.mu_y[i];
        m.sxy[i] -= m.mu_x[i] * m.mu_y[i];
    }
    return m;
}

} // namespace detail

/// Mean SSIM over pixels and channels.
template <typename T> double ssim(const Image<T> &a, const Image<T> &b) {
    HOGS_CHECK(a.same_shape(b), "ssim: image shapes differ (" << a.width << "x" << a.height << "x" << a.channels
                                                               << " vs " << b.width << "x" << b.height << "x"
                                                               << b.channels << ")");
    HOGS_CHECK(a.pixel_count() > 0, "ssim: empty image");
    double total = 0;
    for (int c = 0; c < a.channels; ++c) {
        const auto m = detail::ssim_maps(detail::plane(a, c), detail::plane(b, c), a.width, a.height);
        for (std::size_t i = 0; i < m.mu_x.size(); ++i) {
            const double n1 = 2 * m.mu_x[i] * m.mu_y[i] + kSsimC1, n2 = 2 * m.sxy[i] + kSsimC2;
            const double d1 = m.mu_x[i] * m.mu_x[i] + m.mu_y[i] * m.mu_y[i] + kSsimC1;
            const double d2 = m.sxx[i] + m.syy[i] + kSsimC2;
            total += n1 * n2 / (d1 * d2);
        }
    }
    return total / double(a.size());
}

/// d ssim(a, b) / d a.
template <typename T> Image<double> ssim_backward(const Image<T> &a, const Image<T> &b) {
    HOGS_CHECK(a.same_shape(b), "ssim: image shapes differ");
    Image<double> grad(a.width, a.height, a.channels);
    const double inv_n = 1.0 / double(a.size());
    for (int c = 0; c < a.channels; ++c) {
        const auto x = detail::plane(a, c), y = detail::plane(b, c);
        const auto m = detail::ssim_maps(x, y, a.width, a.height);
        const std::size_t n = x.size();
        std::vector<double> g_mu(n), g_xx(n), g_xy(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double mx = m.mu_x[i], my = m.mu_y[i];
            const double n1 = 2 * mx * my + kSsimC1, n2 = 2 * m.sxy[i] + kSsimC2;
            const double d1 = mx * mx + my * my + kSsimC1, d2 = m.sxx[i] + m.syy[i] + kSsimC2;
            const double s = n1 * n2 / (d1 * d2);
            g_mu[i] = inv_n * s * (2 * my / n1 - 2 * mx / d1 - 2 * my / n2 + 2 * mx / d2);
            g_xx[i] = inv_n * (-s / d2);
            g_xy[i] = inv_n * 2 * n1 / (d1 * d2);
        }
        const auto b_mu = detail::blur_transpose(g_mu, a.width, a.height);
        const auto b_xx = detail::blur_transpose(g_xx, a.width, a.height);
        const auto b_xy = detail::blur_transpose(g_xy, a.width, a.height);
        for (std::size_t i = 0; i < n; ++i)
            grad.data[i * a.channels + c] = b_mu[i] + 2 * x[i] * b_xx[i] + y[i] * b_xy[i];
    }
    return grad;
}

template <typename T> double l1_loss(const Image<T> &a, const Image<T> &b) {
    HOGS_CHECK(a.same_shape(b), "l1: image shapes differ");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a.data[i]) - double(b.data[i]));
    return s / double(a.size());
}

template <typename T> double mse(const Image<T> &a, const Image<T> &b) {
    HOGS_CHECK(a.same_shape(b), "mse: image shapes differ");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        s += d * d;
    }
    return s / double(a.size());
}

inline double psnr_from_mse(double m) {
    if (m <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

template <typename T> double psnr(const Image<T> &a, const Image<T> &b) { return psnr_from_mse(mse(a, b)); }

/// PSNR restricted to pixels where mask(x, y) != 0. Returns the cap for an empty mask.
template <typename T, typename M> double masked_psnr(const Image<T> &a, const Image<T> &b, const Image<M> &mask) {
    HOGS_CHECK(a.same_shape(b) && mask.width == a.width && mask.height == a.height, "masked_psnr: shape mismatch");
    double s = 0;
    std::size_t n = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            if (!mask(x, y)) continue;
            for (int c = 0; c < a.channels; ++c) {
                const double d = double(a(x, y, c)) - double(b(x, y, c));
                s += d * d;
                ++n;
            }
        }
    return n ? psnr_from_mse(s / double(n)) : kPsnrCap;
}

struct GaussianLoss {
    double l1    = 0;
    double ssim  = 1;
    double value = 0;
};

/// (1 - lambda) L1 + lambda (1 - ssim).
template <typename T> GaussianLoss gaussian_loss(const Image<T> &render, const Image<T> &gt, double lambda) {
    HOGS_CHECK(lambda >= 0 && lambda <= 1, "lambda must be in [0, 1]");
    GaussianLoss l;
    l.l1    = l1_loss(render, gt);
    l.ssim  = lambda > 0 ? ssim(render, gt) : 1.0;
    l.value = (1 - lambda) * l.l1 + lambda * (1 - l.ssim);
    return l;
}

/// dL/d(render) of gaussian_loss, scaled by `weight`.
template <typename T>
Image<T> gaussian_loss_backward(const Image<T> &render, const Image<T> &gt, double lambda, double weight = 1.0) {
    Image<T> g(render.width, render.height, render.channels);
    const double inv_n = 1.0 / double(render.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = double(render.data[i]) - double(gt.data[i]);
        g.data[i] = T(weight * (1 - lambda) * inv_n * double((d > 0) - (d < 0)));
    }
    if (lambda > 0) {
        const Image<double> gs = ssim_backward(render, gt);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += T(-weight * lambda * gs.data[i]);
    }
    return g;
}

/// Rounds to the 8-bit grid an image would have after being written to disk.
template <typename T> Image<T> quantize8(const Image<T> &img) {
    Image<T> q = img;
    for (T &v : q.data) v = T(std::round(std::clamp(double(v), 0.0, 1.0) * 255.0) / 255.0);
    return q;
}

} // namespace hogs
