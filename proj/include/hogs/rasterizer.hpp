// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Tile-based splat rasterizer: front-to-back alpha compositing and its exact
// reverse-mode pass. Tiles are independent work units in both directions;
// per-splat gradients are reduced in fixed tile order, so results do not
// depend on the number of worker threads.
//
#pragma once

#include <hogs/geometry.hpp>

#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace hogs {

struct RasterSettings {
    int tile_size              = 16;
    double alpha_max           = 0.99;
    double alpha_min           = 1.0 / 255.0;
    double transmittance_min   = 1e-4;
};

/// Per-tile splat lists in CSR form, each sorted front-to-back (depth, then index).
struct TileLists {
    int tile_size = 16;
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::uint32_t> offsets; // tiles_x * tiles_y + 1
    std::vector<std::uint32_t> indices;

    int tile_count() const { return tiles_x * tiles_y; }
    std::span<const std::uint32_t> tile(int t) const {
        return {indices.data() + offsets[t], indices.data() + offsets[t + 1]};
    }
};

template <typename T>
bool disc_overlaps_tile(const Vec2<T> &center, T radius, int tx, int ty, int tile_size) {
    const T x0 = T(tx * tile_size), x1 = T((tx + 1) * tile_size);
    const T y0 = T(ty * tile_size), y1 = T((ty + 1) * tile_size);
    const T dx = center.x() - std::clamp(center.x(), x0, x1);
    const T dy = center.y() - std::clamp(center.y(), y0, y1);
    return dx * dx + dy * dy < radius * radius;
}

template <typename T>
TileLists bin_and_sort(std::span<const std::optional<SplatProjection<T>>> projections, int width,
                       int height, int tile_size = 16) {
    HOGS_CHECK(tile_size > 0, "tile size must be positive");
    TileLists tl;
    tl.tile_size = tile_size;
    tl.tiles_x   = (width + tile_size - 1) / tile_size;
    tl.tiles_y   = (height + tile_size - 1) / tile_size;
    const int ntiles = tl.tile_count();

    auto for_each_tile = [&](const SplatProjection<T> &p, auto &&fn) {
        if (!(p.radius > T(0))) return;
        const int tx0 = std::max(0, int(std::floor((p.mean2d.x() - p.radius) / T(tile_size))));
        const int tx1 = std::min(tl.tiles_x - 1, int(std::floor((p.mean2d.x() + p.radius) / T(tile_size))));
        const int ty0 = std::max(0, int(std::floor((p.mean2d.y() - p.radius) / T(tile_size))));
        const int ty1 = std::min(tl.tiles_y - 1, int(std::floor((p.mean2d.y() + p.radius) / T(tile_size))));
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                if (disc_overlaps_tile(p.mean2d, p.radius, tx, ty, tile_size)) fn(ty * tl.tiles_x + tx);
    };

    std::vector<std::uint32_t> counts(ntiles, 0);
    for (const auto &p : projections)
        if (p) for_each_tile(*p, [&](int t) { ++counts[t]; });
    tl.offsets.assign(ntiles + 1, 0);
    std::partial_sum(counts.begin(), counts.end(), tl.offsets.begin() + 1);
    tl.indices.resize(tl.offsets.back());
    std::vector<std::uint32_t> cursor(tl.offsets.begin(), tl.offsets.end() - 1);
    for (std::size_t i = 0; i < projections.size(); ++i)
        if (projections[i]) for_each_tile(*projections[i], [&](int t) { tl.indices[cursor[t]++] = std::uint32_t(i); });

    parallel_for(std::size_t(ntiles), [&](std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t)
            std::sort(tl.indices.begin() + tl.offsets[t], tl.indices.begin() + tl.offsets[t + 1],
                      [&](std::uint32_t l, std::uint32_t r) {
                          const T dl = projections[l]->depth, dr = projections[r]->depth;
                          return dl < dr || (dl == dr && l < r);
                      });
    });
    return tl;
}

namespace detail {
template <typename T> struct PixelFalloff {
    T alpha;
    T gauss;
    bool clamped;
};

/// Tile-list entry copied into contiguous storage: everything the per-pixel loops touch.
template <typename T> struct PackedSplat {
    T mx, my;          // mean2d
    T ca, cb, cc;      // conic
    T opacity;
    T log_threshold;   // log(alpha_min / opacity): smaller exponents fall below alpha_min
    T r, g, b;
};

template <typename T>
PackedSplat<T> pack_splat(const SplatProjection<T> &p, T opacity, const Vec3<T> &color, const RasterSettings &rs) {
    return {p.mean2d.x(), p.mean2d.y(), p.conic[0],      p.conic[1], p.conic[2], opacity,
            std::log(T(rs.alpha_min) / opacity), color[0], color[1],   color[2]};
}

template <typename T>
inline bool splat_alpha(const PackedSplat<T> &p, T px, T py, const RasterSettings &rs, T &dx, T &dy,
                        PixelFalloff<T> &out) {
    dx = p.mx - px;
    dy = p.my - py;
    const T power = T(-0.5) * (p.ca * dx * dx + p.cc * dy * dy) - p.cb * dx * dy;
    if (power > T(0) || power < p.log_threshold) return false;
    out.gauss = std::exp(power);
    const T a = p.opacity * out.gauss;
    out.clamped = a > T(rs.alpha_max);
    out.alpha   = out.clamped ? T(rs.alpha_max) : a;
    return true;
}

template <typename T>
inline bool splat_alpha(const SplatProjection<T> &p, T opacity, T px, T py, const RasterSettings &rs,
                        PixelFalloff<T> &out) {
    const PackedSplat<T> q = pack_splat(p, opacity, Vec3<T>::Zero().eval(), rs);
    T dx, dy;
    return splat_alpha(q, px, py, rs, dx, dy, out);
}
} // namespace detail

template <typename T> struct RenderOutput {
    Image<T> image;          // H x W x 3
    Image<T> accum_alpha;    // H x W x 1, 1 - final transmittance
    Image<int> contrib_count; // H x W x 1, splats blended per pixel

    // Replay state for the backward pass.
    std::vector<std::optional<SplatProjection<T>>> projections;
    std::vector<CullReason> cull_reasons;
    TileLists tiles;
    std::vector<detail::PackedSplat<T>> packed; // parallel to tiles.indices
    std::vector<T> final_transmittance;  // per pixel
    std::vector<std::uint32_t> last_entry; // per pixel: one past the last blended tile-list entry
    Vec3<T> background{Vec3<T>::Zero()};
    RasterSettings settings;
};

/// Projects, bins and composites. `colors` are the per-splat RGB values in [0, 1].
template <typename T>
RenderOutput<T> rasterize_forward(std::span<const Splat<T>> splats, std::span<const Vec3<T>> colors,
                                  const Camera &cam, const Vec3<T> &background,
                                  const RasterSettings &settings = {}) {
    HOGS_CHECK(splats.size() == colors.size(), "splat and color counts differ");
    const int w = cam.width, h = cam.height;
    RenderOutput<T> out;
    out.settings   = settings;
    out.background = background;
    out.image         = Image<T>(w, h, 3);
    out.accum_alpha   = Image<T>(w, h, 1);
    out.contrib_count = Image<int>(w, h, 1);
    out.final_transmittance.assign(std::size_t(w) * h, T(1));
    out.last_entry.assign(std::size_t(w) * h, 0);

    const std::size_t n = splats.size();
    out.projections.resize(n);
    out.cull_reasons.resize(n);
    parallel_for(n, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) out.projections[i] = project_splat(splats[i], cam, &out.cull_reasons[i]);
    });
    out.tiles = bin_and_sort<T>(out.projections, w, h, settings.tile_size);

    const TileLists &tl = out.tiles;
    out.packed.resize(tl.indices.size());
    for (std::size_t k = 0; k < tl.indices.size(); ++k) {
        const std::uint32_t i = tl.indices[k];
        out.packed[k] = detail::pack_splat(*out.projections[i], splats[i].opacity(), colors[i], settings);
    }

    parallel_for(std::size_t(tl.tile_count()), [&](std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t) {
            const int tx = int(t) % tl.tiles_x, ty = int(t) / tl.tiles_x;
            const std::uint32_t count = tl.offsets[t + 1] - tl.offsets[t];
            const detail::PackedSplat<T> *list = out.packed.data() + tl.offsets[t];
            for (int y = ty * tl.tile_size; y < std::min(h, (ty + 1) * tl.tile_size); ++y) {
                for (int x = tx * tl.tile_size; x < std::min(w, (tx + 1) * tl.tile_size); ++x) {
                    const T px = T(x) + T(0.5), py = T(y) + T(0.5);
                    T trans = T(1);
                    T cr = T(0), cg = T(0), cb = T(0);
                    int blended = 0;
                    std::uint32_t last = 0;
                    for (std::uint32_t k = 0; k < count; ++k) {
                        const detail::PackedSplat<T> &q = list[k];
                        detail::PixelFalloff<T> f;
                        T dx, dy;
                        if (!detail::splat_alpha(q, px, py, settings, dx, dy, f)) continue;
                        const T next = trans * (T(1) - f.alpha);
                        if (next < T(settings.transmittance_min)) break;
                        const T wgt = f.alpha * trans;
                        cr += q.r * wgt;
                        cg += q.g * wgt;
                        cb += q.b * wgt;
                        trans = next;
                        ++blended;
                        last = k + 1;
                    }
                    const std::size_t pix = std::size_t(y) * w + x;
                    out.final_transmittance[pix] = trans;
                    out.last_entry[pix]          = last;
                    out.contrib_count(x, y)      = blended;
                    out.accum_alpha(x, y)        = T(1) - trans;
                    out.image(x, y, 0) = cr + trans * background[0];
                    out.image(x, y, 1) = cg + trans * background[1];
                    out.image(x, y, 2) = cb + trans * background[2];
                }
            }
        }
    });
    return out;
}

template <typename T> struct SplatGradients {
    std::vector<Splat<T>> params;         // gradient per splat field
    std::vector<Vec3<T>> color;           // dL/d per-splat color
    std::vector<Vec2<T>> mean2d;          // dL/d mean2d (pixels)
    std::vector<std::uint8_t> visible;    // splat survived culling in this view

    void resize(std::size_t n) {
        params.assign(n, Splat<T>::zero());
        color.assign(n, Vec3<T>::Zero());
        mean2d.assign(n, Vec2<T>::Zero());
        visible.assign(n, 0);
    }
    std::size_t size() const { return params.size(); }

    /// Positional gradient in normalized device units, the quantity adaptive density control thresholds.
    T view_space_norm(std::size_t i, const Camera &cam) const {
        return Vec2<T>(mean2d[i].x() * T(0.5 * cam.width), mean2d[i].y() * T(0.5 * cam.height)).norm();
    }
};

/// Exact reverse-mode pass of rasterize_forward. Splats that were culled or never blended get zero
/// gradient. `grad_image` is dL/d image, H x W x 3 interleaved.
template <typename T>
SplatGradients<T> rasterize_backward(const RenderOutput<T> &fwd, std::span<const T> grad_image,
                                     std::span<const Splat<T>> splats, std::span<const Vec3<T>> colors,
                                     const Camera &cam) {
    const int w = cam.width, h = cam.height;
    HOGS_CHECK(fwd.image.width == w && fwd.image.height == h, "camera does not match render output");
    HOGS_CHECK(grad_image.size() == fwd.image.size(), "grad_image has " << grad_image.size()
                                                                         << " entries, expected "
                                                                         << fwd.image.size());
    HOGS_CHECK(splats.size() == fwd.projections.size() && colors.size() == splats.size(),
               "splat count does not match the forward pass");
    const std::size_t n = splats.size();
    const RasterSettings &rs = fwd.settings;
    const TileLists &tl      = fwd.tiles;

    std::vector<T> opacity(n);
    for (std::size_t i = 0; i < n; ++i) opacity[i] = splats[i].opacity();

    // Per tile-list entry: mean2d(2), conic(3), opacity(1), color(3).
    constexpr int kStride = 9;
    std::vector<T> entry_grad(tl.indices.size() * kStride, T(0));

    parallel_for(std::size_t(tl.tile_count()), [&](std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t) {
            const int tx = int(t) % tl.tiles_x, ty = int(t) / tl.tiles_x;
            const detail::PackedSplat<T> *list = fwd.packed.data() + tl.offsets[t];
            T *tile_grad = entry_grad.data() + std::size_t(tl.offsets[t]) * kStride;
            for (int y = ty * tl.tile_size; y < std::min(h, (ty + 1) * tl.tile_size); ++y) {
                for (int x = tx * tl.tile_size; x < std::min(w, (tx + 1) * tl.tile_size); ++x) {
                    const std::size_t pix = std::size_t(y) * w + x;
                    const Vec3<T> dpix(grad_image[pix * 3], grad_image[pix * 3 + 1], grad_image[pix * 3 + 2]);
                    if (dpix.isZero()) continue;
                    const T px = T(x) + T(0.5), py = T(y) + T(0.5);
                    const T t_final = fwd.final_transmittance[pix];
                    T trans = t_final;
                    Vec3<T> behind = fwd.background * t_final; // color contributed by everything behind
                    for (std::uint32_t k = fwd.last_entry[pix]; k-- > 0;) {
                        const detail::PackedSplat<T> &q = list[k];
                        detail::PixelFalloff<T> f;
                        T dx, dy;
                        if (!detail::splat_alpha(q, px, py, rs, dx, dy, f)) continue;
                        trans /= (T(1) - f.alpha); // transmittance in front of splat i
                        const Vec3<T> ci(q.r, q.g, q.b);
                        T *g = tile_grad + std::size_t(k) * kStride;
                        const T weight = f.alpha * trans;
                        g[6] += weight * dpix[0];
                        g[7] += weight * dpix[1];
                        g[8] += weight * dpix[2];
                        // C = ... + T_i (a c_i + (1 - a) B_i), B_i = behind / (T_i (1 - a))
                        const Vec3<T> rest = behind / (trans * (T(1) - f.alpha));
                        const T dl_dalpha = trans * (ci - rest).dot(dpix);
                        behind += ci * weight;
                        if (f.clamped) continue;
                        const T dl_dgauss = q.opacity * dl_dalpha;
                        g[5] += f.gauss * dl_dalpha;
                        const T gg = f.gauss * dl_dgauss;
                        g[0] += gg * (-q.ca * dx - q.cb * dy);
                        g[1] += gg * (-q.cc * dy - q.cb * dx);
                        g[2] += gg * T(-0.5) * dx * dx;
                        g[3] += gg * -dx * dy;
                        g[4] += gg * T(-0.5) * dy * dy;
                    }
                }
            }
        }
    });

    // Fixed-order reduction over tiles.
    std::vector<T> acc(n * kStride, T(0));
    for (std::size_t k = 0; k < tl.indices.size(); ++k) {
        T *dst = acc.data() + std::size_t(tl.indices[k]) * kStride;
        const T *src = entry_grad.data() + k * kStride;
        for (int j = 0; j < kStride; ++j) dst[j] += src[j];
    }

    SplatGradients<T> out;
    out.resize(n);
    parallel_for(n, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            if (!fwd.projections[i]) continue;
            out.visible[i] = 1;
            const T *a = acc.data() + i * kStride;
            out.mean2d[i] = Vec2<T>(a[0], a[1]);
            out.color[i]  = Vec3<T>(a[6], a[7], a[8]);
            const T o = opacity[i];
            out.params[i].opacity_logit = a[5] * o * (T(1) - o);
            const ProjectionGrad<T> pg = project_splat_backward(splats[i], cam, *fwd.projections[i],
                                                                Vec2<T>(a[0], a[1]), Vec3<T>(a[2], a[3], a[4]));
            out.params[i].position  = pg.position;
            out.params[i].log_scale = pg.log_scale;
            out.params[i].rotation  = pg.rotation;
        }
    });
    return out;
}

} // namespace hogs
