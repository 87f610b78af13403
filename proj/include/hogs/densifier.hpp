// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Point densification from field depth (harvest) and adaptive density
// control (clone, split, prune, opacity reset).
//
#pragma once

#include <hogs/field.hpp>
#include <hogs/rasterizer.hpp>

#include <numeric>
#include <unordered_set>

namespace hogs {

struct DensifyConfig {
    double tau                 = 1.0;
    double eps_alpha           = 0.005;
    double grad_threshold      = 2e-4;
    int densify_interval       = 100;
    int densify_until          = 15000; // no clone/split/prune at or after this iteration
    std::vector<int> harvest_iterations{5000, 15000, 25000};
    int opacity_reset_interval = 3000;
    std::size_t max_splats     = 2'000'000;
    double scene_bound         = 2.0; // contracted-space radius
    int harvest_stride         = 4;
    int harvest_samples        = 64;
    int dedup_resolution       = 256;
    double hit_transmittance   = 0.5;
    double new_opacity         = 0.1;
    double percent_dense       = 0.01; // clone vs split, fraction of the scene extent
    double split_factor        = 1.6;
    double opacity_reset_value = 0.01;
    double max_world_radius    = 1.0; // fraction of the scene extent

    void validate(int total_iterations) const {
        HOGS_CHECK(tau > 0, "tau must be positive");
        HOGS_CHECK(eps_alpha > 0 && eps_alpha < 1, "eps_alpha must be in (0, 1)");
        HOGS_CHECK(densify_interval >= 1 && opacity_reset_interval >= 1, "intervals must be >= 1");
        HOGS_CHECK(harvest_stride >= 1 && harvest_samples >= 2 && dedup_resolution >= 1, "invalid harvest settings");
        for (std::size_t i = 0; i < harvest_iterations.size(); ++i) {
            HOGS_CHECK(i == 0 || harvest_iterations[i] > harvest_iterations[i - 1],
                       "harvest iterations must be strictly increasing");
            HOGS_CHECK(harvest_iterations[i] >= 0 && harvest_iterations[i] <= total_iterations,
                       "harvest iteration " << harvest_iterations[i] << " outside [0, " << total_iterations << "]");
        }
    }
};

struct HarvestCameraStats {
    std::string camera_id;
    std::size_t rays = 0, passing = 0, added = 0;
};

struct HarvestReport {
    std::size_t rays_cast = 0;
    std::size_t passing_tau = 0; // hit the scene and met the density threshold
    std::size_t in_bounds = 0;
    std::size_t added = 0;
    bool capped = false;
    std::vector<HarvestCameraStats> per_camera;
};

struct HarvestResult {
    std::vector<Splat<float>> splats;
    std::vector<Eigen::Vector3d> directions; // ray direction that produced each splat
    HarvestReport report;
};

namespace detail {

/// Mean distance to the k nearest other points (uniform-grid search). Falls back to `fallback`
/// when fewer than two points exist.
inline std::vector<double> mean_knn_distance(const std::vector<Eigen::Vector3d> &pts, int k, double fallback) {
    const std::size_t n = pts.size();
    std::vector<double> out(n, fallback);
    if (n < 2) return out;
    Eigen::Vector3d lo = pts[0], hi = pts[0];
    for (const auto &p : pts) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const double extent = std::max((hi - lo).maxCoeff(), 1e-9);
    const int res = std::clamp(int(std::cbrt(double(n) / 2.0)), 1, 128);
    const double cell = extent / res + 1e-12;
    auto key = [&](const Eigen::Vector3d &p, int a) { return std::clamp(int((p[a] - lo[a]) / cell), 0, res - 1); };
    std::vector<std::vector<std::uint32_t>> grid(std::size_t(res) * res * res);
    for (std::size_t i = 0; i < n; ++i)
        grid[(std::size_t(key(pts[i], 2)) * res + key(pts[i], 1)) * res + key(pts[i], 0)].push_back(std::uint32_t(i));
    const int kk = std::min<int>(k, int(n) - 1);
    parallel_for(n, [&](std::size_t b, std::size_t e) {
        std::vector<double> best;
        for (std::size_t i = b; i < e; ++i) {
            const int cx = key(pts[i], 0), cy = key(pts[i], 1), cz = key(pts[i], 2);
            for (int ring = 0;; ++ring) {
                best.clear();
                for (int z = std::max(0, cz - ring); z <= std::min(res - 1, cz + ring); ++z)
                    for (int y = std::max(0, cy - ring); y <= std::min(res - 1, cy + ring); ++y)
                        for (int x = std::max(0, cx - ring); x <= std::min(res - 1, cx + ring); ++x)
                            for (std::uint32_t j : grid[(std::size_t(z) * res + y) * res + x])
                                if (j != i) best.push_back((pts[j] - pts[i]).squaredNorm());
                // Points within `ring` cells are exact only if the k-th distance is inside the ring.
                const bool full = ring >= res;
                if (int(best.size()) >= kk) {
                    std::nth_element(best.begin(), best.begin() + (kk - 1), best.end());
                    const double kth = std::sqrt(best[kk - 1]);
                    if (kth <= ring * cell || full) {
                        std::partial_sort(best.begin(), best.begin() + kk, best.end());
                        double s = 0;
                        for (int j = 0; j < kk; ++j) s += std::sqrt(best[j]);
                        out[i] = std::max(s / kk, 1e-7);
                        break;
                    }
                }
                if (full) break;
            }
        }
    });
    return out;
}

} // namespace detail

/// Casts a stratified pixel subsample from every camera into `field` and turns the expected-depth
/// points that hit dense space into new splats. `existing` is the current splat count (for the cap).
template <typename F>
HarvestResult harvest_points(const F &field, std::span<const Camera> cameras, const DensifyConfig &cfg, Rng &rng,
                             std::size_t existing = 0) {
    using T = typename F::Scalar;
    const SceneFrame frame = field.scene_frame();
    HarvestResult res;
    HarvestReport &rep = res.report;

    struct Candidate {
        Eigen::Vector3d x, dir;
    };
    std::vector<Candidate> accepted;
    std::unordered_set<std::uint64_t> voxels;
    const int vr = cfg.dedup_resolution;
    RenderRayOptions<T> ro;
    ro.n_samples = cfg.harvest_samples;

    for (const Camera &cam : cameras) {
        HarvestCameraStats cs;
        cs.camera_id = cam.camera_id;
        std::uniform_int_distribution<int> off(0, cfg.harvest_stride - 1);
        std::vector<Ray<T>> rays;
        for (int y0 = 0; y0 < cam.height; y0 += cfg.harvest_stride)
            for (int x0 = 0; x0 < cam.width; x0 += cfg.harvest_stride) {
                const int x = std::min(cam.width - 1, x0 + off(rng));
                const int y = std::min(cam.height - 1, y0 + off(rng));
                rays.push_back(camera_ray<T>(cam, x + 0.5, y + 0.5));
            }
        const auto rr = render_rays(field, std::span<const Ray<T>>(rays), ro);
        cs.rays = rays.size();

        std::vector<Vec3<T>> hits;
        std::vector<std::size_t> hit_ray;
        for (std::size_t r = 0; r < rays.size(); ++r) {
            if (!(double(rr[r].transmittance) < cfg.hit_transmittance)) continue;
            hits.push_back(rays[r].origin + rr[r].depth * rays[r].direction);
            hit_ray.push_back(r);
        }
        std::vector<T> sigma;
        if (!hits.empty()) field.density(std::span<const Vec3<T>>(hits), sigma);
        for (std::size_t h = 0; h < hits.size(); ++h) {
            if (!(double(sigma[h]) >= cfg.tau)) continue;
            ++cs.passing;
            const Eigen::Vector3d x = hits[h].template cast<double>();
            const Eigen::Vector3d c = contract(Eigen::Vector3d((x - frame.center) / frame.radius));
            if (!(c.norm() <= cfg.scene_bound)) continue;
            ++rep.in_bounds;
            std::uint64_t key = 0;
            for (int a = 0; a < 3; ++a) {
                const auto v = std::uint64_t(std::clamp(int(std::floor((c[a] + 2.0) / 4.0 * vr)), 0, vr - 1));
                key = key * std::uint64_t(vr) + v;
            }
            if (!voxels.insert(key).second) continue;
            accepted.push_back({x, rays[hit_ray[h]].direction.template cast<double>()});
            ++cs.added;
        }
        rep.rays_cast += cs.rays;
        rep.passing_tau += cs.passing;
        rep.per_camera.push_back(cs);
    }

    const std::size_t room = cfg.max_splats > existing ? cfg.max_splats - existing : 0;
    if (accepted.size() > room) {
        rep.capped = true;
        std::vector<std::size_t> idx(accepted.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(room);
        std::sort(idx.begin(), idx.end());
        std::vector<Candidate> kept;
        for (std::size_t i : idx) kept.push_back(accepted[i]);
        accepted.swap(kept);
        for (auto &cs : rep.per_camera) cs.added = 0; // per-camera attribution lost after subsampling
    }
    rep.added = accepted.size();
    if (accepted.empty()) return res;

    std::vector<Eigen::Vector3d> pts, dirs;
    for (const auto &c : accepted) {
        pts.push_back(c.x);
        dirs.push_back(c.dir);
    }
    const auto dist = detail::mean_knn_distance(pts, 3, 0.01 * frame.radius);
    std::vector<Vec3<T>> xs, ds;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        xs.push_back(pts[i].cast<T>());
        ds.push_back(dirs[i].cast<T>());
    }
    std::vector<T> sigma;
    std::vector<Vec3<T>> rgb;
    field.evaluate(std::span<const Vec3<T>>(xs), std::span<const Vec3<T>>(ds), sigma, rgb);
    const float op = float(logit(cfg.new_opacity));
    for (std::size_t i = 0; i < pts.size(); ++i) {
        Splat<float> s;
        s.position = pts[i].cast<float>();
        s.log_scale.setConstant(float(std::log(dist[i])));
        s.rotation << 1.f, 0.f, 0.f, 0.f;
        s.opacity_logit = op;
        for (int c = 0; c < 3; ++c) s.base_color_logit[c] = float(logit(std::clamp(double(rgb[i][c]), 1e-4, 1 - 1e-4)));
        res.splats.push_back(s);
    }
    res.directions = std::move(dirs);
    return res;
}

// ---------------------------------------------------------------------------
// Adaptive density control
// ---------------------------------------------------------------------------

/// Running view-space gradient statistics since the last densification.
struct DensifyAccumulators {
    std::vector<double> grad_sum;
    std::vector<int> count;
    std::vector<Eigen::Vector3d> position_grad; // world-space, for the clone offset

    void resize(std::size_t n) {
        grad_sum.assign(n, 0.0);
        count.assign(n, 0);
        position_grad.assign(n, Eigen::Vector3d::Zero());
    }
    std::size_t size() const { return grad_sum.size(); }

    template <typename T> void add(const SplatGradients<T> &g, const Camera &cam) {
        HOGS_CHECK(g.size() == size(), "accumulator size mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!g.visible[i]) continue;
            grad_sum[i] += double(g.view_space_norm(i, cam));
            count[i] += 1;
            position_grad[i] += g.params[i].position.template cast<double>();
        }
    }

    double mean(std::size_t i) const { return count[i] ? grad_sum[i] / count[i] : 0.0; }
};

/// What changed. origin[j] is the pre-edit index of splat j, or -1 for a new splat.
struct EditLog {
    int iteration = 0;
    std::size_t cloned = 0, split = 0, pruned = 0, reset = 0;
    std::vector<std::ptrdiff_t> origin;
};

/// Clone/split high-gradient splats, then prune transparent and oversized ones.
template <typename T>
EditLog densify_and_prune(std::vector<Splat<T>> &splats, const DensifyAccumulators &acc, const DensifyConfig &cfg,
                          double scene_extent, Rng &rng, int iteration = 0) {
    HOGS_CHECK(acc.size() == splats.size(), "accumulators do not match the splat set");
    const std::size_t n = splats.size();
    EditLog log;
    log.iteration = iteration;

    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < n; ++i)
        if (acc.count[i] > 0 && acc.mean(i) >= cfg.grad_threshold) cand.push_back(i);
    const std::size_t room = cfg.max_splats > n ? cfg.max_splats - n : 0;
    if (cand.size() > room) {
        std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return acc.mean(a) > acc.mean(b); });
        cand.resize(room);
        std::sort(cand.begin(), cand.end());
    }

    std::vector<std::uint8_t> remove(n, 0);
    std::vector<Splat<T>> added;
    const double small = cfg.percent_dense * scene_extent;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i : cand) {
        const Splat<T> &s = splats[i];
        const Vec3<T> scale = s.scale();
        if (double(scale.maxCoeff()) <= small) {
            Splat<T> c = s;
            const Eigen::Vector3d g = acc.position_grad[i];
            if (g.norm() > 0) c.position -= (double(scale.maxCoeff()) * g.normalized()).cast<T>();
            added.push_back(c);
            ++log.cloned;
        } else {
            const Mat3<T> r = rotation_from_quaternion(s.rotation);
            for (int k = 0; k < 2; ++k) {
                Splat<T> c = s;
                const Vec3<T> z(T(normal(rng)), T(normal(rng)), T(normal(rng)));
                c.position  = s.position + r * scale.cwiseProduct(z);
                c.log_scale = s.log_scale - Vec3<T>::Constant(T(std::log(cfg.split_factor)));
                added.push_back(c);
            }
            remove[i] = 1;
            ++log.split;
        }
    }

    std::vector<Splat<T>> out;
    out.reserve(n + added.size());
    auto keep = [&](const Splat<T> &s) {
        if (double(s.opacity()) < cfg.eps_alpha) return false;
        return 3.0 * double(s.scale().maxCoeff()) <= cfg.max_world_radius * scene_extent;
    };
    for (std::size_t i = 0; i < n; ++i) {
        if (remove[i]) continue;
        if (!keep(splats[i])) {
            ++log.pruned;
            continue;
        }
        out.push_back(splats[i]);
        log.origin.push_back(std::ptrdiff_t(i));
    }
    for (const Splat<T> &s : added) {
        if (!keep(s)) {
            ++log.pruned;
            continue;
        }
        out.push_back(s);
        log.origin.push_back(-1);
    }
    splats.swap(out);
    return log;
}

/// Clamps every opacity to at most opacity_reset_value. Returns the number of splats changed.
template <typename T> std::size_t reset_opacity(std::vector<Splat<T>> &splats, const DensifyConfig &cfg) {
    const T cap = T(logit(cfg.opacity_reset_value));
    std::size_t changed = 0;
    for (Splat<T> &s : splats)
        if (s.opacity_logit > cap) {
            s.opacity_logit = cap;
            ++changed;
        }
    return changed;
}

/// Scheduled adaptive density control for the step that just finished at `iteration` (1-based).
/// Returns std::nullopt when nothing ran.
template <typename T>
std::optional<EditLog> adaptive_density_control(std::vector<Splat<T>> &splats, DensifyAccumulators &acc,
                                                const DensifyConfig &cfg, double scene_extent, int iteration,
                                                Rng &rng) {
    std::optional<EditLog> log;
    if (iteration < cfg.densify_until && iteration % cfg.densify_interval == 0) {
        log = densify_and_prune(splats, acc, cfg, scene_extent, rng, iteration);
        acc.resize(splats.size());
    }
    if (iteration < cfg.densify_until && iteration % cfg.opacity_reset_interval == 0) {
        if (!log) {
            log.emplace();
            log->iteration = iteration;
            log->origin.resize(splats.size());
            std::iota(log->origin.begin(), log->origin.end(), std::ptrdiff_t(0));
        }
        log->reset = reset_opacity(splats, cfg);
    }
    return log;
}

/// Applies an edit log to per-splat state: surviving entries move, new entries are zeroed.
template <typename S> void remap(std::vector<S> &v, const EditLog &log, const S &zero) {
    std::vector<S> out(log.origin.size(), zero);
    for (std::size_t j = 0; j < log.origin.size(); ++j)
        if (log.origin[j] >= 0) out[j] = v[std::size_t(log.origin[j])];
    v.swap(out);
}

} // namespace hogs
