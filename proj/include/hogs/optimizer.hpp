// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Adam with per-group learning rates. Splat moments are stored in the
// same layout as the splats themselves so densifier edits can remap them.
//
#pragma once

#include <hogs/geometry.hpp>

#include <span>

namespace hogs {

struct AdamHyper {
    double beta1   = 0.9;
    double beta2   = 0.999;
    double epsilon = 1e-15;
};

struct SplatLearningRates {
    double position_init  = 1.6e-4; // multiplied by the scene radius
    double position_final = 1.6e-6;
    double color          = 2.5e-3;
    double opacity        = 5e-2;
    double scale          = 5e-3;
    double rotation       = 1e-3;

    /// Log-linear decay from init to final over max_steps.
    double position(long step, long max_steps) const {
        if (max_steps <= 0) return position_init;
        const double t = std::clamp(double(step) / double(max_steps), 0.0, 1.0);
        return std::exp(std::log(position_init) * (1 - t) + std::log(position_final) * t);
    }
};

template <typename T>
inline void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, double lr,
                        long step, const AdamHyper &h = {}) {
    const double bc1 = 1 - std::pow(h.beta1, double(step));
    const double bc2 = 1 - std::pow(h.beta2, double(step));
    const double step_size = lr / bc1;
    const double inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = double(grad[i]);
        const double mi = h.beta1 * double(m[i]) + (1 - h.beta1) * g;
        const double vi = h.beta2 * double(v[i]) + (1 - h.beta2) * g * g;
        m[i] = T(mi);
        v[i] = T(vi);
        if (lr == 0) continue;
        param[i] = T(double(param[i]) - step_size * mi / (std::sqrt(vi) * inv_sqrt_bc2 + h.epsilon));
    }
}

/// First and second moments for a splat set (same layout as the splats).
template <typename T> struct SplatMoments {
    std::vector<Splat<T>> m, v;

    void resize(std::size_t n) {
        m.resize(n, Splat<T>::zero());
        v.resize(n, Splat<T>::zero());
    }
    std::size_t size() const { return m.size(); }
};

namespace detail {
template <typename T, int N> std::span<T> sp(Eigen::Matrix<T, N, 1> &x) { return {x.data(), std::size_t(N)}; }
template <typename T, int N> std::span<const T> sp(const Eigen::Matrix<T, N, 1> &x) {
    return {x.data(), std::size_t(N)};
}
} // namespace detail

/// One Adam step on every splat parameter group; position_lr is already scaled and decayed.
template <typename T>
void adam_update_splats(std::vector<Splat<T>> &splats, std::span<const Splat<T>> grads, SplatMoments<T> &mom,
                        const SplatLearningRates &lr, double position_lr, long step, const AdamHyper &h = {}) {
    HOGS_CHECK(grads.size() == splats.size() && mom.size() == splats.size(),
               "optimizer moments out of sync with splats (" << mom.size() << " vs " << splats.size() << ")");
    using detail::sp;
    for (std::size_t i = 0; i < splats.size(); ++i) {
        Splat<T> &s = splats[i];
        const Splat<T> &g = grads[i];
        Splat<T> &m = mom.m[i], &v = mom.v[i];
        adam_update<T>(sp(s.position), sp(g.position), sp(m.position), sp(v.position), position_lr, step, h);
        adam_update<T>(sp(s.log_scale), sp(g.log_scale), sp(m.log_scale), sp(v.log_scale), lr.scale, step, h);
        adam_update<T>(sp(s.rotation), sp(g.rotation), sp(m.rotation), sp(v.rotation), lr.rotation, step, h);
        adam_update<T>({&s.opacity_logit, 1}, {&g.opacity_logit, 1}, {&m.opacity_logit, 1}, {&v.opacity_logit, 1},
                       lr.opacity, step, h);
        adam_update<T>(sp(s.base_color_logit), sp(g.base_color_logit), sp(m.base_color_logit),
                       sp(v.base_color_logit), lr.color, step, h);
    }
}

template <typename T> void normalize_rotations(std::vector<Splat<T>> &splats) {
    for (Splat<T> &s : splats) {
        const T n = s.rotation.norm();
        s.rotation = n > T(0) ? Vec4<T>(s.rotation / n) : Vec4<T>(T(1), T(0), T(0), T(0));
    }
}

} // namespace hogs
