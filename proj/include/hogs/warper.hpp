// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Virtual supervision views: small random rotations of a real camera about
// its own center, with a field-rendered target and a confidence mask.
//
#pragma once

#include <hogs/field.hpp>

namespace hogs {

inline constexpr double kPi = 3.14159265358979323846;

/// Rotation about the local x, then y, then z axis (angles in degrees).
inline Eigen::Matrix3d rotation_xyz_deg(const Eigen::Vector3d &deg) {
    const Eigen::Vector3d r = deg * (kPi / 180.0);
    return (Eigen::AngleAxisd(r.x(), Eigen::Vector3d::UnitX()) * Eigen::AngleAxisd(r.y(), Eigen::Vector3d::UnitY()) *
            Eigen::AngleAxisd(r.z(), Eigen::Vector3d::UnitZ()))
        .toRotationMatrix();
}

/// Applies a camera-local rotation while keeping the camera center fixed.
inline Camera rotate_about_center(const Camera &cam, const Eigen::Matrix3d &local) {
    Camera out = cam;
    const Eigen::Vector3d c = cam.center();
    out.rotation_w2c = local * cam.rotation_w2c;
    out.translation_w2c = -out.rotation_w2c * c;
    return out;
}

/// Rotates `cam` about its own center by independent per-axis angles ~U[-max, max] degrees.
inline Camera perturb_pose(const Camera &cam, Rng &rng, double max_angle_deg = 10.0,
                           Eigen::Vector3d *angles_deg = nullptr) {
    HOGS_CHECK(max_angle_deg > 0, "max_angle_deg must be positive");
    std::uniform_real_distribution<double> u(-max_angle_deg, max_angle_deg);
    Eigen::Vector3d a;
    for (int i = 0; i < 3; ++i) a[i] = u(rng);
    if (angles_deg) *angles_deg = a;
    if (a.isZero(0.0)) return cam;
    return rotate_about_center(cam, rotation_xyz_deg(a));
}

/// p_v = K (R_v p + T_v), dehomogenized. Empty when the transformed point is not in front.
inline std::optional<Eigen::Vector2d> warp_point(const Eigen::Vector3d &p_cam, const Eigen::Matrix3d &k,
                                                 const Eigen::Matrix3d &r_v, const Eigen::Vector3d &t_v) {
    const Eigen::Vector3d q = r_v * p_cam + t_v;
    if (!(q.z() > 0)) return std::nullopt;
    const Eigen::Vector3d h = k * q;
    return Eigen::Vector2d(h.x() / h.z(), h.y() / h.z());
}

struct VirtualView {
    Camera camera; // perturbed pose at the rendered resolution
    Image<float> target;
    Image<std::uint8_t> confidence_mask;
    std::string source_camera_id;
    int iteration_created = 0;

    double mask_fraction() const {
        std::size_t on = 0;
        for (auto v : confidence_mask.data) on += v != 0;
        return confidence_mask.data.empty() ? 0.0 : double(on) / double(confidence_mask.data.size());
    }
};

struct WarpConfig {
    double max_angle_deg     = 10.0;
    int stride               = 2;
    int n_samples            = 64;
    double hit_transmittance = 0.5;
    double min_mask_fraction = 0.05;
    Eigen::Vector3d background{1, 1, 1};
};

/// Perturbs `cam`, renders the field there and masks pixels the field is confident about.
/// Returns std::nullopt when the mask covers less than min_mask_fraction of the view.
template <typename F>
std::optional<VirtualView> make_virtual_view(const F &field, const Camera &cam, Rng &rng, const WarpConfig &cfg = {},
                                             int iteration = 0, const Eigen::Vector3d *fixed_angles = nullptr) {
    using T = typename F::Scalar;
    const Camera pose = fixed_angles ? rotate_about_center(cam, rotation_xyz_deg(*fixed_angles))
                                     : perturb_pose(cam, rng, cfg.max_angle_deg);
    FieldImageOptions<T> opt;
    opt.stride     = cfg.stride;
    opt.n_samples  = cfg.n_samples;
    opt.background = cfg.background.cast<T>();
    const FieldImage<T> img = render_field_image(field, pose, opt);
    VirtualView v;
    v.camera            = pose.subsampled(cfg.stride);
    v.target            = img.rgb.template cast<float>();
    v.source_camera_id  = cam.camera_id;
    v.iteration_created = iteration;
    v.confidence_mask   = Image<std::uint8_t>(img.rgb.width, img.rgb.height, 1);
    for (std::size_t i = 0; i < img.transmittance.size(); ++i)
        v.confidence_mask.data[i] = double(img.transmittance.data[i]) < cfg.hit_transmittance ? 1 : 0;
    if (v.mask_fraction() < cfg.min_mask_fraction) return std::nullopt;
    return v;
}

} // namespace hogs
