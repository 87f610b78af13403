// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable splat geometry: covariance factorization, EWA projection
// of 3D Gaussians to the image plane and the unbounded-scene contraction.
//
// Conventions: quaternions are (w, x, y, z); cameras store world-to-camera
// extrinsics with +z forward; the image origin is the top-left corner and
// pixel (i, j) has its center at (i + 0.5, j + 0.5).
//
#pragma once

#include <hogs/common.hpp>

#include <optional>
#include <string>

namespace hogs {

/// One anisotropic 3D Gaussian.
template <typename T> struct Splat {
    Vec3<T> position{Vec3<T>::Zero()};
    Vec3<T> log_scale{Vec3<T>::Zero()};
    Vec4<T> rotation{T(1), T(0), T(0), T(0)}; // (w, x, y, z)
    T opacity_logit{0};
    Vec3<T> base_color_logit{Vec3<T>::Zero()}; // degree-0 RGB, logit space

    T opacity() const { return sigmoid(opacity_logit); }
    Vec3<T> scale() const { return log_scale.array().exp().matrix(); }
    Vec3<T> base_color() const {
        return Vec3<T>(sigmoid(base_color_logit[0]), sigmoid(base_color_logit[1]),
                       sigmoid(base_color_logit[2]));
    }

    static Splat zero() {
        Splat s;
        s.rotation.setZero();
        return s;
    }

    template <typename U> Splat<U> cast() const {
        Splat<U> s;
        s.position         = position.template cast<U>();
        s.log_scale        = log_scale.template cast<U>();
        s.rotation         = rotation.template cast<U>();
        s.opacity_logit    = static_cast<U>(opacity_logit);
        s.base_color_logit = base_color_logit.template cast<U>();
        return s;
    }

    bool operator==(const Splat &) const = default;
};

/// Pinhole camera with world-to-camera extrinsics.
struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 0, height = 0;
    Eigen::Matrix3d rotation_w2c    = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation_w2c = Eigen::Vector3d::Zero();
    double near = 0.01, far = 100.0;
    std::string camera_id;

    Eigen::Vector3d center() const { return -rotation_w2c.transpose() * translation_w2c; }
    Eigen::Vector3d forward() const { return rotation_w2c.row(2).transpose(); }

    Eigen::Matrix3d intrinsics() const {
        Eigen::Matrix3d k;
        k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
        return k;
    }

    /// Unit world-space direction through continuous image coordinate (u, v).
    Eigen::Vector3d ray_direction(double u, double v) const {
        const Eigen::Vector3d d((u - cx) / fx, (v - cy) / fy, 1.0);
        return (rotation_w2c.transpose() * d).normalized();
    }

    /// Camera whose pixel (i, j) center coincides with pixel (stride*i, stride*j) of this one.
    Camera subsampled(int stride) const {
        HOGS_CHECK(stride >= 1, "stride must be >= 1");
        Camera c = *this;
        c.width  = (width + stride - 1) / stride;
        c.height = (height + stride - 1) / stride;
        c.fx     = fx / stride;
        c.fy     = fy / stride;
        c.cx     = (cx - 0.5) / stride + 0.5;
        c.cy     = (cy - 0.5) / stride + 0.5;
        return c;
    }

    double orthonormality_error() const {
        return (rotation_w2c.transpose() * rotation_w2c - Eigen::Matrix3d::Identity()).norm();
    }

    void validate(double tol = 1e-6) const {
        HOGS_CHECK(width > 0 && height > 0, "camera image size must be positive");
        HOGS_CHECK(fx > 0 && fy > 0, "focal lengths must be positive");
        HOGS_CHECK(orthonormality_error() <= tol,
                   "camera rotation is not orthonormal (error " << orthonormality_error() << ")");
        HOGS_CHECK(near > 0 && near < far, "camera requires 0 < near < far");
    }

    bool operator==(const Camera &) const = default;
};

/// Six unique entries of a symmetric 3x3 covariance.
template <typename T> struct Covariance3 {
    T xx{0}, xy{0}, xz{0}, yy{0}, yz{0}, zz{0};

    Mat3<T> matrix() const {
        Mat3<T> m;
        m << xx, xy, xz, xy, yy, yz, xz, yz, zz;
        return m;
    }
    static Covariance3 from_matrix(const Mat3<T> &m) {
        return {m(0, 0), T(0.5) * (m(0, 1) + m(1, 0)), T(0.5) * (m(0, 2) + m(2, 0)),
                m(1, 1), T(0.5) * (m(1, 2) + m(2, 1)), m(2, 2)};
    }
};

// ---------------------------------------------------------------------------
// Quaternion -> rotation
// ---------------------------------------------------------------------------

template <typename T> Mat3<T> rotation_from_unit_quaternion(const Vec4<T> &q) {
    const T w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3<T> r;
    r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
        T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
        T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
    return r;
}

template <typename T> Mat3<T> rotation_from_quaternion(const Vec4<T> &q) {
    return rotation_from_unit_quaternion<T>(q / q.norm());
}

/// dL/dq for R = rotation_from_quaternion(q), including the normalization.
template <typename T> Vec4<T> rotation_from_quaternion_backward(const Vec4<T> &q, const Mat3<T> &g) {
    const T n   = q.norm();
    const Vec4<T> u = q / n;
    const T w = u[0], x = u[1], y = u[2], z = u[3];
    Vec4<T> du;
    du[0] = T(2) * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    du[1] = T(2) * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - T(2) * x * g(1, 1) - w * g(1, 2) +
                    z * g(2, 0) + w * g(2, 1) - T(2) * x * g(2, 2));
    du[2] = T(2) * (-T(2) * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
                    w * g(2, 0) + z * g(2, 1) - T(2) * y * g(2, 2));
    du[3] = T(2) * (-T(2) * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) -
                    T(2) * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
    return (du - u * u.dot(du)) / n;
}

// ---------------------------------------------------------------------------
// Covariance
// ---------------------------------------------------------------------------

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
template <typename T> Covariance3<T> build_covariance(const Vec3<T> &log_scale, const Vec4<T> &rotation) {
    const Mat3<T> m = rotation_from_quaternion(rotation) * log_scale.array().exp().matrix().asDiagonal();
    return Covariance3<T>::from_matrix(m * m.transpose());
}

template <typename T> struct CovarianceGrad {
    Vec3<T> log_scale{Vec3<T>::Zero()};
    Vec4<T> rotation{Vec4<T>::Zero()};
};

/// Backward of build_covariance. `grad_sigma` is dL/dSigma over all nine entries.
template <typename T>
CovarianceGrad<T> build_covariance_backward(const Vec3<T> &log_scale, const Vec4<T> &rotation,
                                            const Mat3<T> &grad_sigma) {
    const Mat3<T> r = rotation_from_quaternion(rotation);
    const Vec3<T> s = log_scale.array().exp().matrix();
    const Mat3<T> m = r * s.asDiagonal();
    const Mat3<T> grad_m = (grad_sigma + grad_sigma.transpose()) * m;
    CovarianceGrad<T> out;
    Mat3<T> grad_r;
    for (int j = 0; j < 3; ++j) {
        grad_r.col(j)    = grad_m.col(j) * s[j];
        out.log_scale[j] = grad_m.col(j).dot(r.col(j)) * s[j];
    }
    out.rotation = rotation_from_quaternion_backward(rotation, grad_r);
    return out;
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

inline constexpr double kLowPassDilation = 0.3; // px^2 added to the projected covariance
inline constexpr double kGuardBand       = 1.3; // frustum guard band factor

enum class CullReason { none, depth, frustum, degenerate };

template <typename T> struct SplatProjection {
    Vec2<T> mean2d{Vec2<T>::Zero()};
    Vec3<T> conic{Vec3<T>::Zero()};  // (a, b, c) of [[a, b], [b, c]] = inverse 2D covariance
    Vec3<T> cov2d{Vec3<T>::Zero()};  // regularized 2D covariance (a, b, c)
    Vec3<T> p_cam{Vec3<T>::Zero()};
    T depth{0};
    T radius{0};
};

template <typename T> Eigen::Matrix<T, 2, 3> projection_jacobian(const Camera &cam, const Vec3<T> &p) {
    const T fx = T(cam.fx), fy = T(cam.fy);
    const T iz = T(1) / p.z();
    Eigen::Matrix<T, 2, 3> j;
    j << fx * iz, T(0), -fx * p.x() * iz * iz, T(0), fy * iz, -fy * p.y() * iz * iz;
    return j;
}

/// EWA projection. Returns nullopt when the splat is culled; `reason` reports why.
template <typename T>
std::optional<SplatProjection<T>> project_splat(const Splat<T> &splat, const Camera &cam,
                                                CullReason *reason = nullptr) {
    auto culled = [&](CullReason r) -> std::optional<SplatProjection<T>> {
        if (reason) *reason = r;
        return std::nullopt;
    };
    const Mat3<T> w = cam.rotation_w2c.cast<T>();
    SplatProjection<T> out;
    out.p_cam = w * splat.position + cam.translation_w2c.cast<T>();
    const T z = out.p_cam.z();
    if (!(z > T(cam.near) && z < T(cam.far))) return culled(CullReason::depth);

    out.mean2d = Vec2<T>(T(cam.fx) * out.p_cam.x() / z + T(cam.cx),
                         T(cam.fy) * out.p_cam.y() / z + T(cam.cy));
    const T gx = T(0.5 * (kGuardBand - 1.0) * cam.width), gy = T(0.5 * (kGuardBand - 1.0) * cam.height);
    if (out.mean2d.x() < -gx || out.mean2d.x() > T(cam.width) + gx || out.mean2d.y() < -gy ||
        out.mean2d.y() > T(cam.height) + gy)
        return culled(CullReason::frustum);

    const Eigen::Matrix<T, 2, 3> t = projection_jacobian(cam, out.p_cam) * w;
    const Mat2<T> cov = t * build_covariance(splat.log_scale, splat.rotation).matrix() * t.transpose();
    const T a = cov(0, 0) + T(kLowPassDilation), b = T(0.5) * (cov(0, 1) + cov(1, 0)),
            c = cov(1, 1) + T(kLowPassDilation);
    const T det = a * c - b * b;
    if (!(det > T(0))) return culled(CullReason::degenerate);
    out.cov2d = Vec3<T>(a, b, c);
    out.conic = Vec3<T>(c / det, -b / det, a / det);
    const T mid = T(0.5) * (a + c), half = T(0.5) * (a - c);
    const T lmax = mid + std::sqrt(half * half + b * b);
    out.radius = T(3) * std::sqrt(lmax);
    out.depth  = z;
    if (reason) *reason = CullReason::none;
    return out;
}

template <typename T> struct ProjectionGrad {
    Vec3<T> position{Vec3<T>::Zero()};
    Vec3<T> log_scale{Vec3<T>::Zero()};
    Vec4<T> rotation{Vec4<T>::Zero()};
};

/// Backward of project_splat for a non-culled splat. `grad_conic` is the gradient with respect to
/// the stored (a, b, c) entries, where b enters the quadratic form as 2*b*dx*dy.
template <typename T>
ProjectionGrad<T> project_splat_backward(const Splat<T> &splat, const Camera &cam,
                                         const SplatProjection<T> &proj, const Vec2<T> &grad_mean2d,
                                         const Vec3<T> &grad_conic) {
    const Mat3<T> w = cam.rotation_w2c.cast<T>();
    const Vec3<T> &p = proj.p_cam;
    const T fx = T(cam.fx), fy = T(cam.fy);
    const T iz = T(1) / p.z(), iz2 = iz * iz, iz3 = iz2 * iz;

    // conic = A^-1 with A the regularized 2D covariance.
    Mat2<T> con;
    con << proj.conic[0], proj.conic[1], proj.conic[1], proj.conic[2];
    Mat2<T> g_con;
    g_con << grad_conic[0], T(0.5) * grad_conic[1], T(0.5) * grad_conic[1], grad_conic[2];
    const Mat2<T> g_a = -con * g_con * con;

    const Eigen::Matrix<T, 2, 3> j = projection_jacobian(cam, p);
    const Eigen::Matrix<T, 2, 3> t = j * w;
    const Mat3<T> sigma = build_covariance(splat.log_scale, splat.rotation).matrix();

    const Mat3<T> g_sigma = t.transpose() * g_a * t;
    const Eigen::Matrix<T, 2, 3> g_t = (g_a + g_a.transpose()) * t * sigma;
    const Eigen::Matrix<T, 2, 3> g_j = g_t * w.transpose();

    Vec3<T> g_p;
    g_p.x() = grad_mean2d.x() * fx * iz - g_j(0, 2) * fx * iz2;
    g_p.y() = grad_mean2d.y() * fy * iz - g_j(1, 2) * fy * iz2;
    g_p.z() = -grad_mean2d.x() * fx * p.x() * iz2 - grad_mean2d.y() * fy * p.y() * iz2 -
              g_j(0, 0) * fx * iz2 + g_j(0, 2) * T(2) * fx * p.x() * iz3 - g_j(1, 1) * fy * iz2 +
              g_j(1, 2) * T(2) * fy * p.y() * iz3;

    ProjectionGrad<T> out;
    out.position = w.transpose() * g_p;
    const CovarianceGrad<T> cg = build_covariance_backward(splat.log_scale, splat.rotation, g_sigma);
    out.log_scale = cg.log_scale;
    out.rotation  = cg.rotation;
    return out;
}

// ---------------------------------------------------------------------------
// Contraction
// ---------------------------------------------------------------------------

/// Identity inside the unit ball, (2 - 1/|x|) x/|x| outside. Output norm < 2.
template <typename T> Vec3<T> contract(const Vec3<T> &x) {
    const T n = x.norm();
    if (n <= T(1)) return x;
    return (T(2) - T(1) / n) * (x / n);
}

/// Jacobian d contract / dx (symmetric).
template <typename T> Mat3<T> contract_jacobian(const Vec3<T> &x) {
    const T n = x.norm();
    if (n <= T(1)) return Mat3<T>::Identity();
    const T n2 = n * n, n3 = n2 * n, n4 = n2 * n2;
    return (T(2) / n - T(1) / n2) * Mat3<T>::Identity() + (T(2) / n4 - T(2) / n3) * (x * x.transpose());
}

} // namespace hogs
