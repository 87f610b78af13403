// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit tests.
//
#pragma once

#include <hogs/hogs.hpp>

#include <gtest/gtest.h>

#include <functional>

#include <unistd.h>

namespace hogs::test {

/// Camera at the origin looking down +z.
inline Camera axis_camera(int w = 32, int h = 32, double f = 30.0) {
    Camera c;
    c.width = w;
    c.height = h;
    c.fx = c.fy = f;
    c.cx = 0.5 * w;
    c.cy = 0.5 * h;
    c.near = 0.1;
    c.far = 50;
    c.camera_id = "test";
    return c;
}

inline Eigen::Vector4d random_unit_quaternion(Rng &rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Vector4d q(n(rng), n(rng), n(rng), n(rng));
    return q.normalized();
}

/// Splats in front of an axis camera, well inside the frustum and of moderate screen size.
inline std::vector<Splat<double>> random_splats(Rng &rng, int n, double depth_lo = 2.5, double depth_hi = 4.5) {
    std::uniform_real_distribution<double> u(-1.0, 1.0), z(depth_lo, depth_hi), ls(-2.3, -1.6), op(-1.0, 2.0),
        col(-1.5, 1.5);
    std::vector<Splat<double>> out;
    for (int i = 0; i < n; ++i) {
        Splat<double> s;
        const double d = z(rng);
        s.position = Eigen::Vector3d(0.3 * d * u(rng), 0.3 * d * u(rng), d);
        s.log_scale = Eigen::Vector3d(ls(rng), ls(rng), ls(rng));
        s.rotation = random_unit_quaternion(rng);
        s.opacity_logit = op(rng);
        s.base_color_logit = Eigen::Vector3d(col(rng), col(rng), col(rng));
        out.push_back(s);
    }
    return out;
}

/// Central difference of f at x along one coordinate.
inline double central_difference(const std::function<double(double)> &f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2 * h);
}

/// |a - b| <= max(abs_floor, rel * max(|a|, |b|)).
inline ::testing::AssertionResult close_rel(double analytic, double numeric, double rel, double abs_floor) {
    const double tol = std::max(abs_floor, rel * std::max(std::abs(analytic), std::abs(numeric)));
    if (std::abs(analytic - numeric) <= tol) return ::testing::AssertionSuccess();
    return ::testing::AssertionFailure() << "analytic " << analytic << " vs numeric " << numeric << " (tol " << tol
                                         << ")";
}

/// Pointers to the 14 scalar parameters of a splat, in file order.
template <typename T> std::array<T *, 14> splat_scalars(Splat<T> &s) {
    return {&s.position[0],  &s.position[1],  &s.position[2],  &s.log_scale[0],        &s.log_scale[1],
            &s.log_scale[2], &s.rotation[0],  &s.rotation[1],  &s.rotation[2],        &s.rotation[3],
            &s.opacity_logit, &s.base_color_logit[0], &s.base_color_logit[1], &s.base_color_logit[2]};
}

/// Temporary directory removed at scope exit.
class TempDir {
  public:
    explicit TempDir(const std::string &tag) {
        static int counter = 0;
        path_ = fs::temp_directory_path() /
                ("hogs_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    const fs::path &path() const { return path_; }
    fs::path operator/(const std::string &s) const { return path_ / s; }

  private:
    fs::path path_;
};

} // namespace hogs::test
