// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
#include "support.hpp"

using namespace hogs;
using V3 = Eigen::Vector3d;

namespace {

Camera front_camera() { return look_at(V3(0.3, 0.4, -3.0), V3::Zero(), 40, 32, 50.0, 0.5, 6.0, "front"); }

stub::BoxField box() {
    stub::BoxField f;
    f.lo = V3::Constant(-0.6);
    f.hi = V3::Constant(0.6);
    return f;
}

} // namespace

TEST(Perturb, KeepsCenterAndOrthonormality) {
    const Camera cam = front_camera();
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const Camera p = perturb_pose(cam, rng);
        EXPECT_LT((p.center() - cam.center()).norm(), 1e-12);
        EXPECT_LT(p.orthonormality_error(), 1e-9);
        EXPECT_NEAR(p.rotation_w2c.determinant(), 1.0, 1e-9);
        EXPECT_EQ(p.fx, cam.fx);
        EXPECT_EQ(p.width, cam.width);
    }
}

TEST(Perturb, AngleDistribution) {
    const Camera cam = front_camera();
    Rng rng(2);
    double sum = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        V3 a;
        perturb_pose(cam, rng, 10.0, &a);
        EXPECT_LE(a.cwiseAbs().maxCoeff(), 10.0);
        sum += a.cwiseAbs().sum();
    }
    EXPECT_NEAR(sum / (3.0 * n), 5.0, 0.25);
}

TEST(Perturb, RotationMatchesAngles) {
    const Camera cam = front_camera();
    Rng rng(3);
    V3 a;
    const Camera p = perturb_pose(cam, rng, 10.0, &a);
    const Eigen::Matrix3d local = p.rotation_w2c * cam.rotation_w2c.transpose();
    EXPECT_LT((local - rotation_xyz_deg(a)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((rotation_xyz_deg(V3(90, 0, 0)) * V3::UnitY() - V3::UnitZ()).norm(), 1e-12);
}

TEST(WarpPoint, IdentityProjects) {
    Eigen::Matrix3d k;
    k << 10, 0, 5, 0, 20, 6, 0, 0, 1;
    const auto p = warp_point(V3(1, 2, 4), k, Eigen::Matrix3d::Identity(), V3::Zero());
    ASSERT_TRUE(p);
    EXPECT_NEAR(p->x(), 10 * 0.25 + 5, 1e-12);
    EXPECT_NEAR(p->y(), 20 * 0.5 + 6, 1e-12);
}

TEST(WarpPoint, DepthDoublingHalvesOffset) {
    Eigen::Matrix3d k;
    k << 30, 0, 16, 0, 30, 16, 0, 0, 1;
    const auto on = warp_point(V3(0, 0, 2), k, Eigen::Matrix3d::Identity(), V3(0, 0, 2));
    ASSERT_TRUE(on);
    EXPECT_NEAR(on->x(), 16, 1e-12);
    EXPECT_NEAR(on->y(), 16, 1e-12);
    const auto near = warp_point(V3(0.4, -0.2, 2), k, Eigen::Matrix3d::Identity(), V3::Zero());
    const auto far = warp_point(V3(0.4, -0.2, 2), k, Eigen::Matrix3d::Identity(), V3(0, 0, 2));
    EXPECT_NEAR(far->x() - 16, 0.5 * (near->x() - 16), 1e-12);
    EXPECT_NEAR(far->y() - 16, 0.5 * (near->y() - 16), 1e-12);
}

TEST(WarpPoint, BehindCameraIsEmpty) {
    const Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
    EXPECT_FALSE(warp_point(V3(0, 0, 1), k, Eigen::Matrix3d::Identity(), V3(0, 0, -2)));
    EXPECT_FALSE(warp_point(V3(0, 0, 0), k, Eigen::Matrix3d::Identity(), V3::Zero()));
}

TEST(VirtualView, ZeroAngleMatchesFieldRender) {
    const auto f = box();
    const Camera cam = front_camera();
    Rng rng(4);
    const V3 zero = V3::Zero();
    WarpConfig cfg;
    const auto v = make_virtual_view(f, cam, rng, cfg, 7, &zero);
    ASSERT_TRUE(v);
    FieldImageOptions<double> o;
    o.stride = cfg.stride;
    o.n_samples = cfg.n_samples;
    const auto img = render_field_image(f, cam, o);
    ASSERT_EQ(v->target.size(), img.rgb.size());
    for (std::size_t i = 0; i < img.rgb.size(); ++i) EXPECT_EQ(v->target.data[i], float(img.rgb.data[i]));
    for (std::size_t i = 0; i < img.transmittance.size(); ++i)
        EXPECT_EQ(v->confidence_mask.data[i], img.transmittance.data[i] < 0.5 ? 1 : 0);
    EXPECT_EQ(v->camera.width, 20);
    EXPECT_EQ(v->camera.height, 16);
    EXPECT_EQ(v->source_camera_id, "front");
    EXPECT_EQ(v->iteration_created, 7);
    EXPECT_GT(v->mask_fraction(), 0.05);
    EXPECT_LT(v->mask_fraction(), 1.0);
}

TEST(VirtualView, EmptyFieldIsRejected) {
    stub::ConstantField f{0.0};
    Rng rng(5);
    EXPECT_FALSE(make_virtual_view(f, front_camera(), rng));
}

TEST(VirtualView, LowCoverageIsRejected) {
    auto f = box();
    f.lo = V3::Constant(-0.15);
    f.hi = V3::Constant(0.15);
    Rng rng(6);
    const V3 zero = V3::Zero();
    EXPECT_FALSE(make_virtual_view(f, front_camera(), rng, WarpConfig{}, 0, &zero));
    WarpConfig loose;
    loose.min_mask_fraction = 1e-4;
    EXPECT_TRUE(make_virtual_view(f, front_camera(), rng, loose, 0, &zero));
}

TEST(VirtualView, MaskedPixelsSeeTheBox) {
    const auto f = box();
    Rng rng(7);
    const auto v = make_virtual_view(f, front_camera(), rng);
    ASSERT_TRUE(v);
    for (int y = 0; y < v->target.height; ++y)
        for (int x = 0; x < v->target.width; ++x) {
            if (!v->confidence_mask(x, y)) continue;
            // alpha >= 0.5 over a red box on white: red stays high, green and blue drop
            EXPECT_GT(v->target(x, y, 0), v->target(x, y, 1));
        }
}
