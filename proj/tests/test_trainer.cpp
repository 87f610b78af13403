// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
#include "support.hpp"

using namespace hogs;
using V3 = Eigen::Vector3d;

namespace {

/// Small in-memory scene: a red box and a blue sphere seen from an orbit.
const TrainingData &scene() {
    static const TrainingData data = [] {
        SyntheticSceneSpec s;
        s.width = s.height = 32;
        s.supersample = 2;
        s.timesteps = 4;
        s.orbit_radius = 3.2;
        Primitive box;
        box.kind = Primitive::Kind::box;
        box.center = V3(-0.5, 0, 0);
        box.half_size = V3::Constant(0.4);
        box.color = V3(0.85, 0.25, 0.2);
        Primitive ball;
        ball.center = V3(0.6, 0, 0);
        ball.color = V3(0.2, 0.35, 0.85);
        s.primitives = {box, ball};
        Dataset ds;
        std::vector<Image<float>> imgs;
        const auto cams = synthetic_cameras(s);
        for (std::size_t i = 0; i < cams.size(); ++i) {
            ds.frames.push_back({int(i), {}, cams[i]});
            imgs.push_back(trace_image(s, cams[i]));
        }
        ds.compute_extent();
        return TrainingData(std::move(ds), std::move(imgs));
    }();
    return data;
}

TrainConfig small_config() {
    TrainConfig c;
    c.total_iterations = 200;
    c.warmup_iterations = 0;
    c.rays_per_batch = 64;
    c.field_samples = 16;
    c.field.levels = 4;
    c.field.log2_table_size = 10;
    c.field.max_resolution = 64;
    c.field.density_hidden = c.field.color_hidden = 16;
    c.densify.harvest_iterations.clear();
    c.harvest = false;
    c.warp_enabled = false;
    c.random_init = 60;
    c.seed = 3;
    return c;
}

} // namespace

TEST(Trainer, ZeroLearningRatesLeaveParametersBitIdentical) {
    auto cfg = small_config();
    cfg.lr = SplatLearningRates{0, 0, 0, 0, 0, 0};
    cfg.field_lr = 0;
    Trainer t(scene(), cfg);
    const auto splats = t.state().splats;
    const auto field = t.state().field.values;
    for (int i = 0; i < 5; ++i) t.step();
    EXPECT_EQ(t.state().splats, splats);
    EXPECT_EQ(t.state().field.values, field);
    EXPECT_EQ(t.state().iteration, 5);
}

TEST(Trainer, TotalLossDecomposes) {
    auto cfg = small_config();
    cfg.lambda_field = 0.3;
    cfg.warp_enabled = true;
    cfg.virtual_interval = 2;
    Trainer t(scene(), cfg);
    for (int i = 0; i < 6; ++i) {
        const auto r = t.step();
        EXPECT_EQ(r.total, r.l_g + 0.3 * r.l_mse + cfg.virtual_weight * r.l_virtual);
        EXPECT_GT(r.l_g, 0.0);
        EXPECT_GT(r.l_mse, 0.0);
    }
    cfg.lambda_field = 0;
    Trainer u(scene(), cfg);
    EXPECT_EQ(u.step().l_mse, 0.0);
}

TEST(Trainer, DensityOutputRowUntouchedWithoutFieldLoss) {
    auto cfg = small_config();
    cfg.lambda_field = 0;
    Trainer t(scene(), cfg);
    const auto before = t.state().field.values;
    for (int i = 0; i < 10; ++i) t.step();
    const auto &after = t.state().field.values;
    for (std::size_t i : t.state().field.density_output_indices()) EXPECT_EQ(after[i], before[i]) << i;
    EXPECT_NE(after, before); // the color head still learns from the splat loss
}

TEST(Trainer, WarmupTrainsFieldOnly) {
    auto cfg = small_config();
    cfg.warmup_iterations = 300;
    cfg.total_iterations = 400;
    cfg.field_lr = 1e-2;
    cfg.rays_per_batch = 128;
    Trainer t(scene(), cfg);
    const auto splats = t.state().splats;
    std::vector<double> l;
    for (int i = 0; i < 300; ++i) {
        const auto r = t.step();
        EXPECT_TRUE(r.warmup);
        EXPECT_EQ(r.l_g, 0.0);
        l.push_back(r.l_mse);
    }
    EXPECT_EQ(t.state().splats, splats);
    EXPECT_EQ(t.state().splat_steps, 0);
    auto window = [&](std::size_t b) { return std::accumulate(l.begin() + b, l.begin() + b + 50, 0.0) / 50; };
    for (std::size_t b = 50; b + 50 <= l.size(); b += 50) EXPECT_LT(window(b), window(b - 50)) << b;
    EXPECT_FALSE(t.step().warmup);
}

TEST(Trainer, DeterministicForSeed) {
    auto cfg = small_config();
    cfg.warmup_iterations = 5;
    cfg.harvest = true;
    cfg.densify.harvest_iterations = {10};
    cfg.densify.densify_interval = 7;
    cfg.densify.grad_threshold = 1e-5;
    cfg.warp_enabled = true;
    cfg.virtual_interval = 10;
    auto run = [&] {
        Trainer t(scene(), cfg);
        std::vector<std::string> log;
        for (int i = 0; i < 25; ++i) log.push_back(t.step().to_json().dump());
        return std::make_pair(log, t.state().splats);
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(Trainer, MomentsFollowDensification) {
    auto cfg = small_config();
    cfg.densify.densify_interval = 5;
    cfg.densify.grad_threshold = 1e-6;
    Trainer t(scene(), cfg);
    std::vector<nlohmann::json> events;
    t.set_event_sink([&](const nlohmann::json &j) { events.push_back(j); });
    const std::size_t n0 = t.state().splats.size();
    for (int i = 0; i < 10; ++i) t.step();
    EXPECT_NO_THROW(t.state().check_shapes());
    EXPECT_EQ(t.state().splat_moments.m.size(), t.state().splats.size());
    ASSERT_EQ(events.size(), 2u);
    EXPECT_EQ(events[0]["op"], "densify");
    EXPECT_NE(t.state().splats.size(), n0);
}

TEST(Trainer, HarvestAddsSplatsWithFieldColor) {
    auto cfg = small_config();
    cfg.random_init = 0;
    cfg.densify.tau = 0.1; // a fresh field has density softplus(-1) everywhere
    Trainer t(scene(), cfg);
    const auto rep = t.harvest_now();
    const auto &s = t.state().splats;
    ASSERT_GT(s.size(), 0u);
    EXPECT_EQ(rep.added, s.size());
    EXPECT_NO_THROW(t.state().check_shapes());
    // effective residual color equals the field color along the harvest ray
    const Camera &cam = scene().dataset.frames[1].camera;
    const auto colors = splat_colors<float>(t.state().field, s, cam);
    for (const auto &c : colors) EXPECT_LT((c - Eigen::Vector3f::Constant(0.5f)).cwiseAbs().maxCoeff(), 1e-3f);
}

TEST(Trainer, ZeroMaskGivesZeroVirtualLoss) {
    auto cfg = small_config();
    cfg.warp_enabled = true;
    cfg.virtual_interval = 1000;
    cfg.virtual_every = 1;
    Trainer t(scene(), cfg);
    VirtualView v;
    v.camera = scene().dataset.frames[1].camera.subsampled(2);
    v.target = Image<float>(v.camera.width, v.camera.height, 3, 0.0f);
    v.confidence_mask = Image<std::uint8_t>(v.camera.width, v.camera.height, 1, 0);
    t.mutable_state().virtual_views = {v};
    const auto r = t.step();
    EXPECT_EQ(r.l_virtual, 0.0);
    t.mutable_state().virtual_views[0].confidence_mask.data.assign(v.confidence_mask.size(), 1);
    EXPECT_GT(t.step().l_virtual, 0.0);
}

TEST(Trainer, RejectsWarmupPastFirstHarvest) {
    auto cfg = small_config();
    cfg.harvest = true;
    cfg.warmup_iterations = 50;
    cfg.densify.harvest_iterations = {40};
    EXPECT_THROW(Trainer(scene(), cfg), ContractError);
}

TEST(Trainer, RandomInitInsideHalfRadiusBall) {
    const auto cfg = small_config();
    Trainer t(scene(), cfg);
    ASSERT_EQ(t.state().splats.size(), 60u);
    for (const auto &s : t.state().splats)
        EXPECT_LE((s.position.cast<double>() - scene().dataset.center).norm(), 0.5 * scene().dataset.scene_radius + 1e-5);
}

TEST(Trainer, EvaluateQuantizesAndReports) {
    Trainer t(scene(), small_config());
    const auto rep = t.evaluate_test();
    EXPECT_EQ(rep.views.size(), scene().test.size());
    EXPECT_GT(rep.mean_psnr, 0.0);
    EXPECT_LE(rep.mean_ssim, 1.0);
}
