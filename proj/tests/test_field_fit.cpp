// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Slow checks: fit the field to small synthetic scenes and compare against the ray tracer.
//
#include "support.hpp"

using namespace hogs;
using V3 = Eigen::Vector3d;

namespace {

SyntheticSceneSpec base_spec() {
    SyntheticSceneSpec s;
    s.width = s.height = 40;
    s.hfov_deg = 55;
    s.supersample = 2;
    s.timesteps = 8;
    s.orbit_radius = 3.2;
    s.target = V3(0, -0.2, 0);
    return s;
}

SyntheticSceneSpec diffuse_spec() {
    auto s = base_spec();
    Primitive box;
    box.kind = Primitive::Kind::box;
    box.center = V3(-0.6, 0, 0.2);
    box.half_size = V3::Constant(0.4);
    box.color = V3(0.85, 0.25, 0.2);
    Primitive ball;
    ball.center = V3(0.6, 0.1, -0.2);
    ball.color = V3(0.2, 0.35, 0.85);
    Primitive floor;
    floor.kind = Primitive::Kind::box;
    floor.center = V3(0, -0.55, 0);
    floor.half_size = V3(1.3, 0.15, 1.1);
    floor.color = V3(0.3, 0.7, 0.3);
    s.primitives = {box, ball, floor};
    return s;
}

SyntheticSceneSpec specular_spec() {
    auto s = base_spec();
    s.start_deg = -90;
    s.end_deg = 90;
    Primitive ball;
    ball.radius = 0.8;
    ball.color = V3(0.3, 0.3, 0.35);
    ball.specular = 0.9;
    ball.shininess = 6;
    s.primitives = {ball};
    return s;
}

TrainingData make_data(const SyntheticSceneSpec &spec) {
    Dataset ds;
    std::vector<Image<float>> imgs;
    const auto cams = synthetic_cameras(spec);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        ds.frames.push_back({int(i), {}, cams[i]});
        imgs.push_back(trace_image(spec, cams[i]));
    }
    ds.compute_extent();
    return TrainingData(std::move(ds), std::move(imgs));
}

/// Field-only optimization for `iters` steps.
std::unique_ptr<Trainer> fit_field(const TrainingData &data, int iters) {
    TrainConfig c;
    c.total_iterations = iters;
    c.warmup_iterations = iters;
    c.rays_per_batch = 256;
    c.field_samples = 48;
    c.color_weight_eps = 1e-4;
    c.field.levels = 8;
    c.field.log2_table_size = 12;
    c.field.max_resolution = 256;
    c.harvest = false;
    c.warp_enabled = false;
    c.densify.harvest_iterations.clear();
    c.seed = 11;
    auto t = std::make_unique<Trainer>(data, c);
    for (int i = 0; i < iters; ++i) t->step();
    return t;
}

struct Fitted {
    SyntheticSceneSpec spec;
    TrainingData data;
    std::unique_ptr<Trainer> trainer;
};

const Fitted &diffuse_fit() {
    static const Fitted f = [] {
        Fitted r{diffuse_spec(), {}, nullptr};
        r.data = make_data(r.spec);
        r.trainer = fit_field(r.data, 2500);
        return r;
    }();
    return f;
}

const Fitted &specular_fit() {
    static const Fitted f = [] {
        Fitted r{specular_spec(), {}, nullptr};
        r.data = make_data(r.spec);
        r.trainer = fit_field(r.data, 2500);
        return r;
    }();
    return f;
}

} // namespace

TEST(FieldFit, OverfitsSingleVoxelDensity) {
    FieldConfig cfg;
    cfg.levels = 6;
    cfg.log2_table_size = 12;
    cfg.max_resolution = 128;
    FieldParams<float> p(cfg, SceneFrame{});
    Rng rng(1);
    p.initialize(rng);
    std::vector<float> m(p.size(), 0.f), v(p.size(), 0.f);
    const V3 lo = V3::Constant(0.1), hi = V3::Constant(0.3);
    auto inside = [&](const Eigen::Vector3f &x) {
        return (x.cast<double>().array() >= lo.array()).all() && (x.cast<double>().array() <= hi.array()).all();
    };
    std::uniform_real_distribution<float> u(-0.5f, 0.7f), in(0.1f, 0.3f);
    for (int step = 1; step <= 1500; ++step) {
        std::vector<Eigen::Vector3f> x(512);
        for (std::size_t i = 0; i < x.size(); ++i)
            x[i] = i % 4 == 0 ? Eigen::Vector3f(in(rng), in(rng), in(rng)) : Eigen::Vector3f(u(rng), u(rng), u(rng));
        FieldBatch<float> b;
        b.forward_density(p, x);
        std::vector<float> gs(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) gs[i] = 2.f * (b.sigma[i] - (inside(x[i]) ? 50.f : 0.f)) / 512.f;
        std::vector<float> g(p.size(), 0.f);
        b.backward(p, gs, {}, g);
        adam_update<float>(p.values, g, m, v, 1e-2, step);
    }
    double sin = 0, sout = 0;
    int nin = 0, nout = 0;
    Rng probe(2);
    for (int i = 0; i < 4000; ++i) {
        const Eigen::Vector3f x(u(probe), u(probe), u(probe));
        // stay one fine cell away from the faces
        const auto d = x.cast<double>();
        const bool core = ((d.array() >= lo.array() + 0.02).all() && (d.array() <= hi.array() - 0.02).all());
        const bool far = !((d.array() >= lo.array() - 0.05).all() && (d.array() <= hi.array() + 0.05).all());
        if (!core && !far) continue;
        const double s = query_density(p, x);
        (core ? sin : sout) += s;
        ++(core ? nin : nout);
    }
    for (int i = 0; i < 500; ++i) {
        sin += query_density(p, Eigen::Vector3f(in(probe) * 0.8f + 0.04f, in(probe) * 0.8f + 0.04f,
                                                in(probe) * 0.8f + 0.04f));
        ++nin;
    }
    EXPECT_GE((sin / nin) / (sout / nout), 100.0) << "inside " << sin / nin << " outside " << sout / nout;
}

TEST(FieldFit, VirtualViewMatchesRayTracer) {
    const auto &f = diffuse_fit();
    const NeuralField<float> nf(f.trainer->state().field);
    Rng rng(3);
    int checked = 0;
    for (std::size_t i : f.data.train) {
        if (i % 5 != 1) continue;
        const auto v = make_virtual_view(nf, f.data.dataset.frames[i].camera, rng);
        if (!v) continue;
        const Image<float> oracle = trace_image(f.spec, v->camera);
        EXPECT_GE(masked_psnr(v->target, oracle, v->confidence_mask), 20.0) << "frame " << i;
        ++checked;
    }
    EXPECT_GE(checked, 3);
}

TEST(FieldFit, ZeroAngleVirtualViewIsFieldRender) {
    const auto &f = diffuse_fit();
    const NeuralField<float> nf(f.trainer->state().field);
    Rng rng(4);
    const V3 zero = V3::Zero();
    const Camera &cam = f.data.dataset.frames[f.data.train[0]].camera;
    const auto v = make_virtual_view(nf, cam, rng, WarpConfig{}, 0, &zero);
    ASSERT_TRUE(v);
    FieldImageOptions<float> o;
    o.stride = 2;
    EXPECT_EQ(v->target.data, render_field_image(nf, cam, o).rgb.data);
}

TEST(FieldFit, DiffuseSurfacesHaveViewIndependentColor) {
    auto &f = const_cast<Fitted &>(diffuse_fit());
    const auto &field = f.trainer->state().field;
    DensifyConfig dc;
    Rng rng(5);
    const auto cams = f.data.train_cameras();
    const auto hr = harvest_points(NeuralField<float>(field), std::span<const Camera>(cams), dc, rng);
    ASSERT_GT(hr.splats.size(), 50u);
    double total = 0;
    for (const auto &s : hr.splats) {
        const Eigen::Vector3f x = s.position;
        std::vector<Eigen::Vector3f> colors;
        for (const auto &c : cams) {
            const Eigen::Vector3f d = (x - c.center().cast<float>()).normalized();
            colors.push_back(query_color(field, x, d));
        }
        Eigen::Vector3f mean = Eigen::Vector3f::Zero();
        for (const auto &c : colors) mean += c;
        mean /= float(colors.size());
        double var = 0;
        for (const auto &c : colors) var += (c - mean).squaredNorm() / 3.0;
        total += var / double(colors.size());
    }
    EXPECT_LE(total / double(hr.splats.size()), 1e-2);
}

TEST(FieldFit, SpecularSurfacesChangeColorWithView) {
    const auto &f = specular_fit();
    const auto &field = f.trainer->state().field;
    const auto cams = f.data.train_cameras();
    DensifyConfig dc;
    dc.harvest_stride = 2;
    Rng rng(6);
    const auto hr = harvest_points(NeuralField<float>(field), std::span<const Camera>(cams), dc, rng);
    ASSERT_GT(hr.splats.size(), 20u);
    // per point: the two cameras that see it from the most different directions
    double diff = 0;
    int used = 0;
    for (const auto &s : hr.splats) {
        const V3 x = s.position.cast<double>(), n = x.normalized();
        const Camera *best_a = nullptr, *best_b = nullptr;
        double best_cos = std::cos(60.0 * kPi / 180.0);
        for (const auto &ca : cams)
            for (const auto &cb : cams) {
                const V3 va = (ca.center() - x).normalized(), vb = (cb.center() - x).normalized();
                if (n.dot(va) < 0.2 || n.dot(vb) < 0.2 || va.dot(vb) >= best_cos) continue;
                best_cos = va.dot(vb);
                best_a = &ca;
                best_b = &cb;
            }
        if (!best_a) continue;
        const std::vector<Splat<float>> one{s};
        const auto ca = splat_colors<float>(field, one, *best_a, ColorMode::field_only);
        const auto cb = splat_colors<float>(field, one, *best_b, ColorMode::field_only);
        diff += (ca[0] - cb[0]).cwiseAbs().maxCoeff();
        ++used;
    }
    ASSERT_GT(used, 10);
    EXPECT_GT(diff / used, 0.05);
}
