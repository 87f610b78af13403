// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
#include "support.hpp"

using namespace hogs;
using hogs::test::close_rel;
using V3 = Eigen::Vector3d;

namespace {

FieldConfig tiny_config() {
    FieldConfig c;
    c.levels = 3;
    c.log2_table_size = 7;
    c.base_resolution = 2;
    c.max_resolution = 12;
    c.density_hidden = 8;
    c.geometry_features = 4;
    c.color_hidden = 8;
    return c;
}

/// Every weight ~U(-a, a): no zero rows, so all paths carry gradient.
FieldParams<double> random_field(std::uint64_t seed, double a = 0.5) {
    FieldParams<double> p(tiny_config(), SceneFrame{V3(0.1, -0.2, 0.3), 1.5});
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-a, a);
    for (auto &v : p.values) v = u(rng);
    return p;
}

std::vector<V3> random_points(Rng &rng, int n, double extent) {
    std::uniform_real_distribution<double> u(-extent, extent);
    std::vector<V3> x(n);
    for (auto &p : x) p = V3(u(rng), u(rng), u(rng));
    return x;
}

std::vector<V3> random_dirs(Rng &rng, int n) {
    std::normal_distribution<double> g(0, 1);
    std::vector<V3> d(n);
    for (auto &v : d) v = V3(g(rng), g(rng), g(rng)).normalized();
    return d;
}

/// Points of a Fibonacci lattice on the unit sphere.
std::vector<V3> fibonacci_sphere(int n) {
    std::vector<V3> d(n);
    const double golden = kPi * (3 - std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
        const double z = 1 - (2 * i + 1.0) / n, r = std::sqrt(1 - z * z);
        d[i] = V3(r * std::cos(golden * i), r * std::sin(golden * i), z);
    }
    return d;
}

Ray<double> z_ray(double near, double far) { return {V3::Zero(), V3(0, 0, 1), near, far}; }

} // namespace

TEST(FieldParams, LayoutAndResolutions) {
    FieldParams<double> p(FieldConfig{}, SceneFrame{});
    EXPECT_EQ(p.level_resolution.front(), 16);
    EXPECT_EQ(p.level_resolution.back(), 2048);
    EXPECT_EQ(p.config.encoding_dim(), 32);
    EXPECT_EQ(p.config.sh_dim(), 16);
    for (std::size_t l = 0; l < p.level_size.size(); ++l) EXPECT_LE(p.level_size[l], 1u << 19);
    EXPECT_TRUE(p.level_dense.front());
    EXPECT_FALSE(p.level_dense.back());
    EXPECT_EQ(p.density_output_indices().size(), std::size_t(p.config.density_hidden + 1));
}

TEST(FieldParams, InvalidConfigThrows) {
    FieldConfig c;
    c.sh_degree = 5;
    EXPECT_THROW((FieldParams<double>(c, SceneFrame{})), ContractError);
    EXPECT_THROW((FieldParams<double>(FieldConfig{}, SceneFrame{V3::Zero(), 0.0})), ContractError);
}

TEST(Field, FreshFieldIsConstant) {
    FieldParams<double> p(tiny_config(), SceneFrame{});
    Rng rng(1);
    p.initialize(rng);
    Rng q(2);
    const auto x = random_points(q, 50, 5.0);
    const auto d = random_dirs(q, 50);
    for (int i = 0; i < 50; ++i) {
        EXPECT_NEAR(query_density(p, x[i]), softplus(-1.0), 1e-15);
        EXPECT_EQ(query_color(p, x[i], d[i]), V3::Constant(0.5));
    }
}

TEST(Field, InitializationIsDeterministic) {
    FieldParams<float> a(tiny_config(), SceneFrame{}), b(tiny_config(), SceneFrame{});
    Rng r1(9), r2(9);
    a.initialize(r1);
    b.initialize(r2);
    EXPECT_EQ(a.values, b.values);
}

TEST(Field, ColorsInUnitRangeAndViewDependent) {
    const auto p = random_field(3, 1.0);
    Rng rng(4);
    const auto x = random_points(rng, 40, 2.0);
    double max_diff = 0;
    for (const auto &xi : x) {
        const V3 a = query_color(p, xi, V3(0, 0, 1)), b = query_color(p, xi, V3(0, 0, -1));
        EXPECT_TRUE((a.array() > 0).all() && (a.array() < 1).all());
        max_diff = std::max(max_diff, (a - b).cwiseAbs().maxCoeff());
    }
    EXPECT_GT(max_diff, 1e-3);
}

TEST(Field, DensityContinuousAcrossCells) {
    const auto p = random_field(5);
    // walk a line at fine steps: increments shrink with the step
    for (double t = -1.0; t < 1.0; t += 0.013) {
        const V3 x(t, 0.37 * t, -0.21);
        const double d = std::abs(query_density(p, x) - query_density(p, V3(x + V3(1e-7, 0, 0))));
        EXPECT_LT(d, 1e-3);
    }
}

TEST(Sh, OrthonormalOverSphere) {
    const auto d = fibonacci_sphere(40000);
    Eigen::Matrix<double, 16, 16> gram = Eigen::Matrix<double, 16, 16>::Zero();
    for (const auto &v : d) {
        const auto y = sh_basis(v);
        const Eigen::Map<const Eigen::Matrix<double, 16, 1>> m(y.data());
        gram += m * m.transpose();
    }
    gram *= 4 * kPi / double(d.size());
    EXPECT_LT((gram - Eigen::Matrix<double, 16, 16>::Identity()).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Sh, BackwardMatchesFiniteDifferences) {
    Rng rng(6);
    std::normal_distribution<double> g(0, 1);
    for (int trial = 0; trial < 10; ++trial) {
        const V3 d = random_dirs(rng, 1)[0];
        std::array<double, 16> w;
        for (auto &x : w) x = g(rng);
        auto f = [&](const V3 &v) {
            const auto y = sh_basis(v);
            double s = 0;
            for (int i = 0; i < 16; ++i) s += w[i] * y[i];
            return s;
        };
        const V3 an = sh_basis_backward(d, w.data(), 16);
        for (int a = 0; a < 3; ++a) {
            V3 e = V3::Zero();
            e[a] = 1e-6;
            EXPECT_TRUE(close_rel(an[a], (f(d + e) - f(d - e)) / 2e-6, 1e-6, 1e-8));
        }
    }
}

TEST(FieldBatch, BackwardMatchesFiniteDifferences) {
    auto p = random_field(7);
    Rng rng(8);
    const int n = 6;
    const auto x = random_points(rng, n, 2.5);
    const auto d = random_dirs(rng, n);
    std::normal_distribution<double> g(0, 1);
    std::vector<double> a(n);
    std::vector<V3> b(n);
    for (int i = 0; i < n; ++i) {
        a[i] = g(rng);
        b[i] = V3(g(rng), g(rng), g(rng));
    }
    auto loss = [&](const FieldParams<double> &q, const std::vector<V3> &xs, const std::vector<V3> &ds) {
        FieldBatch<double> fb;
        fb.forward(q, xs, ds);
        double s = 0;
        for (int i = 0; i < n; ++i) s += a[i] * fb.sigma[i] + b[i].dot(fb.color_raw(i));
        return s;
    };
    FieldBatch<double> fb;
    fb.forward(p, x, d);
    std::vector<double> grad(p.size(), 0.0);
    std::vector<V3> gpos, gdir;
    fb.backward(p, a, b, grad, &gpos, &gdir);

    std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
    std::vector<std::size_t> idx;
    for (int k = 0; k < 150; ++k) idx.push_back(pick(rng));
    for (auto i : p.density_output_indices()) idx.push_back(i);
    for (const std::size_t i : idx) {
        auto q = p;
        const double fd = test::central_difference(
            [&](double v) {
                q.values[i] = v;
                return loss(q, x, d);
            },
            p.values[i], 1e-6);
        EXPECT_TRUE(close_rel(grad[i], fd, 1e-5, 1e-8)) << "param " << i;
    }
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) {
            auto xs = x;
            const double fx = test::central_difference(
                [&](double v) {
                    xs[i][c] = v;
                    return loss(p, xs, d);
                },
                x[i][c], 1e-7);
            EXPECT_TRUE(close_rel(gpos[i][c], fx, 1e-4, 1e-7)) << "pos " << i << "," << c;
            auto ds = d;
            const double fdir = test::central_difference(
                [&](double v) {
                    ds[i][c] = v;
                    return loss(p, x, ds);
                },
                d[i][c], 1e-6);
            EXPECT_TRUE(close_rel(gdir[i][c], fdir, 1e-5, 1e-8)) << "dir " << i << "," << c;
        }
}

TEST(RayBatch, BackwardMatchesFiniteDifferences) {
    auto p = random_field(10);
    Rng rng(11);
    std::vector<Ray<double>> rays;
    for (const auto &d : random_dirs(rng, 4)) rays.push_back({V3(0.2, -0.1, 0.0), d, 0.2, 3.0});
    std::vector<V3> gc(rays.size());
    std::normal_distribution<double> g(0, 1);
    for (auto &v : gc) v = V3(g(rng), g(rng), g(rng));
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> jitter(rays.size() * 12);
    for (auto &j : jitter) j = u(rng);
    auto loss = [&](const FieldParams<double> &q) {
        RayBatch<double> rb;
        rb.n_samples = 12;
        rb.background = V3(0.3, 0.6, 0.9);
        rb.forward(q, rays, jitter);
        double s = 0;
        for (std::size_t r = 0; r < rays.size(); ++r) s += gc[r].dot(rb.results[r].color);
        return s;
    };
    RayBatch<double> rb;
    rb.n_samples = 12;
    rb.background = V3(0.3, 0.6, 0.9);
    rb.forward(p, rays, jitter);
    std::vector<double> grad(p.size(), 0.0);
    rb.backward(p, gc, grad);
    std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
    for (int k = 0; k < 150; ++k) {
        const std::size_t i = pick(rng);
        auto q = p;
        const double fd = test::central_difference(
            [&](double v) {
                q.values[i] = v;
                return loss(q);
            },
            p.values[i], 1e-6);
        EXPECT_TRUE(close_rel(grad[i], fd, 1e-5, 1e-8)) << "param " << i;
    }
}

TEST(Quadrature, EmptyFieldShowsBackground) {
    stub::ConstantField f{0.0};
    RenderRayOptions<double> o;
    o.background = V3(0.1, 0.2, 0.3);
    const auto r = render_ray(f, z_ray(0, 4), o);
    EXPECT_EQ(r.transmittance, 1.0);
    EXPECT_EQ(r.depth, 0.0);
    EXPECT_EQ(r.color, o.background);
}

TEST(Quadrature, ConstantDensityTransmittance) {
    const int n = 256;
    const double delta = 4.0 / n;
    const auto t = sample_positions(0.0, 4.0, n);
    std::vector<double> sigma(n, 2.0), w;
    std::vector<V3> rgb(n, V3::Zero());
    const auto r = composite<double>(t, delta, sigma, rgb, V3::Zero(), &w);
    double q = 1, max_err = 0;
    for (int k = 0; k < n; ++k) {
        max_err = std::max(max_err, std::abs(q - std::exp(-2.0 * k * delta)));
        q -= w[k];
    }
    EXPECT_LT(max_err, 1e-3);
    EXPECT_NEAR(r.transmittance, std::exp(-8.0), 1e-12);
}

TEST(Quadrature, DepthConvergesWithOrderAtLeastOne) {
    stub::ConstantField f{2.0};
    const double exact = 0.5 - 4.5 * std::exp(-8.0);
    std::vector<double> err;
    for (int n : {16, 32, 64, 128, 256}) {
        RenderRayOptions<double> o;
        o.n_samples = n;
        err.push_back(std::abs(render_ray(f, z_ray(0, 4), o).depth - exact));
    }
    EXPECT_LT(err.back() + std::abs(exact - 0.5), 1e-2);
    for (std::size_t i = 1; i < err.size(); ++i) EXPECT_GE(std::log2(err[i - 1] / err[i]), 1.0 - 1e-6);
}

TEST(Quadrature, WeightsAndResidualSumToOne) {
    Rng rng(12);
    std::uniform_real_distribution<double> u(0, 5);
    std::vector<double> s(64);
    for (auto &v : s) v = u(rng);
    const auto t = sample_positions(0.5, 3.5, 64);
    std::vector<double> w;
    const auto r = composite<double>(t, 3.0 / 64, s, std::vector<V3>(64, V3::Ones()), V3::Zero(), &w);
    double sum = r.transmittance;
    for (double x : w) {
        EXPECT_GE(x, 0.0);
        sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Quadrature, SlabDepthAndTranslation) {
    const int n = 256;
    const double delta = 4.0 / n;
    auto depth = [&](double u0) {
        stub::BoxField f;
        f.lo = V3(-10, -10, u0);
        f.hi = V3(10, 10, u0 + 1);
        f.sigma = 1e3;
        RenderRayOptions<double> o;
        o.n_samples = n;
        return render_ray(f, z_ray(0, 4), o).depth;
    };
    EXPECT_NEAR(depth(1.3), 1.3, delta);
    EXPECT_NEAR(depth(1.3 + 8 * delta) - depth(1.3), 8 * delta, 1e-9);
}

TEST(Quadrature, CompositeBackwardMatchesFiniteDifferences) {
    Rng rng(13);
    std::uniform_real_distribution<double> u(0, 3);
    const int n = 10;
    std::vector<double> s(n);
    std::vector<V3> c(n);
    for (int k = 0; k < n; ++k) {
        s[k] = u(rng);
        c[k] = V3(u(rng), u(rng), u(rng)) / 3;
    }
    const auto t = sample_positions(0.0, 2.0, n);
    const V3 bg(0.2, 0.4, 0.6), gc(0.7, -1.1, 0.4);
    std::vector<double> gs(n);
    std::vector<V3> gr(n);
    composite_backward<double>(t, 0.2, s, c, bg, gc, gs, gr);
    for (int k = 0; k < n; ++k) {
        auto ss = s;
        const double fd = test::central_difference(
            [&](double v) {
                ss[k] = v;
                return gc.dot(composite<double>(t, 0.2, ss, c, bg).color);
            },
            s[k], 1e-6);
        EXPECT_TRUE(close_rel(gs[k], fd, 1e-6, 1e-10));
        for (int j = 0; j < 3; ++j) {
            auto cc = c;
            const double fc = test::central_difference(
                [&](double v) {
                    cc[k][j] = v;
                    return gc.dot(composite<double>(t, 0.2, s, cc, bg).color);
                },
                c[k][j], 1e-6);
            EXPECT_TRUE(close_rel(gr[k][j], fc, 1e-6, 1e-10));
        }
    }
}

TEST(FieldImage, StrideShapeAndEmptyField) {
    const Camera cam = test::axis_camera(33, 31);
    stub::ConstantField f{0.0};
    FieldImageOptions<double> o;
    o.stride = 2;
    o.n_samples = 8;
    const auto img = render_field_image(f, cam, o);
    EXPECT_EQ(img.rgb.width, 17);
    EXPECT_EQ(img.rgb.height, 16);
    for (double v : img.rgb.data) EXPECT_EQ(v, 1.0);
    for (double v : img.transmittance.data) EXPECT_EQ(v, 1.0);
}

TEST(FieldImage, NeuralMatchesPerRayRender) {
    const auto p = random_field(14);
    const NeuralField<double> f(p);
    Camera cam = test::axis_camera(8, 8, 6);
    cam.far = 4;
    FieldImageOptions<double> o;
    o.n_samples = 16;
    const auto img = render_field_image(f, cam, o);
    RenderRayOptions<double> ro;
    ro.n_samples = 16;
    ro.background = V3::Ones();
    const auto r = render_ray(f, camera_ray<double>(cam, 3.5, 5.5), ro);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(img.rgb(3, 5, c), r.color[c], 1e-12);
    EXPECT_NEAR(img.depth(3, 5), r.depth, 1e-12);
}

TEST(SplatColors, FreshFieldGivesBaseColor) {
    FieldParams<double> p(tiny_config(), SceneFrame{});
    Rng rng(15);
    p.initialize(rng);
    auto splats = test::random_splats(rng, 20);
    const Camera cam = test::axis_camera();
    const auto c = splat_colors<double>(p, splats, cam);
    for (std::size_t i = 0; i < splats.size(); ++i) EXPECT_TRUE(c[i].isApprox(splats[i].base_color(), 1e-14));
    const auto fo = splat_colors<double>(p, splats, cam, ColorMode::field_only);
    for (const auto &v : fo) EXPECT_EQ(v, V3::Constant(0.5));
}

TEST(SplatColors, SplatAtCameraCenterIsFinite) {
    const auto p = random_field(16);
    std::vector<Splat<double>> s(1);
    const Camera cam = test::axis_camera();
    SplatColorCache<double> cache;
    const auto c = splat_colors<double>(p, s, cam, ColorMode::residual, &cache);
    EXPECT_TRUE(c[0].allFinite());
    EXPECT_EQ(cache.directions[0], cam.forward());
    std::vector<double> gf(p.size(), 0.0);
    std::vector<Splat<double>> gs(1, Splat<double>::zero());
    splat_colors_backward<double>(p, cache, std::vector<V3>{V3::Ones()}, gf, gs);
    EXPECT_TRUE(gs[0].position.allFinite());
}

TEST(SplatColors, BackwardMatchesFiniteDifferences) {
    const auto p = random_field(17);
    Rng rng(18);
    auto splats = test::random_splats(rng, 5);
    const Camera cam = test::axis_camera();
    std::normal_distribution<double> g(0, 1);
    std::vector<V3> gc(splats.size());
    for (auto &v : gc) v = V3(g(rng), g(rng), g(rng));
    for (ColorMode mode : {ColorMode::residual, ColorMode::field_only}) {
        auto loss = [&](const FieldParams<double> &q, const std::vector<Splat<double>> &s) {
            const auto c = splat_colors<double>(q, s, cam, mode);
            double sum = 0;
            for (std::size_t i = 0; i < c.size(); ++i) sum += gc[i].dot(c[i]);
            return sum;
        };
        SplatColorCache<double> cache;
        splat_colors<double>(p, splats, cam, mode, &cache);
        std::vector<double> gf(p.size(), 0.0);
        std::vector<Splat<double>> gs(splats.size(), Splat<double>::zero());
        splat_colors_backward<double>(p, cache, gc, gf, gs);
        for (std::size_t i = 0; i < splats.size(); ++i) {
            auto ptr = test::splat_scalars(splats[i]);
            auto gptr = test::splat_scalars(gs[i]);
            for (int k : {0, 1, 2, 11, 12, 13}) {
                const double x0 = *ptr[k];
                const double fd = test::central_difference(
                    [&](double v) {
                        *ptr[k] = v;
                        const double l = loss(p, splats);
                        *ptr[k] = x0;
                        return l;
                    },
                    x0, 1e-7);
                EXPECT_TRUE(close_rel(*gptr[k], fd, 1e-4, 1e-8)) << "splat " << i << " scalar " << k;
            }
        }
        std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
        for (int k = 0; k < 60; ++k) {
            const std::size_t i = pick(rng);
            auto q = p;
            const double fd = test::central_difference(
                [&](double v) {
                    q.values[i] = v;
                    return loss(q, splats);
                },
                p.values[i], 1e-6);
            EXPECT_TRUE(close_rel(gf[i], fd, 1e-5, 1e-8)) << "param " << i;
        }
    }
}

TEST(Stubs, BoxAndConstantFields) {
    stub::BoxField box;
    std::vector<V3> x{V3::Zero(), V3(1.0, 1.0, 1.0), V3(1.01, 0, 0)};
    std::vector<double> s;
    box.density(x, s);
    EXPECT_EQ(s, (std::vector<double>{50.0, 50.0, 0.0}));
    stub::ConstantField c{3.0};
    c.density(x, s);
    EXPECT_EQ(s, std::vector<double>(3, 3.0));
}
