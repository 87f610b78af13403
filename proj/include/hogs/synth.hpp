// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Procedural test scenes rendered by a brute-force ray tracer (analytic
// sphere/box/plane intersection, Lambert + Phong shading, supersampled).
// Shares nothing with the splat renderer or the field, so its images can
// serve as ground truth.
//
#pragma once

#include <hogs/io.hpp>
#include <hogs/warper.hpp>

namespace hogs {

struct Primitive {
    enum class Kind { box, sphere, plane };
    Kind kind = Kind::sphere;
    Eigen::Vector3d center{0, 0, 0};
    Eigen::Vector3d half_size{0.5, 0.5, 0.5}; // box
    double radius = 0.5;                      // sphere
    double height = 0;                        // plane y = height
    Eigen::Vector3d color{0.8, 0.8, 0.8};
    Eigen::Vector3d color2{0.2, 0.2, 0.2}; // second checker color
    double checker = 0;                    // checker cell size in meters (0 disables)
    double specular  = 0;
    double shininess = 32;
};

struct RigCamera {
    std::string id;
    double yaw_offset_deg = 0;
};

struct SyntheticSceneSpec {
    std::uint64_t seed = 7;
    int width = 64, height = 64;
    double hfov_deg = 60;
    double near = 0.5, far = 12;
    int supersample = 4;
    Eigen::Vector3d background{1, 1, 1};
    Eigen::Vector3d light_dir{-0.4, 0.8, -0.45}; // towards the light
    double ambient = 0.35;
    std::vector<Primitive> primitives;
    // Orbit rig: rig heading sweeps [start, end] over `timesteps`; each rig camera sits on the
    // orbit at heading + offset and looks at `target`. Frame index = timestep * cameras + camera.
    std::vector<RigCamera> cameras{{"cam0", -30}, {"cam1", 0}, {"cam2", 30}};
    int timesteps        = 20;
    double orbit_radius  = 4.0;
    double orbit_height  = 1.5;
    double start_deg     = 0;
    double end_deg       = 120;
    double jitter_deg    = 0; // seeded per-frame heading noise
    Eigen::Vector3d target{0, 0, 0};

    int frame_count() const { return timesteps * int(cameras.size()); }
};

/// Camera at `eye` looking at `target` with world +y up (image y points down).
inline Camera look_at(const Eigen::Vector3d &eye, const Eigen::Vector3d &target, int width, int height,
                      double hfov_deg, double near, double far, std::string id = "cam0") {
    const Eigen::Vector3d fwd = (target - eye).normalized();
    Eigen::Vector3d right = fwd.cross(Eigen::Vector3d::UnitY());
    if (right.norm() < 1e-9) right = Eigen::Vector3d::UnitX();
    right.normalize();
    const Eigen::Vector3d down = fwd.cross(right);
    Camera c;
    c.rotation_w2c.row(0) = right.transpose();
    c.rotation_w2c.row(1) = down.transpose();
    c.rotation_w2c.row(2) = fwd.transpose();
    c.translation_w2c     = -c.rotation_w2c * eye;
    c.width  = width;
    c.height = height;
    c.fx = c.fy = 0.5 * width / std::tan(0.5 * hfov_deg * kPi / 180.0);
    c.cx   = 0.5 * width;
    c.cy   = 0.5 * height;
    c.near = near;
    c.far  = far;
    c.camera_id = std::move(id);
    return c;
}

/// All cameras of the trajectory, in frame order.
inline std::vector<Camera> synthetic_cameras(const SyntheticSceneSpec &s) {
    std::vector<Camera> out;
    Rng rng(s.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 0; t < s.timesteps; ++t) {
        const double base = s.timesteps > 1 ? s.start_deg + (s.end_deg - s.start_deg) * t / (s.timesteps - 1)
                                            : s.start_deg;
        for (const auto &rc : s.cameras) {
            const double yaw = (base + rc.yaw_offset_deg + s.jitter_deg * u(rng)) * kPi / 180.0;
            const Eigen::Vector3d eye = s.target + Eigen::Vector3d(s.orbit_radius * std::sin(yaw), s.orbit_height,
                                                                   -s.orbit_radius * std::cos(yaw));
            out.push_back(look_at(eye, s.target, s.width, s.height, s.hfov_deg, s.near, s.far, rc.id));
        }
    }
    return out;
}

namespace detail {

struct Hit {
    double t = std::numeric_limits<double>::infinity();
    Eigen::Vector3d normal{0, 0, 0};
    const Primitive *prim = nullptr;
};

inline void intersect(const Primitive &p, const Eigen::Vector3d &o, const Eigen::Vector3d &d, double tmin, Hit &hit) {
    switch (p.kind) {
    case Primitive::Kind::sphere: {
        const Eigen::Vector3d oc = o - p.center;
        const double b = oc.dot(d), c = oc.squaredNorm() - p.radius * p.radius;
        const double disc = b * b - c;
        if (disc < 0) return;
        const double sq = std::sqrt(disc);
        for (double t : {-b - sq, -b + sq})
            if (t > tmin && t < hit.t) {
                hit.t = t;
                hit.normal = (o + t * d - p.center) / p.radius;
                hit.prim = &p;
                return;
            }
        return;
    }
    case Primitive::Kind::box: {
        double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
        int axis0 = 0, axis1 = 0;
        for (int a = 0; a < 3; ++a) {
            const double lo = p.center[a] - p.half_size[a], hi = p.center[a] + p.half_size[a];
            if (std::abs(d[a]) < 1e-15) {
                if (o[a] < lo || o[a] > hi) return;
                continue;
            }
            double ta = (lo - o[a]) / d[a], tb = (hi - o[a]) / d[a];
            if (ta > tb) std::swap(ta, tb);
            if (ta > t0) {
                t0 = ta;
                axis0 = a;
            }
            if (tb < t1) {
                t1 = tb;
                axis1 = a;
            }
        }
        if (t0 > t1) return;
        const double t = t0 > tmin ? t0 : t1;
        const int axis = t0 > tmin ? axis0 : axis1;
        if (!(t > tmin) || t >= hit.t) return;
        hit.t = t;
        hit.normal.setZero();
        hit.normal[axis] = (o[axis] + t * d[axis] - p.center[axis]) > 0 ? 1.0 : -1.0;
        hit.prim = &p;
        return;
    }
    case Primitive::Kind::plane: {
        if (std::abs(d.y()) < 1e-15) return;
        const double t = (p.height - o.y()) / d.y();
        if (t > tmin && t < hit.t) {
            hit.t = t;
            hit.normal = Eigen::Vector3d(0, o.y() > p.height ? 1.0 : -1.0, 0);
            hit.prim = &p;
        }
        return;
    }
    }
}

inline Eigen::Vector3d albedo(const Primitive &p, const Eigen::Vector3d &x) {
    if (p.checker <= 0) return p.color;
    const long k = long(std::floor(x.x() / p.checker)) + long(std::floor(x.y() / p.checker)) +
                   long(std::floor(x.z() / p.checker));
    return (k & 1) ? p.color2 : p.color;
}

} // namespace detail

/// Radiance along one ray (background when nothing is hit before `far`).
inline Eigen::Vector3d trace_ray(const SyntheticSceneSpec &s, const Eigen::Vector3d &o, const Eigen::Vector3d &d,
                                 double near, double far) {
    detail::Hit hit;
    hit.t = far;
    for (const auto &p : s.primitives) detail::intersect(p, o, d, near, hit);
    if (!hit.prim) return s.background;
    const Primitive &p = *hit.prim;
    const Eigen::Vector3d x = o + hit.t * d;
    const Eigen::Vector3d l = s.light_dir.normalized();
    const double lambert = std::max(0.0, hit.normal.dot(l));
    Eigen::Vector3d c = detail::albedo(p, x) * (s.ambient + (1 - s.ambient) * lambert);
    if (p.specular > 0 && lambert > 0) {
        const Eigen::Vector3d r = 2 * hit.normal.dot(l) * hit.normal - l;
        c += Eigen::Vector3d::Constant(p.specular * std::pow(std::max(0.0, r.dot(-d)), p.shininess));
    }
    return c.cwiseMax(0.0).cwiseMin(1.0);
}

/// Box-filtered (supersample x supersample) render of the scene from `cam`.
inline Image<float> trace_image(const SyntheticSceneSpec &s, const Camera &cam) {
    Image<float> img(cam.width, cam.height, 3);
    const int ss = std::max(1, s.supersample);
    const Eigen::Vector3d o = cam.center();
    parallel_for(std::size_t(cam.height), [&](std::size_t yb, std::size_t ye) {
        for (std::size_t y = yb; y < ye; ++y)
            for (int x = 0; x < cam.width; ++x) {
                Eigen::Vector3d acc = Eigen::Vector3d::Zero();
                for (int j = 0; j < ss; ++j)
                    for (int i = 0; i < ss; ++i) {
                        const double u = x + (i + 0.5) / ss, v = double(y) + (j + 0.5) / ss;
                        const Eigen::Vector3d d = cam.ray_direction(u, v);
                        // near/far bound depth along the optical axis; convert to ray distance
                        const double cosz = d.dot(cam.forward());
                        acc += trace_ray(s, o, d, cam.near / cosz, cam.far / cosz);
                    }
                acc /= double(ss * ss);
                for (int c = 0; c < 3; ++c) img(x, int(y), c) = float(acc[c]);
            }
    });
    return img;
}

inline Eigen::Vector3d json_vec3(const nlohmann::json &j, const char *key, const Eigen::Vector3d &fallback) {
    if (!j.contains(key)) return fallback;
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 3) throw IoError(std::string("scene spec: ") + key + " must have 3 entries");
    return {v[0], v[1], v[2]};
}

inline SyntheticSceneSpec parse_scene_spec(const nlohmann::json &j) {
    SyntheticSceneSpec s;
    s.seed        = j.value("seed", s.seed);
    s.width       = j.value("width", s.width);
    s.height      = j.value("height", s.height);
    s.hfov_deg    = j.value("hfov_deg", s.hfov_deg);
    s.near        = j.value("near", s.near);
    s.far         = j.value("far", s.far);
    s.supersample = j.value("supersample", s.supersample);
    s.background  = json_vec3(j, "background", s.background);
    s.light_dir   = json_vec3(j, "light_dir", s.light_dir);
    s.ambient     = j.value("ambient", s.ambient);
    if (j.contains("primitives")) {
        for (const auto &pj : j.at("primitives")) {
            Primitive p;
            const std::string type = pj.at("type").get<std::string>();
            if (type == "box") p.kind = Primitive::Kind::box;
            else if (type == "sphere") p.kind = Primitive::Kind::sphere;
            else if (type == "plane") p.kind = Primitive::Kind::plane;
            else throw IoError("scene spec: unknown primitive type '" + type + "'");
            p.center    = json_vec3(pj, "center", p.center);
            p.half_size = json_vec3(pj, "half_size", p.half_size);
            p.radius    = pj.value("radius", p.radius);
            p.height    = pj.value("height", p.height);
            p.color     = json_vec3(pj, "color", p.color);
            p.color2    = json_vec3(pj, "color2", p.color2);
            p.checker   = pj.value("checker", p.checker);
            p.specular  = pj.value("specular", p.specular);
            p.shininess = pj.value("shininess", p.shininess);
            s.primitives.push_back(p);
        }
    }
    if (j.contains("trajectory")) {
        const auto &t = j.at("trajectory");
        s.timesteps    = t.value("timesteps", s.timesteps);
        s.orbit_radius = t.value("radius", s.orbit_radius);
        s.orbit_height = t.value("height", s.orbit_height);
        s.start_deg    = t.value("start_deg", s.start_deg);
        s.end_deg      = t.value("end_deg", s.end_deg);
        s.jitter_deg   = t.value("jitter_deg", s.jitter_deg);
        s.target       = json_vec3(t, "target", s.target);
        if (t.contains("cameras")) {
            s.cameras.clear();
            for (const auto &c : t.at("cameras"))
                s.cameras.push_back({c.at("id").get<std::string>(), c.value("yaw_offset_deg", 0.0)});
        }
    }
    HOGS_CHECK(s.width > 0 && s.height > 0, "scene spec: image size must be positive");
    HOGS_CHECK(s.timesteps >= 1 && !s.cameras.empty(), "scene spec: empty trajectory");
    HOGS_CHECK(s.near > 0 && s.far > s.near, "scene spec: requires 0 < near < far");
    return s;
}

inline SyntheticSceneSpec load_scene_spec(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scene spec " + path.string());
    try {
        return parse_scene_spec(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception &e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

/// Renders every frame into out_dir/images and writes out_dir/manifest.jsonl.
inline Dataset generate_synthetic(const SyntheticSceneSpec &s, const fs::path &out_dir) {
    fs::create_directories(out_dir / "images");
    Dataset ds;
    const auto cams = synthetic_cameras(s);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        Frame f;
        f.index  = int(i);
        f.camera = cams[i];
        char name[32];
        std::snprintf(name, sizeof name, "%04zu.png", i);
        f.image = fs::absolute(out_dir / "images" / name);
        write_png(f.image, trace_image(s, f.camera));
        ds.frames.push_back(f);
    }
    ds.compute_extent();
    write_manifest(ds, out_dir / "manifest.jsonl");
    return ds;
}

} // namespace hogs
