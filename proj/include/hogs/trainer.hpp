// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Joint optimization of the splat set and the radiance field.
//
// Per step (after warm-up): rasterize one real training view with field-supplied splat colors,
// optionally one masked virtual view, plus a batch of field rays; backpropagate everything into
// one gradient per parameter; Adam; then run the densification schedule.
//
#pragma once

#include <hogs/densifier.hpp>
#include <hogs/io.hpp>
#include <hogs/loss.hpp>
#include <hogs/optimizer.hpp>
#include <hogs/rasterizer.hpp>
#include <hogs/warper.hpp>

#include <functional>
#include <limits>

namespace hogs {

struct TrainConfig {
    int total_iterations   = 30000;
    int warmup_iterations  = 3000; // field only
    double lambda_ssim     = 0.2;
    double lambda_field    = 0.1;
    SplatLearningRates lr;
    double field_lr        = 1e-2;
    AdamHyper adam;
    int rays_per_batch     = 4096;
    int field_samples      = 64;
    double color_weight_eps = 0.0; // skip color evaluation for field samples below this weight
    std::uint64_t seed     = 0;
    Eigen::Vector3d background{1, 1, 1};
    FieldConfig field;
    DensifyConfig densify;
    WarpConfig warp;
    ColorMode color_mode   = ColorMode::residual;
    bool harvest           = true;
    bool warp_enabled      = true;
    int virtual_interval   = 500; // pool regeneration cadence
    int virtual_every      = 4;   // use a virtual view every k-th step
    double virtual_weight  = 0.5;
    int psnr_interval      = 100; // training-view PSNR in the loss stream
    int random_init        = 0;   // random splats at start (baseline without harvesting)
    std::vector<Eigen::Vector3d> init_points;

    void validate() const {
        HOGS_CHECK(total_iterations >= 0, "total_iterations must be >= 0");
        HOGS_CHECK(warmup_iterations >= 0, "warmup_iterations must be >= 0");
        HOGS_CHECK(lambda_ssim >= 0 && lambda_ssim <= 1, "lambda must be in [0, 1]");
        HOGS_CHECK(lambda_field >= 0, "lambda1 must be >= 0");
        HOGS_CHECK(rays_per_batch >= 1 && field_samples >= 2, "invalid field batch settings");
        HOGS_CHECK(virtual_interval >= 1 && virtual_every >= 1 && virtual_weight >= 0, "invalid virtual view settings");
        field.validate();
        densify.validate(total_iterations);
        if (harvest && !densify.harvest_iterations.empty())
            HOGS_CHECK(warmup_iterations < densify.harvest_iterations.front(),
                       "warm-up (" << warmup_iterations << ") must end before the first harvest ("
                                   << densify.harvest_iterations.front() << ")");
    }
};

struct LossReport {
    long iteration = 0;
    double l_g = 0, l_mse = 0, l_virtual = 0, total = 0;
    double weight_field = 0, weight_virtual = 0;
    std::size_t splats = 0;
    double psnr = std::numeric_limits<double>::quiet_NaN();
    bool warmup = false;

    nlohmann::json to_json() const {
        nlohmann::json j{{"iteration", iteration}, {"l_g", l_g},   {"l_mse", l_mse},      {"l_virtual", l_virtual},
                         {"total", total},         {"splats", splats}, {"warmup", warmup}};
        if (!std::isnan(psnr)) j["psnr"] = psnr;
        return j;
    }
};

/// Raised when a loss turns NaN or infinite; carries a description of the offending batch.
class NonFiniteLoss : public std::runtime_error {
  public:
    NonFiniteLoss(const std::string &what, nlohmann::json dump) : std::runtime_error(what), dump(std::move(dump)) {}
    nlohmann::json dump;
};

struct TrainState {
    std::vector<Splat<float>> splats;
    SplatMoments<float> splat_moments;
    FieldParams<float> field;
    std::vector<float> field_m, field_v;
    long iteration   = 0;
    long splat_steps = 0, field_steps = 0;
    Rng rng;
    std::vector<VirtualView> virtual_views;
    std::size_t virtual_cursor = 0;
    DensifyAccumulators accum;
    std::vector<std::size_t> frame_order;
    std::size_t frame_cursor = 0;

    OptimizerState optimizer_state() const {
        OptimizerState o;
        o.step    = splat_steps;
        o.splats  = splat_moments;
        o.field_m = field_m;
        o.field_v = field_v;
        return o;
    }

    void check_shapes() const {
        HOGS_CHECK(splat_moments.size() == splats.size(), "splat moments (" << splat_moments.size()
                                                                             << ") do not match splats ("
                                                                             << splats.size() << ")");
        HOGS_CHECK(accum.size() == splats.size(), "densify accumulators do not match splats");
        HOGS_CHECK(field_m.size() == field.size() && field_v.size() == field.size(), "field moments out of sync");
    }
};

/// Training data kept in memory: frames plus decoded images.
struct TrainingData {
    Dataset dataset;
    std::vector<Image<float>> images; // aligned with dataset.frames
    std::vector<std::size_t> train;   // indices into frames
    std::vector<std::size_t> test;

    TrainingData() = default;
    TrainingData(Dataset ds, std::vector<Image<float>> imgs) : dataset(std::move(ds)), images(std::move(imgs)) {
        HOGS_CHECK(images.size() == dataset.frames.size(), "one image per frame required");
        for (std::size_t i = 0; i < dataset.frames.size(); ++i) {
            const Camera &c = dataset.frames[i].camera;
            HOGS_CHECK(images[i].width == c.width && images[i].height == c.height && images[i].channels == 3,
                       "image " << dataset.frames[i].image.string() << " does not match its camera size");
            (Dataset::is_test_index(dataset.frames[i].index) ? test : train).push_back(i);
        }
        HOGS_CHECK(!train.empty(), "dataset has no training frames");
    }

    static TrainingData load(const fs::path &manifest) {
        Dataset ds = load_dataset(manifest);
        std::vector<Image<float>> imgs(ds.frames.size());
        for (std::size_t i = 0; i < imgs.size(); ++i) imgs[i] = read_png(ds.frames[i].image);
        return TrainingData(std::move(ds), std::move(imgs));
    }

    std::vector<Camera> train_cameras() const {
        std::vector<Camera> v;
        for (std::size_t i : train) v.push_back(dataset.frames[i].camera);
        return v;
    }
};

/// Renders splats with field-supplied colors.
inline RenderOutput<float> render_splats(const std::vector<Splat<float>> &splats, const FieldParams<float> &field,
                                         const Camera &cam, ColorMode mode, const Eigen::Vector3d &background,
                                         SplatColorCache<float> *cache = nullptr,
                                         std::vector<Eigen::Vector3f> *colors_out = nullptr) {
    const auto colors = splat_colors<float>(field, splats, cam, mode, cache);
    auto out = rasterize_forward<float>(splats, colors, cam, background.cast<float>());
    if (colors_out) *colors_out = colors;
    return out;
}

/// Deterministic evaluation on the given frames. Renders are rounded to 8 bits before comparison.
inline MetricsReport evaluate(const std::vector<Splat<float>> &splats, const FieldParams<float> &field,
                              const TrainingData &data, const std::vector<std::size_t> &frames, ColorMode mode,
                              const Eigen::Vector3d &background) {
    HOGS_CHECK(!frames.empty(), "evaluation needs at least one view");
    MetricsReport rep;
    for (std::size_t i : frames) {
        const Frame &f = data.dataset.frames[i];
        const Image<float> img = quantize8(render_splats(splats, field, f.camera, mode, background).image);
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04d", f.index);
        rep.views.push_back({name, f.camera.camera_id, psnr(img, data.images[i]), ssim(img, data.images[i])});
    }
    rep.finalize();
    return rep;
}

/// Splats at the given points: neighbor-distance scale, opacity 0.1, gray.
inline std::vector<Splat<float>> splats_from_points(const std::vector<Eigen::Vector3d> &pts, double fallback_scale,
                                                    double opacity = 0.1) {
    const auto dist = detail::mean_knn_distance(pts, 3, fallback_scale);
    std::vector<Splat<float>> out;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        Splat<float> s;
        s.position = pts[i].cast<float>();
        s.log_scale.setConstant(float(std::log(dist[i])));
        s.opacity_logit = float(logit(opacity));
        out.push_back(s);
    }
    return out;
}

class Trainer {
  public:
    using EventSink = std::function<void(const nlohmann::json &)>;

    Trainer(const TrainingData &data, TrainConfig cfg) : data_(&data), cfg_(std::move(cfg)) {
        cfg_.validate();
        TrainState &s = state_;
        s.rng.seed(cfg_.seed);
        s.field = FieldParams<float>(cfg_.field, data.dataset.scene_frame());
        s.field.initialize(s.rng);
        s.field_m.assign(s.field.size(), 0.f);
        s.field_v.assign(s.field.size(), 0.f);

        std::vector<Eigen::Vector3d> pts = cfg_.init_points;
        if (cfg_.random_init > 0) {
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            const double r = 0.5 * data.dataset.scene_radius;
            while (int(pts.size()) < int(cfg_.init_points.size()) + cfg_.random_init) {
                const Eigen::Vector3d p(u(s.rng), u(s.rng), u(s.rng));
                if (p.squaredNorm() <= 1.0) pts.push_back(data.dataset.center + r * p);
            }
        }
        if (!pts.empty()) add_splats(splats_from_points(pts, 0.01 * data.dataset.scene_radius));
        s.accum.resize(s.splats.size());
    }

    const TrainConfig &config() const { return cfg_; }
    const TrainState &state() const { return state_; }
    TrainState &mutable_state() { return state_; }
    const TrainingData &data() const { return *data_; }
    void set_event_sink(EventSink sink) { events_ = std::move(sink); }

    bool in_warmup(long iteration) const { return iteration <= cfg_.warmup_iterations; }

    /// Runs iteration state.iteration + 1.
    LossReport step() {
        const DenormalGuard fp;
        TrainState &s = state_;
        s.check_shapes();
        const long it = ++s.iteration;
        LossReport rep;
        rep.iteration = it;
        rep.warmup    = in_warmup(it);
        rep.weight_field   = cfg_.lambda_field;
        rep.weight_virtual = cfg_.virtual_weight;

        std::vector<float> gfield(s.field.size(), 0.f);
        std::vector<Splat<float>> gsplat(s.splats.size(), Splat<float>::zero());
        const bool splat_phase = !rep.warmup;

        if (splat_phase) {
            const std::size_t fi = next_frame();
            const Frame &f = data_->dataset.frames[fi];
            const Image<float> &gt = data_->images[fi];
            SplatGradients<float> sg;
            const auto render = splat_view_loss(f.camera, gt, nullptr, 1.0, gfield, gsplat, &rep.l_g, &sg);
            s.accum.add(sg, f.camera);
            if (cfg_.psnr_interval > 0 && it % cfg_.psnr_interval == 0) rep.psnr = psnr(render, gt);
            check_finite(rep.l_g, "l_g", it, {{"frame", f.index}});

            if (cfg_.warp_enabled && !s.virtual_views.empty() && it % cfg_.virtual_every == 0 &&
                cfg_.virtual_weight > 0) {
                const VirtualView &v = s.virtual_views[s.virtual_cursor++ % s.virtual_views.size()];
                splat_view_loss(v.camera, v.target, &v.confidence_mask, cfg_.virtual_weight, gfield, gsplat,
                                &rep.l_virtual, nullptr);
                check_finite(rep.l_virtual, "l_virtual", it, {{"virtual_source", v.source_camera_id}});
            }
        }

        if (cfg_.lambda_field > 0) {
            rep.l_mse = field_batch_loss(cfg_.lambda_field, gfield);
            check_finite(rep.l_mse, "l_mse", it, {{"rays", cfg_.rays_per_batch}});
        }
        rep.total = rep.l_g + cfg_.lambda_field * rep.l_mse + cfg_.virtual_weight * rep.l_virtual;

        // Optimizer.
        if (splat_phase && !s.splats.empty()) {
            ++s.splat_steps;
            const double pos_lr = cfg_.lr.position(it, cfg_.total_iterations) * data_->dataset.scene_radius;
            adam_update_splats<float>(s.splats, gsplat, s.splat_moments, cfg_.lr, pos_lr, s.splat_steps, cfg_.adam);
            if (cfg_.lr.rotation > 0) normalize_rotations(s.splats);
        }
        ++s.field_steps;
        adam_update<float>(s.field.values, gfield, s.field_m, s.field_v, cfg_.field_lr, s.field_steps, cfg_.adam);

        after_step(it);
        rep.splats = s.splats.size();
        return rep;
    }

    /// Splat-set evaluation on the test split (or the given frames).
    MetricsReport evaluate_test() const {
        return evaluate(state_.splats, state_.field, *data_, data_->test.empty() ? data_->train : data_->test,
                        cfg_.color_mode, cfg_.background);
    }

    /// Appends splats with zeroed optimizer moments.
    void add_splats(const std::vector<Splat<float>> &added) {
        TrainState &s = state_;
        s.splats.insert(s.splats.end(), added.begin(), added.end());
        s.splat_moments.resize(s.splats.size());
        DensifyAccumulators acc;
        acc.resize(s.splats.size());
        for (std::size_t i = 0; i < s.accum.size(); ++i) {
            acc.grad_sum[i]      = s.accum.grad_sum[i];
            acc.count[i]         = s.accum.count[i];
            acc.position_grad[i] = s.accum.position_grad[i];
        }
        s.accum = std::move(acc);
    }

    /// Harvests new splats from the current field (also used by the schedule).
    HarvestReport harvest_now() {
        TrainState &s = state_;
        const auto cams = data_->train_cameras();
        const NeuralField<float> nf(s.field);
        HarvestResult hr = harvest_points(nf, std::span<const Camera>(cams), cfg_.densify, s.rng, s.splats.size());
        if (cfg_.color_mode == ColorMode::residual && !hr.splats.empty()) {
            // Make the effective color of each new splat equal the field color it was harvested with.
            std::vector<Eigen::Vector3f> x, d;
            for (std::size_t i = 0; i < hr.splats.size(); ++i) {
                x.push_back(hr.splats[i].position);
                d.push_back(hr.directions[i].cast<float>());
            }
            FieldBatch<float> b;
            b.forward(s.field, x, d);
            for (std::size_t i = 0; i < hr.splats.size(); ++i) hr.splats[i].base_color_logit -= b.color_raw(i);
        }
        add_splats(hr.splats);
        return hr.report;
    }

    void regenerate_virtual_views(long it) {
        TrainState &s = state_;
        s.virtual_views.clear();
        s.virtual_cursor = 0;
        WarpConfig wc = cfg_.warp;
        wc.background = cfg_.background;
        const NeuralField<float> nf(s.field);
        std::size_t rejected = 0;
        // one perturbed view per real training pose
        for (std::size_t i : data_->train) {
            auto v = make_virtual_view(nf, data_->dataset.frames[i].camera, s.rng, wc, int(it));
            if (v) s.virtual_views.push_back(std::move(*v));
            else ++rejected;
        }
        std::shuffle(s.virtual_views.begin(), s.virtual_views.end(), s.rng);
        emit({{"iteration", it}, {"op", "virtual_views"}, {"views", s.virtual_views.size()}, {"rejected", rejected}});
    }

  private:
    std::size_t next_frame() {
        TrainState &s = state_;
        if (s.frame_cursor >= s.frame_order.size()) {
            s.frame_order = data_->train;
            std::shuffle(s.frame_order.begin(), s.frame_order.end(), s.rng);
            s.frame_cursor = 0;
        }
        return s.frame_order[s.frame_cursor++];
    }

    /// Renders `cam`, adds weight * L_g against `target` (only where mask != 0) to the gradients.
    Image<float> splat_view_loss(const Camera &cam, const Image<float> &target, const Image<std::uint8_t> *mask,
                                 double weight, std::vector<float> &gfield, std::vector<Splat<float>> &gsplat,
                                 double *loss, SplatGradients<float> *grads_out) {
        TrainState &s = state_;
        SplatColorCache<float> cache;
        std::vector<Eigen::Vector3f> colors;
        const auto fwd = render_splats(s.splats, s.field, cam, cfg_.color_mode, cfg_.background, &cache, &colors);
        Image<float> tgt = target;
        if (mask) {
            // Unconfident pixels copy the render, so they carry neither loss nor gradient.
            for (int y = 0; y < tgt.height; ++y)
                for (int x = 0; x < tgt.width; ++x)
                    if (!(*mask)(x, y))
                        for (int c = 0; c < 3; ++c) tgt(x, y, c) = fwd.image(x, y, c);
        }
        *loss = gaussian_loss(fwd.image, tgt, cfg_.lambda_ssim).value;
        const Image<float> gimg = gaussian_loss_backward(fwd.image, tgt, cfg_.lambda_ssim, weight);
        SplatGradients<float> sg = rasterize_backward<float>(fwd, gimg.data, s.splats, colors, cam);
        std::vector<Splat<float>> gs(s.splats.size(), Splat<float>::zero());
        splat_colors_backward<float>(s.field, cache, sg.color, gfield, gs);
        for (std::size_t i = 0; i < s.splats.size(); ++i) {
            Splat<float> &g = gsplat[i];
            const Splat<float> &a = sg.params[i];
            g.position += a.position + gs[i].position;
            g.log_scale += a.log_scale;
            g.rotation += a.rotation;
            g.opacity_logit += a.opacity_logit;
            g.base_color_logit += gs[i].base_color_logit;
        }
        if (grads_out) *grads_out = std::move(sg);
        return fwd.image;
    }

    /// Sum over a random pixel batch of squared color error; adds weight * gradient into gfield.
    double field_batch_loss(double weight, std::vector<float> &gfield) {
        TrainState &s = state_;
        const int nr = cfg_.rays_per_batch;
        std::vector<Ray<float>> rays(nr);
        std::vector<Eigen::Vector3f> gt(nr);
        std::uniform_int_distribution<std::size_t> pick_frame(0, data_->train.size() - 1);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (int r = 0; r < nr; ++r) {
            const std::size_t fi = data_->train[pick_frame(s.rng)];
            const Camera &cam = data_->dataset.frames[fi].camera;
            const int x = std::min(cam.width - 1, int(u(s.rng) * cam.width));
            const int y = std::min(cam.height - 1, int(u(s.rng) * cam.height));
            rays[r] = camera_ray<float>(cam, x + 0.5, y + 0.5);
            const Image<float> &img = data_->images[fi];
            gt[r] = Eigen::Vector3f(img(x, y, 0), img(x, y, 1), img(x, y, 2));
        }
        std::vector<float> jitter(std::size_t(nr) * cfg_.field_samples);
        for (float &j : jitter) j = float(u(s.rng));
        RayBatch<float> batch;
        batch.n_samples  = cfg_.field_samples;
        batch.weight_eps = float(cfg_.color_weight_eps);
        batch.background = cfg_.background.cast<float>();
        batch.forward(s.field, rays, jitter);
        double loss = 0;
        std::vector<Eigen::Vector3f> gc(nr);
        for (int r = 0; r < nr; ++r) {
            const Eigen::Vector3f d = batch.results[r].color - gt[r];
            loss += double(d.squaredNorm());
            gc[r] = float(2.0 * weight) * d;
        }
        batch.backward(s.field, gc, gfield);
        return loss;
    }

    void after_step(long it) {
        TrainState &s = state_;
        const DensifyConfig &dc = cfg_.densify;
        if (!in_warmup(it) && !s.splats.empty()) {
            auto log = adaptive_density_control(s.splats, s.accum, dc, data_->dataset.scene_radius, int(it), s.rng);
            if (log) {
                remap(s.splat_moments.m, *log, Splat<float>::zero());
                remap(s.splat_moments.v, *log, Splat<float>::zero());
                if (log->reset > 0)
                    for (std::size_t i = 0; i < s.splats.size(); ++i) {
                        s.splat_moments.m[i].opacity_logit = 0.f;
                        s.splat_moments.v[i].opacity_logit = 0.f;
                    }
                if (s.accum.size() != s.splats.size()) s.accum.resize(s.splats.size());
                emit({{"iteration", it},     {"op", "densify"},      {"cloned", log->cloned}, {"split", log->split},
                      {"pruned", log->pruned}, {"reset", log->reset}, {"splats", s.splats.size()}});
            }
        }
        if (cfg_.harvest)
            for (int h : dc.harvest_iterations)
                if (h == it) {
                    const HarvestReport r = harvest_now();
                    emit({{"iteration", it},          {"op", "harvest"},       {"rays", r.rays_cast},
                          {"passing", r.passing_tau}, {"in_bounds", r.in_bounds}, {"added", r.added},
                          {"capped", r.capped},       {"splats", s.splats.size()}});
                }
        if (cfg_.warp_enabled && it >= cfg_.warmup_iterations && (it - cfg_.warmup_iterations) % cfg_.virtual_interval == 0)
            regenerate_virtual_views(it);
    }

    void check_finite(double v, const char *name, long it, nlohmann::json extra) const {
        if (std::isfinite(v)) return;
        extra["iteration"] = it;
        extra["term"]      = name;
        extra["value"]     = std::isnan(v) ? "nan" : "inf";
        extra["splats"]    = state_.splats.size();
        throw NonFiniteLoss("non-finite " + std::string(name) + " at iteration " + std::to_string(it), extra);
    }

    void emit(const nlohmann::json &j) const {
        if (events_) events_(j);
    }

    const TrainingData *data_;
    TrainConfig cfg_;
    TrainState state_;
    EventSink events_;
};

} // namespace hogs
