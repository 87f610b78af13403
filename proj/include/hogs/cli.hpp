// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: synth, train, render, eval.
//
#pragma once

#include <hogs/synth.hpp>
#include <hogs/trainer.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hogs {

/// Field size presets: "full" is the default configuration, "compact" a small grid for desk-scale scenes.
inline FieldConfig field_preset(const std::string &name) {
    FieldConfig c;
    if (name == "full") return c;
    if (name == "compact") {
        c.levels          = 8;
        c.log2_table_size = 11;
        c.base_resolution = 16;
        c.max_resolution  = 256;
        return c;
    }
    throw ContractError("unknown field preset '" + name + "' (expected full or compact)");
}

namespace detail {

inline std::vector<int> parse_int_list(const std::string &s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

inline Eigen::Vector3d parse_vec3(const std::string &s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) v.push_back(std::stod(tok));
    HOGS_CHECK(v.size() == 3, "expected three comma-separated numbers, got '" << s << "'");
    return {v[0], v[1], v[2]};
}

/// Whitespace-separated x y z per line; '#' comments and PLY-style headers are skipped.
inline std::vector<Eigen::Vector3d> read_points(const fs::path &p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open point list " + p.string());
    std::vector<Eigen::Vector3d> pts;
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
        if (line.rfind("ply", 0) == 0) header = true;
        if (header) {
            if (line.rfind("end_header", 0) == 0) header = false;
            continue;
        }
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        Eigen::Vector3d x;
        if (is >> x[0] >> x[1] >> x[2]) pts.push_back(x);
    }
    return pts;
}

inline ColorMode parse_color_mode(const std::string &s) {
    if (s == "residual") return ColorMode::residual;
    if (s == "field-only") return ColorMode::field_only;
    throw ContractError("unknown color mode '" + s + "'");
}

/// Training allocates and frees multi-megabyte buffers every step; keep them on the heap instead of
/// round-tripping through mmap.
inline void keep_large_allocations() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

inline void write_checkpoint(const Trainer &t, const fs::path &dir) {
    fs::create_directories(dir);
    save_splats(t.state().splats, dir / "splats.hogs");
    save_field(t.state().field, dir / "field.hogf");
    save_optimizer(t.state().optimizer_state(), dir / "optimizer.hogo");
}

inline std::vector<Camera> load_cameras(const fs::path &p) {
    if (p.extension() == ".jsonl") {
        std::vector<Camera> cams;
        for (const auto &f : load_dataset(p, false).frames) cams.push_back(f.camera);
        return cams;
    }
    std::ifstream in(p);
    if (!in) throw IoError("cannot open camera file " + p.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const std::exception &e) {
        throw IoError(p.string() + ": " + e.what());
    }
    Camera c = frame_from_json(j).camera;
    c.validate(1e-3);
    return {c};
}

} // namespace detail

/// Runs the tool. Returns the process exit code.
inline int run_cli(int argc, const char *const *argv, std::ostream &out = std::cout, std::ostream &err = std::cerr) {
    CLI::App app{"hogs: Gaussian splatting with a hash-grid radiance field"};
    app.require_subcommand(1);

    // synth
    std::string spec_path, synth_out;
    auto *synth = app.add_subcommand("synth", "Render a procedural scene with the reference ray tracer");
    synth->add_option("--spec", spec_path, "Scene description (JSON)")->required();
    synth->add_option("--out", synth_out, "Output directory")->required();

    // train
    std::string data_path, train_out, harvest_list = "5000,15000,25000", color_mode = "residual";
    std::string field_name = "full", init_points_path;
    TrainConfig tc;
    bool no_warp = false, no_harvest = false, deterministic = false;
    int checkpoint_interval = 5000, threads = 0;
    auto *train = app.add_subcommand("train", "Optimize splats and field on a dataset");
    train->add_option("--data", data_path, "Dataset manifest")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--iters", tc.total_iterations, "Total iterations")->capture_default_str();
    train->add_option("--lambda", tc.lambda_ssim, "SSIM weight in the splat loss")->capture_default_str();
    train->add_option("--lambda1", tc.lambda_field, "Field loss weight")->capture_default_str();
    train->add_option("--tau", tc.densify.tau, "Harvest density threshold")->capture_default_str();
    train->add_option("--harvest", harvest_list, "Harvest iterations (comma separated)")->capture_default_str();
    train->add_flag("--no-warp", no_warp, "Disable virtual views");
    train->add_flag("--no-harvest", no_harvest, "Disable field-driven densification");
    train->add_option("--color-mode", color_mode, "residual | field-only")->capture_default_str();
    train->add_option("--seed", tc.seed, "Random seed")->capture_default_str();
    train->add_flag("--deterministic", deterministic, "Fixed-order reductions (always on)");
    train->add_option("--warmup", tc.warmup_iterations, "Field-only warm-up iterations")->capture_default_str();
    train->add_option("--rays", tc.rays_per_batch, "Rays per field batch")->capture_default_str();
    train->add_option("--samples", tc.field_samples, "Samples per field ray")->capture_default_str();
    train->add_option("--color-eps", tc.color_weight_eps, "Skip field colors below this sample weight")
        ->capture_default_str();
    train->add_option("--field", field_name, "Field size preset: full | compact")->capture_default_str();
    train->add_option("--densify-until", tc.densify.densify_until, "Last densification iteration")
        ->capture_default_str();
    train->add_option("--opacity-reset", tc.densify.opacity_reset_interval, "Opacity reset interval")
        ->capture_default_str();
    train->add_option("--grad-threshold", tc.densify.grad_threshold, "Positional gradient threshold for clone/split")
        ->capture_default_str();
    train->add_option("--max-splats", tc.densify.max_splats, "Splat count cap")->capture_default_str();
    train->add_option("--virtual-interval", tc.virtual_interval, "Virtual view regeneration interval")
        ->capture_default_str();
    train->add_option("--virtual-every", tc.virtual_every, "Use a virtual view every k-th step")
        ->capture_default_str();
    train->add_option("--virtual-weight", tc.virtual_weight, "Virtual view loss weight")->capture_default_str();
    train->add_option("--random-init", tc.random_init, "Start from N random splats")->capture_default_str();
    train->add_option("--init-points", init_points_path, "Start from a point list (x y z per line)");
    train->add_option("--checkpoint-interval", checkpoint_interval, "Checkpoint cadence")->capture_default_str();
    train->add_option("--threads", threads, "Worker threads (0 = hardware)")->capture_default_str();

    // render
    std::string scene_path, field_path, camera_path, render_out, render_mode = "residual", bg = "1,1,1";
    auto *render = app.add_subcommand("render", "Render a trained scene");
    render->add_option("--scene", scene_path, "Splat file")->required();
    render->add_option("--field", field_path, "Field checkpoint")->required();
    render->add_option("--camera", camera_path, "Manifest (.jsonl) or single camera record (.json)")->required();
    render->add_option("--out", render_out, "Output directory")->required();
    render->add_option("--color-mode", render_mode, "residual | field-only")->capture_default_str();
    render->add_option("--background", bg, "Background color r,g,b")->capture_default_str();

    // eval
    std::string eval_scene, eval_field, eval_data, report_path, eval_mode = "residual", split = "test";
    auto *ev = app.add_subcommand("eval", "Compute PSNR/SSIM of a trained scene");
    ev->add_option("--scene", eval_scene, "Splat file")->required();
    ev->add_option("--field", eval_field, "Field checkpoint")->required();
    ev->add_option("--data", eval_data, "Dataset manifest")->required();
    ev->add_option("--report", report_path, "Report output path")->required();
    ev->add_option("--color-mode", eval_mode, "residual | field-only")->capture_default_str();
    ev->add_option("--split", split, "test | train | all")->capture_default_str();
    ev->add_option("--background", bg, "Background color r,g,b")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError &e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return e.get_exit_code() ? e.get_exit_code() : 2;
    }

    auto usage_error = [&](const std::string &msg, CLI::App *sub) {
        err << "error: " << msg << "\n\n" << sub->help();
        return 2;
    };

    try {
        if (*synth) {
            const SyntheticSceneSpec spec = load_scene_spec(spec_path);
            const Dataset ds = generate_synthetic(spec, synth_out);
            out << "wrote " << ds.frames.size() << " frames to " << synth_out << "\n";
            return 0;
        }

        if (*train) {
            if (threads > 0) set_num_threads(threads);
            detail::keep_large_allocations();
            tc.color_mode   = detail::parse_color_mode(color_mode);
            tc.field        = field_preset(field_name);
            tc.harvest      = !no_harvest;
            tc.warp_enabled = !no_warp;
            tc.densify.harvest_iterations.clear();
            for (int h : detail::parse_int_list(harvest_list))
                if (h <= tc.total_iterations) tc.densify.harvest_iterations.push_back(h);
            if (!init_points_path.empty()) tc.init_points = detail::read_points(init_points_path);
            if (tc.warmup_iterations > tc.total_iterations) tc.warmup_iterations = tc.total_iterations;

            const TrainingData data = TrainingData::load(data_path);
            const fs::path dir(train_out);
            fs::create_directories(dir);
            Trainer trainer(data, tc);
            JsonLinesWriter losses(dir / "losses.jsonl"), events(dir / "events.jsonl");
            trainer.set_event_sink([&](const nlohmann::json &j) { events.write(j); });
            {
                nlohmann::json cfg{{"iters", tc.total_iterations},   {"warmup", tc.warmup_iterations},
                                   {"lambda", tc.lambda_ssim},       {"lambda1", tc.lambda_field},
                                   {"tau", tc.densify.tau},          {"harvest", tc.densify.harvest_iterations},
                                   {"no_warp", no_warp},             {"no_harvest", no_harvest},
                                   {"color_mode", color_mode},       {"seed", tc.seed},
                                   {"field", field_name},            {"rays", tc.rays_per_batch},
                                   {"samples", tc.field_samples},    {"random_init", tc.random_init},
                                   {"deterministic", deterministic}, {"scene_radius", data.dataset.scene_radius}};
                std::ofstream(dir / "config.json") << cfg.dump(2) << "\n";
            }
            const auto t0 = std::chrono::steady_clock::now();
            try {
                for (int i = 0; i < tc.total_iterations; ++i) {
                    const LossReport r = trainer.step();
                    losses.write(r.to_json());
                    if (checkpoint_interval > 0 && r.iteration % checkpoint_interval == 0 &&
                        r.iteration < tc.total_iterations) {
                        char name[32];
                        std::snprintf(name, sizeof name, "iter_%06ld", r.iteration);
                        detail::write_checkpoint(trainer, dir / "checkpoints" / name);
                    }
                }
            } catch (const NonFiniteLoss &e) {
                std::ofstream(dir / "nonfinite_dump.json") << e.dump.dump(2) << "\n";
                err << "error: " << e.what() << " (details in " << (dir / "nonfinite_dump.json").string() << ")\n";
                return 3;
            }
            losses.flush();
            events.flush();
            detail::write_checkpoint(trainer, dir);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            out << "trained " << tc.total_iterations << " iterations in " << secs << " s, "
                << trainer.state().splats.size() << " splats\n";
            if (!data.test.empty()) {
                const MetricsReport rep = trainer.evaluate_test();
                write_report(rep, dir / "metrics.txt");
                out << "test psnr " << rep.mean_psnr << " ssim " << rep.mean_ssim << "\n";
            }
            return 0;
        }

        if (*render) {
            const auto splats = load_splats(scene_path);
            const auto field  = load_field(field_path);
            const auto cams   = detail::load_cameras(camera_path);
            const Eigen::Vector3d background = detail::parse_vec3(bg);
            const ColorMode mode = detail::parse_color_mode(render_mode);
            fs::create_directories(render_out);
            for (std::size_t i = 0; i < cams.size(); ++i) {
                const auto img = render_splats(splats, field, cams[i], mode, background).image;
                char name[32];
                std::snprintf(name, sizeof name, "%04zu.png", i);
                write_png(fs::path(render_out) / name, img);
            }
            out << "rendered " << cams.size() << " views to " << render_out << "\n";
            return 0;
        }

        if (*ev) {
            const auto splats = load_splats(eval_scene);
            const auto field  = load_field(eval_field);
            const TrainingData data = TrainingData::load(eval_data);
            std::vector<std::size_t> frames;
            if (split == "test") frames = data.test;
            else if (split == "train") frames = data.train;
            else if (split == "all") {
                frames = data.train;
                frames.insert(frames.end(), data.test.begin(), data.test.end());
                std::sort(frames.begin(), frames.end());
            } else return usage_error("unknown split '" + split + "'", ev);
            if (frames.empty()) return usage_error("the selected split has no frames", ev);
            const MetricsReport rep =
                evaluate(splats, field, data, frames, detail::parse_color_mode(eval_mode), detail::parse_vec3(bg));
            write_report(rep, report_path);
            out << format_report(rep);
            return 0;
        }
    } catch (const IoError &e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const ContractError &e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace hogs
