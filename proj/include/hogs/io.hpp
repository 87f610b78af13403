// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Datasets, file formats and images.
//
//   manifest   JSON Lines, one frame per line
//   *.hogs     splat set: "HOGS", u32 version, u64 count, 14 f32 per splat
//   *.hogf     field checkpoint: "HOGF", u32 version, config, layer sizes, f32 weights
//   *.hogo     optimizer moments
//
// All binary numbers are little-endian.
//
#pragma once

#include <hogs/field.hpp>
#include <hogs/optimizer.hpp>

#include <json.hpp>
#include <png.h>

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>

namespace hogs {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

/// Reads an 8-bit PNG as RGB in [0, 1]. Gray is replicated, alpha dropped.
inline Image<float> read_png(const fs::path &path) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw IoError("cannot read PNG " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    Image<float> out(int(img.width), int(img.height), 3);
    for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = float(buf[i]) / 255.0f;
    return out;
}

template <typename T> std::vector<std::uint8_t> to_bytes8(const Image<T> &img) {
    std::vector<std::uint8_t> b(img.size());
    for (std::size_t i = 0; i < b.size(); ++i)
        b[i] = std::uint8_t(std::lround(std::clamp(double(img.data[i]), 0.0, 1.0) * 255.0));
    return b;
}

/// Writes a 1- or 3-channel image as 8-bit PNG (values clamped to [0, 1]).
template <typename T> void write_png(const fs::path &path, const Image<T> &img) {
    HOGS_CHECK(img.channels == 1 || img.channels == 3, "write_png supports 1 or 3 channels");
    png_image p;
    std::memset(&p, 0, sizeof p);
    p.version = PNG_IMAGE_VERSION;
    p.width   = png_uint_32(img.width);
    p.height  = png_uint_32(img.height);
    p.format  = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    const auto bytes = to_bytes8(img);
    if (!png_image_write_to_file(&p, path.string().c_str(), 0, bytes.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + p.message);
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct Frame {
    int index = 0;
    fs::path image; // absolute, or relative to the manifest directory when written
    Camera camera;
    bool operator==(const Frame &) const = default;
};

struct Dataset {
    std::vector<Frame> frames;
    Eigen::Vector3d center = Eigen::Vector3d::Zero(); // centroid of camera centers
    double scene_radius    = 1.0;

    static bool is_test_index(int index) { return index % 10 == 0; }

    std::vector<const Frame *> train_frames() const {
        std::vector<const Frame *> v;
        for (const auto &f : frames)
            if (!is_test_index(f.index)) v.push_back(&f);
        return v;
    }
    std::vector<const Frame *> test_frames() const {
        std::vector<const Frame *> v;
        for (const auto &f : frames)
            if (is_test_index(f.index)) v.push_back(&f);
        return v;
    }
    SceneFrame scene_frame() const { return {center, scene_radius}; }

    /// Centroid of camera centers and 1.1 x the largest distance from it.
    void compute_extent() {
        center.setZero();
        if (frames.empty()) return;
        for (const auto &f : frames) center += f.camera.center();
        center /= double(frames.size());
        double r = 0;
        for (const auto &f : frames) r = std::max(r, (f.camera.center() - center).norm());
        scene_radius = r > 0 ? 1.1 * r : 1.0;
    }
};

inline nlohmann::json frame_to_json(const Frame &f, const fs::path &image) {
    const Camera &c = f.camera;
    std::vector<double> m(16, 0.0);
    for (int r = 0; r < 3; ++r) {
        for (int k = 0; k < 3; ++k) m[r * 4 + k] = c.rotation_w2c(r, k);
        m[r * 4 + 3] = c.translation_w2c[r];
    }
    m[15] = 1.0;
    return {{"frame", f.index},   {"image", image.generic_string()}, {"camera_id", c.camera_id},
            {"width", c.width},   {"height", c.height},              {"fx", c.fx},
            {"fy", c.fy},         {"cx", c.cx},                      {"cy", c.cy},
            {"near", c.near},     {"far", c.far},                    {"w2c", m}};
}

/// Parses one manifest record into a camera (no image check).
inline Frame frame_from_json(const nlohmann::json &j) {
    Frame f;
    f.index = j.at("frame").get<int>();
    f.image = j.value("image", std::string());
    Camera &c = f.camera;
    c.camera_id = j.value("camera_id", std::string("cam0"));
    c.width     = j.at("width").get<int>();
    c.height    = j.at("height").get<int>();
    c.fx        = j.at("fx").get<double>();
    c.fy        = j.at("fy").get<double>();
    c.cx        = j.at("cx").get<double>();
    c.cy        = j.at("cy").get<double>();
    c.near      = j.value("near", 0.01);
    c.far       = j.value("far", 100.0);
    const auto m = j.at("w2c").get<std::vector<double>>();
    if (m.size() != 16) throw IoError("w2c must have 16 entries");
    for (int r = 0; r < 3; ++r) {
        for (int k = 0; k < 3; ++k) c.rotation_w2c(r, k) = m[r * 4 + k];
        c.translation_w2c[r] = m[r * 4 + 3];
    }
    return f;
}

/// Loads and validates a manifest. Image paths are resolved against the manifest's directory.
inline Dataset load_dataset(const fs::path &manifest, bool require_images = true) {
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open manifest " + manifest.string());
    const fs::path dir = manifest.parent_path();
    Dataset ds;
    std::set<int> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#')
            continue;
        auto fail = [&](const std::string &why) {
            throw IoError(manifest.string() + ":" + std::to_string(lineno) + ": " + why);
        };
        Frame f;
        try {
            f = frame_from_json(nlohmann::json::parse(line));
        } catch (const IoError &e) {
            fail(e.what());
        } catch (const std::exception &e) {
            fail(std::string("malformed record: ") + e.what());
        }
        if (f.camera.orthonormality_error() > 1e-3)
            fail("rotation is not orthonormal (error " + std::to_string(f.camera.orthonormality_error()) + ")");
        try {
            f.camera.validate(1e-3);
        } catch (const ContractError &e) {
            fail(e.what());
        }
        if (!seen.insert(f.index).second) fail("duplicate frame index " + std::to_string(f.index));
        if (!f.image.empty() && f.image.is_relative()) f.image = dir / f.image;
        if (require_images && (f.image.empty() || !fs::exists(f.image)))
            fail("missing image file " + f.image.string());
        ds.frames.push_back(std::move(f));
    }
    if (ds.frames.empty()) throw IoError("manifest " + manifest.string() + " lists no frames");
    ds.compute_extent();
    return ds;
}

/// Writes one record per frame; image paths are written relative to the manifest when possible.
inline void write_manifest(const Dataset &ds, const fs::path &manifest) {
    std::ofstream out(manifest);
    if (!out) throw IoError("cannot write manifest " + manifest.string());
    const fs::path dir = fs::absolute(manifest).parent_path();
    for (const auto &f : ds.frames) {
        fs::path img = f.image;
        if (!img.empty() && img.is_absolute()) {
            const fs::path rel = img.lexically_relative(dir);
            if (!rel.empty() && *rel.begin() != "..") img = rel;
        }
        out << frame_to_json(f, img).dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Binary helpers
// ---------------------------------------------------------------------------

namespace detail {

class BinWriter {
  public:
    explicit BinWriter(const fs::path &p) : path_(p), out_(p, std::ios::binary) {
        if (!out_) throw IoError("cannot write " + p.string());
    }
    template <typename V> void put(V v) { out_.write(reinterpret_cast<const char *>(&v), sizeof v); }
    void magic(const char *m) { out_.write(m, 4); }
    template <typename V> void put_all(std::span<const V> v) {
        out_.write(reinterpret_cast<const char *>(v.data()), std::streamsize(v.size_bytes()));
    }
    void finish() {
        out_.flush();
        if (!out_) throw IoError("write failed for " + path_.string());
    }

  private:
    fs::path path_;
    std::ofstream out_;
};

class BinReader {
  public:
    explicit BinReader(const fs::path &p) : path_(p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw IoError("cannot open " + p.string());
        buf_.assign(std::istreambuf_iterator<char>(in), {});
    }
    void expect_magic(const char *m) {
        need(4);
        if (std::memcmp(buf_.data() + pos_, m, 4) != 0)
            throw IoError(path_.string() + ": bad magic (expected " + std::string(m, 4) + ")");
        pos_ += 4;
    }
    template <typename V> V get() {
        need(sizeof(V));
        V v;
        std::memcpy(&v, buf_.data() + pos_, sizeof v);
        pos_ += sizeof v;
        return v;
    }
    template <typename V> void get_all(std::span<V> v) {
        need(v.size_bytes());
        std::memcpy(v.data(), buf_.data() + pos_, v.size_bytes());
        pos_ += v.size_bytes();
    }
    std::size_t remaining() const { return buf_.size() - pos_; }
    const fs::path &path() const { return path_; }

  private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw IoError(path_.string() + ": truncated file");
    }
    fs::path path_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

inline void put_splat(std::vector<float> &v, const Splat<float> &s) {
    for (int i = 0; i < 3; ++i) v.push_back(s.position[i]);
    for (int i = 0; i < 3; ++i) v.push_back(s.log_scale[i]);
    for (int i = 0; i < 4; ++i) v.push_back(s.rotation[i]);
    v.push_back(s.opacity_logit);
    for (int i = 0; i < 3; ++i) v.push_back(s.base_color_logit[i]);
}

inline Splat<float> get_splat(const float *p) {
    Splat<float> s;
    s.position         = Eigen::Vector3f(p[0], p[1], p[2]);
    s.log_scale        = Eigen::Vector3f(p[3], p[4], p[5]);
    s.rotation         = Eigen::Vector4f(p[6], p[7], p[8], p[9]);
    s.opacity_logit    = p[10];
    s.base_color_logit = Eigen::Vector3f(p[11], p[12], p[13]);
    return s;
}

} // namespace detail

inline constexpr std::uint32_t kSplatFileVersion = 1;
inline constexpr std::uint32_t kFieldFileVersion = 1;
inline constexpr std::uint32_t kOptimFileVersion = 1;
inline constexpr int kFloatsPerSplat             = 14;
inline constexpr int kShDegree3FloatsPerSplat    = 3 + 3 + 4 + 1 + 48;

inline std::uint64_t splat_file_size(std::uint64_t count) { return 16 + std::uint64_t(kFloatsPerSplat) * 4 * count; }

// ---------------------------------------------------------------------------
// Splat file
// ---------------------------------------------------------------------------

inline void save_splats(const std::vector<Splat<float>> &splats, const fs::path &path) {
    detail::BinWriter w(path);
    w.magic("HOGS");
    w.put<std::uint32_t>(kSplatFileVersion);
    w.put<std::uint64_t>(splats.size());
    std::vector<float> v;
    v.reserve(splats.size() * kFloatsPerSplat);
    for (const auto &s : splats) detail::put_splat(v, s);
    w.put_all<float>(v);
    w.finish();
}

inline std::vector<Splat<float>> load_splats(const fs::path &path) {
    detail::BinReader r(path);
    r.expect_magic("HOGS");
    const auto version = r.get<std::uint32_t>();
    if (version != kSplatFileVersion)
        throw IoError(path.string() + ": unsupported splat file version " + std::to_string(version));
    const auto count = r.get<std::uint64_t>();
    if (r.remaining() != count * kFloatsPerSplat * 4)
        throw IoError(path.string() + ": payload size does not match count " + std::to_string(count));
    std::vector<float> v(count * kFloatsPerSplat);
    r.get_all<float>(v);
    std::vector<Splat<float>> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = detail::get_splat(v.data() + i * kFloatsPerSplat);
    return out;
}

// ---------------------------------------------------------------------------
// Field checkpoint
// ---------------------------------------------------------------------------

/// Header: L, T, F, then base/max resolution, SH degree, density bias, scene frame, and
/// (in, out) for every layer, followed by the f32 weights in declaration order.
inline void save_field(const FieldParams<float> &p, const fs::path &path) {
    const FieldConfig &c = p.config;
    detail::BinWriter w(path);
    w.magic("HOGF");
    w.put<std::uint32_t>(kFieldFileVersion);
    w.put<std::uint32_t>(std::uint32_t(c.levels));
    w.put<std::uint32_t>(c.table_size());
    w.put<std::uint32_t>(std::uint32_t(c.features_per_level));
    w.put<double>(c.base_resolution);
    w.put<double>(c.max_resolution);
    w.put<std::uint32_t>(std::uint32_t(c.sh_degree));
    w.put<double>(c.density_bias);
    for (int i = 0; i < 3; ++i) w.put<double>(p.frame.center[i]);
    w.put<double>(p.frame.radius);
    w.put<std::uint32_t>(std::uint32_t(p.density_layers.size()));
    for (const auto &l : p.density_layers) {
        w.put<std::uint32_t>(std::uint32_t(l.in));
        w.put<std::uint32_t>(std::uint32_t(l.out));
    }
    w.put<std::uint32_t>(std::uint32_t(p.color_layers.size()));
    for (const auto &l : p.color_layers) {
        w.put<std::uint32_t>(std::uint32_t(l.in));
        w.put<std::uint32_t>(std::uint32_t(l.out));
    }
    w.put<std::uint64_t>(p.values.size());
    w.put_all<float>(p.values);
    w.finish();
}

inline FieldParams<float> load_field(const fs::path &path) {
    detail::BinReader r(path);
    r.expect_magic("HOGF");
    const auto version = r.get<std::uint32_t>();
    if (version != kFieldFileVersion)
        throw IoError(path.string() + ": unsupported field checkpoint version " + std::to_string(version));
    FieldConfig c;
    c.levels = int(r.get<std::uint32_t>());
    const auto table = r.get<std::uint32_t>();
    if (table == 0 || (table & (table - 1)) != 0) throw IoError(path.string() + ": table size must be a power of two");
    c.log2_table_size    = std::countr_zero(table);
    c.features_per_level = int(r.get<std::uint32_t>());
    c.base_resolution    = r.get<double>();
    c.max_resolution     = r.get<double>();
    c.sh_degree          = int(r.get<std::uint32_t>());
    c.density_bias       = r.get<double>();
    SceneFrame frame;
    for (int i = 0; i < 3; ++i) frame.center[i] = r.get<double>();
    frame.radius = r.get<double>();
    auto read_layers = [&]() {
        const auto n = r.get<std::uint32_t>();
        if (n < 2 || n > 64) throw IoError(path.string() + ": invalid layer count");
        std::vector<std::pair<int, int>> l(n);
        for (auto &[in, out] : l) {
            in  = int(r.get<std::uint32_t>());
            out = int(r.get<std::uint32_t>());
        }
        return l;
    };
    const auto dl = read_layers();
    const auto cl = read_layers();
    c.density_hidden        = dl.front().second;
    c.density_hidden_layers = int(dl.size()) - 1;
    c.geometry_features     = dl.back().second - 1;
    c.color_hidden          = cl.front().second;
    c.color_hidden_layers   = int(cl.size()) - 1;
    FieldParams<float> p;
    try {
        p = FieldParams<float>(c, frame);
    } catch (const ContractError &e) {
        throw IoError(path.string() + ": invalid field configuration: " + e.what());
    }
    auto same = [](const std::vector<DenseLayer> &a, const std::vector<std::pair<int, int>> &b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].in != b[i].first || a[i].out != b[i].second) return false;
        return true;
    };
    if (!same(p.density_layers, dl) || !same(p.color_layers, cl))
        throw IoError(path.string() + ": layer sizes are inconsistent with the configuration");
    const auto count = r.get<std::uint64_t>();
    if (count != p.values.size() || r.remaining() != count * 4)
        throw IoError(path.string() + ": weight payload size mismatch");
    r.get_all<float>(p.values);
    return p;
}

// ---------------------------------------------------------------------------
// Optimizer state
// ---------------------------------------------------------------------------

struct OptimizerState {
    long step = 0;
    SplatMoments<float> splats;
    std::vector<float> field_m, field_v;
    bool operator==(const OptimizerState &o) const {
        return step == o.step && splats.m == o.splats.m && splats.v == o.splats.v && field_m == o.field_m &&
               field_v == o.field_v;
    }
};

inline void save_optimizer(const OptimizerState &s, const fs::path &path) {
    detail::BinWriter w(path);
    w.magic("HOGO");
    w.put<std::uint32_t>(kOptimFileVersion);
    w.put<std::int64_t>(s.step);
    w.put<std::uint64_t>(s.splats.size());
    std::vector<float> v;
    for (const auto &m : s.splats.m) detail::put_splat(v, m);
    for (const auto &m : s.splats.v) detail::put_splat(v, m);
    w.put_all<float>(v);
    w.put<std::uint64_t>(s.field_m.size());
    w.put_all<float>(s.field_m);
    w.put_all<float>(s.field_v);
    w.finish();
}

inline OptimizerState load_optimizer(const fs::path &path) {
    detail::BinReader r(path);
    r.expect_magic("HOGO");
    const auto version = r.get<std::uint32_t>();
    if (version != kOptimFileVersion)
        throw IoError(path.string() + ": unsupported optimizer file version " + std::to_string(version));
    OptimizerState s;
    s.step       = long(r.get<std::int64_t>());
    const auto n = r.get<std::uint64_t>();
    if (n > r.remaining() / (2 * kFloatsPerSplat * 4)) throw IoError(path.string() + ": truncated file");
    std::vector<float> v(n * 2 * kFloatsPerSplat);
    r.get_all<float>(v);
    for (std::size_t i = 0; i < n; ++i) s.splats.m.push_back(detail::get_splat(v.data() + i * kFloatsPerSplat));
    for (std::size_t i = 0; i < n; ++i)
        s.splats.v.push_back(detail::get_splat(v.data() + (n + i) * kFloatsPerSplat));
    const auto f = r.get<std::uint64_t>();
    if (r.remaining() != f * 8) throw IoError(path.string() + ": field moment payload size mismatch");
    s.field_m.resize(f);
    s.field_v.resize(f);
    r.get_all<float>(s.field_m);
    r.get_all<float>(s.field_v);
    return s;
}

// ---------------------------------------------------------------------------
// Metrics report
// ---------------------------------------------------------------------------

struct ViewMetrics {
    std::string name;
    std::string camera_id;
    double psnr = 0, ssim = 0;
};

struct MetricsReport {
    std::vector<ViewMetrics> views;
    double mean_psnr = 0, mean_ssim = 0;

    void finalize() {
        HOGS_CHECK(!views.empty(), "metrics report needs at least one view");
        mean_psnr = mean_ssim = 0;
        for (const auto &v : views) {
            mean_psnr += v.psnr;
            mean_ssim += v.ssim;
        }
        mean_psnr /= double(views.size());
        mean_ssim /= double(views.size());
    }
};

inline std::string format_report(const MetricsReport &r) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "view" << std::setw(12) << "camera" << std::right << std::setw(12) << "psnr"
       << std::setw(12) << "ssim" << "\n";
    os << std::fixed;
    for (const auto &v : r.views)
        os << std::left << std::setw(16) << v.name << std::setw(12) << v.camera_id << std::right
           << std::setprecision(4) << std::setw(12) << v.psnr << std::setprecision(6) << std::setw(12) << v.ssim
           << "\n";
    os << std::left << std::setw(16) << "mean" << std::setw(12) << "-" << std::right << std::setprecision(4)
       << std::setw(12) << r.mean_psnr << std::setprecision(6) << std::setw(12) << r.mean_ssim << "\n";
    return os.str();
}

inline void write_report(const MetricsReport &r, const fs::path &path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report " + path.string());
    out << format_report(r);
}

/// Parses the "mean" row of a report written by write_report.
inline std::pair<double, double> read_report_means(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report " + path.string());
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream is(line);
        std::string name, cam;
        double p, s;
        if (is >> name >> cam >> p >> s && name == "mean") return {p, s};
    }
    throw IoError(path.string() + ": no mean row");
}

// ---------------------------------------------------------------------------
// Line-delimited records
// ---------------------------------------------------------------------------

/// Appends one JSON object per line. Doubles are written in shortest round-trip form.
class JsonLinesWriter {
  public:
    JsonLinesWriter() = default;
    explicit JsonLinesWriter(const fs::path &p) : out_(std::make_unique<std::ofstream>(p)) {
        if (!*out_) throw IoError("cannot write " + p.string());
    }
    bool is_open() const { return out_ != nullptr; }
    void write(const nlohmann::json &j) {
        if (out_) *out_ << j.dump() << "\n";
    }
    void flush() {
        if (out_) out_->flush();
    }

  private:
    std::unique_ptr<std::ofstream> out_;
};

inline std::vector<nlohmann::json> read_json_lines(const fs::path &p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    return out;
}

inline std::vector<char> read_file_bytes(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace hogs
