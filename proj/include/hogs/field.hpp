// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
// Grid-based radiance field: multiresolution hash encoding over the
// contracted domain [-2, 2]^3, a density head producing (density,
// geometry feature) and a color head conditioned on a spherical-harmonic
// direction encoding. Includes ray quadrature (color, transmittance,
// expected depth) and the per-splat view-dependent color used by the
// rasterizer. Everything here has a hand-written reverse pass.
//
#pragma once

#include <hogs/geometry.hpp>

#include <array>
#include <cstring>
#include <span>
#include <vector>

namespace hogs {

struct FieldConfig {
    int levels                = 16;
    int log2_table_size       = 19;
    int features_per_level    = 2;
    double base_resolution    = 16;
    double max_resolution     = 2048;
    int density_hidden        = 64;
    int density_hidden_layers = 1;
    int geometry_features     = 15;
    int color_hidden          = 64;
    int color_hidden_layers   = 2;
    int sh_degree             = 4; // 1..4, sh_degree^2 coefficients
    double density_bias       = -1.0;

    int encoding_dim() const { return levels * features_per_level; }
    int sh_dim() const { return sh_degree * sh_degree; }
    std::uint32_t table_size() const { return std::uint32_t(1) << log2_table_size; }

    void validate() const {
        HOGS_CHECK(levels >= 1 && features_per_level >= 1, "field needs at least one level and feature");
        HOGS_CHECK(log2_table_size >= 1 && log2_table_size <= 30, "log2_table_size out of range");
        HOGS_CHECK(base_resolution >= 1 && max_resolution >= base_resolution, "invalid grid resolutions");
        HOGS_CHECK(density_hidden >= 1 && color_hidden >= 1 && density_hidden_layers >= 1 &&
                       color_hidden_layers >= 1,
                   "invalid network sizes");
        HOGS_CHECK(geometry_features >= 0, "geometry_features must be >= 0");
        HOGS_CHECK(sh_degree >= 1 && sh_degree <= 4, "sh_degree must be in [1, 4]");
    }

    bool operator==(const FieldConfig &) const = default;
};

/// Normalization applied to world positions before contraction.
struct SceneFrame {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    double radius          = 1.0;
    bool operator==(const SceneFrame &) const = default;
};

// ---------------------------------------------------------------------------
// Spherical-harmonic direction encoding (real basis, up to 16 coefficients)
// ---------------------------------------------------------------------------

template <typename T> std::array<T, 16> sh_basis(const Vec3<T> &d) {
    const T x = d.x(), y = d.y(), z = d.z();
    const T x2 = x * x, y2 = y * y, z2 = z * z;
    return {T(0.28209479177387814),
            T(-0.48860251190291987) * y,
            T(0.48860251190291987) * z,
            T(-0.48860251190291987) * x,
            T(1.0925484305920792) * x * y,
            T(-1.0925484305920792) * y * z,
            T(0.94617469575755997) * z2 - T(0.31539156525251999),
            T(-1.0925484305920792) * x * z,
            T(0.54627421529603959) * (x2 - y2),
            T(0.59004358992664352) * y * (-T(3) * x2 + y2),
            T(2.8906114426405538) * x * y * z,
            T(0.45704579946446572) * y * (T(1) - T(5) * z2),
            T(0.3731763325901154) * z * (T(5) * z2 - T(3)),
            T(0.45704579946446572) * x * (T(1) - T(5) * z2),
            T(1.4453057213202769) * z * (x2 - y2),
            T(0.59004358992664352) * x * (-x2 + T(3) * y2)};
}

/// dL/dd given dL/d(basis) for the first `count` coefficients.
template <typename T> Vec3<T> sh_basis_backward(const Vec3<T> &d, const T *g, int count) {
    const T x = d.x(), y = d.y(), z = d.z();
    const T x2 = x * x, y2 = y * y, z2 = z * z;
    std::array<T, 16> gg{};
    for (int i = 0; i < count; ++i) gg[i] = g[i];
    Vec3<T> r = Vec3<T>::Zero();
    r.y() += T(-0.48860251190291987) * gg[1];
    r.z() += T(0.48860251190291987) * gg[2];
    r.x() += T(-0.48860251190291987) * gg[3];
    r.x() += T(1.0925484305920792) * y * gg[4];
    r.y() += T(1.0925484305920792) * x * gg[4];
    r.y() += T(-1.0925484305920792) * z * gg[5];
    r.z() += T(-1.0925484305920792) * y * gg[5];
    r.z() += T(2) * T(0.94617469575755997) * z * gg[6];
    r.x() += T(-1.0925484305920792) * z * gg[7];
    r.z() += T(-1.0925484305920792) * x * gg[7];
    r.x() += T(2) * T(0.54627421529603959) * x * gg[8];
    r.y() += T(-2) * T(0.54627421529603959) * y * gg[8];
    r.x() += T(0.59004358992664352) * (-T(6) * x * y) * gg[9];
    r.y() += T(0.59004358992664352) * (-T(3) * x2 + T(3) * y2) * gg[9];
    r.x() += T(2.8906114426405538) * y * z * gg[10];
    r.y() += T(2.8906114426405538) * x * z * gg[10];
    r.z() += T(2.8906114426405538) * x * y * gg[10];
    r.y() += T(0.45704579946446572) * (T(1) - T(5) * z2) * gg[11];
    r.z() += T(0.45704579946446572) * y * (-T(10) * z) * gg[11];
    r.z() += T(0.3731763325901154) * (T(15) * z2 - T(3)) * gg[12];
    r.x() += T(0.45704579946446572) * (T(1) - T(5) * z2) * gg[13];
    r.z() += T(0.45704579946446572) * x * (-T(10) * z) * gg[13];
    r.x() += T(1.4453057213202769) * z * T(2) * x * gg[14];
    r.y() += T(1.4453057213202769) * z * T(-2) * y * gg[14];
    r.z() += T(1.4453057213202769) * (x2 - y2) * gg[14];
    r.x() += T(0.59004358992664352) * (-T(3) * x2 + T(3) * y2) * gg[15];
    r.y() += T(0.59004358992664352) * x * T(6) * y * gg[15];
    return r;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct DenseLayer {
    std::size_t weight = 0; // out x in, column-major
    std::size_t bias   = 0;
    int in = 0, out = 0;
};

/// All field weights in one flat buffer (hash tables, then density layers, then color layers).
template <typename T> class FieldParams {
  public:
    FieldConfig config;
    SceneFrame frame;
    std::vector<T> values;

    std::vector<std::size_t> level_offset; // into values
    std::vector<std::uint32_t> level_size; // entries per level
    std::vector<int> level_resolution;
    std::vector<std::uint8_t> level_dense;
    std::size_t hash_param_count = 0;
    std::vector<DenseLayer> density_layers, color_layers;

    FieldParams() = default;
    FieldParams(const FieldConfig &cfg, const SceneFrame &fr) : config(cfg), frame(fr) {
        config.validate();
        HOGS_CHECK(frame.radius > 0, "scene radius must be positive");
        const int levels = config.levels;
        const double growth =
            levels > 1 ? std::exp((std::log(config.max_resolution) - std::log(config.base_resolution)) / (levels - 1))
                       : 1.0;
        std::size_t off = 0;
        for (int l = 0; l < levels; ++l) {
            const int res = int(std::floor(config.base_resolution * std::pow(growth, l) + 1e-9));
            const std::uint64_t dense = std::uint64_t(res + 1) * (res + 1) * (res + 1);
            const bool is_dense = dense <= config.table_size();
            const std::uint32_t size = is_dense ? std::uint32_t(dense) : config.table_size();
            level_resolution.push_back(res);
            level_dense.push_back(is_dense);
            level_size.push_back(size);
            level_offset.push_back(off);
            off += std::size_t(size) * config.features_per_level;
        }
        hash_param_count = off;
        auto add_layer = [&](std::vector<DenseLayer> &dst, int in, int out) {
            DenseLayer l{off, off + std::size_t(in) * out, in, out};
            off += std::size_t(in) * out + out;
            dst.push_back(l);
        };
        add_layer(density_layers, config.encoding_dim(), config.density_hidden);
        for (int i = 1; i < config.density_hidden_layers; ++i)
            add_layer(density_layers, config.density_hidden, config.density_hidden);
        add_layer(density_layers, config.density_hidden, 1 + config.geometry_features);
        add_layer(color_layers, config.geometry_features + config.sh_dim(), config.color_hidden);
        for (int i = 1; i < config.color_hidden_layers; ++i)
            add_layer(color_layers, config.color_hidden, config.color_hidden);
        add_layer(color_layers, config.color_hidden, 3);
        values.assign(off, T(0));
    }

    std::size_t size() const { return values.size(); }

    /// Hash entries ~U(-1e-4, 1e-4); hidden layers He-uniform; the density output row and the whole
    /// color output layer start at zero, so a fresh field has constant density softplus(bias) and a
    /// zero color residual.
    void initialize(Rng &rng) {
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (std::size_t i = 0; i < hash_param_count; ++i) values[i] = T(1e-4 * u(rng));
        auto init_layer = [&](const DenseLayer &l, bool zero) {
            const double bound = std::sqrt(6.0 / l.in);
            for (std::size_t i = 0; i < std::size_t(l.in) * l.out; ++i)
                values[l.weight + i] = zero ? T(0) : T(bound * u(rng));
            for (int i = 0; i < l.out; ++i) values[l.bias + i] = T(0);
        };
        for (std::size_t k = 0; k < density_layers.size(); ++k) init_layer(density_layers[k], false);
        const DenseLayer &dout = density_layers.back();
        for (int c = 0; c < dout.in; ++c) values[dout.weight + std::size_t(c) * dout.out] = T(0);
        for (std::size_t k = 0; k < color_layers.size(); ++k)
            init_layer(color_layers[k], k + 1 == color_layers.size());
    }

    /// Index range of the raw-density output row (weights then bias), used by tests and diagnostics.
    std::vector<std::size_t> density_output_indices() const {
        const DenseLayer &l = density_layers.back();
        std::vector<std::size_t> idx;
        for (int c = 0; c < l.in; ++c) idx.push_back(l.weight + std::size_t(c) * l.out);
        idx.push_back(l.bias);
        return idx;
    }

    /// World position -> contracted coordinate -> unit grid coordinate in [0, 1]^3.
    Vec3<T> grid_coordinate(const Vec3<T> &x) const {
        const Vec3<T> n = (x - frame.center.cast<T>()) / T(frame.radius);
        return (contract(n) + Vec3<T>::Constant(T(2))) * T(0.25);
    }

    /// Transpose-Jacobian of grid_coordinate applied to g.
    Vec3<T> grid_coordinate_backward(const Vec3<T> &x, const Vec3<T> &g) const {
        const Vec3<T> n = (x - frame.center.cast<T>()) / T(frame.radius);
        return contract_jacobian(n).transpose() * g * T(0.25 / frame.radius);
    }

    template <typename U> FieldParams<U> cast() const {
        FieldParams<U> out(config, frame);
        for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Hash-grid lookups
// ---------------------------------------------------------------------------

namespace detail {

template <typename T> struct GridCell {
    std::uint32_t index[8];
    T weight[8];
    Vec3<T> frac;
};

template <typename T>
inline void grid_cell(const FieldParams<T> &p, int level, const Vec3<T> &g, GridCell<T> &cell) {
    const int res = p.level_resolution[level];
    std::uint32_t base[3];
    T w[3][2];
    for (int a = 0; a < 3; ++a) {
        const T pos = g[a] * T(res);
        int i = int(std::floor(pos));
        i = std::clamp(i, 0, res - 1);
        base[a] = std::uint32_t(i);
        cell.frac[a] = pos - T(i);
        w[a][0] = T(1) - cell.frac[a];
        w[a][1] = cell.frac[a];
    }
    if (p.level_dense[level]) {
        const std::uint32_t s1 = std::uint32_t(res + 1), s2 = s1 * s1;
        const std::uint32_t o = base[0] + base[1] * s1 + base[2] * s2;
        for (int c = 0; c < 8; ++c)
            cell.index[c] = o + std::uint32_t(c & 1) + ((c >> 1) & 1) * s1 + ((c >> 2) & 1) * s2;
    } else {
        const std::uint32_t mask = p.level_size[level] - 1;
        const std::uint32_t hx[2] = {base[0], base[0] + 1};
        const std::uint32_t hy[2] = {base[1] * 2654435761u, (base[1] + 1) * 2654435761u};
        const std::uint32_t hz[2] = {base[2] * 805459861u, (base[2] + 1) * 805459861u};
        for (int c = 0; c < 8; ++c) cell.index[c] = (hx[c & 1] ^ hy[(c >> 1) & 1] ^ hz[(c >> 2) & 1]) & mask;
    }
    for (int c = 0; c < 8; ++c) cell.weight[c] = w[0][c & 1] * w[1][(c >> 1) & 1] * w[2][(c >> 2) & 1];
}

template <typename T> MatX<T> relu(MatX<T> m) { return m.cwiseMax(T(0)); }

/// Forward through dense layers (ReLU on all but the last). acts[k] = output of layer k.
template <typename T>
void mlp_forward(const std::vector<T> &values, const std::vector<DenseLayer> &layers, const MatX<T> &input,
                 std::vector<MatX<T>> &acts) {
    acts.resize(layers.size());
    const MatX<T> *x = &input;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const DenseLayer &l = layers[k];
        Eigen::Map<const MatX<T>> wm(values.data() + l.weight, l.out, l.in);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(values.data() + l.bias, l.out);
        acts[k].resize(l.out, x->cols());
        acts[k].noalias() = wm * (*x);
        acts[k].colwise() += bv;
        if (k + 1 < layers.size()) acts[k] = acts[k].cwiseMax(T(0));
        x = &acts[k];
    }
}

/// Reverse pass; accumulates weight gradients into grad and returns dL/dinput.
template <typename T>
MatX<T> mlp_backward(const std::vector<T> &values, const std::vector<DenseLayer> &layers, const MatX<T> &input,
                     const std::vector<MatX<T>> &acts, MatX<T> grad_out, T *grad) {
    MatX<T> gin;
    for (std::size_t k = layers.size(); k-- > 0;) {
        const DenseLayer &l = layers[k];
        if (k + 1 < layers.size()) grad_out.array() *= (acts[k].array() > T(0)).template cast<T>();
        const MatX<T> &x = k == 0 ? input : acts[k - 1];
        Eigen::Map<MatX<T>> gw(grad + l.weight, l.out, l.in);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(grad + l.bias, l.out);
        // reduce into aligned temporaries: Eigen's summation order depends on destination alignment
        const MatX<T> dw = grad_out * x.transpose();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> db = grad_out.rowwise().sum();
        gw += dw;
        gb += db;
        Eigen::Map<const MatX<T>> wm(values.data() + l.weight, l.out, l.in);
        gin.resize(l.in, grad_out.cols());
        gin.noalias() = wm.transpose() * grad_out;
        grad_out.swap(gin);
    }
    return grad_out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Batched evaluation
// ---------------------------------------------------------------------------

/// Cached forward state for a batch of field queries. Columns index points.
template <typename T> class FieldBatch {
  public:
    std::vector<Vec3<T>> positions;
    std::vector<Vec3<T>> grid;
    MatX<T> encoding;                 // E x n
    std::vector<MatX<T>> density_acts;
    std::vector<T> raw_density;
    std::vector<T> sigma;

    std::vector<int> color_columns;   // points with color evaluated
    std::vector<Vec3<T>> directions;  // per colored point
    MatX<T> color_input;              // (G + S) x m
    std::vector<MatX<T>> color_acts;

    std::size_t size() const { return positions.size(); }
    std::size_t color_count() const { return color_columns.size(); }
    /// Pre-activation color output for colored point k.
    Vec3<T> color_raw(std::size_t k) const { return color_acts.back().col(Eigen::Index(k)); }

    void forward_density(const FieldParams<T> &p, std::span<const Vec3<T>> x) {
        const FieldConfig &cfg = p.config;
        const std::size_t n = x.size();
        positions.assign(x.begin(), x.end());
        grid.resize(n);
        encoding.resize(cfg.encoding_dim(), Eigen::Index(n));
        const int f = cfg.features_per_level;
        detail::GridCell<T> cell;
        for (std::size_t i = 0; i < n; ++i) {
            grid[i] = p.grid_coordinate(x[i]);
            for (int l = 0; l < cfg.levels; ++l) {
                detail::grid_cell(p, l, grid[i], cell);
                const T *table = p.values.data() + p.level_offset[l];
                for (int k = 0; k < f; ++k) {
                    T acc = T(0);
                    for (int c = 0; c < 8; ++c) acc += cell.weight[c] * table[std::size_t(cell.index[c]) * f + k];
                    encoding(l * f + k, Eigen::Index(i)) = acc;
                }
            }
        }
        detail::mlp_forward(p.values, p.density_layers, encoding, density_acts);
        raw_density.resize(n);
        sigma.resize(n);
        const MatX<T> &out = density_acts.back();
        for (std::size_t i = 0; i < n; ++i) {
            raw_density[i] = out(0, Eigen::Index(i));
            sigma[i] = softplus(raw_density[i] + T(cfg.density_bias));
        }
    }

    /// Evaluates the color head for `columns` (indices into this batch) with directions `dirs`.
    void forward_color(const FieldParams<T> &p, std::span<const int> columns, std::span<const Vec3<T>> dirs) {
        HOGS_CHECK(columns.size() == dirs.size(), "one direction per colored column required");
        const FieldConfig &cfg = p.config;
        const int g = cfg.geometry_features, s = cfg.sh_dim();
        const std::size_t m = columns.size();
        color_columns.assign(columns.begin(), columns.end());
        directions.assign(dirs.begin(), dirs.end());
        color_input.resize(g + s, Eigen::Index(m));
        const MatX<T> &dout = density_acts.back();
        for (std::size_t k = 0; k < m; ++k) {
            const Eigen::Index col = columns[k];
            for (int j = 0; j < g; ++j) color_input(j, Eigen::Index(k)) = dout(1 + j, col);
            const auto sh = sh_basis(dirs[k]);
            for (int j = 0; j < s; ++j) color_input(g + j, Eigen::Index(k)) = sh[j];
        }
        detail::mlp_forward(p.values, p.color_layers, color_input, color_acts);
    }

    void forward(const FieldParams<T> &p, std::span<const Vec3<T>> x, std::span<const Vec3<T>> dirs) {
        forward_density(p, x);
        std::vector<int> cols(x.size());
        for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = int(i);
        forward_color(p, cols, dirs);
    }

    /// Reverse pass. grad_sigma: dL/dsigma per point (may be empty); grad_color_raw: dL/d color-head
    /// output per colored point (may be empty). Field gradients accumulate into grad; position and
    /// direction gradients are written when the pointers are non-null.
    void backward(const FieldParams<T> &p, std::span<const T> grad_sigma, std::span<const Vec3<T>> grad_color_raw,
                  std::span<T> grad, std::vector<Vec3<T>> *grad_pos = nullptr,
                  std::vector<Vec3<T>> *grad_dir = nullptr) const {
        HOGS_CHECK(grad.size() == p.size(), "gradient buffer size mismatch");
        const FieldConfig &cfg = p.config;
        const std::size_t n = size();
        const int g = cfg.geometry_features, s = cfg.sh_dim();
        MatX<T> g_dout = MatX<T>::Zero(1 + g, Eigen::Index(n));
        if (!grad_sigma.empty()) {
            HOGS_CHECK(grad_sigma.size() == n, "grad_sigma size mismatch");
            for (std::size_t i = 0; i < n; ++i)
                g_dout(0, Eigen::Index(i)) = grad_sigma[i] * sigmoid(raw_density[i] + T(cfg.density_bias));
        }
        if (grad_dir) grad_dir->assign(color_count(), Vec3<T>::Zero());
        if (!grad_color_raw.empty()) {
            HOGS_CHECK(grad_color_raw.size() == color_count(), "grad_color size mismatch");
            MatX<T> go(3, Eigen::Index(color_count()));
            for (std::size_t k = 0; k < color_count(); ++k) go.col(Eigen::Index(k)) = grad_color_raw[k];
            const MatX<T> gin = detail::mlp_backward(p.values, p.color_layers, color_input, color_acts, go, grad.data());
            for (std::size_t k = 0; k < color_count(); ++k) {
                const Eigen::Index col = color_columns[k];
                for (int j = 0; j < g; ++j) g_dout(1 + j, col) += gin(j, Eigen::Index(k));
                if (grad_dir) (*grad_dir)[k] = sh_basis_backward(directions[k], gin.col(Eigen::Index(k)).data() + g, s);
            }
        }
        const MatX<T> g_enc = detail::mlp_backward(p.values, p.density_layers, encoding, density_acts, g_dout, grad.data());

        const int f = cfg.features_per_level;
        if (grad_pos) grad_pos->assign(n, Vec3<T>::Zero());
        detail::GridCell<T> cell;
        for (std::size_t i = 0; i < n; ++i) {
            Vec3<T> g_grid = Vec3<T>::Zero();
            for (int l = 0; l < cfg.levels; ++l) {
                const T *ge = &g_enc(l * f, Eigen::Index(i));
                bool any = false;
                for (int k = 0; k < f; ++k) any |= ge[k] != T(0);
                if (!any) continue;
                detail::grid_cell(p, l, grid[i], cell);
                T *gt = grad.data() + p.level_offset[l];
                for (int c = 0; c < 8; ++c) {
                    T *dst = gt + std::size_t(cell.index[c]) * f;
                    for (int k = 0; k < f; ++k) dst[k] += cell.weight[c] * ge[k];
                }
                if (!grad_pos) continue;
                // d(weight_c)/d(frac_a) * sum_k ge_k value_ck, summed over corners
                const T *table = p.values.data() + p.level_offset[l];
                T w[3][2];
                for (int a = 0; a < 3; ++a) {
                    w[a][0] = T(1) - cell.frac[a];
                    w[a][1] = cell.frac[a];
                }
                Vec3<T> gl = Vec3<T>::Zero();
                for (int c = 0; c < 8; ++c) {
                    const T *v = table + std::size_t(cell.index[c]) * f;
                    T dot = T(0);
                    for (int k = 0; k < f; ++k) dot += ge[k] * v[k];
                    const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
                    const T sx = bx ? T(1) : T(-1), sy = by ? T(1) : T(-1), sz = bz ? T(1) : T(-1);
                    gl[0] += sx * w[1][by] * w[2][bz] * dot;
                    gl[1] += sy * w[0][bx] * w[2][bz] * dot;
                    gl[2] += sz * w[0][bx] * w[1][by] * dot;
                }
                g_grid += gl * T(p.level_resolution[l]);
            }
            if (grad_pos) (*grad_pos)[i] = p.grid_coordinate_backward(positions[i], g_grid);
        }
    }
};

/// Field density at world position x.
template <typename T> T query_density(const FieldParams<T> &p, const Vec3<T> &x) {
    FieldBatch<T> b;
    b.forward_density(p, std::span<const Vec3<T>>(&x, 1));
    return b.sigma[0];
}

/// Field color at world position x seen along unit direction d.
template <typename T> Vec3<T> query_color(const FieldParams<T> &p, const Vec3<T> &x, const Vec3<T> &d) {
    FieldBatch<T> b;
    b.forward(p, std::span<const Vec3<T>>(&x, 1), std::span<const Vec3<T>>(&d, 1));
    const Vec3<T> r = b.color_raw(0);
    return Vec3<T>(sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]));
}

// ---------------------------------------------------------------------------
// Field adapters for generic (forward-only) rendering
// ---------------------------------------------------------------------------

/// Read-only view of a trained field. Any type with this interface can be rendered.
template <typename T> struct NeuralField {
    using Scalar = T;
    const FieldParams<T> *params = nullptr;

    explicit NeuralField(const FieldParams<T> &p) : params(&p) {}

    void density(std::span<const Vec3<T>> x, std::vector<T> &sigma) const {
        FieldBatch<T> b;
        b.forward_density(*params, x);
        sigma = std::move(b.sigma);
    }
    void evaluate(std::span<const Vec3<T>> x, std::span<const Vec3<T>> d, std::vector<T> &sigma,
                  std::vector<Vec3<T>> &rgb) const {
        FieldBatch<T> b;
        b.forward(*params, x, d);
        sigma = b.sigma;
        rgb.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const Vec3<T> r = b.color_raw(i);
            rgb[i] = Vec3<T>(sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]));
        }
    }
    SceneFrame scene_frame() const { return params->frame; }
};

namespace stub {

/// Analytic fields for quadrature and harvesting oracles.
struct ConstantField {
    using Scalar = double;
    double sigma = 0.0;
    Eigen::Vector3d rgb{0.5, 0.5, 0.5};
    SceneFrame frame{};

    void density(std::span<const Eigen::Vector3d> x, std::vector<double> &s) const { s.assign(x.size(), sigma); }
    void evaluate(std::span<const Eigen::Vector3d> x, std::span<const Eigen::Vector3d>, std::vector<double> &s,
                  std::vector<Eigen::Vector3d> &c) const {
        s.assign(x.size(), sigma);
        c.assign(x.size(), rgb);
    }
    SceneFrame scene_frame() const { return frame; }
};

/// Density `sigma` inside an axis-aligned box, zero outside.
struct BoxField {
    using Scalar = double;
    Eigen::Vector3d lo{-1, -1, -1}, hi{1, 1, 1};
    double sigma = 50.0;
    Eigen::Vector3d rgb{0.8, 0.2, 0.2};
    SceneFrame frame{};

    bool inside(const Eigen::Vector3d &p) const {
        return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
    }
    void density(std::span<const Eigen::Vector3d> x, std::vector<double> &s) const {
        s.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) s[i] = inside(x[i]) ? sigma : 0.0;
    }
    void evaluate(std::span<const Eigen::Vector3d> x, std::span<const Eigen::Vector3d>, std::vector<double> &s,
                  std::vector<Eigen::Vector3d> &c) const {
        density(x, s);
        c.assign(x.size(), rgb);
    }
    SceneFrame scene_frame() const { return frame; }
};

} // namespace stub

// ---------------------------------------------------------------------------
// Ray quadrature
// ---------------------------------------------------------------------------

template <typename T> struct Ray {
    Vec3<T> origin{Vec3<T>::Zero()};
    Vec3<T> direction{T(0), T(0), T(1)};
    T near{0}, far{1};
};

template <typename T> Ray<T> camera_ray(const Camera &cam, double u, double v) {
    return {cam.center().cast<T>(), cam.ray_direction(u, v).cast<T>(), T(cam.near), T(cam.far)};
}

template <typename T> struct RayResult {
    Vec3<T> color{Vec3<T>::Zero()}; // composited over the background
    T depth{0};                     // sum_k w_k u_k, not normalized by opacity
    T transmittance{1};             // after the last sample
};

/// Stratified sample positions: interval k = [near + k*delta, near + (k+1)*delta], sampled at its
/// midpoint or at a uniformly jittered offset.
template <typename T> std::vector<T> sample_positions(T near, T far, int n, const T *jitter = nullptr) {
    std::vector<T> t(n);
    const T delta = (far - near) / T(n);
    for (int k = 0; k < n; ++k) t[k] = near + (T(k) + (jitter ? jitter[k] : T(0.5))) * delta;
    return t;
}

/// w_k = Q_k (1 - exp(-sigma_k delta)), Q_k = exp(-sum_{j<k} sigma_j delta).
template <typename T>
RayResult<T> composite(std::span<const T> t, T delta, std::span<const T> sigma, std::span<const Vec3<T>> rgb,
                       const Vec3<T> &background, std::vector<T> *weights = nullptr) {
    RayResult<T> r;
    T q = T(1);
    if (weights) weights->resize(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) {
        const T next = q * std::exp(-sigma[k] * delta);
        const T w = q - next;
        if (weights) (*weights)[k] = w;
        r.color += w * rgb[k];
        r.depth += w * t[k];
        q = next;
    }
    r.transmittance = q;
    r.color += q * background;
    return r;
}

/// dL/dsigma_k and dL/drgb_k for dL/dcolor of composite().
template <typename T>
void composite_backward(std::span<const T> t, T delta, std::span<const T> sigma, std::span<const Vec3<T>> rgb,
                        const Vec3<T> &background, const Vec3<T> &grad_color, std::span<T> grad_sigma,
                        std::span<Vec3<T>> grad_rgb) {
    const std::size_t n = t.size();
    std::vector<T> q(n + 1);
    q[0] = T(1);
    for (std::size_t k = 0; k < n; ++k) q[k + 1] = q[k] * std::exp(-sigma[k] * delta);
    Vec3<T> behind = q[n] * background;
    for (std::size_t k = n; k-- > 0;) {
        const T w = q[k] - q[k + 1];
        grad_rgb[k] = w * grad_color;
        grad_sigma[k] = delta * (q[k + 1] * rgb[k] - behind).dot(grad_color);
        behind += w * rgb[k];
    }
}

template <typename T> struct RenderRayOptions {
    int n_samples = 64;
    Vec3<T> background{Vec3<T>::Zero()};
};

/// Renders one ray through any field type. Jitter (n values in [0,1)) is optional.
template <typename F>
RayResult<typename F::Scalar> render_ray(const F &field, const Ray<typename F::Scalar> &ray,
                                         const RenderRayOptions<typename F::Scalar> &opt,
                                         const typename F::Scalar *jitter = nullptr) {
    using T = typename F::Scalar;
    HOGS_CHECK(opt.n_samples >= 2, "render_ray needs at least two samples");
    const std::vector<T> t = sample_positions(ray.near, ray.far, opt.n_samples, jitter);
    std::vector<Vec3<T>> x(t.size()), d(t.size(), ray.direction);
    for (std::size_t k = 0; k < t.size(); ++k) x[k] = ray.origin + t[k] * ray.direction;
    std::vector<T> sigma;
    std::vector<Vec3<T>> rgb;
    field.evaluate(x, d, sigma, rgb);
    return composite<T>(t, (ray.far - ray.near) / T(opt.n_samples), sigma, rgb, opt.background);
}

/// Renders many rays; rays are grouped into chunks evaluated as one batch.
template <typename F>
std::vector<RayResult<typename F::Scalar>> render_rays(const F &field, std::span<const Ray<typename F::Scalar>> rays,
                                                       const RenderRayOptions<typename F::Scalar> &opt,
                                                       std::span<const typename F::Scalar> jitter = {}) {
    using T = typename F::Scalar;
    HOGS_CHECK(opt.n_samples >= 2, "render_rays needs at least two samples");
    HOGS_CHECK(jitter.empty() || jitter.size() == rays.size() * std::size_t(opt.n_samples),
               "jitter must hold n_samples values per ray");
    const int ns = opt.n_samples;
    std::vector<RayResult<T>> out(rays.size());
    constexpr std::size_t kChunk = 64;
    const std::size_t chunks = (rays.size() + kChunk - 1) / kChunk;
    parallel_for(chunks, [&](std::size_t cb, std::size_t ce) {
        std::vector<Vec3<T>> x, d;
        std::vector<T> sigma;
        std::vector<Vec3<T>> rgb;
        for (std::size_t c = cb; c < ce; ++c) {
            const std::size_t r0 = c * kChunk, r1 = std::min(rays.size(), r0 + kChunk);
            x.clear();
            d.clear();
            std::vector<std::vector<T>> ts;
            for (std::size_t r = r0; r < r1; ++r) {
                const Ray<T> &ray = rays[r];
                ts.push_back(sample_positions(ray.near, ray.far, ns, jitter.empty() ? nullptr : jitter.data() + r * ns));
                for (int k = 0; k < ns; ++k) {
                    x.push_back(ray.origin + ts.back()[k] * ray.direction);
                    d.push_back(ray.direction);
                }
            }
            field.evaluate(x, d, sigma, rgb);
            for (std::size_t r = r0; r < r1; ++r) {
                const std::size_t o = (r - r0) * ns;
                out[r] = composite<T>(ts[r - r0], (rays[r].far - rays[r].near) / T(ns),
                                      std::span<const T>(sigma.data() + o, ns),
                                      std::span<const Vec3<T>>(rgb.data() + o, ns), opt.background);
            }
        }
    });
    return out;
}

template <typename T> struct FieldImage {
    Image<T> rgb;
    Image<T> depth;
    Image<T> transmittance;
};

template <typename T> struct FieldImageOptions {
    int stride    = 1;
    int n_samples = 64;
    Vec3<T> background{Vec3<T>::Ones()};
    Rng *jitter_rng = nullptr; // midpoint samples when null
};

/// Renders pixel-center rays for every `stride`-th pixel: output is ceil(H/s) x ceil(W/s).
template <typename F>
FieldImage<typename F::Scalar> render_field_image(const F &field, const Camera &cam,
                                                  const FieldImageOptions<typename F::Scalar> &opt) {
    using T = typename F::Scalar;
    HOGS_CHECK(opt.stride >= 1, "stride must be >= 1");
    const Camera sub = cam.subsampled(opt.stride);
    std::vector<Ray<T>> rays;
    rays.reserve(std::size_t(sub.width) * sub.height);
    for (int y = 0; y < sub.height; ++y)
        for (int x = 0; x < sub.width; ++x) rays.push_back(camera_ray<T>(sub, x + 0.5, y + 0.5));
    std::vector<T> jitter;
    if (opt.jitter_rng) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        jitter.resize(rays.size() * std::size_t(opt.n_samples));
        for (T &j : jitter) j = T(u(*opt.jitter_rng));
    }
    RenderRayOptions<T> ro;
    ro.n_samples  = opt.n_samples;
    ro.background = opt.background;
    const auto res = render_rays(field, std::span<const Ray<T>>(rays), ro, std::span<const T>(jitter));
    FieldImage<T> img{Image<T>(sub.width, sub.height, 3), Image<T>(sub.width, sub.height, 1),
                      Image<T>(sub.width, sub.height, 1)};
    for (int y = 0; y < sub.height; ++y)
        for (int x = 0; x < sub.width; ++x) {
            const RayResult<T> &r = res[std::size_t(y) * sub.width + x];
            for (int c = 0; c < 3; ++c) img.rgb(x, y, c) = r.color[c];
            img.depth(x, y)         = r.depth;
            img.transmittance(x, y) = r.transmittance;
        }
    return img;
}

// ---------------------------------------------------------------------------
// Differentiable ray batches (field supervision)
// ---------------------------------------------------------------------------

/// Forward/backward over a batch of rays through the neural field. Colors are evaluated only for
/// samples whose blending weight is at least `weight_eps` (0 evaluates every sample); skipped
/// samples contribute no color in both passes.
template <typename T> class RayBatch {
  public:
    int n_samples = 64;
    T weight_eps  = T(0);
    Vec3<T> background{Vec3<T>::Zero()};

    std::vector<Ray<T>> rays;
    std::vector<T> t;       // rays * n_samples
    FieldBatch<T> field;
    std::vector<int> color_slot; // per sample, index into colored points or -1
    std::vector<Vec3<T>> rgb;    // per sample (zero when skipped)
    std::vector<RayResult<T>> results;

    void forward(const FieldParams<T> &p, std::span<const Ray<T>> in_rays, std::span<const T> jitter = {}) {
        HOGS_CHECK(n_samples >= 2, "need at least two samples per ray");
        const std::size_t nr = in_rays.size(), ns = std::size_t(n_samples);
        HOGS_CHECK(jitter.empty() || jitter.size() == nr * ns, "jitter size mismatch");
        rays.assign(in_rays.begin(), in_rays.end());
        t.resize(nr * ns);
        std::vector<Vec3<T>> x(nr * ns);
        for (std::size_t r = 0; r < nr; ++r) {
            const auto tr = sample_positions(rays[r].near, rays[r].far, n_samples,
                                             jitter.empty() ? nullptr : jitter.data() + r * ns);
            for (std::size_t k = 0; k < ns; ++k) {
                t[r * ns + k] = tr[k];
                x[r * ns + k] = rays[r].origin + tr[k] * rays[r].direction;
            }
        }
        field.forward_density(p, x);

        std::vector<int> cols;
        std::vector<Vec3<T>> dirs;
        color_slot.assign(nr * ns, -1);
        for (std::size_t r = 0; r < nr; ++r) {
            const T delta = (rays[r].far - rays[r].near) / T(n_samples);
            T q = T(1);
            for (std::size_t k = 0; k < ns; ++k) {
                const T next = q * std::exp(-field.sigma[r * ns + k] * delta);
                if (q - next >= weight_eps) {
                    color_slot[r * ns + k] = int(cols.size());
                    cols.push_back(int(r * ns + k));
                    dirs.push_back(rays[r].direction);
                }
                q = next;
            }
        }
        field.forward_color(p, cols, dirs);
        rgb.assign(nr * ns, Vec3<T>::Zero());
        for (std::size_t k = 0; k < cols.size(); ++k) {
            const Vec3<T> raw = field.color_raw(k);
            rgb[cols[k]] = Vec3<T>(sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2]));
        }
        results.resize(nr);
        for (std::size_t r = 0; r < nr; ++r)
            results[r] = composite<T>(std::span<const T>(t.data() + r * ns, ns), (rays[r].far - rays[r].near) / T(n_samples),
                                      std::span<const T>(field.sigma.data() + r * ns, ns),
                                      std::span<const Vec3<T>>(rgb.data() + r * ns, ns), background);
    }

    void backward(const FieldParams<T> &p, std::span<const Vec3<T>> grad_color, std::span<T> grad) const {
        const std::size_t nr = rays.size(), ns = std::size_t(n_samples);
        HOGS_CHECK(grad_color.size() == nr, "grad_color size mismatch");
        std::vector<T> g_sigma(nr * ns);
        std::vector<Vec3<T>> g_rgb(nr * ns);
        for (std::size_t r = 0; r < nr; ++r)
            composite_backward<T>(std::span<const T>(t.data() + r * ns, ns), (rays[r].far - rays[r].near) / T(n_samples),
                                  std::span<const T>(field.sigma.data() + r * ns, ns),
                                  std::span<const Vec3<T>>(rgb.data() + r * ns, ns), background, grad_color[r],
                                  std::span<T>(g_sigma.data() + r * ns, ns),
                                  std::span<Vec3<T>>(g_rgb.data() + r * ns, ns));
        std::vector<Vec3<T>> g_raw(field.color_count());
        for (std::size_t k = 0; k < field.color_count(); ++k) {
            const int s = field.color_columns[k];
            const Vec3<T> &c = rgb[s];
            g_raw[k] = g_rgb[s].cwiseProduct(c.cwiseProduct(Vec3<T>::Ones() - c));
        }
        field.backward(p, g_sigma, g_raw, grad);
    }
};

// ---------------------------------------------------------------------------
// Per-splat view-dependent color
// ---------------------------------------------------------------------------

enum class ColorMode { residual, field_only };

template <typename T> struct SplatColorCache {
    ColorMode mode = ColorMode::residual;
    FieldBatch<T> batch;
    std::vector<Vec3<T>> colors;
    std::vector<Vec3<T>> directions;
    std::vector<T> inv_distance; // 0 when the direction fell back to the camera axis
};

/// color_i = sigmoid(base_logit_i + head(x_i, d_i)) in residual mode, sigmoid(head(x_i, d_i)) in
/// field-only mode, with d_i the unit direction from the camera center to the splat.
template <typename T>
std::vector<Vec3<T>> splat_colors(const FieldParams<T> &p, std::span<const Splat<T>> splats, const Camera &cam,
                                  ColorMode mode = ColorMode::residual, SplatColorCache<T> *cache = nullptr) {
    const std::size_t n = splats.size();
    SplatColorCache<T> local;
    SplatColorCache<T> &c = cache ? *cache : local;
    c.mode = mode;
    c.directions.resize(n);
    c.inv_distance.resize(n);
    std::vector<Vec3<T>> pos(n);
    const Vec3<T> origin = cam.center().cast<T>();
    for (std::size_t i = 0; i < n; ++i) {
        pos[i] = splats[i].position;
        const Vec3<T> v = splats[i].position - origin;
        const T len = v.norm();
        if (len > T(1e-12)) {
            c.directions[i]   = v / len;
            c.inv_distance[i] = T(1) / len;
        } else {
            c.directions[i]   = cam.forward().cast<T>();
            c.inv_distance[i] = T(0);
        }
    }
    c.batch.forward(p, pos, c.directions);
    c.colors.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec3<T> z = c.batch.color_raw(i);
        if (mode == ColorMode::residual) z += splats[i].base_color_logit;
        c.colors[i] = Vec3<T>(sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]));
    }
    return c.colors;
}

/// Reverse pass of splat_colors: accumulates into grad_field and into grad_splats' position and
/// base_color_logit entries.
template <typename T>
void splat_colors_backward(const FieldParams<T> &p, const SplatColorCache<T> &c, std::span<const Vec3<T>> grad_colors,
                           std::span<T> grad_field, std::span<Splat<T>> grad_splats) {
    const std::size_t n = c.colors.size();
    HOGS_CHECK(grad_colors.size() == n && grad_splats.size() == n, "splat color gradient size mismatch");
    std::vector<Vec3<T>> g_raw(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3<T> &col = c.colors[i];
        g_raw[i] = grad_colors[i].cwiseProduct(col.cwiseProduct(Vec3<T>::Ones() - col));
        if (c.mode == ColorMode::residual) grad_splats[i].base_color_logit += g_raw[i];
    }
    std::vector<Vec3<T>> g_pos, g_dir;
    c.batch.backward(p, {}, g_raw, grad_field, &g_pos, &g_dir);
    for (std::size_t i = 0; i < n; ++i) {
        grad_splats[i].position += g_pos[i];
        if (c.inv_distance[i] > T(0)) {
            const Vec3<T> &d = c.directions[i];
            grad_splats[i].position += (g_dir[i] - d * d.dot(g_dir[i])) * c.inv_distance[i];
        }
    }
}

} // namespace hogs
