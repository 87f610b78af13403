// Copyright Contributors to the hogs project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace hogs {

template <typename T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <typename T> using Mat2 = Eigen::Matrix<T, 2, 2>;
template <typename T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <typename T> using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

using Rng = std::mt19937_64;

/// Violated precondition of a public operation (shape mismatch, invalid argument).
class ContractError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or unreadable input file.
class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

#define HOGS_CHECK(cond, msg)                                                                  \
    do {                                                                                       \
        if (!(cond)) {                                                                         \
            std::ostringstream hogs_check_oss_;                                                \
            hogs_check_oss_ << msg;                                                            \
            throw ::hogs::ContractError(hogs_check_oss_.str());                                \
        }                                                                                      \
    } while (0)

template <typename T> inline T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T> inline T logit(T p) {
    return std::log(p / (T(1) - p));
}

template <typename T> inline T softplus(T x) {
    return x > T(20) ? x : std::log1p(std::exp(x));
}

/// Interleaved H x W x C image, row-major, origin top-left.
template <typename T> struct Image {
    int width    = 0;
    int height   = 0;
    int channels = 3;
    std::vector<T> data;

    Image() = default;
    Image(int w, int h, int c = 3, T fill = T(0))
        : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

    T &operator()(int x, int y, int c = 0) {
        return data[(std::size_t(y) * width + x) * channels + c];
    }
    T operator()(int x, int y, int c = 0) const {
        return data[(std::size_t(y) * width + x) * channels + c];
    }
    std::size_t pixel_count() const { return std::size_t(width) * height; }
    std::size_t size() const { return data.size(); }
    bool same_shape(const Image &o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }

    template <typename U> Image<U> cast() const {
        Image<U> out(width, height, channels);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

namespace detail {
inline unsigned fp_control() {
#if defined(__SSE__)
    return _mm_getcsr();
#else
    return 0;
#endif
}
inline void set_fp_control([[maybe_unused]] unsigned csr) {
#if defined(__SSE__)
    _mm_setcsr(csr);
#endif
}
} // namespace detail

/// Flushes denormal floats to zero on the calling thread (and on parallel_for workers it spawns)
/// for the guard's lifetime. Tiny gradients otherwise fall onto the slow microcode path.
class DenormalGuard {
  public:
    DenormalGuard() : saved_(detail::fp_control()) {
#if defined(__SSE__)
        detail::set_fp_control(saved_ | 0x8040u); // FTZ | DAZ
#endif
    }
    ~DenormalGuard() { detail::set_fp_control(saved_); }
    DenormalGuard(const DenormalGuard &) = delete;
    DenormalGuard &operator=(const DenormalGuard &) = delete;

  private:
    unsigned saved_;
};

namespace detail {
inline int &thread_count_storage() {
    static int n = std::max(1u, std::thread::hardware_concurrency());
    return n;
}
} // namespace detail

inline int num_threads() { return detail::thread_count_storage(); }
inline void set_num_threads(int n) { detail::thread_count_storage() = std::max(1, n); }

/// Static-partition parallel loop over [0, n). fn(begin, end) receives contiguous chunks.
/// Work items must not write shared state; reductions are done by the caller in fixed order.
template <typename Fn> void parallel_for(std::size_t n, Fn &&fn) {
    const std::size_t workers = std::min<std::size_t>(num_threads(), n);
    if (workers <= 1) {
        if (n > 0) fn(std::size_t(0), n);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    const std::size_t chunk = (n + workers - 1) / workers;
    const unsigned csr = detail::fp_control();
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t b = w * chunk, e = std::min(n, b + chunk);
        if (b < e)
            pool.emplace_back([&fn, b, e, csr] {
                detail::set_fp_control(csr);
                fn(b, e);
            });
    }
    fn(std::size_t(0), std::min(n, chunk));
}

} // namespace hogs
