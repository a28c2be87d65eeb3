#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "plireg/parallel.hpp"

namespace plireg {

// Single-channel float raster with pixel-size metadata (micrometers per
// pixel) and an optional foreground mask. Immutable by convention once
// built; all operations below return new images.
class Image2D {
public:
    Image2D() = default;
    Image2D(int width, int height, double pixel_size_um = 1.0, float fill = 0.0f)
        : width_(width), height_(height), pixel_size_(pixel_size_um),
          data_(static_cast<std::size_t>(width) * height, fill) {
        if (width <= 0 || height <= 0) throw std::invalid_argument("Image2D: non-positive dimensions");
        if (!(pixel_size_um > 0.0)) throw std::invalid_argument("Image2D: pixel_size must be > 0");
    }

    int width() const { return width_; }
    int height() const { return height_; }
    double pixel_size() const { return pixel_size_; }
    void set_pixel_size(double um) {
        if (!(um > 0.0)) throw std::invalid_argument("Image2D: pixel_size must be > 0");
        pixel_size_ = um;
    }

    bool empty() const { return data_.empty(); }
    std::size_t size() const { return data_.size(); }

    float& at(int x, int y) { return data_[idx(x, y)]; }
    float at(int x, int y) const { return data_[idx(x, y)]; }
    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    bool has_mask() const { return !mask_.empty(); }
    // Mask convention: true = tissue/foreground. No mask means all-valid.
    bool mask_at(int x, int y) const { return mask_.empty() ? true : mask_[idx(x, y)] != 0; }
    bool mask_at(std::size_t i) const { return mask_.empty() ? true : mask_[i] != 0; }
    const std::vector<std::uint8_t>& mask() const { return mask_; }
    void set_mask(std::vector<std::uint8_t> m) {
        if (!m.empty() && m.size() != data_.size())
            throw std::invalid_argument("Image2D: mask dimensions mismatch");
        mask_ = std::move(m);
    }
    void clear_mask() { mask_.clear(); }

    std::size_t idx(int x, int y) const {
        return static_cast<std::size_t>(y) * width_ + x;
    }
    bool in_bounds(int x, int y) const {
        return x >= 0 && y >= 0 && x < width_ && y < height_;
    }

    void check_finite(const char* where) const {
        for (float v : data_)
            if (!std::isfinite(v)) throw std::runtime_error(std::string(where) + ": non-finite pixel value");
    }

private:
    int width_ = 0;
    int height_ = 0;
    double pixel_size_ = 1.0;
    std::vector<float> data_;
    std::vector<std::uint8_t> mask_;
};

enum class Interp { Bilinear, CubicBSpline };

namespace detail {

inline int mirror_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = std::abs(i) % period;
    return i < n ? i : period - i;
}

// Unser's recursive prefilter turning samples into cubic B-spline
// coefficients (pole z1 = sqrt(3) - 2). Anti-mirror (point-symmetric)
// boundary, which keeps linear signals exactly linear up to the edge.
inline void bspline3_prefilter_line(double* line, int n, int stride) {
    if (n < 2) return;
    const double z1 = std::sqrt(3.0) - 2.0;
    const double lambda = 6.0;
    const double x_last = line[(n - 1) * stride];
    // causal init: c+(0) = x0*(1+z)/(1-z) - sum_{k>=1} z^k x(k)
    const int horizon =
        std::min<int>(n, static_cast<int>(std::ceil(std::log(1e-12) / std::log(std::abs(z1)))));
    double sum = line[0] * (1.0 + z1) / (1.0 - z1);
    double zn = z1;
    for (int i = 1; i < horizon; ++i) {
        sum -= zn * line[i * stride];
        zn *= z1;
    }
    double cprev = sum;
    std::vector<double> c(n);
    c[0] = cprev;
    for (int i = 1; i < n; ++i) {
        cprev = line[i * stride] + z1 * cprev;
        c[i] = cprev;
    }
    // anticausal init: interpolation at the last node returns the sample
    double dprev = x_last / lambda;
    line[(n - 1) * stride] = lambda * dprev;
    for (int i = n - 2; i >= 0; --i) {
        dprev = z1 * (dprev - c[i]);
        line[i * stride] = lambda * dprev;
    }
}

inline void bspline3_weights(double frac, double w[4]) {
    const double t = frac;
    const double t2 = t * t;
    const double t3 = t2 * t;
    w[0] = (1.0 - 3.0 * t + 3.0 * t2 - t3) / 6.0;
    w[1] = (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0;
    w[2] = (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0;
    w[3] = t3 / 6.0;
}

inline void bspline3_dweights(double frac, double w[4]) {
    const double t = frac;
    const double t2 = t * t;
    w[0] = (-3.0 + 6.0 * t - 3.0 * t2) / 6.0;
    w[1] = (-12.0 * t + 9.0 * t2) / 6.0;
    w[2] = (3.0 + 6.0 * t - 9.0 * t2) / 6.0;
    w[3] = 3.0 * t2 / 6.0;
}

}  // namespace detail

// Precomputed cubic B-spline coefficients for repeated sampling of one
// image (warps, objective evaluations). Coefficients are stored with a
// 2-px anti-mirror apron so the 4-tap stencil never needs index checks.
// Sampling outside [0,w-1]x[0,h-1] yields the fill value; the inside
// flag tells callers which happened.
class BSplineImage {
public:
    explicit BSplineImage(const Image2D& img)
        : w_(img.width()), h_(img.height()), pw_(w_ + 4) {
        std::vector<double> core(img.data().begin(), img.data().end());
        for (int y = 0; y < h_; ++y)
            detail::bspline3_prefilter_line(core.data() + static_cast<std::size_t>(y) * w_, w_, 1);
        for (int x = 0; x < w_; ++x)
            detail::bspline3_prefilter_line(core.data() + x, h_, w_);
        // pad 2 on each side: c(-k) = 2c(0) - c(k), separably
        const int ph = h_ + 4;
        coef_.assign(static_cast<std::size_t>(pw_) * ph, 0.0);
        auto C = [&](int x, int y) -> double& {
            return coef_[static_cast<std::size_t>(y + 2) * pw_ + (x + 2)];
        };
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) C(x, y) = core[static_cast<std::size_t>(y) * w_ + x];
        for (int y = 0; y < h_; ++y)
            for (int k = 1; k <= 2; ++k) {
                C(-k, y) = 2.0 * C(0, y) - C(std::min(k, w_ - 1), y);
                C(w_ - 1 + k, y) = 2.0 * C(w_ - 1, y) - C(std::max(w_ - 1 - k, 0), y);
            }
        for (int x = -2; x < w_ + 2; ++x)
            for (int k = 1; k <= 2; ++k) {
                C(x, -k) = 2.0 * C(x, 0) - C(x, std::min(k, h_ - 1));
                C(x, h_ - 1 + k) = 2.0 * C(x, h_ - 1) - C(x, std::max(h_ - 1 - k, 0));
            }
    }

    int width() const { return w_; }
    int height() const { return h_; }

    double sample(double x, double y, bool* inside = nullptr, float fill = 0.0f) const {
        if (x < 0.0 || y < 0.0 || x > w_ - 1 || y > h_ - 1) {
            if (inside) *inside = false;
            return fill;
        }
        if (inside) *inside = true;
        const int ix = static_cast<int>(std::floor(x));
        const int iy = static_cast<int>(std::floor(y));
        double wx[4], wy[4];
        detail::bspline3_weights(x - ix, wx);
        detail::bspline3_weights(y - iy, wy);
        double acc = 0.0;
        for (int j = 0; j < 4; ++j) {
            const double* row = coef_.data() + static_cast<std::size_t>(iy + 1 + j) * pw_ + (ix + 1);
            acc += wy[j] * (wx[0] * row[0] + wx[1] * row[1] + wx[2] * row[2] + wx[3] * row[3]);
        }
        return acc;
    }

    // Value plus spatial first derivatives (d/dx, d/dy).
    void sample_grad(double x, double y, double& val, double& dx, double& dy,
                     bool* inside = nullptr, float fill = 0.0f) const {
        if (x < 0.0 || y < 0.0 || x > w_ - 1 || y > h_ - 1) {
            if (inside) *inside = false;
            val = fill;
            dx = dy = 0.0;
            return;
        }
        if (inside) *inside = true;
        const int ix = static_cast<int>(std::floor(x));
        const int iy = static_cast<int>(std::floor(y));
        double wx[4], wy[4], dwx[4], dwy[4];
        detail::bspline3_weights(x - ix, wx);
        detail::bspline3_weights(y - iy, wy);
        detail::bspline3_dweights(x - ix, dwx);
        detail::bspline3_dweights(y - iy, dwy);
        val = dx = dy = 0.0;
        for (int j = 0; j < 4; ++j) {
            const double* row = coef_.data() + static_cast<std::size_t>(iy + 1 + j) * pw_ + (ix + 1);
            double rowv = 0.0, rowd = 0.0;
            for (int i = 0; i < 4; ++i) {
                rowv += wx[i] * row[i];
                rowd += dwx[i] * row[i];
            }
            val += wy[j] * rowv;
            dx += wy[j] * rowd;
            dy += dwy[j] * rowv;
        }
    }

private:
    int w_, h_, pw_;
    std::vector<double> coef_;
};

inline double sample_bilinear(const Image2D& img, double x, double y,
                              bool* inside = nullptr, float fill = 0.0f) {
    const int w = img.width(), h = img.height();
    if (x < 0.0 || y < 0.0 || x > w - 1 || y > h - 1) {
        if (inside) *inside = false;
        return fill;
    }
    if (inside) *inside = true;
    int ix = static_cast<int>(std::floor(x));
    int iy = static_cast<int>(std::floor(y));
    if (ix == w - 1) ix--;
    if (iy == h - 1) iy--;
    if (w == 1) ix = 0;
    if (h == 1) iy = 0;
    const double fx = x - ix, fy = y - iy;
    const double v00 = img.at(ix, iy);
    const double v10 = img.at(std::min(ix + 1, w - 1), iy);
    const double v01 = img.at(ix, std::min(iy + 1, h - 1));
    const double v11 = img.at(std::min(ix + 1, w - 1), std::min(iy + 1, h - 1));
    return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
}

// One-off interpolation. For hot loops build a BSplineImage once instead.
inline double interpolate(const Image2D& img, double x, double y, Interp method,
                          bool* inside = nullptr, float fill = 0.0f) {
    if (img.empty()) throw std::invalid_argument("interpolate: empty image");
    if (method == Interp::Bilinear) return sample_bilinear(img, x, y, inside, fill);
    BSplineImage spline(img);
    return spline.sample(x, y, inside, fill);
}

// Central differences inside, one-sided on the borders.
inline void gradient(const Image2D& img, Image2D& gx, Image2D& gy) {
    const int w = img.width(), h = img.height();
    if (w < 3 || h < 3) throw std::invalid_argument("gradient: image must be at least 3x3");
    gx = Image2D(w, h, img.pixel_size());
    gy = Image2D(w, h, img.pixel_size());
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < w; ++x) {
            if (x == 0)
                gx.at(x, y) = img.at(1, y) - img.at(0, y);
            else if (x == w - 1)
                gx.at(x, y) = img.at(w - 1, y) - img.at(w - 2, y);
            else
                gx.at(x, y) = 0.5f * (img.at(x + 1, y) - img.at(x - 1, y));
            if (y == 0)
                gy.at(x, y) = img.at(x, 1) - img.at(x, 0);
            else if (y == h - 1)
                gy.at(x, y) = img.at(x, h - 1) - img.at(x, h - 2);
            else
                gy.at(x, y) = 0.5f * (img.at(x, y + 1) - img.at(x, y - 1));
        }
    });
}

inline void second_derivatives(const Image2D& img, Image2D& gxx, Image2D& gyy) {
    const int w = img.width(), h = img.height();
    if (w < 3 || h < 3) throw std::invalid_argument("second_derivatives: image must be at least 3x3");
    gxx = Image2D(w, h, img.pixel_size());
    gyy = Image2D(w, h, img.pixel_size());
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < w; ++x) {
            const int xc = std::clamp(x, 1, w - 2);
            const int yc = std::clamp(y, 1, h - 2);
            gxx.at(x, y) = img.at(xc + 1, y) - 2.0f * img.at(xc, y) + img.at(xc - 1, y);
            gyy.at(x, y) = img.at(x, yc + 1) - 2.0f * img.at(x, yc) + img.at(x, yc - 1);
        }
    });
}

// Separable Gaussian blur, kernel truncated at 3 sigma, mirror boundary.
inline Image2D gaussian_blur(const Image2D& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        norm += k[i + radius];
    }
    for (double& v : k) v /= norm;

    const int w = img.width(), h = img.height();
    Image2D tmp(w, h, img.pixel_size());
    Image2D out(w, h, img.pixel_size());
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * img.at(detail::mirror_index(x + i, w), y);
            tmp.at(x, y) = static_cast<float>(acc);
        }
    });
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * tmp.at(x, detail::mirror_index(y + i, h));
            out.at(x, y) = static_cast<float>(acc);
        }
    });
    if (img.has_mask()) out.set_mask(img.mask());
    return out;
}

// Change pixel size, keeping the physical extent. Downsampling applies a
// Gaussian prefilter (sigma = 0.5 * ratio px) against aliasing.
inline Image2D resample_to(const Image2D& img, double new_pixel_size_um, Interp method = Interp::Bilinear) {
    if (!(new_pixel_size_um > 0.0)) throw std::invalid_argument("resample_to: pixel size must be > 0");
    const double ratio = new_pixel_size_um / img.pixel_size();  // >1 when downsampling
    const int nw = std::max(1, static_cast<int>(std::lround(img.width() / ratio)));
    const int nh = std::max(1, static_cast<int>(std::lround(img.height() / ratio)));
    if (nw == img.width() && nh == img.height() && std::abs(ratio - 1.0) < 1e-12) {
        Image2D out = img;
        out.set_pixel_size(new_pixel_size_um);
        return out;
    }
    const Image2D* src = &img;
    Image2D filtered;
    if (ratio > 1.0) {
        filtered = gaussian_blur(img, 0.5 * ratio);
        src = &filtered;
    }
    Image2D out(nw, nh, new_pixel_size_um);
    std::vector<std::uint8_t> omask;
    const bool masked = img.has_mask();
    if (masked) omask.assign(out.size(), 0);
    const BSplineImage* spline = nullptr;
    BSplineImage maybe(method == Interp::CubicBSpline ? *src : Image2D(1, 1));
    if (method == Interp::CubicBSpline) spline = &maybe;
    parallel_for(static_cast<std::size_t>(nh), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < nw; ++x) {
            const double sx = x * ratio, sy = y * ratio;
            out.at(x, y) = static_cast<float>(spline ? spline->sample(sx, sy) : sample_bilinear(*src, sx, sy));
            if (masked) {
                const int mx = std::clamp(static_cast<int>(std::lround(sx)), 0, img.width() - 1);
                const int my = std::clamp(static_cast<int>(std::lround(sy)), 0, img.height() - 1);
                omask[out.idx(x, y)] = img.mask_at(mx, my) ? 1 : 0;
            }
        }
    });
    if (masked) out.set_mask(std::move(omask));
    return out;
}

struct Pyramid {
    std::vector<Image2D> levels;  // level 0 = finest
    int count() const { return static_cast<int>(levels.size()); }
};

// Gaussian smoothing (sigma = 1 px) before each 2x decimation. The level
// count is clamped so the coarsest short side stays >= 32 px.
inline Pyramid build_pyramid(const Image2D& img, int levels) {
    if (levels < 1) throw std::invalid_argument("build_pyramid: levels must be >= 1");
    constexpr int kMinSide = 32;
    int allowed = 1;
    {
        int s = std::min(img.width(), img.height());
        while (allowed < levels) {
            const int next = (s + 1) / 2;
            if (next < kMinSide) break;
            s = next;
            ++allowed;
        }
    }
    Pyramid p;
    p.levels.push_back(img);
    for (int l = 1; l < allowed; ++l) {
        const Image2D& prev = p.levels.back();
        Image2D sm = gaussian_blur(prev, 1.0);
        const int nw = (prev.width() + 1) / 2;
        const int nh = (prev.height() + 1) / 2;
        Image2D next(nw, nh, prev.pixel_size() * 2.0);
        for (int y = 0; y < nh; ++y)
            for (int x = 0; x < nw; ++x)
                next.at(x, y) = sm.at(std::min(2 * x, prev.width() - 1), std::min(2 * y, prev.height() - 1));
        if (prev.has_mask()) {
            std::vector<std::uint8_t> m(static_cast<std::size_t>(nw) * nh, 0);
            for (int y = 0; y < nh; ++y)
                for (int x = 0; x < nw; ++x)
                    m[static_cast<std::size_t>(y) * nw + x] =
                        prev.mask_at(std::min(2 * x, prev.width() - 1), std::min(2 * y, prev.height() - 1)) ? 1 : 0;
            next.set_mask(std::move(m));
        }
        p.levels.push_back(std::move(next));
    }
    return p;
}

}  // namespace plireg
