// Shared synthetic fixtures for the test suites.
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "plireg/field.hpp"
#include "plireg/gebs.hpp"
#include "plireg/image.hpp"

namespace fixtures {

using namespace plireg;

// Smooth seeded value noise (random lattice, smoothstep blending).
struct ValueNoise {
    std::vector<double> lattice;
    int nx, ny;
    double cell;
    ValueNoise(int w, int h, double cell_px, unsigned seed) : cell(cell_px) {
        nx = static_cast<int>(w / cell_px) + 3;
        ny = static_cast<int>(h / cell_px) + 3;
        std::mt19937 rng(seed);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        lattice.resize(static_cast<std::size_t>(nx) * ny);
        for (auto& v : lattice) v = u(rng);
    }
    double operator()(double x, double y) const {
        const double gx = std::clamp(x / cell, 0.0, nx - 2.0);
        const double gy = std::clamp(y / cell, 0.0, ny - 2.0);
        const int ix = std::min(static_cast<int>(gx), nx - 2);
        const int iy = std::min(static_cast<int>(gy), ny - 2);
        auto ss = [](double t) { return t * t * (3.0 - 2.0 * t); };
        const double fx = ss(gx - ix), fy = ss(gy - iy);
        auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(b) * nx + a]; };
        return (1 - fy) * ((1 - fx) * L(ix, iy) + fx * L(ix + 1, iy)) +
               fy * ((1 - fx) * L(ix, iy + 1) + fx * L(ix + 1, iy + 1));
    }
};

// Masked elliptical blob with multi-scale texture and a dark nucleus.
inline Image2D brain_phantom(int w, int h, unsigned seed) {
    ValueNoise coarse(w, h, 14.0, seed);
    ValueNoise fine(w, h, 5.0, seed + 1000);
    Image2D img(w, h);
    std::vector<std::uint8_t> mask(img.size(), 0);
    const double cx = w / 2.0, cy = h / 2.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double ex = (x - cx) / (0.38 * w), ey = (y - cy) / (0.33 * h);
            double v = 0.0;
            if (ex * ex + ey * ey < 1.0) {
                v = 0.55 + 0.28 * coarse(x, y) + 0.12 * fine(x, y);
                const double ex2 = (x - cx * 0.8) / (0.12 * w), ey2 = (y - cy * 1.1) / (0.1 * h);
                if (ex2 * ex2 + ey2 * ey2 < 1.0) v *= 0.35;
                mask[img.idx(x, y)] = 1;
            }
            img.at(x, y) = static_cast<float>(std::clamp(v, 0.05, 1.0));
        }
    img.set_mask(mask);
    return img;
}

// Random GEBS field with the requested peak displacement.
inline DeformationField random_gebs_field(int w, int h, double peak_px, unsigned seed,
                                          double sigma_px = 12.0, double spacing_px = 16.0) {
    auto p = ElasticParams::from_poisson(1.0, 0.2, sigma_px);
    CenterGrid grid = CenterGrid::make(w, h, spacing_px, 4096);
    std::mt19937 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    Eigen::VectorXd q(2 * grid.centers.size());
    for (Eigen::Index i = 0; i < q.size(); ++i) q[i] = d(rng);
    DeformationField u = gebs_field_from_coeffs(grid, q, w, h, p, 1);
    const double m = u.max_norm();
    if (m > 0) {
        const double s = peak_px / m;
        for (std::size_t i = 0; i < u.size(); ++i) {
            u.ux[i] = static_cast<float>(u.ux[i] * s);
            u.uy[i] = static_cast<float>(u.uy[i] * s);
        }
    }
    return u;
}

// Inverse displacement field of (id + u), by fixed-point iteration.
inline DeformationField invert_field(const DeformationField& u, int iterations = 20) {
    DeformationField v(u.width, u.height);
    for (int it = 0; it < iterations; ++it) {
        for (int y = 0; y < u.height; ++y)
            for (int x = 0; x < u.width; ++x) {
                const Vec2 cur = v.at(x, y);
                const Vec2 s = u.sample(x + cur.x, y + cur.y);
                v.set(x, y, {-s.x, -s.y});
            }
    }
    return v;
}

// moving(y) = fixed(y + v(y)) so that moving(x + u(x)) == fixed(x): the
// registration ground truth is u itself.
inline Image2D distort_by_field(const Image2D& fixed, const DeformationField& u) {
    return warp(fixed, invert_field(u), Interp::CubicBSpline);
}

inline double image_ncc(const Image2D& a, const Image2D& b) {
    double ma = 0, mb = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a.mask_at(i)) continue;
        ma += a[i];
        mb += b[i];
        ++n;
    }
    ma /= n;
    mb /= n;
    double saa = 0, sbb = 0, sab = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a.mask_at(i)) continue;
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
        sab += (a[i] - ma) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

// Mean endpoint error between fields over the mask, skipping a border
// margin.
inline double mean_epe(const DeformationField& a, const DeformationField& b, const Image2D& masked,
                       int margin = 6) {
    double acc = 0.0;
    std::size_t n = 0;
    for (int y = margin; y < a.height - margin; ++y)
        for (int x = margin; x < a.width - margin; ++x) {
            if (!masked.mask_at(x, y)) continue;
            const Vec2 va = a.at(x, y), vb = b.at(x, y);
            acc += std::hypot(va.x - vb.x, va.y - vb.y);
            ++n;
        }
    return n ? acc / n : 0.0;
}

}  // namespace fixtures
