#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "plireg/image.hpp"
#include "plireg/transform.hpp"

namespace plireg {

// Dense per-pixel displacement on a target grid, in pixels of that grid.
// Backward-warp convention throughout: warped(x) = source(x + u(x)).
struct DeformationField {
    int width = 0, height = 0;
    std::vector<float> ux, uy;

    DeformationField() = default;
    DeformationField(int w, int h) : width(w), height(h) {
        if (w <= 0 || h <= 0) throw std::invalid_argument("DeformationField: non-positive dimensions");
        ux.assign(static_cast<std::size_t>(w) * h, 0.0f);
        uy.assign(ux.size(), 0.0f);
    }

    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
    std::size_t size() const { return ux.size(); }

    Vec2 at(int x, int y) const {
        const std::size_t i = idx(x, y);
        return {ux[i], uy[i]};
    }
    void set(int x, int y, const Vec2& v) {
        const std::size_t i = idx(x, y);
        ux[i] = static_cast<float>(v.x);
        uy[i] = static_cast<float>(v.y);
    }

    // Bilinear sample at a continuous point; clamps to the border value.
    Vec2 sample(double x, double y) const {
        const double cx = std::clamp(x, 0.0, static_cast<double>(width - 1));
        const double cy = std::clamp(y, 0.0, static_cast<double>(height - 1));
        int ix = static_cast<int>(std::floor(cx));
        int iy = static_cast<int>(std::floor(cy));
        if (ix >= width - 1) ix = std::max(0, width - 2);
        if (iy >= height - 1) iy = std::max(0, height - 2);
        const double fx = cx - ix, fy = cy - iy;
        const int x1 = std::min(ix + 1, width - 1), y1 = std::min(iy + 1, height - 1);
        auto lerp2 = [&](const std::vector<float>& c) {
            const double v00 = c[idx(ix, iy)], v10 = c[idx(x1, iy)];
            const double v01 = c[idx(ix, y1)], v11 = c[idx(x1, y1)];
            return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
        };
        return {lerp2(ux), lerp2(uy)};
    }

    double max_norm() const {
        double m = 0.0;
        for (std::size_t i = 0; i < ux.size(); ++i)
            m = std::max(m, std::hypot(static_cast<double>(ux[i]), static_cast<double>(uy[i])));
        return m;
    }

    void check_finite(const char* where) const {
        for (std::size_t i = 0; i < ux.size(); ++i)
            if (!std::isfinite(ux[i]) || !std::isfinite(uy[i]))
                throw std::runtime_error(std::string(where) + ": non-finite displacement");
    }

    static DeformationField from_transform(const TransformParams& t, int w, int h) {
        DeformationField f(w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Vec2 p = t.apply({static_cast<double>(x), static_cast<double>(y)});
                f.set(x, y, {p.x - x, p.y - y});
            }
        return f;
    }

    // Upsample to a finer grid, scaling displacement magnitudes by the
    // grid ratio (used when moving down a pyramid).
    DeformationField upsample_to(int nw, int nh) const {
        DeformationField out(nw, nh);
        const double sx = static_cast<double>(width) / nw;
        const double sy = static_cast<double>(height) / nh;
        for (int y = 0; y < nh; ++y)
            for (int x = 0; x < nw; ++x) {
                const Vec2 v = sample(x * sx, y * sy);
                out.set(x, y, {v.x / sx, v.y / sy});
            }
        return out;
    }
};

// Backward warp by a parametric transform.
inline Image2D warp(const Image2D& img, const TransformParams& t, Interp method = Interp::Bilinear) {
    if (t.is_identity()) return img;  // bitwise reproduction contract
    Image2D out(img.width(), img.height(), img.pixel_size());
    std::vector<std::uint8_t> omask(out.size(), 0);
    const bool masked = img.has_mask();
    if (method == Interp::CubicBSpline) {
        BSplineImage spline(img);
        parallel_for(static_cast<std::size_t>(out.height()), [&](std::size_t yi) {
            const int y = static_cast<int>(yi);
            for (int x = 0; x < out.width(); ++x) {
                const Vec2 p = t.apply({static_cast<double>(x), static_cast<double>(y)});
                bool inside = false;
                out.at(x, y) = static_cast<float>(spline.sample(p.x, p.y, &inside));
                const bool mv = inside && (!masked || img.mask_at(std::clamp(static_cast<int>(std::lround(p.x)), 0, img.width() - 1),
                                                                 std::clamp(static_cast<int>(std::lround(p.y)), 0, img.height() - 1)));
                omask[out.idx(x, y)] = mv ? 1 : 0;
            }
        });
    } else {
        parallel_for(static_cast<std::size_t>(out.height()), [&](std::size_t yi) {
            const int y = static_cast<int>(yi);
            for (int x = 0; x < out.width(); ++x) {
                const Vec2 p = t.apply({static_cast<double>(x), static_cast<double>(y)});
                bool inside = false;
                out.at(x, y) = static_cast<float>(sample_bilinear(img, p.x, p.y, &inside));
                const bool mv = inside && (!masked || img.mask_at(std::clamp(static_cast<int>(std::lround(p.x)), 0, img.width() - 1),
                                                                 std::clamp(static_cast<int>(std::lround(p.y)), 0, img.height() - 1)));
                omask[out.idx(x, y)] = mv ? 1 : 0;
            }
        });
    }
    if (masked) out.set_mask(std::move(omask));
    return out;
}

// Backward warp by a dense field defined on the output grid.
inline Image2D warp(const Image2D& img, const DeformationField& u, Interp method = Interp::Bilinear) {
    if (u.width <= 0 || u.height <= 0)
        throw std::invalid_argument("warp: deformation field dimensions invalid");
    Image2D out(u.width, u.height, img.pixel_size());
    std::vector<std::uint8_t> omask(out.size(), 0);
    const bool masked = img.has_mask();
    const BSplineImage* spline = nullptr;
    BSplineImage maybe_spline = (method == Interp::CubicBSpline) ? BSplineImage(img) : BSplineImage(Image2D(1, 1));
    if (method == Interp::CubicBSpline) spline = &maybe_spline;
    parallel_for(static_cast<std::size_t>(u.height), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < u.width; ++x) {
            const Vec2 d = u.at(x, y);
            const double px = x + d.x, py = y + d.y;
            bool inside = false;
            const double v = spline ? spline->sample(px, py, &inside) : sample_bilinear(img, px, py, &inside);
            out.at(x, y) = static_cast<float>(v);
            const bool mv = inside && (!masked || img.mask_at(std::clamp(static_cast<int>(std::lround(px)), 0, img.width() - 1),
                                                              std::clamp(static_cast<int>(std::lround(py)), 0, img.height() - 1)));
            omask[out.idx(x, y)] = mv ? 1 : 0;
        }
    });
    if (masked) out.set_mask(std::move(omask));
    return out;
}

// One step in a backward-warp chain: either a parametric transform or a
// dense field, each mapping its target grid into its source grid. An
// optional grid_scale converts target-grid pixels to source-grid pixels
// when the two live at different pixel sizes.
struct TransformStep {
    enum class Type { Parametric, Field } type = Type::Parametric;
    TransformParams params;
    DeformationField field;
    double grid_scale = 1.0;  // source_coords = step(x) * grid_scale

    static TransformStep parametric(const TransformParams& t, double grid_scale = 1.0) {
        TransformStep s;
        s.type = Type::Parametric;
        s.params = t;
        s.grid_scale = grid_scale;
        return s;
    }
    static TransformStep dense(DeformationField f, double grid_scale = 1.0) {
        TransformStep s;
        s.type = Type::Field;
        s.field = std::move(f);
        s.grid_scale = grid_scale;
        return s;
    }

    Vec2 map(const Vec2& p) const {
        Vec2 q;
        if (type == Type::Parametric) {
            q = params.apply(p);
        } else {
            const Vec2 d = field.sample(p.x, p.y);
            q = {p.x + d.x, p.y + d.y};
        }
        return {q.x * grid_scale, q.y * grid_scale};
    }
};

// Collapse a backward-warp chain [s0, s1, ..., sk] into one dense field on
// the final target grid: x -> s_k(...s_1(s_0(x))...). Applying the result
// equals applying the chain sequentially, with one resampling.
inline DeformationField compose_transforms(const std::vector<TransformStep>& chain, int w, int h) {
    if (chain.empty()) throw std::invalid_argument("compose_transforms: empty chain");
    DeformationField out(w, h);
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < w; ++x) {
            Vec2 p{static_cast<double>(x), static_cast<double>(y)};
            for (const auto& step : chain) p = step.map(p);
            out.set(x, y, {p.x - x, p.y - y});
        }
    });
    return out;
}

}  // namespace plireg
