#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace plireg {

struct Vec2 {
    double x = 0.0, y = 0.0;
    Vec2() = default;
    Vec2(double x_, double y_) : x(x_), y(y_) {}
    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double norm() const { return std::hypot(x, y); }
};

enum class TransformKind { Translation, Rigid, Similarity };

inline const char* to_string(TransformKind k) {
    switch (k) {
        case TransformKind::Translation: return "translation";
        case TransformKind::Rigid: return "rigid";
        default: return "similarity";
    }
}

// Parametric 2D transform: T(x) = scale * R(angle) * (x - center) + center + t.
// Used as a backward-warp map (output pixel -> source position). Closed
// under composition up to similarity.
struct TransformParams {
    TransformKind kind = TransformKind::Translation;
    double tx = 0.0, ty = 0.0;   // pixels
    double angle = 0.0;          // radians, in (-pi, pi]
    double scale = 1.0;          // 1.0 for translation/rigid
    Vec2 center;                 // rotation/scaling center, pixels

    static TransformParams identity() { return {}; }

    static TransformParams translation(double tx, double ty) {
        TransformParams t;
        t.kind = TransformKind::Translation;
        t.tx = tx;
        t.ty = ty;
        return t;
    }

    static TransformParams rigid(double tx, double ty, double angle, Vec2 center = {}) {
        TransformParams t;
        t.kind = TransformKind::Rigid;
        t.tx = tx;
        t.ty = ty;
        t.angle = normalize_angle(angle);
        t.center = center;
        return t;
    }

    static TransformParams similarity(double tx, double ty, double angle, double scale, Vec2 center = {}) {
        if (!(scale > 0.0)) throw std::invalid_argument("TransformParams: scale must be > 0");
        TransformParams t;
        t.kind = TransformKind::Similarity;
        t.tx = tx;
        t.ty = ty;
        t.angle = normalize_angle(angle);
        t.scale = scale;
        t.center = center;
        return t;
    }

    static double normalize_angle(double a) {
        a = std::remainder(a, 2.0 * M_PI);
        if (a <= -M_PI) a = M_PI;  // land on (-pi, pi]
        return a;
    }

    bool is_identity() const {
        return tx == 0.0 && ty == 0.0 && angle == 0.0 && scale == 1.0;
    }

    Vec2 apply(const Vec2& p) const {
        if (kind == TransformKind::Translation) return {p.x + tx, p.y + ty};
        const double c = std::cos(angle), s = std::sin(angle);
        const double dx = p.x - center.x, dy = p.y - center.y;
        return {scale * (c * dx - s * dy) + center.x + tx,
                scale * (s * dx + c * dy) + center.y + ty};
    }

    // Affine matrix form: T(x) = [a -b; b a] x + [bx; by].
    void to_matrix(double& a, double& b, double& bx, double& by) const {
        const double c = std::cos(angle), s = std::sin(angle);
        a = scale * c;
        b = scale * s;
        bx = center.x + tx - (a * center.x - b * center.y);
        by = center.y + ty - (b * center.x + a * center.y);
    }

    static TransformParams from_matrix(double a, double b, double bx, double by) {
        const double sc = std::hypot(a, b);
        if (!(sc > 0.0)) throw std::invalid_argument("TransformParams: degenerate matrix");
        const double ang = std::atan2(b, a);
        TransformParams t;
        if (std::abs(sc - 1.0) > 1e-12 && std::abs(ang) > 1e-12)
            t.kind = TransformKind::Similarity;
        else if (std::abs(sc - 1.0) > 1e-12)
            t.kind = TransformKind::Similarity;
        else if (std::abs(ang) > 1e-12)
            t.kind = TransformKind::Rigid;
        else
            t.kind = TransformKind::Translation;
        t.scale = sc;
        t.angle = normalize_angle(ang);
        t.center = {0.0, 0.0};
        t.tx = bx;
        t.ty = by;
        if (t.kind == TransformKind::Translation) {
            t.scale = 1.0;
            t.angle = 0.0;
        }
        return t;
    }

    // this after other: (this ∘ other)(x) = this(other(x)).
    TransformParams compose(const TransformParams& other) const {
        double a1, b1, x1, y1, a2, b2, x2, y2;
        to_matrix(a1, b1, x1, y1);
        other.to_matrix(a2, b2, x2, y2);
        const double a = a1 * a2 - b1 * b2;
        const double b = b1 * a2 + a1 * b2;
        const double bx = a1 * x2 - b1 * y2 + x1;
        const double by = b1 * x2 + a1 * y2 + y1;
        return from_matrix(a, b, bx, by);
    }

    TransformParams inverse() const {
        double a, b, bx, by;
        to_matrix(a, b, bx, by);
        const double d = a * a + b * b;
        if (!(d > 0.0)) throw std::invalid_argument("TransformParams: not invertible");
        const double ia = a / d, ib = -b / d;
        return from_matrix(ia, ib, -(ia * bx - ib * by), -(ib * bx + ia * by));
    }
};

}  // namespace plireg
