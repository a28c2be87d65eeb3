#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "plireg/cot.hpp"

using namespace plireg;

namespace {

// Smooth seeded value noise: random lattice, smoothstep-blended. Gives the
// 1/f-ish texture multiresolution registration expects.
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
        const double gx = x / cell, gy = y / cell;
        const int ix = std::clamp(static_cast<int>(gx), 0, nx - 2);
        const int iy = std::clamp(static_cast<int>(gy), 0, ny - 2);
        auto ss = [](double t) { return t * t * (3.0 - 2.0 * t); };
        const double fx = ss(std::clamp(gx - ix, 0.0, 1.0)), fy = ss(std::clamp(gy - iy, 0.0, 1.0));
        auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(b) * nx + a]; };
        return (1 - fy) * ((1 - fx) * L(ix, iy) + fx * L(ix + 1, iy)) +
               fy * ((1 - fx) * L(ix, iy + 1) + fx * L(ix + 1, iy + 1));
    }
};

// brain-ish blob with multi-scale internal texture, masked like the
// segmented sections the rigid stage actually sees
Image2D phantom(int w, int h, unsigned seed) {
    ValueNoise coarse(w, h, 14.0, seed);
    ValueNoise fine(w, h, 5.0, seed + 1000);
    Image2D img(w, h);
    std::vector<std::uint8_t> mask(img.size(), 0);
    const double cx = w / 2.0, cy = h / 2.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double ex = (x - cx) / (0.38 * w), ey = (y - cy) / (0.33 * h);
            const double d = ex * ex + ey * ey;
            double v = 0.0;
            if (d < 1.0) {
                v = 0.55 + 0.28 * coarse(x, y) + 0.12 * fine(x, y);
                const double ex2 = (x - cx * 0.8) / (0.12 * w), ey2 = (y - cy * 1.1) / (0.1 * h);
                if (ex2 * ex2 + ey2 * ey2 < 1.0) v *= 0.35;  // dark nucleus
                mask[img.idx(x, y)] = 1;
            }
            img.at(x, y) = static_cast<float>(std::clamp(v, 0.05, 1.0));
        }
    img.set_mask(mask);
    return img;
}

double compose_residual_px(const TransformParams& truth, const TransformParams& recovered, int w, int h) {
    // truth o recovered should be identity; probe the corners and center
    const auto comp = truth.compose(recovered);
    double worst = 0.0;
    for (const Vec2 p : {Vec2{0, 0}, Vec2{w - 1.0, 0.0}, Vec2{0.0, h - 1.0},
                         Vec2{w - 1.0, h - 1.0}, Vec2{w / 2.0, h / 2.0}}) {
        const Vec2 q = comp.apply(p);
        worst = std::max(worst, std::hypot(q.x - p.x, q.y - p.y));
    }
    return worst;
}

}  // namespace

TEST_CASE("rigid recovery on noiseless self-warp") {
    Image2D fixed = phantom(96, 96, 31);
    const auto truth = TransformParams::rigid(5.0, -3.0, 4.0 * M_PI / 180.0, {48.0, 48.0});
    Image2D moving = warp(fixed, truth, Interp::CubicBSpline);
    RigidRegOptions opt;
    auto res = register_rigid(fixed, moving, TransformParams::identity(), TransformKind::Rigid, opt);
    const auto comp = truth.compose(res.params);
    CHECK(std::abs(comp.angle) < 0.05 * M_PI / 180.0);
    CHECK(compose_residual_px(truth, res.params, 96, 96) < 0.1);
}

TEST_CASE("warm start at the optimum is a fixed point") {
    Image2D fixed = phantom(96, 96, 32);
    const auto truth = TransformParams::rigid(2.0, 1.0, 2.0 * M_PI / 180.0, {48.0, 48.0});
    Image2D moving = warp(fixed, truth, Interp::CubicBSpline);
    RigidRegOptions opt;
    auto first = register_rigid(fixed, moving, TransformParams::identity(), TransformKind::Rigid, opt);

    // restart from the converged parameters on a single level
    RigidRegOptions warm = opt;
    warm.pyramid_levels = 1;
    warm.coarse_translation_search = false;
    auto res = register_rigid(fixed, moving, first.params, TransformKind::Rigid, warm);
    CHECK(res.converged);
    CHECK(res.objective_trace.size() <= 3);  // <= 2 accepted LM steps
    CHECK(res.final_objective <= first.final_objective + 1e-6);
}

TEST_CASE("multi-modal surrogate with noise recovers within half a pixel") {
    Image2D fixed = phantom(96, 96, 33);
    const auto truth = TransformParams::rigid(6.0, -4.0, 5.0 * M_PI / 180.0, {48.0, 48.0});
    Image2D moving = warp(fixed, truth, Interp::CubicBSpline);
    std::mt19937 rng(34);
    std::normal_distribution<float> noise(0.0f, 0.02f);
    for (auto& v : moving.data()) v = std::pow(std::clamp(v, 0.0f, 1.0f), 0.6f) + noise(rng);
    auto res = register_rigid(fixed, moving, TransformParams::identity(), TransformKind::Rigid, {});
    const auto comp = truth.compose(res.params);
    CHECK(std::abs(comp.angle) < 0.5 * M_PI / 180.0);
    CHECK(compose_residual_px(truth, res.params, 96, 96) < 0.5);
}

TEST_CASE("translation consistency over a range of shifts") {
    Image2D fixed = phantom(96, 96, 35);
    for (const double d : {4.0, 12.0, 20.0}) {
        Image2D moving = warp(fixed, TransformParams::translation(d, -d * 0.5), Interp::CubicBSpline);
        auto res = register_rigid(fixed, moving, TransformParams::identity(), TransformKind::Rigid, {});
        CHECK(res.params.tx == Catch::Approx(-d).margin(0.1));
        CHECK(res.params.ty == Catch::Approx(d * 0.5).margin(0.1));
    }
}

TEST_CASE("objective trace is non-increasing within each level") {
    Image2D fixed = phantom(96, 96, 36);
    Image2D moving = warp(fixed, TransformParams::rigid(4.0, 2.0, 0.05, {48, 48}), Interp::CubicBSpline);
    auto res = register_rigid(fixed, moving, TransformParams::identity(), TransformKind::Rigid, {});
    REQUIRE(!res.objective_trace.empty());
    for (std::size_t l = 0; l < res.level_starts.size(); ++l) {
        const std::size_t lo = res.level_starts[l];
        const std::size_t hi = l + 1 < res.level_starts.size() ? res.level_starts[l + 1]
                                                               : res.objective_trace.size();
        for (std::size_t i = lo + 1; i < hi; ++i)
            REQUIRE(res.objective_trace[i] <= res.objective_trace[i - 1] + 1e-15);
    }
}

TEST_CASE("A->B and B->A registrations are near-inverse") {
    Image2D a = phantom(96, 96, 37);
    Image2D b = warp(a, TransformParams::rigid(3.0, -2.0, 0.06, {48, 48}), Interp::CubicBSpline);
    auto ab = register_rigid(a, b, TransformParams::identity(), TransformKind::Rigid, {});
    auto ba = register_rigid(b, a, TransformParams::identity(), TransformKind::Rigid, {});
    const auto comp = ab.params.compose(ba.params);
    double rms = 0.0;
    int n = 0;
    for (int y = 24; y < 72; y += 8)
        for (int x = 24; x < 72; x += 8) {
            const Vec2 q = comp.apply({static_cast<double>(x), static_cast<double>(y)});
            rms += (q.x - x) * (q.x - x) + (q.y - y) * (q.y - y);
            ++n;
        }
    rms = std::sqrt(rms / n);
    CHECK(rms < 0.3);
}

TEST_CASE("similarity registration recovers scale") {
    Image2D fixed = phantom(112, 112, 38);
    const auto truth = TransformParams::similarity(3.0, 1.0, 0.04, 1.12, {56, 56});
    Image2D moving = warp(fixed, truth, Interp::CubicBSpline);
    auto res = register_rigid(fixed, moving, TransformParams::identity(), TransformKind::Similarity, {});
    const auto comp = truth.compose(res.params);
    CHECK(comp.scale == Catch::Approx(1.0).margin(0.005));
    CHECK(compose_residual_px(truth, res.params, 112, 112) < 0.5);
}

TEST_CASE("diverged overlap raises") {
    Image2D fixed = phantom(64, 64, 39);
    Image2D moving = phantom(64, 64, 39);
    // throw the moving image far out of the frame
    CHECK_THROWS_AS(ssd_cot_objective(fixed, moving, TransformParams::translation(200.0, 0.0)),
                    DivergedError);
}
