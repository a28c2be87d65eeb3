#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "plireg/fet.hpp"

using namespace plireg;

namespace {

// Fully independent recomputation: per-pixel feature vectors, explicit
// global standardization, covariance trace by definition.
Image2D svar_bruteforce(const Image2D& img, const FeTParams& p) {
    const int w = img.width(), h = img.height();
    const int r = p.var_patch / 2;
    Image2D gx, gy, gxx, gyy;
    gradient(img, gx, gy);
    second_derivatives(img, gxx, gyy);

    auto channel_value = [&](int c, int cx, int cy, int mx, int my) {
        switch (c) {
            case 0: return static_cast<double>(mx);
            case 1: return static_cast<double>(my);
            case 2: return std::abs(static_cast<double>(gx.at(mx, my)));
            case 3: return std::abs(static_cast<double>(gy.at(mx, my)));
            case 4: return std::abs(static_cast<double>(gxx.at(mx, my)));
            case 5: return std::abs(static_cast<double>(gyy.at(mx, my)));
            default: return std::abs(static_cast<double>(img.at(cx, cy)) - img.at(mx, my));
        }
    };

    // global std per channel over all (center, member) occurrences
    double g_std[7];
    for (int c = 0; c < 7; ++c) {
        double sum = 0, sum2 = 0, n = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!img.mask_at(x, y)) continue;
                if (c < 6) {
                    const double v = channel_value(c, x, y, x, y);
                    sum += v;
                    sum2 += v * v;
                    n += 1;
                } else {
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            const int xx = x + dx, yy = y + dy;
                            if (!img.in_bounds(xx, yy) || !img.mask_at(xx, yy)) continue;
                            const double v = channel_value(c, x, y, xx, yy);
                            sum += v;
                            sum2 += v * v;
                            n += 1;
                        }
                }
            }
        const double mu = n > 0 ? sum / n : 0.0;
        g_std[c] = n > 0 ? std::sqrt(std::max(0.0, sum2 / n - mu * mu)) : 0.0;
    }

    Image2D out(w, h, img.pixel_size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!img.mask_at(x, y)) continue;
            std::vector<std::array<double, 7>> members;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    const int xx = x + dx, yy = y + dy;
                    if (!img.in_bounds(xx, yy) || !img.mask_at(xx, yy)) continue;
                    std::array<double, 7> f;
                    for (int c = 0; c < 7; ++c)
                        f[c] = g_std[c] > 1e-12 ? channel_value(c, x, y, xx, yy) / g_std[c] : 0.0;
                    members.push_back(f);
                }
            if (members.size() < 2) continue;
            double trace = 0.0;
            for (int c = 0; c < 7; ++c) {
                double mu = 0;
                for (const auto& f : members) mu += f[c];
                mu /= members.size();
                double var = 0;
                for (const auto& f : members) var += (f[c] - mu) * (f[c] - mu);
                trace += var / members.size();
            }
            out.at(x, y) = static_cast<float>(trace);
        }
    if (img.has_mask()) out.set_mask(img.mask());
    return out;
}

Image2D st_bruteforce(const Image2D& img, const FeTParams& p) {
    const int r = p.texture_patch / 2;
    Image2D out(img.width(), img.height(), img.pixel_size());
    auto patch9 = [&](int cx, int cy, double* v) {
        int k = 0;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx, ++k)
                v[k] = img.at(std::clamp(cx + dx, 0, img.width() - 1),
                              std::clamp(cy + dy, 0, img.height() - 1));
    };
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            if (!img.mask_at(x, y)) continue;
            double a[9];
            patch9(x, y, a);
            double acc = 0;
            int n = 0;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    if (!dx && !dy) continue;
                    const int xx = x + dx, yy = y + dy;
                    if (!img.in_bounds(xx, yy) || !img.mask_at(xx, yy)) continue;
                    double b[9];
                    patch9(xx, yy, b);
                    double ma = 0, mb = 0;
                    for (int i = 0; i < 9; ++i) {
                        ma += a[i];
                        mb += b[i];
                    }
                    ma /= 9;
                    mb /= 9;
                    double saa = 0, sbb = 0, sab = 0;
                    for (int i = 0; i < 9; ++i) {
                        saa += (a[i] - ma) * (a[i] - ma);
                        sbb += (b[i] - mb) * (b[i] - mb);
                        sab += (a[i] - ma) * (b[i] - mb);
                    }
                    double ncc;
                    if (saa < 1e-24 && sbb < 1e-24)
                        ncc = 1.0;
                    else if (saa < 1e-24 || sbb < 1e-24)
                        ncc = 0.0;
                    else
                        ncc = sab / std::sqrt(saa * sbb);
                    acc += ncc;
                    ++n;
                }
            out.at(x, y) = static_cast<float>(((n > 0 ? acc / n : 1.0) + 1.0) / 2.0);
        }
    return out;
}

Image2D step_fixture(int n) {
    Image2D img(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) img.at(x, y) = x < n / 2 ? 0.25f : 0.75f;
    return img;
}

Image2D smooth_texture(int w, int h, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const int cell = 6;
    const int nx = w / cell + 3, ny = h / cell + 3;
    std::vector<double> lat(static_cast<std::size_t>(nx) * ny);
    for (auto& v : lat) v = u(rng);
    Image2D img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double gx = static_cast<double>(x) / cell, gy = static_cast<double>(y) / cell;
            const int ix = static_cast<int>(gx), iy = static_cast<int>(gy);
            auto ss = [](double t) { return t * t * (3 - 2 * t); };
            const double fx = ss(gx - ix), fy = ss(gy - iy);
            auto L = [&](int a, int b) { return lat[static_cast<std::size_t>(b) * nx + a]; };
            const double v = (1 - fy) * ((1 - fx) * L(ix, iy) + fx * L(ix + 1, iy)) +
                             fy * ((1 - fx) * L(ix, iy + 1) + fx * L(ix + 1, iy + 1));
            img.at(x, y) = static_cast<float>(0.5 + 0.35 * v);
        }
    return img;
}

double image_ncc(const Image2D& a, const Image2D& b) {
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

Image2D rot90(const Image2D& img) {
    Image2D out(img.height(), img.width(), img.pixel_size());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) out.at(img.height() - 1 - y, x) = img.at(x, y);
    return out;
}

}  // namespace

TEST_CASE("S_var on a constant image is the positive spatial floor") {
    Image2D c(20, 20, 1.0, 0.6f);
    FeTParams p;
    Image2D sv = structure_variability(c, p);
    const int r = p.var_patch / 2;
    const float interior = sv.at(10, 10);
    CHECK(interior > 0.0f);  // position channels alone
    for (int y = r; y < 20 - r; ++y)
        for (int x = r; x < 20 - r; ++x)
            CHECK(sv.at(x, y) == Catch::Approx(interior).margin(1e-9));
}

TEST_CASE("S_var is nonnegative everywhere") {
    Image2D img = smooth_texture(32, 28, 5);
    Image2D sv = structure_variability(img, {});
    for (float v : sv.data()) CHECK(v >= 0.0f);
}

TEST_CASE("S_var matches brute force to 1e-10") {
    FeTParams p;
    Image2D img = step_fixture(16);
    Image2D fast = structure_variability(img, p);
    Image2D slow = svar_bruteforce(img, p);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(static_cast<double>(fast[i]) == Catch::Approx(static_cast<double>(slow[i])).margin(1e-10));

    Image2D tex = smooth_texture(16, 16, 8);
    Image2D fast2 = structure_variability(tex, p);
    Image2D slow2 = svar_bruteforce(tex, p);
    for (std::size_t i = 0; i < tex.size(); ++i)
        CHECK(static_cast<double>(fast2[i]) == Catch::Approx(static_cast<double>(slow2[i])).margin(1e-10));
}

TEST_CASE("S_T conventions: constant image gives 1") {
    Image2D c(16, 16, 1.0, 0.3f);
    Image2D st = texture_measure(c, {});
    for (float v : st.data()) CHECK(v == Catch::Approx(1.0));
}

TEST_CASE("S_T matches brute force to 1e-10") {
    Image2D img = smooth_texture(16, 16, 9);
    Image2D fast = texture_measure(img, {});
    Image2D slow = st_bruteforce(img, {});
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(static_cast<double>(fast[i]) == Catch::Approx(static_cast<double>(slow[i])).margin(1e-10));
}

TEST_CASE("S_T is high where every neighborhood shows the same pattern") {
    // a ramp repeats its local pattern at every pixel: all member
    // neighborhoods are shifted copies of the center's
    Image2D img(32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) img.at(x, y) = static_cast<float>(0.1 + 0.02 * x + 0.01 * y);
    Image2D st = texture_measure(img, {});
    double mean = 0;
    int n = 0;
    for (int y = 4; y < 28; ++y)
        for (int x = 4; x < 28; ++x) {
            mean += st.at(x, y);
            ++n;
        }
    CHECK(mean / n > 0.8);
}

TEST_CASE("S_T near 0.5 on white noise") {
    std::mt19937 rng(10);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image2D img(128, 128);
    for (auto& v : img.data()) v = u(rng);
    Image2D st = texture_measure(img, {});
    double mean = 0;
    std::size_t n = 0;
    for (int y = 4; y < 124; ++y)
        for (int x = 4; x < 124; ++x) {
            mean += st.at(x, y);
            ++n;
        }
    mean /= static_cast<double>(n);
    CHECK(std::abs(mean - 0.5) < 0.05);
}

TEST_CASE("FeT bounds and weight linearity") {
    Image2D img = smooth_texture(32, 32, 11);
    FeTParams p;
    Image2D fet = feature_transform(img, p);
    for (float v : fet.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    // doubling the weight is consistent with recombining the parts
    FeTParams p2 = p;
    p2.texture_weight = 1.0;
    Image2D fet2 = feature_transform(img, p2);
    Image2D sv = structure_variability(img, p);
    Image2D st = texture_measure(img, p);
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = sv[i] + 1.0 * st[i];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(static_cast<double>(fet2[i]) ==
              Catch::Approx((sv[i] + st[i] - lo) / (hi - lo)).margin(1e-6));
}

TEST_CASE("FeT is exactly invariant to positive affine remaps") {
    Image2D img = smooth_texture(32, 32, 12);
    Image2D remap = img;
    for (auto& v : remap.data()) v = 1.7f * v + 0.2f;
    Image2D a = feature_transform(img, {});
    Image2D b = feature_transform(remap, {});
    CHECK(image_ncc(a, b) > 0.99);
}

TEST_CASE("FeT survives monotone nonlinear remaps (multi-modal surrogate)") {
    Image2D img = smooth_texture(48, 48, 13);
    Image2D remap = img;
    for (auto& v : remap.data()) v = 1.0f - std::pow(std::clamp(v, 0.0f, 1.0f), 0.7f);
    Image2D a = feature_transform(img, {});
    Image2D b = feature_transform(remap, {});
    CHECK(image_ncc(a, b) > 0.9);

    // while the raw intensities anticorrelate
    CHECK(image_ncc(img, remap) < -0.5);
}

TEST_CASE("S_var commutes with rot90") {
    Image2D img = smooth_texture(24, 30, 14);
    Image2D a = structure_variability(rot90(img), {});
    Image2D b = rot90(structure_variability(img, {}));
    REQUIRE(a.width() == b.width());
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(static_cast<double>(a[i]) == Catch::Approx(static_cast<double>(b[i])).margin(1e-10));
}

TEST_CASE("full FeT commutes with rot90") {
    Image2D img = smooth_texture(24, 24, 15);
    Image2D a = feature_transform(rot90(img), {});
    Image2D b = rot90(feature_transform(img, {}));
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(static_cast<double>(a[i]) == Catch::Approx(static_cast<double>(b[i])).margin(1e-6));
}
