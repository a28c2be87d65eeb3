#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <limits>

#include "plireg/cot.hpp"
#include "plireg/image.hpp"

namespace plireg {

struct FeTParams {
    int var_patch = 7;           // odd px, structure-variability window
    int texture_patch = 5;       // odd px, texture window
    double texture_weight = 0.5;
    void validate() const {
        if (var_patch < 3 || var_patch % 2 == 0 || texture_patch < 3 || texture_patch % 2 == 0)
            throw std::invalid_argument("FeTParams: patches must be odd and >= 3");
        if (texture_weight < 0.0) throw std::invalid_argument("FeTParams: texture_weight must be >= 0");
    }
};

namespace fetdetail {

// Variance of one channel over the patch via box sums, divided by the
// channel's global variance (unit-variance standardization). Channels
// that are globally constant contribute nothing.
struct ChannelVariance {
    cotdetail::BoxSum s1, s2;
    double global_var = 0.0;
    ChannelVariance(int w, int h) : s1(w, h), s2(w, h) {}

    void build(const std::vector<double>& c, const std::vector<std::uint8_t>& valid) {
        std::vector<double> v(c.size()), v2(c.size());
        double sum = 0.0, sum2 = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < c.size(); ++i) {
            const bool ok = valid.empty() || valid[i];
            v[i] = ok ? c[i] : 0.0;
            v2[i] = v[i] * v[i];
            if (ok) {
                sum += c[i];
                sum2 += c[i] * c[i];
                ++n;
            }
        }
        s1.build(v);
        s2.build(v2);
        if (n > 0) {
            const double mu = sum / n;
            global_var = std::max(0.0, sum2 / n - mu * mu);
        }
    }

    double patch_var(int x, int y, int radius, double n) const {
        if (global_var < 1e-24 || n < 2.0) return 0.0;
        const double mu = s1.window(x, y, radius) / n;
        const double var = std::max(0.0, s2.window(x, y, radius) / n - mu * mu);
        return var / global_var;
    }
};

}  // namespace fetdetail

// Trace of the 7x7 covariance over patch members of the feature vector
// (x, y, |gx|, |gy|, |gxx|, |gyy|, |g(center)-g(member)|), each channel
// standardized to unit global variance. The trace is the sum of the
// seven per-channel variances.
inline Image2D structure_variability(const Image2D& img, const FeTParams& p = {}) {
    p.validate();
    const int w = img.width(), h = img.height();
    const int radius = p.var_patch / 2;
    if (w < 3 || h < 3) throw std::invalid_argument("structure_variability: image too small");

    Image2D gx, gy, gxx, gyy;
    gradient(img, gx, gy);
    second_derivatives(img, gxx, gyy);

    std::vector<std::uint8_t> valid;
    if (img.has_mask()) valid = img.mask();

    const std::size_t n_px = img.size();
    std::vector<std::vector<double>> channels(6, std::vector<double>(n_px));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = img.idx(x, y);
            channels[0][i] = x;
            channels[1][i] = y;
            channels[2][i] = std::abs(gx[i]);
            channels[3][i] = std::abs(gy[i]);
            channels[4][i] = std::abs(gxx[i]);
            channels[5][i] = std::abs(gyy[i]);
        }

    std::vector<fetdetail::ChannelVariance> cv;
    cv.reserve(6);
    for (int c = 0; c < 6; ++c) {
        cv.emplace_back(w, h);
        cv[c].build(channels[c], valid);
    }

    // member counts and intensity sums for the difference channel
    std::vector<double> ones(n_px), gv(n_px), gv2(n_px);
    for (std::size_t i = 0; i < n_px; ++i) {
        const bool ok = valid.empty() || valid[i];
        ones[i] = ok ? 1.0 : 0.0;
        gv[i] = ok ? img[i] : 0.0;
        gv2[i] = gv[i] * gv[i];
    }
    cotdetail::BoxSum sn(w, h), sg(w, h), sg2(w, h);
    sn.build(ones);
    sg.build(gv);
    sg2.build(gv2);

    // |g(x)-g(x_k)|: per-pixel mean needs one direct pass, which also
    // accumulates the channel's global moments over all pairs
    std::vector<double> abs_mean(n_px, 0.0);
    auto& pool = ThreadPool::instance();
    const int blocks = std::max(1, std::min<int>(pool.size(), h));
    std::vector<double> g_sum(blocks, 0.0), g_sum2(blocks, 0.0), g_n(blocks, 0.0);
    pool.run_blocks(static_cast<std::size_t>(h), [&](int blk, std::size_t lo, std::size_t hi) {
        for (std::size_t yi = lo; yi < hi; ++yi) {
            const int y = static_cast<int>(yi);
            for (int x = 0; x < w; ++x) {
                const std::size_t i = img.idx(x, y);
                if (!img.mask_at(i)) continue;
                const double g0 = img[i];
                double acc = 0.0;
                int n = 0;
                for (int dy = -radius; dy <= radius; ++dy)
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int xx = x + dx, yy = y + dy;
                        if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
                        if (!img.mask_at(xx, yy)) continue;
                        acc += std::abs(g0 - img.at(xx, yy));
                        ++n;
                    }
                if (n > 0) abs_mean[i] = acc / n;
                g_sum[blk] += acc;
                const double s2 = n * g0 * g0 - 2.0 * g0 * sg.window(x, y, radius) + sg2.window(x, y, radius);
                g_sum2[blk] += s2;
                g_n[blk] += n;
            }
        }
    });
    double pair_sum = 0.0, pair_sum2 = 0.0, pair_n = 0.0;
    for (int b = 0; b < blocks; ++b) {
        pair_sum += g_sum[b];
        pair_sum2 += g_sum2[b];
        pair_n += g_n[b];
    }
    double diff_global_var = 0.0;
    if (pair_n > 0.0) {
        const double mu = pair_sum / pair_n;
        diff_global_var = std::max(0.0, pair_sum2 / pair_n - mu * mu);
    }

    Image2D out(w, h, img.pixel_size());
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < w; ++x) {
            const std::size_t i = img.idx(x, y);
            if (!img.mask_at(i)) continue;
            const double n = sn.window(x, y, radius);
            if (n < 2.0) continue;
            double trace = 0.0;
            for (int c = 0; c < 6; ++c) trace += cv[c].patch_var(x, y, radius, n);
            if (diff_global_var >= 1e-24) {
                const double g0 = img[i];
                const double e2 = (n * g0 * g0 - 2.0 * g0 * sg.window(x, y, radius) +
                                   sg2.window(x, y, radius)) / n;
                const double var7 = std::max(0.0, e2 - abs_mean[i] * abs_mean[i]);
                trace += var7 / diff_global_var;
            }
            out.at(x, y) = static_cast<float>(trace);
        }
    });
    if (img.has_mask()) out.set_mask(img.mask());
    return out;
}

namespace fetdetail {

// NCC of the replicate-clamped 3x3 neighborhoods at a and b. Population
// statistics; degenerate pairs: both flat -> 1, one flat -> 0.
inline double ncc3x3(const Image2D& img, int ax, int ay, int bx, int by) {
    double va[9], vb[9];
    int k = 0;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx, ++k) {
            va[k] = img.at(std::clamp(ax + dx, 0, img.width() - 1),
                           std::clamp(ay + dy, 0, img.height() - 1));
            vb[k] = img.at(std::clamp(bx + dx, 0, img.width() - 1),
                           std::clamp(by + dy, 0, img.height() - 1));
        }
    double ma = 0, mb = 0;
    for (int i = 0; i < 9; ++i) {
        ma += va[i];
        mb += vb[i];
    }
    ma /= 9.0;
    mb /= 9.0;
    double saa = 0, sbb = 0, sab = 0;
    for (int i = 0; i < 9; ++i) {
        saa += (va[i] - ma) * (va[i] - ma);
        sbb += (vb[i] - mb) * (vb[i] - mb);
        sab += (va[i] - ma) * (vb[i] - mb);
    }
    const bool fa = saa < 1e-24, fb = sbb < 1e-24;
    if (fa && fb) return 1.0;
    if (fa || fb) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace fetdetail

// Mean normalized cross-correlation between the center pixel's 3x3
// neighborhood and each other member's within the texture patch,
// remapped from [-1,1] to [0,1].
inline Image2D texture_measure(const Image2D& img, const FeTParams& p = {}) {
    p.validate();
    if (img.width() <= p.texture_patch || img.height() <= p.texture_patch)
        throw std::invalid_argument("texture_measure: image smaller than texture patch");
    const int radius = p.texture_patch / 2;
    Image2D out(img.width(), img.height(), img.pixel_size());
    parallel_for(static_cast<std::size_t>(img.height()), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < img.width(); ++x) {
            if (!img.mask_at(x, y)) continue;
            double acc = 0.0;
            int n = 0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    if (!dx && !dy) continue;
                    const int xx = x + dx, yy = y + dy;
                    if (!img.in_bounds(xx, yy) || !img.mask_at(xx, yy)) continue;
                    acc += fetdetail::ncc3x3(img, x, y, xx, yy);
                    ++n;
                }
            const double mean = n > 0 ? acc / n : 1.0;
            out.at(x, y) = static_cast<float>((mean + 1.0) / 2.0);
        }
    });
    if (img.has_mask()) out.set_mask(img.mask());
    return out;
}

// FeT = S_var + texture_weight * S_T, min-max normalized to [0,1] over
// the mask.
inline Image2D feature_transform(const Image2D& img, const FeTParams& p = {}) {
    Image2D sv = structure_variability(img, p);
    Image2D st = texture_measure(img, p);
    std::vector<double> vals(img.size(), 0.0);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        if (!img.mask_at(i)) continue;
        vals[i] = static_cast<double>(sv[i]) + p.texture_weight * st[i];
        lo = std::min(lo, vals[i]);
        hi = std::max(hi, vals[i]);
    }
    Image2D out(img.width(), img.height(), img.pixel_size());
    if (hi > lo) {
        const double span = hi - lo;
        for (std::size_t i = 0; i < vals.size(); ++i)
            if (img.mask_at(i))
                out[i] = static_cast<float>(std::clamp((vals[i] - lo) / span, 0.0, 1.0));
    } else {
        for (std::size_t i = 0; i < vals.size(); ++i)
            if (img.mask_at(i)) out[i] = static_cast<float>(vals[i]);
    }
    if (img.has_mask()) out.set_mask(img.mask());
    return out;
}

}  // namespace plireg
