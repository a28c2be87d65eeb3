#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "plireg/image.hpp"
#include "plireg/transform.hpp"

namespace plireg {

enum class ThresholdMethod { Otsu, Fixed };

struct SegmentationParams {
    ThresholdMethod threshold_method = ThresholdMethod::Otsu;
    double fixed_threshold = 0.5;          // normalized intensity, Fixed mode
    double min_component_fraction = 0.01;  // of image area
    int closing_radius = 2;                // px
};

class SegmentationError : public std::runtime_error {
public:
    SegmentationError(const std::string& msg, double best_fraction)
        : std::runtime_error(msg), best_fraction_(best_fraction) {}
    double best_fraction() const { return best_fraction_; }

private:
    double best_fraction_;
};

namespace detail {

inline double otsu_threshold(const Image2D& img) {
    constexpr int kBins = 256;
    std::array<std::size_t, kBins> hist{};
    float lo = img[0], hi = img[0];
    for (float v : img.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi <= lo) return lo;  // constant image: nothing above threshold
    for (float v : img.data()) {
        int b = static_cast<int>((v - lo) / (hi - lo) * (kBins - 1));
        hist[std::clamp(b, 0, kBins - 1)]++;
    }
    const double total = static_cast<double>(img.size());
    double sum_all = 0.0;
    for (int b = 0; b < kBins; ++b) sum_all += b * static_cast<double>(hist[b]);
    double w0 = 0.0, sum0 = 0.0, best_sigma = -1.0;
    int best_bin = 0;
    for (int b = 0; b < kBins; ++b) {
        w0 += static_cast<double>(hist[b]);
        if (w0 == 0.0) continue;
        const double w1 = total - w0;
        if (w1 == 0.0) break;
        sum0 += b * static_cast<double>(hist[b]);
        const double m0 = sum0 / w0;
        const double m1 = (sum_all - sum0) / w1;
        const double sigma = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (sigma > best_sigma) {
            best_sigma = sigma;
            best_bin = b;
        }
    }
    return lo + (best_bin + 0.5) / (kBins - 1) * (hi - lo);
}

inline std::vector<std::pair<int, int>> disk_offsets(int radius) {
    std::vector<std::pair<int, int>> offs;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= radius * radius) offs.emplace_back(dx, dy);
    return offs;
}

inline void morph(std::vector<std::uint8_t>& m, int w, int h, int radius, bool dilate) {
    if (radius <= 0) return;
    const auto offs = disk_offsets(radius);
    std::vector<std::uint8_t> out(m.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool hit = !dilate;
            for (const auto& [dx, dy] : offs) {
                const int xx = x + dx, yy = y + dy;
                const bool v = (xx >= 0 && yy >= 0 && xx < w && yy < h)
                                   ? m[static_cast<std::size_t>(yy) * w + xx] != 0
                                   : false;  // outside counts as background
                if (dilate && v) {
                    hit = true;
                    break;
                }
                if (!dilate && !v) {
                    hit = false;
                    break;
                }
            }
            out[static_cast<std::size_t>(y) * w + x] = hit ? 1 : 0;
        }
    m.swap(out);
}

// Largest 8-connected foreground component; returns its area.
inline std::size_t keep_largest_component(std::vector<std::uint8_t>& m, int w, int h) {
    std::vector<int> label(m.size(), -1);
    int next = 0;
    std::vector<std::size_t> areas;
    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (!m[i] || label[i] >= 0) continue;
        std::size_t area = 0;
        stack.push_back(i);
        label[i] = next;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++area;
            const int x = static_cast<int>(p % w), y = static_cast<int>(p / w);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dx && !dy) continue;
                    const int xx = x + dx, yy = y + dy;
                    if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
                    const std::size_t q = static_cast<std::size_t>(yy) * w + xx;
                    if (m[q] && label[q] < 0) {
                        label[q] = next;
                        stack.push_back(q);
                    }
                }
        }
        areas.push_back(area);
        ++next;
    }
    if (areas.empty()) return 0;
    const int best = static_cast<int>(std::max_element(areas.begin(), areas.end()) - areas.begin());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (label[i] == best) ? 1 : 0;
    return areas[best];
}

}  // namespace detail

// Threshold + morphological closing + largest connected component.
// Background pixels are zeroed; the mask marks the kept component.
inline Image2D segment(const Image2D& img, const SegmentationParams& p = {}) {
    if (img.empty()) throw std::invalid_argument("segment: empty image");
    const double thr = p.threshold_method == ThresholdMethod::Otsu ? detail::otsu_threshold(img)
                                                                   : p.fixed_threshold;
    const int w = img.width(), h = img.height();
    std::vector<std::uint8_t> m(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) m[i] = img[i] > thr ? 1 : 0;
    detail::morph(m, w, h, p.closing_radius, true);
    detail::morph(m, w, h, p.closing_radius, false);
    const std::size_t area = detail::keep_largest_component(m, w, h);
    const double fraction = static_cast<double>(area) / static_cast<double>(img.size());
    if (area == 0 || fraction < p.min_component_fraction) {
        std::ostringstream os;
        os << "segment: largest component covers " << fraction << " of the image, need "
           << p.min_component_fraction;
        throw SegmentationError(os.str(), fraction);
    }
    Image2D out = img;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!m[i]) out[i] = 0.0f;
    out.set_mask(std::move(m));
    return out;
}

// Intensity-weighted centroid over the mask.
inline Vec2 center_of_mass(const Image2D& img) {
    double sw = 0.0, sx = 0.0, sy = 0.0;
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            if (!img.mask_at(x, y)) continue;
            const double v = img.at(x, y);
            sw += v;
            sx += v * x;
            sy += v * y;
        }
    if (!(sw > 0.0)) throw std::runtime_error("center_of_mass: empty mask or all-zero intensities");
    return {sx / sw, sy / sw};
}

// Translation (backward-warp parameters) aligning the moving COM onto the
// fixed COM, after resampling moving to the fixed pixel size.
inline TransformParams com_align(const Image2D& moving, const Image2D& fixed) {
    const Image2D moving_rs = std::abs(moving.pixel_size() - fixed.pixel_size()) < 1e-12
                                  ? moving
                                  : resample_to(moving, fixed.pixel_size());
    const Vec2 cm = center_of_mass(moving_rs);
    const Vec2 cf = center_of_mass(fixed);
    return TransformParams::translation(cm.x - cf.x, cm.y - cf.y);
}

// Edge-preserving smoothing via the bilateral grid (downsampled space x
// range histogram, blurred, then sliced). O(N) in the pixel count.
inline Image2D bilateral_filter(const Image2D& img, double sigma_spatial, double sigma_range) {
    if (!(sigma_spatial > 0.0) || !(sigma_range > 0.0))
        throw std::invalid_argument("bilateral_filter: sigmas must be > 0");
    float lo = img[0], hi = img[0];
    for (float v : img.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double extent = std::max(1e-12, static_cast<double>(hi - lo));
    // grid resolution sigma/2 in both domains, blur sigma = 2 cells
    const double cell_s = sigma_spatial / 2.0;
    const double cell_r = sigma_range / 2.0;
    const int gw = static_cast<int>(std::floor(img.width() / cell_s)) + 3;
    const int gh = static_cast<int>(std::floor(img.height() / cell_s)) + 3;
    const int gr = static_cast<int>(std::floor(extent / cell_r)) + 3;

    std::vector<double> wsum(static_cast<std::size_t>(gw) * gh * gr, 0.0);
    std::vector<double> vsum(wsum.size(), 0.0);
    auto gidx = [&](int x, int y, int r) {
        return (static_cast<std::size_t>(r) * gh + y) * gw + x;
    };
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            const double v = img.at(x, y);
            const int gx = static_cast<int>(std::lround(x / cell_s)) + 1;
            const int gy = static_cast<int>(std::lround(y / cell_s)) + 1;
            const int gz = static_cast<int>(std::lround((v - lo) / cell_r)) + 1;
            const std::size_t i = gidx(std::min(gx, gw - 1), std::min(gy, gh - 1), std::min(gz, gr - 1));
            wsum[i] += 1.0;
            vsum[i] += v;
        }

    // separable Gaussian blur over the 3 grid axes, sigma = 2 cells
    const double gsigma = 2.0;
    const int radius = static_cast<int>(std::ceil(3.0 * gsigma));
    std::vector<double> kern(2 * radius + 1);
    double knorm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kern[i + radius] = std::exp(-0.5 * i * i / (gsigma * gsigma));
        knorm += kern[i + radius];
    }
    for (double& k : kern) k /= knorm;

    auto blur_axis = [&](std::vector<double>& grid, int axis) {
        std::vector<double> out(grid.size(), 0.0);
        const int dims[3] = {gw, gh, gr};
        for (int r = 0; r < gr; ++r)
            for (int y = 0; y < gh; ++y)
                for (int x = 0; x < gw; ++x) {
                    double acc = 0.0;
                    for (int k = -radius; k <= radius; ++k) {
                        int xx = x, yy = y, rr = r;
                        int* c = axis == 0 ? &xx : axis == 1 ? &yy : &rr;
                        *c += k;
                        if (*c < 0 || *c >= dims[axis]) continue;  // zero pad
                        acc += kern[k + radius] * grid[gidx(xx, yy, rr)];
                    }
                    out[gidx(x, y, r)] = acc;
                }
        grid.swap(out);
    };
    for (int axis = 0; axis < 3; ++axis) {
        blur_axis(wsum, axis);
        blur_axis(vsum, axis);
    }

    Image2D out(img.width(), img.height(), img.pixel_size());
    auto trilinear = [&](const std::vector<double>& grid, double x, double y, double z) {
        const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y)),
                  z0 = static_cast<int>(std::floor(z));
        const double fx = x - x0, fy = y - y0, fz = z - z0;
        double acc = 0.0;
        for (int dz = 0; dz <= 1; ++dz)
            for (int dy = 0; dy <= 1; ++dy)
                for (int dx = 0; dx <= 1; ++dx) {
                    const int xx = std::clamp(x0 + dx, 0, gw - 1);
                    const int yy = std::clamp(y0 + dy, 0, gh - 1);
                    const int zz = std::clamp(z0 + dz, 0, gr - 1);
                    const double wt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                    acc += wt * grid[gidx(xx, yy, zz)];
                }
        return acc;
    };
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            const double v = img.at(x, y);
            const double gx = x / cell_s + 1.0;
            const double gy = y / cell_s + 1.0;
            const double gz = (v - lo) / cell_r + 1.0;
            const double wv = trilinear(vsum, gx, gy, gz);
            const double ww = trilinear(wsum, gx, gy, gz);
            out.at(x, y) = ww > 1e-12 ? static_cast<float>(wv / ww) : img.at(x, y);
        }
    if (img.has_mask()) out.set_mask(img.mask());
    return out;
}

// Reference bilateral filter, O(N * window^2). Kept for oracle tests and
// small images.
inline Image2D bilateral_filter_bruteforce(const Image2D& img, double sigma_spatial, double sigma_range) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma_spatial));
    Image2D out(img.width(), img.height(), img.pixel_size());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            const double c = img.at(x, y);
            double acc = 0.0, wacc = 0.0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int xx = x + dx, yy = y + dy;
                    if (!img.in_bounds(xx, yy)) continue;
                    const double v = img.at(xx, yy);
                    const double w = std::exp(-0.5 * (dx * dx + dy * dy) / (sigma_spatial * sigma_spatial)) *
                                     std::exp(-0.5 * (v - c) * (v - c) / (sigma_range * sigma_range));
                    acc += w * v;
                    wacc += w;
                }
            out.at(x, y) = static_cast<float>(acc / wacc);
        }
    if (img.has_mask()) out.set_mask(img.mask());
    return out;
}

}  // namespace plireg
