#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "plireg/field.hpp"
#include "plireg/image.hpp"
#include "plireg/preprocess.hpp"
#include "plireg/transform.hpp"

namespace plireg {

struct CoTParams {
    int patch = 7;           // odd side length, px
    double epsilon = 0.001;  // stabilizer added to the patch std
    void validate() const {
        if (patch < 3 || patch % 2 == 0) throw std::invalid_argument("CoTParams: patch must be odd and >= 3");
        if (!(epsilon > 0.0)) throw std::invalid_argument("CoTParams: epsilon must be > 0");
    }
};

enum class RigidMetric { CoT, RawSSD };

struct RigidRegResult {
    TransformParams params;
    double final_objective = 0.0;
    std::vector<double> objective_trace;  // accepted values, all levels
    std::vector<int> level_starts;        // index into objective_trace per level
    int levels_used = 0;
    bool converged = false;
};

class DivergedError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace cotdetail {

// Box sums over the odd patch window via integral images. Values outside
// the image count as zero.
class BoxSum {
public:
    BoxSum(int w, int h) : w_(w), h_(h), integral_(static_cast<std::size_t>(w + 1) * (h + 1), 0.0) {}

    void build(const std::vector<double>& v) {
        for (int y = 0; y < h_; ++y) {
            double row = 0.0;
            for (int x = 0; x < w_; ++x) {
                row += v[static_cast<std::size_t>(y) * w_ + x];
                at(x + 1, y + 1) = at(x + 1, y) + row;
            }
        }
    }

    double window(int cx, int cy, int radius) const {
        const int x0 = std::max(0, cx - radius), y0 = std::max(0, cy - radius);
        const int x1 = std::min(w_ - 1, cx + radius), y1 = std::min(h_ - 1, cy + radius);
        return at(x1 + 1, y1 + 1) - at(x0, y1 + 1) - at(x1 + 1, y0) + at(x0, y0);
    }

private:
    double& at(int x, int y) { return integral_[static_cast<std::size_t>(y) * (w_ + 1) + x]; }
    double at(int x, int y) const { return integral_[static_cast<std::size_t>(y) * (w_ + 1) + x]; }
    int w_, h_;
    std::vector<double> integral_;
};

struct CotStats {
    // per-pixel patch statistics over valid members
    std::vector<double> mean, stddev;
    std::vector<int> count;
};

inline void cot_statistics(const Image2D& img, const std::vector<std::uint8_t>& valid, int patch,
                           CotStats& out) {
    const int w = img.width(), h = img.height();
    const int radius = patch / 2;
    std::vector<double> v(img.size()), v2(img.size()), ones(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const bool ok = valid.empty() || valid[i];
        const double val = ok ? img[i] : 0.0;
        v[i] = val;
        v2[i] = val * val;
        ones[i] = ok ? 1.0 : 0.0;
    }
    BoxSum s1(w, h), s2(w, h), sn(w, h);
    s1.build(v);
    s2.build(v2);
    sn.build(ones);
    out.mean.assign(img.size(), 0.0);
    out.stddev.assign(img.size(), 0.0);
    out.count.assign(img.size(), 0);
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < w; ++x) {
            const std::size_t i = img.idx(x, y);
            const double n = sn.window(x, y, radius);
            out.count[i] = static_cast<int>(std::lround(n));
            if (n < 1.0) continue;
            const double mu = s1.window(x, y, radius) / n;
            const double var = std::max(0.0, s2.window(x, y, radius) / n - mu * mu);
            out.mean[i] = mu;
            out.stddev[i] = std::sqrt(var);  // population convention
        }
    });
}

}  // namespace cotdetail

// Per-pixel local standardization (value minus patch mean over patch
// std + epsilon). Masked pixels are excluded from the statistics and
// zeroed in the output; border patches are truncated.
inline Image2D correlation_transform(const Image2D& img, const CoTParams& p = {}) {
    p.validate();
    if (img.width() <= p.patch || img.height() <= p.patch)
        throw std::invalid_argument("correlation_transform: image smaller than patch");
    std::vector<std::uint8_t> valid;
    if (img.has_mask()) valid = img.mask();
    cotdetail::CotStats st;
    cotdetail::cot_statistics(img, valid, p.patch, st);
    Image2D out(img.width(), img.height(), img.pixel_size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        if (!img.mask_at(i) || st.count[i] < 1) continue;
        out[i] = static_cast<float>((img[i] - st.mean[i]) / (st.stddev[i] + p.epsilon));
    }
    if (img.has_mask()) out.set_mask(img.mask());
    return out;
}

namespace cotdetail {

// Workspace caching everything rebuilt per objective evaluation.
struct Objective {
    double value = 0.0;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd gauss_newton;
    std::size_t overlap_count = 0;
};

enum class ParamSet { Translation, Rigid, Similarity };

inline int param_count(ParamSet s) {
    return s == ParamSet::Translation ? 2 : (s == ParamSet::Rigid ? 3 : 4);
}

inline TransformParams to_transform(ParamSet set, const Eigen::VectorXd& q, const Vec2& center) {
    switch (set) {
        case ParamSet::Translation:
            return TransformParams::translation(q[0], q[1]);
        case ParamSet::Rigid:
            return TransformParams::rigid(q[0], q[1], q[2], center);
        default:
            return TransformParams::similarity(q[0], q[1], q[2], std::exp(q[3]), center);
    }
}

inline Eigen::VectorXd from_transform(ParamSet set, const TransformParams& t) {
    Eigen::VectorXd q(param_count(set));
    q[0] = t.tx;
    q[1] = t.ty;
    if (set != ParamSet::Translation) q[2] = t.angle;
    if (set == ParamSet::Similarity) q[3] = std::log(t.scale);
    return q;
}

// Exact objective and gradient of the SSD-over-CoT similarity under a
// parametric warp. CoT is recomputed from the warped moving image each
// evaluation; the gradient includes the patch-statistics terms, regrouped
// into box sums. eval_domain, when non-empty, fixes the pixels the
// residual sum runs over (used by gradient-check fixtures).
class SsdCotEvaluator {
public:
    SsdCotEvaluator(const Image2D& fixed, const Image2D& moving, const CoTParams& p,
                    RigidMetric metric = RigidMetric::CoT,
                    std::vector<std::uint8_t> eval_domain = {})
        : fixed_(fixed), moving_(moving), spline_(moving), params_(p), metric_(metric),
          eval_domain_(std::move(eval_domain)) {
        params_.validate();
        fixed_ref_.assign(fixed.size(), 0.0);
        fixed_full_.assign(fixed.size(), 0);
        if (metric_ == RigidMetric::CoT) {
            // same double-precision path as the warped side, and residuals
            // only trusted where the fixed patch is complete: truncated
            // statistics at the mask edge bias the optimum
            std::vector<std::uint8_t> fmask;
            if (fixed.has_mask()) fmask = fixed.mask();
            CotStats st;
            cot_statistics(fixed, fmask, params_.patch, st);
            const int full = params_.patch * params_.patch;
            for (std::size_t i = 0; i < fixed.size(); ++i) {
                if (fixed.mask_at(i) && st.count[i] >= 1)
                    fixed_ref_[i] = (fixed[i] - st.mean[i]) / (st.stddev[i] + params_.epsilon);
                fixed_full_[i] = (st.count[i] == full && fixed.mask_at(i)) ? 1 : 0;
            }
        } else {
            for (std::size_t i = 0; i < fixed.size(); ++i) {
                fixed_ref_[i] = fixed[i];
                fixed_full_[i] = fixed.mask_at(i) ? 1 : 0;
            }
        }
        fixed_mask_count_ = 0;
        for (std::size_t i = 0; i < fixed.size(); ++i)
            if (fixed.mask_at(i)) ++fixed_mask_count_;
    }

    Objective evaluate(ParamSet set, const Eigen::VectorXd& q, const Vec2& center,
                       bool with_derivatives) const {
        const TransformParams t = to_transform(set, q, center);
        const int w = fixed_.width(), h = fixed_.height();
        const int np = param_count(set);
        const std::size_t n_px = fixed_.size();

        // warp moving through the spline, keeping gradients
        std::vector<double> W(n_px, 0.0), mx(n_px, 0.0), my(n_px, 0.0);
        std::vector<std::uint8_t> valid(n_px, 0);
        const bool mmask = moving_.has_mask();
        parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
            const int y = static_cast<int>(yi);
            for (int x = 0; x < w; ++x) {
                const std::size_t i = fixed_.idx(x, y);
                const Vec2 pt = t.apply({static_cast<double>(x), static_cast<double>(y)});
                bool inside = false;
                double v, gx, gy;
                if (with_derivatives) {
                    spline_.sample_grad(pt.x, pt.y, v, gx, gy, &inside);
                } else {
                    v = spline_.sample(pt.x, pt.y, &inside);
                    gx = gy = 0.0;
                }
                if (!inside) continue;
                if (mmask) {
                    const int nx = std::clamp(static_cast<int>(std::lround(pt.x)), 0, moving_.width() - 1);
                    const int ny = std::clamp(static_cast<int>(std::lround(pt.y)), 0, moving_.height() - 1);
                    if (!moving_.mask_at(nx, ny)) continue;
                }
                valid[i] = 1;
                W[i] = v;
                mx[i] = gx;
                my[i] = gy;
            }
        });

        // CoT of the warped image (or raw passthrough)
        const int radius = params_.patch / 2;
        CotStats st;
        std::vector<double> C(n_px, 0.0);
        if (metric_ == RigidMetric::CoT) {
            Image2D wimg(w, h, fixed_.pixel_size());
            for (std::size_t i = 0; i < n_px; ++i) wimg[i] = static_cast<float>(W[i]);
            cot_statistics(wimg, valid, params_.patch, st);
            for (std::size_t i = 0; i < n_px; ++i)
                if (valid[i] && st.count[i] >= 1)
                    C[i] = (W[i] - st.mean[i]) / (st.stddev[i] + params_.epsilon);
        } else {
            C = W;
        }

        // residual domain: overlap of masks, with full patch support on
        // both sides when the CoT metric is active
        const int full = params_.patch * params_.patch;
        Objective out;
        std::vector<double> r(n_px, 0.0);
        std::vector<std::uint8_t> dom(n_px, 0);
        std::size_t N = 0;
        for (std::size_t i = 0; i < n_px; ++i) {
            if (!valid[i] || !fixed_full_[i]) continue;
            if (metric_ == RigidMetric::CoT && st.count[i] != full) continue;
            if (!eval_domain_.empty() && !eval_domain_[i]) continue;
            dom[i] = 1;
            r[i] = fixed_ref_[i] - C[i];
            ++N;
        }
        out.overlap_count = N;
        if (fixed_mask_count_ > 0 && N < fixed_mask_count_ / 10)
            throw DivergedError("ssd_cot_objective: overlap below 10% of the fixed mask");
        if (N == 0) throw DivergedError("ssd_cot_objective: empty overlap");

        out.value = parallel_sum(n_px, [&](std::size_t i) { return dom[i] ? r[i] * r[i] : 0.0; }) /
                    static_cast<double>(N);
        if (!std::isfinite(out.value)) throw std::runtime_error("ssd_cot_objective: non-finite value");
        if (!with_derivatives) return out;

        // S(y): regrouped dObjective/dW(y)  (see gradient derivation in tests)
        std::vector<double> S(n_px, 0.0);
        if (metric_ == RigidMetric::CoT) {
            std::vector<double> a(n_px, 0.0), b(n_px, 0.0), c2(n_px, 0.0);
            for (std::size_t i = 0; i < n_px; ++i) {
                if (!dom[i]) continue;
                const double n = st.count[i];
                const double se = st.stddev[i] + params_.epsilon;
                a[i] = r[i] / (n * se);
                if (st.stddev[i] > 1e-12) {
                    b[i] = r[i] * C[i] / (n * st.stddev[i] * se);
                    c2[i] = b[i] * st.mean[i];
                }
            }
            BoxSum ba(w, h), bb(w, h), bc(w, h);
            ba.build(a);
            bb.build(b);
            bc.build(c2);
            parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
                const int y = static_cast<int>(yi);
                for (int x = 0; x < w; ++x) {
                    const std::size_t i = fixed_.idx(x, y);
                    if (!valid[i]) continue;
                    double s = dom[i] ? r[i] / (st.stddev[i] + params_.epsilon) : 0.0;
                    s -= ba.window(x, y, radius);
                    s -= W[i] * bb.window(x, y, radius);
                    s += bc.window(x, y, radius);
                    S[i] = s;
                }
            });
        } else {
            for (std::size_t i = 0; i < n_px; ++i)
                if (dom[i]) S[i] = r[i];
        }

        // chain through the transform Jacobian
        const double ca = std::cos(t.angle), sa = std::sin(t.angle);
        const double sc = t.scale;
        auto jac = [&](int x, int y, double gx, double gy, double* out_j) {
            out_j[0] = gx;
            out_j[1] = gy;
            if (np >= 3) {
                const double dx = x - center.x, dy = y - center.y;
                const double rx = sc * (-sa * dx - ca * dy);
                const double ry = sc * (ca * dx - sa * dy);
                out_j[2] = gx * rx + gy * ry;
                if (np == 4) {
                    const double sx = sc * (ca * dx - sa * dy);
                    const double sy = sc * (sa * dx + ca * dy);
                    out_j[3] = gx * sx + gy * sy;
                }
            }
        };

        // gradient: -(2/N) sum_y S(y) * dW(y)/dtheta
        auto& pool = ThreadPool::instance();
        const int blocks = std::max(1, std::min<int>(pool.size(), h));
        std::vector<Eigen::VectorXd> gpart(blocks, Eigen::VectorXd::Zero(np));
        std::vector<Eigen::MatrixXd> hpart(blocks, Eigen::MatrixXd::Zero(np, np));

        // spatial gradient of the C image for the Gauss-Newton matrix
        pool.run_blocks(static_cast<std::size_t>(h), [&](int blk, std::size_t lo, std::size_t hi) {
            double j[4];
            Eigen::VectorXd& g = gpart[blk];
            Eigen::MatrixXd& H = hpart[blk];
            for (std::size_t yi = lo; yi < hi; ++yi) {
                const int y = static_cast<int>(yi);
                for (int x = 0; x < w; ++x) {
                    const std::size_t i = fixed_.idx(x, y);
                    if (valid[i] && S[i] != 0.0) {
                        jac(x, y, mx[i], my[i], j);
                        for (int k = 0; k < np; ++k) g[k] += S[i] * j[k];
                    }
                    if (dom[i]) {
                        // frozen-statistics Jacobian of the residual
                        const double cgx = (x > 0 && x < w - 1 && valid[i - 1] && valid[i + 1])
                                               ? 0.5 * (C[i + 1] - C[i - 1])
                                               : 0.0;
                        const double cgy = (y > 0 && y < h - 1 && valid[i - w] && valid[i + w])
                                               ? 0.5 * (C[i + w] - C[i - w])
                                               : 0.0;
                        jac(x, y, cgx, cgy, j);
                        for (int a2 = 0; a2 < np; ++a2)
                            for (int b2 = a2; b2 < np; ++b2) H(a2, b2) += j[a2] * j[b2];
                    }
                }
            }
        });
        out.gradient = Eigen::VectorXd::Zero(np);
        out.gauss_newton = Eigen::MatrixXd::Zero(np, np);
        for (int b2 = 0; b2 < blocks; ++b2) {
            out.gradient += gpart[b2];
            out.gauss_newton += hpart[b2];
        }
        out.gradient *= -2.0 / static_cast<double>(N);
        out.gauss_newton *= 2.0 / static_cast<double>(N);
        for (int a2 = 0; a2 < np; ++a2)
            for (int b2 = a2 + 1; b2 < np; ++b2) out.gauss_newton(b2, a2) = out.gauss_newton(a2, b2);
        for (int k = 0; k < np; ++k)
            if (!std::isfinite(out.gradient[k])) throw std::runtime_error("ssd_cot_objective: non-finite gradient");
        return out;
    }

private:
    const Image2D& fixed_;
    const Image2D& moving_;
    BSplineImage spline_;
    std::vector<double> fixed_ref_;
    CoTParams params_;
    RigidMetric metric_;
    std::vector<std::uint8_t> eval_domain_;
    std::vector<std::uint8_t> fixed_full_;
    std::size_t fixed_mask_count_ = 0;
};

}  // namespace cotdetail

// Objective value and analytic gradient of the SSD-over-CoT similarity.
// theta follows the transform kind: (tx, ty [, angle [, log scale]]).
inline std::pair<double, Eigen::VectorXd> ssd_cot_objective(
    const Image2D& fixed, const Image2D& moving, const TransformParams& theta,
    const CoTParams& p = {}, RigidMetric metric = RigidMetric::CoT,
    const std::vector<std::uint8_t>& eval_domain = {}) {
    using namespace cotdetail;
    const ParamSet set = theta.kind == TransformKind::Translation ? ParamSet::Translation
                         : theta.kind == TransformKind::Rigid     ? ParamSet::Rigid
                                                                  : ParamSet::Similarity;
    SsdCotEvaluator eval(fixed, moving, p, metric, eval_domain);
    const Objective obj = eval.evaluate(set, from_transform(set, theta), theta.center, true);
    return {obj.value, obj.gradient};
}

struct RigidRegOptions {
    CoTParams cot;
    RigidMetric metric = RigidMetric::CoT;
    int pyramid_levels = 4;
    int max_iterations = 100;
    double rel_tolerance = 1e-6;
    double lm_lambda0 = 1e-3;
    // exhaustive translation probe at the coarsest level, widening the
    // capture range beyond the LM basin
    bool coarse_translation_search = true;
    double coarse_search_fraction = 0.25;  // of the min dimension, each side
};

// Coarse-to-fine Levenberg-Marquardt over the chosen parameter set.
// Accepted steps never increase the objective; translations scale by 2
// between levels.
inline RigidRegResult register_rigid(const Image2D& fixed, const Image2D& moving,
                                     const TransformParams& init, TransformKind kind,
                                     const RigidRegOptions& opt = {}) {
    using namespace cotdetail;
    if (kind == TransformKind::Translation)
        throw std::invalid_argument("register_rigid: kind must be rigid or similarity");
    const ParamSet set = kind == TransformKind::Rigid ? ParamSet::Rigid : ParamSet::Similarity;
    const int np = param_count(set);

    Pyramid pf = build_pyramid(fixed, opt.pyramid_levels);
    Pyramid pm = build_pyramid(moving, opt.pyramid_levels);
    const int levels = std::min(pf.count(), pm.count());

    // parameterization center: fixed mask centroid at full resolution
    Vec2 center;
    try {
        center = center_of_mass(fixed);
    } catch (const std::exception&) {
        center = {fixed.width() / 2.0, fixed.height() / 2.0};
    }

    // initial parameters at full resolution
    TransformParams cur = init;
    if (kind == TransformKind::Similarity && cur.kind != TransformKind::Similarity)
        cur = TransformParams::similarity(cur.tx, cur.ty, cur.angle, cur.scale, center);
    // re-center the incoming transform onto our center
    {
        double a, b, bx, by;
        cur.to_matrix(a, b, bx, by);
        // T(x) = A(x-c)+c+t  =>  t = A*c - c + [bx,by] ... solve for t given center
        const double tx = a * center.x - b * center.y + bx - center.x;
        const double ty = b * center.x + a * center.y + by - center.y;
        const double ang = std::atan2(b, a);
        const double sc = std::hypot(a, b);
        cur = kind == TransformKind::Rigid ? TransformParams::rigid(tx, ty, ang, center)
                                           : TransformParams::similarity(tx, ty, ang, sc, center);
    }

    RigidRegResult res;
    res.levels_used = levels;
    bool converged = false;

    for (int level = levels - 1; level >= 0; --level) {
        const double down = static_cast<double>(1 << level);
        const Image2D& f = pf.levels[level];
        const Image2D& m = pm.levels[level];
        if (f.width() <= opt.cot.patch || f.height() <= opt.cot.patch) continue;
        const Vec2 c_level{center.x / down, center.y / down};

        Eigen::VectorXd q = from_transform(set, cur);
        q[0] /= down;
        q[1] /= down;

        SsdCotEvaluator eval(f, m, opt.cot, opt.metric);

        struct LmOutcome {
            Eigen::VectorXd q;
            double value = std::numeric_limits<double>::infinity();
            std::vector<double> trace;
            bool converged = false;
        };
        auto run_lm = [&](Eigen::VectorXd q0, int max_its) {
            LmOutcome out;
            out.q = q0;
            Objective best = eval.evaluate(set, q0, c_level, true);
            out.trace.push_back(best.value);
            double lambda = opt.lm_lambda0;
            for (int it = 0; it < max_its; ++it) {
                Eigen::MatrixXd H = best.gauss_newton;
                for (int k = 0; k < np; ++k) H(k, k) += lambda * std::max(H(k, k), 1e-12);
                const Eigen::VectorXd delta = H.ldlt().solve(-best.gradient);
                if (!delta.allFinite()) throw std::runtime_error("register_rigid: non-finite LM step");
                const Eigen::VectorXd q_try = out.q + delta;
                Objective trial;
                bool ok = true;
                try {
                    trial = eval.evaluate(set, q_try, c_level, true);
                } catch (const DivergedError&) {
                    ok = false;
                }
                if (ok && trial.value < best.value) {
                    const double rel = (best.value - trial.value) / std::max(best.value, 1e-300);
                    out.q = q_try;
                    best = std::move(trial);
                    out.trace.push_back(best.value);
                    lambda = std::max(lambda / 10.0, 1e-12);
                    if (rel < opt.rel_tolerance) {
                        out.converged = true;
                        break;
                    }
                } else {
                    lambda *= 10.0;
                    if (lambda > 1e10) {
                        out.converged = true;  // no acceptable step left
                        break;
                    }
                }
            }
            out.value = best.value;
            return out;
        };

        LmOutcome outcome;
        if (opt.coarse_translation_search && level == levels - 1) {
            // rank translation probes, polish the best few with short LM runs
            const double range = opt.coarse_search_fraction * std::min(f.width(), f.height());
            std::vector<std::pair<double, Eigen::VectorXd>> probes;
            for (double dy = -range; dy <= range; dy += 2.0)
                for (double dx = -range; dx <= range; dx += 2.0) {
                    Eigen::VectorXd probe = q;
                    probe[0] += dx;
                    probe[1] += dy;
                    try {
                        probes.emplace_back(eval.evaluate(set, probe, c_level, false).value, probe);
                    } catch (const DivergedError&) {
                    }
                }
            std::sort(probes.begin(), probes.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });
            const int starts = std::min<int>(5, static_cast<int>(probes.size()));
            for (int s = 0; s < starts; ++s) {
                LmOutcome cand = run_lm(probes[s].second, opt.max_iterations);
                if (cand.value < outcome.value) outcome = std::move(cand);
            }
            if (!std::isfinite(outcome.value)) outcome = run_lm(q, opt.max_iterations);
        } else {
            outcome = run_lm(q, opt.max_iterations);
        }

        q = outcome.q;
        converged = outcome.converged;
        res.level_starts.push_back(static_cast<int>(res.objective_trace.size()));
        res.objective_trace.insert(res.objective_trace.end(), outcome.trace.begin(), outcome.trace.end());

        TransformParams t_level = to_transform(set, q, c_level);
        cur = kind == TransformKind::Rigid
                  ? TransformParams::rigid(t_level.tx * down, t_level.ty * down, t_level.angle, center)
                  : TransformParams::similarity(t_level.tx * down, t_level.ty * down, t_level.angle,
                                                t_level.scale, center);
        res.final_objective = outcome.value;
    }
    res.params = cur;
    res.converged = converged;
    return res;
}

}  // namespace plireg
