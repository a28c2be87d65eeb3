#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "plireg/fet.hpp"
#include "plireg/field.hpp"
#include "plireg/image.hpp"

namespace plireg {

struct ElasticParams {
    double lame_mu = 1.0;
    double lame_lambda = 2.0 / 3.0;  // nu = 0.2 with mu = 1
    double gebs_sigma = 10.0;        // Gaussian force width, px

    static ElasticParams from_poisson(double mu, double nu, double sigma_px) {
        if (!(mu > 0.0) || !(nu > 0.0) || !(nu < 0.5))
            throw std::invalid_argument("ElasticParams: need mu > 0 and nu in (0, 0.5)");
        ElasticParams p;
        p.lame_mu = mu;
        p.lame_lambda = 2.0 * mu * nu / (1.0 - 2.0 * nu);
        p.gebs_sigma = sigma_px;
        return p;
    }

    double poisson_ratio() const { return lame_lambda / (2.0 * (lame_lambda + lame_mu)); }

    void validate() const {
        if (!(lame_mu > 0.0)) throw std::invalid_argument("ElasticParams: mu must be > 0");
        const double nu = poisson_ratio();
        if (!(nu > 0.0) || !(nu < 0.5))
            throw std::invalid_argument("ElasticParams: poisson ratio out of (0, 0.5)");
        if (!(gebs_sigma > 0.0)) throw std::invalid_argument("ElasticParams: sigma must be > 0");
    }
};

struct EnergyWeights {
    double lambda_I = 1.0;
    double lambda_E = 0.01;
    double f_sigma_scale = 20.0;  // px, width of the Gaussian weight on |u|
    void validate() const {
        if (!(lambda_I > 0.0) || !(lambda_E > 0.0) || !(f_sigma_scale > 0.0))
            throw std::invalid_argument("EnergyWeights: all weights must be positive");
    }
};

namespace gebsdetail {

constexpr double kEulerGamma = 0.57721566490153286;

// h(t) = ln t + gamma + E1(t); series sum_{k>=1} (-1)^{k+1} t^k/(k k!)
// avoids the ln/E1 cancellation at small t.
inline double h_fn(double t) {
    if (t <= 0.0) return 0.0;
    if (t < 1.0) {
        double term = t, sum = t;  // k = 1
        for (int k = 2; k < 24; ++k) {
            term *= -t / k;
            sum += term / k;
            if (std::abs(term / k) < 1e-18 * std::abs(sum)) break;
        }
        return sum;
    }
    return std::log(t) + kEulerGamma - std::expint(-t);  // E1(t) = -Ei(-t)
}

// w(t) = (1 - e^-t)/t, w(0) = 1
inline double w_fn(double t) {
    if (t < 1e-8) return 1.0 - 0.5 * t;
    return -std::expm1(-t) / t;
}

// w'(t) = ((1+t) e^-t - 1)/t^2
inline double dw_fn(double t) {
    if (t < 1e-3) return -0.5 + t / 3.0 - t * t / 8.0 + t * t * t / 30.0;
    return ((1.0 + t) * std::exp(-t) - 1.0) / (t * t);
}

// (1 - w(t))/t, -> 1/2 at t = 0
inline double one_minus_w_over_t(double t) {
    if (t < 1e-4) return 0.5 - t / 6.0 + t * t / 24.0;
    return (1.0 - w_fn(t)) / t;
}

// d/dt[(1-w)/t]
inline double d_one_minus_w_over_t(double t) {
    if (t < 1e-3) return -1.0 / 6.0 + t / 12.0 - t * t / 40.0;
    return (-dw_fn(t) * t - (1.0 - w_fn(t))) / (t * t);
}

// Radial profile pieces of the kernel G(x) = A(t) I + C(t) x x^T,
// t = r^2 / (2 sigma^2).
struct KernelProfile {
    double sigma2;   // sigma^2
    double beta;     // (lambda+mu)/(mu(lambda+2mu))
    double delta;    // beta/2 - 1/mu
    double kappa;    // gauge constant: A(4 sigma) = 0

    explicit KernelProfile(const ElasticParams& p) {
        p.validate();
        sigma2 = p.gebs_sigma * p.gebs_sigma;
        const double mu = p.lame_mu, lam = p.lame_lambda;
        beta = (lam + mu) / (mu * (lam + 2.0 * mu));
        delta = 0.5 * beta - 1.0 / mu;
        kappa = 0.0;
        kappa = -A(8.0);  // t = (4 sigma)^2 / (2 sigma^2) = 8
    }

    double A(double t) const {
        const double psi = 0.5 * sigma2 * h_fn(t);
        return delta * psi + 0.25 * beta * sigma2 * (w_fn(t) - 1.0) + kappa;
    }
    double C(double t) const { return 0.25 * beta * one_minus_w_over_t(t); }
    double dA(double t) const {
        return delta * 0.5 * sigma2 * w_fn(t) + 0.25 * beta * sigma2 * dw_fn(t);
    }
    double dC(double t) const { return 0.25 * beta * d_one_minus_w_over_t(t); }
};

// Linear-interpolated table of A and C over t, for dense evaluation.
class KernelTable {
public:
    KernelTable(const KernelProfile& prof, double t_max) : prof_(prof), t_max_(std::max(t_max, 1.0)) {
        n_ = 1 << 18;
        dt_ = t_max_ / (n_ - 1);
        a_.resize(n_);
        c_.resize(n_);
        for (int i = 0; i < n_; ++i) {
            a_[i] = prof.A(i * dt_);
            c_[i] = prof.C(i * dt_);
        }
    }

    void eval(double t, double& a, double& c) const {
        if (t >= t_max_) {
            a = prof_.A(t);
            c = prof_.C(t);
            return;
        }
        const double u = t / dt_;
        const int i = std::min(static_cast<int>(u), n_ - 2);
        const double f = u - i;
        a = a_[i] + f * (a_[i + 1] - a_[i]);
        c = c_[i] + f * (c_[i + 1] - c_[i]);
    }

private:
    KernelProfile prof_;
    double t_max_, dt_;
    int n_;
    std::vector<double> a_, c_;
};

}  // namespace gebsdetail

// Matrix-valued GEBS kernel: the displacement response of a 2D linear
// elastic medium to a Gaussian body force of width gebs_sigma, up to a
// rigid-translation gauge chosen so the response decays through zero at
// r = 4 sigma. u(x) = G(x) c solves mu lap(u) + (lambda+mu) grad(div u)
// = -exp(-r^2/2sigma^2) c. G(x) = A(t) I + C(t) x x^T with
// t = r^2/(2 sigma^2); the finite-difference Navier oracle in the test
// suite is the ground truth for this closed form.
struct GebsKernel {
    gebsdetail::KernelProfile prof;

    explicit GebsKernel(const ElasticParams& p) : prof(p) {}

    void evaluate(double dx, double dy, double G[2][2]) const {
        const double t = (dx * dx + dy * dy) / (2.0 * prof.sigma2);
        const double a = prof.A(t);
        const double c = prof.C(t);
        G[0][0] = a + c * dx * dx;
        G[0][1] = c * dx * dy;
        G[1][0] = G[0][1];
        G[1][1] = a + c * dy * dy;
    }

    // Spatial derivatives of all four entries with respect to dx (dGx)
    // and dy (dGy).
    void evaluate_grad(double dx, double dy, double G[2][2], double dGx[2][2], double dGy[2][2]) const {
        const double t = (dx * dx + dy * dy) / (2.0 * prof.sigma2);
        const double a = prof.A(t);
        const double c = prof.C(t);
        const double da = prof.dA(t);
        const double dc = prof.dC(t);
        const double tx = dx / prof.sigma2;  // dt/dx
        const double ty = dy / prof.sigma2;
        G[0][0] = a + c * dx * dx;
        G[0][1] = c * dx * dy;
        G[1][0] = G[0][1];
        G[1][1] = a + c * dy * dy;
        dGx[0][0] = da * tx + dc * tx * dx * dx + 2.0 * c * dx;
        dGx[0][1] = dc * tx * dx * dy + c * dy;
        dGx[1][0] = dGx[0][1];
        dGx[1][1] = da * tx + dc * tx * dy * dy;
        dGy[0][0] = da * ty + dc * ty * dx * dx;
        dGy[0][1] = dc * ty * dx * dy + c * dx;
        dGy[1][0] = dGy[0][1];
        dGy[1][1] = da * ty + dc * ty * dy * dy + 2.0 * c * dy;
    }
};

inline void gebs_basis(double dx, double dy, const ElasticParams& p, double G[2][2]) {
    GebsKernel(p).evaluate(dx, dy, G);
}

// Regular grid of basis centers covering the image, spacing clamped so
// the dense solve stays tractable.
struct CenterGrid {
    std::vector<Vec2> centers;
    double spacing = 8.0;

    static CenterGrid make(int w, int h, double requested_spacing, int max_centers) {
        CenterGrid g;
        double s = requested_spacing;
        const double need = std::sqrt(static_cast<double>(w) * h / std::max(1, max_centers));
        s = std::max(s, need);
        g.spacing = s;
        const int nx = std::max(1, static_cast<int>(std::floor((w - 1) / s)) + 1);
        const int ny = std::max(1, static_cast<int>(std::floor((h - 1) / s)) + 1);
        // center the lattice inside the image
        const double ox = 0.5 * ((w - 1) - (nx - 1) * s);
        const double oy = 0.5 * ((h - 1) - (ny - 1) * s);
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i < nx; ++i) g.centers.push_back({ox + i * s, oy + j * s});
        return g;
    }

    // Drop centers with no masked pixel within keep_radius: they would be
    // constrained only by the regularizer and can swing wildly.
    void restrict_to_mask(const std::vector<std::uint8_t>& mask, int w, int h, double keep_radius) {
        if (mask.empty()) return;
        std::vector<Vec2> kept;
        const int r = std::max(1, static_cast<int>(std::ceil(keep_radius)));
        for (const Vec2& c : centers) {
            const int cx = static_cast<int>(std::lround(c.x));
            const int cy = static_cast<int>(std::lround(c.y));
            bool near = false;
            for (int dy = -r; dy <= r && !near; dy += 2)
                for (int dx = -r; dx <= r; dx += 2) {
                    const int x = cx + dx, y = cy + dy;
                    if (x < 0 || y < 0 || x >= w || y >= h) continue;
                    if (mask[static_cast<std::size_t>(y) * w + x] &&
                        dx * dx + dy * dy <= keep_radius * keep_radius) {
                        near = true;
                        break;
                    }
                }
            if (near) kept.push_back(c);
        }
        if (!kept.empty()) centers = std::move(kept);
    }
};

// Dense displacement field u(x) = sum_j G(x - c_j) q_j, evaluated on a
// subsampled lattice and bilinearly upsampled (the field is smooth at the
// kernel scale).
inline DeformationField gebs_field_from_coeffs(const CenterGrid& grid, const Eigen::VectorXd& q,
                                               int w, int h, const ElasticParams& p,
                                               int eval_stride = 2) {
    if (q.size() != static_cast<Eigen::Index>(grid.centers.size() * 2))
        throw std::invalid_argument("gebs_field_from_coeffs: coefficient size mismatch");
    const gebsdetail::KernelProfile prof(p);
    const double diag2 = static_cast<double>(w) * w + static_cast<double>(h) * h;
    const gebsdetail::KernelTable table(prof, diag2 / (2.0 * prof.sigma2) + 1.0);

    const int s = std::max(1, eval_stride);
    const int lw = (w + s - 1) / s + 1;
    const int lh = (h + s - 1) / s + 1;
    std::vector<double> lux(static_cast<std::size_t>(lw) * lh, 0.0), luy(lux.size(), 0.0);
    const std::size_t nc = grid.centers.size();

    parallel_for(static_cast<std::size_t>(lh), [&](std::size_t lyi) {
        const int ly = static_cast<int>(lyi);
        const double y = std::min<double>(ly * s, h - 1);
        for (int lx = 0; lx < lw; ++lx) {
            const double x = std::min<double>(lx * s, w - 1);
            double ax = 0.0, ay = 0.0;
            for (std::size_t j = 0; j < nc; ++j) {
                const double dx = x - grid.centers[j].x;
                const double dy = y - grid.centers[j].y;
                const double t = (dx * dx + dy * dy) / (2.0 * prof.sigma2);
                double a, c;
                table.eval(t, a, c);
                const double qx = q[2 * j], qy = q[2 * j + 1];
                ax += (a + c * dx * dx) * qx + c * dx * dy * qy;
                ay += c * dx * dy * qx + (a + c * dy * dy) * qy;
            }
            lux[static_cast<std::size_t>(ly) * lw + lx] = ax;
            luy[static_cast<std::size_t>(ly) * lw + lx] = ay;
        }
    });

    DeformationField out(w, h);
    if (s == 1) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t li = static_cast<std::size_t>(y) * lw + x;
                out.set(x, y, {lux[li], luy[li]});
            }
        return out;
    }
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        const double gy = static_cast<double>(y) / s;
        const int iy = std::min(static_cast<int>(gy), lh - 2);
        const double fy = gy - iy;
        for (int x = 0; x < w; ++x) {
            const double gx = static_cast<double>(x) / s;
            const int ix = std::min(static_cast<int>(gx), lw - 2);
            const double fx = gx - ix;
            auto lerp = [&](const std::vector<double>& c) {
                const double v00 = c[static_cast<std::size_t>(iy) * lw + ix];
                const double v10 = c[static_cast<std::size_t>(iy) * lw + ix + 1];
                const double v01 = c[static_cast<std::size_t>(iy + 1) * lw + ix];
                const double v11 = c[static_cast<std::size_t>(iy + 1) * lw + ix + 1];
                return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
            };
            out.set(x, y, {lerp(lux), lerp(luy)});
        }
    });
    return out;
}

// Discrete linear elastic energy of a dense field:
// sum mu(e11^2 + e22^2) + mu/2 (du1/dy + du2/dx)^2 + lambda/2 (div u)^2,
// central differences over the interior (restricted to the mask when one
// is given: the energy integrates over the tissue domain).
inline double elastic_energy(const DeformationField& u, const ElasticParams& p,
                             const std::vector<std::uint8_t>& mask = {}) {
    const int w = u.width, h = u.height;
    if (w < 3 || h < 3) return 0.0;
    return parallel_sum(static_cast<std::size_t>(h - 2), [&](std::size_t yi) {
        const int y = static_cast<int>(yi) + 1;
        double acc = 0.0;
        for (int x = 1; x < w - 1; ++x) {
            if (!mask.empty() && !mask[u.idx(x, y)]) continue;
            const double e11 = 0.5 * (u.ux[u.idx(x + 1, y)] - u.ux[u.idx(x - 1, y)]);
            const double e22 = 0.5 * (u.uy[u.idx(x, y + 1)] - u.uy[u.idx(x, y - 1)]);
            const double g12 = 0.5 * (u.ux[u.idx(x, y + 1)] - u.ux[u.idx(x, y - 1)]) +
                               0.5 * (u.uy[u.idx(x + 1, y)] - u.uy[u.idx(x - 1, y)]);
            acc += p.lame_mu * (e11 * e11 + e22 * e22) + 0.5 * p.lame_mu * g12 * g12 +
                   0.5 * p.lame_lambda * (e11 + e22) * (e11 + e22);
        }
        return acc;
    });
}

struct GebsFitOptions {
    double center_spacing = 8.0;  // px
    int max_centers = 600;
    int sample_stride = 0;        // 0: spacing/2
    double tikhonov = 1e-8;
};

// Fit GEBS coefficients to a dense target field:
// min_q lambda_I sum_s w_s |B q - uI|^2 + lambda_E q^T E q + tik |q|^2,
// with E the discrete elastic quadratic form of the basis.
inline DeformationField gebs_fit(const DeformationField& u_intensity, const EnergyWeights& w,
                                 const ElasticParams& p, const GebsFitOptions& opt = {},
                                 const std::vector<float>* pixel_weights = nullptr,
                                 Eigen::VectorXd* coeffs_out = nullptr,
                                 const CenterGrid* grid_in = nullptr) {
    w.validate();
    p.validate();
    u_intensity.check_finite("gebs_fit");
    const int iw = u_intensity.width, ih = u_intensity.height;
    const CenterGrid grid =
        grid_in ? *grid_in : CenterGrid::make(iw, ih, opt.center_spacing, opt.max_centers);
    const std::size_t nc = grid.centers.size();
    const Eigen::Index dim = static_cast<Eigen::Index>(2 * nc);

    const int stride = opt.sample_stride > 0
                           ? opt.sample_stride
                           : std::max(1, static_cast<int>(std::lround(grid.spacing / 2.0)));
    std::vector<Vec2> samples;
    std::vector<double> sw;  // per-sample weight
    for (int y = 0; y < ih; y += stride)
        for (int x = 0; x < iw; x += stride) {
            double pw = 1.0;
            if (pixel_weights) pw = (*pixel_weights)[u_intensity.idx(x, y)];
            if (pw <= 0.0) continue;
            samples.push_back({static_cast<double>(x), static_cast<double>(y)});
            sw.push_back(pw);
        }
    const std::size_t ns = samples.size();
    if (ns < 4) throw std::runtime_error("gebs_fit: too few weighted samples");

    const GebsKernel kernel(p);

    // basis and strain-row matrices
    Eigen::MatrixXd B(2 * ns, dim);
    Eigen::MatrixXd M11(ns, dim), M22(ns, dim), M12(ns, dim);
    parallel_for(ns, [&](std::size_t s2) {
        double G[2][2], Dx[2][2], Dy[2][2];
        for (std::size_t j = 0; j < nc; ++j) {
            kernel.evaluate_grad(samples[s2].x - grid.centers[j].x, samples[s2].y - grid.centers[j].y,
                                 G, Dx, Dy);
            B(2 * s2, 2 * j) = G[0][0];
            B(2 * s2, 2 * j + 1) = G[0][1];
            B(2 * s2 + 1, 2 * j) = G[1][0];
            B(2 * s2 + 1, 2 * j + 1) = G[1][1];
            // e11 = d(u1)/dx, e22 = d(u2)/dy, g12 = d(u1)/dy + d(u2)/dx
            M11(s2, 2 * j) = Dx[0][0];
            M11(s2, 2 * j + 1) = Dx[0][1];
            M22(s2, 2 * j) = Dy[1][0];
            M22(s2, 2 * j + 1) = Dy[1][1];
            M12(s2, 2 * j) = Dy[0][0] + Dx[1][0];
            M12(s2, 2 * j + 1) = Dy[0][1] + Dx[1][1];
        }
    });

    const double area = static_cast<double>(stride) * stride;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dim, dim);
    {
        // weighted data block
        Eigen::MatrixXd Bw = B;
        for (std::size_t s2 = 0; s2 < ns; ++s2) {
            const double f = std::sqrt(w.lambda_I * sw[s2] * area);
            Bw.row(2 * s2) *= f;
            Bw.row(2 * s2 + 1) *= f;
        }
        H.selfadjointView<Eigen::Lower>().rankUpdate(Bw.transpose());
    }
    {
        // elastic block
        Eigen::MatrixXd S1 = M11 * std::sqrt(w.lambda_E * p.lame_mu * area);
        Eigen::MatrixXd S2 = M22 * std::sqrt(w.lambda_E * p.lame_mu * area);
        Eigen::MatrixXd S3 = M12 * std::sqrt(0.5 * w.lambda_E * p.lame_mu * area);
        Eigen::MatrixXd S4 = (M11 + M22) * std::sqrt(0.5 * w.lambda_E * p.lame_lambda * area);
        H.selfadjointView<Eigen::Lower>().rankUpdate(S1.transpose());
        H.selfadjointView<Eigen::Lower>().rankUpdate(S2.transpose());
        H.selfadjointView<Eigen::Lower>().rankUpdate(S3.transpose());
        H.selfadjointView<Eigen::Lower>().rankUpdate(S4.transpose());
    }
    H = H.selfadjointView<Eigen::Lower>();
    H.diagonal().array() += opt.tikhonov;

    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
    {
        Eigen::VectorXd d(2 * ns);
        for (std::size_t s2 = 0; s2 < ns; ++s2) {
            const Vec2 v = u_intensity.at(static_cast<int>(samples[s2].x), static_cast<int>(samples[s2].y));
            const double f = w.lambda_I * sw[s2] * area;
            d[2 * s2] = f * v.x;
            d[2 * s2 + 1] = f * v.y;
        }
        rhs = B.transpose() * d;
    }

    Eigen::LDLT<Eigen::MatrixXd> solver(H);
    if (solver.info() != Eigen::Success) throw std::runtime_error("gebs_fit: singular system");
    const Eigen::VectorXd q = solver.solve(rhs);
    if (!q.allFinite()) throw std::runtime_error("gebs_fit: non-finite solution");
    if (coeffs_out) *coeffs_out = q;
    return gebs_field_from_coeffs(grid, q, iw, ih, p, std::max(1, stride / 2));
}

struct NonRigidOptions {
    GebsFitOptions fit;
    int intensity_window = 5;  // odd px, local data window per pixel
    int inner_iterations = 5;  // LM steps per pixel
    int max_outer = 20;
    int level_repeats = 2;  // FeT recompute entries per level
    double fet_presmooth_sigma = 1.0;  // px, applied before FeT at each level
    double outer_rel_tolerance = 1e-4;
    int pyramid_levels = 3;
    double min_sigma_px = 2.0;      // kernel width floor at coarse levels
    double step_cap_px = 2.5;       // max |uI - anchor| per outer iteration
    double fit_weight_floor = 0.01; // keeps far-displaced regions constrained
};

// Gaussian weight on the displacement magnitude, in (0, 1], 1 at u = 0.
inline double discontinuity_weight(const Vec2& u, double f_sigma_scale) {
    const double n2 = u.x * u.x + u.y * u.y;
    return std::exp(-n2 / (2.0 * f_sigma_scale * f_sigma_scale));
}

// Per-pixel Levenberg-Marquardt update of the intensity-driven field uI:
// min_v sum_window (FeT2(y+v) - FeT1(y))^2 / |window|
//       + coupling_weight(x) |v - u(x)|^2,
// independent 2-vector subproblems, deterministic across thread counts.
// coupling_weights carries lambda_I * f_sigma(|u_total|) per pixel; when
// absent it is derived from the anchor field itself.
inline DeformationField intensity_field_update(const Image2D& fet_fixed, const BSplineImage& fet_moving,
                                               const std::vector<std::uint8_t>& mask,
                                               const DeformationField& u_current,
                                               const EnergyWeights& w,
                                               const NonRigidOptions& opt = {},
                                               const std::vector<float>* coupling_weights = nullptr) {
    w.validate();
    const int iw = u_current.width, ih = u_current.height;
    if (fet_fixed.width() != iw || fet_fixed.height() != ih)
        throw std::invalid_argument("intensity_field_update: grid mismatch");
    const int radius = opt.intensity_window / 2;
    DeformationField out(iw, ih);

    parallel_for(static_cast<std::size_t>(ih), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        for (int x = 0; x < iw; ++x) {
            const std::size_t i = u_current.idx(x, y);
            const Vec2 anchor = u_current.at(x, y);
            if (!mask.empty() && !mask[i]) {
                out.set(x, y, anchor);
                continue;
            }
            const double f = coupling_weights
                                 ? static_cast<double>((*coupling_weights)[i])
                                 : w.lambda_I * discontinuity_weight(anchor, w.f_sigma_scale);

            double vx = anchor.x, vy = anchor.y;
            double lm = 1e-3;

            auto local_cost = [&](double cx, double cy, bool with_grad, double H[3], double g[2]) {
                double cost = 0.0;
                int n = 0;
                if (with_grad) {
                    H[0] = H[1] = H[2] = 0.0;
                    g[0] = g[1] = 0.0;
                }
                for (int dy = -radius; dy <= radius; ++dy)
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int xx = x + dx, yy = y + dy;
                        if (xx < 0 || yy < 0 || xx >= iw || yy >= ih) continue;
                        if (!mask.empty() && !mask[u_current.idx(xx, yy)]) continue;
                        // clamped sampling: leaving the rect cannot shed residuals
                        const double sx = std::clamp(xx + cx, 0.0, iw - 1.0);
                        const double sy = std::clamp(yy + cy, 0.0, ih - 1.0);
                        double v2, gx2, gy2;
                        if (with_grad)
                            fet_moving.sample_grad(sx, sy, v2, gx2, gy2);
                        else {
                            v2 = fet_moving.sample(sx, sy);
                            gx2 = gy2 = 0.0;
                        }
                        const double r = v2 - fet_fixed.at(xx, yy);
                        cost += r * r;
                        if (with_grad) {
                            H[0] += gx2 * gx2;
                            H[1] += gx2 * gy2;
                            H[2] += gy2 * gy2;
                            g[0] += gx2 * r;
                            g[1] += gy2 * r;
                        }
                        ++n;
                    }
                if (n == 0) return std::numeric_limits<double>::infinity();
                cost /= n;
                if (with_grad) {
                    H[0] /= n;
                    H[1] /= n;
                    H[2] /= n;
                    g[0] /= n;
                    g[1] /= n;
                }
                const double px = cx - anchor.x, py = cy - anchor.y;
                cost += f * (px * px + py * py);
                if (with_grad) {
                    H[0] += f;
                    H[2] += f;
                    g[0] += f * px;
                    g[1] += f * py;
                }
                return cost;
            };

            double H[3], g[2];
            double cost = local_cost(vx, vy, true, H, g);
            if (!std::isfinite(cost)) {
                out.set(x, y, anchor);
                continue;
            }
            for (int it = 0; it < opt.inner_iterations; ++it) {
                // absolute damping floor: flat data plus vanished coupling
                // must not admit unbounded steps
                const double a = H[0] + lm * (H[0] + 1e-4), b = H[1], c = H[2] + lm * (H[2] + 1e-4);
                const double det = a * c - b * b;
                if (std::abs(det) < 1e-18) break;
                const double sx = -(c * g[0] - b * g[1]) / det;
                const double sy = -(-b * g[0] + a * g[1]) / det;
                double Ht[3], gt[2];
                const double trial = local_cost(vx + sx, vy + sy, true, Ht, gt);
                if (trial < cost) {
                    vx += sx;
                    vy += sy;
                    cost = trial;
                    H[0] = Ht[0];
                    H[1] = Ht[1];
                    H[2] = Ht[2];
                    g[0] = gt[0];
                    g[1] = gt[1];
                    lm = std::max(lm / 10.0, 1e-9);
                } else {
                    lm *= 10.0;
                    if (lm > 1e6) break;
                }
            }
            if (!std::isfinite(vx) || !std::isfinite(vy))
                throw std::runtime_error("intensity_field_update: non-finite displacement");
            // trust region: one outer iteration moves at most step_cap_px
            const double ex = vx - anchor.x, ey = vy - anchor.y;
            const double en = std::hypot(ex, ey);
            if (en > opt.step_cap_px) {
                const double s = opt.step_cap_px / en;
                vx = anchor.x + ex * s;
                vy = anchor.y + ey * s;
            }
            out.set(x, y, {vx, vy});
        }
    });
    return out;
}

// Convenience overload matching the declared operation shape.
inline DeformationField intensity_field_update(const Image2D& fet_fixed, const Image2D& fet_moving,
                                               const DeformationField& u_current,
                                               const EnergyWeights& w,
                                               const NonRigidOptions& opt = {}) {
    BSplineImage spline(fet_moving);
    std::vector<std::uint8_t> mask;
    if (fet_fixed.has_mask()) mask = fet_fixed.mask();
    return intensity_field_update(fet_fixed, spline, mask, u_current, w, opt);
}

struct NonRigidResult {
    DeformationField field;            // final u on the fixed grid
    DeformationField intensity_field;  // uI from the last accepted iteration
    Image2D warped;                    // moving warped by the final u
    std::vector<double> energy_trace;  // accepted outer-iteration energies
    std::vector<int> level_starts;
    int levels_used = 0;
};

namespace gebsdetail {

// total(x) = d(x) + base(x + d(x)): composition of a frozen base field
// with an increment estimated against the base-warped image.
inline DeformationField compose_with_base(const DeformationField& base, const DeformationField& d) {
    DeformationField total(d.width, d.height);
    for (int y = 0; y < d.height; ++y)
        for (int x = 0; x < d.width; ++x) {
            const Vec2 dd = d.at(x, y);
            const Vec2 b = base.sample(x + dd.x, y + dd.y);
            total.set(x, y, {dd.x + b.x, dd.y + b.y});
        }
    return total;
}

// Recover the increment from a total field: solve d + base(x+d) = total
// by fixed-point iteration (the base is smooth).
inline DeformationField increment_from_total(const DeformationField& base,
                                             const DeformationField& total, int iterations = 4) {
    DeformationField d(total.width, total.height);
    for (std::size_t i = 0; i < d.size(); ++i) {
        d.ux[i] = total.ux[i] - base.ux[i];
        d.uy[i] = total.uy[i] - base.uy[i];
    }
    for (int it = 0; it < iterations; ++it) {
        for (int y = 0; y < d.height; ++y)
            for (int x = 0; x < d.width; ++x) {
                const Vec2 dd = d.at(x, y);
                const Vec2 b = base.sample(x + dd.x, y + dd.y);
                const std::size_t i = d.idx(x, y);
                d.ux[i] = total.ux[i] - static_cast<float>(b.x);
                d.uy[i] = total.uy[i] - static_cast<float>(b.y);
            }
    }
    return d;
}

// The traced hybrid energy at one level entry: pointwise FeT SSD under
// the intensity increment dI (the FeT map of the base-warped moving image
// is warped, not recomputed, within a level; samples clamp at the image
// rect so the border cannot escape the sum), Gaussian-weighted quadratic
// coupling at the current total field, and the discrete elastic energy of
// the total field over the mask.
inline double hybrid_energy(const Image2D& fet_fixed, const BSplineImage& fet_moving,
                            const std::vector<std::uint8_t>& mask, const DeformationField& base,
                            const DeformationField& d, const DeformationField& di,
                            const EnergyWeights& w, const ElasticParams& p) {
    const int iw = d.width, ih = d.height;
    const DeformationField total = compose_with_base(base, d);
    const double data_coupling = parallel_sum(static_cast<std::size_t>(ih), [&](std::size_t yi) {
        const int y = static_cast<int>(yi);
        double acc = 0.0;
        for (int x = 0; x < iw; ++x) {
            const std::size_t i = d.idx(x, y);
            if (!mask.empty() && !mask[i]) continue;
            const Vec2 dd = di.at(x, y);
            const double sx = std::clamp(x + dd.x, 0.0, iw - 1.0);
            const double sy = std::clamp(y + dd.y, 0.0, ih - 1.0);
            const double v2 = fet_moving.sample(sx, sy);
            const double r = v2 - fet_fixed.at(x, y);
            acc += r * r;
            const Vec2 tu = total.at(x, y);
            const double fx = d.ux[i] - dd.x, fy = d.uy[i] - dd.y;
            acc += w.lambda_I * discontinuity_weight(tu, w.f_sigma_scale) * (fx * fx + fy * fy);
        }
        return acc;
    });
    return data_coupling + w.lambda_E * elastic_energy(total, p, mask);
}

}  // namespace gebsdetail

// Coarse-to-fine alternation of the intensity update and the GEBS fit.
// At each level entry the moving image is warped by the current field and
// its feature transform recomputed; within the level an incremental field
// is estimated against that frozen map. Accepted outer iterations never
// increase the per-entry hybrid energy; displacements scale by 2 between
// levels.
inline NonRigidResult register_nonrigid(const Image2D& fixed, const Image2D& moving,
                                        const DeformationField* init, const EnergyWeights& w,
                                        const ElasticParams& p, const FeTParams& fp = {},
                                        const NonRigidOptions& opt = {}) {
    w.validate();
    p.validate();
    fp.validate();
    Pyramid pf = build_pyramid(fixed, opt.pyramid_levels);
    Pyramid pm = build_pyramid(moving, opt.pyramid_levels);
    const int levels = std::min(pf.count(), pm.count());

    NonRigidResult res;
    res.levels_used = levels;

    DeformationField u;
    for (int level = levels - 1; level >= 0; --level) {
        const double down = static_cast<double>(1 << level);
        const Image2D& f = pf.levels[level];
        const Image2D& m = pm.levels[level];
        const int lw = f.width(), lh = f.height();

        if (level == levels - 1) {
            if (init) {
                u = init->upsample_to(lw, lh);
            } else {
                u = DeformationField(lw, lh);
            }
        } else {
            u = u.upsample_to(lw, lh);
        }

        if (lw <= fp.var_patch || lh <= fp.var_patch || lw <= fp.texture_patch || lh <= fp.texture_patch)
            continue;

        // kernel width scales with the level but never drops below the
        // center spacing: narrower kernels cannot interpolate between
        // centers and the fit collapses
        ElasticParams p_level = p;
        p_level.gebs_sigma =
            std::max({opt.min_sigma_px, 0.75 * opt.fit.center_spacing, p.gebs_sigma / down});
        EnergyWeights w_level = w;
        w_level.f_sigma_scale = std::max(8.0, w.f_sigma_scale / down);

        // mild smoothing before FeT: second-derivative channels amplify
        // resampling noise otherwise, flooring the data term
        const Image2D f_s =
            opt.fet_presmooth_sigma > 0 ? gaussian_blur(f, opt.fet_presmooth_sigma) : f;
        const Image2D fet_f = feature_transform(f_s, fp);
        std::vector<std::uint8_t> fixed_mask;
        if (f.has_mask()) fixed_mask = f.mask();

        CenterGrid grid = CenterGrid::make(lw, lh, opt.fit.center_spacing, opt.fit.max_centers);
        grid.restrict_to_mask(fixed_mask, lw, lh, std::max(2.0 * p_level.gebs_sigma, grid.spacing));

        for (int entry = 0; entry < opt.level_repeats; ++entry) {
            // freeze the base: warp the moving image by the current field
            // and recompute its feature transform
            const DeformationField base = u;
            const Image2D moving_w = warp(m, base, Interp::CubicBSpline);
            const Image2D m_s = opt.fet_presmooth_sigma > 0
                                    ? gaussian_blur(moving_w, opt.fet_presmooth_sigma)
                                    : moving_w;
            const Image2D fet_m = feature_transform(m_s, fp);
            const BSplineImage spline_m(fet_m);

            // data domain: fixed tissue with valid warped-moving samples
            std::vector<std::uint8_t> mask(u.size(), 1);
            for (std::size_t i = 0; i < mask.size(); ++i) {
                const bool fm = fixed_mask.empty() ? true : fixed_mask[i] != 0;
                mask[i] = (fm && moving_w.mask_at(i)) ? 1 : 0;
            }

            DeformationField d(lw, lh), di(lw, lh);
            double energy =
                gebsdetail::hybrid_energy(fet_f, spline_m, mask, base, d, di, w_level, p_level);
            res.level_starts.push_back(static_cast<int>(res.energy_trace.size()));
            res.energy_trace.push_back(energy);
            bool moved = false;

            for (int outer = 0; outer < opt.max_outer; ++outer) {
                // coupling weights from the current total field
                const DeformationField total_cur = gebsdetail::compose_with_base(base, d);
                std::vector<float> fweights(u.size(), 0.0f);
                std::vector<float> lam_weights(u.size(), 0.0f);
                for (std::size_t i = 0; i < u.size(); ++i) {
                    if (!mask[i]) {
                        // exterior: weak pin to the current state, so the
                        // unconstrained basis cannot ring there
                        fweights[i] = static_cast<float>(opt.fit_weight_floor);
                        continue;
                    }
                    const Vec2 tu{total_cur.ux[i], total_cur.uy[i]};
                    const float fw = static_cast<float>(std::max(
                        discontinuity_weight(tu, w_level.f_sigma_scale), opt.fit_weight_floor));
                    fweights[i] = fw;
                    lam_weights[i] = static_cast<float>(w_level.lambda_I * fw);
                }

                DeformationField di_new =
                    intensity_field_update(fet_f, spline_m, mask, d, w_level, opt, &lam_weights);

                // fit the total field to the composed intensity estimate
                const DeformationField target = gebsdetail::compose_with_base(base, di_new);
                DeformationField total_new;
                try {
                    total_new = gebs_fit(target, w_level, p_level, opt.fit, &fweights, nullptr, &grid);
                } catch (const std::exception&) {
                    break;  // keep the last accepted state
                }
                DeformationField d_new = gebsdetail::increment_from_total(base, total_new);

                // a smoothing fit must not wildly exceed its own target;
                // overshoot happens only where neither data nor coupling
                // sees the field, and the energy is blind there
                if (d_new.max_norm() > 1.5 * di_new.max_norm() + 1.0) break;

                const double e_new = gebsdetail::hybrid_energy(fet_f, spline_m, mask, base, d_new,
                                                               di_new, w_level, p_level);
                if (!std::isfinite(e_new))
                    throw std::runtime_error("register_nonrigid: non-finite energy");
                if (e_new >= energy) break;  // reject, keep accepted state
                const double rel = (energy - e_new) / std::max(std::abs(energy), 1e-300);
                d = std::move(d_new);
                di = std::move(di_new);
                energy = e_new;
                res.energy_trace.push_back(energy);
                moved = true;
                if (rel < opt.outer_rel_tolerance) break;
            }

            u = gebsdetail::compose_with_base(base, d);
#ifdef PLIREG_NR_DEBUG
            std::fprintf(stderr, "[nr] level %d entry %d: E %.4f, |d|max %.3f, |u|max %.3f, its %d\n",
                         level, entry, energy, d.max_norm(), u.max_norm(),
                         static_cast<int>(res.energy_trace.size() - res.level_starts.back()));
#endif
            if (level == 0 && entry == opt.level_repeats - 1)
                res.intensity_field = gebsdetail::compose_with_base(base, di);
            if (!moved) break;  // a fresh entry would see the same state
        }
    }

    res.field = std::move(u);
    if (res.intensity_field.width == 0) res.intensity_field = res.field;
    res.warped = warp(moving, res.field, Interp::CubicBSpline);
    res.field.check_finite("register_nonrigid");
    return res;
}

}  // namespace plireg
