#pragma once

// Griffiths-negative Finsler metrics on the trivial bundle D x C^r with
// torus-invariant data. A fiber direction is reduced to
// y_j = log|xi_j / xi_0|^2 (j = 1 .. r-1) and a metric to
//     log f(s, xi) = log|xi_0| + Phi(s, y).
// f is Griffiths negative exactly when Phi is convex in (s, y), and the
// extremal (Perron) metric is the convex envelope of the boundary data.
// psi = Phi - log h is the potential relative to a fixed background h.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "kq/convex_envelope.hpp"
#include "kq/domain.hpp"
#include "kq/error.hpp"
#include "kq/grid.hpp"
#include "kq/numeric.hpp"
#include "kq/quantize.hpp"

namespace kq {

namespace detail {

// Multilinear interpolation on a product grid with linear extrapolation
// beyond the last cells.
inline double interpolate(const ProductGrid& grid, const std::vector<double>& values, std::span<const double> at) {
    const std::size_t D = grid.dims();
    std::array<std::ptrdiff_t, ProductGrid::kMaxDims> cell{};
    std::array<double, ProductGrid::kMaxDims> w{};
    for (std::size_t d = 0; d < D; ++d) {
        const auto& ax = grid.axis(d);
        const double pos = (at[d] - ax.lo) / ax.step();
        const auto last = static_cast<std::ptrdiff_t>(ax.intervals) - 1;
        cell[d] = std::clamp(static_cast<std::ptrdiff_t>(std::floor(pos)), std::ptrdiff_t{0}, last);
        w[d] = pos - static_cast<double>(cell[d]);
    }
    double acc = 0.0;
    for (std::size_t corner = 0; corner < (std::size_t{1} << D); ++corner) {
        ProductGrid::Index idx{};
        double weight = 1.0;
        for (std::size_t d = 0; d < D; ++d) {
            const bool up = (corner >> d) & 1U;
            idx[d] = cell[d] + (up ? 1 : 0);
            weight *= up ? w[d] : 1.0 - w[d];
        }
        acc += weight * values[grid.ravel(idx)];
    }
    return acc;
}

}  // namespace detail

/// Torus-invariant Finsler metric on C^r sampled on the reduced direction
/// grid. Homogeneity is structural: f(lambda xi) = |lambda| f(xi).
struct FinslerMetric {
    std::size_t dim = 2;
    ProductGrid direction_grid;      // r - 1 axes of y_j = log|xi_j / xi_0|^2
    std::vector<double> log_values;  // Phi(y) = log f(1, e^{y_1/2}, ...)
    bool norm_flag = false;

    double log_norm(std::span<const std::complex<double>> xi) const {
        if (xi.size() != dim) throw Error(ErrorCode::DimensionMismatch, "Finsler metric dimension");
        double top = 0.0;
        for (const auto& c : xi) top = std::max(top, std::abs(c));
        if (top == 0.0) return -std::numeric_limits<double>::infinity();
        // xi_0 = 0 is the limit y -> +infinity, reached by extrapolation
        const double a0 = std::max(std::abs(xi[0]), 1e-150 * top);
        std::vector<double> y(dim - 1);
        for (std::size_t j = 1; j < dim; ++j) {
            const double aj = std::max(std::abs(xi[j]), 1e-150 * top);
            y[j - 1] = 2.0 * (std::log(aj) - std::log(a0));
        }
        return std::log(a0) + detail::interpolate(direction_grid, log_values, y);
    }

    double operator()(std::span<const std::complex<double>> xi) const { return std::exp(log_norm(xi)); }
};

/// Reduced potential of a diagonal Hermitian form: Phi(y) = (1/2) log(g_0 + sum g_j e^{y_j}).
inline double hermitian_log_profile(const HermitianForm& g, std::span<const double> y) {
    if (!g.is_diagonal()) throw Error(ErrorCode::DimensionMismatch, "torus reduction needs a diagonal form");
    const auto& ld = g.log_diagonal();
    if (y.size() + 1 != ld.size()) throw Error(ErrorCode::DimensionMismatch, "direction grid does not match form");
    std::vector<double> terms(ld.size());
    terms[0] = ld[0];
    for (std::size_t j = 1; j < ld.size(); ++j) terms[j] = ld[j] + y[j - 1];
    return 0.5 * log_sum_exp(terms);
}

inline FinslerMetric finsler_from_hermitian(const HermitianForm& g, const ProductGrid& direction_grid) {
    FinslerMetric f{g.dim(), direction_grid, std::vector<double>(direction_grid.size()), true};
    std::vector<double> y(direction_grid.dims());
    for (std::size_t i = 0; i < direction_grid.size(); ++i) {
        for (std::size_t d = 0; d < y.size(); ++d) y[d] = direction_grid.coord(i, d);
        f.log_values[i] = hermitian_log_profile(g, y);
    }
    return f;
}

struct FinslerCheck {
    bool positive = true;
    double min_second_difference = 0.0;  // along fiber stencil offsets; >= -tol means log f psh
    double worst_triangle = 0.0;         // max f(a+b) - f(a) - f(b) over sampled pairs (norms only)
    bool ok(double tol) const { return positive && min_second_difference >= -tol && worst_triangle <= tol; }
};

inline FinslerCheck check_finsler(const FinslerMetric& f, std::size_t samples = 200, unsigned seed = 7) {
    FinslerCheck rep;
    for (double v : f.log_values) rep.positive = rep.positive && std::isfinite(v);
    const auto& g = f.direction_grid;
    StencilSpec st{0, 1, 0.0, 2};
    const auto dirs = detail::compile(g, build_directions(g, st));
    rep.min_second_difference = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto idx = g.unravel(i);
        for (const auto& dir : dirs) {
            if (!detail::fits(g, idx, dir.e)) continue;
            const double d2 = detail::at(f.log_values, i, dir.flat) - 2.0 * f.log_values[i] + detail::at(f.log_values, i, -dir.flat);
            rep.min_second_difference = std::min(rep.min_second_difference, d2);
        }
    }
    if (!std::isfinite(rep.min_second_difference)) rep.min_second_difference = 0.0;
    if (f.norm_flag) {
        std::mt19937 rng(seed);
        std::normal_distribution<double> nd;
        std::vector<std::complex<double>> a(f.dim), b(f.dim), c(f.dim);
        rep.worst_triangle = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < samples; ++s) {
            for (std::size_t j = 0; j < f.dim; ++j) {
                a[j] = {nd(rng), nd(rng)};
                b[j] = {nd(rng), nd(rng)};
                c[j] = a[j] + b[j];
            }
            rep.worst_triangle = std::max(rep.worst_triangle, f(c) - f(a) - f(b));
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Matrix geodesics.

/// G_t = G0^{1/2} (G0^{-1/2} G1 G0^{-1/2})^t G0^{1/2}.
inline HermitianForm matrix_geodesic(const HermitianForm& g0, const HermitianForm& g1, double t) {
    if (g0.dim() != g1.dim() || g0.space() != g1.space()) throw Error(ErrorCode::DimensionMismatch, "matrix_geodesic endpoints");
    if (g0.is_diagonal() && g1.is_diagonal()) {
        std::vector<double> ld(g0.dim());
        for (std::size_t j = 0; j < ld.size(); ++j) ld[j] = (1.0 - t) * g0.log_diagonal()[j] + t * g1.log_diagonal()[j];
        return HermitianForm::from_log_diagonal(std::move(ld), g0.space());
    }
    if (t == 0.0) return HermitianForm::from_matrix(g0.dense(), g0.space());
    if (t == 1.0) return HermitianForm::from_matrix(g1.dense(), g1.space());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> e0(g0.dense());
    if (e0.info() != Eigen::Success || e0.eigenvalues().minCoeff() <= 0.0) throw Error(ErrorCode::SingularForm, "G0 not positive");
    const Eigen::VectorXd s = e0.eigenvalues().cwiseSqrt();
    const Eigen::MatrixXcd half = e0.eigenvectors() * s.asDiagonal() * e0.eigenvectors().adjoint();
    const Eigen::MatrixXcd inv_half = e0.eigenvectors() * s.cwiseInverse().asDiagonal() * e0.eigenvectors().adjoint();
    Eigen::MatrixXcd mid = inv_half * g1.dense() * inv_half;
    mid = 0.5 * (mid + mid.adjoint()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> em(mid);
    if (em.info() != Eigen::Success || em.eigenvalues().minCoeff() <= 0.0) throw Error(ErrorCode::SingularForm, "G1 not positive");
    Eigen::VectorXd p(em.eigenvalues().size());
    for (Eigen::Index j = 0; j < p.size(); ++j) p[j] = std::pow(em.eigenvalues()[j], t);
    Eigen::MatrixXcd gt = half * (em.eigenvectors() * p.asDiagonal() * em.eigenvectors().adjoint()) * half;
    gt = 0.5 * (gt + gt.adjoint()).eval();
    return HermitianForm::from_matrix(std::move(gt), g0.space());
}

// ---------------------------------------------------------------------------
// Background metric and envelopes on the reduced grid.

struct EnvelopeOptions {
    std::size_t fiber_intervals = 64;
    double fiber_half_width = 20.0;  // y in [-Y, Y]
    double fiber_slope = 4.0;
    std::size_t base_reach = 0;
    std::size_t fiber_reach = 2;
    double tol = 1e-10;
    bool use_barrier = true;
    double psh_tol = 1e-9;
    double norm_tol = 1e-9;
    std::size_t max_alternations = 500;

    StencilSpec stencil(std::size_t base_dims) const { return StencilSpec{base_dims, base_reach, fiber_slope, fiber_reach}; }
};

inline ProductGrid reduced_grid(const DomainSpec& dom, std::size_t rank, const EnvelopeOptions& opt) {
    if (rank < 2) throw Error(ErrorCode::DimensionMismatch, "fiber rank must be at least 2");
    auto axes = dom.base_axes();
    for (std::size_t j = 1; j < rank; ++j) axes.emplace_back(-opt.fiber_half_width, opt.fiber_half_width, opt.fiber_intervals);
    return ProductGrid(std::move(axes));
}

struct BackgroundMetric {
    DomainSpec domain;
    ProductGrid grid;
    std::size_t rank = 2;
    double strength = 0.0;
    std::vector<double> log_h;  // reduced log h on every node
    double certificate_margin = 0.0;
};

/// log h = (1/2) log h~(xi, xi) + strength * rho(s) for a diagonal h~. The
/// certificate is the smallest second difference of the reduced log h along
/// every stencil offset at interior nodes, divided by |offset|^2; it must be
/// positive (strict Griffiths negativity).
inline BackgroundMetric background_metric(const DomainSpec& dom, const HermitianForm& base_h, double strength,
                                          const EnvelopeOptions& opt = {}) {
    dom.validate();
    BackgroundMetric bg{dom, reduced_grid(dom, base_h.dim(), opt), base_h.dim(), strength, {}, 0.0};
    const std::size_t nb = dom.base_dims();
    bg.log_h.resize(bg.grid.size());
    std::vector<double> s(nb), y(base_h.dim() - 1);
    for (std::size_t i = 0; i < bg.grid.size(); ++i) {
        for (std::size_t d = 0; d < nb; ++d) s[d] = bg.grid.coord(i, d);
        for (std::size_t d = 0; d < y.size(); ++d) y[d] = bg.grid.coord(i, nb + d);
        bg.log_h[i] = hermitian_log_profile(base_h, y) + strength * dom.rho(s);
    }
    const auto kind = classify_nodes(bg.grid, nb);
    const auto dirs = detail::compile(bg.grid, build_directions(bg.grid, StencilSpec{nb, 1, 0.0, 1}));
    double worst = std::numeric_limits<double>::infinity();
    std::size_t worst_node = 0;
    Offset worst_dir{};
    for (std::size_t i = 0; i < bg.grid.size(); ++i) {
        if (kind[i] != NodeKind::Interior) continue;
        const auto idx = bg.grid.unravel(i);
        for (const auto& dir : dirs) {
            if (!detail::fits(bg.grid, idx, dir.e)) continue;
            double len2 = 0.0;
            for (std::size_t d = 0; d < bg.grid.dims(); ++d) {
                const double l = static_cast<double>(dir.e[d]) * bg.grid.axis(d).step();
                len2 += l * l;
            }
            const double d2 = (detail::at(bg.log_h, i, dir.flat) - 2.0 * bg.log_h[i] + detail::at(bg.log_h, i, -dir.flat)) / len2;
            if (d2 < worst) {
                worst = d2;
                worst_node = i;
                worst_dir = dir.e;
            }
        }
    }
    bg.certificate_margin = worst;
    if (!(worst > 0.0)) {
        std::string dir = "(";
        for (std::size_t d = 0; d < bg.grid.dims(); ++d) dir += (d ? "," : "") + std::to_string(worst_dir[d]);
        throw Error(ErrorCode::InsufficientStrength, "background not strictly negative along offset " + dir + ") at node " +
                                                         std::to_string(worst_node) + ", margin " + std::to_string(worst));
    }
    return bg;
}

/// Boundary data as the reduced log metric Phi_g(s, y).
using FinslerBoundary = std::function<double(std::span<const double> base, std::span<const double> y)>;

/// Boundary data from a family of diagonal Hermitian forms on the base boundary.
inline FinslerBoundary hermitian_boundary(std::function<HermitianForm(std::span<const double>)> forms) {
    return [forms = std::move(forms)](std::span<const double> s, std::span<const double> y) {
        return hermitian_log_profile(forms(s), y);
    };
}

struct EnvelopeGrid {
    DomainSpec domain;
    ProductGrid grid;  // base axes, then the r - 1 reduced fiber axes
    std::size_t rank = 2;
    std::vector<double> psi;    // log(f / h)
    std::vector<double> log_h;  // background on the same nodes
    std::size_t line_passes = 0;
    std::size_t sweeps = 0;
    std::size_t alternations = 0;
    double last_update = 0.0;
    bool clamp_active = false;
    double max_clamp = 0.0;
    std::size_t dominance_fixes = 0;

    std::size_t base_dims() const { return domain.base_dims(); }
    double log_metric(std::size_t flat) const { return psi[flat] + log_h[flat]; }

    std::vector<double> log_metric_values() const {
        std::vector<double> out(psi.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = log_metric(i);
        return out;
    }

    ProductGrid fiber_grid() const {
        std::vector<UniformGrid> axes(grid.axes().begin() + static_cast<std::ptrdiff_t>(base_dims()), grid.axes().end());
        return ProductGrid(std::move(axes));
    }

    std::size_t fiber_size() const { return fiber_grid().size(); }

    /// The fiber metric over the base node whose fiber block starts at flat
    /// index base_block * fiber_size().
    FinslerMetric fiber_metric(std::size_t base_block) const {
        const std::size_t n = fiber_size();
        FinslerMetric f{rank, fiber_grid(), std::vector<double>(n), false};
        for (std::size_t j = 0; j < n; ++j) f.log_values[j] = log_metric(base_block * n + j);
        return f;
    }
};

namespace detail {

inline std::vector<double> sample_finsler_boundary(const BackgroundMetric& bg, const FinslerBoundary& g) {
    const std::size_t nb = bg.domain.base_dims();
    std::vector<double> data(bg.grid.size(), 0.0);
    std::vector<double> s(nb), y(bg.grid.dims() - nb);
    for (std::size_t i = 0; i < bg.grid.size(); ++i) {
        if (!bg.domain.is_boundary(bg.grid.unravel(i))) continue;
        for (std::size_t d = 0; d < nb; ++d) s[d] = bg.grid.coord(i, d);
        for (std::size_t d = 0; d < y.size(); ++d) y[d] = bg.grid.coord(i, nb + d);
        data[i] = g(s, y);
        if (!std::isfinite(data[i])) throw Error(ErrorCode::BoundaryNotPsh, "boundary metric not finite and positive");
    }
    return data;
}

// Fiberwise psh test of the boundary data (convexity in y).
inline void require_boundary_psh(const BackgroundMetric& bg, const std::vector<double>& data, double tol) {
    const std::size_t nb = bg.domain.base_dims();
    const ProductGrid& g = bg.grid;
    std::vector<Offset> fiber_dirs;
    for (const auto& e : build_directions(g, StencilSpec{nb, 1, 0.0, 1})) {
        bool pure = true;
        for (std::size_t d = 0; d < nb; ++d) pure = pure && e[d] == 0;
        if (pure) fiber_dirs.push_back(e);
    }
    const auto dirs = compile(g, fiber_dirs);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto idx = g.unravel(i);
        if (!bg.domain.is_boundary(idx)) continue;
        for (const auto& dir : dirs) {
            if (!fits(g, idx, dir.e)) continue;
            const double d2 = at(data, i, dir.flat) - 2.0 * data[i] + at(data, i, -dir.flat);
            if (d2 < -tol) {
                throw Error(ErrorCode::BoundaryNotPsh, "boundary metric fails the fiberwise psh test at node " +
                                                           std::to_string(i) + " (second difference " + std::to_string(d2) + ")");
            }
        }
    }
}

inline void copy_stats(EnvelopeGrid& out, const EnvelopeResult& r) {
    out.line_passes = r.line_passes;
    out.sweeps = r.sweeps;
    out.last_update = r.last_update;
    out.clamp_active = r.clamp_active;
    out.max_clamp = r.max_clamp;
}

}  // namespace detail

/// Solution of the linear trace equation with the boundary data; dominates
/// every admissible candidate and serves as the barrier of the envelope.
inline EnvelopeGrid solve_hym(const BackgroundMetric& bg, const FinslerBoundary& g) {
    const auto data = detail::sample_finsler_boundary(bg, g);
    auto res = solve_trace_equation(bg.grid, bg.domain.base_dims(), data, bg.log_h);
    EnvelopeGrid out{bg.domain, bg.grid, bg.rank, std::move(res.values), bg.log_h};
    for (std::size_t i = 0; i < out.psi.size(); ++i) out.psi[i] -= bg.log_h[i];
    out.dominance_fixes = res.dominance_fixes;
    return out;
}

/// Perron envelope: the largest Griffiths-negative metric below the boundary
/// data, i.e. the discrete convex envelope of Phi_g in (s, y).
inline EnvelopeGrid perron_envelope(const BackgroundMetric& bg, const FinslerBoundary& g, const EnvelopeOptions& opt = {}) {
    const auto data = detail::sample_finsler_boundary(bg, g);
    detail::require_boundary_psh(bg, data, opt.psh_tol);
    EnvelopeProblem prob;
    prob.grid = bg.grid;
    prob.stencil = opt.stencil(bg.domain.base_dims());
    prob.data = data;
    prob.tol = opt.tol;
    std::size_t fixes = 0;
    if (opt.use_barrier) {
        auto hym = solve_trace_equation(bg.grid, bg.domain.base_dims(), data, bg.log_h);
        fixes = hym.dominance_fixes;
        prob.barrier = std::move(hym.values);
    }
    auto res = solve_envelope(prob);
    EnvelopeGrid out{bg.domain, bg.grid, bg.rank, std::move(res.values), bg.log_h};
    for (std::size_t i = 0; i < out.psi.size(); ++i) out.psi[i] -= bg.log_h[i];
    detail::copy_stats(out, res);
    out.dominance_fixes = fixes;
    return out;
}

// ---------------------------------------------------------------------------
// Largest norm below a torus-invariant metric.

/// Fiberwise largest norm below exp(Phi) on the direction grid. Rank 2 is
/// exact for the piecewise-linear data in the modulus r = |xi_1 / xi_0|:
/// supporting lines must have slope >= 0 and intercept >= 0, i.e. slope in
/// [0, min h / r]. Higher rank uses a discrete biconjugation with dual
/// directions taken from the same grid.
inline std::vector<double> largest_norm_below(const ProductGrid& fiber, std::span<const double> phi) {
    if (fiber.dims() == 1) {
        const std::size_t n = phi.size();
        std::vector<double> r(n), h(n);
        double cap = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            r[i] = std::exp(0.5 * fiber.axis(0).node(i));
            h[i] = std::exp(phi[i]);
            cap = std::min(cap, h[i] / r[i]);
        }
        const auto env = slope_constrained_envelope(r, h, 0.0, cap);
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = std::log(env[i]);
        return out;
    }
    const std::size_t n = fiber.size();
    const std::size_t D = fiber.dims();
    std::vector<std::vector<double>> half(n, std::vector<double>(D));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < D; ++d) half[i][d] = 0.5 * fiber.coord(i, d);
    }
    auto pairing = [&](std::size_t a, std::size_t b) {
        std::array<double, ProductGrid::kMaxDims + 1> terms{};
        terms[0] = 0.0;
        for (std::size_t d = 0; d < D; ++d) terms[d + 1] = half[a][d] + half[b][d];
        return log_sum_exp(std::span<const double>(terms.data(), D + 1));
    };
    std::vector<double> dual(n, -std::numeric_limits<double>::infinity());
    for (std::size_t z = 0; z < n; ++z) {
        for (std::size_t y = 0; y < n; ++y) dual[z] = std::max(dual[z], pairing(y, z) - phi[y]);
    }
    std::vector<double> out(n, -std::numeric_limits<double>::infinity());
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t z = 0; z < n; ++z) out[y] = std::max(out[y], pairing(y, z) - dual[z]);
        out[y] = std::min(out[y], phi[y]);
    }
    return out;
}

/// Norm-constrained envelope: starting from the Perron envelope, alternate
/// the fiberwise largest-norm projection with convexification passes until
/// neither changes the grid. Both steps only lower values, so the limit is
/// the largest Griffiths-negative norm below the data and lies below U^M.
inline EnvelopeGrid perron_envelope_norms(const BackgroundMetric& bg, const FinslerBoundary& g, const EnvelopeOptions& opt = {}) {
    const std::size_t nb = bg.domain.base_dims();
    const auto data = detail::sample_finsler_boundary(bg, g);
    const ProductGrid fiber = [&] {
        std::vector<UniformGrid> axes(bg.grid.axes().begin() + static_cast<std::ptrdiff_t>(nb), bg.grid.axes().end());
        return ProductGrid(std::move(axes));
    }();
    const std::size_t nf = fiber.size();
    for (std::size_t blk = 0; blk < bg.grid.size() / nf; ++blk) {
        if (!bg.domain.is_boundary(bg.grid.unravel(blk * nf))) continue;
        std::span<const double> slice(data.data() + blk * nf, nf);
        const auto normed = largest_norm_below(fiber, slice);
        for (std::size_t j = 0; j < nf; ++j) {
            if (slice[j] - normed[j] > opt.norm_tol) {
                throw Error(ErrorCode::BoundaryNotNorm, "boundary metric is not a norm at node " + std::to_string(blk * nf + j) +
                                                            " (deficit " + std::to_string(slice[j] - normed[j]) + ")");
            }
        }
    }

    EnvelopeGrid out = perron_envelope(bg, g, opt);
    std::vector<double> phi = out.log_metric_values();
    const auto kind = classify_nodes(bg.grid, nb);
    EnvelopeProblem prob;
    prob.grid = bg.grid;
    prob.stencil = opt.stencil(nb);
    prob.data = data;
    prob.tol = opt.tol;
    for (std::size_t it = 1; it <= opt.max_alternations; ++it) {
        double drop = 0.0;
        for (std::size_t blk = 0; blk < bg.grid.size() / nf; ++blk) {
            if (bg.domain.is_boundary(bg.grid.unravel(blk * nf))) continue;
            std::span<const double> slice(phi.data() + blk * nf, nf);
            const auto normed = largest_norm_below(fiber, slice);
            for (std::size_t j = 0; j < nf; ++j) {
                const std::size_t i = blk * nf + j;
                if (kind[i] != NodeKind::Interior) continue;
                if (normed[j] < phi[i]) {
                    drop = std::max(drop, phi[i] - normed[j]);
                    phi[i] = normed[j];
                }
            }
        }
        out.alternations = it;
        if (drop < opt.tol) break;
        prob.barrier = phi;
        auto res = solve_envelope(prob);
        phi = std::move(res.values);
        out.line_passes += res.line_passes;
        out.sweeps += res.sweeps;
        if (it == opt.max_alternations) throw Error(ErrorCode::MaxIterExceeded, "norm envelope alternation did not settle");
    }
    for (std::size_t i = 0; i < phi.size(); ++i) out.psi[i] = phi[i] - bg.log_h[i];
    return out;
}

/// Smallest-eigenvalue statistic relative to the background.
inline DegeneracyStats envelope_degeneracy(const EnvelopeGrid& e, const StencilSpec& stencil) {
    return degeneracy_stats(e.grid, stencil, e.log_metric_values(), e.log_h);
}

/// Relative residual of the best fit of exp(2 Phi) by a diagonal quadratic
/// form g_0 + sum g_j e^{y_j}, per fiber; returns the worst fiber.
inline double quadratic_fit_residual(const EnvelopeGrid& e) {
    const std::size_t nf = e.fiber_size();
    const ProductGrid fiber = e.fiber_grid();
    const auto D = static_cast<Eigen::Index>(fiber.dims());
    double worst = 0.0;
    for (std::size_t blk = 0; blk < e.grid.size() / nf; ++blk) {
        Eigen::MatrixXd A(static_cast<Eigen::Index>(nf), D + 1);
        Eigen::VectorXd b(static_cast<Eigen::Index>(nf));
        for (std::size_t j = 0; j < nf; ++j) {
            const double scale = std::exp(-2.0 * e.log_metric(blk * nf + j));
            A(static_cast<Eigen::Index>(j), 0) = scale;
            for (Eigen::Index d = 0; d < D; ++d) {
                A(static_cast<Eigen::Index>(j), d + 1) = scale * std::exp(fiber.coord(j, static_cast<std::size_t>(d)));
            }
            b[static_cast<Eigen::Index>(j)] = 1.0;
        }
        const Eigen::VectorXd coef = A.colPivHouseholderQr().solve(b);
        const double res = (A * coef - b).cwiseAbs().maxCoeff();
        worst = std::max(worst, res);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Certificates of Griffiths negativity by sub-mean-value tests.

/// f(base point, fiber vector) for a metric family on D x C^r.
using MetricFamily =
    std::function<double(std::span<const std::complex<double>> base, std::span<const std::complex<double>> xi)>;

inline MetricFamily hermitian_family(const DomainSpec& dom, std::function<HermitianForm(std::span<const double>)> forms) {
    return [dom, forms = std::move(forms)](std::span<const std::complex<double>> z, std::span<const std::complex<double>> xi) {
        const auto s = dom.reduce(z);
        return forms(std::span<const double>(s.data(), dom.base_dims()))(xi);
    };
}

struct CertifySpec {
    DomainSpec domain;
    std::size_t rank = 2;
    std::size_t points = 40;
    double radius = 1e-3;
    std::size_t circle_samples = 16;
    double sign_tol = 1e-5;
    unsigned seed = 11;
};

struct CertificateReport {
    double margin_ii = 0.0;   // f psh on the total space (tested on twisted discs)
    double margin_iii = 0.0;  // log f psh on the total space
    double margin_vi = 0.0;   // log f psh on the chart xi = (1, zeta)
    double radius = 0.0;
    std::size_t points = 0;
    double sign_tol = 0.0;

    bool pass_ii() const { return margin_ii >= -sign_tol; }
    bool pass_iii() const { return margin_iii >= -sign_tol; }
    bool pass_vi() const { return margin_vi >= -sign_tol; }
    bool signs_agree() const { return pass_ii() == pass_iii() && pass_iii() == pass_vi(); }
    bool negative() const { return pass_ii() && pass_iii() && pass_vi(); }
};

namespace detail {

using CVec = std::vector<std::complex<double>>;

// Circle-mean quotient (mean_theta F(p + rho e^{i theta} v) - F(p)) / rho^2,
// which tends to the Levi form of F at p in direction v.
template <class F>
double circle_quotient(const F& fn, const CVec& p, const CVec& v, double rho, std::size_t samples, bool twisted) {
    auto eval = [&](std::complex<double> lam) {
        CVec q(p.size());
        for (std::size_t j = 0; j < p.size(); ++j) q[j] = p[j] + lam * v[j];
        return fn(q);
    };
    const double f0 = eval(0.0);
    std::complex<double> gamma = 0.0;
    if (twisted) {
        // cancel the first-order variation of log F with the factor |e^{gamma lambda}|
        const double eps = 1e-2 * rho;
        const double dx = (std::log(eval({eps, 0.0})) - std::log(eval({-eps, 0.0}))) / (2.0 * eps);
        const double dy = (std::log(eval({0.0, eps})) - std::log(eval({0.0, -eps}))) / (2.0 * eps);
        gamma = -std::complex<double>(dx, -dy);
    }
    double mean = 0.0;
    for (std::size_t n = 0; n < samples; ++n) {
        const std::complex<double> lam = std::polar(rho, 2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(samples));
        double val = eval(lam);
        if (twisted) val *= std::exp((gamma * lam).real());
        mean += val;
    }
    mean /= static_cast<double>(samples);
    return (mean - f0) / (rho * rho) / (twisted ? f0 : 1.0);
}

// Smallest eigenvalue of the Levi form assembled by polarization, divided by
// max(1, spectral radius).
template <class F>
double levi_margin(const F& fn, const CVec& p, double rho, std::size_t samples, bool twisted) {
    const auto N = static_cast<Eigen::Index>(p.size());
    Eigen::MatrixXcd L(N, N);
    auto q = [&](const CVec& v) { return circle_quotient(fn, p, v, rho, samples, twisted); };
    std::vector<double> diag(static_cast<std::size_t>(N));
    for (Eigen::Index j = 0; j < N; ++j) {
        CVec v(p.size(), 0.0);
        v[static_cast<std::size_t>(j)] = 1.0;
        diag[static_cast<std::size_t>(j)] = q(v);
        L(j, j) = diag[static_cast<std::size_t>(j)];
    }
    for (Eigen::Index j = 0; j < N; ++j) {
        for (Eigen::Index k = j + 1; k < N; ++k) {
            CVec v(p.size(), 0.0);
            v[static_cast<std::size_t>(j)] = 1.0;
            v[static_cast<std::size_t>(k)] = 1.0;
            const double re = 0.5 * (q(v) - diag[static_cast<std::size_t>(j)] - diag[static_cast<std::size_t>(k)]);
            v[static_cast<std::size_t>(k)] = std::complex<double>(0.0, 1.0);
            const double im = -0.5 * (q(v) - diag[static_cast<std::size_t>(j)] - diag[static_cast<std::size_t>(k)]);
            L(j, k) = {re, im};
            L(k, j) = {re, -im};
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(L);
    const auto& ev = es.eigenvalues();
    const double radius = std::max(std::abs(ev.minCoeff()), std::abs(ev.maxCoeff()));
    return ev.minCoeff() / std::max(1.0, radius);
}

}  // namespace detail

/// Worst Levi-form margins of f, log f and the chart restriction of log f over
/// random points of the domain; the three agree in sign for a genuine metric.
inline CertificateReport certify_griffiths_negative(const MetricFamily& f, const CertifySpec& spec) {
    const std::size_t m = spec.domain.base_dims();
    const std::size_t r = spec.rank;
    std::mt19937 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.15, 0.85);
    std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
    std::normal_distribution<double> nd;
    CertificateReport rep;
    rep.margin_ii = rep.margin_iii = rep.margin_vi = std::numeric_limits<double>::infinity();
    rep.radius = spec.radius;
    rep.points = spec.points;
    rep.sign_tol = spec.sign_tol;

    auto total = [&](const detail::CVec& q) {
        return f(std::span<const std::complex<double>>(q.data(), m), std::span<const std::complex<double>>(q.data() + m, r));
    };
    auto log_total = [&](const detail::CVec& q) { return std::log(total(q)); };
    auto chart = [&](const detail::CVec& q) {
        detail::CVec full(m + r);
        std::copy(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(m), full.begin());
        full[m] = 1.0;
        std::copy(q.begin() + static_cast<std::ptrdiff_t>(m), q.end(), full.begin() + static_cast<std::ptrdiff_t>(m + 1));
        return std::log(total(full));
    };

    for (std::size_t n = 0; n < spec.points; ++n) {
        std::array<double, 2> s{unit(rng), unit(rng)};
        auto base = spec.domain.lift(s);
        if (spec.domain.kind == DomainKind::Annulus) base[0] *= std::polar(1.0, angle(rng));
        detail::CVec p(m + r);
        for (std::size_t d = 0; d < m; ++d) p[d] = base[d] + std::complex<double>(0.0, spec.domain.kind == DomainKind::Annulus ? 0.0 : nd(rng));
        for (std::size_t j = 0; j < r; ++j) p[m + j] = {nd(rng), nd(rng)};
        p[m] = std::abs(p[m]) + 0.5;  // keep the chart coordinate away from 0
        detail::CVec pc(m + r - 1);
        std::copy(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(m), pc.begin());
        for (std::size_t j = 1; j < r; ++j) pc[m + j - 1] = p[m + j] / p[m];

        rep.margin_ii = std::min(rep.margin_ii, detail::levi_margin(total, p, spec.radius, spec.circle_samples, true));
        rep.margin_iii = std::min(rep.margin_iii, detail::levi_margin(log_total, p, spec.radius, spec.circle_samples, false));
        rep.margin_vi = std::min(rep.margin_vi, detail::levi_margin(chart, pc, spec.radius, spec.circle_samples, false));
    }
    return rep;
}

}  // namespace kq
