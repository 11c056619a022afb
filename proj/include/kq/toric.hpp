#pragma once

// Torus-invariant Kähler potentials on (CP^1, omega_FS) with the volume
// normalised to 1. A potential u is stored through its convex profile
// psi(x) = log(1 + e^x) + u(x) in the log-coordinate x = log|z|^2; u is
// omega-psh exactly when psi is convex with slopes in [0, 1].

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "kq/error.hpp"
#include "kq/grid.hpp"
#include "kq/numeric.hpp"

namespace kq {

inline constexpr double kDefaultHalfWidth = 20.0;  // X: e^{-20} is the useful double-precision tail
inline constexpr double kTolConvex = 1e-9;

inline UniformGrid default_x_grid(std::size_t intervals) {
    return UniformGrid(-kDefaultHalfWidth, kDefaultHalfWidth, intervals);
}

struct ToricPotential {
    UniformGrid x_grid;
    std::vector<double> psi;
    // Asymptotic slopes of psi; fixed for bounded u. The boundary nodes of the
    // truncated grid stand in for the slope-0 and slope-1 ends.
    double slope_left = 0.0;
    double slope_right = 1.0;

    static ToricPotential from_psi(const UniformGrid& grid, std::vector<double> values) {
        if (values.size() != grid.size()) throw Error(ErrorCode::GridMismatch, "psi values do not match grid");
        return ToricPotential{grid, std::move(values)};
    }

    static ToricPotential from_u_values(const UniformGrid& grid, std::span<const double> u) {
        if (u.size() != grid.size()) throw Error(ErrorCode::GridMismatch, "u values do not match grid");
        std::vector<double> values(grid.size());
        for (std::size_t i = 0; i < values.size(); ++i) values[i] = softplus(grid.node(i)) + u[i];
        return ToricPotential{grid, std::move(values)};
    }

    static ToricPotential from_u(const UniformGrid& grid, const std::function<double(double)>& u) {
        std::vector<double> values(grid.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double x = grid.node(i);
            values[i] = softplus(x) + u(x);
        }
        return ToricPotential{grid, std::move(values)};
    }

    std::size_t size() const { return psi.size(); }
    double x(std::size_t i) const { return x_grid.node(i); }
    double u(std::size_t i) const { return psi[i] - softplus(x_grid.node(i)); }

    std::vector<double> u_values() const {
        std::vector<double> out(size());
        for (std::size_t i = 0; i < size(); ++i) out[i] = u(i);
        return out;
    }
};

struct SymplecticPotential {
    UniformGrid p_grid;  // on the moment interval [0, 1]
    std::vector<double> values;
};

struct AdmissibilityReport {
    double min_second_difference = 0.0;
    double min_slope = 0.0;
    double max_slope = 0.0;
    bool convex = true;
    bool slopes_in_range = true;

    bool ok() const { return convex && slopes_in_range; }
};

inline AdmissibilityReport check_admissible(std::span<const double> xs, std::span<const double> psi,
                                            double tol = kTolConvex) {
    AdmissibilityReport rep;
    rep.min_second_difference = std::numeric_limits<double>::infinity();
    rep.min_slope = std::numeric_limits<double>::infinity();
    rep.max_slope = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < psi.size(); ++i) {
        const double s = (psi[i + 1] - psi[i]) / (xs[i + 1] - xs[i]);
        rep.min_slope = std::min(rep.min_slope, s);
        rep.max_slope = std::max(rep.max_slope, s);
    }
    for (std::size_t i = 1; i + 1 < psi.size(); ++i) {
        rep.min_second_difference = std::min(rep.min_second_difference, psi[i + 1] - 2.0 * psi[i] + psi[i - 1]);
    }
    rep.convex = rep.min_second_difference >= -tol;
    rep.slopes_in_range = rep.min_slope >= -tol && rep.max_slope <= 1.0 + tol;
    return rep;
}

inline AdmissibilityReport check_admissible(const ToricPotential& v, double tol = kTolConvex) {
    const auto xs = v.x_grid.nodes();
    return check_admissible(xs, v.psi, tol);
}

inline void require_admissible(const ToricPotential& v, double tol = kTolConvex) {
    const auto rep = check_admissible(v, tol);
    if (!rep.convex) {
        throw Error(ErrorCode::NonConvexInput,
                    "second difference " + std::to_string(rep.min_second_difference) + " below -tol");
    }
    if (!rep.slopes_in_range) {
        throw Error(ErrorCode::SlopeOutOfRange, "difference quotients span [" + std::to_string(rep.min_slope) +
                                                    ", " + std::to_string(rep.max_slope) + "]");
    }
}

/// psi*(p) = max over grid nodes of (p x - psi(x)), sampled on p_grid.
inline SymplecticPotential legendre(const ToricPotential& psi, const UniformGrid& p_grid) {
    require_admissible(psi);
    const auto xs = psi.x_grid.nodes();
    const auto ps = p_grid.nodes();
    return SymplecticPotential{p_grid, discrete_legendre(xs, psi.psi, ps)};
}

inline SymplecticPotential legendre(const ToricPotential& psi) {
    return legendre(psi, UniformGrid(0.0, 1.0, psi.x_grid.intervals));
}

inline ToricPotential legendre_inverse(const SymplecticPotential& phi, const UniformGrid& x_grid) {
    const auto& v = phi.values;
    for (std::size_t j = 1; j + 1 < v.size(); ++j) {
        if (v[j + 1] - 2.0 * v[j] + v[j - 1] < -kTolConvex) {
            throw Error(ErrorCode::NonConvexInput, "symplectic potential not convex at node " + std::to_string(j));
        }
    }
    const auto ps = phi.p_grid.nodes();
    const auto xs = x_grid.nodes();
    return ToricPotential{x_grid, discrete_legendre(ps, v, xs)};
}

inline ToricPotential legendre_inverse(const SymplecticPotential& phi) {
    return legendre_inverse(phi, default_x_grid(phi.p_grid.intervals));
}

/// P(f): the largest omega-psh potential below the grid function f (u-level
/// values). Always defined for finite f.
inline ToricPotential project_psh(const UniformGrid& x_grid, std::span<const double> f) {
    if (f.size() != x_grid.size()) throw Error(ErrorCode::GridMismatch, "project_psh input size");
    const auto xs = x_grid.nodes();
    std::vector<double> g(f.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = softplus(xs[i]) + f[i];
    return ToricPotential{x_grid, slope_constrained_envelope(xs, g, 0.0, 1.0)};
}

inline ToricPotential project_psh(const ToricPotential& f) {
    const auto u = f.u_values();
    return project_psh(f.x_grid, u);
}

/// Masses of the discrete Monge–Ampère measure of psi on the grid: interior
/// cells get the jump in slope, the two boundary nodes absorb the tails up to
/// the asymptotic slopes 0 and 1. They sum to exactly 1.
inline std::vector<double> monge_ampere_masses(const UniformGrid& grid, std::span<const double> psi) {
    const std::size_t n = psi.size();
    const double h = grid.step();
    std::vector<double> m(n);
    double left = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double right = (i + 1 < n) ? (psi[i + 1] - psi[i]) / h : 1.0;
        m[i] = right - left;
        left = right;
    }
    return m;
}

inline std::vector<double> fubini_study_masses(const UniformGrid& grid) {
    std::vector<double> psi0(grid.size());
    for (std::size_t i = 0; i < psi0.size(); ++i) psi0[i] = softplus(grid.node(i));
    return monge_ampere_masses(grid, psi0);
}

/// Monge–Ampère energy I(u) = (1/2) int u (omega + omega_u), via the discrete
/// integration by parts I(u) = sum m_i u_i - (1/2) sum (u_{i+1} - u_i)^2 / h
/// with m the Fubini–Study cell masses. I(c) = c exactly and I is monotone on
/// admissible potentials.
inline double ma_energy(const ToricPotential& v) {
    require_admissible(v);
    const auto m = fubini_study_masses(v.x_grid);
    const auto u = v.u_values();
    const double h = v.x_grid.step();
    double linear = 0.0;
    double dirichlet = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        linear += m[i] * u[i];
        if (i + 1 < u.size()) dirichlet += (u[i + 1] - u[i]) * (u[i + 1] - u[i]) / h;
    }
    return linear - 0.5 * dirichlet;
}

/// Fubini–Study distance from the south pole to the circle {log|z|^2 = x},
/// for the metric of total area 1.
inline double fs_meridian_position(double x) {
    return std::atan(std::exp(0.5 * x)) / std::sqrt(std::numbers::pi);
}

inline double fs_distance(double x, double y) {
    return std::abs(fs_meridian_position(x) - fs_meridian_position(y));
}

/// M_v(r): largest oscillation of u over grid pairs at FS distance <= r.
inline double modulus_of_continuity(const ToricPotential& v, double r) {
    const auto u = v.u_values();
    std::vector<double> pos(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) pos[i] = fs_meridian_position(v.x(i));
    double best = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        for (std::size_t j = i + 1; j < u.size() && pos[j] - pos[i] <= r; ++j) {
            best = std::max(best, std::abs(u[j] - u[i]));
        }
    }
    return best;
}

/// Smallest ratio of the discrete Monge–Ampère masses of v to those of the
/// Fubini–Study profile: a grid version of the largest delta with
/// omega_v >= delta * omega.
inline double strict_admissibility_margin(const ToricPotential& v) {
    const auto mv = monge_ampere_masses(v.x_grid, v.psi);
    const auto m0 = fubini_study_masses(v.x_grid);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i + 1 < mv.size(); ++i) best = std::min(best, mv[i] / m0[i]);
    return best;
}

}  // namespace kq
