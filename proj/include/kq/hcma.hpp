#pragma once

// Homogeneous complex Monge–Ampère problem (pi^* omega + i ddbar u)^{n+m} = 0
// on symmetric domains over CP^1 with torus-invariant boundary data. In
// reduced coordinates the unknown is psi(s, x), jointly convex with slopes
// in [0,1] along x, and the equation says its real Hessian is degenerate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kq/convex_envelope.hpp"
#include "kq/domain.hpp"
#include "kq/error.hpp"
#include "kq/grid.hpp"
#include "kq/numeric.hpp"
#include "kq/toric.hpp"

namespace kq {

struct GeodesicField {
    UniformGrid t_grid;
    std::vector<ToricPotential> slices;
    std::string boundary_ids;

    const UniformGrid& x_grid() const { return slices.front().x_grid; }
    ProductGrid grid() const { return ProductGrid({t_grid, x_grid()}); }

    std::vector<double> psi_values() const {
        std::vector<double> out;
        out.reserve(slices.size() * x_grid().size());
        for (const auto& s : slices) out.insert(out.end(), s.psi.begin(), s.psi.end());
        return out;
    }
};

namespace detail {

// Slopes of the chords of psi clipped to [0, 1], together with 0 and 1: the
// kinks of the conjugate of the piecewise-linear interpolant.
inline void append_chord_slopes(const ToricPotential& v, std::vector<double>& out) {
    const double h = v.x_grid.step();
    for (std::size_t i = 0; i + 1 < v.size(); ++i) out.push_back(std::clamp((v.psi[i + 1] - v.psi[i]) / h, 0.0, 1.0));
}

}  // namespace detail

/// Point at parameter t on the toric geodesic from u0 to u1: the conjugate of
/// (1 - t) psi0* + t psi1*. Both conjugates are sampled at the union of the
/// chord slopes of the endpoints, where they are exact for the piecewise-linear
/// interpolants, so equal endpoints and constant shifts are reproduced exactly.
inline ToricPotential geodesic_slice(const ToricPotential& u0, const ToricPotential& u1, double t) {
    if (!(u0.x_grid == u1.x_grid)) throw Error(ErrorCode::GridMismatch, "geodesic endpoints on different grids");
    require_admissible(u0);
    require_admissible(u1);
    if (t <= 0.0) return u0;
    if (t >= 1.0) return u1;
    std::vector<double> ps{0.0, 1.0};
    detail::append_chord_slopes(u0, ps);
    detail::append_chord_slopes(u1, ps);
    std::sort(ps.begin(), ps.end());
    ps.erase(std::unique(ps.begin(), ps.end(), [](double a, double b) { return b - a < 1e-14; }), ps.end());
    ps.back() = 1.0;
    const auto xs = u0.x_grid.nodes();
    const auto c0 = discrete_legendre(xs, u0.psi, ps);
    const auto c1 = discrete_legendre(xs, u1.psi, ps);
    std::vector<double> mix(ps.size());
    for (std::size_t j = 0; j < ps.size(); ++j) mix[j] = (1.0 - t) * c0[j] + t * c1[j];
    return ToricPotential{u0.x_grid, discrete_legendre(ps, mix, xs)};
}

/// Toric geodesic sampled at n_t + 1 equally spaced times.
inline GeodesicField solve_geodesic(const ToricPotential& u0, const ToricPotential& u1, std::size_t n_t) {
    if (!(u0.x_grid == u1.x_grid)) throw Error(ErrorCode::GridMismatch, "geodesic endpoints on different grids");
    if (n_t == 0) throw Error(ErrorCode::GridMismatch, "geodesic needs at least one t interval");
    require_admissible(u0);
    require_admissible(u1);
    GeodesicField field{UniformGrid(0.0, 1.0, n_t), {}, {}};
    field.slices.reserve(n_t + 1);
    for (std::size_t i = 0; i <= n_t; ++i) field.slices.push_back(geodesic_slice(u0, u1, field.t_grid.node(i)));
    return field;
}

/// Monge–Ampère energy of every slice; affine in t along a geodesic.
inline std::vector<double> slice_energies(const GeodesicField& field) {
    std::vector<double> out;
    out.reserve(field.slices.size());
    for (const auto& s : field.slices) out.push_back(ma_energy(s));
    return out;
}

// ---------------------------------------------------------------------------

/// psi on the reduced grid (base axes, then x), row-major.
struct HcmaField {
    DomainSpec domain;
    ProductGrid grid;
    std::vector<double> psi;
    std::size_t line_passes = 0;
    std::size_t sweeps = 0;
    double last_update = 0.0;

    std::size_t base_dims() const { return domain.base_dims(); }
    const UniformGrid& x_grid() const { return grid.axis(grid.dims() - 1); }
    double x(std::size_t flat) const { return grid.coord(flat, grid.dims() - 1); }
    double u(std::size_t flat) const { return psi[flat] - softplus(x(flat)); }
};

inline HcmaField to_field(const GeodesicField& g, const DomainSpec& dom) {
    if (dom.base_dims() != 1 || dom.base_intervals != g.t_grid.intervals) {
        throw Error(ErrorCode::GridMismatch, "geodesic does not live on this domain grid");
    }
    return HcmaField{dom, g.grid(), g.psi_values()};
}

using BoundaryFamily = std::function<ToricPotential(std::span<const double> base)>;

struct HcmaOptions {
    double fiber_slope = 8.0;  // largest x-displacement per unit base displacement in the stencil
    std::size_t base_reach = 0;
    std::size_t fiber_reach = 2;
    double tol = 1e-10;
    std::size_t max_sweeps = 100000;

    StencilSpec stencil(std::size_t base_dims) const { return StencilSpec{base_dims, base_reach, fiber_slope, fiber_reach}; }
};

namespace detail {

inline std::vector<double> base_coords(const ProductGrid& grid, std::size_t flat, std::size_t base_dims) {
    std::vector<double> s(base_dims);
    for (std::size_t d = 0; d < base_dims; ++d) s[d] = grid.coord(flat, d);
    return s;
}

// Sample the boundary family on the base-boundary nodes of the reduced grid.
inline std::vector<double> sample_boundary(const DomainSpec& dom, const ProductGrid& grid, const BoundaryFamily& boundary) {
    const std::size_t nb = dom.base_dims();
    const std::size_t nx = grid.axis(nb).size();
    const UniformGrid& xg = grid.axis(nb);
    std::vector<double> data(grid.size(), 0.0);
    for (std::size_t i = 0; i < grid.size(); i += nx) {
        const auto idx = grid.unravel(i);
        if (!dom.is_boundary(idx)) continue;
        const auto s = base_coords(grid, i, nb);
        const ToricPotential slice = boundary(s);
        if (!(slice.x_grid == xg)) throw Error(ErrorCode::GridMismatch, "boundary slice on a different x grid");
        const auto rep = check_admissible(slice);
        if (!rep.ok()) {
            throw Error(ErrorCode::NoSubsolution, "boundary slice at node " + std::to_string(i) +
                                                      " is not admissible (min second difference " +
                                                      std::to_string(rep.min_second_difference) + ", slopes [" +
                                                      std::to_string(rep.min_slope) + ", " + std::to_string(rep.max_slope) + "])");
        }
        std::copy(slice.psi.begin(), slice.psi.end(), data.begin() + static_cast<std::ptrdiff_t>(i));
    }
    return data;
}

}  // namespace detail

/// Discrete Perron envelope of the boundary family: the largest grid function
/// convex along every stencil direction that lies below the data on the
/// boundary of the base. Faces x = +-X carry the envelope of the end values.
inline HcmaField solve_hcma_fd(const DomainSpec& dom, const BoundaryFamily& boundary, const UniformGrid& x_grid,
                               const HcmaOptions& opt = {}) {
    auto axes = dom.base_axes();
    axes.push_back(x_grid);
    const ProductGrid grid(std::move(axes));
    EnvelopeProblem prob;
    prob.grid = grid;
    prob.stencil = opt.stencil(dom.base_dims());
    prob.data = detail::sample_boundary(dom, grid, boundary);
    prob.tol = opt.tol;
    prob.max_sweeps = opt.max_sweeps;
    auto res = solve_envelope(prob);
    HcmaField field{dom, grid, std::move(res.values)};
    field.line_passes = res.line_passes;
    field.sweeps = res.sweeps;
    field.last_update = res.last_update;
    return field;
}

/// Two-slice boundary family for the strip or annulus.
inline BoundaryFamily endpoint_family(ToricPotential u0, ToricPotential u1) {
    return [u0 = std::move(u0), u1 = std::move(u1)](std::span<const double> s) { return s[0] < 0.5 ? u0 : u1; };
}

struct ComparisonReport {
    bool boundary_ordered = true;      // a <= b + tol on every base-boundary node
    double boundary_violation = 0.0;   // max (a - b) over base-boundary nodes
    double max_violation = 0.0;        // max (a - b) over all nodes, clipped at 0
    std::size_t location = 0;          // flat index of the largest a - b
    std::vector<double> coords;        // grid coordinates of that node
};

inline ComparisonReport check_comparison(const HcmaField& a, const HcmaField& b, double tol = 1e-8) {
    if (!(a.grid == b.grid) || a.base_dims() != b.base_dims()) throw Error(ErrorCode::GridMismatch, "fields on different grids");
    ComparisonReport rep;
    rep.boundary_violation = -std::numeric_limits<double>::infinity();
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.grid.size(); ++i) {
        const double d = a.psi[i] - b.psi[i];
        if (a.domain.is_boundary(a.grid.unravel(i))) rep.boundary_violation = std::max(rep.boundary_violation, d);
        if (d > worst) {
            worst = d;
            rep.location = i;
        }
    }
    rep.boundary_ordered = rep.boundary_violation <= tol;
    rep.max_violation = std::max(0.0, worst);
    for (std::size_t d = 0; d < a.grid.dims(); ++d) rep.coords.push_back(a.grid.coord(rep.location, d));
    return rep;
}

/// Smallest-eigenvalue statistic of the reduced Hessian on interior nodes.
inline DegeneracyStats hcma_degeneracy(const HcmaField& f, const StencilSpec& stencil) {
    return degeneracy_stats(f.grid, stencil, f.psi, {});
}

// ---------------------------------------------------------------------------
// Decreasing smoothings of boundary data.

namespace detail {

// One pass of [1/4, 1/2, 1/4] averaging, extending psi beyond the grid with
// the asymptotic slopes 0 and 1. Never decreases a convex admissible profile.
inline void binomial_pass(std::vector<double>& psi, double h) {
    const std::size_t n = psi.size();
    double prev = psi[0];
    for (std::size_t i = 0; i < n; ++i) {
        const double left = i == 0 ? psi[0] : prev;
        const double right = i + 1 < n ? psi[i + 1] : psi[n - 1] + h;
        prev = psi[i];
        psi[i] = 0.25 * left + 0.5 * psi[i] + 0.25 * right;
    }
}

inline std::size_t smoothing_passes(const UniformGrid& grid, int k, double width) {
    const double h = grid.step();
    const double sigma = width / static_cast<double>(k);
    return static_cast<std::size_t>(std::floor(2.0 * sigma * sigma / (h * h)));
}

inline std::vector<double> binomial_smooth(std::vector<double> psi, double h, std::size_t passes) {
    for (std::size_t p = 0; p < passes; ++p) binomial_pass(psi, h);
    return psi;
}

}  // namespace detail

/// v^k = (1 - 1/k) S_k v + (1/k) (FS profile + M): S_k is binomial smoothing
/// with standard deviation width/k, M bounds every smoothed potential. The
/// family decreases in k, each member is smooth and strictly admissible, and
/// sup |v^k - v| = O(1/k).
inline std::vector<ToricPotential> smooth_boundary_family(const std::vector<ToricPotential>& v, int k, double width = 1.0) {
    if (k < 1) throw Error(ErrorCode::InvalidConfig, "smoothing index must be >= 1");
    if (v.empty()) return {};
    const UniformGrid& grid = v.front().x_grid;
    const double h = grid.step();
    double bound = -std::numeric_limits<double>::infinity();
    const std::size_t widest = detail::smoothing_passes(grid, 1, width);
    for (const auto& s : v) {
        if (!(s.x_grid == grid)) throw Error(ErrorCode::GridMismatch, "boundary slices on different grids");
        require_admissible(s);
        const auto wide = detail::binomial_smooth(s.psi, h, widest);
        for (std::size_t i = 0; i < wide.size(); ++i) bound = std::max(bound, wide[i] - softplus(grid.node(i)));
    }
    const double kk = static_cast<double>(k);
    const std::size_t passes = detail::smoothing_passes(grid, k, width);
    std::vector<ToricPotential> out;
    out.reserve(v.size());
    for (const auto& s : v) {
        auto sm = detail::binomial_smooth(s.psi, h, passes);
        for (std::size_t i = 0; i < sm.size(); ++i) sm[i] = (1.0 - 1.0 / kk) * sm[i] + (softplus(grid.node(i)) + bound) / kk;
        out.push_back(ToricPotential::from_psi(grid, std::move(sm)));
    }
    return out;
}

inline ToricPotential smooth_boundary_family(const ToricPotential& v, int k, double width = 1.0) {
    return smooth_boundary_family(std::vector<ToricPotential>{v}, k, width).front();
}

}  // namespace kq
