#pragma once

// Discrete Perron envelopes for degenerate real Monge–Ampère problems on
// product grids (base axes first, then fiber axes), and the linear trace
// equation used as their supersolution barrier.
//
// The envelope is the largest grid function that is convex along every
// stencil direction and does not exceed the Dirichlet data on base-boundary
// nodes. Interior nodes are relaxed with u(i) <- min_e (u(i+e) + u(i-e)) / 2
// (Oberman's wide-stencil convex envelope sweep). Fiber faces of the
// truncated box carry the envelope of the face problem, solved recursively;
// they stand in for the limits y -> +-infinity.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "kq/error.hpp"
#include "kq/grid.hpp"
#include "kq/numeric.hpp"

namespace kq {

using Offset = ProductGrid::Index;

struct StencilSpec {
    std::size_t base_dims = 1;
    std::size_t base_reach = 0;   // max |component| along base axes; 0 = whole axis
    double fiber_slope = 4.0;     // fiber displacement allowed per unit of base displacement
    std::size_t fiber_reach = 2;  // max |component| of pure fiber directions
};

namespace detail {

inline std::ptrdiff_t gcd_abs(std::ptrdiff_t a, std::ptrdiff_t b) {
    a = a < 0 ? -a : a;
    b = b < 0 ? -b : b;
    while (b != 0) {
        const auto r = a % b;
        a = b;
        b = r;
    }
    return a;
}

inline bool primitive_and_canonical(const Offset& e, std::size_t dims) {
    std::ptrdiff_t g = 0;
    for (std::size_t d = 0; d < dims; ++d) g = gcd_abs(g, e[d]);
    if (g != 1) return false;
    for (std::size_t d = 0; d < dims; ++d) {
        if (e[d] != 0) return e[d] > 0;
    }
    return false;
}

// Enumerate integer vectors with |v_d| <= bound[d] for d in [first, last).
template <class F>
void enumerate_box(Offset& v, std::size_t d, std::size_t last, const std::vector<std::ptrdiff_t>& bound, F&& f) {
    if (d == last) {
        f(v);
        return;
    }
    for (std::ptrdiff_t c = -bound[d]; c <= bound[d]; ++c) {
        v[d] = c;
        enumerate_box(v, d + 1, last, bound, f);
    }
    v[d] = 0;
}

}  // namespace detail

/// Stencil directions (one of each +-e pair), sorted by their base reach.
/// Every vector with entries in {-1, 0, 1} is always included.
inline std::vector<Offset> build_directions(const ProductGrid& grid, const StencilSpec& spec) {
    const std::size_t dims = grid.dims();
    const std::size_t nb = std::min(spec.base_dims, dims);
    std::vector<std::ptrdiff_t> bound(dims, 0);
    for (std::size_t d = 0; d < nb; ++d) {
        const auto n = static_cast<std::ptrdiff_t>(grid.axis(d).intervals);
        bound[d] = spec.base_reach == 0 ? n : std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(spec.base_reach));
    }
    std::vector<Offset> dirs;
    Offset v{};
    auto push = [&](const Offset& e) {
        if (detail::primitive_and_canonical(e, dims)) dirs.push_back(e);
    };
    // directions with a base component
    detail::enumerate_box(v, 0, nb, bound, [&](Offset& a) {
        double reach = 0.0;
        for (std::size_t d = 0; d < nb; ++d) reach = std::max(reach, std::abs(static_cast<double>(a[d])) * grid.axis(d).step());
        if (reach == 0.0) return;
        std::vector<std::ptrdiff_t> fb(dims, 0);
        for (std::size_t f = nb; f < dims; ++f) {
            const auto lim = static_cast<std::ptrdiff_t>(std::floor(spec.fiber_slope * reach / grid.axis(f).step()));
            fb[f] = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(grid.axis(f).intervals), std::max<std::ptrdiff_t>(1, lim));
        }
        Offset w = a;
        detail::enumerate_box(w, nb, dims, fb, [&](Offset& e) { push(e); });
    });
    // pure fiber directions
    if (nb < dims) {
        std::vector<std::ptrdiff_t> fb(dims, 0);
        for (std::size_t f = nb; f < dims; ++f) {
            fb[f] = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(grid.axis(f).intervals),
                                             static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, spec.fiber_reach)));
        }
        Offset w{};
        detail::enumerate_box(w, nb, dims, fb, [&](Offset& e) { push(e); });
    }
    auto base_reach = [&](const Offset& e) {
        std::ptrdiff_t r = 0;
        for (std::size_t d = 0; d < nb; ++d) r = std::max(r, e[d] < 0 ? -e[d] : e[d]);
        return r;
    };
    std::stable_sort(dirs.begin(), dirs.end(), [&](const Offset& a, const Offset& b) { return base_reach(a) < base_reach(b); });
    return dirs;
}

enum class NodeKind : std::uint8_t { Interior = 0, BaseBoundary = 1, FiberFace = 2 };

inline std::vector<NodeKind> classify_nodes(const ProductGrid& grid, std::size_t base_dims) {
    std::vector<NodeKind> kind(grid.size(), NodeKind::Interior);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto idx = grid.unravel(i);
        for (std::size_t d = 0; d < grid.dims(); ++d) {
            const auto last = static_cast<std::ptrdiff_t>(grid.axis(d).intervals);
            if (idx[d] == 0 || idx[d] == last) {
                if (d < base_dims) {
                    kind[i] = NodeKind::BaseBoundary;
                    break;
                }
                kind[i] = NodeKind::FiberFace;
            }
        }
    }
    return kind;
}

struct EnvelopeProblem {
    ProductGrid grid;
    StencilSpec stencil;
    std::vector<double> data;                   // read on base-boundary nodes
    std::optional<std::vector<double>> barrier;  // optional upper clamp, full grid
    double tol = 1e-10;
    std::size_t max_sweeps = 200000;
    std::size_t max_line_passes = 500;
};

struct EnvelopeResult {
    std::vector<double> values;
    std::vector<NodeKind> kind;
    std::size_t line_passes = 0;
    std::size_t sweeps = 0;
    double last_update = 0.0;
    double max_clamp = 0.0;  // how far the barrier sits below the unclamped update at convergence
    bool clamp_active = false;
};

namespace detail {

struct FaceRef {
    std::size_t dim;
    std::ptrdiff_t side;
};

// Restrict a full-grid array to the face {index[dim] == side}.
inline std::vector<double> restrict_to_face(const ProductGrid& grid, const ProductGrid& face, const std::vector<double>& src,
                                            const FaceRef& ref) {
    std::vector<double> out(face.size());
    for (std::size_t j = 0; j < face.size(); ++j) {
        const auto fidx = face.unravel(j);
        Offset idx{};
        for (std::size_t d = 0, fd = 0; d < grid.dims(); ++d) idx[d] = (d == ref.dim) ? ref.side : fidx[fd++];
        out[j] = src[grid.ravel(idx)];
    }
    return out;
}

inline void scatter_from_face(const ProductGrid& grid, const ProductGrid& face, const std::vector<double>& src,
                              const FaceRef& ref, std::vector<double>& dst, const std::vector<NodeKind>& kind) {
    for (std::size_t j = 0; j < face.size(); ++j) {
        const auto fidx = face.unravel(j);
        Offset idx{};
        for (std::size_t d = 0, fd = 0; d < grid.dims(); ++d) idx[d] = (d == ref.dim) ? ref.side : fidx[fd++];
        const auto flat = grid.ravel(idx);
        if (kind[flat] == NodeKind::FiberFace) dst[flat] = src[j];
    }
}

inline ProductGrid face_grid(const ProductGrid& grid, std::size_t drop) {
    std::vector<UniformGrid> axes;
    for (std::size_t d = 0; d < grid.dims(); ++d) {
        if (d != drop) axes.push_back(grid.axis(d));
    }
    return ProductGrid(std::move(axes));
}

// Visit the fiber faces; `solve_face` maps a face problem (grid, data,
// optional barrier) to face values.
template <class SolveFace>
void fill_fiber_faces(const ProductGrid& grid, std::size_t base_dims, const std::vector<double>& data,
                      const std::optional<std::vector<double>>& barrier, const std::vector<NodeKind>& kind,
                      std::vector<double>& values, SolveFace&& solve_face) {
    for (std::size_t f = base_dims; f < grid.dims(); ++f) {
        const ProductGrid face = face_grid(grid, f);
        for (std::ptrdiff_t side : {std::ptrdiff_t{0}, static_cast<std::ptrdiff_t>(grid.axis(f).intervals)}) {
            const FaceRef ref{f, side};
            auto face_data = restrict_to_face(grid, face, data, ref);
            std::optional<std::vector<double>> face_barrier;
            if (barrier) face_barrier = restrict_to_face(grid, face, *barrier, ref);
            const auto face_vals = solve_face(face, std::move(face_data), std::move(face_barrier));
            scatter_from_face(grid, face, face_vals, ref, values, kind);
        }
    }
}

struct CompiledDirection {
    Offset e;
    std::ptrdiff_t flat;
};

inline std::vector<CompiledDirection> compile(const ProductGrid& grid, const std::vector<Offset>& dirs) {
    std::vector<CompiledDirection> out;
    out.reserve(dirs.size());
    for (const auto& e : dirs) {
        std::ptrdiff_t flat = 0;
        for (std::size_t d = 0; d < grid.dims(); ++d) flat += e[d] * static_cast<std::ptrdiff_t>(grid.stride(d));
        out.push_back({e, flat});
    }
    return out;
}

inline bool fits(const ProductGrid& grid, const Offset& idx, const Offset& e) {
    for (std::size_t d = 0; d < grid.dims(); ++d) {
        const auto lo = idx[d] - (e[d] < 0 ? -e[d] : e[d]);
        const auto hi = idx[d] + (e[d] < 0 ? -e[d] : e[d]);
        if (lo < 0 || hi > static_cast<std::ptrdiff_t>(grid.axis(d).intervals)) return false;
    }
    return true;
}

inline std::ptrdiff_t base_distance(const ProductGrid& grid, const Offset& idx, std::size_t base_dims) {
    std::ptrdiff_t r = std::numeric_limits<std::ptrdiff_t>::max();
    for (std::size_t d = 0; d < base_dims; ++d) {
        const auto n = static_cast<std::ptrdiff_t>(grid.axis(d).intervals);
        r = std::min({r, idx[d], n - idx[d]});
    }
    return r;
}

inline std::ptrdiff_t base_reach_of(const Offset& e, std::size_t base_dims) {
    std::ptrdiff_t r = 0;
    for (std::size_t d = 0; d < base_dims; ++d) r = std::max(r, e[d] < 0 ? -e[d] : e[d]);
    return r;
}

}  // namespace detail

/// Computes the discrete envelope in two phases. Line passes start from the
/// largest boundary value (an upper bound for the envelope) and replace the
/// values along every stencil line by their lower convex hull; each pass moves
/// information across the whole box and the iterates decrease to the envelope.
/// Oberman sweeps, lexicographic then reverse, then run until the largest
/// update is below tol, which certifies the discrete fixed point.
inline EnvelopeResult solve_envelope(const EnvelopeProblem& prob) {
    const ProductGrid& grid = prob.grid;
    const std::size_t nb = std::min(prob.stencil.base_dims, grid.dims());
    if (prob.data.size() != grid.size()) throw Error(ErrorCode::GridMismatch, "envelope data size");
    if (prob.barrier && prob.barrier->size() != grid.size()) throw Error(ErrorCode::GridMismatch, "barrier size");

    EnvelopeResult res;
    res.kind = classify_nodes(grid, nb);
    res.values.assign(grid.size(), 0.0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (res.kind[i] == NodeKind::BaseBoundary) res.values[i] = prob.data[i];
    }
    detail::fill_fiber_faces(grid, nb, prob.data, prob.barrier, res.kind, res.values,
                             [&](const ProductGrid& face, std::vector<double> data, std::optional<std::vector<double>> barrier) {
                                 EnvelopeProblem sub;
                                 sub.grid = face;
                                 sub.stencil = prob.stencil;
                                 sub.data = std::move(data);
                                 sub.barrier = std::move(barrier);
                                 sub.tol = prob.tol;
                                 sub.max_sweeps = prob.max_sweeps;
                                 sub.max_line_passes = prob.max_line_passes;
                                 auto r = solve_envelope(sub);
                                 res.max_clamp = std::max(res.max_clamp, r.max_clamp);
                                 res.clamp_active = res.clamp_active || r.clamp_active;
                                 res.line_passes += r.line_passes;
                                 res.sweeps += r.sweeps;
                                 return r.values;
                             });

    std::vector<std::size_t> interior;
    double ceiling = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (res.kind[i] == NodeKind::Interior) {
            interior.push_back(i);
        } else {
            ceiling = std::max(ceiling, res.values[i]);
        }
    }
    if (interior.empty()) return res;
    auto& u = res.values;
    for (std::size_t i : interior) u[i] = prob.barrier ? std::min(ceiling, (*prob.barrier)[i]) : ceiling;

    const auto dirs = detail::compile(grid, build_directions(grid, prob.stencil));
    std::vector<Offset> node_idx(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) node_idx[i] = grid.unravel(i);
    auto inside = [&](const Offset& idx, const Offset& e, std::ptrdiff_t sign) {
        for (std::size_t d = 0; d < grid.dims(); ++d) {
            const auto c = idx[d] + sign * e[d];
            if (c < 0 || c > static_cast<std::ptrdiff_t>(grid.axis(d).intervals)) return false;
        }
        return true;
    };

    // phase 1: lower convex hulls along stencil lines
    std::size_t longest = 0;
    for (std::size_t d = 0; d < grid.dims(); ++d) longest = std::max(longest, grid.axis(d).size());
    std::vector<double> pos(longest);
    std::iota(pos.begin(), pos.end(), 0.0);
    std::vector<double> vals;
    std::vector<std::size_t> line;
    const double coarse_tol = std::max(prob.tol, 1e-13);
    for (std::size_t pass = 1; pass <= prob.max_line_passes; ++pass) {
        double upd = 0.0;
        for (const auto& dir : dirs) {
            for (std::size_t s = 0; s < grid.size(); ++s) {
                if (inside(node_idx[s], dir.e, -1) || !inside(node_idx[s], dir.e, 1)) continue;
                line.clear();
                vals.clear();
                for (auto j = static_cast<std::ptrdiff_t>(s);; j += dir.flat) {
                    line.push_back(static_cast<std::size_t>(j));
                    vals.push_back(u[static_cast<std::size_t>(j)]);
                    if (!inside(node_idx[static_cast<std::size_t>(j)], dir.e, 1)) break;
                }
                if (line.size() < 3) continue;
                const auto hull = detail::lower_hull(std::span<const double>(pos.data(), line.size()), vals);
                for (std::size_t h = 0; h + 1 < hull.size(); ++h) {
                    const std::size_t a = hull[h];
                    const std::size_t b = hull[h + 1];
                    for (std::size_t m = a + 1; m < b; ++m) {
                        const std::size_t i = line[m];
                        if (res.kind[i] != NodeKind::Interior) continue;
                        const double w = static_cast<double>(m - a) / static_cast<double>(b - a);
                        const double v = (1.0 - w) * vals[a] + w * vals[b];
                        if (v < u[i]) {
                            upd = std::max(upd, u[i] - v);
                            u[i] = v;
                        }
                    }
                }
            }
        }
        res.line_passes = pass;
        if (upd < coarse_tol) break;
    }

    // phase 2: Oberman sweeps to the fixed point
    std::vector<std::size_t> dir_end(interior.size());
    for (std::size_t n = 0; n < interior.size(); ++n) {
        const auto reach = nb > 0 ? detail::base_distance(grid, node_idx[interior[n]], nb)
                                  : std::numeric_limits<std::ptrdiff_t>::max();
        std::size_t end = 0;
        while (end < dirs.size() && detail::base_reach_of(dirs[end].e, nb) <= reach) ++end;
        dir_end[n] = end;
    }
    double sweep_clamp = 0.0;
    auto relax = [&](std::size_t n) {
        const std::size_t i = interior[n];
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < dir_end[n]; ++k) {
            const auto& dir = dirs[k];
            if (!detail::fits(grid, node_idx[i], dir.e)) continue;
            const double avg = 0.5 * (u[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + dir.flat)] +
                                      u[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) - dir.flat)]);
            best = std::min(best, avg);
        }
        if (prob.barrier) {
            const double cap = (*prob.barrier)[i];
            if (best > cap) {
                sweep_clamp = std::max(sweep_clamp, best - cap);
                best = cap;
            }
        }
        const double delta = std::abs(best - u[i]);
        u[i] = best;
        return delta;
    };
    for (std::size_t sweep = 1; sweep <= prob.max_sweeps; ++sweep) {
        sweep_clamp = 0.0;
        double upd = 0.0;
        for (std::size_t n = 0; n < interior.size(); ++n) upd = std::max(upd, relax(n));
        for (std::size_t n = interior.size(); n-- > 0;) upd = std::max(upd, relax(n));
        res.sweeps += 1;
        res.last_update = upd;
        if (upd < prob.tol) {
            // clamp statistics of the converged state only
            res.max_clamp = std::max(res.max_clamp, sweep_clamp);
            res.clamp_active = res.clamp_active || sweep_clamp > prob.tol;
            return res;
        }
    }
    throw Error(ErrorCode::MaxIterExceeded, "envelope sweep stalled with max update " + std::to_string(res.last_update) +
                                                " after " + std::to_string(res.sweeps) + " sweeps");
}

// ---------------------------------------------------------------------------
// Linear trace equation tr(A D^2 u) = 0 with A = (D^2 reference)^{-1}.

struct TraceEquationResult {
    std::vector<double> values;
    std::vector<NodeKind> kind;
    std::size_t dominance_fixes = 0;  // nodes where a weight or the reference spectrum was clipped
};

namespace detail {

inline double at(const std::vector<double>& v, std::size_t i, std::ptrdiff_t off) {
    return v[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + off)];
}

}  // namespace detail

/// Solves tr(A D^2 u) = 0 where A is the inverse of the grid Hessian of
/// `reference`, with Dirichlet data on base-boundary nodes and recursively
/// solved fiber faces. The operator is a nonnegative combination of second
/// differences along axis and diagonal offsets, so it is monotone and any
/// function convex along those offsets is a subsolution.
inline TraceEquationResult solve_trace_equation(const ProductGrid& grid, std::size_t base_dims,
                                                const std::vector<double>& data, const std::vector<double>& reference) {
    const std::size_t nb = std::min(base_dims, grid.dims());
    const std::size_t D = grid.dims();
    if (data.size() != grid.size() || reference.size() != grid.size()) {
        throw Error(ErrorCode::GridMismatch, "trace equation input size");
    }
    TraceEquationResult res;
    res.kind = classify_nodes(grid, nb);
    res.values.assign(grid.size(), 0.0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (res.kind[i] == NodeKind::BaseBoundary) res.values[i] = data[i];
    }
    for (std::size_t f = nb; f < D; ++f) {
        const ProductGrid face = detail::face_grid(grid, f);
        for (std::ptrdiff_t side : {std::ptrdiff_t{0}, static_cast<std::ptrdiff_t>(grid.axis(f).intervals)}) {
            const detail::FaceRef ref{f, side};
            const auto sub = solve_trace_equation(face, nb, detail::restrict_to_face(grid, face, data, ref),
                                                  detail::restrict_to_face(grid, face, reference, ref));
            res.dominance_fixes += sub.dominance_fixes;
            detail::scatter_from_face(grid, face, sub.values, ref, res.values, res.kind);
        }
    }

    std::vector<std::ptrdiff_t> unknown(grid.size(), -1);
    std::ptrdiff_t count = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (res.kind[i] == NodeKind::Interior) unknown[i] = count++;
    }
    if (count == 0) return res;

    std::vector<std::ptrdiff_t> step(D);
    std::vector<double> h(D);
    for (std::size_t d = 0; d < D; ++d) {
        step[d] = static_cast<std::ptrdiff_t>(grid.stride(d));
        h[d] = grid.axis(d).step();
    }

    std::vector<Eigen::Triplet<double>> trips;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(count);
    Eigen::MatrixXd H(D, D);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (unknown[i] < 0) continue;
        const auto row = unknown[i];
        for (std::size_t d = 0; d < D; ++d) {
            H(d, d) = (detail::at(reference, i, step[d]) - 2.0 * reference[i] + detail::at(reference, i, -step[d])) / (h[d] * h[d]);
            for (std::size_t e = d + 1; e < D; ++e) {
                const double m = (detail::at(reference, i, step[d] + step[e]) - detail::at(reference, i, step[d] - step[e]) -
                                  detail::at(reference, i, -step[d] + step[e]) + detail::at(reference, i, -step[d] - step[e])) /
                                 (4.0 * h[d] * h[e]);
                H(d, e) = m;
                H(e, d) = m;
            }
        }
        Eigen::MatrixXd A;
        bool clipped = false;
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() == Eigen::Success) {
            A = llt.solve(Eigen::MatrixXd::Identity(D, D));
        } else {
            // nearly flat directions can lose definiteness under the 4-point
            // cross differences; clip the spectrum
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
            const double top = es.eigenvalues().maxCoeff();
            if (!(top > 0.0)) {
                throw Error(ErrorCode::InsufficientStrength, "reference Hessian not positive at node " + std::to_string(i));
            }
            const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(1e-8 * top);
            A = es.eigenvectors() * lam.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
            clipped = true;
        }

        double diag = 0.0;
        auto couple = [&](std::ptrdiff_t off, double c) {
            if (c <= 0.0) return;
            diag += 2.0 * c;
            for (std::ptrdiff_t s : {off, -off}) {
                const auto j = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + s);
                if (unknown[j] >= 0) {
                    trips.emplace_back(row, unknown[j], c);
                } else {
                    rhs[row] -= c * res.values[j];
                }
            }
        };
        for (std::size_t d = 0; d < D; ++d) {
            double axis = A(d, d) / (h[d] * h[d]);
            for (std::size_t e = 0; e < D; ++e) {
                if (e != d) axis -= std::abs(A(d, e)) / (h[d] * h[e]);
            }
            if (axis < 0.0) clipped = true;
            couple(step[d], axis);
            for (std::size_t e = d + 1; e < D; ++e) {
                const double c = A(d, e) / (h[d] * h[e]);
                couple(step[d] + step[e], std::max(c, 0.0));
                couple(step[d] - step[e], std::max(-c, 0.0));
            }
        }
        if (clipped) ++res.dominance_fixes;
        trips.emplace_back(row, row, -diag);
    }

    Eigen::SparseMatrix<double> M(count, count);
    M.setFromTriplets(trips.begin(), trips.end());
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(M);
    if (lu.info() != Eigen::Success) throw Error(ErrorCode::SingularForm, "trace equation factorisation failed");
    const Eigen::VectorXd sol = lu.solve(rhs);
    if (lu.info() != Eigen::Success) throw Error(ErrorCode::SingularForm, "trace equation solve failed");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (unknown[i] >= 0) res.values[i] = sol[unknown[i]];
    }
    return res;
}

// ---------------------------------------------------------------------------
// Degeneracy of a computed solution.

struct DegeneracyStats {
    double median_abs = 0.0;  // median over interior nodes of |lambda_min|
    double max_abs = 0.0;
    double min_value = 0.0;  // most negative lambda_min (non-convexity)
    std::size_t nodes = 0;
};

/// lambda_min(i) = min over stencil offsets e of the second difference of
/// `values` along e relative to that of `reference` (or to |e|^2 if the
/// reference is empty). It vanishes where the Monge–Ampère operator relative
/// to the reference degenerates.
inline DegeneracyStats degeneracy_stats(const ProductGrid& grid, const StencilSpec& stencil,
                                        const std::vector<double>& values, const std::vector<double>& reference) {
    const std::size_t nb = std::min(stencil.base_dims, grid.dims());
    const auto kind = classify_nodes(grid, nb);
    const auto dirs = detail::compile(grid, build_directions(grid, stencil));
    std::vector<double> lam;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (kind[i] != NodeKind::Interior) continue;
        const auto idx = grid.unravel(i);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& dir : dirs) {
            if (!detail::fits(grid, idx, dir.e)) continue;
            const double dv = detail::at(values, i, dir.flat) - 2.0 * values[i] + detail::at(values, i, -dir.flat);
            double scale = 0.0;
            if (reference.empty()) {
                for (std::size_t d = 0; d < grid.dims(); ++d) {
                    const double l = static_cast<double>(dir.e[d]) * grid.axis(d).step();
                    scale += l * l;
                }
            } else {
                scale = detail::at(reference, i, dir.flat) - 2.0 * reference[i] + detail::at(reference, i, -dir.flat);
            }
            if (scale > 0.0) best = std::min(best, dv / scale);
        }
        if (std::isfinite(best)) lam.push_back(best);
    }
    DegeneracyStats st;
    st.nodes = lam.size();
    if (lam.empty()) return st;
    st.min_value = *std::min_element(lam.begin(), lam.end());
    std::vector<double> mag(lam.size());
    for (std::size_t n = 0; n < lam.size(); ++n) mag[n] = std::abs(lam[n]);
    st.max_abs = *std::max_element(mag.begin(), mag.end());
    std::nth_element(mag.begin(), mag.begin() + static_cast<std::ptrdiff_t>(mag.size() / 2), mag.end());
    st.median_abs = mag[mag.size() / 2];
    return st;
}

}  // namespace kq
