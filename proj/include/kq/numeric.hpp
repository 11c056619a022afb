#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace kq {

/// log(1 + e^x) without overflow or cancellation.
inline double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

/// Logistic function e^x / (1 + e^x), the derivative of softplus.
inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double log_sum_exp(std::span<const double> terms) {
    double top = -std::numeric_limits<double>::infinity();
    for (double t : terms) top = std::max(top, t);
    if (!std::isfinite(top)) return top;
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - top);
    return top + std::log(acc);
}

namespace detail {

// Indices of the lower convex hull of (xs[i], fs[i]); xs strictly increasing.
// Collinear interior points are dropped.
inline std::vector<std::size_t> lower_hull(std::span<const double> xs, std::span<const double> fs) {
    std::vector<std::size_t> hull;
    hull.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        while (hull.size() >= 2) {
            const std::size_t a = hull[hull.size() - 2];
            const std::size_t b = hull.back();
            // drop b unless it lies strictly below the chord a -> i
            const double lhs = (fs[b] - fs[a]) * (xs[i] - xs[a]);
            const double rhs = (fs[i] - fs[a]) * (xs[b] - xs[a]);
            if (lhs >= rhs) {
                hull.pop_back();
            } else {
                break;
            }
        }
        hull.push_back(i);
    }
    return hull;
}

}  // namespace detail

/// Discrete Legendre–Fenchel transform out[j] = max_i (ps[j] * xs[i] - fs[i]).
/// xs and ps must be increasing. Works for non-convex fs (the transform only
/// sees the lower hull). Linear time; ties resolve toward the smaller x.
inline std::vector<double> discrete_legendre(std::span<const double> xs, std::span<const double> fs,
                                             std::span<const double> ps) {
    const auto hull = detail::lower_hull(xs, fs);
    std::vector<double> out(ps.size());
    std::size_t v = 0;
    for (std::size_t j = 0; j < ps.size(); ++j) {
        const double p = ps[j];
        while (v + 1 < hull.size()) {
            const double cur = p * xs[hull[v]] - fs[hull[v]];
            const double nxt = p * xs[hull[v + 1]] - fs[hull[v + 1]];
            if (nxt > cur) {
                ++v;
            } else {
                break;
            }
        }
        out[j] = p * xs[hull[v]] - fs[hull[v]];
    }
    return out;
}

/// Largest function on the nodes xs that is a supremum of affine minorants of
/// fs with slopes in [slope_lo, slope_hi]. This is the biconjugate with the
/// slope range treated as a continuum, so an input that is already convex
/// with node-to-node slopes in range is returned unchanged.
inline std::vector<double> slope_constrained_envelope(std::span<const double> xs, std::span<const double> fs,
                                                      double slope_lo, double slope_hi) {
    const auto hull = detail::lower_hull(xs, fs);
    std::vector<double> slopes{slope_lo};
    for (std::size_t l = 1; l < hull.size(); ++l) {
        const double s = (fs[hull[l]] - fs[hull[l - 1]]) / (xs[hull[l]] - xs[hull[l - 1]]);
        if (s > slope_lo && s < slope_hi) slopes.push_back(s);
    }
    slopes.push_back(slope_hi);
    const auto conj = discrete_legendre(xs, fs, slopes);
    return discrete_legendre(slopes, conj, xs);
}

/// Least-squares slope through the origin: argmin_c sum (y - c x)^2.
inline double fit_through_origin(std::span<const double> xs, std::span<const double> ys) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        num += xs[i] * ys[i];
        den += xs[i] * xs[i];
    }
    return den > 0.0 ? num / den : 0.0;
}

}  // namespace kq
