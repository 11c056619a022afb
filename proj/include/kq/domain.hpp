#pragma once

// Symmetric domains reduced to real base coordinates in [0,1]^m:
//   strip      {0 <= Re z <= 1},        s = Re z
//   annulus    {e^{-1} <= |w| <= 1},    s = -log|w|
//   bidisc     tube over the square,    s = (Re z1, Re z2)
// Invariance in Im z (or arg w) is imposed structurally.

#include <array>
#include <cmath>
#include <complex>
#include <span>
#include <string>
#include <vector>

#include "kq/error.hpp"
#include "kq/grid.hpp"

namespace kq {

enum class DomainKind { Strip, Annulus, BidiscTube };

inline std::string to_string(DomainKind k) {
    switch (k) {
        case DomainKind::Strip: return "strip";
        case DomainKind::Annulus: return "annulus";
        case DomainKind::BidiscTube: return "bidisc";
    }
    return "unknown";
}

inline DomainKind domain_kind_from_string(const std::string& s) {
    if (s == "strip") return DomainKind::Strip;
    if (s == "annulus") return DomainKind::Annulus;
    if (s == "bidisc") return DomainKind::BidiscTube;
    throw Error(ErrorCode::InvalidConfig, "unknown domain kind '" + s + "'");
}

struct DomainSpec {
    DomainKind kind = DomainKind::Annulus;
    std::size_t base_intervals = 32;

    std::size_t base_dims() const { return kind == DomainKind::BidiscTube ? 2 : 1; }

    std::vector<UniformGrid> base_axes() const {
        return std::vector<UniformGrid>(base_dims(), UniformGrid(0.0, 1.0, base_intervals));
    }

    /// Defining function on the reduced base: negative inside, zero on the
    /// boundary, strictly convex.
    double rho(std::span<const double> s) const {
        if (kind == DomainKind::BidiscTube) {
            return -std::sqrt(s[0] * (1.0 - s[0]) * s[1] * (1.0 - s[1]));
        }
        return s[0] * (s[0] - 1.0);
    }

    /// Reduced base coordinates of a point of the complex domain.
    std::array<double, 2> reduce(std::span<const std::complex<double>> z) const {
        switch (kind) {
            case DomainKind::Strip: return {z[0].real(), 0.0};
            case DomainKind::Annulus: return {-std::log(std::abs(z[0])), 0.0};
            case DomainKind::BidiscTube: return {z[0].real(), z[1].real()};
        }
        return {0.0, 0.0};
    }

    /// A complex point with the given reduced coordinates (zero imaginary part,
    /// positive real w on the annulus).
    std::array<std::complex<double>, 2> lift(std::span<const double> s) const {
        switch (kind) {
            case DomainKind::Strip: return {std::complex<double>(s[0], 0.0), 0.0};
            case DomainKind::Annulus: return {std::complex<double>(std::exp(-s[0]), 0.0), 0.0};
            case DomainKind::BidiscTube: return {std::complex<double>(s[0], 0.0), std::complex<double>(s[1], 0.0)};
        }
        return {0.0, 0.0};
    }

    bool is_boundary(const ProductGrid::Index& idx) const {
        for (std::size_t d = 0; d < base_dims(); ++d) {
            if (idx[d] == 0 || idx[d] == static_cast<std::ptrdiff_t>(base_intervals)) return true;
        }
        return false;
    }

    /// Checks that rho vanishes on boundary nodes, is negative inside and has
    /// positive second differences along axis and diagonal offsets.
    void validate() const {
        if (base_intervals < 2) throw Error(ErrorCode::InvalidConfig, "domain needs at least two base intervals");
        const ProductGrid g(base_axes());
        const double h = 1.0 / static_cast<double>(base_intervals);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto idx = g.unravel(i);
            std::array<double, 2> s{};
            for (std::size_t d = 0; d < base_dims(); ++d) s[d] = g.coord(i, d);
            const double r = rho(s);
            if (is_boundary(idx)) {
                if (r != 0.0) throw Error(ErrorCode::InvalidConfig, "defining function nonzero on the boundary");
                continue;
            }
            if (!(r < 0.0)) throw Error(ErrorCode::InvalidConfig, "defining function not negative inside");
            const std::vector<std::array<double, 2>> offsets =
                base_dims() == 1 ? std::vector<std::array<double, 2>>{{1, 0}}
                                 : std::vector<std::array<double, 2>>{{1, 0}, {0, 1}, {1, 1}, {1, -1}};
            for (const auto& e : offsets) {
                const std::array<double, 2> sp{s[0] + e[0] * h, s[1] + e[1] * h};
                const std::array<double, 2> sm{s[0] - e[0] * h, s[1] - e[1] * h};
                if (!(rho(sp) - 2.0 * r + rho(sm) > 0.0)) {
                    throw Error(ErrorCode::InvalidConfig, "defining function not strictly convex at node " + std::to_string(i));
                }
            }
        }
    }
};

}  // namespace kq
