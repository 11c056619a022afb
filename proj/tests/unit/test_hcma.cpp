#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kq/hcma.hpp"

using namespace kq;

namespace {

double sup_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

ToricPotential lse_profile(const UniformGrid& grid, std::vector<std::pair<double, double>> pieces) {
    std::vector<double> psi(grid.size());
    for (std::size_t i = 0; i < psi.size(); ++i) {
        std::vector<double> t;
        for (auto [a, b] : pieces) t.push_back(a * grid.node(i) + b);
        psi[i] = log_sum_exp(t);
    }
    return ToricPotential::from_psi(grid, psi);
}

ToricPotential random_profile(const UniformGrid& grid, std::mt19937& rng) {
    std::uniform_real_distribution<double> s(0.0, 1.0), c(-2.0, 2.0);
    return lse_profile(grid, {{0.0, c(rng)}, {1.0, c(rng)}, {s(rng), c(rng)}, {s(rng), c(rng)}});
}

DomainSpec strip(std::size_t n) { return DomainSpec{DomainKind::Strip, n}; }

// min over stencil directions of the second difference at node i
double local_convexity(const ProductGrid& grid, const StencilSpec& st, const std::vector<double>& v, std::size_t i) {
    const auto dirs = detail::compile(grid, build_directions(grid, st));
    const auto idx = grid.unravel(i);
    double m = std::numeric_limits<double>::infinity();
    for (const auto& d : dirs) {
        if (!detail::fits(grid, idx, d.e)) continue;
        m = std::min(m, detail::at(v, i, d.flat) - 2.0 * v[i] + detail::at(v, i, -d.flat));
    }
    return m;
}

}  // namespace

TEST(Geodesic, ConstantEndpoints) {
    const auto grid = default_x_grid(256);
    std::mt19937 rng(1);
    const auto v = random_profile(grid, rng);
    const auto g = solve_geodesic(v, v, 8);
    for (const auto& s : g.slices) EXPECT_LE(sup_diff(s.psi, v.psi), 2.0 * grid.step());
    EXPECT_EQ(g.slices.front().psi, v.psi);
    EXPECT_EQ(g.slices.back().psi, v.psi);
}

TEST(Geodesic, ConstantShiftIsAffine) {
    const auto grid = default_x_grid(256);
    const auto u0 = ToricPotential::from_u(grid, [](double) { return 0.0; });
    const auto u1 = ToricPotential::from_u(grid, [](double) { return 1.4; });
    const auto g = solve_geodesic(u0, u1, 10);
    for (std::size_t it = 0; it < g.slices.size(); ++it) {
        const double t = g.t_grid.node(it);
        for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(g.slices[it].u(i), 1.4 * t, 2.0 * grid.step());
    }
}

TEST(Geodesic, EnergyAffineAndJointlyConvex) {
    const auto grid = default_x_grid(512);
    std::mt19937 rng(2);
    const auto g = solve_geodesic(random_profile(grid, rng), random_profile(grid, rng), 16);
    const auto e = slice_energies(g);
    for (std::size_t i = 0; i < e.size(); ++i) {
        const double t = g.t_grid.node(i);
        EXPECT_NEAR(e[i], (1 - t) * e.front() + t * e.back(), 5e-3);
    }
    for (const auto& s : g.slices) EXPECT_TRUE(check_admissible(s).ok());
    const auto pg = g.grid();
    const StencilSpec st{1, 0, 8.0, 2};
    const auto deg = degeneracy_stats(pg, st, g.psi_values(), {});
    EXPECT_GE(deg.min_value, -1e-6);
}

TEST(Geodesic, RejectsNonConvexEndpoint) {
    const auto grid = default_x_grid(64);
    std::vector<double> bad(grid.size());
    for (std::size_t i = 0; i < bad.size(); ++i) bad[i] = std::sin(grid.node(i)) + 0.5 * grid.node(i);
    const auto v = ToricPotential::from_psi(grid, bad);
    const auto z = ToricPotential::from_u(grid, [](double) { return 0.0; });
    EXPECT_THROW(solve_geodesic(z, v, 4), Error);
}

TEST(HcmaFd, StripConstantData) {
    const auto grid = default_x_grid(64);
    std::mt19937 rng(3);
    const auto v = random_profile(grid, rng);
    const auto f = solve_hcma_fd(strip(8), endpoint_family(v, v), grid);
    const std::size_t nx = grid.size();
    for (std::size_t i = 0; i < f.psi.size(); ++i) EXPECT_NEAR(f.psi[i], v.psi[i % nx], 1e-9);
}

TEST(HcmaFd, StripMatchesClosedFormGeodesic) {
    std::mt19937 rng(4);
    const std::size_t nx = 128, nt = 16;
    const auto grid = default_x_grid(nx);
    HcmaOptions opt;
    opt.fiber_slope = 8.0;
    for (int pair = 0; pair < 5; ++pair) {
        const auto u0 = random_profile(grid, rng);
        const auto u1 = random_profile(grid, rng);
        const auto fd = solve_hcma_fd(strip(nt), endpoint_family(u0, u1), grid, opt);
        const auto cf = solve_geodesic(u0, u1, nt);
        const double err = sup_diff(fd.psi, cf.psi_values());
        // both directions: the closed form is a discrete subsolution up to O(h), the FD envelope sits near it
        EXPECT_LE(err, 8.0 * grid.step()) << "pair " << pair;
        EXPECT_LE(check_comparison(to_field(cf, strip(nt)), fd, 8.0 * grid.step()).max_violation, 8.0 * grid.step());
    }
}

TEST(HcmaFd, ComparisonAndStability) {
    const auto grid = default_x_grid(64);
    std::mt19937 rng(5);
    const auto u0 = random_profile(grid, rng);
    const auto u1 = random_profile(grid, rng);
    const auto a = solve_hcma_fd(strip(8), endpoint_family(u0, u1), grid);
    const auto same = check_comparison(a, a);
    EXPECT_EQ(same.max_violation, 0.0);
    EXPECT_TRUE(same.boundary_ordered);

    auto shift = [](ToricPotential v, double c) {
        for (auto& p : v.psi) p += c;
        return v;
    };
    const auto b = solve_hcma_fd(strip(8), endpoint_family(shift(u0, 1.0), shift(u1, 1.0)), grid);
    const auto rep = check_comparison(a, b);
    EXPECT_TRUE(rep.boundary_ordered);
    EXPECT_EQ(rep.max_violation, 0.0);
    EXPECT_NEAR(sup_diff(a.psi, b.psi), 1.0, 1e-8);

    // perturb only one boundary slice: the solution moves by at most the data change
    const auto c = solve_hcma_fd(strip(8), endpoint_family(u0, shift(u1, 0.3)), grid);
    EXPECT_LE(sup_diff(a.psi, c.psi), 0.3 + 1e-8);
    EXPECT_TRUE(check_comparison(a, c).boundary_ordered);
    EXPECT_LE(check_comparison(a, c).max_violation, 1e-9);
    EXPECT_GT(check_comparison(c, a).max_violation, 0.0);
}

TEST(HcmaFd, GridMismatch) {
    const auto grid = default_x_grid(32);
    const auto z = ToricPotential::from_u(grid, [](double) { return 0.0; });
    const auto a = solve_hcma_fd(strip(4), endpoint_family(z, z), grid);
    const auto b = solve_hcma_fd(strip(8), endpoint_family(z, z), grid);
    try {
        check_comparison(a, b);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::GridMismatch);
    }
}

TEST(HcmaFd, NoSubsolutionOnBadSlice) {
    const auto grid = default_x_grid(32);
    std::vector<double> steep(grid.size());
    for (std::size_t i = 0; i < steep.size(); ++i) steep[i] = 2.0 * grid.node(i);
    const auto z = ToricPotential::from_u(grid, [](double) { return 0.0; });
    try {
        solve_hcma_fd(strip(4), endpoint_family(z, ToricPotential::from_psi(grid, steep)), grid);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NoSubsolution);
    }
}

TEST(HcmaFd, MaximalityOfInteriorNodes) {
    const auto grid = default_x_grid(64);
    std::mt19937 rng(6);
    HcmaOptions opt;
    const auto f = solve_hcma_fd(strip(8), endpoint_family(random_profile(grid, rng), random_profile(grid, rng)), grid, opt);
    const auto kind = classify_nodes(f.grid, 1);
    const auto st = opt.stencil(1);
    std::size_t tested = 0;
    for (std::size_t i = 0; i < f.psi.size(); i += 37) {
        if (kind[i] != NodeKind::Interior) continue;
        auto raised = f.psi;
        raised[i] += 2.0 * opt.tol;
        EXPECT_LT(local_convexity(f.grid, st, raised, i), 0.0) << i;
        ++tested;
    }
    EXPECT_GT(tested, 5u);
}

TEST(HcmaFd, BidiscAgainstSubsolutions) {
    // boundary data from a jointly convex function, on a coarse 17^3 grid
    const auto grid = default_x_grid(16);
    DomainSpec dom{DomainKind::BidiscTube, 16};
    auto psi_fn = [](double s0, double s1, double x) {
        return softplus(x + 2.0 * s0 - s1) + 0.5 * (s0 - 0.5) * (s0 - 0.5) + 0.3 * s0 * s1 + 0.3 * s1 * s1;
    };
    BoundaryFamily bf = [&](std::span<const double> s) {
        std::vector<double> p(grid.size());
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = psi_fn(s[0], s[1], grid.node(i));
        return ToricPotential::from_psi(grid, p);
    };
    const auto f = solve_hcma_fd(dom, bf, grid);
    ASSERT_EQ(f.grid.size(), 17u * 17u * 17u);
    // subsolutions: affine-in-base blends of FS potentials and the data function itself
    std::vector<std::function<double(double, double, double)>> subs{
        [&](double s0, double s1, double x) { return psi_fn(s0, s1, x); },
        [](double s0, double s1, double x) { return softplus(x) - 3.5 + 0.5 * s0 - 0.5 * s1; },
        [&](double s0, double s1, double x) { return std::max(psi_fn(s0, s1, x) - 0.2, softplus(x - 1.0) - 3.5); },
        [](double s0, double, double x) { return std::max(0.0, x + 2.0 * s0 - 1.0) - 0.5; },
    };
    for (std::size_t n = 0; n < subs.size(); ++n) {
        const auto& w = subs[n];
        double worst = -1e300;
        std::size_t at = 0;
        for (std::size_t i = 0; i < f.grid.size(); ++i) {
            const double d = w(f.grid.coord(i, 0), f.grid.coord(i, 1), f.grid.coord(i, 2)) - f.psi[i];
            if (d > worst) {
                worst = d;
                at = i;
            }
        }
        EXPECT_LE(worst, 1e-8) << "subsolution " << n << " at (" << f.grid.coord(at, 0) << "," << f.grid.coord(at, 1) << ","
                               << f.grid.coord(at, 2) << ")";
    }
    // never above the boundary interpolation along base axis lines
    const std::size_t n = 17;
    for (std::size_t i = 0; i < f.grid.size(); ++i) {
        const auto idx = f.grid.unravel(i);
        const double s0 = f.grid.coord(i, 0), s1 = f.grid.coord(i, 1), x = f.grid.coord(i, 2);
        const double along0 = (1 - s0) * psi_fn(0, s1, x) + s0 * psi_fn(1, s1, x);
        const double along1 = (1 - s1) * psi_fn(s0, 0, x) + s1 * psi_fn(s0, 1, x);
        EXPECT_LE(f.psi[i], std::min(along0, along1) + 1e-9) << idx[0] << "," << idx[1];
        (void)n;
    }
}

TEST(Smoothing, SmoothDataNearlyFixed) {
    const auto grid = default_x_grid(512);
    std::mt19937 rng(7);
    const auto v = random_profile(grid, rng);
    for (int k : {4, 8, 16, 32}) {
        const auto vk = smooth_boundary_family(v, k);
        EXPECT_LE(sup_diff(vk.psi, v.psi), 4.0 / k) << k;
    }
}

TEST(Smoothing, KinkGetsCurvature) {
    const auto grid = default_x_grid(512);
    std::vector<double> p(grid.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::max(0.0, grid.node(i));
    const auto v = ToricPotential::from_psi(grid, p);
    const double h = grid.step();
    double prev_dist = 1e300;
    for (int k : {2, 4, 8, 16}) {
        const auto vk = smooth_boundary_family(v, k);
        EXPECT_TRUE(check_admissible(vk).ok());
        // second derivative near the kink of order k
        const std::size_t mid = grid.intervals / 2;
        double d2 = 1e300;
        for (std::size_t i = mid - 2; i <= mid + 2; ++i) d2 = std::min(d2, (vk.psi[i + 1] - 2 * vk.psi[i] + vk.psi[i - 1]) / (h * h));
        EXPECT_GE(d2, 1.0 / (8.0 * k));
        const double dist = sup_diff(vk.psi, v.psi);
        EXPECT_LE(dist, 4.0 / k);
        EXPECT_LT(dist, prev_dist);
        prev_dist = dist;
        // strictly admissible: slopes stay away from 0 and 1
        const auto rep = check_admissible(vk);
        EXPECT_GT(rep.min_slope, 0.0);
        EXPECT_LT(rep.max_slope, 1.0);
    }
}

TEST(Smoothing, DecreasingInK) {
    const auto grid = default_x_grid(256);
    std::mt19937 rng(8);
    std::vector<ToricPotential> fam{random_profile(grid, rng), random_profile(grid, rng),
                                    lse_profile(grid, {{0.0, 0.0}, {1.0, 0.0}})};
    std::vector<ToricPotential> prev;
    for (int k = 1; k <= 24; ++k) {
        const auto cur = smooth_boundary_family(fam, k);
        if (!prev.empty()) {
            for (std::size_t s = 0; s < cur.size(); ++s)
                for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_LE(cur[s].psi[i], prev[s].psi[i] + 1e-12) << k;
        }
        prev = cur;
    }
}

TEST(Smoothing, DecreasingBoundaryFamiliesGiveCauchyFields) {
    const auto grid = default_x_grid(64);
    std::vector<double> p(grid.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::max(0.0, grid.node(i));
    const auto kink = ToricPotential::from_psi(grid, p);
    const auto fs = ToricPotential::from_u(grid, [](double) { return 0.0; });
    std::vector<HcmaField> fields;
    for (int k : {2, 4, 8, 16}) {
        const auto sm = smooth_boundary_family(std::vector<ToricPotential>{fs, kink}, k);
        fields.push_back(solve_hcma_fd(strip(8), endpoint_family(sm[0], sm[1]), grid));
    }
    double prev = 1e300;
    for (std::size_t j = 1; j < fields.size(); ++j) {
        const double d = sup_diff(fields[j].psi, fields[j - 1].psi);
        EXPECT_LT(d, prev);
        prev = d;
        EXPECT_LE(check_comparison(fields[j], fields[j - 1], 1e-9).max_violation, 1e-9);
    }
}
