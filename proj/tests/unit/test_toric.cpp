#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kq/toric.hpp"

using namespace kq;

namespace {

// sup_x (p x - log(1 + e^x)) by golden-section on a wide bracket
double fs_legendre_oracle(double p) {
    double lo = -60.0, hi = 60.0;
    auto f = [p](double x) { return -(p * x - softplus(x)); };
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    for (int i = 0; i < 300; ++i) {
        const double a = hi - g * (hi - lo);
        const double b = lo + g * (hi - lo);
        if (f(a) < f(b)) {
            hi = b;
        } else {
            lo = a;
        }
    }
    return -f(0.5 * (lo + hi));
}

ToricPotential random_admissible(const UniformGrid& grid, std::mt19937& rng) {
    // psi = log-sum-exp of affine pieces with slopes in [0, 1], containing 0 and 1
    std::uniform_real_distribution<double> slope(0.0, 1.0), icpt(-3.0, 3.0);
    std::vector<std::pair<double, double>> pieces{{0.0, icpt(rng)}, {1.0, icpt(rng)}};
    for (int j = 0; j < 3; ++j) pieces.emplace_back(slope(rng), icpt(rng));
    std::vector<double> psi(grid.size());
    for (std::size_t i = 0; i < psi.size(); ++i) {
        std::vector<double> t;
        for (auto [a, b] : pieces) t.push_back(a * grid.node(i) + b);
        psi[i] = log_sum_exp(t);
    }
    return ToricPotential::from_psi(grid, psi);
}

}  // namespace

TEST(Toric, FubiniStudyLegendreAtHalf) {
    const auto v = ToricPotential::from_u(default_x_grid(4096), [](double) { return 0.0; });
    const auto phi = legendre(v, UniformGrid(0.0, 1.0, 2));
    EXPECT_NEAR(fs_legendre_oracle(0.5), -std::log(2.0), 1e-12);
    EXPECT_NEAR(phi.values[1], -0.69314718055994531, 1e-9);
}

TEST(Toric, LegendreConstantShift) {
    const auto grid = default_x_grid(512);
    const auto v0 = ToricPotential::from_u(grid, [](double) { return 0.0; });
    const auto vc = ToricPotential::from_u(grid, [](double) { return 0.7; });
    const auto a = legendre(v0);
    const auto b = legendre(vc);
    for (std::size_t j = 0; j < a.values.size(); ++j) EXPECT_NEAR(b.values[j], a.values[j] - 0.7, 1e-12);
}

TEST(Toric, LegendreRejectsBadInput) {
    const auto grid = default_x_grid(64);
    std::vector<double> concave(grid.size());
    for (std::size_t i = 0; i < concave.size(); ++i) concave[i] = -0.001 * grid.node(i) * grid.node(i);
    EXPECT_THROW(
        {
            try {
                legendre(ToricPotential::from_psi(grid, concave));
            } catch (const Error& e) {
                EXPECT_EQ(e.code(), ErrorCode::NonConvexInput);
                throw;
            }
        },
        Error);
    std::vector<double> steep(grid.size());
    for (std::size_t i = 0; i < steep.size(); ++i) steep[i] = 2.0 * grid.node(i);
    try {
        legendre(ToricPotential::from_psi(grid, steep));
        FAIL() << "slope 2 accepted";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SlopeOutOfRange);
    }
}

TEST(Toric, InverseOfZeroIsMax) {
    const SymplecticPotential phi{UniformGrid(0.0, 1.0, 64), std::vector<double>(65, 0.0)};
    const auto v = legendre_inverse(phi, default_x_grid(128));
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(v.psi[i], std::max(0.0, v.x(i)), 1e-12);
}

TEST(Toric, InverseOfEntropyIsFubiniStudy) {
    const UniformGrid pg(0.0, 1.0, 8192);
    std::vector<double> ent(pg.size());
    for (std::size_t j = 0; j < ent.size(); ++j) {
        const double p = pg.node(j);
        ent[j] = (p > 0 ? p * std::log(p) : 0.0) + (p < 1 ? (1 - p) * std::log(1 - p) : 0.0);
    }
    const auto v = legendre_inverse(SymplecticPotential{pg, ent}, default_x_grid(256));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::abs(v.x(i)) > 8.0) continue;  // moment grid too coarse in the tails
        EXPECT_NEAR(v.psi[i], softplus(v.x(i)), 2e-4) << v.x(i);
    }
}

TEST(Toric, RoundTripRandomProfiles) {
    std::mt19937 rng(3);
    const auto grid = default_x_grid(256);
    const double h = grid.step();
    for (int n = 0; n < 100; ++n) {
        const auto v = random_admissible(grid, rng);
        ASSERT_TRUE(check_admissible(v).ok());
        const auto back = legendre_inverse(legendre(v), grid);
        double err = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) err = std::max(err, std::abs(back.psi[i] - v.psi[i]));
        EXPECT_LE(err, 2.0 * h) << "profile " << n;
    }
}

TEST(Toric, LegendreInvolutionOnSymplecticSide) {
    std::mt19937 rng(5);
    const auto grid = default_x_grid(256);
    const auto v = random_admissible(grid, rng);
    const auto phi = legendre(v);
    const auto phi2 = legendre(legendre_inverse(phi, grid));
    double lip = 0.0;
    for (std::size_t j = 0; j + 1 < phi.values.size(); ++j) {
        lip = std::max(lip, std::abs(phi.values[j + 1] - phi.values[j]) / phi.p_grid.step());
    }
    for (std::size_t j = 1; j + 1 < phi.values.size(); ++j) {
        EXPECT_NEAR(phi2.values[j], phi.values[j], 2.0 * phi.p_grid.step() * lip);
    }
}

TEST(Toric, ProjectPshFixesAdmissible) {
    std::mt19937 rng(7);
    const auto grid = default_x_grid(256);
    const auto v = random_admissible(grid, rng);
    const auto p = project_psh(v);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(p.psi[i], v.psi[i], 1e-12);
}

TEST(Toric, RooftopEnvelope) {
    const auto grid = default_x_grid(128);
    const auto u0 = ToricPotential::from_u(grid, [](double x) { return softplus(x + 2.0) - softplus(x); });
    const auto u1 = ToricPotential::from_u(grid, [](double x) { return 0.5 * std::log1p(std::exp(-x * x / 10.0)); });
    ASSERT_TRUE(check_admissible(u1).ok());
    std::vector<double> f(grid.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = std::min(u0.u(i), u1.u(i));
    const auto p = project_psh(grid, f);
    EXPECT_TRUE(check_admissible(p).ok());
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_LE(p.u(i), f[i] + 1e-12);
    // brute force: every supporting line with slope in [0,1] under softplus + f stays under P(f)
    const auto xs = grid.nodes();
    for (double s = 0.0; s <= 1.0; s += 1.0 / 64) {
        double c = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < f.size(); ++i) c = std::min(c, softplus(xs[i]) + f[i] - s * xs[i]);
        for (std::size_t i = 0; i < f.size(); ++i) EXPECT_GE(p.psi[i], s * xs[i] + c - 1e-12);
    }
}

TEST(Toric, ProjectPshMonotoneIdempotentContinuous) {
    std::mt19937 rng(11);
    std::normal_distribution<double> nd;
    const auto grid = default_x_grid(128);
    std::vector<double> f(grid.size()), g(grid.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
        f[i] = nd(rng);
        g[i] = f[i] + std::abs(nd(rng)) * 0.3;
    }
    const auto pf = project_psh(grid, f);
    const auto pg = project_psh(grid, g);
    const auto ppf = project_psh(pf);
    double diff = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        EXPECT_LE(pf.psi[i], pg.psi[i] + 1e-12);
        EXPECT_NEAR(ppf.psi[i], pf.psi[i], 1e-12);
        diff = std::max(diff, std::abs(g[i] - f[i]));
    }
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_LE(std::abs(pg.psi[i] - pf.psi[i]), diff + 1e-12);
}

TEST(Toric, ProjectPshScaledCandidate) {
    std::mt19937 rng(13);
    const auto grid = default_x_grid(256);
    const auto v = random_admissible(grid, rng);
    const double delta = 1.5;
    std::vector<double> f(grid.size());
    double inf_v = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < f.size(); ++i) {
        f[i] = delta * v.u(i);
        inf_v = std::min(inf_v, v.u(i));
    }
    const auto p = project_psh(grid, f);
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_GE(p.u(i), v.u(i) + (delta - 1.0) * inf_v - 1e-12);
}

TEST(Toric, EnergyNormalisationAndMonotonicity) {
    const auto grid = default_x_grid(1024);
    const auto c = ToricPotential::from_u(grid, [](double) { return 0.37; });
    EXPECT_NEAR(ma_energy(c), 0.37, 1e-6);
    EXPECT_NEAR(ma_energy(ToricPotential::from_u(grid, [](double) { return 0.0; })), 0.0, 1e-9);
    std::mt19937 rng(17);
    for (int n = 0; n < 20; ++n) {
        const auto a = random_admissible(grid, rng);
        const auto b = random_admissible(grid, rng);
        std::vector<double> lo(grid.size());
        for (std::size_t i = 0; i < lo.size(); ++i) lo[i] = std::min(a.u(i), b.u(i));
        const auto m = project_psh(grid, lo);
        EXPECT_LE(ma_energy(m), ma_energy(a) + 1e-9);
        EXPECT_LE(ma_energy(m), ma_energy(b) + 1e-9);
    }
}

TEST(Toric, ModulusOfContinuity) {
    const auto grid = default_x_grid(256);
    const auto c = ToricPotential::from_u(grid, [](double) { return 2.0; });
    EXPECT_NEAR(modulus_of_continuity(c, 0.3), 0.0, 1e-14);
    const auto v = ToricPotential::from_psi(grid, [&] {
        std::vector<double> p(grid.size());
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::max(0.0, grid.node(i));
        return p;
    }());
    double prev = 0.0;
    for (double r : {0.01, 0.02, 0.05, 0.1, 0.2, 0.4}) {
        const double m = modulus_of_continuity(v, r);
        EXPECT_GE(m, prev);
        prev = m;
    }
    // Lipschitz constant of u in the FS distance, by brute force over grid pairs
    const auto u = v.u_values();
    double lip = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        for (std::size_t j = i + 1; j < u.size(); ++j) {
            const double d = fs_distance(v.x(i), v.x(j));
            if (d > 0) lip = std::max(lip, std::abs(u[i] - u[j]) / d);
        }
    }
    for (double r : {0.01, 0.05, 0.2}) EXPECT_LE(modulus_of_continuity(v, r), lip * r + 1e-12);
}
