#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kq/griffiths.hpp"

using namespace kq;

namespace {

EnvelopeOptions small_options() {
    EnvelopeOptions o;
    o.fiber_intervals = 32;
    o.fiber_half_width = 12.0;
    o.fiber_slope = 8.0;
    return o;
}

HermitianForm flat2() { return HermitianForm::from_log_diagonal(std::vector<double>{0.0, 0.0}); }

Eigen::MatrixXcd random_spd(int n, std::mt19937& rng) {
    std::normal_distribution<double> nd;
    Eigen::MatrixXcd a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = {nd(rng), nd(rng)};
    return a * a.adjoint() + 0.5 * Eigen::MatrixXcd::Identity(n, n);
}

double max_abs_diff(const Eigen::MatrixXcd& a, const Eigen::MatrixXcd& b) { return (a - b).cwiseAbs().maxCoeff(); }

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::IoFailure;
}

}  // namespace

TEST(Background, FlatAnnulusCertificate) {
    const DomainSpec dom{DomainKind::Annulus, 16};
    const auto bg = background_metric(dom, flat2(), 1.0, small_options());
    EXPECT_GT(bg.certificate_margin, 0.0);
    EXPECT_EQ(code_of([&] { background_metric(dom, flat2(), 0.0, small_options()); }), ErrorCode::InsufficientStrength);
    const auto bg2 = background_metric(dom, flat2(), 2.0, small_options());
    EXPECT_GT(bg2.certificate_margin, 0.0);
    const DomainSpec tube{DomainKind::BidiscTube, 8};
    EXPECT_GT(background_metric(tube, flat2(), 1.0, small_options()).certificate_margin, 0.0);
}

TEST(MatrixGeodesic, ConstantAndCommuting) {
    std::mt19937 rng(1);
    const auto g = HermitianForm::from_matrix(random_spd(3, rng));
    for (double t : {0.0, 0.3, 1.0}) EXPECT_LE(max_abs_diff(matrix_geodesic(g, g, t).dense(), g.dense()), 1e-10);
    const auto id = HermitianForm::from_matrix(Eigen::MatrixXcd::Identity(3, 3));
    Eigen::MatrixXcd d = Eigen::MatrixXcd::Zero(3, 3);
    const double dj[3] = {0.5, 2.0, 7.0};
    for (int j = 0; j < 3; ++j) d(j, j) = dj[j];
    const auto gd = HermitianForm::from_matrix(d);
    for (double t : {0.0, 0.25, 0.8, 1.0}) {
        const auto gt = matrix_geodesic(id, gd, t).dense();
        for (int j = 0; j < 3; ++j) EXPECT_NEAR(gt(j, j).real(), std::pow(dj[j], t), 1e-12);
        EXPECT_NEAR(gt(0, 1).real(), 0.0, 1e-12);
    }
    // diagonal fast path agrees
    const auto a = HermitianForm::from_log_diagonal({0.0, 1.0});
    const auto b = HermitianForm::from_log_diagonal({-2.0, 0.5});
    const auto c = matrix_geodesic(a, b, 0.4);
    EXPECT_NEAR(c.log_diagonal()[0], -0.8, 1e-14);
    EXPECT_NEAR(c.log_diagonal()[1], 0.8, 1e-14);
}

TEST(MatrixGeodesic, NonCommutingPair) {
    Eigen::MatrixXcd g0(2, 2), g1(2, 2);
    g0 << 2.0, std::complex<double>(0.5, 0.3), std::complex<double>(0.5, -0.3), 1.0;
    g1 << 1.0, std::complex<double>(-0.2, 0.7), std::complex<double>(-0.2, -0.7), 3.0;
    const auto a = HermitianForm::from_matrix(g0);
    const auto b = HermitianForm::from_matrix(g1);
    EXPECT_LE(max_abs_diff(matrix_geodesic(a, b, 0.0).dense(), g0), 1e-12);
    EXPECT_LE(max_abs_diff(matrix_geodesic(a, b, 1.0).dense(), g1), 1e-12);
    const double ld0 = std::log(g0.determinant().real());
    const double ld1 = std::log(g1.determinant().real());
    for (int i = 0; i <= 100; ++i) {
        const double t = i / 100.0;
        const auto gt = matrix_geodesic(a, b, t).dense();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(gt);
        EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
        EXPECT_NEAR(std::log(gt.determinant().real()), (1 - t) * ld0 + t * ld1, 1e-10);
    }
    EXPECT_EQ(code_of([&] { matrix_geodesic(a, HermitianForm::from_log_diagonal({0.0, 0.0, 0.0}), 0.5); }),
              ErrorCode::DimensionMismatch);
}

TEST(MatrixGeodesic, CertifiedNegative) {
    Eigen::MatrixXcd g0(2, 2), g1(2, 2);
    g0 << 2.0, std::complex<double>(0.5, 0.3), std::complex<double>(0.5, -0.3), 1.0;
    g1 << 1.0, std::complex<double>(-0.2, 0.7), std::complex<double>(-0.2, -0.7), 3.0;
    const auto a = HermitianForm::from_matrix(g0);
    const auto b = HermitianForm::from_matrix(g1);
    const DomainSpec dom{DomainKind::Annulus, 16};
    const auto fam = hermitian_family(dom, [&](std::span<const double> s) -> HermitianForm { return matrix_geodesic(a, b, s[0]); });
    CertifySpec spec;
    spec.domain = dom;
    const auto rep = certify_griffiths_negative(fam, spec);
    EXPECT_TRUE(rep.negative()) << rep.margin_ii << " " << rep.margin_iii << " " << rep.margin_vi;
    EXPECT_TRUE(rep.signs_agree());
}

TEST(Certificate, CurvatureSignControls) {
    // e^{-|w|^2}|xi| has positive curvature and fails; e^{+|w|^2}|xi| has log f psh and passes
    auto make = [](double sign) -> MetricFamily {
        return [sign](std::span<const std::complex<double>> z, std::span<const std::complex<double>> xi) {
            double n = 0.0;
            for (auto c : xi) n += std::norm(c);
            return std::exp(sign * std::norm(z[0])) * std::sqrt(n);
        };
    };
    CertifySpec spec;
    spec.domain = DomainSpec{DomainKind::Annulus, 16};
    const auto bad = certify_griffiths_negative(make(-1.0), spec);
    EXPECT_FALSE(bad.pass_ii());
    EXPECT_FALSE(bad.pass_iii());
    EXPECT_FALSE(bad.pass_vi());
    EXPECT_LT(bad.margin_iii, 0.0);
    const auto good = certify_griffiths_negative(make(1.0), spec);
    EXPECT_TRUE(good.negative());
    EXPECT_TRUE(good.signs_agree());
}

TEST(Finsler, HermitianProfileAndHomogeneity) {
    const ProductGrid dirs({UniformGrid(-12.0, 12.0, 96)});
    const auto g = HermitianForm::from_log_diagonal({0.3, -0.4});
    const auto f = finsler_from_hermitian(g, dirs);
    EXPECT_TRUE(check_finsler(f).ok(1e-9));
    std::vector<std::complex<double>> xi{{0.7, 0.1}, {-0.2, 0.5}};
    const double exact = g(xi);
    EXPECT_NEAR(f(xi), exact, 1e-3 * exact);
    for (std::complex<double> lam : {std::complex<double>(2.0, 0.0), std::complex<double>(0.0, -0.5)}) {
        std::vector<std::complex<double>> scaled{lam * xi[0], lam * xi[1]};
        EXPECT_NEAR(f(scaled), std::abs(lam) * f(xi), 1e-12);
    }
    EXPECT_EQ(code_of([&] { hermitian_log_profile(HermitianForm::from_matrix(Eigen::MatrixXcd::Identity(2, 2) * 2.0), std::vector<double>{0.0}); }),
              ErrorCode::DimensionMismatch);
}

TEST(LargestNorm, FixesNormsAndLowersOthers) {
    const ProductGrid fiber({UniformGrid(-12.0, 12.0, 64)});
    std::vector<double> eu(fiber.size()), l4(fiber.size()), bad(fiber.size());
    for (std::size_t i = 0; i < fiber.size(); ++i) {
        const double y = fiber.coord(i, 0);
        eu[i] = 0.5 * softplus(y);
        l4[i] = 0.25 * softplus(2.0 * y);
        bad[i] = softplus(0.25 * y);  // 1 + r^{1/2}: log-convex, not a norm
    }
    for (const auto* v : {&eu, &l4}) {
        const auto p = largest_norm_below(fiber, *v);
        for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], (*v)[i], 1e-12);
    }
    const auto p = largest_norm_below(fiber, bad);
    double drop = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        EXPECT_LE(p[i], bad[i] + 1e-15);
        drop = std::max(drop, bad[i] - p[i]);
    }
    EXPECT_GT(drop, 1e-3);
    // idempotent
    const auto pp = largest_norm_below(fiber, p);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(pp[i], p[i], 1e-12);
}

TEST(LargestNorm, RankThreeEuclideanNearlyFixed) {
    const ProductGrid fiber({UniformGrid(-8.0, 8.0, 16), UniformGrid(-8.0, 8.0, 16)});
    std::vector<double> eu(fiber.size());
    for (std::size_t i = 0; i < fiber.size(); ++i) {
        const std::array<double, 3> t{0.0, fiber.coord(i, 0), fiber.coord(i, 1)};
        eu[i] = 0.5 * log_sum_exp(t);
    }
    const auto p = largest_norm_below(fiber, eu);
    for (std::size_t i = 0; i < p.size(); ++i) {
        EXPECT_LE(p[i], eu[i] + 1e-15);
        EXPECT_NEAR(p[i], eu[i], 1e-12);
    }
}

class AnnulusEnvelope : public ::testing::Test {
protected:
    DomainSpec dom{DomainKind::Annulus, 16};
    EnvelopeOptions opt = small_options();
    HermitianForm d0 = HermitianForm::from_log_diagonal({0.0, 1.5});
    HermitianForm d1 = HermitianForm::from_log_diagonal({0.8, -1.0});
    FinslerBoundary bnd = hermitian_boundary([this](std::span<const double> s) -> HermitianForm { return s[0] < 0.5 ? d0 : d1; });
};

TEST_F(AnnulusEnvelope, MatchesMatrixGeodesic) {
    const auto bg = background_metric(dom, flat2(), 1.0, opt);
    const auto m = perron_envelope(bg, bnd, opt);
    double err = 0.0;
    for (std::size_t i = 0; i < m.grid.size(); ++i) {
        const double t = m.grid.coord(i, 0);
        const std::array<double, 1> y{m.grid.coord(i, 1)};
        err = std::max(err, std::abs(m.log_metric(i) - hermitian_log_profile(matrix_geodesic(d0, d1, t), y)));
    }
    const double h = m.grid.axis(1).step();
    EXPECT_LE(err, h);
    EXPECT_LE(envelope_degeneracy(m, opt.stencil(1)).median_abs, 1e-6);
    EXPECT_LE(quadratic_fit_residual(m), 0.05);  // discretization level only
    // barrier ordering
    const auto hym = solve_hym(bg, bnd);
    for (std::size_t i = 0; i < m.grid.size(); ++i) EXPECT_LE(m.psi[i], hym.psi[i] + 1e-8);
    EXPECT_GT(envelope_degeneracy(hym, opt.stencil(1)).median_abs, 1e-3);
}

TEST_F(AnnulusEnvelope, NormEnvelopeEqualsPerron) {
    const auto bg = background_metric(dom, flat2(), 1.0, opt);
    const auto m = perron_envelope(bg, bnd, opt);
    const auto n = perron_envelope_norms(bg, bnd, opt);
    for (std::size_t i = 0; i < m.grid.size(); ++i) {
        EXPECT_LE(n.psi[i], m.psi[i] + 1e-10);
        EXPECT_NEAR(n.psi[i], m.psi[i], 1e-8);
    }
}

TEST_F(AnnulusEnvelope, BaseConstantDataIsFixed) {
    const auto bg = background_metric(dom, flat2(), 1.0, opt);
    // a non-Hermitian convex profile: l4-type norm
    FinslerBoundary g = [](std::span<const double>, std::span<const double> y) { return 0.25 * softplus(2.0 * y[0]) + 0.2; };
    const auto m = perron_envelope(bg, g, opt);
    for (std::size_t i = 0; i < m.grid.size(); ++i) {
        EXPECT_NEAR(m.log_metric(i), 0.25 * softplus(2.0 * m.grid.coord(i, 1)) + 0.2, 1e-9);
    }
    const auto n = perron_envelope_norms(bg, g, opt);
    for (std::size_t i = 0; i < m.grid.size(); ++i) EXPECT_NEAR(n.psi[i], m.psi[i], 1e-9);
}

TEST_F(AnnulusEnvelope, EuclideanDataStaysEuclidean) {
    const auto bg = background_metric(dom, flat2(), 1.0, opt);
    const auto e = flat2();
    const auto n = perron_envelope_norms(bg, hermitian_boundary([e](std::span<const double>) { return e; }), opt);
    for (std::size_t i = 0; i < n.grid.size(); ++i) EXPECT_NEAR(n.log_metric(i), 0.5 * softplus(n.grid.coord(i, 1)), 1e-9);
}

TEST_F(AnnulusEnvelope, BoundaryErrors) {
    const auto bg = background_metric(dom, flat2(), 1.0, opt);
    FinslerBoundary wavy = [](std::span<const double>, std::span<const double> y) { return 0.5 * softplus(y[0]) + 0.3 * std::sin(y[0]); };
    EXPECT_EQ(code_of([&] { perron_envelope(bg, wavy, opt); }), ErrorCode::BoundaryNotPsh);
    FinslerBoundary notnorm = [](std::span<const double>, std::span<const double> y) { return softplus(0.25 * y[0]); };
    EXPECT_NO_THROW(perron_envelope(bg, notnorm, opt));
    EXPECT_EQ(code_of([&] { perron_envelope_norms(bg, notnorm, opt); }), ErrorCode::BoundaryNotNorm);
}

TEST_F(AnnulusEnvelope, HymConstantAndLinear) {
    const auto bg = background_metric(dom, flat2(), 1.0, opt);
    FinslerBoundary c = [](std::span<const double>, std::span<const double>) { return 0.7; };
    const auto hc = solve_hym(bg, c);
    for (std::size_t i = 0; i < hc.grid.size(); ++i) EXPECT_NEAR(hc.log_metric(i), 0.7, 1e-9);

    FinslerBoundary g1 = [](std::span<const double> s, std::span<const double> y) { return 0.5 * softplus(y[0]) + s[0]; };
    FinslerBoundary g2 = [](std::span<const double> s, std::span<const double> y) { return 0.25 * softplus(2.0 * y[0] - s[0]); };
    FinslerBoundary g12 = [&](std::span<const double> s, std::span<const double> y) { return g1(s, y) + g2(s, y); };
    const auto a = solve_hym(bg, g1);
    const auto b = solve_hym(bg, g2);
    const auto ab = solve_hym(bg, g12);
    for (std::size_t i = 0; i < ab.grid.size(); ++i) EXPECT_NEAR(ab.log_metric(i), a.log_metric(i) + b.log_metric(i), 1e-9);
}

TEST(TubeEnvelope, RulingDataIsNotHermitian) {
    const DomainSpec dom{DomainKind::BidiscTube, 8};
    auto opt = small_options();
    opt.fiber_intervals = 32;
    const auto bg = background_metric(dom, flat2(), 1.0, opt);
    const auto bnd = hermitian_boundary([](std::span<const double> s) -> HermitianForm {
        const double a = 2.0 * s[0] - 1.0, b = 2.0 * s[1] - 1.0;
        return HermitianForm::from_log_diagonal(std::vector<double>{3.0 * a * a, 3.0 * b * b});
    });
    const auto m = perron_envelope(bg, bnd, opt);
    const auto n = perron_envelope_norms(bg, bnd, opt);
    EXPECT_GT(quadratic_fit_residual(m), 10.0 * opt.tol);
    double gap = -1e300;
    for (std::size_t i = 0; i < m.grid.size(); ++i) gap = std::max(gap, m.psi[i] - n.psi[i]);
    EXPECT_GE(gap, -1e-10);
    EXPECT_LE(envelope_degeneracy(m, opt.stencil(2)).median_abs, 1e-6);
    const auto hym = solve_hym(bg, bnd);
    for (std::size_t i = 0; i < m.grid.size(); ++i) EXPECT_LE(m.psi[i], hym.psi[i] + 1e-8);
}
