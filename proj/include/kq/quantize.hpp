#pragma once

// Hilbert and Fubini–Study maps between torus-invariant potentials on CP^1
// and Hermitian forms on H^0(CP^1, O(k)) (monomial basis z^0 .. z^k) or on
// its dual. Toric potentials give diagonal forms, which are kept as log
// diagonals so that k up to 64 stays well conditioned; the dense path exists
// for general (non-invariant) forms.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <complex>
#include <span>
#include <utility>
#include <vector>

#include "kq/error.hpp"
#include "kq/numeric.hpp"
#include "kq/toric.hpp"

namespace kq {

enum class SpaceTag { Sections, DualSections };

inline SpaceTag opposite(SpaceTag t) {
    return t == SpaceTag::Sections ? SpaceTag::DualSections : SpaceTag::Sections;
}

inline constexpr double kHermitianTol = 1e-12;

class HermitianForm {
public:
    static HermitianForm from_log_diagonal(std::vector<double> log_diag, SpaceTag space = SpaceTag::Sections) {
        for (double v : log_diag) {
            if (!std::isfinite(v)) throw Error(ErrorCode::SingularForm, "non-finite diagonal entry");
        }
        HermitianForm g;
        g.space_ = space;
        g.diagonal_ = true;
        g.log_diag_ = std::move(log_diag);
        return g;
    }

    static HermitianForm from_matrix(Eigen::MatrixXcd m, SpaceTag space = SpaceTag::Sections) {
        if (m.rows() != m.cols() || m.rows() == 0) throw Error(ErrorCode::DimensionMismatch, "form must be square");
        const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
        if ((m - m.adjoint()).cwiseAbs().maxCoeff() > kHermitianTol * scale) {
            throw Error(ErrorCode::SingularForm, "matrix is not Hermitian");
        }
        m = 0.5 * (m + m.adjoint()).eval();
        Eigen::LLT<Eigen::MatrixXcd> llt(m);
        if (llt.info() != Eigen::Success) throw Error(ErrorCode::SingularForm, "matrix is not positive definite");
        HermitianForm g;
        g.space_ = space;
        g.diagonal_ = false;
        g.matrix_ = std::move(m);
        return g;
    }

    std::size_t dim() const { return diagonal_ ? log_diag_.size() : static_cast<std::size_t>(matrix_.rows()); }
    SpaceTag space() const { return space_; }
    bool is_diagonal() const { return diagonal_; }
    const std::vector<double>& log_diagonal() const { return log_diag_; }

    Eigen::MatrixXcd dense() const {
        if (!diagonal_) return matrix_;
        Eigen::MatrixXcd m = Eigen::MatrixXcd::Zero(dim(), dim());
        for (std::size_t j = 0; j < dim(); ++j) m(j, j) = std::exp(log_diag_[j]);
        return m;
    }

    /// Quadratic form value v^* G v.
    double quadratic(std::span<const std::complex<double>> v) const {
        if (v.size() != dim()) throw Error(ErrorCode::DimensionMismatch, "vector size");
        if (diagonal_) {
            double acc = 0.0;
            for (std::size_t j = 0; j < dim(); ++j) acc += std::exp(log_diag_[j]) * std::norm(v[j]);
            return acc;
        }
        Eigen::Map<const Eigen::VectorXcd> vec(v.data(), static_cast<Eigen::Index>(v.size()));
        return (vec.adjoint() * matrix_ * vec)(0, 0).real();
    }

    /// The norm sqrt(v^* G v): a Hermitian form viewed as a Finsler metric.
    double operator()(std::span<const std::complex<double>> v) const { return std::sqrt(quadratic(v)); }

private:
    SpaceTag space_ = SpaceTag::Sections;
    bool diagonal_ = true;
    std::vector<double> log_diag_;
    Eigen::MatrixXcd matrix_;
};

/// Dual form on the dual space: matrix conj(G^{-1}) in the dual basis, so
/// that G*(c)^2 = sup_{G(s) <= 1} |c(s)|^2.
inline HermitianForm dual(const HermitianForm& g) {
    if (g.is_diagonal()) {
        std::vector<double> d(g.log_diagonal().size());
        for (std::size_t j = 0; j < d.size(); ++j) d[j] = -g.log_diagonal()[j];
        return HermitianForm::from_log_diagonal(std::move(d), opposite(g.space()));
    }
    const Eigen::MatrixXcd m = g.dense();
    Eigen::LLT<Eigen::MatrixXcd> llt(m);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::SingularForm, "cannot dualize");
    Eigen::MatrixXcd inv = llt.solve(Eigen::MatrixXcd::Identity(m.rows(), m.cols()));
    inv = inv.conjugate().eval();
    return HermitianForm::from_matrix(0.5 * (inv + inv.adjoint()), opposite(g.space()));
}

/// a <= b in the Loewner order, up to tol relative to the larger entry.
inline bool loewner_leq(const HermitianForm& a, const HermitianForm& b, double tol = 1e-10) {
    if (a.dim() != b.dim()) throw Error(ErrorCode::DimensionMismatch, "loewner_leq");
    if (a.is_diagonal() && b.is_diagonal()) {
        for (std::size_t j = 0; j < a.dim(); ++j) {
            if (a.log_diagonal()[j] > b.log_diagonal()[j] + tol) return false;
        }
        return true;
    }
    const Eigen::MatrixXcd diff = b.dense() - a.dense();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(diff);
    const double scale = std::max(a.dense().cwiseAbs().maxCoeff(), b.dense().cwiseAbs().maxCoeff());
    return es.eigenvalues().minCoeff() >= -tol * scale;
}

/// Trapezoid quadrature of H_k(u) on the potential's grid, accumulated in the
/// log domain. Beyond the grid, u is frozen at its boundary value and the
/// tails are added in closed form to leading order.
inline HermitianForm hilbert_map(const ToricPotential& v, int k) {
    if (k < 1) throw Error(ErrorCode::InvalidConfig, "hilbert_map needs k >= 1");
    require_admissible(v);
    const std::size_t n = v.size();
    const double h = v.x_grid.step();
    std::vector<double> base(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = v.x(i);
        const double sp = softplus(x);
        // e^{-k sp} e^{-k u} times the FS density e^x / (1 + e^x)^2
        double w = std::log(h);
        if (i == 0 || i + 1 == n) w += std::log(0.5);
        base[i] = w - k * sp - k * v.u(i) + x - 2.0 * sp;
    }
    const double x0 = v.x(0);
    const double xn = v.x(n - 1);
    const double u0 = v.u(0);
    const double un = v.u(n - 1);
    std::vector<double> logd(static_cast<std::size_t>(k) + 1);
    std::vector<double> terms(n + 2);
    for (int j = 0; j <= k; ++j) {
        for (std::size_t i = 0; i < n; ++i) terms[i] = base[i] + j * v.x(i);
        terms[n] = (j + 1) * x0 - k * u0 - std::log(j + 1.0);
        terms[n + 1] = -(k - j + 1) * xn - k * un - std::log(k - j + 1.0);
        const double lg = log_sum_exp(terms);
        if (!std::isfinite(lg)) {
            throw Error(ErrorCode::QuadratureUnderflow, "no quadrature mass for j = " + std::to_string(j));
        }
        logd[static_cast<std::size_t>(j)] = lg;
    }
    return HermitianForm::from_log_diagonal(std::move(logd), SpaceTag::Sections);
}

struct EvaluationCovector {
    double x = 0.0;
    int k = 1;
    std::vector<std::complex<double>> coords;  // components in the dual monomial basis
    std::vector<double> log_abs;               // log |coords_j|, kept for stable diagonal paths
};

/// Unit evaluation functional at log|z|^2 = x with the real phase choice
/// coords_j = e^{jx/2} / (1 + e^x)^{k/2}.
inline EvaluationCovector evaluation_covector(double x, int k, double phase = 0.0) {
    if (k < 1) throw Error(ErrorCode::InvalidConfig, "evaluation_covector needs k >= 1");
    EvaluationCovector c;
    c.x = x;
    c.k = k;
    c.coords.resize(static_cast<std::size_t>(k) + 1);
    c.log_abs.resize(c.coords.size());
    const double sp = softplus(x);
    const std::complex<double> unit = std::polar(1.0, phase);
    for (int j = 0; j <= k; ++j) {
        const double la = 0.5 * j * x - 0.5 * k * sp;
        c.log_abs[static_cast<std::size_t>(j)] = la;
        c.coords[static_cast<std::size_t>(j)] = unit * std::exp(la);
    }
    return c;
}

/// FS*_k(L)(x) = (2/k) log L(s*_k(x)) for any Finsler metric L on the dual
/// space, given as a callable on coordinate vectors.
template <class Metric>
double fs_star(const Metric& metric, const EvaluationCovector& c) {
    const double val = metric(std::span<const std::complex<double>>(c.coords));
    if (!(val > 0.0) || !std::isfinite(val)) {
        throw Error(ErrorCode::ZeroEvaluation, "metric vanishes on the evaluation covector at x = " + std::to_string(c.x));
    }
    return 2.0 / c.k * std::log(val);
}

inline double fs_star(const HermitianForm& dual_form, const EvaluationCovector& c) {
    if (dual_form.dim() != c.coords.size()) throw Error(ErrorCode::DimensionMismatch, "fs_star dimension");
    if (dual_form.is_diagonal()) {
        std::vector<double> terms(c.log_abs.size());
        for (std::size_t j = 0; j < terms.size(); ++j) terms[j] = dual_form.log_diagonal()[j] + 2.0 * c.log_abs[j];
        return log_sum_exp(terms) / c.k;
    }
    const double q = dual_form.quadratic(c.coords);
    if (!(q > 0.0)) throw Error(ErrorCode::ZeroEvaluation, "dual form vanishes on covector");
    return std::log(q) / c.k;
}

template <class Metric>
double fs_star(const Metric& metric, int k, double x) {
    return fs_star(metric, evaluation_covector(x, k));
}

/// Classical FS_k(G)(x) = (1/k) log sup_{G(s) <= 1} |s(x)|^2_{h^k}, computed
/// as the G-dual norm of the evaluation functional by a Cholesky solve.
inline double fs(const HermitianForm& g, const EvaluationCovector& c) {
    if (g.dim() != c.coords.size()) throw Error(ErrorCode::DimensionMismatch, "fs dimension");
    if (g.is_diagonal()) {
        std::vector<double> terms(c.log_abs.size());
        for (std::size_t j = 0; j < terms.size(); ++j) terms[j] = 2.0 * c.log_abs[j] - g.log_diagonal()[j];
        return log_sum_exp(terms) / c.k;
    }
    Eigen::LLT<Eigen::MatrixXcd> llt(g.dense());
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::SingularForm, "fs needs a positive definite form");
    Eigen::Map<const Eigen::VectorXcd> cv(c.coords.data(), static_cast<Eigen::Index>(c.coords.size()));
    const Eigen::VectorXcd a = llt.solve(cv.conjugate());
    const double val = (cv.transpose() * a)(0, 0).real();
    return std::log(val) / c.k;
}

inline double fs(const HermitianForm& g, int k, double x) { return fs(g, evaluation_covector(x, k)); }

/// FS_k(G) sampled on a grid, returned as a toric potential.
inline ToricPotential fs_profile(const HermitianForm& g, int k, const UniformGrid& grid) {
    std::vector<double> u(grid.size());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = fs(g, k, grid.node(i));
    return ToricPotential::from_u_values(grid, u);
}

struct GapPair {
    double lower = 0.0;  // max(v - FS_k H_k v)
    double upper = 0.0;  // max(FS_k H_k v - v)
};

inline GapPair fs_hilb_gap(const ToricPotential& v, int k) {
    const auto g = hilbert_map(v, k);
    GapPair gap{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double d = fs(g, k, v.x(i)) - v.u(i);
        gap.lower = std::max(gap.lower, -d);
        gap.upper = std::max(gap.upper, d);
    }
    return gap;
}

}  // namespace kq
