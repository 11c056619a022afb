#pragma once

// Experiment orchestration: configuration, named boundary profiles, the
// quantized convergence pipeline, invariant suites and deterministic emission.

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "kq/domain.hpp"
#include "kq/error.hpp"
#include "kq/griffiths.hpp"
#include "kq/hcma.hpp"
#include "kq/io.hpp"
#include "kq/quantize.hpp"
#include "kq/toric.hpp"

namespace kq {

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Named profiles.

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        const auto b = cur.find_first_not_of(" \t");
        const auto e = cur.find_last_not_of(" \t");
        out.push_back(b == std::string::npos ? std::string() : cur.substr(b, e - b + 1));
    }
    return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidConfig, "cannot parse '" + s + "' as a number for " + what);
    }
}

}  // namespace detail

/// Resolves a profile recipe on a grid:
///   zero             u = 0
///   sharpen:c        psi = softplus(c x) / c            (c > 0)
///   shift:a          psi = softplus(x + a)
///   lse:a            psi = log(1 + e^{x + a} + e^{2x}) / 2
///   max              psi = max(0, x)
///   file:path        x,psi CSV on the same grid
inline ToricPotential make_profile(const std::string& recipe, const UniformGrid& grid) {
    const auto parts = detail::split(recipe, ':');
    const std::string& name = parts.empty() ? recipe : parts[0];
    auto param = [&](double fallback) {
        return parts.size() > 1 ? detail::parse_double(parts[1], "profile " + recipe) : fallback;
    };
    ToricPotential v;
    if (name == "zero") {
        v = ToricPotential::from_u(grid, [](double) { return 0.0; });
    } else if (name == "sharpen") {
        const double c = param(2.0);
        if (!(c > 0.0)) throw Error(ErrorCode::InvalidConfig, "sharpen needs c > 0");
        v = ToricPotential::from_u(grid, [c](double x) { return softplus(c * x) / c - softplus(x); });
    } else if (name == "shift") {
        const double a = param(1.0);
        v = ToricPotential::from_u(grid, [a](double x) { return softplus(x + a) - softplus(x); });
    } else if (name == "lse") {
        const double a = param(0.0);
        v = ToricPotential::from_u(grid, [a](double x) {
            const std::array<double, 3> t{0.0, x + a, 2.0 * x};
            return 0.5 * log_sum_exp(t) - softplus(x);
        });
    } else if (name == "max") {
        v = ToricPotential::from_u(grid, [](double x) { return std::max(0.0, x) - softplus(x); });
    } else if (name == "file") {
        if (parts.size() < 2) throw Error(ErrorCode::InvalidConfig, "file profile needs a path");
        v = io::parse_potential(io::read_text(recipe.substr(5)));
        if (!(v.x_grid == grid)) throw Error(ErrorCode::GridMismatch, "profile file " + recipe.substr(5) + " is on another grid");
    } else {
        throw Error(ErrorCode::InvalidConfig, "unknown profile '" + recipe + "'");
    }
    require_admissible(v);
    return v;
}

/// Point on the toric geodesic from u0 to u1 at parameter w.
inline ToricPotential interpolate_potentials(const ToricPotential& u0, const ToricPotential& u1, double w) {
    return geodesic_slice(u0, u1, w);
}

// ---------------------------------------------------------------------------
// Configuration.

struct Tolerances {
    double envelope = 1e-10;   // sweep convergence
    double boundary = 1e-6;    // boundary attainment
    double order = 1e-8;       // ordering chain
    double psh = 1e-9;         // joint convexity margins
    double degenerate = 1e-6;  // extremal solutions
    double nondegenerate = 1e-3;  // barrier
};

struct ExperimentConfig {
    std::string kind = "converge";
    DomainSpec domain{DomainKind::Annulus, 32};
    std::string profile0 = "zero";
    std::string profile1 = "sharpen:2";
    std::vector<std::string> gap_profiles{"sharpen:0.5", "lse:3", "shift:1"};
    std::vector<int> k_list{2, 4, 8, 16, 32};
    std::size_t x_intervals = 512;
    std::size_t t_intervals = 32;
    std::size_t fiber_intervals = 32;
    double fiber_half_width = 12.0;
    double fiber_slope = 8.0;
    std::string envelope_data = "profiles";  // or ruling:c
    double strength = 1.0;
    Tolerances tol;
    std::size_t certify_families = 20;
    unsigned seed = 20240607;
    std::string output_dir = "out";

    UniformGrid x_grid() const { return default_x_grid(x_intervals); }
    UniformGrid fiber_x_grid() const { return UniformGrid(-fiber_half_width, fiber_half_width, fiber_intervals); }

    EnvelopeOptions envelope_options() const {
        EnvelopeOptions o;
        o.fiber_intervals = fiber_intervals;
        o.fiber_half_width = fiber_half_width;
        o.fiber_slope = fiber_slope;
        o.tol = tol.envelope;
        return o;
    }

    void validate() const;
};

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline const std::vector<std::string>& experiment_kinds() {
    static const std::vector<std::string> kinds{"geodesic", "quantize", "envelope", "hym", "converge", "certify"};
    return kinds;
}

inline void ExperimentConfig::validate() const {
    const auto& kinds = experiment_kinds();
    if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
        throw Error(ErrorCode::InvalidConfig, "unknown experiment kind '" + kind + "'");
    }
    if (k_list.empty()) throw Error(ErrorCode::InvalidConfig, "k_list is empty");
    for (std::size_t i = 0; i < k_list.size(); ++i) {
        if (k_list[i] < 1) throw Error(ErrorCode::InvalidConfig, "k values must be >= 1");
        if (i && k_list[i] <= k_list[i - 1]) throw Error(ErrorCode::InvalidConfig, "k_list must be strictly increasing");
    }
    for (auto [name, n] : {std::pair{"x_intervals", x_intervals}, std::pair{"t_intervals", t_intervals},
                           std::pair{"fiber_intervals", fiber_intervals}, std::pair{"base_intervals", domain.base_intervals}}) {
        if (!is_power_of_two(n)) throw Error(ErrorCode::InvalidConfig, std::string(name) + " must be a power of two");
    }
    if (!(fiber_half_width > 0.0) || !(fiber_slope > 0.0)) throw Error(ErrorCode::InvalidConfig, "fiber grid parameters");
    if (!(strength > 0.0)) throw Error(ErrorCode::InvalidConfig, "strength must be positive");
    domain.validate();
    for (const auto& p : std::vector<std::string>{profile0, profile1}) make_profile(p, x_grid());
    for (const auto& p : gap_profiles) make_profile(p, x_grid());
    if (envelope_data != "profiles" && envelope_data.rfind("ruling:", 0) != 0) {
        throw Error(ErrorCode::InvalidConfig, "envelope data must be 'profiles' or 'ruling:c'");
    }
    if (kind == "converge" && domain.kind == DomainKind::BidiscTube && k_list != std::vector<int>{1}) {
        throw Error(ErrorCode::InvalidConfig, "tube convergence runs with k_list = 1 (rank-two fibers)");
    }
}

namespace detail {

template <class T>
std::string join(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        if constexpr (std::is_same_v<T, std::string>) {
            out += v[i];
        } else {
            out += std::to_string(v[i]);
        }
    }
    return out;
}

}  // namespace detail

/// Canonical INI text of a configuration; hashing this text identifies a run.
inline std::string to_ini(const ExperimentConfig& c) {
    // shortest round-trip form keeps the files readable
    const auto num = [](double v) { return fmt::format("{}", v); };
    std::string s;
    s += "[experiment]\nkind = " + c.kind + "\noutput = " + c.output_dir + "\n\n";
    s += "[domain]\nkind = " + to_string(c.domain.kind) + "\nbase_intervals = " + std::to_string(c.domain.base_intervals) + "\n\n";
    s += "[profiles]\nu0 = " + c.profile0 + "\nu1 = " + c.profile1 + "\ngap = " + detail::join(c.gap_profiles) + "\n\n";
    s += "[quantize]\nk_list = " + detail::join(c.k_list) + "\n\n";
    s += "[grid]\nx_intervals = " + std::to_string(c.x_intervals) + "\nt_intervals = " + std::to_string(c.t_intervals) +
         "\nfiber_intervals = " + std::to_string(c.fiber_intervals) + "\nfiber_half_width = " + num(c.fiber_half_width) +
         "\nfiber_slope = " + num(c.fiber_slope) + "\n\n";
    s += "[envelope]\ndata = " + c.envelope_data + "\nstrength = " + num(c.strength) + "\n\n";
    s += "[tolerances]\nenvelope = " + num(c.tol.envelope) + "\nboundary = " + num(c.tol.boundary) +
         "\norder = " + num(c.tol.order) + "\npsh = " + num(c.tol.psh) + "\ndegenerate = " +
         num(c.tol.degenerate) + "\nnondegenerate = " + num(c.tol.nondegenerate) + "\n\n";
    s += "[certify]\nfamilies = " + std::to_string(c.certify_families) + "\nseed = " + std::to_string(c.seed) + "\n";
    return s;
}

inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig c = {}) {
    boost::property_tree::ptree pt;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
    }
    auto str = [&](const char* key, std::string& dst) {
        if (auto v = pt.get_optional<std::string>(key)) dst = *v;
    };
    auto num = [&](const char* key, double& dst) {
        if (auto v = pt.get_optional<std::string>(key)) dst = detail::parse_double(*v, key);
    };
    auto count = [&](const char* key, auto& dst) {
        if (auto v = pt.get_optional<std::string>(key)) {
            const double d = detail::parse_double(*v, key);
            if (d < 0 || d != std::floor(d)) throw Error(ErrorCode::InvalidConfig, std::string(key) + " must be a nonnegative integer");
            dst = static_cast<std::remove_reference_t<decltype(dst)>>(d);
        }
    };
    str("experiment.kind", c.kind);
    str("experiment.output", c.output_dir);
    if (auto v = pt.get_optional<std::string>("domain.kind")) c.domain.kind = domain_kind_from_string(*v);
    count("domain.base_intervals", c.domain.base_intervals);
    str("profiles.u0", c.profile0);
    str("profiles.u1", c.profile1);
    if (auto v = pt.get_optional<std::string>("profiles.gap")) c.gap_profiles = detail::split(*v, ',');
    if (auto v = pt.get_optional<std::string>("quantize.k_list")) {
        c.k_list.clear();
        for (const auto& p : detail::split(*v, ',')) {
            const double d = detail::parse_double(p, "k_list");
            if (d != std::floor(d)) throw Error(ErrorCode::InvalidConfig, "k_list entries must be integers");
            c.k_list.push_back(static_cast<int>(d));
        }
    }
    count("grid.x_intervals", c.x_intervals);
    count("grid.t_intervals", c.t_intervals);
    count("grid.fiber_intervals", c.fiber_intervals);
    num("grid.fiber_half_width", c.fiber_half_width);
    num("grid.fiber_slope", c.fiber_slope);
    str("envelope.data", c.envelope_data);
    num("envelope.strength", c.strength);
    num("tolerances.envelope", c.tol.envelope);
    num("tolerances.boundary", c.tol.boundary);
    num("tolerances.order", c.tol.order);
    num("tolerances.psh", c.tol.psh);
    num("tolerances.degenerate", c.tol.degenerate);
    num("tolerances.nondegenerate", c.tol.nondegenerate);
    count("certify.families", c.certify_families);
    count("certify.seed", c.seed);
    return c;
}

/// Built-in defaults per experiment kind; configs/<kind>.ini ships the same text.
inline ExperimentConfig default_config(const std::string& kind) {
    ExperimentConfig c;
    c.kind = kind;
    c.output_dir = "out/" + kind;
    if (kind == "envelope" || kind == "hym") {
        c.domain = DomainSpec{DomainKind::BidiscTube, 8};
        c.envelope_data = "ruling:3";
        c.k_list = {1};
    } else if (kind == "certify") {
        c.domain = DomainSpec{DomainKind::Annulus, 16};
    }
    return c;
}

inline std::string sha256_hex(const std::string& text) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorCode::IoFailure, "sha256 failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parallelism.

inline std::size_t thread_cap() {
    std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("KQ_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) cap = static_cast<std::size_t>(v);
        } catch (const std::exception&) {
        }
    }
    return cap;
}

/// Runs fn(i) for i < n on up to thread_cap() threads. The first exception
/// (by index) is rethrown after all workers finish.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(thread_cap(), n);
    std::vector<std::exception_ptr> errors(n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// ---------------------------------------------------------------------------
// Joint convexity of reduced potentials.

struct JointPshReport {
    double convexity_margin = 0.0;  // min second difference / |offset|^2
    double slope_margin = 0.0;      // min(min slope, 1 - max slope) along the fiber axis
    double worst() const { return std::min(convexity_margin, slope_margin); }
};

/// Discrete (base, fiber) admissibility of Psi(s, x) = softplus(x) + u(s, x)
/// on a product grid whose last axis is x.
inline JointPshReport joint_psh_margin(const ProductGrid& grid, std::size_t base_dims, const std::vector<double>& psi) {
    JointPshReport rep;
    rep.convexity_margin = std::numeric_limits<double>::infinity();
    const auto dirs = detail::compile(grid, build_directions(grid, StencilSpec{base_dims, 1, 0.0, 1}));
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto idx = grid.unravel(i);
        for (const auto& dir : dirs) {
            if (!detail::fits(grid, idx, dir.e)) continue;
            double len2 = 0.0;
            for (std::size_t d = 0; d < grid.dims(); ++d) {
                const double l = static_cast<double>(dir.e[d]) * grid.axis(d).step();
                len2 += l * l;
            }
            const double d2 = (detail::at(psi, i, dir.flat) - 2.0 * psi[i] + detail::at(psi, i, -dir.flat)) / len2;
            rep.convexity_margin = std::min(rep.convexity_margin, d2);
        }
    }
    const std::size_t f = grid.dims() - 1;
    const std::size_t nx = grid.axis(f).size();
    const double h = grid.axis(f).step();
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (i % nx + 1 == nx) continue;
        const double s = (psi[i + 1] - psi[i]) / h;
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    rep.slope_margin = std::min(lo, 1.0 - hi);
    if (!std::isfinite(rep.convexity_margin)) rep.convexity_margin = 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Convergence pipeline.

struct ConvergenceRow {
    int k = 0;
    double sup_error_N = 0.0;
    double sup_error_M = 0.0;
    double log_k_over_k = 0.0;
    double fitted_C = 0.0;
    double boundary_error = 0.0;
};

struct ConvergenceTable {
    std::vector<ConvergenceRow> rows;
    double fitted_C = 0.0;      // least squares of error on log(k)/k over k >= 2
    double bound_C = 0.0;       // max error / (log(k)/k) over k >= 2
    double fit_residual = 0.0;  // ||error - C log(k)/k|| / ||error||, M column
    std::string config_hash;
    double wall_seconds = 0.0;

    std::string csv() const {
        io::CsvBuilder b({"k", "sup_error_N", "sup_error_M", "log_k_over_k", "fitted_C"});
        for (const auto& r : rows) b.row({static_cast<double>(r.k), r.sup_error_N, r.sup_error_M, r.log_k_over_k, r.fitted_C});
        return b.str();
    }
};

namespace detail {

// Quantized annulus metric at t: D(t) = geometric interpolation of the dual
// Hilbert forms of the endpoints.
struct QuantizedAnnulus {
    int k = 1;
    HermitianForm d0, d1;

    QuantizedAnnulus(const ToricPotential& u0, const ToricPotential& u1, int k_)
        : k(k_), d0(dual(hilbert_map(u0, k_))), d1(dual(hilbert_map(u1, k_))) {}

    HermitianForm at(double t) const { return matrix_geodesic(d0, d1, t); }
};

inline void finish_table(ConvergenceTable& table) {
    std::vector<double> xs, ys;
    table.bound_C = 0.0;
    for (const auto& r : table.rows) {
        if (r.k < 2) continue;
        xs.push_back(r.log_k_over_k);
        ys.push_back(r.sup_error_M);
        table.bound_C = std::max({table.bound_C, r.sup_error_M / r.log_k_over_k, r.sup_error_N / r.log_k_over_k});
    }
    table.fitted_C = fit_through_origin(xs, ys);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        num += (ys[i] - table.fitted_C * xs[i]) * (ys[i] - table.fitted_C * xs[i]);
        den += ys[i] * ys[i];
    }
    table.fit_residual = den > 0.0 ? std::sqrt(num / den) : 0.0;
    for (auto& r : table.rows) r.fitted_C = table.fitted_C;
}

// Boundary weights for the tube: v_s sits on the toric geodesic from u0 to u1
// at parameter 4 s1 (1 - s1), so the two faces s1 = const carry u0 and the
// others sweep the geodesic.
inline double tube_weight(std::span<const double> s) { return 4.0 * s[0] * (1.0 - s[0]); }

}  // namespace detail

struct SemiclassicalRow {
    int k = 0;
    double worst_margin = 0.0;    // Griffiths-negative family
    double control_margin = 0.0;  // reversed-exponent control
};

struct ConvergenceRun {
    ConvergenceTable table;
    std::vector<SemiclassicalRow> semiclassical;
    GeodesicField geodesic;  // annulus reference
};

/// Annulus: u from solve_geodesic, U^k from the matrix geodesic of the dual
/// Hilbert forms (both envelopes coincide for one-dimensional bases).
/// Tube: k = 1 only; U^{M}, U^{N} from the Finsler envelopes, u from the
/// finite-difference Perron solver.
inline ConvergenceRun run_convergence(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    ConvergenceRun run;
    run.table.config_hash = sha256_hex(to_ini(cfg));
    run.table.rows.resize(cfg.k_list.size());
    run.semiclassical.resize(cfg.k_list.size());

    if (cfg.domain.kind == DomainKind::BidiscTube) {
        const UniformGrid xg = cfg.fiber_x_grid();
        const auto u0 = make_profile(cfg.profile0, xg);
        const auto u1 = make_profile(cfg.profile1, xg);
        const auto fam = [&](std::span<const double> s) { return interpolate_potentials(u0, u1, detail::tube_weight(s)); };
        HcmaOptions hopt;
        hopt.fiber_slope = cfg.fiber_slope;
        hopt.tol = cfg.tol.envelope;
        const auto ref = solve_hcma_fd(cfg.domain, fam, xg, hopt);
        const auto opt = cfg.envelope_options();
        const auto bg = background_metric(cfg.domain, HermitianForm::from_log_diagonal(std::vector<double>{0.0, 0.0}), cfg.strength, opt);
        const auto bnd = hermitian_boundary([&](std::span<const double> s) { return dual(hilbert_map(fam(s), 1)); });
        const auto m = perron_envelope(bg, bnd, opt);
        const auto n = perron_envelope_norms(bg, bnd, opt);
        ConvergenceRow row{1, 0.0, 0.0, 0.0, 0.0, 0.0};
        std::vector<double> psi_m(m.grid.size());
        for (std::size_t i = 0; i < m.grid.size(); ++i) {
            const double x = m.grid.coord(i, m.grid.dims() - 1);
            const double fm = 2.0 * m.log_metric(i) - softplus(x);
            const double fn = 2.0 * n.log_metric(i) - softplus(x);
            row.sup_error_M = std::max(row.sup_error_M, std::abs(fm - ref.u(i)));
            row.sup_error_N = std::max(row.sup_error_N, std::abs(fn - ref.u(i)));
            psi_m[i] = fm + softplus(x);
        }
        run.table.rows[0] = row;
        const auto rep = joint_psh_margin(m.grid, 2, psi_m);
        // reversed exponent: multiply the metric by e^{-rho}
        std::vector<double> psi_c(psi_m);
        for (std::size_t i = 0; i < psi_c.size(); ++i) {
            const std::array<double, 2> s{m.grid.coord(i, 0), m.grid.coord(i, 1)};
            psi_c[i] -= 2.0 * cfg.domain.rho(s);
        }
        run.semiclassical[0] = {1, rep.worst(), joint_psh_margin(m.grid, 2, psi_c).worst()};
    } else {
        const UniformGrid xg = cfg.x_grid();
        const auto u0 = make_profile(cfg.profile0, xg);
        const auto u1 = make_profile(cfg.profile1, xg);
        run.geodesic = solve_geodesic(u0, u1, cfg.t_intervals);
        const auto& geo = run.geodesic;
        const ProductGrid grid = geo.grid();
        parallel_for(cfg.k_list.size(), [&](std::size_t ik) {
            const int k = cfg.k_list[ik];
            const detail::QuantizedAnnulus q(u0, u1, k);
            ConvergenceRow row{k, 0.0, 0.0, k > 1 ? std::log(static_cast<double>(k)) / k : 0.0, 0.0, 0.0};
            std::vector<double> psi(grid.size()), psi_c(grid.size());
            std::vector<EvaluationCovector> cov;
            cov.reserve(xg.size());
            for (std::size_t i = 0; i < xg.size(); ++i) cov.push_back(evaluation_covector(xg.node(i), k));
            for (std::size_t it = 0; it < geo.slices.size(); ++it) {
                const double t = geo.t_grid.node(it);
                const auto dt = q.at(t);
                const std::array<double, 1> s{t};
                const double shift = -2.0 * cfg.domain.rho(s) / k;
                const bool edge = it == 0 || it + 1 == geo.slices.size();
                for (std::size_t i = 0; i < xg.size(); ++i) {
                    const double val = fs_star(dt, cov[i]);
                    const double err = std::abs(val - geo.slices[it].u(i));
                    row.sup_error_M = std::max(row.sup_error_M, err);
                    if (edge) {
                        // boundary attainment: U^k equals the quantized boundary data exactly
                        const auto& dv = it == 0 ? q.d0 : q.d1;
                        row.boundary_error = std::max(row.boundary_error, std::abs(val - fs_star(dv, cov[i])));
                    }
                    const std::size_t flat = it * xg.size() + i;
                    psi[flat] = val + softplus(xg.node(i));
                    psi_c[flat] = psi[flat] + shift;
                }
            }
            row.sup_error_N = row.sup_error_M;
            run.table.rows[ik] = row;
            run.semiclassical[ik] = {k, joint_psh_margin(grid, 1, psi).worst(), joint_psh_margin(grid, 1, psi_c).worst()};
        });
    }
    detail::finish_table(run.table);
    run.table.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

/// Joint (base, fiber) psh margins of FS*_k of the quantized family and of
/// the reversed-exponent control.
inline std::vector<SemiclassicalRow> run_semiclassical_psh_check(const ExperimentConfig& cfg) {
    return run_convergence(cfg).semiclassical;
}

// ---------------------------------------------------------------------------
// Certification families.

struct NamedCertificate {
    std::string name;
    bool expected_negative = true;
    CertificateReport report;
};

inline std::vector<NamedCertificate> run_certification(const ExperimentConfig& cfg) {
    CertifySpec spec;
    spec.domain = DomainSpec{DomainKind::Annulus, cfg.domain.base_intervals};
    spec.seed = cfg.seed;
    std::vector<NamedCertificate> out;
    auto euclid = [](std::span<const std::complex<double>> xi) {
        double n = 0.0;
        for (const auto& c : xi) n += std::norm(c);
        return std::sqrt(n);
    };
    // controls on the two fibers C^2
    spec.rank = 2;
    out.push_back({"control_exp_minus_abs2", false, certify_griffiths_negative([&](auto z, auto xi) {
                       return std::exp(-std::norm(z[0])) * euclid(xi);
                   }, spec)});
    out.push_back({"control_exp_plus_abs2", true, certify_griffiths_negative([&](auto z, auto xi) {
                       return std::exp(std::norm(z[0])) * euclid(xi);
                   }, spec)});

    std::mt19937 rng(cfg.seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::uniform_real_distribution<double> mag(0.2, 1.0);
    auto random_pd = [&](std::size_t r) {
        Eigen::MatrixXcd a(r, r);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < r; ++j) a(i, j) = {unif(rng), unif(rng)};
        }
        Eigen::MatrixXcd g = a * a.adjoint() + 0.3 * Eigen::MatrixXcd::Identity(r, r);
        return HermitianForm::from_matrix(g);
    };
    for (std::size_t f = 0; f < cfg.certify_families; ++f) {
        const std::size_t r = 2 + f % 2;
        const auto g0 = random_pd(r);
        const auto g1 = random_pd(r);
        const double c = (f % 4 < 2 ? 1.0 : -1.0) * mag(rng);
        spec.rank = r;
        spec.seed = cfg.seed + static_cast<unsigned>(f) + 1;
        const DomainSpec dom = spec.domain;
        MetricFamily fam = [&, dom, c](std::span<const std::complex<double>> z, std::span<const std::complex<double>> xi) {
            const auto s = dom.reduce(z);
            const std::array<double, 1> s1{s[0]};
            return std::exp(c * dom.rho(s1)) * matrix_geodesic(g0, g1, s[0])(xi);
        };
        out.push_back({"random_" + std::to_string(f), c > 0.0, certify_griffiths_negative(fam, spec)});
    }
    return out;
}

inline nlohmann::json certificate_json(const NamedCertificate& c) {
    return {{"name", c.name},
            {"expected_negative", c.expected_negative},
            {"margin_ii", c.report.margin_ii},
            {"margin_iii", c.report.margin_iii},
            {"margin_vi", c.report.margin_vi},
            {"radius", c.report.radius},
            {"points", c.report.points},
            {"sign_tol", c.report.sign_tol},
            {"signs_agree", c.report.signs_agree()},
            {"negative", c.report.negative()}};
}

// ---------------------------------------------------------------------------
// Envelope runs with their invariant suite.

struct Failure {
    std::string suite;
    std::string check;
    std::string detail;
    double value = 0.0;
    double tolerance = 0.0;
};

struct EnvelopeRun {
    BackgroundMetric background;
    EnvelopeGrid m, n, hym;
    double order_violation_nm = 0.0;   // max(N - M)
    double order_violation_mh = 0.0;   // max(M - HYM)
    double boundary_error = 0.0;       // max over boundary nodes of |envelope - data|
    double gap_mn = 0.0;               // max(M - N)
    DegeneracyStats degeneracy_m, degeneracy_hym;
    double quadratic_residual = 0.0;
};

inline FinslerBoundary envelope_boundary(const ExperimentConfig& cfg) {
    if (cfg.envelope_data.rfind("ruling:", 0) == 0) {
        // log-coefficients ruled along different base axes
        const double c = detail::parse_double(cfg.envelope_data.substr(7), "ruling");
        return hermitian_boundary([c](std::span<const double> s) {
            const double a = 2.0 * s[0] - 1.0;
            const double b = (s.size() > 1 ? 2.0 * s[1] - 1.0 : 0.0);
            return HermitianForm::from_log_diagonal(std::vector<double>{c * a * a, c * b * b});
        });
    }
    const UniformGrid xg = cfg.fiber_x_grid();
    auto u0 = std::make_shared<ToricPotential>(make_profile(cfg.profile0, xg));
    auto u1 = std::make_shared<ToricPotential>(make_profile(cfg.profile1, xg));
    const bool tube = cfg.domain.kind == DomainKind::BidiscTube;
    return hermitian_boundary([u0, u1, tube](std::span<const double> s) {
        const double w = tube ? detail::tube_weight(s) : s[0];
        return dual(hilbert_map(interpolate_potentials(*u0, *u1, w), 1));
    });
}

inline EnvelopeRun run_envelope(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto opt = cfg.envelope_options();
    EnvelopeRun run;
    run.background = background_metric(cfg.domain, HermitianForm::from_log_diagonal(std::vector<double>{0.0, 0.0}), cfg.strength, opt);
    const auto bnd = envelope_boundary(cfg);
    run.m = perron_envelope(run.background, bnd, opt);
    run.n = perron_envelope_norms(run.background, bnd, opt);
    run.hym = solve_hym(run.background, bnd);
    const auto data = detail::sample_finsler_boundary(run.background, bnd);
    run.order_violation_nm = run.order_violation_mh = run.gap_mn = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < run.m.grid.size(); ++i) {
        run.order_violation_nm = std::max(run.order_violation_nm, run.n.psi[i] - run.m.psi[i]);
        run.order_violation_mh = std::max(run.order_violation_mh, run.m.psi[i] - run.hym.psi[i]);
        run.gap_mn = std::max(run.gap_mn, run.m.psi[i] - run.n.psi[i]);
        if (cfg.domain.is_boundary(run.m.grid.unravel(i))) {
            for (const auto* e : {&run.m, &run.n, &run.hym}) {
                run.boundary_error = std::max(run.boundary_error, std::abs(e->log_metric(i) - data[i]));
            }
        }
    }
    const auto st = opt.stencil(cfg.domain.base_dims());
    run.degeneracy_m = envelope_degeneracy(run.m, st);
    run.degeneracy_hym = envelope_degeneracy(run.hym, st);
    run.quadratic_residual = quadratic_fit_residual(run.m);
    return run;
}

inline std::vector<Failure> envelope_invariants(const EnvelopeRun& r, const Tolerances& tol) {
    std::vector<Failure> f;
    auto check = [&](bool ok, const char* name, const char* detail, double value, double t) {
        if (!ok) f.push_back({"envelope", name, detail, value, t});
    };
    check(r.order_violation_nm <= tol.order, "order_N_le_M", "max(U^N - U^M)", r.order_violation_nm, tol.order);
    check(r.order_violation_mh <= tol.order, "order_M_le_HYM", "max(U^M - HYM)", r.order_violation_mh, tol.order);
    check(r.boundary_error <= tol.boundary, "boundary_attainment", "max boundary |envelope - data|", r.boundary_error, tol.boundary);
    check(r.degeneracy_m.median_abs <= tol.degenerate, "degenerate_envelope", "median |lambda_min| of U^M",
          r.degeneracy_m.median_abs, tol.degenerate);
    check(r.degeneracy_hym.median_abs >= tol.nondegenerate, "nondegenerate_barrier", "median |lambda_min| of HYM",
          r.degeneracy_hym.median_abs, tol.nondegenerate);
    return f;
}

// ---------------------------------------------------------------------------
// Emission.

struct RunOutput {
    std::map<std::string, std::string> files;  // relative name -> contents
    std::vector<Failure> failures;
    nlohmann::json summary = nlohmann::json::object();
};

/// Writes every file plus manifest.json (and failures.csv when a suite
/// failed). Returns 0, or 2 when any invariant failed.
inline int emit(const ExperimentConfig& cfg, const RunOutput& out, const std::filesystem::path& dir, double wall_seconds) {
    std::error_code ec;
    const bool existed = std::filesystem::exists(dir, ec);
    if (!existed && !std::filesystem::create_directories(dir, ec)) {
        throw Error(ErrorCode::IoFailure, "cannot create output directory " + dir.string());
    }
    for (const auto& [name, text] : out.files) io::write_text(dir / name, text);
    if (!out.failures.empty()) {
        io::CsvBuilder b({"suite", "check", "detail", "value", "tolerance"});
        for (const auto& f : out.failures) b.raw_row({f.suite, f.check, f.detail, io::number(f.value), io::number(f.tolerance)});
        io::write_text(dir / "failures.csv", b.str());
    }
    const std::string ini = to_ini(cfg);
    nlohmann::json manifest = {
        {"version", kVersion},
        {"experiment", cfg.kind},
        {"config_hash", sha256_hex(ini)},
        {"config", ini},
        {"grid",
         {{"domain", to_string(cfg.domain.kind)},
          {"base_intervals", cfg.domain.base_intervals},
          {"x_intervals", cfg.x_intervals},
          {"t_intervals", cfg.t_intervals},
          {"fiber_intervals", cfg.fiber_intervals},
          {"fiber_half_width", cfg.fiber_half_width},
          {"fiber_slope", cfg.fiber_slope}}},
        {"tolerances",
         {{"envelope", cfg.tol.envelope},
          {"boundary", cfg.tol.boundary},
          {"order", cfg.tol.order},
          {"psh", cfg.tol.psh},
          {"degenerate", cfg.tol.degenerate},
          {"nondegenerate", cfg.tol.nondegenerate}}},
        {"k_list", cfg.k_list},
        {"wall_seconds", wall_seconds},
        {"threads", thread_cap()},
        {"output_dir_created", !existed},
        {"files", nlohmann::json::array()},
        {"failures", out.failures.size()},
        {"summary", out.summary},
    };
    for (const auto& [name, text] : out.files) manifest["files"].push_back(name);
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return out.failures.empty() ? 0 : 2;
}

/// Runs one experiment and returns its output (no files written).
inline RunOutput run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    RunOutput out;
    const auto& kind = cfg.kind;
    if (kind == "geodesic") {
        const auto xg = cfg.x_grid();
        const auto u0 = make_profile(cfg.profile0, xg);
        const auto u1 = make_profile(cfg.profile1, xg);
        const auto geo = solve_geodesic(u0, u1, cfg.t_intervals);
        out.files["geodesic.csv"] = io::geodesic_csv(geo);
        const auto energies = slice_energies(geo);
        io::CsvBuilder b({"t", "energy"});
        double affine_dev = 0.0;
        for (std::size_t i = 0; i < energies.size(); ++i) {
            const double t = geo.t_grid.node(i);
            b.row({t, energies[i]});
            affine_dev = std::max(affine_dev, std::abs(energies[i] - ((1.0 - t) * energies.front() + t * energies.back())));
        }
        out.files["energy.csv"] = b.str();
        out.summary["energy_affine_deviation"] = affine_dev;
        for (std::size_t i = 0; i < geo.slices.size(); ++i) {
            const auto rep = check_admissible(geo.slices[i]);
            if (!rep.ok()) {
                out.failures.push_back({"geodesic", "slice_admissible", "slice " + std::to_string(i),
                                        std::min(rep.min_second_difference, rep.min_slope), kTolConvex});
            }
        }
    } else if (kind == "quantize") {
        const auto xg = cfg.x_grid();
        io::CsvBuilder gaps({"profile", "k", "lower", "upper", "modulus"});
        for (std::size_t p = 0; p < cfg.gap_profiles.size(); ++p) {
            const auto v = make_profile(cfg.gap_profiles[p], xg);
            for (int k : cfg.k_list) {
                const auto g = hilbert_map(v, k);
                const auto prof = fs_profile(g, k, xg);
                const auto gap = fs_hilb_gap(v, k);
                gaps.row({static_cast<double>(p), static_cast<double>(k), gap.lower, gap.upper, modulus_of_continuity(v, 1.0 / k)});
                const std::string tag = "p" + std::to_string(p) + "_k" + std::to_string(k);
                out.files["hilbert_" + tag + ".csv"] = io::form_csv(g);
                out.files["fs_" + tag + ".csv"] = io::potential_csv(prof);
                const auto rep = check_admissible(prof);
                if (!rep.ok()) out.failures.push_back({"quantize", "fs_image_admissible", tag, rep.min_second_difference, kTolConvex});
                double krw = 0.0;
                const auto d = dual(g);
                for (std::size_t i = 0; i < xg.size(); i += 8) {
                    const auto c = evaluation_covector(xg.node(i), k);
                    krw = std::max(krw, std::abs(fs(g, c) - fs_star(d, c)));
                }
                if (krw > 1e-10) out.failures.push_back({"quantize", "fs_equals_fs_star_dual", tag, krw, 1e-10});
            }
        }
        out.files["gaps.csv"] = gaps.str();
        nlohmann::json names = cfg.gap_profiles;
        out.summary["profiles"] = names;
    } else if (kind == "envelope" || kind == "hym") {
        const auto run = run_envelope(cfg);
        if (kind == "envelope") {
            out.files["envelope_M.csv"] = io::envelope_csv(run.m);
            out.files["envelope_N.csv"] = io::envelope_csv(run.n);
        }
        out.files["hym.csv"] = io::envelope_csv(run.hym);
        out.failures = envelope_invariants(run, cfg.tol);
        out.summary = {{"gap_M_minus_N", run.gap_mn},
                       {"quadratic_fit_residual", run.quadratic_residual},
                       {"boundary_error", run.boundary_error},
                       {"degeneracy_M", run.degeneracy_m.median_abs},
                       {"degeneracy_HYM", run.degeneracy_hym.median_abs},
                       {"clamp_active", run.m.clamp_active},
                       {"max_clamp", run.m.max_clamp},
                       {"background_margin", run.background.certificate_margin},
                       {"norm_alternations", run.n.alternations}};
    } else if (kind == "converge") {
        const auto run = run_convergence(cfg);
        out.files["convergence.csv"] = run.table.csv();
        io::CsvBuilder b({"k", "worst_margin", "control_margin"});
        for (std::size_t i = 0; i < run.semiclassical.size(); ++i) {
            const auto& s = run.semiclassical[i];
            b.row({static_cast<double>(s.k), s.worst_margin, s.control_margin});
            if (s.worst_margin < -cfg.tol.psh) {
                out.failures.push_back({"semiclassical", "joint_psh", "k=" + std::to_string(s.k), s.worst_margin, cfg.tol.psh});
            }
            if (s.control_margin >= -cfg.tol.psh) {
                out.failures.push_back({"semiclassical", "control_detected", "k=" + std::to_string(s.k), s.control_margin, cfg.tol.psh});
            }
            const auto& r = run.table.rows[i];
            if (r.sup_error_N > r.sup_error_M + cfg.tol.order) {
                out.failures.push_back({"converge", "N_le_M", "k=" + std::to_string(r.k), r.sup_error_N - r.sup_error_M, cfg.tol.order});
            }
            if (r.boundary_error > cfg.tol.boundary) {
                out.failures.push_back({"converge", "boundary_attainment", "k=" + std::to_string(r.k), r.boundary_error, cfg.tol.boundary});
            }
        }
        out.files["semiclassical.csv"] = b.str();
        out.summary = {{"fitted_C", run.table.fitted_C},
                       {"bound_C", run.table.bound_C},
                       {"fit_residual", run.table.fit_residual},
                       {"config_hash", run.table.config_hash}};
    } else if (kind == "certify") {
        const auto certs = run_certification(cfg);
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& c : certs) {
            arr.push_back(certificate_json(c));
            if (!c.report.signs_agree()) {
                out.failures.push_back({"certify", "sign_agreement", c.name,
                                        std::min({c.report.margin_ii, c.report.margin_iii, c.report.margin_vi}), c.report.sign_tol});
            } else if (c.report.negative() != c.expected_negative) {
                out.failures.push_back({"certify", "expected_classification", c.name, c.report.margin_iii, c.report.sign_tol});
            }
        }
        out.files["certificates.json"] = arr.dump(2) + "\n";
    }
    return out;
}

}  // namespace kq
