// kq: batch driver for the geodesic, quantization, envelope and certification
// experiments. Exit codes: 0 ok, 1 usage or configuration error, 2 invariant
// failure (see failures.csv), 3 solver or I/O error.

#include <fmt/core.h>

#include <CLI11.hpp>
#include <chrono>
#include <optional>

#include "kq/kq.hpp"

namespace {

struct Flags {
    std::string config;
    std::string out;
    std::optional<std::size_t> resolution;
    std::string k_list;
    bool use_default = false;
};

kq::ExperimentConfig resolve(const std::string& kind, const Flags& f) {
    kq::ExperimentConfig cfg = kq::default_config(kind);
    if (!f.config.empty()) cfg = kq::parse_config(kq::io::read_text(f.config), cfg);
    cfg.kind = kind;
    if (!f.out.empty()) cfg.output_dir = f.out;
    if (f.resolution) {
        const std::size_t n = *f.resolution;
        if (kind == "envelope" || kind == "hym" || cfg.domain.kind == kq::DomainKind::BidiscTube) {
            cfg.domain.base_intervals = n;
            cfg.fiber_intervals = 4 * n;
        } else {
            cfg.x_intervals = n;
        }
    }
    if (!f.k_list.empty()) cfg = kq::parse_config("[quantize]\nk_list = " + f.k_list + "\n", cfg);
    cfg.validate();
    return cfg;
}

void report(const kq::ExperimentConfig& cfg, const kq::RunOutput& out) {
    fmt::print("{} on {} -> {}\n", cfg.kind, kq::to_string(cfg.domain.kind), cfg.output_dir);
    for (const auto& [name, _] : out.files) fmt::print("  wrote {}\n", name);
    if (!out.summary.empty()) fmt::print("  summary {}\n", out.summary.dump());
    if (cfg.kind == "converge") fmt::print("{}", out.files.at("convergence.csv"));
    for (const auto& f : out.failures) {
        fmt::print("  FAILED {}/{} ({}): {:.6g} vs tolerance {:.3g}\n", f.suite, f.check, f.detail, f.value, f.tolerance);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantized geodesics, Perron envelopes of Finsler metrics and their convergence"};
    app.require_subcommand(1);
    Flags flags;
    for (const auto& kind : kq::experiment_kinds()) {
        auto* sub = app.add_subcommand(kind, "run the " + kind + " experiment");
        auto* cfg_opt = sub->add_option("--config", flags.config, "INI configuration file")->check(CLI::ExistingFile);
        auto* def_opt = sub->add_flag("--default", flags.use_default, "use the built-in default battery");
        cfg_opt->excludes(def_opt);
        sub->add_option("--out", flags.out, "output directory");
        sub->add_option("--resolution", flags.resolution, "grid resolution (power of two)");
        sub->add_option("--k", flags.k_list, "comma separated k list");
    }
    CLI11_PARSE(app, argc, argv);
    const std::string kind = app.get_subcommands().front()->get_name();
    if (flags.config.empty() && !flags.use_default) {
        fmt::print(stderr, "{}: pass --config <path> or --default\n", kind);
        return 1;
    }
    kq::ExperimentConfig cfg;
    try {
        cfg = resolve(kind, flags);
    } catch (const kq::Error& e) {
        fmt::print(stderr, "configuration error: {}\n", e.what());
        return e.code() == kq::ErrorCode::InvalidConfig ? 1 : 3;
    }
    try {
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = kq::run_experiment(cfg);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const int code = kq::emit(cfg, out, cfg.output_dir, wall);
        report(cfg, out);
        return code;
    } catch (const kq::Error& e) {
        fmt::print(stderr, "{} failed: {}\n", kind, e.what());
        return 3;
    }
}
