#pragma once

// CSV serialization. Numbers are written with 17 significant digits so that
// a write/read round trip is exact; lines end in LF.

#include <fmt/format.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kq/error.hpp"
#include "kq/griffiths.hpp"
#include "kq/hcma.hpp"
#include "kq/quantize.hpp"
#include "kq/toric.hpp"

namespace kq::io {

inline std::string number(double v) { return fmt::format("{:.17g}", v); }

class CsvBuilder {
public:
    explicit CsvBuilder(const std::vector<std::string>& header) : cols_(header.size()) {
        for (std::size_t i = 0; i < header.size(); ++i) out_ += (i ? "," : "") + header[i];
        out_ += '\n';
    }

    void row(std::initializer_list<double> values) { row(std::vector<double>(values)); }

    void row(const std::vector<double>& values) {
        if (values.size() != cols_) throw Error(ErrorCode::IoFailure, "csv row width");
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (i) out_ += ',';
            out_ += number(values[i]);
        }
        out_ += '\n';
    }

    // mixed text/number rows (failures, labels)
    void raw_row(const std::vector<std::string>& cells) {
        if (cells.size() != cols_) throw Error(ErrorCode::IoFailure, "csv row width");
        for (std::size_t i = 0; i < cells.size(); ++i) out_ += (i ? "," : "") + cells[i];
        out_ += '\n';
    }

    const std::string& str() const { return out_; }

private:
    std::size_t cols_;
    std::string out_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline std::vector<std::vector<double>> parse_csv(const std::string& text, std::vector<std::string>& header) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::IoFailure, "empty csv");
    header.clear();
    {
        std::istringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) header.push_back(cell);
    }
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw Error(ErrorCode::IoFailure, "bad number '" + cell + "'");
            }
        }
        if (row.size() != header.size()) throw Error(ErrorCode::IoFailure, "csv row width");
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------

inline std::string potential_csv(const ToricPotential& v) {
    CsvBuilder b({"x", "psi"});
    for (std::size_t i = 0; i < v.size(); ++i) b.row({v.x(i), v.psi[i]});
    return b.str();
}

/// Reads `x,psi` rows; the nodes must be uniformly spaced.
inline ToricPotential parse_potential(const std::string& text) {
    std::vector<std::string> header;
    const auto rows = parse_csv(text, header);
    if (header != std::vector<std::string>{"x", "psi"}) throw Error(ErrorCode::IoFailure, "expected header x,psi");
    if (rows.size() < 3) throw Error(ErrorCode::IoFailure, "potential needs at least three nodes");
    const UniformGrid grid(rows.front()[0], rows.back()[0], rows.size() - 1);
    std::vector<double> psi(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (std::abs(rows[i][0] - grid.node(i)) > 1e-9 * (1.0 + std::abs(grid.node(i)))) {
            throw Error(ErrorCode::GridMismatch, "potential nodes are not uniform");
        }
        psi[i] = rows[i][1];
    }
    return ToricPotential::from_psi(grid, std::move(psi));
}

inline std::string geodesic_csv(const GeodesicField& g) {
    CsvBuilder b({"t", "x", "psi", "u"});
    for (std::size_t it = 0; it < g.slices.size(); ++it) {
        const auto& s = g.slices[it];
        for (std::size_t i = 0; i < s.size(); ++i) b.row({g.t_grid.node(it), s.x(i), s.psi[i], s.u(i)});
    }
    return b.str();
}

inline std::vector<std::string> base_header(const DomainSpec& dom) {
    if (dom.base_dims() == 1) return {"t"};
    return {"s1", "s2"};
}

inline std::string hcma_csv(const HcmaField& f) {
    auto header = base_header(f.domain);
    header.insert(header.end(), {"x", "psi", "u"});
    CsvBuilder b(header);
    std::vector<double> row(header.size());
    for (std::size_t i = 0; i < f.grid.size(); ++i) {
        for (std::size_t d = 0; d < f.grid.dims(); ++d) row[d] = f.grid.coord(i, d);
        row[f.grid.dims()] = f.psi[i];
        row[f.grid.dims() + 1] = f.u(i);
        b.row(row);
    }
    return b.str();
}

inline std::string form_csv(const HermitianForm& g) {
    if (g.is_diagonal()) {
        CsvBuilder b({"j", "log_g"});
        for (std::size_t j = 0; j < g.dim(); ++j) b.row({static_cast<double>(j), g.log_diagonal()[j]});
        return b.str();
    }
    CsvBuilder b({"i", "j", "re", "im"});
    const auto m = g.dense();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            b.row({static_cast<double>(i), static_cast<double>(j), m(i, j).real(), m(i, j).imag()});
        }
    }
    return b.str();
}

inline std::string envelope_csv(const EnvelopeGrid& e) {
    auto header = base_header(e.domain);
    const std::size_t nf = e.grid.dims() - e.base_dims();
    for (std::size_t j = 0; j < nf; ++j) header.push_back(nf == 1 ? "y" : "y" + std::to_string(j + 1));
    header.push_back("psi");
    CsvBuilder b(header);
    std::vector<double> row(header.size());
    for (std::size_t i = 0; i < e.grid.size(); ++i) {
        for (std::size_t d = 0; d < e.grid.dims(); ++d) row[d] = e.grid.coord(i, d);
        row[e.grid.dims()] = e.psi[i];
        b.row(row);
    }
    return b.str();
}

}  // namespace kq::io
