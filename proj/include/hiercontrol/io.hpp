#pragma once

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "field.hpp"

namespace hiercontrol {

/// Round-trip decimal form of a double. Negative zero prints as 0 so that
/// sign-of-zero noise never changes a CSV byte.
inline std::string format_number(double v) {
    if (v == 0.0) return "0";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Header plus rows of numbers, comma separated, '\n' line ends.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : cols_(header.size()) {
        for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
        out_ << '\n';
    }

    void row(const std::vector<double>& vals) {
        for (std::size_t i = 0; i < vals.size(); ++i) out_ << (i ? "," : "") << format_number(vals[i]);
        out_ << '\n';
    }

    /// Leading text cell followed by numbers.
    void row(const std::string& label, const std::vector<double>& vals) {
        out_ << label;
        for (double v : vals) out_ << ',' << format_number(v);
        out_ << '\n';
    }

    std::string str() const { return out_.str(); }
    std::size_t columns() const { return cols_; }

private:
    std::ostringstream out_;
    std::size_t cols_;
};

/// Every time level of a field as rows (n, t, j, x, value).
inline std::string field_csv(const Field& f, const SpaceTimeGrid& g) {
    CsvWriter w({"n", "t", "j", "x", "value"});
    for (int n = 0; n <= g.Nt; ++n)
        for (int j = 0; j < g.nodes(); ++j)
            w.row({static_cast<double>(n), g.t(n), static_cast<double>(j), g.x(j), f(n, j)});
    return w.str();
}

/// Inverse of field_csv on the same grid. Throws ConfigError on a shape or
/// index mismatch.
inline Field read_field_csv(const std::string& path, const SpaceTimeGrid& g, Staging st = Staging::Forward) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path, "cannot open field CSV");
    std::string line;
    std::getline(in, line);
    Field f(g, st);
    std::vector<char> seen(f.data().size(), 0);
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(ss, cell, ',')) {
            // strtod rather than stod: subnormals written by format_number must read back.
            char* end = nullptr;
            const double x = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end != cell.c_str() + cell.size())
                throw ConfigError(path + ":" + std::to_string(row), "not a number: '" + cell + "'");
            v.push_back(x);
        }
        if (v.size() != 5) throw ConfigError(path + ":" + std::to_string(row), "expected 5 columns (n,t,j,x,value)");
        const int n = static_cast<int>(v[0]), j = static_cast<int>(v[2]);
        if (n < 0 || n > g.Nt || j < 0 || j >= g.nodes())
            throw ConfigError(path + ":" + std::to_string(row), "index outside the configured grid");
        f(n, j) = v[4];
        seen[static_cast<std::size_t>(n * g.nodes() + j)] = 1;
    }
    for (char s : seen)
        if (!s) throw ConfigError(path, "field CSV does not cover every (n, j) of the configured grid");
    return f;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError(path, "cannot write output file");
    out << text;
}

}  // namespace hiercontrol
