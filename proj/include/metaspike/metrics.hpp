#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "metaspike/errors.hpp"

// Tabular run metrics and their CSV form. Numbers are written with
// round-trip precision so a parsed file reproduces the in-memory record
// exactly; wall-clock time lives outside the table to keep re-runs
// byte-identical.

namespace metaspike::harness {

struct MetricsRecord {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
    double wall_clock_s = 0; // not serialized into the CSV

    void add_row(std::vector<std::string> row) {
        if (row.size() != columns.size()) throw StructuralError("metrics row width mismatch");
        rows.push_back(std::move(row));
    }

    std::vector<double> column_values(const std::string& name) const {
        std::size_t ci = columns.size();
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) ci = i;
        if (ci == columns.size()) throw StructuralError("no metrics column '" + name + "'");
        std::vector<double> out;
        for (const auto& r : rows) out.push_back(std::stod(r[ci]));
        return out;
    }

    bool operator==(const MetricsRecord& o) const { return columns == o.columns && rows == o.rows; }
};

inline std::string format_metric(double v) {
    std::ostringstream oss;
    oss.precision(17);
    oss << v;
    return oss.str();
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0;
    const double m = mean_of(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::string to_csv(const MetricsRecord& m) {
    std::ostringstream out;
    for (std::size_t i = 0; i < m.columns.size(); ++i) out << (i ? "," : "") << m.columns[i];
    out << "\n";
    for (const auto& r : m.rows) {
        for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
        out << "\n";
    }
    return out.str();
}

inline MetricsRecord from_csv(const std::string& text) {
    MetricsRecord m;
    std::istringstream in(text);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.push_back("");
        if (header) {
            m.columns = std::move(cells);
            header = false;
        } else {
            if (cells.size() != m.columns.size())
                throw FormatError("CSV row has " + std::to_string(cells.size()) + " cells, expected " +
                                  std::to_string(m.columns.size()));
            m.rows.push_back(std::move(cells));
        }
    }
    if (m.columns.empty()) throw FormatError("empty CSV");
    return m;
}

inline void save_metrics(const MetricsRecord& m, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    f << to_csv(m);
}

inline MetricsRecord load_metrics(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_csv(text);
}

}  // namespace metaspike::harness
