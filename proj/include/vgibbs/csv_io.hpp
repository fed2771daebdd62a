#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "vgibbs/dataset.hpp"

namespace vgibbs {

/// Shortest decimal representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline double parse_double(std::string_view field, long row) {
    double v = 0.0;
    if (!field.empty() && field.front() == '+') field.remove_prefix(1);
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size())
        throw ParseError("csv: unparseable number '" + std::string(field) + "' in row " + std::to_string(row), row);
    return v;
}

}  // namespace detail

/// Header row x0..x{d-1}; missing entries are empty fields.
inline void write_csv(std::ostream& os, const IncompleteDataset& data) {
    for (Index j = 0; j < data.cols(); ++j) os << (j ? "," : "") << 'x' << j;
    os << '\n';
    for (Index i = 0; i < data.rows(); ++i) {
        for (Index j = 0; j < data.cols(); ++j) {
            if (j) os << ',';
            if (data.observed(i, j)) os << format_double(data.values()(i, j));
        }
        os << '\n';
    }
}

inline void write_table_csv(std::ostream& os, const Table& t) {
    for (Index j = 0; j < t.cols(); ++j) os << (j ? "," : "") << 'x' << j;
    os << '\n';
    for (Index i = 0; i < t.rows(); ++i) {
        for (Index j = 0; j < t.cols(); ++j) os << (j ? "," : "") << format_double(t(i, j));
        os << '\n';
    }
}

inline void write_mask_csv(std::ostream& os, const Mask& mask) {
    for (Index j = 0; j < mask.cols(); ++j) os << (j ? "," : "") << 'x' << j;
    os << '\n';
    for (Index i = 0; i < mask.rows(); ++i) {
        for (Index j = 0; j < mask.cols(); ++j) os << (j ? "," : "") << (mask(i, j) ? '1' : '0');
        os << '\n';
    }
}

/// Parses a CSV with a header row. Data rows are numbered from 1 in errors.
inline IncompleteDataset read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw ParseError("csv: missing header row", 0);
    const auto d = static_cast<Index>(detail::split_fields(detail::trim(line)).size());
    std::vector<double> values;
    std::vector<bool> mask;
    long row = 0;
    while (std::getline(is, line)) {
        const auto trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        ++row;
        const auto fields = detail::split_fields(trimmed);
        if (static_cast<Index>(fields.size()) != d)
            throw ParseError("csv: row " + std::to_string(row) + " has " + std::to_string(fields.size()) + " fields, expected " +
                                 std::to_string(d),
                             row);
        for (auto f : fields) {
            f = detail::trim(f);
            if (f.empty()) {
                values.push_back(kMissing);
                mask.push_back(false);
            } else {
                values.push_back(detail::parse_double(f, row));
                mask.push_back(true);
            }
        }
    }
    const Index n = row;
    Table t(n, d);
    Mask m(n, d);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < d; ++j) {
            t(i, j) = values[static_cast<std::size_t>(i * d + j)];
            m(i, j) = mask[static_cast<std::size_t>(i * d + j)];
        }
    for (Index i = 0; i < n; ++i)
        if (!m.row(i).any()) throw ParseError("csv: row " + std::to_string(i + 1) + " has no observed entries", i + 1);
    return IncompleteDataset(t, m);
}

inline Mask read_mask_csv(std::istream& is) {
    const IncompleteDataset raw = read_csv(is);
    Mask m(raw.rows(), raw.cols());
    for (Index i = 0; i < raw.rows(); ++i)
        for (Index j = 0; j < raw.cols(); ++j) {
            const double v = raw.values()(i, j);
            if (v != 0.0 && v != 1.0) throw ParseError("mask csv: entries must be 0 or 1", i + 1);
            m(i, j) = v == 1.0;
        }
    return m;
}

inline void write_csv(const std::string& path, const IncompleteDataset& data) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_csv(os, data);
}

inline IncompleteDataset read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_csv(is);
}

}  // namespace vgibbs
