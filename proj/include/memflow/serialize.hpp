#pragma once

#include "memflow/common.hpp"
#include "memflow/engine.hpp"
#include "memflow/grid.hpp"
#include "memflow/segment.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace memflow {

using json = nlohmann::json;

/// Shortest decimal that round-trips the double exactly (17 significant
/// digits always round-trip; this keeps CSV output bit-faithful).
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

inline double parse_double(const std::string& s) {
    // strtod handles subnormals (stod raises out_of_range on them)
    const char* begin = s.c_str();
    char* end = nullptr;
    double v = std::strtod(begin, &end);
    require(end == begin + s.size() && !s.empty(), ErrorKind::Io,
            "cannot parse number '" + s + "'");
    return v;
}

// ---------------------------------------------------------------------------
// CSV tables
// ---------------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

inline void write_csv(const std::filesystem::path& path, const CsvTable& table) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    for (std::size_t i = 0; i < table.header.size(); ++i)
        out << (i ? "," : "") << table.header[i];
    out << "\n";
    for (const auto& row : table.rows) {
        for (std::size_t i = 0; i < row.size(); ++i)
            out << (i ? "," : "") << format_double(row[i]);
        out << "\n";
    }
    require(out.good(), ErrorKind::Io, "write failed for '" + path.string() + "'");
}

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path.string() + "'");
    CsvTable table;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (first) {
            table.header = cells;
            first = false;
        } else {
            std::vector<double> row;
            row.reserve(cells.size());
            for (const std::string& c : cells) row.push_back(parse_double(c));
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

// ---------------------------------------------------------------------------
// Segments and trajectories
// ---------------------------------------------------------------------------

inline CsvTable segment_to_table(const WeightedSegment& xi) {
    CsvTable t;
    t.header.push_back("time");
    for (int c = 1; c <= xi.d(); ++c) t.header.push_back("x_" + std::to_string(c));
    for (long k = xi.n_nodes() - 1; k >= 0; --k) {
        std::vector<double> row;
        row.push_back(-static_cast<double>(k) * xi.h());
        auto v = xi.at_lag(k);
        for (int c = 0; c < xi.d(); ++c) row.push_back(v[c]);
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline json segment_to_json(const WeightedSegment& xi) {
    json values = json::array();
    for (long k = xi.n_nodes() - 1; k >= 0; --k) {
        json node = json::array();
        auto v = xi.at_lag(k);
        for (int c = 0; c < xi.d(); ++c) node.push_back(v[c]);
        values.push_back(std::move(node));
    }
    return json{{"tau", xi.tau()},
                {"h", xi.h()},
                {"T_hist", xi.t_hist()},
                {"tail", tail_policy_name(xi.tail_policy())},
                {"values", std::move(values)}};
}

inline WeightedSegment segment_from_json(const json& j) {
    require(j.is_object(), ErrorKind::Io, "segment JSON must be an object");
    double tau = j.at("tau").get<double>();
    double h = j.at("h").get<double>();
    const json& values = j.at("values");
    require(values.is_array() && !values.empty(), ErrorKind::Io, "segment values missing");
    int d = static_cast<int>(values.front().size());
    std::vector<double> flat;
    flat.reserve(values.size() * static_cast<std::size_t>(d));
    for (const json& node : values) {
        require(static_cast<int>(node.size()) == d, ErrorKind::Io,
                "segment nodes have mixed dimensions");
        for (const json& x : node) flat.push_back(x.get<double>());
    }
    TailPolicy tail = TailPolicy::ConstantExtension;
    if (j.contains("tail") && j.at("tail").get<std::string>() == "zero") tail = TailPolicy::Zero;
    return WeightedSegment(tau, h, d, std::move(flat), tail);
}

inline CsvTable trajectory_to_table(const Trajectory& traj) {
    CsvTable t;
    t.header.push_back("time");
    for (int c = 1; c <= traj.d(); ++c) t.header.push_back("x_" + std::to_string(c));
    const GridSpec& g = traj.grid();
    for (long i = -g.n_hist; i <= g.n_sim; ++i) {
        std::vector<double> row;
        row.push_back(g.time_at(i));
        auto v = traj.value(i);
        for (int c = 0; c < traj.d(); ++c) row.push_back(v[c]);
        t.rows.push_back(std::move(row));
    }
    return t;
}

/// Ensemble directory layout: manifest.json plus one trajectory CSV per
/// particle. The manifest records everything needed to reproduce the run.
inline void write_ensemble(const std::filesystem::path& dir, const EnsembleState& ens,
                           const json& model_echo, std::uint64_t master_seed) {
    std::filesystem::create_directories(dir);
    json manifest{{"model", model_echo},
                  {"grid",
                   {{"h", ens.grid().h},
                    {"T_hist", ens.grid().t_hist()},
                    {"T", ens.grid().t_sim()},
                    {"d", ens.d()}}},
                  {"M", ens.size()},
                  {"master_seed", master_seed},
                  {"mode", ens.mode() == EnsembleMode::Frozen ? "frozen" : "interacting"},
                  {"tau", ens.tau()}};
    std::ofstream mf(dir / "manifest.json");
    require(mf.good(), ErrorKind::Io, "cannot write manifest");
    mf << manifest.dump(2) << "\n";
    for (long i = 0; i < ens.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "traj_%05ld.csv", i);
        write_csv(dir / name, trajectory_to_table(ens.particle(i)));
    }
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out << j.dump(2) << "\n";
    require(out.good(), ErrorKind::Io, "write failed for '" + path.string() + "'");
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw Error(ErrorKind::Io, "invalid JSON in '" + path.string() + "': " + e.what());
    }
    return j;
}

}  // namespace memflow
