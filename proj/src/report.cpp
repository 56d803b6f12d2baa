#include "soap/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "soap/common.hpp"

namespace soap::report {

void append_cells_csv(const std::string& path, const std::vector<Cell>& cells) {
    const bool fresh = !std::ifstream(path).good();
    std::ofstream os(path, std::ios::app);
    require(os.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    if (fresh) os << "attack,defense,accuracy,n\n";
    char buf[160];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.6g,%d\n", c.attack.c_str(), c.defense.c_str(),
                      c.accuracy, c.n);
        os << buf;
    }
    require(os.good(), ErrorKind::Io, "write failed for '" + path + "'");
}

std::vector<Cell> read_cells_csv(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path + "'");
    std::vector<Cell> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "attack,defense,accuracy,n") continue;
        std::stringstream ss(line);
        Cell c;
        std::string acc, n;
        require(std::getline(ss, c.attack, ',') && std::getline(ss, c.defense, ',') &&
                    std::getline(ss, acc, ',') && std::getline(ss, n, ','),
                ErrorKind::Format,
                "'" + path + "' line " + std::to_string(lineno) + ": malformed cell row");
        c.accuracy = std::stod(acc);
        c.n = std::stoi(n);
        out.push_back(std::move(c));
    }
    return out;
}

std::string markdown_table(const std::vector<Cell>& cells) {
    static const std::vector<std::string> kFixedOrder = {"no-atk", "fgsm", "pgd", "l2-pgd"};
    std::vector<std::string> columns = kFixedOrder;
    std::vector<std::string> rows;
    for (const auto& c : cells) {
        if (std::find(columns.begin(), columns.end(), c.attack) == columns.end())
            columns.push_back(c.attack);
        if (std::find(rows.begin(), rows.end(), c.defense) == rows.end())
            rows.push_back(c.defense);
    }
    auto lookup = [&](const std::string& attack, const std::string& defense) -> const Cell* {
        const Cell* found = nullptr;
        for (const auto& c : cells)
            if (c.attack == attack && c.defense == defense) found = &c;
        return found;
    };
    static const std::vector<std::pair<std::string, std::string>> kHeads = {
        {"no-atk", "No-Atk"}, {"fgsm", "FGSM"}, {"pgd", "PGD"}, {"l2-pgd", "L2-PGD"}};
    auto heading = [&](const std::string& a) {
        for (const auto& [k, v] : kHeads)
            if (k == a) return v;
        return a;
    };
    std::string out = "| Defense |";
    for (const auto& col : columns) out += " " + heading(col) + " |";
    out += "\n|---|";
    for (size_t i = 0; i < columns.size(); ++i) out += "---|";
    out += "\n";
    char buf[64];
    for (const auto& row : rows) {
        out += "| " + row + " |";
        for (const auto& col : columns) {
            const Cell* c = lookup(col, row);
            if (!c) {
                out += " — |";
            } else {
                std::snprintf(buf, sizeof(buf), " %.2f |", c->accuracy * 100.0);
                out += buf;
            }
        }
        out += "\n";
    }
    return out;
}

void write_manifest(const std::string& path, const std::string& config_text, uint64_t seed) {
    std::ofstream os(path, std::ios::trunc);
    require(os.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(config_text)));
    os << "config_hash=" << buf << "\n";
    os << "seed=" << seed << "\n";
    os << "config:\n" << config_text;
    if (!config_text.empty() && config_text.back() != '\n') os << "\n";
    require(os.good(), ErrorKind::Io, "write failed for '" + path + "'");
}

}  // namespace soap::report
