#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace soap::report {

// One accuracy cell of the defense-row x attack-column matrix.
struct Cell {
    std::string attack;   // no-atk, fgsm, pgd, l2-pgd, aux-aware(b), ...
    std::string defense;  // eps=0, eps=min-aux, eps=oracle*, ...
    double accuracy = 0.0;
    int n = 0;
};

void append_cells_csv(const std::string& path, const std::vector<Cell>& cells);
std::vector<Cell> read_cells_csv(const std::string& path);

// Markdown matrix with columns ordered No-Atk, FGSM, PGD, L2-PGD, then any
// further attacks in first-appearance order; missing cells render as an em
// dash. Later duplicates of a (attack, defense) pair win.
std::string markdown_table(const std::vector<Cell>& cells);

void write_manifest(const std::string& path, const std::string& config_text, uint64_t seed);

}  // namespace soap::report
