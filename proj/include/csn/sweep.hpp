#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "csn/data.hpp"
#include "csn/errors.hpp"
#include "csn/eval.hpp"
#include "csn/model.hpp"
#include "csn/random.hpp"
#include "csn/train.hpp"

namespace csn {

struct SweepCell {
  Variant variant = Variant::standard;
  std::size_t budget = 0;  // training triplets per condition
  std::uint64_t seed = 0;
  EvalReport report;
};

struct SweepTable {
  std::size_t n_conditions = 0;
  std::vector<SweepCell> cells;

  const SweepCell& at(Variant v, std::size_t budget) const {
    for (const auto& c : cells)
      if (c.variant == v && c.budget == budget) return c;
    throw IndexError("no sweep cell for " + std::string(to_string(v)) + " at budget " + std::to_string(budget));
  }

  /// Tab-separated table, one row per cell, errors printed round-trip exact.
  std::string to_tsv() const {
    std::ostringstream os;
    os << "variant\tbudget\tseed\terror";
    for (std::size_t c = 0; c < n_conditions; ++c) os << "\terror_c" << c;
    os << "\tn_triplets\n";
    char buf[64];
    auto num = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    for (const auto& cell : cells) {
      os << to_string(cell.variant) << '\t' << cell.budget << '\t' << cell.seed << '\t'
         << num(cell.report.overall_error);
      for (std::size_t c = 0; c < n_conditions; ++c) {
        const auto it = cell.report.per_condition_error.find(c);
        os << '\t' << (it == cell.report.per_condition_error.end() ? std::string("nan") : num(it->second));
      }
      os << '\t' << cell.report.n_triplets << '\n';
    }
    return os.str();
  }

  /// Variants ranked by mean error over budgets, best first.
  std::string summary() const {
    std::vector<std::pair<double, Variant>> ranking;
    std::vector<Variant> seen;
    for (const auto& cell : cells)
      if (std::find(seen.begin(), seen.end(), cell.variant) == seen.end()) seen.push_back(cell.variant);
    for (Variant v : seen) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& cell : cells)
        if (cell.variant == v) {
          sum += cell.report.overall_error;
          ++n;
        }
      ranking.emplace_back(sum / static_cast<double>(n), v);
    }
    std::stable_sort(ranking.begin(), ranking.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::ostringstream os;
    os << "rank  variant         mean error over budgets\n";
    char buf[96];
    for (std::size_t i = 0; i < ranking.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%-4zu  %-14s  %6.2f%%\n", i + 1, std::string(to_string(ranking[i].second)).c_str(),
                    100.0 * ranking[i].first);
      os << buf;
    }
    return os.str();
  }
};

/// The first `budget` training triplets of every condition. Budgets are
/// nested: a smaller budget's triplets are a prefix of a larger one's.
inline std::vector<Triplet> budget_prefix(std::span<const Triplet> pool, std::size_t n_conditions,
                                          std::size_t budget) {
  std::vector<std::size_t> taken(n_conditions, 0);
  std::vector<Triplet> out;
  for (const auto& t : pool) {
    if (t.condition >= n_conditions) throw ConfigError("triplet condition out of range");
    if (taken[t.condition] < budget) {
      ++taken[t.condition];
      out.push_back(t);
    }
  }
  for (std::size_t c = 0; c < n_conditions; ++c) {
    if (taken[c] < budget) {
      throw ConfigError("condition " + std::to_string(c) + " has " + std::to_string(taken[c]) +
                        " training triplets, budget needs " + std::to_string(budget));
    }
  }
  return out;
}

inline std::uint64_t sweep_cell_seed(std::uint64_t base, Variant v, std::size_t budget) {
  return derive_seed(base, {0x5EE9, static_cast<std::uint64_t>(v), budget});
}

/// Trains every (variant, budget) cell from scratch and scores it on the
/// shared test triplets. The template's variant and seed are overridden.
inline SweepTable budget_sweep(const TrainConfig& tmpl, const Dataset& ds, const Benchmark& bench,
                               const std::vector<std::size_t>& budgets, const std::vector<Variant>& variants,
                               std::uint64_t base_seed) {
  if (budgets.empty()) throw ConfigError("budget sweep needs at least one budget");
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    if (budgets[i] == 0) throw ConfigError("budgets must be positive");
    if (i > 0 && budgets[i] <= budgets[i - 1]) throw ConfigError("budgets must be strictly ascending");
  }
  if (variants.empty()) throw ConfigError("budget sweep needs at least one variant");
  SweepTable table;
  table.n_conditions = bench.conditions.size();
  for (Variant v : variants) {
    for (std::size_t budget : budgets) {
      TrainConfig cfg = tmpl;
      cfg.variant = v;
      cfg.seed = sweep_cell_seed(base_seed, v, budget);
      const auto train_set = budget_prefix(bench.train, table.n_conditions, budget);
      const auto result = train(cfg, ds, train_set, bench.val, table.n_conditions);
      table.cells.push_back({v, budget, cfg.seed, triplet_error(result.model, bench.test, ds)});
    }
  }
  return table;
}

}  // namespace csn
