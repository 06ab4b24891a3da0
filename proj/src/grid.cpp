#include "rap/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rap {

bool GridGeometry::cell_at(double x, double y, CellId& out) const {
  const int col = static_cast<int>(std::floor(x / cell_length));
  const int row = static_cast<int>(std::floor((y - y_min()) / cell_width));
  CellId c{row, col};
  if (!contains(c)) return false;
  out = c;
  return true;
}

int GridGeometry::lane_of_row(int row) const {
  for (std::size_t i = 0; i < lane_rows.size(); ++i) {
    if (row >= lane_rows[i].first && row <= lane_rows[i].second)
      return static_cast<int>(i);
  }
  return -1;
}

GridGeometry build_grid(int rows, int cols, double cell_width,
                        double cell_length,
                        const std::vector<int>& lane_sizes) {
  if (rows < 3 || cols < 1)
    throw std::invalid_argument("build_grid: need at least 3 rows (two edges) and 1 column");
  if (cell_width <= 0.0 || cell_length <= 0.0)
    throw std::invalid_argument("build_grid: cell dimensions must be positive");
  if (lane_sizes.empty())
    throw std::invalid_argument("build_grid: at least one lane required");

  int total = 0;
  for (int s : lane_sizes) {
    if (s < 1) throw std::invalid_argument("build_grid: lane of non-positive size");
    total += s;
  }
  if (total != rows - 2)
    throw std::invalid_argument(
        "build_grid: lane sizes sum to " + std::to_string(total) +
        ", expected rows - 2 = " + std::to_string(rows - 2));

  GridGeometry g;
  g.rows = rows;
  g.cols = cols;
  g.cell_width = cell_width;
  g.cell_length = cell_length;
  int r = 1;
  for (int s : lane_sizes) {
    g.lane_rows.emplace_back(r, r + s - 1);
    r += s;
  }
  return g;
}

CellId next_cell(const GridGeometry& g, CellId c, Action a) {
  if (!g.contains(c)) throw std::invalid_argument("next_cell: cell outside grid");
  if (c.col == g.cols - 1) return c;  // absorbing last column
  const int row = std::clamp(c.row + row_offset(a), 0, g.rows - 1);
  return {row, c.col + 1};
}

TransitionModel make_transitions(const GridGeometry& g, double p_success) {
  if (!(p_success > 0.0 && p_success <= 1.0))
    throw std::invalid_argument("make_transitions: p_success must be in (0, 1]");

  TransitionModel m;
  m.p_success = p_success;
  m.n_states = g.n_cells();
  m.table.resize(static_cast<std::size_t>(m.n_states) * kNumActions);

  const double p_slip = (1.0 - p_success) / 2.0;
  for (int s = 0; s < m.n_states; ++s) {
    const CellId c = g.cell_of(s);
    for (int ai = 0; ai < kNumActions; ++ai) {
      const Action a = static_cast<Action>(ai);
      auto& sup = m.table[s * kNumActions + ai];
      if (c.col == g.cols - 1) {
        sup.entries[0] = {s, 1.0};
        sup.count = 1;
        continue;
      }
      auto add = [&](int state, double p) {
        if (p <= 0.0) return;
        for (int k = 0; k < sup.count; ++k) {
          if (sup.entries[k].state == state) {
            sup.entries[k].p += p;
            return;
          }
        }
        sup.entries[sup.count++] = {state, p};
      };
      add(g.state_index(next_cell(g, c, a)), p_success);
      for (int ao = 0; ao < kNumActions; ++ao) {
        if (ao == ai) continue;
        add(g.state_index(next_cell(g, c, static_cast<Action>(ao))), p_slip);
      }
    }
  }
  return m;
}

}  // namespace rap
