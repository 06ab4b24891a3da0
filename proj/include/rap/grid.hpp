#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

namespace rap {

struct RewardModel;  // defined in rau.hpp

// Cell safety classification. Ordering (safest to worst) for escalation
// rules is: sa < lr < hr < un. tg and cp are overlays, not risk levels.
enum class SafetyState : std::uint8_t {
  sa,  // safe
  lr,  // low risk
  hr,  // high risk
  un,  // unsafe / blocked
  tg,  // target
  cp,  // current ego position
};

// High-level lateral maneuvers. Every action advances one column; the
// lateral offset is +1 row (Left), 0 (Straight), -1 row (Right).
enum class Action : std::uint8_t { Left = 0, Straight = 1, Right = 2 };

inline constexpr int kNumActions = 3;

// Deterministic tie-break preference: Straight first, then Left, then Right.
inline constexpr std::array<Action, kNumActions> kActionPreference = {
    Action::Straight, Action::Left, Action::Right};

inline int row_offset(Action a) {
  switch (a) {
    case Action::Left: return 1;
    case Action::Right: return -1;
    default: return 0;
  }
}

struct CellId {
  int row = 0;
  int col = 0;
  friend bool operator==(const CellId&, const CellId&) = default;
};

// Rectangular occupancy window. Rows are lateral (row 0 at the lowest
// lateral ordinate), columns longitudinal. The first and last rows model
// the road edges. Window-local coordinates: x in [0, cols*cell_length),
// y in [-rows*cell_width/2, +rows*cell_width/2), so y = 0 lies on the
// centerline of the middle row for odd row counts.
struct GridGeometry {
  int rows = 0;
  int cols = 0;
  double cell_width = 0.0;   // lateral extent of one cell, meters
  double cell_length = 0.0;  // longitudinal extent of one cell, meters
  // Inclusive row ranges, one per lane, covering rows 1..rows-2 in order.
  std::vector<std::pair<int, int>> lane_rows;

  int n_cells() const { return rows * cols; }
  bool is_edge_row(int row) const { return row == 0 || row == rows - 1; }
  double y_min() const { return -0.5 * rows * cell_width; }

  int state_index(CellId c) const { return c.row * cols + c.col; }
  CellId cell_of(int state) const { return {state / cols, state % cols}; }

  bool contains(CellId c) const {
    return c.row >= 0 && c.row < rows && c.col >= 0 && c.col < cols;
  }

  // Center of a cell in window-local coordinates (x, y).
  std::pair<double, double> cell_center(CellId c) const {
    return {(c.col + 0.5) * cell_length,
            y_min() + (c.row + 0.5) * cell_width};
  }

  // Cell containing a window-local point; returns false when outside.
  bool cell_at(double x, double y, CellId& out) const;

  // Index of the lane containing `row`, or -1 for edge rows.
  int lane_of_row(int row) const;
};

// Validates dimensions and lane layout. `lane_sizes` lists the row count
// of each lane from the bottom; they must sum to rows - 2.
GridGeometry build_grid(int rows, int cols, double cell_width,
                        double cell_length, const std::vector<int>& lane_sizes);

// Intended successor: one column ahead, row shifted by the action offset,
// clamped to the grid. Cells in the last column are absorbing.
CellId next_cell(const GridGeometry& g, CellId c, Action a);

// Per-(state, action) successor distribution. Support is at most the three
// cells one column ahead; masses of row-clamped duplicates are merged.
struct TransitionModel {
  struct Outcome {
    int state;
    double p;
  };
  struct Support {
    std::array<Outcome, 3> entries;
    int count = 0;
  };

  double p_success = 1.0;
  int n_states = 0;
  std::vector<Support> table;  // indexed by state * kNumActions + action

  const Support& support(int state, Action a) const {
    return table[state * kNumActions + static_cast<int>(a)];
  }
};

// Builds the slip model: the intended successor receives p_success and the
// other two forward cells (1 - p_success) / 2 each, before clamping.
// Rejects p_success outside (0, 1].
TransitionModel make_transitions(const GridGeometry& g, double p_success);

// One planning window: geometry, slip model, discount, ego anchor, targets,
// and a handle to the reward model attached by the risk assessment stage.
struct LocalMdp {
  GridGeometry geometry;
  TransitionModel transitions;
  double gamma = 0.0;
  CellId ego_cell;
  std::vector<CellId> goal_cells;
  std::shared_ptr<const RewardModel> rewards;

  int n_states() const { return geometry.n_cells(); }
};

}  // namespace rap
