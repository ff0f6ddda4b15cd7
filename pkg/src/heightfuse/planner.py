"""Occupancy grids and incremental shortest-path replanning.

The planner is D* Lite on an 8-connected grid: axis moves cost 1, diagonal
moves cost sqrt(2), and a diagonal may not cut a corner (both orthogonal
cells it brushes must be free). Edits to the occupancy grid repair the
solution incrementally; the repaired costs are identical to planning from
scratch, which the tests enforce against an independent Dijkstra.

An unreachable goal is an answer, not an error: plan() reports it in the
result so callers can treat "no path" as a navigation outcome.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import HeightMap

SQRT2 = math.sqrt(2.0)

# Tolerance for priority-key comparisons. True keys are a + b*SQRT2 with
# small integer a, b; distinct values differ by >= 2e-3 while float rounding
# shifts equal ones by ~1e-13, so anything in between works.
_KEY_EPS = 1e-9

# (dx, dy, cost); axis moves first so path reconstruction tie-breaks to them
MOTIONS = (
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, SQRT2),
    (1, -1, SQRT2),
    (-1, 1, SQRT2),
    (-1, -1, SQRT2),
)


class OccupancyGrid:
    """Boolean obstacle grid derived from heights at a flight altitude."""

    __slots__ = ("occupied", "width", "height")

    def __init__(self, occupied: np.ndarray):
        occ = np.asarray(occupied, dtype=bool)
        if occ.ndim != 2:
            raise ValueError("occupancy must be 2-D")
        self.occupied = occ
        self.height, self.width = occ.shape

    def is_free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and not self.occupied[y, x]

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.occupied.copy())


def occupancy(hmap: HeightMap, altitude_m: float, margin_m: float = 0.0) -> OccupancyGrid:
    """A cell blocks flight when its height reaches altitude - margin."""
    return OccupancyGrid(hmap.values >= (altitude_m - margin_m))


def path_cost(path: list) -> float:
    """Exact cost of an 8-connected path: axis steps + sqrt(2) * diagonals.

    Computed from step counts in one expression so equal-cost paths produce
    bit-identical floats.
    """
    n_axis = n_diag = 0
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        if abs(x1 - x0) + abs(y1 - y0) == 2:
            n_diag += 1
        else:
            n_axis += 1
    return n_axis + n_diag * SQRT2


@dataclass
class PlanResult:
    reachable: bool
    path: list          # [(x, y), ...] start..goal inclusive; [] if start == goal
    cost: float

    steps: int = field(init=False)

    def __post_init__(self):
        self.steps = max(len(self.path) - 1, 0)


def _octile(ax, ay, bx, by) -> float:
    dx, dy = abs(ax - bx), abs(ay - by)
    lo = dx if dx < dy else dy
    return (dx + dy) + (SQRT2 - 2.0) * lo


class PlanState:
    """D* Lite solver state bound to one occupancy grid instance.

    The grid array is owned by the state; apply_changes edits it and repairs
    the plan. Moving the start shifts the heuristic origin via the km bias.
    """

    def __init__(self, grid: OccupancyGrid, start, goal):
        if not grid.is_free(*start):
            raise ValueError("start cell is occupied or out of bounds")
        gx, gy = goal
        if not (0 <= gx < grid.width and 0 <= gy < grid.height):
            raise ValueError("goal cell is out of bounds")
        self.grid = grid
        self.start = tuple(start)
        self.goal = tuple(goal)
        self.km = 0.0
        self._last = self.start
        shape = (grid.height, grid.width)
        self.g = np.full(shape, np.inf)
        self.rhs = np.full(shape, np.inf)
        self.rhs[gy, gx] = 0.0
        self._heap = []
        self._push(self.goal)

    # -- primitives ---------------------------------------------------------

    def _key(self, cell):
        x, y = cell
        v = min(self.g[y, x], self.rhs[y, x])
        return (v + _octile(self.start[0], self.start[1], x, y) + self.km, v)

    def _push(self, cell):
        k = self._key(cell)
        heapq.heappush(self._heap, (k[0], k[1], cell[0], cell[1]))

    def _edge_cost(self, ux, uy, vx, vy, cost):
        occ = self.grid.occupied
        if occ[uy, ux] or occ[vy, vx]:
            return math.inf
        if ux != vx and uy != vy:
            # no corner cutting past either brushed cell
            if occ[uy, vx] or occ[vy, ux]:
                return math.inf
        return cost

    def _recompute_rhs(self, x, y):
        if (x, y) == self.goal:
            return
        best = math.inf
        w, h = self.grid.width, self.grid.height
        for dx, dy, c in MOTIONS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h:
                cc = self._edge_cost(x, y, nx, ny, c) + self.g[ny, nx]
                if cc < best:
                    best = cc
        self.rhs[y, x] = best

    def _update_vertex(self, x, y):
        if self.g[y, x] != self.rhs[y, x]:
            self._push((x, y))

    # -- core search --------------------------------------------------------

    def compute(self):
        heap = self._heap
        g, rhs = self.g, self.rhs
        w, h = self.grid.width, self.grid.height
        sx, sy = self.start
        while heap:
            k1, k2, x, y = heap[0]
            sk = self._key(self.start)
            if rhs[sy, sx] == g[sy, sx]:
                # Keys of the form a + b*sqrt(2) that are equal in exact
                # arithmetic can round one ulp apart, so ties need a band:
                # distinct key values sit >= 2e-3 apart on grids this size.
                if k1 > sk[0] + _KEY_EPS:
                    break
                if k1 >= sk[0] - _KEY_EPS and k2 >= sk[1] - _KEY_EPS:
                    break
            heapq.heappop(heap)
            cur = self._key((x, y))
            if (k1, k2) < cur:
                # stale entry for a cell whose key has worsened
                heapq.heappush(heap, (cur[0], cur[1], x, y))
                continue
            if g[y, x] == rhs[y, x]:
                continue  # logically removed: the cell is already consistent
            if g[y, x] > rhs[y, x]:
                g[y, x] = rhs[y, x]
                for dx, dy, _ in MOTIONS:
                    nx, ny = x + dx, y + dy
                    if 0 <= nx < w and 0 <= ny < h:
                        self._recompute_rhs(nx, ny)
                        self._update_vertex(nx, ny)
            else:
                g[y, x] = math.inf
                self._recompute_rhs(x, y)
                self._update_vertex(x, y)
                for dx, dy, _ in MOTIONS:
                    nx, ny = x + dx, y + dy
                    if 0 <= nx < w and 0 <= ny < h:
                        self._recompute_rhs(nx, ny)
                        self._update_vertex(nx, ny)
            sx, sy = self.start

    def extract_path(self) -> PlanResult:
        sx, sy = self.start
        if (sx, sy) == self.goal:
            return PlanResult(True, [], 0.0)
        if not np.isfinite(self.g[sy, sx]):
            return PlanResult(False, [], math.inf)
        path = [(sx, sy)]
        x, y = sx, sy
        w, h = self.grid.width, self.grid.height
        limit = w * h + 1
        while (x, y) != self.goal and len(path) <= limit:
            best = math.inf
            nxt = None
            for dx, dy, c in MOTIONS:
                nx, ny = x + dx, y + dy
                if 0 <= nx < w and 0 <= ny < h:
                    cc = self._edge_cost(x, y, nx, ny, c) + self.g[ny, nx]
                    if cc < best:
                        best = cc
                        nxt = (nx, ny)
            if nxt is None or not math.isfinite(best):
                return PlanResult(False, [], math.inf)
            x, y = nxt
            path.append(nxt)
        if (x, y) != self.goal:
            return PlanResult(False, [], math.inf)
        return PlanResult(True, path, path_cost(path))

    # -- public operations --------------------------------------------------

    def replan(self) -> PlanResult:
        self.compute()
        return self.extract_path()

    def apply_changes(self, changed_cells) -> None:
        """Toggle-aware repair: call after editing grid.occupied at the given
        cells. Each changed cell invalidates its own rhs and every neighbor's
        (diagonal edges between two neighbors brush the changed cell)."""
        w, h = self.grid.width, self.grid.height
        touched = set()
        for (x, y) in changed_cells:
            touched.add((x, y))
            for dx, dy, _ in MOTIONS:
                nx, ny = x + dx, y + dy
                if 0 <= nx < w and 0 <= ny < h:
                    touched.add((nx, ny))
        for (x, y) in touched:
            self._recompute_rhs(x, y)
            self._update_vertex(x, y)

    def move_start(self, new_start) -> None:
        if not self.grid.is_free(*new_start):
            raise ValueError("new start cell is occupied or out of bounds")
        self.km += _octile(self._last[0], self._last[1], new_start[0], new_start[1])
        self._last = tuple(new_start)
        self.start = tuple(new_start)


def plan(grid: OccupancyGrid, start, goal) -> PlanResult:
    """One-shot shortest path. See PlanState for the incremental interface."""
    state = PlanState(grid, start, goal)
    return state.replan()


def update_and_replan(state: PlanState, changed_cells) -> PlanResult:
    """Repair an existing plan after the listed occupancy cells flipped."""
    state.apply_changes(changed_cells)
    return state.replan()
