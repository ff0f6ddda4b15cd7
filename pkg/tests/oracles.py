"""Independent reference implementations the test suite checks against.

Every oracle recomputes its quantity by a deliberately different route from
the library: brute-force ray sampling instead of exact grid traversal,
per-keypoint loops instead of factored algebra, array relaxation instead of
a priority queue. Tests compare the two routes and the oracle wins any
disagreement until the discrepancy is understood.
"""

from __future__ import annotations

import math

import numpy as np

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# raycasting: quarter-cell sampling


def raycast_sampling(values: np.ndarray, cell_size: float, cells: np.ndarray,
                     dirs: np.ndarray) -> np.ndarray:
    """Brute-force directional distances, (len(cells), len(dirs)) in meters.

    Marches every ray in quarter-cell increments from the cell center and
    finds the first sample landing in an obstacle cell other than the origin
    cell itself. The reported distance is center to center, origin to that
    cell; rays that leave the map or find nothing get the full map diagonal.
    """
    hgt, wid = values.shape
    occ = values > 0.0
    diag = math.hypot(wid, hgt)
    steps = np.arange(1, int(4 * diag) + 3) * 0.25          # (S,) cell units

    cx = cells[:, 0].astype(np.float64)[:, None, None]      # (M, 1, 1)
    cy = cells[:, 1].astype(np.float64)[:, None, None]
    dx = dirs[:, 0][None, :, None]                          # (1, K, 1)
    dy = dirs[:, 1][None, :, None]
    px = cx + steps[None, None, :] * dx                     # (M, K, S)
    py = cy + steps[None, None, :] * dy
    ix = np.floor(px + 0.5).astype(np.int64)
    iy = np.floor(py + 0.5).astype(np.int64)

    inside = (ix >= 0) & (ix < wid) & (iy >= 0) & (iy < hgt)
    hit = np.zeros(inside.shape, dtype=bool)
    hit[inside] = occ[iy[inside], ix[inside]]
    hit &= (ix != cells[:, 0, None, None]) | (iy != cells[:, 1, None, None])
    # a straight ray leaves the rectangular map exactly once; samples past
    # the first outside one never matter, but mask them anyway for clarity
    hit &= np.cumprod(inside, axis=2, dtype=bool)

    any_hit = hit.any(axis=2)
    first = hit.argmax(axis=2)
    hx = np.take_along_axis(ix, first[:, :, None], axis=2)[:, :, 0]
    hy = np.take_along_axis(iy, first[:, :, None], axis=2)[:, :, 0]
    dist = np.hypot(hx - cells[:, 0, None], hy - cells[:, 1, None]) * cell_size
    dist[~any_hit] = cell_size * diag
    return dist


def sampling_directions(k: int) -> np.ndarray:
    """Evenly spaced unit directions, built independently of the library."""
    ang = 2.0 * math.pi * np.arange(k) / k
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def raycast_intervals(values: np.ndarray, cell_size: float, cells: np.ndarray,
                      dirs: np.ndarray) -> np.ndarray:
    """Exact directional distances by ray-square intersection, in meters.

    For every occupied cell, intersect the ray with the cell's unit square
    (slab method) and keep the earliest cell whose forward chord has strictly
    positive length. A ray that only touches a corner point has a degenerate
    chord and does not hit, which is exactly the corner behavior the sampler
    cannot resolve. Distances are center to center like the library's;
    misses get the full map diagonal.

    Unlike the quarter-cell sampler this route has no resolution limit, so
    it is the binding reference when the two disagree.
    """
    hgt, wid = values.shape
    obs = np.argwhere(values > 0.0)                         # (N, 2) as (y, x)
    m = cells.shape[0]
    out = np.full((m, dirs.shape[0]), cell_size * math.hypot(wid, hgt))
    if obs.size == 0:
        return out

    ox = cells[:, 0].astype(np.float64)[:, None]            # (M, 1)
    oy = cells[:, 1].astype(np.float64)[:, None]
    bx = obs[:, 1].astype(np.float64)[None, :]              # (1, N)
    by = obs[:, 0].astype(np.float64)[None, :]
    origin_cell = (bx == ox) & (by == oy)
    center_dist = np.hypot(bx - ox, by - oy) * cell_size    # (M, N)

    def slab(b, o, d):
        if d == 0.0:
            inside = np.abs(b - o) < 0.5
            lo = np.where(inside, -np.inf, np.inf)
            hi = np.where(inside, np.inf, -np.inf)
            return lo, hi
        t0 = (b - 0.5 - o) / d
        t1 = (b + 0.5 - o) / d
        return np.minimum(t0, t1), np.maximum(t0, t1)

    for j in range(dirs.shape[0]):
        dx, dy = float(dirs[j, 0]), float(dirs[j, 1])
        lox, hix = slab(bx, ox, dx)
        loy, hiy = slab(by, oy, dy)
        t_in = np.maximum(np.maximum(lox, loy), 0.0)
        t_out = np.minimum(hix, hiy)
        hit = (t_out > t_in) & ~origin_cell                 # (M, N)
        any_hit = hit.any(axis=1)
        first = np.where(hit, t_in, np.inf).argmin(axis=1)
        d = center_dist[np.arange(m), first]
        out[any_hit, j] = d[any_hit]
    return out


# ---------------------------------------------------------------------------
# shortest paths: min-plus relaxation to a fixpoint

# (dx, dy, is_diagonal)
_MOVES = tuple((dx, dy, dx != 0 and dy != 0)
               for dx in (-1, 0, 1) for dy in (-1, 0, 1)
               if (dx, dy) != (0, 0))


def dijkstra_cost(occupied: np.ndarray, start, goal) -> float:
    """From-scratch shortest-path cost on an 8-connected grid.

    Axis steps cost 1, diagonal steps sqrt(2), and a diagonal is forbidden
    when either cell it brushes is occupied. Costs are tracked as integer
    (axis, diagonal) step counts and materialized as n_axis + n_diag*sqrt(2),
    so any two runs that find the same step counts produce bit-identical
    floats; distinct exact costs can never collide because sqrt(2) is
    irrational. Returns inf when the goal is unreachable.
    """
    occ = np.asarray(occupied, dtype=bool)
    hgt, wid = occ.shape
    sx, sy = start
    gx, gy = goal
    if occ[sy, sx] or occ[gy, gx]:
        return math.inf
    if (sx, sy) == (gx, gy):
        return 0.0

    # unreached cells carry a huge step count instead of inf: candidates
    # built from them are always worse than their targets, so the plateau
    # is inert and never needs masking out
    big = np.int64(2) ** 40
    na = np.full((hgt, wid), big, dtype=np.int64)
    nd = np.full((hgt, wid), big, dtype=np.int64)
    val = na + nd * SQRT2
    na[sy, sx] = nd[sy, sx] = 0
    val[sy, sx] = 0.0

    moves = []
    for dx, dy, diagonal in _MOVES:
        tys = slice(max(dy, 0), hgt + min(dy, 0))
        txs = slice(max(dx, 0), wid + min(dx, 0))
        sys_ = slice(max(-dy, 0), hgt + min(-dy, 0))
        sxs = slice(max(-dx, 0), wid + min(-dx, 0))
        ok = ~occ[tys, txs]
        if diagonal:
            ok = ok & ~occ[sys_, txs] & ~occ[tys, sxs]
        moves.append((tys, txs, sys_, sxs,
                      0 if diagonal else 1, 1 if diagonal else 0, ok))

    for _ in range(hgt * wid):
        changed = False
        for tys, txs, sys_, sxs, ia, idg, ok in moves:
            na2 = na[sys_, sxs] + ia
            nd2 = nd[sys_, sxs] + idg
            cand = na2 + nd2 * SQRT2
            upd = ok & (cand < val[tys, txs])
            if upd.any():
                changed = True
                np.copyto(val[tys, txs], cand, where=upd)
                np.copyto(na[tys, txs], na2, where=upd)
                np.copyto(nd[tys, txs], nd2, where=upd)
        if not changed:
            break
    if na[gy, gx] >= big:
        return math.inf
    return float(val[gy, gx])


def path_is_valid(path: list, occupied: np.ndarray, start, goal) -> bool:
    """Collision-free, 8-connected, corner-safe, start-to-goal."""
    occ = np.asarray(occupied, dtype=bool)
    if not path:
        return start == goal
    if path[0] != tuple(start) or path[-1] != tuple(goal):
        return False
    for x, y in path:
        if occ[y, x]:
            return False
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        dx, dy = x1 - x0, y1 - y0
        if max(abs(dx), abs(dy)) != 1:
            return False
        if dx != 0 and dy != 0 and (occ[y0, x1] or occ[y1, x0]):
            return False
    return True


# ---------------------------------------------------------------------------
# attention: definition-based, one outer product per keypoint


def dam_reference(cell_features: np.ndarray, u_set: np.ndarray) -> np.ndarray:
    """Per-cell (C,) attention summary built exactly as defined.

    For each cell accumulate outer(feature, U_i) over keypoints into a
    (C, K) table, then take the max over the K columns. An empty keypoint
    set yields zeros.
    """
    g = np.asarray(cell_features, dtype=np.float64)
    u = np.asarray(u_set, dtype=np.float64)
    if u.size == 0:
        return np.zeros_like(g)
    out = np.empty_like(g)
    k = u.shape[1]
    for j in range(g.shape[0]):
        table = np.zeros((g.shape[1], k))
        for i in range(u.shape[0]):
            table += np.outer(g[j], u[i])
        out[j] = table.max(axis=1)
    return out


def offsets_reference(positions: np.ndarray, u_set: np.ndarray) -> np.ndarray:
    """Shared 3-vector offset, one outer product per keypoint."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    u = np.asarray(u_set, dtype=np.float64)
    if p.size == 0 or u.size == 0:
        return np.zeros(3)
    table = np.zeros((3, u.shape[1]))
    for i in range(p.shape[0]):
        table += np.outer(p[i], u[i])
    return table.max(axis=1)


# ---------------------------------------------------------------------------
# plain scalar loops


def l1_loop(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference by explicit double loop."""
    total = 0.0
    rows, cols = a.shape
    for y in range(rows):
        for x in range(cols):
            total += abs(float(a[y, x]) - float(b[y, x]))
    return total / (rows * cols)


def vg_weights_loop(distances: np.ndarray) -> np.ndarray:
    """Direction weights by explicit double loop over the definition."""
    d = np.asarray(distances, dtype=np.float64)
    k = d.shape[-1]
    out = np.zeros(k)
    for i in range(k):
        for j in range(k):
            out[i] += math.exp(-abs(d[i] - d[j]))
    return out
