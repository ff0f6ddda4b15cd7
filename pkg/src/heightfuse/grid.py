"""2.5D height maps and the grid geometry around them.

A height map is a dense grid of per-cell heights in meters. Ground is exactly
0 and anything above ground is an obstacle of that height. Maps are immutable
snapshots; every editing operation returns a new map. Coordinates are (x, y)
cell indices with x indexing columns and y indexing rows, and the backing
array is row-major, shape (height, width).
"""

from __future__ import annotations

import math
import struct
import warnings
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

# One disturbance quantum. Height edits move in whole multiples of this.
HEIGHT_STEP = 10.0

VGFM_MAGIC = b"VGFM"
VGFM_VERSION = 1

DISTURBANCE_KINDS = (
    "translation",
    "height_increase",
    "height_decrease",
    "dilation",
    "contraction",
    "creation",
    "deletion",
)


class HeightMap:
    """Immutable 2.5D height grid.

    Attributes:
        width: cell count along x.
        height: cell count along y.
        cell_size: edge length of one cell in meters.
        values: read-only float32 array, shape (height, width), meters.
    """

    __slots__ = ("width", "height", "cell_size", "values")

    def __init__(self, values, cell_size: float):
        arr = np.array(values, dtype=np.float32, copy=True)
        if arr.ndim != 2:
            raise ValueError("height map values must be 2-D")
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("height values must be finite and non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "height", arr.shape[0])
        object.__setattr__(self, "width", arr.shape[1])
        object.__setattr__(self, "cell_size", float(cell_size))

    def __setattr__(self, name, value):
        raise AttributeError("HeightMap is immutable")

    def __reduce__(self):
        # slots plus the setattr guard break default pickling; rebuild
        # through the constructor so copies re-validate like any other map
        return (HeightMap, (self.values, self.cell_size))

    @classmethod
    def zeros(cls, width: int, height: int, cell_size: float = 1.0) -> "HeightMap":
        return cls(np.zeros((height, width), dtype=np.float32), cell_size)

    def at(self, x: int, y: int) -> float:
        return float(self.values[y, x])

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def with_values(self, values) -> "HeightMap":
        return HeightMap(values, self.cell_size)

    def max_distance(self) -> float:
        """Sentinel distance for rays that never hit anything: the full map
        diagonal in meters."""
        return self.cell_size * math.hypot(self.width, self.height)

    def __repr__(self):
        return "HeightMap({}x{} cells, {} m/cell)".format(
            self.width, self.height, self.cell_size
        )


# ---------------------------------------------------------------------------
# serialization

def map_to_bytes(hmap: HeightMap) -> bytes:
    header = struct.pack(
        "<4sIIIf", VGFM_MAGIC, VGFM_VERSION, hmap.width, hmap.height, hmap.cell_size
    )
    return header + hmap.values.astype("<f4").tobytes()


def map_from_bytes(blob: bytes) -> HeightMap:
    head = struct.calcsize("<4sIIIf")
    if len(blob) < head:
        raise ValueError("truncated height map blob")
    magic, version, width, height, cell_size = struct.unpack("<4sIIIf", blob[:head])
    if magic != VGFM_MAGIC:
        raise ValueError("bad magic, not a height map file")
    if version != VGFM_VERSION:
        raise ValueError("unsupported height map version {}".format(version))
    expect = width * height * 4
    body = blob[head:]
    if len(body) != expect:
        raise ValueError("height map payload size mismatch")
    vals = np.frombuffer(body, dtype="<f4").reshape(height, width)
    return HeightMap(vals, cell_size)


def save_map(hmap: HeightMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(map_to_bytes(hmap))


def load_map(path) -> HeightMap:
    with open(path, "rb") as fh:
        return map_from_bytes(fh.read())


def save_map_text(hmap: HeightMap, path) -> None:
    """Plain-text grid, one row per line. First line: width height cell_size."""
    with open(path, "w") as fh:
        fh.write("{} {} {:.9g}\n".format(hmap.width, hmap.height, hmap.cell_size))
        for row in hmap.values:
            fh.write(" ".join("{:.9g}".format(v) for v in row) + "\n")


def load_map_text(path) -> HeightMap:
    with open(path) as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if not lines:
        raise ValueError("empty height map text file")
    head = lines[0].split()
    if len(head) != 3:
        raise ValueError("bad height map text header")
    width, height, cell_size = int(head[0]), int(head[1]), float(head[2])
    if len(lines) - 1 != height:
        raise ValueError("height map text row count mismatch")
    rows = []
    for ln in lines[1:]:
        row = [float(tok) for tok in ln.split()]
        if len(row) != width:
            raise ValueError("height map text column count mismatch")
        rows.append(row)
    return HeightMap(np.array(rows, dtype=np.float32), cell_size)


# ---------------------------------------------------------------------------
# metrics

def l1_error(a: HeightMap, b: HeightMap) -> float:
    """Mean absolute per-cell height difference in meters."""
    if a.values.shape != b.values.shape:
        raise ValueError("height map shapes differ")
    return float(np.mean(np.abs(a.values.astype(np.float64) - b.values.astype(np.float64))))


def accuracy_within(a: HeightMap, b: HeightMap, tol_m: float) -> float:
    """Fraction of cells whose heights agree within tol_m meters."""
    if a.values.shape != b.values.shape:
        raise ValueError("height map shapes differ")
    diff = np.abs(a.values.astype(np.float64) - b.values.astype(np.float64))
    return float(np.mean(diff <= tol_m))


# ---------------------------------------------------------------------------
# egocentric windows

class Heading(IntEnum):
    """Cardinal flight heading. Forward in the local window is always +y."""

    NORTH = 0  # forward = global +y
    EAST = 1   # forward = global +x
    SOUTH = 2  # forward = global -y
    WEST = 3   # forward = global -x


@dataclass(frozen=True)
class MapWindow:
    """Egocentric window placement on the global grid.

    The observer sits at local cell (size // 2, 0) looking along local +y.
    All four headings are exact cell permutations of the global grid.
    """

    origin: tuple  # global (x, y) cell of the observer
    heading: Heading
    size: int = 20

    @property
    def anchor(self) -> tuple:
        return (self.size // 2, 0)


def window_index_maps(window: MapWindow, global_w: int, global_h: int):
    """Global (gx, gy) indices for every local window cell.

    Returns (gx, gy, inside) arrays of shape (size, size) indexed [ly, lx];
    inside marks cells that land on the global grid.
    """
    n = window.size
    c = n // 2
    ox, oy = window.origin
    ly, lx = np.mgrid[0:n, 0:n]
    u = lx - c  # right of forward
    v = ly      # along forward
    h = window.heading
    if h == Heading.NORTH:
        gx, gy = ox + u, oy + v
    elif h == Heading.EAST:
        gx, gy = ox + v, oy - u
    elif h == Heading.SOUTH:
        gx, gy = ox - u, oy - v
    elif h == Heading.WEST:
        gx, gy = ox - v, oy + u
    else:
        raise ValueError("unknown heading {}".format(h))
    inside = (gx >= 0) & (gx < global_w) & (gy >= 0) & (gy < global_h)
    return gx, gy, inside


def global_to_local(window: MapWindow, gx, gy):
    """Inverse of the window transform. Returns (lx, ly), not bounds-checked."""
    c = window.size // 2
    ox, oy = window.origin
    gx = np.asarray(gx)
    gy = np.asarray(gy)
    h = window.heading
    if h == Heading.NORTH:
        u, v = gx - ox, gy - oy
    elif h == Heading.EAST:
        u, v = oy - gy, gx - ox
    elif h == Heading.SOUTH:
        u, v = ox - gx, oy - gy
    elif h == Heading.WEST:
        u, v = gy - oy, ox - gx
    else:
        raise ValueError("unknown heading {}".format(h))
    return u + c, v


def extract_window(gmap: HeightMap, window: MapWindow) -> HeightMap:
    """Cut the egocentric window out of a global map. Off-map cells read 0."""
    gx, gy, inside = window_index_maps(window, gmap.width, gmap.height)
    out = np.zeros((window.size, window.size), dtype=np.float32)
    out[inside] = gmap.values[gy[inside], gx[inside]]
    return HeightMap(out, gmap.cell_size)


def merge_window(gmap: HeightMap, local: HeightMap, window: MapWindow) -> HeightMap:
    """Write a window back into a global map. Off-map cells are dropped."""
    if local.values.shape != (window.size, window.size):
        raise ValueError("window payload shape mismatch")
    gx, gy, inside = window_index_maps(window, gmap.width, gmap.height)
    out = np.array(gmap.values, copy=True)
    out[gy[inside], gx[inside]] = local.values[inside]
    return HeightMap(out, gmap.cell_size)


# ---------------------------------------------------------------------------
# directional raycasting

def ray_directions(k: int) -> np.ndarray:
    """Unit direction vectors at angles 2*pi*i/k from +x toward +y.

    When k is a multiple of 4 the vectors are built from one quadrant and
    rotated, so mirrored directions share bit-identical components. That keeps
    axis rays exactly axis-aligned and diagonal rays exactly on the diagonal.
    """
    if k <= 0:
        raise ValueError("need at least one direction")
    if k % 4:
        ang = 2.0 * np.pi * np.arange(k) / k
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    quarter = k // 4
    first = []
    for r in range(quarter):
        if 2 * r == quarter:
            c = s = math.sqrt(0.5)
        elif 2 * r > quarter:
            s, c = first[quarter - r]
        else:
            a = 2.0 * math.pi * r / k
            c, s = math.cos(a), math.sin(a)
        first.append((c, s))
    dirs = []
    for q in range(4):
        for c, s in first:
            if q == 1:
                c, s = -s, c
            elif q == 2:
                c, s = -c, -s
            elif q == 3:
                c, s = s, -c
            dirs.append((c + 0.0, s + 0.0))
    return np.array(dirs, dtype=np.float64)


def trace_rays(values: np.ndarray, cx: np.ndarray, cy: np.ndarray,
               dx: np.ndarray, dy: np.ndarray):
    """Flat-batch grid traversal from cell centers.

    values: (H, W) heights. cx, cy: integer origin cells, one per ray.
    dx, dy: ray directions. Returns (hit_x, hit_y, hit_mask). Rays start at
    cell centers and step cell boundary to cell boundary; when a ray crosses a
    corner exactly it steps diagonally. The origin cell itself never counts as
    a hit: distances describe the structure around a point, and a query from
    inside an obstacle should still see its surroundings.
    """
    hgt, wid = values.shape
    occ = values > 0.0
    cx = cx.astype(np.int64).copy()
    cy = cy.astype(np.int64).copy()

    nrays = cx.size
    with np.errstate(divide="ignore"):
        tdx = np.where(dx != 0.0, 1.0 / np.abs(dx), np.inf)
        tdy = np.where(dy != 0.0, 1.0 / np.abs(dy), np.inf)
    # origin sits at the cell center, half a cell from every boundary
    tmx = 0.5 * tdx
    tmy = 0.5 * tdy
    sx = np.sign(dx).astype(np.int64)
    sy = np.sign(dy).astype(np.int64)

    alive = np.ones(nrays, dtype=bool)
    hit = np.zeros(nrays, dtype=bool)
    hx = np.zeros(nrays, dtype=np.int64)
    hy = np.zeros(nrays, dtype=np.int64)

    limit = 2 * (wid + hgt) + 4
    for _ in range(limit):
        if not alive.any():
            break
        step_x = alive & (tmx <= tmy)
        step_y = alive & (tmy <= tmx)  # equality steps both: exact corner
        cx[step_x] += sx[step_x]
        tmx[step_x] += tdx[step_x]
        cy[step_y] += sy[step_y]
        tmy[step_y] += tdy[step_y]

        inside = (cx >= 0) & (cx < wid) & (cy >= 0) & (cy < hgt)
        gone = alive & ~inside
        alive[gone] = False
        probe = alive & inside
        if probe.any():
            found = np.zeros_like(probe)
            found[probe] = occ[cy[probe], cx[probe]]
            hx[found] = cx[found]
            hy[found] = cy[found]
            hit |= found
            alive[found] = False

    return hx, hy, hit


def _trace_cells(values: np.ndarray, cells: np.ndarray, dirs: np.ndarray):
    """Cross product of origin cells (M, 2) and direction set (K, 2)."""
    m, k = cells.shape[0], dirs.shape[0]
    cx = np.repeat(cells[:, 0], k)
    cy = np.repeat(cells[:, 1], k)
    dx = np.tile(dirs[:, 0], m)
    dy = np.tile(dirs[:, 1], m)
    hx, hy, hit = trace_rays(values, cx, cy, dx, dy)
    ox = np.repeat(cells[:, 0], k).astype(np.int64)
    oy = np.repeat(cells[:, 1], k).astype(np.int64)
    off = np.stack([hx - ox, hy - oy], axis=1).reshape(m, k, 2)
    return off, hit.reshape(m, k)


def directional_distances_batch(
    hmap: HeightMap, cells: np.ndarray, k: int
) -> np.ndarray:
    """Distances from many cells at once. Returns (len(cells), k) in meters.

    The distance for a hit is measured center to center, origin cell to the
    first obstacle cell the ray crosses. Misses get the map diagonal sentinel.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if np.any(cells < 0) or np.any(cells[:, 0] >= hmap.width) or np.any(
        cells[:, 1] >= hmap.height
    ):
        raise ValueError("ray origin outside the map")
    dirs = ray_directions(k)
    off, hit = _trace_cells(hmap.values, cells, dirs)
    dist = np.hypot(off[:, :, 0].astype(np.float64), off[:, :, 1].astype(np.float64))
    dist *= hmap.cell_size
    dist[~hit] = hmap.max_distance()
    return dist


def directional_distances(hmap: HeightMap, cell, k: int) -> np.ndarray:
    """Distances (meters) from one cell along k evenly spaced directions."""
    return directional_distances_batch(hmap, np.array([cell]), k)[0]


# ---------------------------------------------------------------------------
# disturbances

@dataclass
class DisturbanceSpec:
    """One map manipulation.

    kind is one of DISTURBANCE_KINDS. The footprint is selected either by an
    explicit seed cell (the 4-connected nonzero component containing it), or,
    when cell is None, by drawing a random nonzero cell with the given seed.
    creation ignores the footprint and stamps rect = (x, y, w, h); a random
    rect is drawn from seed when rect is None. steps counts 10 m quanta for
    height edits and creation, and repeated rings for dilation/contraction.
    offset is the whole-cell shift for translation.
    """

    kind: str
    cell: tuple | None = None
    rect: tuple | None = None
    offset: tuple = (0, 0)
    steps: int = 1
    seed: int | None = None


def _component(values: np.ndarray, seed_cell) -> np.ndarray:
    """Boolean mask of the 4-connected nonzero component containing seed_cell."""
    hgt, wid = values.shape
    x0, y0 = int(seed_cell[0]), int(seed_cell[1])
    mask = np.zeros((hgt, wid), dtype=bool)
    if not (0 <= x0 < wid and 0 <= y0 < hgt) or values[y0, x0] <= 0:
        return mask
    q = deque([(x0, y0)])
    mask[y0, x0] = True
    while q:
        x, y = q.popleft()
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= nx < wid and 0 <= ny < hgt and values[ny, nx] > 0 and not mask[ny, nx]:
                mask[ny, nx] = True
                q.append((nx, ny))
    return mask


def _ring_neighbors(mask: np.ndarray) -> np.ndarray:
    """Cells 8-adjacent to the mask but not in it."""
    grown = np.zeros_like(mask)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            shifted = np.zeros_like(mask)
            ys = slice(max(dy, 0), mask.shape[0] + min(dy, 0))
            yd = slice(max(-dy, 0), mask.shape[0] + min(-dy, 0))
            xs = slice(max(dx, 0), mask.shape[1] + min(dx, 0))
            xd = slice(max(-dx, 0), mask.shape[1] + min(-dx, 0))
            shifted[yd, xd] = mask[ys, xs]
            grown |= shifted
    return grown & ~mask


def _neighbor_max(values: np.ndarray, ring: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """For each ring cell, the max footprint height among its 8 neighbors."""
    best = np.zeros_like(values)
    src = np.where(mask, values, 0.0)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            shifted = np.zeros_like(values)
            ys = slice(max(dy, 0), values.shape[0] + min(dy, 0))
            yd = slice(max(-dy, 0), values.shape[0] + min(-dy, 0))
            xs = slice(max(dx, 0), values.shape[1] + min(dx, 0))
            xd = slice(max(-dx, 0), values.shape[1] + min(-dx, 0))
            shifted[yd, xd] = src[ys, xs]
            best = np.maximum(best, shifted)
    return np.where(ring, best, 0.0)


def _noop(hmap: HeightMap, why: str) -> HeightMap:
    warnings.warn("disturbance skipped: " + why, stacklevel=3)
    return hmap


def apply_disturbance(hmap: HeightMap, spec: DisturbanceSpec) -> HeightMap:
    """Apply one manipulation and return the edited map.

    An empty target is not an error: the map comes back unchanged with a
    warning, so randomized policies can shrug off degenerate draws.
    """
    if spec.kind not in DISTURBANCE_KINDS:
        raise ValueError("unknown disturbance kind {!r}".format(spec.kind))
    if spec.steps < 1:
        raise ValueError("steps must be at least 1")
    vals = np.array(hmap.values, copy=True)
    rng = np.random.default_rng(spec.seed)

    if spec.kind == "creation":
        rect = spec.rect
        if rect is None:
            w = int(rng.integers(2, 6))
            h = int(rng.integers(2, 6))
            if hmap.width < w or hmap.height < h:
                return _noop(hmap, "creation rect does not fit")
            x = int(rng.integers(0, hmap.width - w + 1))
            y = int(rng.integers(0, hmap.height - h + 1))
            rect = (x, y, w, h)
        x, y, w, h = (int(v) for v in rect)
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, hmap.width), min(y + h, hmap.height)
        if x0 >= x1 or y0 >= y1:
            return _noop(hmap, "creation rect is empty")
        vals[y0:y1, x0:x1] = HEIGHT_STEP * spec.steps
        return hmap.with_values(vals)

    cell = spec.cell
    if cell is None:
        ys, xs = np.nonzero(vals > 0)
        if len(xs) == 0:
            return _noop(hmap, "map has no object cells")
        pick = int(rng.integers(0, len(xs)))
        cell = (int(xs[pick]), int(ys[pick]))
    mask = _component(vals, cell)
    if not mask.any():
        return _noop(hmap, "target cell has no footprint")

    if spec.kind == "deletion":
        vals[mask] = 0.0
    elif spec.kind == "height_increase":
        vals[mask] += HEIGHT_STEP * spec.steps
    elif spec.kind == "height_decrease":
        vals[mask] = np.maximum(vals[mask] - HEIGHT_STEP * spec.steps, 0.0)
    elif spec.kind == "dilation":
        for _ in range(spec.steps):
            ring = _ring_neighbors(mask)
            vals = np.where(ring, np.maximum(vals, _neighbor_max(vals, ring, mask)), vals)
            mask = mask | ring
    elif spec.kind == "contraction":
        for _ in range(spec.steps):
            keep = mask & ~_ring_neighbors(~mask)
            vals[mask & ~keep] = 0.0
            mask = keep
            if not mask.any():
                break
    elif spec.kind == "translation":
        ddx, ddy = int(spec.offset[0]), int(spec.offset[1])
        if ddx == 0 and ddy == 0:
            return _noop(hmap, "translation offset is zero")
        ys, xs = np.nonzero(mask)
        moved = vals[ys, xs].copy()
        vals[ys, xs] = 0.0
        nx, ny = xs + ddx, ys + ddy
        keep = (nx >= 0) & (nx < hmap.width) & (ny >= 0) & (ny < hmap.height)
        vals[ny[keep], nx[keep]] = moved[keep]
    return hmap.with_values(np.maximum(vals, 0.0))
