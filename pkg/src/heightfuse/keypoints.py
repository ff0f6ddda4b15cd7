"""Sparse 3-D keypoints and the camera-to-map projection.

Keypoints live in one of two frames. The camera frame is metric and
egocentric: origin at the observer, x to the right, y along the heading,
z up. The map frame is the egocentric window grid: x and y are continuous
cell coordinates (cell (i, j) spans [i, i+1) x [j, j+1)), z stays in meters.
A similarity transform (per-axis scale, rotation, translation, row-vector
convention) carries camera points into the map frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import HeightMap, Heading, MapWindow, trace_rays

CAMERA_FRAME = "camera"
MAP_FRAME = "map"


@dataclass
class Keypoint3D:
    id: int
    position: np.ndarray  # (3,), float64
    frame: str = MAP_FRAME

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.frame not in (CAMERA_FRAME, MAP_FRAME):
            raise ValueError("unknown keypoint frame {!r}".format(self.frame))

    def cell(self) -> tuple:
        """Map cell containing this point (map-frame points only)."""
        return (int(math.floor(self.position[0])), int(math.floor(self.position[1])))


@dataclass
class SimilarityTransform:
    """p_map = p_cam * diag(scale) * rotation + translation, p as a row vector."""

    scale: np.ndarray       # (3,) positive diagonal
    rotation: np.ndarray    # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("scale entries must be positive")
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(self.rotation)), 1.0, abs_tol=1e-6):
            raise ValueError("rotation must have determinant +1")

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return (p * self.scale) @ self.rotation + self.translation


def project_keypoint(kp: Keypoint3D, xf: SimilarityTransform) -> Keypoint3D:
    """Carry a camera-frame keypoint into the map frame."""
    if kp.frame != CAMERA_FRAME:
        raise ValueError("project_keypoint expects a camera-frame keypoint")
    return Keypoint3D(kp.id, xf.apply(kp.position), MAP_FRAME)


def window_transform(window_size: int, cell_size: float,
                     scale_factor: float = 1.0) -> SimilarityTransform:
    """Ground-truth camera-to-window transform for an egocentric window.

    Meters shrink to cells on the map plane, heights stay metric, and the
    observer lands on the window anchor cell (size // 2, 0). scale_factor
    models a miscalibrated scale estimate.
    """
    s = scale_factor / cell_size
    return SimilarityTransform(
        scale=np.array([s, s, scale_factor]),
        rotation=np.eye(3),
        translation=np.array([window_size // 2, 0.0, 0.0]),
    )


def apply_offsets(kps: list, delta: np.ndarray) -> list:
    """Blend a shared refinement offset into each keypoint: p + delta / 2."""
    delta = np.asarray(delta, dtype=np.float64).reshape(3)
    return [Keypoint3D(k.id, k.position + 0.5 * delta, k.frame) for k in kps]


def keypoints_in_window(kps: list, size: int) -> list:
    """Drop map-frame keypoints whose cell falls outside the window."""
    out = []
    for k in kps:
        x, y = k.cell()
        if 0 <= x < size and 0 <= y < size:
            out.append(k)
    return out


# ---------------------------------------------------------------------------
# simulated sparse SLAM measurements

_HEADING_BASIS = {
    # forward and right unit vectors per heading, global (x, y)
    Heading.NORTH: ((0, 1), (1, 0)),
    Heading.EAST: ((1, 0), (0, -1)),
    Heading.SOUTH: ((0, -1), (-1, 0)),
    Heading.WEST: ((-1, 0), (0, 1)),
}


def visible_surface_cells(gmap: HeightMap, pose, fov_deg: float,
                          range_cells: float) -> np.ndarray:
    """Footprint boundary cells inside the view wedge with a clear line of
    sight. pose is ((x, y), Heading). Returns an (M, 2) int array.

    Occlusion is silhouette-based on the grid plane: a cell is visible when
    the ray from the observer first strikes that cell.
    """
    (px, py), heading = pose
    vals = gmap.values
    occ = vals > 0
    if not occ.any():
        return np.zeros((0, 2), dtype=np.int64)
    # boundary cells: nonzero with a zero 4-neighbor (map edge counts as open)
    pad = np.pad(occ, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    ys, xs = np.nonzero(occ & ~interior)

    fwd, _ = _HEADING_BASIS[Heading(heading)]
    ux = xs - px
    uy = ys - py
    dist = np.hypot(ux, uy)
    keep = (dist > 0) & (dist <= range_cells)
    # angle to the forward axis
    dots = ux * fwd[0] + uy * fwd[1]
    cos_half = math.cos(math.radians(fov_deg) / 2.0)
    keep &= dots >= cos_half * dist - 1e-12
    xs, ys, ux, uy, dist = xs[keep], ys[keep], ux[keep], uy[keep], dist[keep]
    if len(xs) == 0:
        return np.zeros((0, 2), dtype=np.int64)

    ox = np.full(len(xs), px)
    oy = np.full(len(xs), py)
    hx, hy, hit = trace_rays(vals, ox, oy, ux / dist, uy / dist)
    seen = hit & (hx == xs) & (hy == ys)
    return np.stack([xs[seen], ys[seen]], axis=1)


def simulate_slam_keypoints(gmap: HeightMap, pose, n: int,
                            noise_sigma: float = 0.0,
                            outlier_rate: float = 0.0,
                            seed: int | None = None,
                            fov_deg: float = 90.0,
                            range_cells: float = 25.0,
                            window_size: int = 20,
                            scale_noise: float = 0.0) -> list:
    """Sample up to n map-frame keypoints a feature tracker might produce.

    Inliers sit on visible footprint boundary cells with a height drawn
    uniformly on [0, cell height]; a facade cell yields several points at
    different heights when fewer than n cells are visible, the way a real
    tracker finds many features on one wall. Gaussian position noise
    (meters, camera frame) and a uniform outlier fraction model tracker
    error. The camera points go through the ground-truth window transform,
    optionally with a multiplicative scale error.
    """
    if not (0 <= outlier_rate <= 1):
        raise ValueError("outlier_rate must be in [0, 1]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    (px, py), heading = pose
    cells = visible_surface_cells(gmap, pose, fov_deg, range_cells)
    if len(cells) > n:
        pick = rng.choice(len(cells), size=n, replace=False)
        cells = cells[np.sort(pick)]
    elif len(cells) > 0 and n > len(cells):
        cells = cells[np.arange(n) % len(cells)]
    m = len(cells)
    if m == 0:
        return []

    fwd, right = _HEADING_BASIS[Heading(heading)]
    ux = cells[:, 0] - px
    uy = cells[:, 1] - py
    cam_x = (ux * right[0] + uy * right[1]) * gmap.cell_size
    cam_y = (ux * fwd[0] + uy * fwd[1]) * gmap.cell_size
    heights = gmap.values[cells[:, 1], cells[:, 0]].astype(np.float64)
    cam_z = rng.uniform(0.0, 1.0, m) * heights

    pts = np.stack([cam_x, cam_y, cam_z], axis=1)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, (m, 3))
    if outlier_rate > 0:
        bad = rng.random(m) < outlier_rate
        nbad = int(bad.sum())
        if nbad:
            ang = rng.uniform(-math.radians(fov_deg) / 2, math.radians(fov_deg) / 2, nbad)
            rad = rng.uniform(0.0, range_cells * gmap.cell_size, nbad)
            zmax = max(float(gmap.values.max()), 1.0)
            pts[bad, 0] = rad * np.sin(ang)
            pts[bad, 1] = rad * np.cos(ang)
            pts[bad, 2] = rng.uniform(0.0, zmax, nbad)

    factor = 1.0
    if scale_noise > 0:
        factor = 1.0 + rng.uniform(-scale_noise, scale_noise)
    xf = window_transform(window_size, gmap.cell_size, factor)
    return [
        Keypoint3D(i, xf.apply(pts[i]), MAP_FRAME)
        for i in range(m)
    ]


# ---------------------------------------------------------------------------
# serialization

def save_keypoints(kps: list, path) -> None:
    """One keypoint per line: id x y z."""
    with open(path, "w") as fh:
        for k in kps:
            fh.write("{} {:.9g} {:.9g} {:.9g}\n".format(
                k.id, k.position[0], k.position[1], k.position[2]))


def load_keypoints(path, frame: str = MAP_FRAME) -> list:
    out = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln:
                continue
            toks = ln.split()
            if len(toks) != 4:
                raise ValueError("bad keypoint line {!r}".format(ln))
            out.append(Keypoint3D(int(toks[0]), np.array([float(t) for t in toks[1:]]), frame))
    return out
