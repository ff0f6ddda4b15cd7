"""Synthetic world: scenes, rendered views, datasets, and navigation.

The simulator stands in for real city flights. A Scene is a flat ground
plane with rectangular boxes; observations are pseudo-perspective column
rasters (one azimuth bin per image column across a 90 degree field of
view). Datasets pair rendered frames with egocentric height windows cut
from a disturbed copy of the ground truth, and the navigation loop closes
render -> refine -> merge -> replan -> advance around the planner.
"""

from __future__ import annotations

import colorsys
import json
import math
import multiprocessing
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import (DisturbanceSpec, Heading, HeightMap, MapWindow,
                   apply_disturbance, extract_window, global_to_local,
                   l1_error, load_map, merge_window, save_map, trace_rays,
                   window_index_maps)
from .keypoints import (Keypoint3D, load_keypoints, save_keypoints,
                        simulate_slam_keypoints)
from .network import FusionNet, MomentState, SequenceSample
from .planner import OccupancyGrid, PlanState, occupancy, plan

BACKGROUND = (0.12, 0.14, 0.18)
FRAME_MAGIC = b"VGFR"

# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneParams:
    size: int = 64
    cell_size: float = 5.0
    object_count: int = 8
    side_range: tuple = (2, 6)       # footprint sides, cells, inclusive
    height_range: tuple = (10.0, 100.0)

    def __post_init__(self):
        if self.size < 4 or self.object_count < 0:
            raise ValueError("bad scene geometry")
        if self.side_range[0] < 1 or self.side_range[1] < self.side_range[0]:
            raise ValueError("bad footprint side range")
        if not (0 < self.height_range[0] <= self.height_range[1]):
            raise ValueError("bad height range")


@dataclass(frozen=True)
class SceneObject:
    id: int
    rect: tuple        # (x, y, w, h) in cells
    height: float      # meters


@dataclass
class Scene:
    hmap: HeightMap
    objects: list
    seed: int

    @property
    def id_map(self) -> np.ndarray:
        """Object id per cell, -1 on open ground."""
        ids = np.full((self.hmap.height, self.hmap.width), -1, dtype=np.int64)
        for ob in self.objects:
            x, y, w, h = ob.rect
            ids[y:y + h, x:x + w] = ob.id
        return ids


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    """Rejection-sample non-overlapping boxes onto flat ground.

    Deterministic per seed. Raises if the requested count cannot be placed
    within 1000 draws.
    """
    rng = np.random.default_rng(seed)
    vals = np.zeros((params.size, params.size), dtype=np.float32)
    taken = np.zeros_like(vals, dtype=bool)
    objects = []
    attempts = 0
    lo, hi = params.side_range
    while len(objects) < params.object_count:
        attempts += 1
        if attempts > 1000:
            raise ValueError("could not place %d objects in 1000 attempts"
                             % params.object_count)
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, params.size - w + 1))
        y = int(rng.integers(0, params.size - h + 1))
        if taken[y:y + h, x:x + w].any():
            continue
        height = float(rng.uniform(*params.height_range))
        taken[y:y + h, x:x + w] = True
        vals[y:y + h, x:x + w] = height
        objects.append(SceneObject(len(objects), (x, y, w, h), height))
    return Scene(HeightMap(vals, params.cell_size), objects, seed)


# ---------------------------------------------------------------------------
# rendering

_HEADING_VECTORS = {
    Heading.NORTH: ((0.0, 1.0), (1.0, 0.0)),
    Heading.EAST: ((1.0, 0.0), (0.0, -1.0)),
    Heading.SOUTH: ((0.0, -1.0), (-1.0, 0.0)),
    Heading.WEST: ((-1.0, 0.0), (0.0, 1.0)),
}


@dataclass(frozen=True)
class ObservationFrame:
    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    pose: tuple              # ((x, y), Heading)
    moment: int


def object_color(object_id: int) -> tuple:
    """Stable, well-separated hue per object id."""
    hue = (0.618033988749895 * (object_id + 1)) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.65, 1.0)


def render_observation(scene: Scene, pose, size: int = 64,
                       fov_deg: float = 90.0, moment: int = 0) -> ObservationFrame:
    """Column raster of the view from pose.

    Each column is one azimuth bin; a ray marched to the first object paints
    the column bottom-up with the object's hue, brightness falling off with
    distance and the filled height proportional to apparent size
    (height / distance). Misses keep the constant background.
    """
    (px, py), heading = pose
    gmap = scene.hmap
    if not gmap.in_bounds(int(px), int(py)):
        raise ValueError("camera pose is outside the map")
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = BACKGROUND

    fwd, right = _HEADING_VECTORS[Heading(heading)]
    half = math.radians(fov_deg) / 2.0
    ang = (np.arange(size) + 0.5) / size * (2 * half) - half
    dx = fwd[0] * np.cos(ang) + right[0] * np.sin(ang)
    dy = fwd[1] * np.cos(ang) + right[1] * np.sin(ang)
    ox = np.full(size, float(px))
    oy = np.full(size, float(py))
    hx, hy, hit = trace_rays(gmap.values, ox, oy, dx, dy)
    if not hit.any():
        return ObservationFrame(img, ((px, py), Heading(heading)), moment)

    ids = scene.id_map
    for col in np.nonzero(hit)[0]:
        cx, cy = int(hx[col]), int(hy[col])
        dist = math.hypot(cx - px, cy - py) * gmap.cell_size
        dist = max(dist, 0.5 * gmap.cell_size)
        obj_h = float(gmap.values[cy, cx])
        fill = min(1.0, 0.5 * obj_h / dist * gmap.cell_size / 5.0)
        rows = int(round(fill * size))
        if rows == 0:
            continue
        oid = int(ids[cy, cx])
        r, g, b = object_color(oid) if oid >= 0 else (0.5, 0.5, 0.5)
        bright = 0.35 + 0.65 * math.exp(-dist / 120.0)
        img[size - rows:, col, 0] = r * bright
        img[size - rows:, col, 1] = g * bright
        img[size - rows:, col, 2] = b * bright
    return ObservationFrame(img, ((px, py), Heading(heading)), moment)


def save_frame(path, image: np.ndarray) -> None:
    """Little-endian float32 raster: magic, then u32 height/width/channels."""
    arr = np.ascontiguousarray(image, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError("expected an (H, W, C) image")
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(np.array(arr.shape, dtype="<u4").tobytes())
        fh.write(arr.tobytes())


def load_frame(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FRAME_MAGIC:
        raise ValueError("not a frame file: %s" % path)
    shape = tuple(np.frombuffer(blob, dtype="<u4", count=3, offset=4))
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != shape[0] * shape[1] * shape[2]:
        raise ValueError("truncated frame file: %s" % path)
    return data.reshape(shape).copy()


# ---------------------------------------------------------------------------
# disturbance policies

_EDIT_KINDS = ("translation", "height_increase", "height_decrease",
               "dilation", "contraction", "creation", "deletion")
_EDIT_WEIGHTS = (0.20, 0.15, 0.15, 0.15, 0.10, 0.15, 0.10)


def corrupt_fraction(est: HeightMap, gt: HeightMap) -> float:
    """Share of cells whose height differs from the reference."""
    return float(np.mean(np.abs(est.values - gt.values) > 1e-6))


def _random_spec(rng) -> DisturbanceSpec:
    kind = rng.choice(_EDIT_KINDS, p=_EDIT_WEIGHTS)
    steps = int(rng.integers(1, 3))
    offset = (0, 0)
    if kind == "translation":
        while offset == (0, 0):
            offset = (int(rng.integers(-4, 5)), int(rng.integers(-4, 5)))
    return DisturbanceSpec(kind=str(kind), steps=steps, offset=offset,
                           seed=int(rng.integers(2 ** 31)))


def disturb_to_fraction(gt: HeightMap, target: float, seed: int,
                        max_edits: int = 4000) -> tuple:
    """Compose random manipulations until the corrupt fraction reaches the
    target band (within about 4 points below, never 5 above).

    Returns (disturbed map, measured fraction). target 0 returns the ground
    truth untouched.
    """
    if not (0 <= target < 1):
        raise ValueError("target fraction must be in [0, 1)")
    if target == 0:
        return gt.with_values(np.array(gt.values, copy=True)), 0.0
    rng = np.random.default_rng(seed)
    cur = gt
    frac = 0.0
    stalled = 0
    for _ in range(max_edits):
        if frac >= target - 0.04:
            break
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            nxt = apply_disturbance(cur, _random_spec(rng))
        nfrac = corrupt_fraction(nxt, gt)
        # Edits that lower the measured fraction (deleting a phantom object
        # restores ground truth) or overshoot the band are rejected; keeping
        # only corruption-increasing edits makes the climb monotone.
        if nfrac <= frac or nfrac > target + 0.045:
            stalled += 1
            if stalled > 400:
                break
            continue
        stalled = 0
        cur, frac = nxt, nfrac
    return cur, frac


# ---------------------------------------------------------------------------
# trajectories and poses

_FORWARD = {
    Heading.NORTH: (0, 1),
    Heading.EAST: (1, 0),
    Heading.SOUTH: (0, -1),
    Heading.WEST: (-1, 0),
}


def _view_richness(gmap: HeightMap, cell, heading: Heading,
                   window: int = 20) -> int:
    """Object cells inside the egocentric window for this heading."""
    win = MapWindow(cell, heading, window)
    return int((extract_window(gmap, win).values > 0).sum())


def _random_trajectory(scene: Scene, t_len: int, altitude: float, rng) -> list:
    """Waypoint walk over cells flyable at the given altitude.

    Mostly keeps heading, sometimes turns; a blocked forward cell forces a
    turn in place. A view with almost nothing in it snaps the heading to the
    richest cardinal so observations keep seeing objects. Returns t_len
    poses ((x, y), Heading).
    """
    flyable = scene.hmap.values < altitude
    ys, xs = np.nonzero(flyable)
    if len(xs) == 0:
        raise ValueError("no flyable cells at altitude %.1f" % altitude)
    pick = int(rng.integers(0, len(xs)))
    x, y = int(xs[pick]), int(ys[pick])
    heading = Heading(int(rng.integers(0, 4)))
    poses = []
    for _ in range(t_len):
        counts = [_view_richness(scene.hmap, (x, y), Heading(h))
                  for h in range(4)]
        if counts[heading] * 4 < max(counts):
            heading = Heading(int(np.argmax(counts)))
        poses.append(((x, y), heading))
        if rng.random() < 0.25:
            heading = Heading((heading + int(rng.choice((-1, 1)))) % 4)
        moved = False
        for _ in range(4):
            fx, fy = _FORWARD[heading]
            nx, ny = x + fx, y + fy
            if scene.hmap.in_bounds(nx, ny) and flyable[ny, nx]:
                x, y = nx, ny
                moved = True
                break
            heading = Heading((heading + 1) % 4)
        if not moved:
            heading = Heading(int(rng.integers(0, 4)))
    return poses


def _heading_toward(cur, nxt, fallback: Heading) -> Heading:
    dx, dy = nxt[0] - cur[0], nxt[1] - cur[1]
    if dx == 0 and dy == 0:
        return fallback
    if abs(dx) > abs(dy):
        return Heading.EAST if dx > 0 else Heading.WEST
    if abs(dy) > abs(dx):
        return Heading.NORTH if dy > 0 else Heading.SOUTH
    # diagonal: stick with the current heading when it matches either axis
    cand_x = Heading.EAST if dx > 0 else Heading.WEST
    cand_y = Heading.NORTH if dy > 0 else Heading.SOUTH
    return fallback if fallback in (cand_x, cand_y) else cand_x


# ---------------------------------------------------------------------------
# dataset production


@dataclass(frozen=True)
class DatasetParams:
    train_scenes: int = 20
    test_scenes: int = 5
    episodes_per_train_scene: int = 13
    episodes_per_test_scene: int = 20
    t_len: int = 8
    window: int = 20
    keypoint_count: int = 30
    keypoint_noise: float = 1.0
    outlier_rate: float = 0.1
    corruption_levels: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)
    scene: SceneParams = field(default_factory=SceneParams)


def _episode_dir(root, index: int) -> str:
    return os.path.join(root, "episodes", "%04d" % index)


def _build_episode(root, scene: Scene, index: int, ep_seed: int,
                   target: float, params: DatasetParams) -> dict:
    rng = np.random.default_rng(ep_seed)
    altitude = float(rng.uniform(10.0, 30.0))
    poses = _random_trajectory(scene, params.t_len, altitude,
                               np.random.default_rng(ep_seed + 1))
    disturbed, measured = disturb_to_fraction(scene.hmap, target, ep_seed + 2)

    ep_dir = _episode_dir(root, index)
    os.makedirs(ep_dir, exist_ok=True)
    save_map(disturbed, os.path.join(ep_dir, "input.vgfm"))
    with open(os.path.join(ep_dir, "poses.txt"), "w") as fh:
        for (x, y), heading in poses:
            fh.write("%d %d %d\n" % (x, y, int(heading)))
    for t, pose in enumerate(poses):
        frame = render_observation(scene, pose, moment=t)
        save_frame(os.path.join(ep_dir, "frame_%04d.bin" % t), frame.image)
        kps = simulate_slam_keypoints(
            scene.hmap, pose, params.keypoint_count,
            noise_sigma=params.keypoint_noise,
            outlier_rate=params.outlier_rate,
            seed=ep_seed + 10 + t,
            window_size=params.window)
        save_keypoints(kps, os.path.join(ep_dir, "kps_%04d.txt" % t))
    return {
        "index": index,
        "scene": scene.seed,
        "seed": ep_seed,
        "length": len(poses),
        "altitude": altitude,
        "corruption_target": target,
        "corruption_measured": measured,
    }


def build_dataset(root, seed: int = 0, params: DatasetParams = DatasetParams(),
                  jobs: int = 1) -> dict:
    """Generate scenes and episodes under root and write meta.json.

    Scene indices [0, train_scenes) are the training split, the rest the
    held-out split. Episode corruption targets cycle through
    params.corruption_levels. Fully deterministic per seed, independent of
    job count.
    """
    n_scenes = params.train_scenes + params.test_scenes
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    os.makedirs(os.path.join(root, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(root, "episodes"), exist_ok=True)

    scenes = []
    scene_rows = []
    for i in range(n_scenes):
        sc = generate_scene(seed * 1000 + i, params.scene)
        scenes.append(sc)
        save_map(sc.hmap, os.path.join(root, "scenes", "%03d.vgfm" % i))
        scene_rows.append({"index": i, "seed": sc.seed,
                           "split": "train" if i < params.train_scenes else "test"})

    tasks = []
    index = 0
    levels = params.corruption_levels
    for i, sc in enumerate(scenes):
        count = (params.episodes_per_train_scene if i < params.train_scenes
                 else params.episodes_per_test_scene)
        for j in range(count):
            target = levels[(i * 31 + j) % len(levels)]
            tasks.append((root, sc, i, index,
                          seed * 1_000_000 + index * 1000, target, params))
            index += 1

    rows = _pmap(_episode_task, tasks, jobs)
    episodes = []
    for (_, _, scene_idx, _, _, _, _), row in zip(tasks, rows):
        row = dict(row)
        row["scene"] = scene_idx
        episodes.append(row)

    meta = {
        "seed": seed,
        "cell_size": params.scene.cell_size,
        "t_len": params.t_len,
        "window": params.window,
        "train_scenes": list(range(params.train_scenes)),
        "test_scenes": list(range(params.train_scenes, n_scenes)),
        "scenes": scene_rows,
        "episodes": episodes,
        "params": {
            "object_count": params.scene.object_count,
            "scene_size": params.scene.size,
            "keypoint_count": params.keypoint_count,
            "keypoint_noise": params.keypoint_noise,
            "outlier_rate": params.outlier_rate,
            "corruption_levels": list(levels),
            "episodes_per_train_scene": params.episodes_per_train_scene,
            "episodes_per_test_scene": params.episodes_per_test_scene,
        },
    }
    with open(os.path.join(root, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return meta


def _episode_task(args):
    root, scene, _, index, ep_seed, target, params = args
    return _build_episode(root, scene, index, ep_seed, target, params)


def _pmap(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items)


def read_meta(root) -> dict:
    with open(os.path.join(root, "meta.json")) as fh:
        return json.load(fh)


@dataclass
class EpisodeData:
    """One stored episode, loaded back from disk."""

    meta: dict
    gt_map: HeightMap
    input_map: HeightMap
    poses: list
    images: np.ndarray
    keypoints: list     # per moment, list of Keypoint3D in window coordinates


def load_episode(root, index: int, meta: dict | None = None) -> EpisodeData:
    meta = meta if meta is not None else read_meta(root)
    row = meta["episodes"][index]
    if row["index"] != index:
        row = next(r for r in meta["episodes"] if r["index"] == index)
    gt = load_map(os.path.join(root, "scenes", "%03d.vgfm" % row["scene"]))
    ep_dir = _episode_dir(root, index)
    disturbed = load_map(os.path.join(ep_dir, "input.vgfm"))
    poses = []
    with open(os.path.join(ep_dir, "poses.txt")) as fh:
        for ln in fh:
            x, y, h = (int(v) for v in ln.split())
            poses.append(((x, y), Heading(h)))
    images = np.stack([load_frame(os.path.join(ep_dir, "frame_%04d.bin" % t))
                       for t in range(len(poses))])
    kps = [load_keypoints(os.path.join(ep_dir, "kps_%04d.txt" % t))
           for t in range(len(poses))]
    return EpisodeData(row, gt, disturbed, poses, images, kps)


def carry_indices(prev: MapWindow, cur: MapWindow, global_w: int,
                  global_h: int) -> np.ndarray:
    """Flat index into the previous window for each cell of the current one.

    -1 marks cells with no predecessor (newly revealed or off the map).
    """
    gx, gy, inside = window_index_maps(cur, global_w, global_h)
    lx, ly = global_to_local(prev, gx, gy)
    n = prev.size
    valid = inside & (lx >= 0) & (lx < n) & (ly >= 0) & (ly < n)
    src = np.where(valid, ly * n + lx, -1)
    return src.reshape(-1).astype(np.int64)


def episode_to_sample(ep: EpisodeData, window: int = 20) -> SequenceSample:
    """Assemble the training-ready view of a stored episode."""
    gt, disturbed = ep.gt_map, ep.input_map
    t_len = len(ep.poses)
    wins = [MapWindow(p[0], p[1], window) for p in ep.poses]
    input_maps = np.stack([extract_window(disturbed, w).values for w in wins])
    gt_maps = np.stack([extract_window(gt, w).values for w in wins])
    carry = np.stack([carry_indices(wins[t - 1], wins[t], gt.width, gt.height)
                      for t in range(1, t_len)]) if t_len > 1 else \
        np.zeros((0, window * window), dtype=np.int64)
    kp_pos = [np.array([k.position for k in ep.keypoints[t]]).reshape(-1, 3)
              for t in range(t_len)]
    return SequenceSample(images=ep.images, input_maps=input_maps,
                          gt_maps=gt_maps, keypoint_positions=kp_pos,
                          carry_index_maps=carry, cell_size=gt.cell_size)


def load_samples(root, scene_indices, meta: dict | None = None,
                 targets=None) -> list:
    """SequenceSamples for every episode on the listed scenes, optionally
    restricted to the given corruption targets. Ordered by episode index."""
    meta = meta if meta is not None else read_meta(root)
    wanted = set(scene_indices)
    out = []
    for row in meta["episodes"]:
        if row["scene"] not in wanted:
            continue
        if targets is not None and row["corruption_target"] not in targets:
            continue
        out.append(episode_to_sample(load_episode(root, row["index"], meta),
                                     meta["window"]))
    return out


# ---------------------------------------------------------------------------
# offline replay: refine a stored trajectory without the planner


def replay_episode(net: FusionNet, ep: EpisodeData, window: int = 20) -> list:
    """Run the network along a stored trajectory.

    Returns per-moment dicts with input/refined/ground-truth windows. The
    refined window is merged into a global estimate so that memory modes see
    their own corrections at the next pose; modes without memory read the
    pristine disturbed map every moment.
    """
    estimate = ep.input_map.with_values(np.array(ep.input_map.values, copy=True))
    state = None
    rows = []
    for t, pose in enumerate(ep.poses):
        win = MapWindow(pose[0], pose[1], window)
        source = estimate if net.config.carries_memory else ep.input_map
        window_in = extract_window(source, win)
        state = MomentState(input_map=window_in) if state is None \
            else state.with_map(window_in)
        refined, _, state = net.forward_moment(state, ep.images[t],
                                               ep.keypoints[t])
        estimate = merge_window(estimate, refined, win)
        rows.append({
            "moment": t,
            "input": window_in,
            "refined": refined,
            "gt": extract_window(ep.gt_map, win),
        })
    return rows


# ---------------------------------------------------------------------------
# closed-loop navigation


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    collision: bool
    reason: str               # goal | collision | unreachable | budget
    l1_per_moment: list
    final_map: HeightMap
    trajectory: list


def run_episode(scene: Scene, initial_map: HeightMap, start, goal,
                altitude: float, net: FusionNet | None = None,
                seed: int = 0, keypoint_count: int = 30,
                keypoint_noise: float = 1.0, outlier_rate: float = 0.1,
                window: int = 20, budget: int | None = None) -> EpisodeResult:
    """Fly one episode from start to goal at a fixed altitude.

    Each moment: render the view, refine the egocentric window (when a
    network is given), merge it into the global estimate, repair the plan,
    and advance one path cell. Collisions are judged against the ground
    truth; success means reaching the goal within the step budget without
    one. With net=None the initial map is trusted as-is.
    """
    gt = scene.hmap
    start, goal = tuple(start), tuple(goal)
    for name, cell in (("start", start), ("goal", goal)):
        if not gt.in_bounds(*cell):
            raise ValueError("%s cell is outside the map" % name)
        if gt.values[cell[1], cell[0]] >= altitude:
            raise ValueError("%s cell is blocked in the ground truth" % name)
    if start == goal:
        return EpisodeResult(True, 0, False, "goal", [],
                             initial_map, [start])

    gt_occ = occupancy(gt, altitude)
    oracle = plan(gt_occ.copy(), start, goal)
    if budget is None:
        budget = 4 * oracle.steps if oracle.reachable else 4 * (gt.width + gt.height)

    estimate = initial_map.with_values(np.array(initial_map.values, copy=True))
    occ = occupancy(estimate, altitude)
    occ.occupied[start[1], start[0]] = False
    planner = PlanState(occ, start, goal)

    cur = start
    heading = _heading_toward(start, goal, Heading.NORTH)
    state = None
    l1s = []
    traj = [cur]
    steps = 0
    while steps < budget:
        win = MapWindow(cur, heading, window)
        if net is not None:
            frame = render_observation(scene, (cur, heading),
                                       size=net.config.image_size)
            kps = simulate_slam_keypoints(
                gt, (cur, heading), keypoint_count,
                noise_sigma=keypoint_noise, outlier_rate=outlier_rate,
                seed=seed * 1000 + steps, window_size=window)
            source = estimate if net.config.carries_memory else initial_map
            window_in = extract_window(source, win)
            state = MomentState(input_map=window_in) if state is None \
                else state.with_map(window_in)
            refined, _, state = net.forward_moment(state, frame.image, kps)
            estimate = merge_window(estimate, refined, win)
            new_occ = estimate.values >= altitude
            new_occ[cur[1], cur[0]] = False
            changed = np.argwhere(new_occ != occ.occupied)
            if len(changed):
                occ.occupied[...] = new_occ
                planner.apply_changes([(int(x), int(y)) for y, x in changed])
            l1s.append(l1_error(refined, extract_window(gt, win)))
        else:
            l1s.append(l1_error(extract_window(estimate, win),
                                extract_window(gt, win)))

        result = planner.replan()
        if not result.reachable or not result.path:
            return EpisodeResult(False, steps, False, "unreachable", l1s,
                                 estimate, traj)
        nxt = result.path[1]
        steps += 1
        traj.append(nxt)
        if gt.values[nxt[1], nxt[0]] >= altitude:
            return EpisodeResult(False, steps, True, "collision", l1s,
                                 estimate, traj)
        heading = _heading_toward(cur, nxt, heading)
        cur = nxt
        if cur == goal:
            return EpisodeResult(True, steps, False, "goal", l1s,
                                 estimate, traj)
        occ.occupied[cur[1], cur[0]] = False
        planner.apply_changes([cur])
        planner.move_start(cur)
    return EpisodeResult(False, steps, False, "budget", l1s, estimate, traj)


# ---------------------------------------------------------------------------
# evaluation suites


def evaluate_mapping(root, nets: dict, scene_indices=None,
                     jobs: int = 1) -> dict:
    """Refinement quality per mode over stored episodes.

    Returns {mode: {l1, input_l1, reduction, acc3, acc5, acc10, episodes}}
    plus per-corruption-level rows under "sweep" for each mode, aggregated
    over all moments of every selected episode.
    """
    meta = read_meta(root)
    if scene_indices is None:
        scene_indices = meta["test_scenes"]
    wanted = set(scene_indices)
    rows = [r for r in meta["episodes"] if r["scene"] in wanted]
    if not rows:
        raise ValueError("no episodes on the requested scenes")
    out = {}
    for mode in sorted(nets):
        net = nets[mode]
        args = [(root, r["index"], meta, net) for r in rows]
        stats = _pmap(_replay_stats_task, args, jobs)
        out[mode] = _fold_mapping_stats(rows, stats)
    return out


def _replay_stats_task(args):
    root, index, meta, net = args
    ep = load_episode(root, index, meta)
    reps = replay_episode(net, ep, meta["window"])
    cells = 0
    err_in = 0.0
    err_out = 0.0
    close = np.zeros(3)
    for row in reps:
        gt = row["gt"].values.astype(np.float64)
        d_out = np.abs(row["refined"].values - gt)
        err_in += float(np.abs(row["input"].values - gt).sum())
        err_out += float(d_out.sum())
        for i, tol in enumerate((3.0, 5.0, 10.0)):
            close[i] += float((d_out <= tol).sum())
        cells += gt.size
    return {"cells": cells, "err_in": err_in, "err_out": err_out,
            "close": close.tolist()}


def _fold_mapping_stats(rows, stats) -> dict:
    def fold(pairs):
        cells = sum(s["cells"] for _, s in pairs)
        err_in = sum(s["err_in"] for _, s in pairs)
        err_out = sum(s["err_out"] for _, s in pairs)
        close = np.sum([s["close"] for _, s in pairs], axis=0)
        return {
            "episodes": len(pairs),
            "l1": err_out / cells,
            "input_l1": err_in / cells,
            "reduction": 1.0 - err_out / err_in if err_in > 0 else 0.0,
            "acc3": close[0] / cells,
            "acc5": close[1] / cells,
            "acc10": close[2] / cells,
        }

    paired = list(zip(rows, stats))
    result = fold(paired)
    sweep = {}
    for level in sorted({r["corruption_target"] for r in rows}):
        sweep["%g" % level] = fold([(r, s) for r, s in paired
                                    if r["corruption_target"] == level])
    result["sweep"] = sweep
    return result


def evaluate_navigation(net: FusionNet | None, scene_seeds, episodes: int,
                        corruption: float, seed: int = 0,
                        scene_params: SceneParams = SceneParams(),
                        use_ground_truth: bool = False, jobs: int = 1,
                        min_separation: int = 20) -> dict:
    """Success statistics over randomized navigation episodes.

    Scenes cycle through scene_seeds; start/goal pairs are sampled from
    cells flyable at the episode altitude, re-drawn until the ground-truth
    oracle finds a path at least min_separation cells long. The initial map
    is the ground truth when use_ground_truth is set, otherwise a corrupted
    copy at the requested fraction. net=None plans on the initial map
    without refinement.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    args = [(net, scene_seeds[e % len(scene_seeds)], e, corruption,
             seed, scene_params, use_ground_truth, min_separation)
            for e in range(episodes)]
    rows = _pmap(_nav_episode_task, args, jobs)
    succ = sum(r["success"] for r in rows)
    return {
        "episodes": episodes,
        "successes": succ,
        "success_rate": succ / episodes,
        "collisions": sum(r["collision"] for r in rows),
        "unreachable": sum(r["reason"] == "unreachable" for r in rows),
        "budget_exceeded": sum(r["reason"] == "budget" for r in rows),
        "mean_steps": float(np.mean([r["steps"] for r in rows])),
        "results": rows,
    }


def _nav_episode_task(args):
    (net, scene_seed, episode, corruption, seed, scene_params,
     use_ground_truth, min_separation) = args
    scene = generate_scene(scene_seed, scene_params)
    rng = np.random.default_rng(seed * 10_000 + episode)
    altitude = float(rng.uniform(10.0, 30.0))
    start, goal = _sample_mission(scene, altitude, rng, min_separation)
    if use_ground_truth:
        initial = scene.hmap.with_values(np.array(scene.hmap.values, copy=True))
    else:
        initial, _ = disturb_to_fraction(scene.hmap, corruption,
                                         seed * 10_000 + episode + 7)
    res = run_episode(scene, initial, start, goal, altitude, net=net,
                      seed=seed * 10_000 + episode)
    return {"episode": episode, "scene_seed": scene_seed,
            "altitude": altitude, "start": list(start), "goal": list(goal),
            "success": bool(res.success), "collision": bool(res.collision),
            "reason": res.reason, "steps": res.steps}


def _sample_mission(scene: Scene, altitude: float, rng,
                    min_separation: int) -> tuple:
    """Start/goal pair with a ground-truth path of at least min_separation
    steps. Relaxes the separation requirement if 200 draws all fail."""
    flyable = scene.hmap.values < altitude
    ys, xs = np.nonzero(flyable)
    if len(xs) < 2:
        raise ValueError("scene has too few flyable cells")
    occ = occupancy(scene.hmap, altitude)
    best = None
    for trial in range(400):
        i, j = rng.integers(0, len(xs), 2)
        start = (int(xs[i]), int(ys[i]))
        goal = (int(xs[j]), int(ys[j]))
        if start == goal:
            continue
        result = plan(occ.copy(), start, goal)
        if not result.reachable:
            continue
        if result.steps >= min_separation:
            return start, goal
        if best is None or result.steps > best[2]:
            best = (start, goal, result.steps)
    if best is None:
        raise ValueError("could not sample a reachable mission")
    return best[0], best[1]
