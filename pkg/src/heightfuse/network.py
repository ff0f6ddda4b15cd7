"""Fusion network: encoders, residual map updates, keypoint attention.

The model refines an egocentric 20x20 height window each moment from a
rendered view plus sparse keypoint observations. Five wiring modes share
building blocks:

  no_fusion               predict the window from the view alone
  fusion                  visual-geometric residual on an externally
                          supplied window every moment
  fusion_memory           same residual, but the refined window is carried
                          to the next moment
  fusion_memory_exchange  adds keypoint evidence as extra channels in the
                          refinement head, skipping directional attention
  full                    complete pipeline with directional attention over
                          keypoints and shared position offsets

All map math inside the net runs in normalized units (meters divided by
``height_scale``); public entry points take and return meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import HeightMap, directional_distances_batch
from .keypoints import Keypoint3D, apply_offsets

MODES = ("no_fusion", "fusion", "fusion_memory", "fusion_memory_exchange", "full")

# modes that consume keypoints at all
_KP_MODES = ("fusion_memory_exchange", "full")
# modes whose refined window becomes the next moment's input
_MEMORY_MODES = ("fusion_memory", "fusion_memory_exchange", "full")


@dataclass(frozen=True)
class NetworkConfig:
    mode: str = "full"
    channels: int = 32
    directions: int = 16
    max_keypoints: int = 50
    map_size: int = 20
    image_size: int = 64
    height_scale: float = 50.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError("unknown mode %r, expected one of %s" % (self.mode, (MODES,)))
        if self.directions < 1:
            raise ValueError("direction count must be >= 1")
        if self.channels < 1 or self.map_size < 1 or self.image_size < 8:
            raise ValueError("bad network geometry")

    @property
    def uses_keypoints(self) -> bool:
        return self.mode in _KP_MODES

    @property
    def carries_memory(self) -> bool:
        return self.mode in _MEMORY_MODES


# ---------------------------------------------------------------------------
# pure array pieces, shared by the graph code and by direct callers


def vg_weights(distances: np.ndarray) -> np.ndarray:
    """Direction weights from a (..., K) distance array.

    W_k sums exp(-|d_k - d_j|) over all j including k itself, so a uniform
    vector of K distances maps to a constant K and any constant shift of the
    input leaves the output unchanged.
    """
    d = np.asarray(distances, dtype=np.float64)
    diff = np.abs(d[..., :, None] - d[..., None, :])
    return np.exp(-diff).sum(axis=-1)


def dam_attention(cell_features: np.ndarray, u_set: np.ndarray) -> np.ndarray:
    """Per-cell attention summary: max over directions of feature x summed U.

    cell_features: (J, C) geometric features, u_set: (M, K). Equivalent to
    summing outer(G_j, U_i) over keypoints into a (C, K) table per cell and
    taking the row max; the sum factors out, so only sum(U) is needed.
    """
    g = np.asarray(cell_features, dtype=np.float64)
    u = np.asarray(u_set, dtype=np.float64)
    if u.size == 0:
        return np.zeros_like(g)
    s = u.sum(axis=0)  # (K,)
    return (g[:, :, None] * s[None, None, :]).max(axis=2)


def keypoint_offsets(positions: np.ndarray, u_set: np.ndarray) -> np.ndarray:
    """Shared 3-vector offset: row max of sum_i outer(p_i, U_i)."""
    p = np.asarray(positions, dtype=np.float64)
    u = np.asarray(u_set, dtype=np.float64)
    if p.size == 0 or u.size == 0:
        return np.zeros(3)
    return (p.T @ u).max(axis=1)


def sequence_loss(preds, gts) -> float:
    """Sum of absolute height errors over all moments and cells, in meters."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many predicted and reference maps")
    total = 0.0
    for p, g in zip(preds, gts):
        pa = p.values if isinstance(p, HeightMap) else np.asarray(p)
        ga = g.values if isinstance(g, HeightMap) else np.asarray(g)
        if pa.shape != ga.shape:
            raise ValueError("map shape mismatch in loss")
        total += float(np.abs(ga.astype(np.float64) - pa.astype(np.float64)).sum())
    return total


# ---------------------------------------------------------------------------
# state carried between moments


@dataclass
class MomentState:
    """What survives from one moment to the next.

    ``input_map`` is the window the next forward pass will refine. The
    network writes its refined output here; callers that reset the input
    every moment (mode "fusion", or external control loops) replace it.
    ``pending_offset`` is the position correction produced one moment ago,
    applied to incoming keypoints before use. ``last_u`` keeps the most
    recent per-keypoint direction vectors for inspection.
    """

    input_map: HeightMap
    pending_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    last_u: np.ndarray | None = None

    def with_map(self, hmap: HeightMap) -> "MomentState":
        return replace(self, input_map=hmap)


@dataclass
class SequenceSample:
    """One training sequence of T moments.

    keypoint_positions holds one (M_t, 3) array per moment, in window
    coordinates (cells, height in meters). carry_index_maps has shape
    (T-1, map_size**2): flat source index into the previous window for each
    cell of the next one, -1 where the cell was not visible before.
    """

    images: np.ndarray
    input_maps: np.ndarray
    gt_maps: np.ndarray
    keypoint_positions: list
    carry_index_maps: np.ndarray
    cell_size: float = 5.0


# ---------------------------------------------------------------------------
# the model


class FusionNet:
    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, ad.BatchNormState] = {}
        self._rng = np.random.default_rng(seed)
        c, k = config.channels, config.directions
        mode = config.mode

        self._add_conv("vis1", 3, c)
        self._add_conv("vis2", c, c)
        self._add_conv("vis3", c, c)
        if mode == "no_fusion":
            # direct map head on visual features only
            self._add_conv("nf1", c, c)
            self._add_plain_conv("nf2", c, 1)
        else:
            self._add_conv("geo1", 1, c)
            self._add_conv("geo2", c, c)
            self._add_conv("geo3", c, c)
            self._add_conv("fc1", 2 * c, c)
            self._add_plain_conv("fc2", c, 1)
        if config.uses_keypoints:
            self._add_conv("geoc1", 1, c)
            self._add_conv("geoc2", c, c)
            self._add_conv("geoc3", c, c)
            self._add_head("head_v", c, k)
            self._add_head("head_g", c, k)
            fr_in = 2 * c if mode == "full" else c + k
            self._add_conv("fr1", fr_in, c)
            self._add_plain_conv("fr2", c, 1)
        del self._rng

    # -- parameter construction ------------------------------------------

    def _add_plain_conv(self, name, cin, cout):
        fan = cin * 9
        w = self._rng.normal(0.0, math.sqrt(2.0 / fan), (cout, cin, 3, 3))
        self.params[name + "_w"] = ad.parameter(w, dtype=self.dtype)
        self.params[name + "_b"] = ad.parameter(np.zeros(cout), dtype=self.dtype)

    def _add_conv(self, name, cin, cout):
        self._add_plain_conv(name, cin, cout)
        self.params[name + "_gamma"] = ad.parameter(np.ones(cout), dtype=self.dtype)
        self.params[name + "_beta"] = ad.parameter(np.zeros(cout), dtype=self.dtype)
        self.bn[name] = ad.BatchNormState(cout, dtype=self.dtype)

    def _add_head(self, name, cin, k):
        w = self._rng.normal(0.0, math.sqrt(1.0 / cin), (cin, k))
        self.params[name + "_w"] = ad.parameter(w, dtype=self.dtype)
        self.params[name + "_b"] = ad.parameter(np.zeros(k), dtype=self.dtype)

    def parameters(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    # -- graph building blocks -------------------------------------------

    def _block(self, x, name, training, stride=1):
        p = self.params
        y = ad.conv2d(x, p[name + "_w"], p[name + "_b"], stride=stride, padding=1)
        y = ad.batch_norm2d(y, p[name + "_gamma"], p[name + "_beta"],
                            self.bn[name], training)
        return ad.relu(y)

    def _encode_visual_t(self, x, training):
        s = self.config.map_size
        y = self._block(x, "vis1", training, stride=2)
        y = self._block(y, "vis2", training, stride=2)
        y = self._block(y, "vis3", training, stride=2)
        return ad.resize_nearest(y, (s, s))

    def _encode_geo_t(self, m, training, prefix="geo"):
        y = self._block(m, prefix + "1", training)
        y = self._block(y, prefix + "2", training)
        return self._block(y, prefix + "3", training)

    def _residual_t(self, x, training, prefix):
        p = self.params
        y = self._block(x, prefix + "1", training)
        return ad.conv2d(y, p[prefix + "2_w"], p[prefix + "2_b"], padding=1)

    def _vg_reps_t(self, vpool, g_kp, w_mat: np.ndarray):
        """U for one moment of one sequence: (M, K) tensor.

        vpool: (1, C) pooled visual features, g_kp: (M, C) geometric features
        at the keypoint cells, w_mat: (M, K) detached direction weights.
        Linear heads commute with the per-direction scaling, so the weights
        multiply the head outputs directly.
        """
        p = self.params
        vis_part = ad.linear(vpool, p["head_v_w"])          # (1, K)
        geo_part = ad.linear(g_kp, p["head_g_w"])           # (M, K)
        scaled = ad.mul(ad.constant(w_mat), ad.add(vis_part, geo_part))
        bias = ad.add(p["head_v_b"], p["head_g_b"])
        return ad.add(scaled, bias)

    def _dam_map_t(self, gc_b, s_t, size):
        """Attention summary for one sequence: (1, C, H, W) from the
        (1, C, H, W) geometric slice and the (K,) summed U."""
        c, k = self.config.channels, self.config.directions
        g5 = ad.reshape(gc_b, (1, c, 1, size, size))
        s5 = ad.reshape(s_t, (1, 1, k, 1, 1))
        return ad.reduce_max(ad.mul(g5, s5), axis=2)

    def _distance_weights(self, mc_meters: np.ndarray, cells: np.ndarray,
                          cell_size: float) -> np.ndarray:
        hmap = HeightMap(mc_meters.astype(np.float32), cell_size)
        d = directional_distances_batch(hmap, cells, self.config.directions)
        return vg_weights(d).astype(self.dtype)

    # -- public single-moment passes -------------------------------------

    def encode_visual(self, image: np.ndarray) -> np.ndarray:
        """View image (H, W, 3) in [0, 1] to a (map, map, C) feature grid."""
        img = np.asarray(image, dtype=self.dtype)
        s = self.config.image_size
        if img.shape != (s, s, 3):
            raise ValueError("expected a %dx%dx3 image, got %s" % (s, s, img.shape))
        x = ad.constant(img.transpose(2, 0, 1)[None])
        v = self._encode_visual_t(x, training=False)
        return v.detach()[0].transpose(1, 2, 0).copy()

    def encode_geometric(self, hmap, prefix="geo") -> np.ndarray:
        """Height window to a (map, map, C) feature grid."""
        values = hmap.values if isinstance(hmap, HeightMap) else np.asarray(hmap)
        s = self.config.map_size
        if values.shape != (s, s):
            raise ValueError("expected a %dx%d window, got %s" % (s, s, values.shape))
        if prefix + "1_w" not in self.params:
            raise ValueError("mode %r has no %r encoder" % (self.config.mode, prefix))
        m = ad.constant(values[None, None] / self.config.height_scale)
        g = self._encode_geo_t(m, training=False, prefix=prefix)
        return g.detach()[0].transpose(1, 2, 0).copy()

    def forward_moment(self, state: MomentState, image: np.ndarray,
                       keypoints: list | None = None):
        """Refine one moment. Returns (refined map, offset, next state)."""
        cfg = self.config
        s = cfg.map_size
        hmap = state.input_map
        if hmap.values.shape != (s, s):
            raise ValueError("input window must be %dx%d" % (s, s))
        img = np.asarray(image, dtype=self.dtype)
        if img.shape != (cfg.image_size, cfg.image_size, 3):
            raise ValueError("image does not match the configured extent")

        x = ad.constant(img.transpose(2, 0, 1)[None])
        v = self._encode_visual_t(x, training=False)
        delta = np.zeros(3)
        u_out = None

        # The map path runs in meters so that a zero residual reproduces the
        # input bit for bit; dividing by height_scale and multiplying back
        # would perturb roughly one value in ten by an ulp. The normalized
        # copies feed only the feature encoders.
        if cfg.mode == "no_fusion":
            out = ad.relu(self._residual_t(v, False, "nf"))
            refined = out.detach()[0, 0].astype(np.float32) * cfg.height_scale
        else:
            vals_m = hmap.values.astype(np.float32)
            m_norm = ad.constant(vals_m[None, None] / cfg.height_scale)
            g = self._encode_geo_t(m_norm, False)
            rc = self._residual_t(ad.concat([v, g], axis=1), False, "fc")
            rc_m = rc.detach()[0, 0].astype(np.float32) * np.float32(cfg.height_scale)
            mc_m = np.maximum(vals_m + rc_m, np.float32(0.0))
            if not cfg.uses_keypoints:
                refined = mc_m
            else:
                gc = self._encode_geo_t(ad.constant(mc_m[None, None] / cfg.height_scale),
                                        False, prefix="geoc")
                kps = self._usable_keypoints(keypoints, state.pending_offset)
                if kps:
                    cells = np.array([kp.cell() for kp in kps], dtype=np.int64)
                    w_mat = self._distance_weights(mc_m.astype(np.float64),
                                                   cells, hmap.cell_size)
                    vpool = ad.mul(ad.reduce_sum(ad.reshape(v, (cfg.channels, s * s)),
                                                 axis=1, keepdims=True),
                                   ad.constant(self.dtype.type(1.0 / (s * s))))
                    vpool = ad.reshape(vpool, (1, cfg.channels))
                    g_kp = ad.gather_spatial(gc, 0, cells[:, 1], cells[:, 0])
                    u = self._vg_reps_t(vpool, g_kp, w_mat)
                    s_vec = ad.reduce_sum(u, axis=0)
                    u_out = u.detach().copy()
                else:
                    s_vec = ad.constant(np.zeros(cfg.directions, dtype=self.dtype))
                if cfg.mode == "full":
                    extra = self._dam_map_t(gc, s_vec, s)
                    if kps:
                        pos = np.array([kp.position for kp in kps])
                        delta = keypoint_offsets(pos, u_out)
                else:
                    smap = ad.mul(ad.reshape(s_vec, (1, cfg.directions, 1, 1)),
                                  ad.constant(np.ones((1, cfg.directions, s, s),
                                                      dtype=self.dtype)))
                    extra = smap
                rr = self._residual_t(ad.concat([v, extra], axis=1), False, "fr")
                rr_m = rr.detach()[0, 0].astype(np.float32) * np.float32(cfg.height_scale)
                refined = np.maximum(mc_m + rr_m, np.float32(0.0))

        out_map = hmap.with_values(refined)
        nxt = MomentState(input_map=out_map if cfg.carries_memory else hmap,
                          pending_offset=delta, last_u=u_out)
        return out_map, delta, nxt

    def _usable_keypoints(self, keypoints, pending_offset):
        if not keypoints:
            return []
        if np.any(pending_offset):
            keypoints = apply_offsets(keypoints, pending_offset)
        s = self.config.map_size
        kept = [kp for kp in keypoints
                if 0 <= kp.cell()[0] < s and 0 <= kp.cell()[1] < s]
        return kept[: self.config.max_keypoints]

    # -- batched training forward ----------------------------------------

    def forward_training_batch(self, samples: list, training: bool = True):
        """Loss graph over a batch of sequences.

        Returns (loss tensor, mean per-moment L1 in meters). The loss is the
        per-sequence sum of absolute errors over moments and cells, averaged
        across the batch. Memory modes thread the refined window through the
        precomputed carry index maps, so gradients flow across moments.
        """
        cfg = self.config
        b = len(samples)
        if b == 0:
            raise ValueError("empty batch")
        t_len = samples[0].images.shape[0]
        s = cfg.map_size
        scale = cfg.height_scale
        offsets = [np.zeros(3) for _ in range(b)]
        carried = None
        loss = None
        l1_accum = 0.0

        for t in range(t_len):
            imgs = np.stack([sm.images[t] for sm in samples]).astype(self.dtype)
            x = ad.constant(imgs.transpose(0, 3, 1, 2))
            v = self._encode_visual_t(x, training)
            ext = np.stack([sm.input_maps[t] for sm in samples])[:, None] / scale
            gt = np.stack([sm.gt_maps[t] for sm in samples])[:, None]

            if cfg.mode == "no_fusion":
                pred = ad.relu(self._residual_t(v, training, "nf"))
            else:
                if carried is None or cfg.mode == "fusion":
                    m_in = ad.constant(ext.astype(self.dtype))
                else:
                    src = np.stack([sm.carry_index_maps[t - 1] for sm in samples])
                    src = src + (np.arange(b)[:, None] * s * s) * (src >= 0)
                    m_in = ad.gather_cells(carried, src.reshape(b, 1, s, s),
                                           ext.astype(self.dtype))
                g = self._encode_geo_t(m_in, training)
                rc = self._residual_t(ad.concat([v, g], axis=1), training, "fc")
                mc = ad.relu(ad.add(m_in, rc))
                if not cfg.uses_keypoints:
                    pred = mc
                    carried = mc if cfg.mode == "fusion_memory" else None
                else:
                    gc = self._encode_geo_t(mc, training, prefix="geoc")
                    vpool = ad.mul(
                        ad.reduce_sum(ad.reshape(v, (b, cfg.channels, s * s)),
                                      axis=2),
                        ad.constant(self.dtype.type(1.0 / (s * s))))
                    extras = []
                    mc_all = mc.detach()
                    for bi in range(b):
                        pos = samples[bi].keypoint_positions[t]
                        pos = self._corrected_positions(pos, offsets[bi])
                        cells = self._in_window_cells(pos)
                        if cells.shape[0]:
                            mc_m = mc_all[bi, 0].astype(np.float64) * scale
                            w_mat = self._distance_weights(
                                mc_m, cells, samples[bi].cell_size)
                            g_kp = ad.gather_spatial(gc, bi, cells[:, 1], cells[:, 0])
                            vp = ad.take_batch(vpool, bi)
                            u = self._vg_reps_t(vp, g_kp, w_mat)
                            s_vec = ad.reduce_sum(u, axis=0)
                            if cfg.mode == "full":
                                kept = pos[self._in_window_mask(pos)][: cfg.max_keypoints]
                                offsets[bi] = keypoint_offsets(kept, u.detach())
                        else:
                            s_vec = ad.constant(np.zeros(cfg.directions,
                                                         dtype=self.dtype))
                            offsets[bi] = np.zeros(3)
                        if cfg.mode == "full":
                            extras.append(self._dam_map_t(ad.take_batch(gc, bi),
                                                          s_vec, s))
                        else:
                            extras.append(ad.mul(
                                ad.reshape(s_vec, (1, cfg.directions, 1, 1)),
                                ad.constant(np.ones((1, cfg.directions, s, s),
                                                    dtype=self.dtype))))
                    extra = extras[0] if b == 1 else ad.concat(extras, axis=0)
                    rr = self._residual_t(ad.concat([v, extra], axis=1),
                                          training, "fr")
                    pred = ad.relu(ad.add(mc, rr))
                    carried = pred

            diff = ad.absolute(ad.add(ad.constant(gt / scale), ad.negate(pred)))
            term = ad.reduce_sum(diff)
            loss = term if loss is None else ad.add(loss, term)
            pred_m = pred.detach() * scale
            l1_accum += float(np.abs(gt - pred_m).mean())

        loss = ad.mul(loss, ad.constant(self.dtype.type(scale / b)))
        return loss, l1_accum / t_len

    @staticmethod
    def _corrected_positions(pos: np.ndarray, offset: np.ndarray) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
        if pos.size and np.any(offset):
            return pos + 0.5 * offset[None, :]
        return pos

    def _in_window_mask(self, pos: np.ndarray) -> np.ndarray:
        s = self.config.map_size
        cx = np.floor(pos[:, 0]).astype(np.int64)
        cy = np.floor(pos[:, 1]).astype(np.int64)
        return (cx >= 0) & (cx < s) & (cy >= 0) & (cy < s)

    def _in_window_cells(self, pos: np.ndarray) -> np.ndarray:
        pos = pos[self._in_window_mask(pos)][: self.config.max_keypoints]
        return np.stack([np.floor(pos[:, 0]), np.floor(pos[:, 1])],
                        axis=1).astype(np.int64) if pos.size else np.zeros((0, 2), np.int64)

    # -- maintenance ------------------------------------------------------

    def zero_residual_heads(self) -> None:
        """Zero the final convolution of every residual head, making each
        map update an exact identity (the clamp cannot bite: inputs are
        nonnegative)."""
        for prefix in ("fc2", "fr2", "nf2"):
            wkey = prefix + "_w"
            if wkey in self.params:
                self.params[wkey].data[...] = 0.0
                self.params[prefix + "_b"].data[...] = 0.0

    def state_arrays(self) -> dict:
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn.items():
            out["bnstat_" + name + "_mean"] = st.running_mean
            out["bnstat_" + name + "_var"] = st.running_var
        cfg = self.config
        out["meta"] = np.array([MODES.index(cfg.mode), cfg.channels,
                                cfg.directions, cfg.max_keypoints, cfg.map_size,
                                cfg.image_size, cfg.height_scale],
                               dtype=np.float32)
        return out

    def save(self, path) -> None:
        ad.save_weights(path, self.state_arrays())

    @classmethod
    def load(cls, path) -> "FusionNet":
        arrays = ad.load_weights(path)
        if "meta" not in arrays:
            raise ValueError("checkpoint lacks model metadata")
        meta = arrays.pop("meta")
        cfg = NetworkConfig(mode=MODES[int(meta[0])], channels=int(meta[1]),
                            directions=int(meta[2]), max_keypoints=int(meta[3]),
                            map_size=int(meta[4]), image_size=int(meta[5]),
                            height_scale=float(meta[6]))
        net = cls(cfg, seed=0)
        expect = set(net.params) | {"bnstat_" + n + s for n in net.bn
                                    for s in ("_mean", "_var")}
        got = set(arrays)
        if expect != got:
            raise ValueError("checkpoint does not match mode %r" % cfg.mode)
        for name, t in net.params.items():
            if arrays[name].shape != t.data.shape:
                raise ValueError("shape mismatch for %r" % name)
            t.data = arrays[name].astype(t.data.dtype)
        for name, st in net.bn.items():
            st.running_mean = arrays["bnstat_" + name + "_mean"].astype(np.float32)
            st.running_var = arrays["bnstat_" + name + "_var"].astype(np.float32)
        return net
