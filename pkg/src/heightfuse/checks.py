"""Finite-difference verification of the differentiable ops and the
composed training graphs.

Every op gets a small float64 fixture placed away from the piecewise
boundaries of relu/abs/max (margins comfortably above the probe step), a
weighted-sum readout so each element influences the scalar, and a central
difference comparison against the analytic gradient. The composed check
builds the real per-moment loss for each wiring mode on a tiny network and
differentiates through everything at once: encoders, batch norm, carry
between moments, direction weights, attention, and the loss.

Shared by the command line's grad-check and by the test suite.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .network import FusionNet, NetworkConfig, SequenceSample

OP_EPS = 1e-5
COMPOSED_EPS = 1e-5
BOUND = 1e-4

# Frozen seeds for the composed harness. The base point matters: an exact
# relu kink or a raycast obstacle flip inside the probe step makes the
# central difference measure a slope average the analytic pass never
# claims to produce. The parameter nudge clears the exact kinks that
# zero-initialized biases create, and this fixture seed was picked so all
# five modes sit clear of near-kink landings at the probe step.
COMPOSED_FIXTURE_SEED = 21
COMPOSED_NET_SEED = 5


class _Readout:
    """Weighted-sum readout whose weights freeze on first use, so repeated
    evaluations of a fixture see the identical scalar function."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)
        self._w = None

    def __call__(self, t):
        if self._w is None:
            self._w = self._rng.standard_normal(t.data.shape)
        return ad.reduce_sum(ad.mul(t, ad.constant(self._w)))


def _away_from_zero(rng, shape, margin=0.2):
    a = rng.uniform(margin, 1.0, shape)
    return a * rng.choice((-1.0, 1.0), shape)


def _distinct(rng, shape, gap=0.1):
    n = int(np.prod(shape))
    vals = np.arange(n) * gap + rng.uniform(0, gap / 4, n)
    return rng.permutation(vals).reshape(shape)


def op_checks() -> list:
    """(name, max relative error) for every differentiable op."""
    out = []

    def run(name, fixture_fn):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        fn, arrays = fixture_fn(rng)
        out.append((name, ad.grad_check(fn, arrays, eps=OP_EPS)))

    def fx_add(rng):
        r = _Readout(1)
        return (lambda ts: r(ad.add(ts[0], ts[1])),
                [rng.standard_normal((3, 4)), rng.standard_normal(4)])
    run("add", fx_add)

    def fx_mul(rng):
        r = _Readout(2)
        return (lambda ts: r(ad.mul(ts[0], ts[1])),
                [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))])
    run("mul", fx_mul)

    def fx_negate(rng):
        r = _Readout(3)
        return (lambda ts: r(ad.negate(ts[0])),
                [rng.standard_normal(5)])
    run("negate", fx_negate)

    def fx_exp(rng):
        r = _Readout(4)
        return (lambda ts: r(ad.exp(ts[0])),
                [rng.uniform(-1, 1, (3, 3))])
    run("exp", fx_exp)

    def fx_abs(rng):
        r = _Readout(5)
        return (lambda ts: r(ad.absolute(ts[0])),
                [_away_from_zero(rng, (4, 4))])
    run("absolute", fx_abs)

    def fx_relu(rng):
        r = _Readout(6)
        return (lambda ts: r(ad.relu(ts[0])),
                [_away_from_zero(rng, (4, 4))])
    run("relu", fx_relu)

    def fx_reshape(rng):
        r = _Readout(7)
        return (lambda ts: r(ad.reshape(ts[0], (3, 4))),
                [rng.standard_normal((2, 6))])
    run("reshape", fx_reshape)

    def fx_concat(rng):
        r = _Readout(8)
        return (lambda ts: r(ad.concat([ts[0], ts[1]], axis=0)),
                [rng.standard_normal((2, 3)), rng.standard_normal((1, 3))])
    run("concat", fx_concat)

    def fx_take_batch(rng):
        r = _Readout(9)
        return (lambda ts: r(ad.take_batch(ts[0], 1)),
                [rng.standard_normal((3, 2, 2))])
    run("take_batch", fx_take_batch)

    def fx_reduce_sum(rng):
        r = _Readout(10)
        return (lambda ts: r(ad.reduce_sum(ts[0], axis=1)),
                [rng.standard_normal((3, 4))])
    run("reduce_sum", fx_reduce_sum)

    def fx_reduce_max(rng):
        r = _Readout(11)
        return (lambda ts: r(ad.reduce_max(ts[0], axis=1)),
                [_distinct(rng, (3, 4))])
    run("reduce_max", fx_reduce_max)

    def fx_gather_spatial(rng):
        r = _Readout(12)
        rows = np.array([0, 2, 4, 2])
        cols = np.array([1, 3, 0, 3])
        return (lambda ts: r(ad.gather_spatial(ts[0], 1, rows, cols)),
                [rng.standard_normal((2, 3, 5, 5))])
    run("gather_spatial", fx_gather_spatial)

    def fx_gather_cells(rng):
        r = _Readout(13)
        src = np.array([3, -1, 0, 8, -1, 2, 17, 5, 11, 1, -1, 6,
                        9, 4, 13, 10, 7, 12])
        fill = rng.standard_normal(18)
        return (lambda ts: r(ad.gather_cells(ts[0], src, fill)),
                [rng.standard_normal((2, 1, 3, 3))])
    run("gather_cells", fx_gather_cells)

    def fx_resize_nearest(rng):
        r = _Readout(14)
        return (lambda ts: r(ad.resize_nearest(ts[0], (7, 7))),
                [rng.standard_normal((1, 2, 3, 3))])
    run("resize_nearest", fx_resize_nearest)

    def fx_matmul(rng):
        r = _Readout(15)
        return (lambda ts: r(ad.matmul(ts[0], ts[1])),
                [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
    run("matmul", fx_matmul)

    def fx_outer(rng):
        r = _Readout(16)
        return (lambda ts: r(ad.outer(ts[0], ts[1])),
                [rng.standard_normal(3), rng.standard_normal(4)])
    run("outer", fx_outer)

    def fx_linear(rng):
        r = _Readout(17)
        return (lambda ts: r(ad.linear(ts[0], ts[1], ts[2])),
                [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)),
                 rng.standard_normal(5)])
    run("linear", fx_linear)

    def fx_conv2d(rng):
        r = _Readout(18)
        return (lambda ts: r(
            ad.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1)),
            [rng.standard_normal((2, 3, 6, 6)),
             rng.standard_normal((4, 3, 3, 3)) * 0.5,
             rng.standard_normal(4)])
    run("conv2d", fx_conv2d)

    def fx_max_pool(rng):
        r = _Readout(19)
        return (lambda ts: r(ad.max_pool2x2(ts[0])),
                [_distinct(rng, (1, 2, 4, 4))])
    run("max_pool2x2", fx_max_pool)

    def fx_bn_train(rng):
        r = _Readout(20)

        def fn(ts):
            state = ad.BatchNormState(3, dtype=np.float64)
            y = ad.batch_norm2d(ts[0], ts[1], ts[2], state, training=True)
            return r(y)
        return fn, [rng.standard_normal((2, 3, 4, 4)),
                    rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]
    run("batch_norm2d_train", fx_bn_train)

    def fx_bn_eval(rng):
        r = _Readout(21)
        mean = rng.standard_normal(3)
        var = rng.uniform(0.5, 2.0, 3)

        def fn(ts):
            state = ad.BatchNormState(3, dtype=np.float64)
            state.running_mean = mean.copy()
            state.running_var = var.copy()
            y = ad.batch_norm2d(ts[0], ts[1], ts[2], state, training=False)
            return r(y)
        return fn, [rng.standard_normal((2, 3, 4, 4)),
                    rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]
    run("batch_norm2d_eval", fx_bn_eval)

    return out


# ---------------------------------------------------------------------------
# composed whole-graph checks


def composed_fixture(mode: str, t_len: int, seed: int = COMPOSED_FIXTURE_SEED):
    """Tiny float64 network + one synthetic sequence, parameters nudged off
    their init so no pre-activation sits exactly on a relu kink.

    Returns (fn, arrays, names) for grad_check.
    """
    cfg = NetworkConfig(mode=mode, channels=3, directions=4, max_keypoints=6,
                        image_size=16)
    rng = np.random.default_rng(seed)
    vals = np.zeros((t_len, 20, 20))
    vals[:, 4:9, 6:10] = 30.0
    vals[:, 14:17, 2:5] = 55.0
    carry = np.tile(np.arange(400, dtype=np.int64), (max(t_len - 1, 1), 1))
    carry[:, :60] = -1
    kp0 = np.column_stack([rng.uniform(3, 17, 5) + 0.5,
                           rng.uniform(3, 17, 5) + 0.5,
                           rng.uniform(5, 40, 5)])
    kp_list = [kp0] + [np.zeros((0, 3))] * (t_len - 1)
    sample = SequenceSample(
        images=rng.random((t_len, 16, 16, 3)),
        input_maps=vals + rng.random((t_len, 20, 20)),
        gt_maps=vals + rng.random((t_len, 20, 20)),
        keypoint_positions=kp_list,
        carry_index_maps=carry[:t_len - 1] if t_len > 1 else
        np.zeros((0, 400), np.int64),
        cell_size=5.0)

    proto = FusionNet(cfg, seed=COMPOSED_NET_SEED, dtype=np.float64)
    names = sorted(proto.params)
    nudge = np.random.default_rng(seed + 1)
    arrays = []
    for n in names:
        a = proto.params[n].data.copy()
        a += nudge.uniform(-0.02, 0.02, a.shape)
        arrays.append(a)

    def fn(tensors):
        net = FusionNet(cfg, seed=COMPOSED_NET_SEED, dtype=np.float64)
        for nm, t in zip(names, tensors):
            net.params[nm] = t
        loss, _ = net.forward_training_batch([sample], training=True)
        return loss

    return fn, arrays, names


def composed_check(mode: str, t_len: int | None = None,
                   eps: float = COMPOSED_EPS) -> float:
    """Worst relative gradient error of the full per-moment loss graph."""
    if t_len is None:
        t_len = 2 if mode in ("full", "fusion_memory",
                              "fusion_memory_exchange") else 1
    fn, arrays, _ = composed_fixture(mode, t_len)
    return ad.grad_check(fn, arrays, eps=eps)


def gradient_report(modes=("full",)) -> list:
    """Per-op results plus one composed row per requested mode."""
    rows = op_checks()
    for mode in modes:
        rows.append(("composed_" + mode, composed_check(mode)))
    return rows
