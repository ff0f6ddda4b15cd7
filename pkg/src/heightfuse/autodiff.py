"""Reverse-mode automatic differentiation on numpy arrays.

Small tape-based engine: each op builds a Tensor holding its inputs and a
closure that routes the output gradient back to them. backward() runs the
closures in reverse topological order. Training runs in float32; the
gradient checker builds float64 graphs so central differences measure
formula error rather than rounding noise.

Conventions pinned here and relied on by tests: abs and relu have zero
derivative at exactly 0, and reductions that pick an element (max, pooling)
break ties toward the first index in row-major order.
"""

from __future__ import annotations

import struct

import numpy as np

FLOAT_TYPES = (np.float32, np.float64)

VGFW_MAGIC = b"VGFW"
VGFW_VERSION = 1


def _as_array(x, dtype=None):
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.type not in FLOAT_TYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return "Tensor(shape={}, grad={})".format(self.shape, self.requires_grad)

    # a little operator sugar; everything else is a module function
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __sub__(self, other):
        return add(self, negate(_wrap(other, self.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.array(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Tensor):
    """Backpropagate from a scalar-sized tensor through the whole graph."""
    if root.data.size != 1:
        raise ValueError("backward needs a scalar output")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._backward is not None:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def negate(a):
    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bwd)


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def absolute(a):
    # derivative at exactly 0 is 0 (sign convention)
    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0), (a,), bwd)


# ---------------------------------------------------------------------------
# shape and gather ops

def reshape(a, shape):
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(parts, axis=0):
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        start = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accum(p, g[tuple(sl)])
            start += n

    return _make(out_data, parts, bwd)


def take_batch(a, i: int):
    """Select one leading-axis slice, keeping the axis (shape (1, ...))."""

    def bwd(g):
        full = np.zeros_like(a.data)
        full[i : i + 1] = g
        _accum(a, full)

    return _make(a.data[i : i + 1].copy(), (a,), bwd)


def reduce_sum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bwd)


def reduce_max(a, axis: int, keepdims=False):
    """Max along one axis; ties route the gradient to the first index."""
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        _accum(a, full)

    res = out_data if keepdims else np.squeeze(out_data, axis=axis)
    return _make(res, (a,), bwd)


def gather_spatial(a, batch_i: int, rows, cols):
    """Per-point feature lookup: out[m, c] = a[batch_i, c, rows[m], cols[m]]."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _, c, h, w = a.data.shape
    out_data = a.data[batch_i, :, rows, cols]  # (m, c)

    def bwd(g):
        flat = rows * w + cols
        tmp = np.zeros((h * w, c), dtype=g.dtype)
        np.add.at(tmp, flat, g)
        full = np.zeros_like(a.data)
        full[batch_i] = tmp.T.reshape(c, h, w)
        _accum(a, full)

    return _make(out_data, (a,), bwd)


def gather_cells(a, src: np.ndarray, fill: np.ndarray):
    """Re-index a flattened tensor: out[j] = a.flat[src[j]] where src[j] >= 0,
    else fill[j]. Output has the shape of src reshaped to a's shape."""
    src = np.asarray(src, dtype=np.int64).reshape(-1)
    flat = a.data.reshape(-1)
    out = np.where(src >= 0, flat[np.clip(src, 0, flat.size - 1)], fill.reshape(-1))

    def bwd(g):
        gf = g.reshape(-1)
        keep = src >= 0
        dflat = np.zeros_like(flat)
        np.add.at(dflat, src[keep], gf[keep])
        _accum(a, dflat.reshape(a.data.shape))

    return _make(out.reshape(a.data.shape).astype(a.dtype), (a,), bwd)


def resize_nearest(a, size):
    """Nearest-neighbor resize of the two trailing spatial axes."""
    n, c, h, w = a.data.shape
    sh, sw = size
    ri = np.floor(np.arange(sh) * h / sh).astype(np.int64)
    ci = np.floor(np.arange(sw) * w / sw).astype(np.int64)
    out_data = a.data[:, :, ri][:, :, :, ci]

    def bwd(g):
        sr = np.zeros((sh, h), dtype=g.dtype)
        sr[np.arange(sh), ri] = 1.0
        sc = np.zeros((sw, w), dtype=g.dtype)
        sc[np.arange(sw), ci] = 1.0
        _accum(a, np.einsum("oh,ncow,wv->nchv", sr, g, sc, optimize=True))

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def outer(a, b):
    """Outer product of two vectors: out[i, j] = a[i] * b[j]."""
    out_data = np.outer(a.data, b.data)

    def bwd(g):
        _accum(a, g @ b.data)
        _accum(b, a.data @ g)

    return _make(out_data, (a, b), bwd)


def linear(x, w, b=None):
    """Fully-connected layer: x (n, d) @ w (d, m) + b."""
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, bwd)


# ---------------------------------------------------------------------------
# convolution and pooling

def _im2col(xp, kh, kw, stride, ho, wo):
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (n, c, hp', wp', kh, kw)
    win = win[:, :, ::stride, ::stride]
    n, c = xp.shape[0], xp.shape[1]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution, NCHW layout, zero padding."""
    n, c, h, wd = x.data.shape
    f, c2, kh, kw = w.data.shape
    if c != c2:
        raise ValueError("conv2d channel mismatch")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(f, c * kh * kw)
    out = np.einsum("fk,nkl->nfl", w2, cols, optimize=True).reshape(n, f, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, f, 1, 1)

    def bwd(g):
        g2 = g.reshape(n, f, ho * wo)
        _accum(w, np.einsum("nfl,nkl->fk", g2, cols, optimize=True).reshape(w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.einsum("fk,nfl->nkl", w2, g2, optimize=True)
            dcols = dcols.reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, i, j
                    ]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accum(x, dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def max_pool2x2(x):
    """2x2 max pooling, stride 2. Ties go to the first window element."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("max_pool2x2 needs even spatial dims")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, 4
    )
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h, w
        )
        _accum(x, dx)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormState:
    """Running statistics for one batch-norm layer (per-channel)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self):
        out = BatchNormState(len(self.running_mean), self.running_mean.dtype)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batch_norm2d(x, gamma, beta, state: BatchNormState, training: bool,
                 momentum: float = 0.1, eps: float = 1e-5):
    """Spatial batch norm over (N, H, W) per channel.

    Training mode normalizes with biased batch statistics and folds them into
    the running estimates in place: run = (1 - momentum) * run + momentum * new.
    Inference mode is a pure affine map using the running estimates.
    """
    n, c, h, w = x.data.shape
    gshape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = ((1.0 - momentum) * state.running_mean + momentum * mu).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1.0 - momentum) * state.running_var + momentum * var).astype(
            state.running_var.dtype
        )
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(gshape)) * ivstd.reshape(gshape)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def bwd(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gxh = g * gamma.data.reshape(gshape)
        if training:
            m = n * h * w
            s1 = gxh.sum(axis=(0, 2, 3)).reshape(gshape)
            s2 = (gxh * xhat).sum(axis=(0, 2, 3)).reshape(gshape)
            dx = (gxh - s1 / m - xhat * s2 / m) * ivstd.reshape(gshape)
        else:
            dx = gxh * ivstd.reshape(gshape)
        _accum(x, dx)

    return _make(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(params, lr: float):
    """Plain SGD update in place; tensors without gradients are skipped."""
    for p in params.values() if isinstance(params, dict) else params:
        if p.requires_grad and p.grad is not None:
            p.data -= lr * p.grad


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def grad_check(fn, arrays, eps: float = 1e-3):
    """Compare analytic gradients of fn against central finite differences.

    fn maps a list of Tensors to a scalar Tensor. arrays are float64 numpy
    inputs; every element of every input is perturbed. Returns the worst
    relative error, |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(tensors)
    backward(out)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    def value(arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return float(fn(ts).data)

    worst = 0.0
    base = [t.data.copy() for t in tensors]
    for i, a in enumerate(base):
        flat = a.reshape(-1)
        ga = analytic[i].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = value(base)
            flat[j] = keep - eps
            dn = value(base)
            flat[j] = keep
            num = (up - dn) / (2.0 * eps)
            err = abs(ga[j] - num) / max(1.0, abs(ga[j]), abs(num))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# weight checkpoints

def save_weights(path, arrays: dict):
    """Write named float32 arrays to the binary checkpoint format.

    Entries are sorted by name so identical states always produce identical
    files. Round-trips are bit-exact.
    """
    with open(path, "wb") as fh:
        names = sorted(arrays)
        fh.write(struct.pack("<4sII", VGFW_MAGIC, VGFW_VERSION, len(names)))
        for name in names:
            data = np.asarray(arrays[name], dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(data).tobytes())


def load_weights(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = struct.calcsize("<4sII")
    if len(blob) < off:
        raise ValueError("truncated checkpoint")
    magic, version, count = struct.unpack_from("<4sII", blob, 0)
    if magic != VGFW_MAGIC:
        raise ValueError("bad magic, not a weight checkpoint")
    if version != VGFW_VERSION:
        raise ValueError("unsupported checkpoint version {}".format(version))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = []
        for _ in range(rank):
            (d,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape.append(d)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out[name] = arr.copy()
    if off != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return out
