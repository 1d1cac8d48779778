"""Minimal reverse-mode autodiff over dense float64 arrays.

Covers exactly the operator set the two-branch model needs: convolution,
pooling, region pooling, dense affine layers, elementwise nonlinearities and
reductions. Every op records its inputs on an implicit tape (the parent links
of the output tensor); ``backward`` on a scalar loss fills ``grad`` on every
reachable tensor with ``requires_grad=True``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import col2im, im2col


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operator's rules."""


class NonFiniteGradientError(RuntimeError):
    """Raised by the optimizer when a parameter gradient contains NaN/Inf."""


def _shape_fail(op, *shapes):
    raise ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate grads of every requires_grad tensor reachable from self."""
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError:
        _shape_fail("add", a.shape, b.shape)

    def back(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, mul_scalar(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError:
        _shape_fail("mul", a.shape, b.shape)

    def back(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=back)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def back(g):
        a._accumulate(g * s)

    return Tensor(a.data * s, _parents=(a,), _backward=back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        a._accumulate(g * mask)

    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,), _backward=back)


def logistic(a: Tensor) -> Tensor:
    # numerically stable on both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                 np.exp(np.minimum(a.data, 0)) / (1.0 + np.exp(np.minimum(a.data, 0))))

    def back(g):
        a._accumulate(g * y * (1.0 - y))

    return Tensor(y, _parents=(a,), _backward=back)


def log(a: Tensor) -> Tensor:
    def back(g):
        a._accumulate(g / a.data)

    return Tensor(np.log(a.data), _parents=(a,), _backward=back)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        a._accumulate(g * inside)

    return Tensor(np.clip(a.data, lo, hi), _parents=(a,), _backward=back)


def smooth_l1(a: Tensor) -> Tensor:
    """0.5 x^2 for |x|<1, |x|-0.5 otherwise, elementwise."""
    absx = np.abs(a.data)
    quad = absx < 1.0
    out = np.where(quad, 0.5 * a.data * a.data, absx - 0.5)

    def back(g):
        a._accumulate(g * np.where(quad, a.data, np.sign(a.data)))

    return Tensor(out, _parents=(a,), _backward=back)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    try:
        take_a = a.data >= b.data
    except ValueError:
        _shape_fail("maximum", a.shape, b.shape)

    def back(g):
        a._accumulate(_unbroadcast(g * take_a, a.shape))
        b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return Tensor(np.where(take_a, a.data, b.data), _parents=(a, b), _backward=back)


# ---------------------------------------------------------------------------
# reductions and reshaping


def tsum(a: Tensor) -> Tensor:
    def back(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return Tensor(a.data.sum(), _parents=(a,), _backward=back)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    return Tensor(a.data.mean(), _parents=(a,), _backward=back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=back)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather flat indices from a (flattened) tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    flat = a.data.reshape(-1)

    def back(g):
        gf = np.zeros(a.data.size)
        np.add.at(gf, idx, g.reshape(idx.shape))
        a._accumulate(gf.reshape(a.shape))

    return Tensor(flat[idx], _parents=(a,), _backward=back)


def concat0(tensors: list[Tensor]) -> Tensor:
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, o, n in zip(tensors, offsets, sizes):
            t._accumulate(g[o : o + n])

    return Tensor(np.concatenate([t.data for t in tensors], axis=0),
                  _parents=tuple(tensors), _backward=back)


def spatial_mean(a: Tensor) -> Tensor:
    """(C,H,W) -> (C,) global average pool."""
    if a.data.ndim != 3:
        _shape_fail("spatial_mean", a.shape)
    C, H, W = a.shape
    n = H * W

    def back(g):
        a._accumulate(np.broadcast_to(g[:, None, None] / n, a.shape))

    return Tensor(a.data.mean(axis=(1, 2)), _parents=(a,), _backward=back)


def spatial_max(a: Tensor) -> Tensor:
    """(C,H,W) -> (C,) global max pool; gradient to the first max per channel."""
    if a.data.ndim != 3:
        _shape_fail("spatial_max", a.shape)
    C = a.shape[0]
    flat = a.data.reshape(C, -1)
    arg = flat.argmax(axis=1)

    def back(g):
        gx = np.zeros_like(flat)
        gx[np.arange(C), arg] = g
        a._accumulate(gx.reshape(a.shape))

    return Tensor(flat[np.arange(C), arg], _parents=(a,), _backward=back)


def channel_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel of a (C,H,W) map to zero mean, unit variance.

    Parameter-free; statistics are per-channel over the spatial extent of the
    single sample, so the result is independent of batch composition.
    """
    if a.data.ndim != 3:
        _shape_fail("channel_norm", a.shape)
    C, H, W = a.shape
    n = H * W
    mu = a.data.mean(axis=(1, 2), keepdims=True)
    sigma = np.sqrt(a.data.var(axis=(1, 2), keepdims=True) + eps)
    y = (a.data - mu) / sigma

    def back(g):
        g_mu = g.mean(axis=(1, 2), keepdims=True)
        gy_mu = (g * y).mean(axis=(1, 2), keepdims=True)
        a._accumulate((g - g_mu - y * gy_mu) / sigma)

    return Tensor(y, _parents=(a,), _backward=back)


# ---------------------------------------------------------------------------
# dense / conv / pooling


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map. x: (in,) or (n,in); w: (out,in); b: (out,)."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[1] or b.data.shape != (w.data.shape[0],):
        _shape_fail("dense", x.shape, w.shape, b.shape)
    out_data = x.data @ w.data.T + b.data

    def back(g):
        if x.data.ndim == 1:
            x._accumulate(g @ w.data)
            w._accumulate(np.outer(g, x.data))
            b._accumulate(g)
        else:
            x._accumulate(g @ w.data)
            w._accumulate(g.T @ x.data)
            b._accumulate(g.sum(axis=0))

    return Tensor(out_data, _parents=(x, w, b), _backward=back)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution. x: (C,H,W); w: (F,C,k,k); b: (F,)."""
    if x.data.ndim != 3 or w.data.ndim != 4 or x.data.shape[0] != w.data.shape[1]:
        _shape_fail("conv2d", x.shape, w.shape)
    C, H, W = x.shape
    F, _, k, _ = w.shape
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        _shape_fail("conv2d", x.shape, w.shape)
    cols = im2col(np.ascontiguousarray(x.data), k, stride, pad)
    out_data = (w.data.reshape(F, -1) @ cols + b.data[:, None]).reshape(F, oh, ow)

    def back(g):
        gf = g.reshape(F, -1)
        w._accumulate((gf @ cols.T).reshape(w.shape))
        b._accumulate(gf.sum(axis=1))
        gcols = w.data.reshape(F, -1).T @ gf
        x._accumulate(col2im(np.ascontiguousarray(gcols), C, H, W, k, stride, pad))

    return Tensor(out_data, _parents=(x, w, b), _backward=back)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pool; ties broken by first (row-major) index."""
    if stride != k:
        raise ShapeError("maxpool2d: only stride == kernel supported")
    C, H, W = x.shape
    if H % k or W % k:
        _shape_fail("maxpool2d", x.shape)
    win = x.data.reshape(C, H // k, k, W // k, k).transpose(0, 1, 3, 2, 4).reshape(C, H // k, W // k, k * k)
    arg = win.argmax(axis=3)  # argmax takes the first maximal entry

    def back(g):
        gx = np.zeros((C, H // k, W // k, k * k))
        np.put_along_axis(gx, arg[..., None], g[..., None], axis=3)
        x._accumulate(gx.reshape(C, H // k, W // k, k, k).transpose(0, 1, 3, 2, 4).reshape(C, H, W))

    return Tensor(np.take_along_axis(win, arg[..., None], axis=3)[..., 0], _parents=(x,), _backward=back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of a (C,H,W) map."""
    C, H, W = x.shape

    def back(g):
        x._accumulate(g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)))

    return Tensor(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2), _parents=(x,), _backward=back)


def region_avg_pool(x: Tensor, region: tuple, grid: int) -> Tensor:
    """Average-pool a rectangular region of a (C,H,W) map into grid x grid bins.

    ``region`` is (x0, y0, x1, y1) in feature-map coordinates. Each bin
    averages every cell its extent overlaps; bins that overlap no cell are 0.
    """
    C, H, W = x.shape
    x0, y0, x1, y1 = region
    bins = []  # (i, j, rows slice, cols slice, count)
    for i in range(grid):
        by0 = y0 + (y1 - y0) * i / grid
        by1 = y0 + (y1 - y0) * (i + 1) / grid
        r0, r1 = int(np.floor(by0)), int(np.ceil(by1))
        r0, r1 = max(r0, 0), min(r1, H)
        for j in range(grid):
            bx0 = x0 + (x1 - x0) * j / grid
            bx1 = x0 + (x1 - x0) * (j + 1) / grid
            c0, c1 = int(np.floor(bx0)), int(np.ceil(bx1))
            c0, c1 = max(c0, 0), min(c1, W)
            if r1 > r0 and c1 > c0:
                bins.append((i, j, r0, r1, c0, c1))
    out_data = np.zeros((C, grid, grid))
    for i, j, r0, r1, c0, c1 in bins:
        out_data[:, i, j] = x.data[:, r0:r1, c0:c1].mean(axis=(1, 2))

    def back(g):
        gx = np.zeros_like(x.data)
        for i, j, r0, r1, c0, c1 in bins:
            gx[:, r0:r1, c0:c1] += g[:, i, j, None, None] / ((r1 - r0) * (c1 - c0))
        x._accumulate(gx)

    return Tensor(out_data, _parents=(x,), _backward=back)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named parameter tensors plus the set excluded from updates."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def items(self):
        return self.params.items()

    def freeze(self, names):
        self.frozen.update(n for n in names if n in self.params)

    def unfreeze_all(self):
        self.frozen.clear()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}


@dataclass
class OptimState:
    """Momentum SGD state: v <- m*v - lr*(g + wd*w); w <- w + v."""

    learning_rate: float
    momentum: float = 0.5
    weight_decay: float = 0.01
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0,1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: ParamStore, state: OptimState) -> None:
    """One momentum-SGD update over all non-frozen parameters."""
    for name, t in params.items():
        if name in params.frozen:
            continue
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter '{name}'")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = state.momentum * v - state.learning_rate * (g + state.weight_decay * t.data)
        state.velocity[name] = v
        t.data = t.data + v


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(build_loss, tensors: dict[str, Tensor], step: float = 1e-5,
               max_coords_per_tensor: int = 10, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` re-runs the forward pass from ``tensors`` and returns a
    scalar Tensor. Coordinates are subsampled per tensor when large. The
    relative error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        t.grad = None
    loss = build_loss(tensors)
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}
    worst = 0.0
    for k, t in tensors.items():
        n = t.data.size
        coords = np.arange(n) if n <= max_coords_per_tensor else rng.choice(n, max_coords_per_tensor, replace=False)
        flat = t.data.reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + step
            up = build_loss(tensors).item()
            flat[c] = keep - step
            down = build_loss(tensors).item()
            flat[c] = keep
            numeric = (up - down) / (2 * step)
            a = analytic[k].reshape(-1)[c]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization

_MAGIC = b"SCAM"
_VERSION = 1


def save_checkpoint(path, params: ParamStore, config_blob: bytes = b"") -> None:
    """Binary little-endian checkpoint; values stored as float32.

    Layout: magic "SCAM", u32 version, u32 config length + UTF-8 config blob,
    u32 parameter count, then per parameter: u32 name length + name, u32 rank,
    u32 extents, float32 values. Frozen status is not persisted.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(params.params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(t.data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes]:
    """Read a checkpoint back as (name -> float64 array, config blob)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {raw[:4]!r}")
    off = 4
    version, cfg_len = struct.unpack_from("<II", raw, off)
    off += 8
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config_blob = raw[off : off + cfg_len]
    off += cfg_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        extents = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(extents)) if rank else 1
        vals = np.frombuffer(raw, dtype="<f4", count=size, offset=off).astype(np.float64)
        off += 4 * size
        out[name] = vals.reshape(extents)
    return out, config_blob
