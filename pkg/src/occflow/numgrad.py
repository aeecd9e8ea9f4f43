"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the occupancy pipeline needs are supported.  Every op
records a tape entry when one of its inputs requires a gradient and a tape
is active::

    with Tape() as tape:
        y = ng.sum(ng.square(x))
    grads = backward(tape, y)
    grads[x.id]

"""
from __future__ import annotations

import itertools
import struct
from typing import Callable

import numpy as np

_ids = itertools.count()
_active: list["Tape"] = []

OPS = (
    "add", "mul", "matmul", "scatter_add", "gather", "softmax_lastdim",
    "sigmoid", "log", "square", "sum", "mean", "l2norm_lastdim",
    "cosine_sim_lastdim", "bilinear_sample_2d", "trilinear_scatter_weights",
    "reshape", "reciprocal",
)

COSINE_EPS = 1e-8


class NumericError(ValueError):
    """Raised when a tensor would contain NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeEntry:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so inputs always precede the
    entries that consume them.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.entries)


def _record(op: str, inputs: list[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs and _active:
        _active[-1].entries.append(TapeEntry(op, inputs, result, vjp))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from exc


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", [a, b], a.data + b.data,
                   lambda g: [_unbroadcast(g, sa), _unbroadcast(g, sb)])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", [a, b], ad * bd,
                   lambda g: [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)])


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign to avoid exp overflow
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _record("sigmoid", [x], out, lambda g: [g * out * (1.0 - out)])


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    d = x.data
    return _record("log", [x], np.log(d), lambda g: [g / d])


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data == 0):
        raise NumericError("reciprocal of zero")
    out = 1.0 / x.data
    return _record("reciprocal", [x], out, lambda g: [-g * out * out])


def square(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _record("square", [x], d * d, lambda g: [2.0 * g * d])


# -- reductions ----------------------------------------------------------------

def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, shape).copy()]

    return _record("sum", [x], x.data.sum(axis=axis), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.size if axis is None else shape[axis]
    if n == 0:
        raise ValueError("mean over empty axis")

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / n, shape).copy()]

    return _record("mean", [x], x.data.mean(axis=axis), vjp)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("softmax over empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax_lastdim", [x], s,
                   lambda g: [s * (g - (g * s).sum(axis=-1, keepdims=True))])


def l2norm_lastdim(x) -> Tensor:
    """Euclidean norm over the last axis; gradient is 0 at the origin."""
    x = as_tensor(x)
    d = x.data
    n = np.sqrt((d * d).sum(axis=-1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return [np.where((n > 0)[..., None], d / safe[..., None], 0.0) * g[..., None]]

    return _record("l2norm_lastdim", [x], n, vjp)


def cosine_sim_lastdim(a, b, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity over the last axis.

    Entries where either norm is below ``eps`` are defined as 0 with zero
    gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_sim_lastdim: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    ok = (na >= eps) & (nb >= eps)
    na_s = np.where(ok, na, 1.0)[..., None]
    nb_s = np.where(ok, nb, 1.0)[..., None]
    dot = (ad * bd).sum(axis=-1)
    cos = np.where(ok, dot / (na_s[..., 0] * nb_s[..., 0]), 0.0)
    cos = np.clip(cos, -1.0, 1.0)

    def vjp(g):
        gg = np.where(ok, g, 0.0)[..., None]
        c = cos[..., None]
        ga = gg * (bd / (na_s * nb_s) - c * ad / (na_s * na_s))
        gb = gg * (ad / (na_s * nb_s) - c * bd / (nb_s * nb_s))
        return [ga, gb]

    return _record("cosine_sim_lastdim", [a, b], cos, vjp)


# -- linear algebra / indexing -------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return [_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)]

    return _record("matmul", [a, b], np.matmul(ad, bd), vjp)


def _sorted_scatter(src: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Sum ``src`` rows into ``n`` slots, visiting contributions in
    destination order so the reduction is reproducible."""
    flat_idx = idx.reshape(-1)
    rows = src.reshape((flat_idx.size,) + src.shape[idx.ndim:])
    order = np.argsort(flat_idx, kind="stable")
    out = np.zeros((n,) + src.shape[idx.ndim:])
    np.add.at(out, flat_idx[order], rows[order])
    return out


def scatter_add(src, idx, n: int) -> Tensor:
    """``out[idx[k]] += src[k]`` over the leading ``idx.ndim`` axes."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if src.shape[:idx.ndim] != idx.shape:
        raise ValueError(f"scatter_add: index shape {idx.shape} vs source {src.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("scatter_add: index out of range")
    return _record("scatter_add", [src], _sorted_scatter(src.data, idx, n),
                   lambda g: [g[idx]])


def gather(x, idx) -> Tensor:
    """Rows of ``x`` selected along the first axis: ``x[idx]``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("gather: index out of range")
    return _record("gather", [x], x.data[idx], lambda g: [_sorted_scatter(g, idx, n)])


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record("reshape", [x], x.data.reshape(shape), lambda g: [g.reshape(old)])


# -- resampling ----------------------------------------------------------------

def _bilinear_taps(pos: np.ndarray, h: int, w: int):
    r0 = np.floor(pos[:, 0]).astype(np.int64)
    c0 = np.floor(pos[:, 1]).astype(np.int64)
    fr = pos[:, 0] - r0
    fc = pos[:, 1] - c0
    taps = []
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r, c = r0 + dr, c0 + dc
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w) & (wt != 0)
        taps.append((np.where(inside, r * w + c, 0), np.where(inside, wt, 0.0), inside))
    return taps


def bilinear_sample_2d(img, pos) -> Tensor:
    """Sample an ``(H, W, C)`` map at continuous ``(row, col)`` positions.

    Taps falling outside the map read zeros.  Positions are constants.
    """
    img = as_tensor(img)
    pos = np.asarray(pos, dtype=np.float64)
    if img.data.ndim != 3 or pos.ndim != 2 or pos.shape[1] != 2:
        raise ValueError("bilinear_sample_2d expects (H, W, C) map and (N, 2) positions")
    h, w, c = img.shape
    flat = img.data.reshape(h * w, c)
    taps = _bilinear_taps(pos, h, w)
    out = np.zeros((pos.shape[0], c))
    for lin, wt, inside in taps:
        out += np.where(inside[:, None], flat[lin], 0.0) * wt[:, None]

    def vjp(g):
        gi = np.zeros((h * w, c))
        for lin, wt, inside in taps:
            contrib = g * wt[:, None]
            gi += _sorted_scatter(contrib[inside], lin[inside], h * w)
        return [gi.reshape(h, w, c)]

    return _record("bilinear_sample_2d", [img], out, vjp)


CORNERS = np.array([[dh, dw, dz] for dh in (0, 1) for dw in (0, 1) for dz in (0, 1)],
                   dtype=np.int64)


def trilinear_corners(coords: np.ndarray) -> np.ndarray:
    """Integer lattice corners ``(N, 8, 3)`` of the cells containing ``coords``."""
    base = np.floor(np.asarray(coords, dtype=np.float64)).astype(np.int64)
    return base[:, None, :] + CORNERS[None, :, :]


def trilinear_scatter_weights(coords) -> Tensor:
    """Weights ``(N, 8)`` of the eight lattice corners around each point.

    Corner order matches :func:`trilinear_corners`.  The gradient with
    respect to the coordinates is the one-sided derivative from above at
    integer coordinates.
    """
    coords = as_tensor(coords)
    if coords.data.ndim != 2 or coords.shape[1] != 3:
        raise ValueError("trilinear_scatter_weights expects (N, 3) coordinates")
    p = coords.data
    frac = p - np.floor(p)
    # per-axis factor for the lower (0) and upper (1) corner
    fac = np.stack([1.0 - frac, frac], axis=-1)          # (N, 3, 2)
    dfac = np.broadcast_to(np.array([-1.0, 1.0]), fac.shape)
    ch, cw, cz = CORNERS[:, 0], CORNERS[:, 1], CORNERS[:, 2]
    fh, fw, fz = fac[:, 0, ch], fac[:, 1, cw], fac[:, 2, cz]
    out = fh * fw * fz

    def vjp(g):
        gh = (g * dfac[:, 0, ch] * fw * fz).sum(axis=1)
        gw = (g * fh * dfac[:, 1, cw] * fz).sum(axis=1)
        gz = (g * fh * fw * dfac[:, 2, cz]).sum(axis=1)
        return [np.stack([gh, gw, gz], axis=1)]

    return _record("trilinear_scatter_weights", [coords], out, vjp)


# -- dispatch ------------------------------------------------------------------

_DISPATCH = {
    "add": add, "mul": mul, "matmul": matmul, "scatter_add": scatter_add,
    "gather": gather, "softmax_lastdim": softmax_lastdim, "sigmoid": sigmoid,
    "log": log, "square": square, "sum": sum, "mean": mean,
    "l2norm_lastdim": l2norm_lastdim, "cosine_sim_lastdim": cosine_sim_lastdim,
    "bilinear_sample_2d": bilinear_sample_2d,
    "trilinear_scatter_weights": trilinear_scatter_weights, "reshape": reshape,
    "reciprocal": reciprocal,
}


def forward_op(name: str, inputs: list, **attrs) -> Tensor:
    """Apply primitive ``name``; non-tensor operands (indices, sizes,
    positions, axes) are passed as keyword attributes."""
    try:
        fn = _DISPATCH[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}") from None
    return fn(*inputs, **attrs)


def backward(tape: Tape, root: Tensor) -> dict[int, Tensor]:
    """Gradients of scalar ``root`` for every leaf on ``tape`` requiring one."""
    if root.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    produced = {e.output.id for e in tape.entries}
    if root.id not in produced:
        raise ValueError("root was not produced by this tape")

    grads: dict[int, np.ndarray] = {root.id: np.ones(())}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        for t in entry.inputs:
            if t.requires_grad and t.id not in produced:
                leaves[t.id] = t
        g = grads.pop(entry.output.id, None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.vjp(g)):
            if not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = np.asarray(gi, dtype=np.float64)
    return {i: Tensor(grads[i] if i in grads else np.zeros(t.shape))
            for i, t in leaves.items()}


def finite_diff(fn: Callable[[Tensor], object], x, step: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``fn`` at ``x``."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        out = fn(Tensor(arr.reshape(base.shape)))
        v = float(out.data if isinstance(out, Tensor) else out)
        if not np.isfinite(v):
            raise NumericError("finite_diff: function returned non-finite value")
        return v

    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = value(flat)
        flat[k] = orig - step
        fm = value(flat)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return Tensor(grad)


# -- tensor dump ---------------------------------------------------------------

TENSOR_MAGIC = b"OCLT"


def dumps_tensor(t) -> bytes:
    arr = np.ascontiguousarray(as_tensor(t).data, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def loads_tensor(buf: bytes) -> Tensor:
    if buf[:4] != TENSOR_MAGIC:
        raise ValueError("not an OCLT tensor dump")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 8 * n:
        raise ValueError("OCLT payload size does not match header")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
    return Tensor(data.astype(np.float64))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())
