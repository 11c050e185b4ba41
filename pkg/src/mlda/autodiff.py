"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation records a :class:`Node` on the active
:class:`Tape` when at least one input requires a gradient. :func:`backward`
replays the tape in reverse and returns a map from leaf ``node_id`` to its
gradient array.

Precision follows the input arrays: training uses float32, the gradient-check
suite builds the same graphs in float64.
"""
from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "Node", "Parameter", "ShapeError",
    "tensor", "no_grad", "backward", "sgd_step", "clip_grad_norm",
    "conv2d", "relu", "maxpool2x2", "linear", "sigmoid", "log", "add", "sub",
    "mul", "neg", "square", "mean", "sum", "flatten", "reshape", "transpose",
    "concat", "take", "clip", "log_softmax", "smooth_l1", "roi_pool", "grl",
    "cast", "save_checkpoint", "load_checkpoint",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


@dataclass
class Node:
    node_id: int
    kind: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default = Tape()
        self.enabled = True


_state = _State()


def _current_tape() -> Tape:
    return _state.stack[-1] if _state.stack else _state.default


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    result = Tensor(out)
    if _state.enabled and any(t.requires_grad for t in inputs):
        tape = next((t.tape for t in inputs if t.tape is not None), None) or _current_tape()
        result.requires_grad = True
        result.tape = tape
        tape.nodes.append(Node(result.node_id, kind, tuple(t.node_id for t in inputs), bwd))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and reductions

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {sa} and {sb}") from e
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: incompatible shapes {sa} and {sb}") from e
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    ad, bd = a.data, b.data
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2 * ad * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def cast(a: Tensor, dtype) -> Tensor:
    src = a.dtype
    return _record("cast", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _record("sum", np.asarray(a.data.sum(axis=axis)), (a,), bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=True),)

    return _record("mean", np.asarray(a.data.mean(axis=axis)), (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _record("log_softmax", out, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    d = a.data
    small = np.abs(d) < 1
    out = np.where(small, 0.5 * d * d, np.abs(d) - 0.5).astype(a.dtype)
    return _record("smooth_l1", out, (a,), lambda g: (g * np.where(small, d, np.sign(d)),))


def grl(x: Tensor, strength: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, gradient times ``-strength`` backward."""
    if strength < 0:
        raise ValueError(f"grl: strength must be nonnegative, got {strength}")
    s = -strength
    return _record("grl", x.data.copy(), (x,), lambda g: (g * s,))


# --------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from e
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor, start: int = 0) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a: Tensor, index) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take", a.data[idx], (a,), bwd)


# --------------------------------------------------------------------------
# layers

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        grads = [(g @ wd).reshape(xd.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, bwd)


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``x`` is C×H×W or N×C×H×W, ``weight`` Cout×Cin×k×k."""
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 3-d/4-d input and 4-d kernel, got {x.shape} and {weight.shape}")
    xd = x.data if batched else x.data[None]
    cout, cin, kh, kw = weight.shape
    n, c, h, w = xd.shape
    if c != cin:
        raise ShapeError(f"conv2d: input channels {c} != kernel in-channels {cin}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}×{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: padded input {hp}×{wp} smaller than kernel {k}×{k}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k, stride)  # n × (c·k·k) × (ho·wo), channel-major
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    if not batched:
        out = out[0]

    def bwd(g):
        g4 = (g if batched else g[None]).reshape(n, cout, ho * wo)
        if stride == 1 and padding <= k - 1:
            # full correlation of the output gradient with the flipped kernel
            q = k - 1 - padding
            gp = g4.reshape(n, cout, ho, wo)
            gp = np.pad(gp, ((0, 0), (0, 0), (q, q), (q, q))) if q else gp
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dx = np.matmul(wflip, _im2col(gp, k, 1)).reshape(n, c, h, w)
        else:
            dcols = np.matmul(wmat.T, g4).reshape(n, c, k, k, ho, wo)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        dx = np.ascontiguousarray(dx)
        grads = [dx if batched else dx[0]]
        grads.append(np.einsum("npq,nrq->pr", g4, cols).reshape(weight.shape) if n > 1
                     else (g4[0] @ cols[0].T).reshape(weight.shape))
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", out, inputs, bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2×2 max pooling, stride 2. Ties route the gradient to the first
    maximal element in row-major window order."""
    xd = x.data
    if xd.ndim < 2 or xd.shape[-1] % 2 or xd.shape[-2] % 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be even, got {xd.shape}")
    *lead, h, w = xd.shape
    win = xd.reshape(*lead, h // 2, 2, w // 2, 2)
    nd = len(lead)
    win = np.moveaxis(win, nd + 2, nd + 1).reshape(*lead, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        mask = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(mask, arg[..., None], g[..., None], axis=-1)
        mask = mask.reshape(*lead, h // 2, w // 2, 2, 2)
        mask = np.moveaxis(mask, nd + 2, nd + 1).reshape(*lead, h, w)
        return (mask,)

    return _record("maxpool2x2", out, (x,), bwd)


def _bin_range(start: float, end: float, size: int) -> tuple[int, int]:
    # cells whose centres fall in [start, end); empty -> nearest cell to the bin centre
    lo = max(int(np.ceil(start - 0.5)), 0)
    hi = min(int(np.ceil(end - 0.5)), size)
    if hi <= lo:
        c = min(max(int(np.floor(0.5 * (start + end))), 0), size - 1)
        return c, c + 1
    return lo, hi


def roi_bins(box, stride: float, height: int, width: int, out: int = 4) -> list[tuple[int, int, int, int]]:
    """Feature-cell rectangles ``(y0, y1, x0, x1)`` for each of ``out×out`` bins, row-major."""
    x1, y1, x2, y2 = (float(v) / stride for v in box)
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"roi_pool: degenerate proposal {tuple(box)}")
    bw, bh = (x2 - x1) / out, (y2 - y1) / out
    rows = [_bin_range(y1 + i * bh, y1 + (i + 1) * bh, height) for i in range(out)]
    cols = [_bin_range(x1 + j * bw, x1 + (j + 1) * bw, width) for j in range(out)]
    return [(r[0], r[1], c[0], c[1]) for r in rows for c in cols]


def roi_pool(feature: Tensor, boxes, stride: float = 16.0, out: int = 4) -> Tensor:
    """Max-pool each box (image pixels, x1 y1 x2 y2) of a C×H×W map into C×out×out.

    Returns J×C×out×out for J boxes.
    """
    fd = feature.data
    if fd.ndim != 3:
        raise ShapeError(f"roi_pool: expected C×H×W feature, got {fd.shape}")
    c, h, w = fd.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    nb = len(boxes)
    res = np.empty((nb, c, out * out), dtype=fd.dtype)
    flat_arg = np.empty((nb, c, out * out), dtype=np.intp)
    cell_index = np.arange(h * w).reshape(h, w)
    for j, box in enumerate(boxes):
        for b, (y0, y1, x0, x1) in enumerate(roi_bins(box, stride, h, w, out)):
            region = fd[:, y0:y1, x0:x1].reshape(c, -1)
            a = region.argmax(axis=1)
            res[j, :, b] = region[np.arange(c), a]
            flat_arg[j, :, b] = cell_index[y0:y1, x0:x1].reshape(-1)[a]
    res = res.reshape(nb, c, out, out)

    def bwd(g):
        dfeat = np.zeros((c, h * w), dtype=g.dtype)
        rows = np.broadcast_to(np.arange(c)[None, :, None], flat_arg.shape)
        np.add.at(dfeat, (rows, flat_arg), g.reshape(nb, c, -1))
        return (dfeat.reshape(c, h, w),)

    return _record("roi_pool", res, (feature,), bwd)


# --------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` for every leaf that requires grad, keyed by node_id.

    Consumes the tape that recorded ``loss``; the default tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        if loss.requires_grad:
            return {loss.node_id: np.ones_like(loss.data)}
        return {}
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(node.node_id)
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    if tape is _state.default:
        _state.default = Tape()
    return {k: v for k, v in grads.items() if k not in produced}


# --------------------------------------------------------------------------
# parameters and optimisation

class Parameter:
    """A named trainable tensor with its momentum buffer."""

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.array(values), requires_grad=True)
        self.velocity = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def clip_grad_norm(params: Iterable[Parameter], grads: dict[int, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    present = [p for p in params if p.tensor.node_id in grads]
    total = 0.0
    for p in present:
        total += float(np.sum(grads[p.tensor.node_id].astype(np.float64) ** 2))
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in present:
            g = grads[p.tensor.node_id]
            grads[p.tensor.node_id] = (g * scale).astype(g.dtype)
    return norm


def sgd_step(params: Iterable[Parameter], grads: dict[int, np.ndarray], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """v <- momentum*v + (grad + weight_decay*w);  w <- w - lr*v.

    Parameters without a gradient entry are left untouched.
    """
    if lr <= 0:
        raise ValueError(f"sgd_step: lr must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"sgd_step: momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"sgd_step: weight_decay must be >= 0, got {weight_decay}")
    for p in params:
        g = grads.get(p.tensor.node_id)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: gradient shape {g.shape} != parameter {p.name} shape {p.shape}")
        w = p.tensor.data
        dt = w.dtype.type
        p.velocity = dt(momentum) * p.velocity + (g + dt(weight_decay) * w)
        p.tensor.data = w - dt(lr) * p.velocity


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"MLDA"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float32 records."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an MLDA checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    return out
