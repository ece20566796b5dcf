"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations the reconstruction pipeline needs are
provided.  Differentiable ops record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient; the
inference-only ops (:func:`bilinear_upsample`, :func:`gaussian_smooth`)
never record anything.

Spatial tensors are laid out ``(batch, channel, height, width)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "conv2d",
    "conv_transpose2d",
    "leaky_relu",
    "cosine_distance_map",
    "mean_all",
    "batch_weighted_mean",
    "add",
    "backward",
    "bilinear_upsample",
    "gaussian_smooth",
    "gaussian_kernel",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable array value plus a ``requires_grad`` flag.

    The backing array is read-only.  Parameters are updated by rebinding
    ``data`` (see :meth:`assign`), never by writing into it.
    """

    __slots__ = ("_data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def assign(self, values: np.ndarray) -> None:
        values = np.array(values, dtype=DTYPE)
        if values.shape != self.shape:
            raise ShapeError(f"cannot assign {values.shape} to tensor of shape {self.shape}")
        values.setflags(write=False)
        self._data = values

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self._data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order, which is a valid topological order.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        produced = {id(r.output) for r in self.records}
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, root: Tensor, leaves: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
        """Propagate d(root)/d(.) back through the recorded ops.

        Returns a gradient for every leaf found on the tape plus every
        tensor passed in ``leaves``; leaves the root does not depend on get
        zeros.  The gradients are also stored on ``leaf.grad``.
        """
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            for t, g in zip(rec.inputs, rec.vjp(g_out)):
                if g is None or not t.requires_grad:
                    continue
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + g
                else:
                    grads[id(t)] = g
        out: dict[Tensor, np.ndarray] = {}
        for leaf in [*self.leaves(), *leaves]:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros(leaf.shape, dtype=DTYPE)
            leaf.grad = g
            out[leaf] = g
        return out


_TAPES: list[Tape] = []


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _TAPES[-1].records.append(_Record(op, tuple(inputs), out, vjp))
    return out


def backward(tape: Tape, root: Tensor, leaves: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    return tape.backward(root, leaves)


# ----------------------------------------------------------------------------
# convolution helpers


def _gather(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Patches of a padded input: (n, c, oh, ow, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _scatter(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_gather`: add (n, c, oh, ow, kh, kw) patches into (n, c, hp, wp)."""
    n, c, oh, ow, kh, kw = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += cols[
                :, :, :, :, i, j
            ]
    return out


def _check_4d(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {t.shape}")


def _check_conv_args(stride: int, padding: int) -> None:
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ValueError(f"padding must be a non-negative int, got {padding}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip). ``weight`` is (co, ci, kh, kw)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_4d("input", x)
    _check_4d("weight", weight)
    _check_conv_args(stride, padding)
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise ShapeError(f"conv2d: input has {ci} channels but weight {weight.shape} expects {wci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _gather(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # n, oh, ow, co
    out = out.transpose(0, 3, 1, 2)
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # n, oh, ow, ci, kh, kw
            gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
            gx = _scatter(gcols, hp, wp, stride)[:, :, padding : padding + h, padding : padding + w]
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _record("conv2d", inputs, out, vjp)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution (scatter-add). ``weight`` is (ci, co, kh, kw).

    With the same weight array, ``conv_transpose2d`` is the adjoint of
    :func:`conv2d` whenever the output extents line up.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_4d("input", x)
    _check_4d("weight", weight)
    _check_conv_args(stride, padding)
    n, ci, h, w = x.shape
    wci, co, kh, kw = weight.shape
    if wci != ci:
        raise ShapeError(f"conv_transpose2d: input has {ci} channels but weight {weight.shape} expects {wci}")
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    oh, ow = hp - 2 * padding, wp - 2 * padding
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {oh}x{ow}")

    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # n, h, w, co, kh, kw
    full = _scatter(cols.transpose(0, 3, 1, 2, 4, 5), hp, wp, stride)
    out = full[:, :, padding : padding + oh, padding : padding + ow]
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({co},)")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gx = gw = gb = None
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols = _gather(gp, kh, kw, stride, h, w)  # n, co, h, w, kh, kw
        if x.requires_grad:
            gx = np.tensordot(gcols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _record("conv_transpose2d", inputs, out, vjp)


# ----------------------------------------------------------------------------
# pointwise and reductions


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """max(x, slope*x) for slope in (0, 1); the derivative at 0 is ``slope``."""
    x = _as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def vjp(g):
        return (np.where(pos, g, slope * g),)

    return _record("leaky_relu", [x], out, vjp)


def cosine_distance_map(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """1 - cos over the channel axis at every spatial location -> (n, 1, h, w).

    Norms are floored at ``eps`` so all-zero vectors give distance 1.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_4d("a", a)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_distance_map: shapes differ {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    A, B = a.data, b.data
    dot = np.sum(A * B, axis=1, keepdims=True)
    na = np.sqrt(np.sum(A * A, axis=1, keepdims=True))
    nb = np.sqrt(np.sum(B * B, axis=1, keepdims=True))
    ma, mb = np.maximum(na, eps), np.maximum(nb, eps)
    cos = dot / (ma * mb)
    out = 1.0 - np.clip(cos, -1.0, 1.0)

    def vjp(g):
        # d(out) = -d(cos); the max() branch contributes only when the norm exceeds eps
        ga = gb = None
        if a.requires_grad:
            dcos = B / (ma * mb) - np.where(na > eps, cos / (ma * np.maximum(na, eps)), 0.0) * A
            ga = -g * dcos
        if b.requires_grad:
            dcos = A / (ma * mb) - np.where(nb > eps, cos / (mb * np.maximum(nb, eps)), 0.0) * B
            gb = -g * dcos
        return (ga, gb)

    return _record("cosine_distance_map", [a, b], out, vjp)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean_all of an empty tensor")
    n = x.size
    shape = x.shape
    out = np.array(x.data.sum() / n)

    def vjp(g):
        return (np.full(shape, float(g) / n, dtype=DTYPE),)

    return _record("mean_all", [x], out, vjp)


def batch_weighted_mean(x: Tensor, weights) -> Tensor:
    """sum_i weights[i] * mean(x[i]) over the leading (batch) axis.

    ``weights`` is a constant.  With weights = counts / total this equals
    ``mean_all`` of the batch in which sample i is repeated counts[i] times.
    """
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=DTYPE)
    if x.size == 0:
        raise ShapeError("batch_weighted_mean of an empty tensor")
    if w.shape != (x.shape[0],):
        raise ShapeError(f"need one weight per batch element, got {w.shape} for batch {x.shape[0]}")
    per = x.size // x.shape[0]
    shape = x.shape
    out = np.array(np.dot(w, x.data.reshape(shape[0], -1).sum(axis=1)) / per)

    def vjp(g):
        gw = (float(g) / per) * w
        return (np.broadcast_to(gw.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy(),)

    return _record("batch_weighted_mean", [x], out, vjp)


def add(*xs: Tensor) -> Tensor:
    """Elementwise sum of equally shaped tensors (summed left to right)."""
    if not xs:
        raise ValueError("add needs at least one operand")
    xs = tuple(_as_tensor(x) for x in xs)
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(f"add: shapes differ {shape} vs {t.shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out = out + t.data

    def vjp(g):
        return tuple(g for _ in xs)

    return _record("add", xs, out, vjp)


# ----------------------------------------------------------------------------
# inference-only map operations


def _interp_axis(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = np.arange(out_size, dtype=DTYPE)
    src = (d + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, src - i0


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-centre bilinear resampling with edge clamping (no gradient).

    Works for down-sampling too; the result is always bounded by the
    input's min and max and constants are reproduced exactly.
    """
    x = _as_tensor(x)
    _check_4d("input", x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    r0, r1, fr = _interp_axis(h, out_h)
    c0, c1, fc = _interp_axis(w, out_w)
    v = x.data
    top, bot = v[:, :, r0, :], v[:, :, r1, :]
    rows = top + fr[:, None] * (bot - top)
    left, right = rows[:, :, :, c0], rows[:, :, :, c1]
    return Tensor(left + fc * (right - left))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete Gaussian of radius ceil(3*sigma), normalised to sum to one."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=DTYPE)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _smooth_axis(v: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * v.ndim
    pad[axis] = (r, r)
    vp = np.pad(v, pad, mode="edge")
    win = sliding_window_view(vp, len(k), axis=axis)
    return win @ k


def gaussian_smooth(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur with replicate padding (no gradient)."""
    x = _as_tensor(x)
    _check_4d("input", x)
    k = gaussian_kernel(sigma)
    v = _smooth_axis(x.data, k, axis=2)
    v = _smooth_axis(v, k, axis=3)
    # rounding in the dot product may step an ulp outside the input range
    return Tensor(np.clip(v, x.data.min(), x.data.max()))
