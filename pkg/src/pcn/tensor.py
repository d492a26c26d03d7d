"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients.  ``backward`` walks the tape in reverse topological order.
Shapes are strict: apart from scalar-tensor products there is no implicit
broadcasting, bias additions go through :func:`add_bias`.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError, NumericError

_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def enable_grad():
    """Re-enable recording, e.g. for an inner fit run under ``no_grad``."""
    prev = _grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_ids)
        out.name = None
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# -- backward -----------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every tracked node."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# -- elementwise ----------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return Tensor._result(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a 0-d tensor."""
    if b.ndim == 0:
        return Tensor._result(
            a.data * b.data, (a, b), lambda g: (g * b.data, np.sum(g * a.data))
        )
    _same_shape(a, b, "mul")
    return Tensor._result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return Tensor._result(a.data.sum(axis=ax), (a,), bw)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


# -- shape ops ------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape {old} -> {tuple(shape)}: {e}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise DimensionError("transpose without axes needs a 2-d tensor")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat along {axis}: incompatible shapes {[x.shape for x in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def take_rows(a: Tensor, rows: Sequence[int]) -> Tensor:
    """Select entries along axis 0; gradient scatters back (row-selection)."""
    idx = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(a.data[idx], (a,), bw)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return Tensor._result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, bias: Tensor, axis: int) -> Tensor:
    """Add a 1-d ``bias`` along ``axis`` of ``x`` (explicit, shape-checked broadcast)."""
    ax = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[ax]:
        raise DimensionError(f"bias of shape {bias.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[ax] = -1
    other = tuple(i for i in range(x.ndim) if i != ax)
    return Tensor._result(
        x.data + bias.data.reshape(view), (x, bias), lambda g: (g, g.sum(axis=other))
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ weight + bias``; each row of ``x`` is a token."""
    out = matmul(x, weight)
    return out if bias is None else add_bias(out, bias, axis=1)


# -- convolution ----------------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    padding: int = 0,
    stride: int = 1,
) -> Tensor:
    """Zero-padded 2-d cross-correlation.

    ``x`` is ``(cin, h, w)`` or batched ``(n, cin, h, w)``; ``kernel`` is
    ``(cout, cin, k, k)``.
    """
    single = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks input {x.shape}, kernel {kernel.shape}")
    xd = x.data[None] if single else x.data
    n, cin, h, w = xd.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if k != k2:
        raise DimensionError("conv2d: kernel must be square")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = _windows(xp, k, stride, ho, wo)  # n, cin, ho, wo, k, k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g = g[None] if single else g
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gk = (gmat.T @ cols).reshape(kernel.shape)
        dcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        dx = dx[0] if single else dx
        grads = [dx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out[0] if single else out, parents, bw)


def _bin_edges(size: int, bins: int) -> list[tuple[int, int]]:
    return [((i * size) // bins, -((-(i + 1) * size) // bins)) for i in range(bins)]


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Average over a ``bins x bins`` partition of the trailing two axes."""
    if bins < 1 or bins > x.shape[-1] or bins > x.shape[-2]:
        raise DimensionError(f"adaptive_avg_pool: {bins} bins for spatial {x.shape[-2:]}")
    h, w = x.shape[-2:]
    rows, cols = _bin_edges(h, bins), _bin_edges(w, bins)
    out = np.empty(x.shape[:-2] + (bins, bins))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[..., i, j] = x.data[..., r0:r1, c0:c1].mean(axis=(-2, -1))
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                dx[..., r0:r1, c0:c1] += g[..., i, j][..., None, None] / area
        return (dx,)

    return Tensor._result(out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each of the trailing two axes' entries ``factor`` times."""
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    shape = x.shape

    def bw(g):
        h, w = shape[-2:]
        return (g.reshape(shape[:-2] + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return Tensor._result(out, (x,), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError("avg_pool2 needs even spatial dims")
    shape = x.shape
    out = x.data.reshape(shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0,)

    return Tensor._result(out, (x,), bw)


# -- probabilities --------------------------------------------------------------

def _check_finite(a: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._result(p, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), bw)


def cross_entropy(
    scores: Tensor,
    target,
    class_weights=None,
    ignore_id: int | None = None,
) -> Tensor:
    """Weighted mean pixel cross-entropy.

    ``scores`` is ``(c, n_pix)`` (raw, softmaxed internally over axis 0);
    ``target`` holds integer class indices in ``[0, c)`` or ``ignore_id``.
    The mean is normalised by the summed weights of the counted pixels.
    """
    if scores.ndim != 2:
        raise DimensionError(f"cross_entropy expects (c, n_pix) scores, got {scores.shape}")
    c, n = scores.shape
    t = np.asarray(target.data if isinstance(target, Tensor) else target).astype(np.int64).ravel()
    if t.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} score columns but {t.shape[0]} targets")
    keep = np.ones(n, dtype=bool) if ignore_id is None else t != ignore_id
    bad = keep & ((t < 0) | (t >= c))
    if bad.any():
        raise LabelError(f"target id {int(t[bad][0])} outside [0, {c})")
    w = np.ones(c) if class_weights is None else np.asarray(
        class_weights.data if isinstance(class_weights, Tensor) else class_weights, dtype=np.float64
    )
    if w.shape != (c,):
        raise DimensionError(f"class_weights shape {w.shape} != ({c},)")
    cols = np.nonzero(keep)[0]
    tk = t[cols]
    pix_w = w[tk]
    denom = pix_w.sum()
    if denom <= 0:
        raise NumericError("cross_entropy: no weighted pixels to average")
    _check_finite(scores.data, "cross_entropy")
    z = scores.data - scores.data.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    loss = -(pix_w * logp[tk, cols]).sum() / denom

    def bw(g):
        p = np.exp(logp[:, cols])
        p[tk, np.arange(cols.size)] -= 1.0
        dz = np.zeros((c, n))
        dz[:, cols] = p * (pix_w / denom)
        return (dz * g,)

    return Tensor._result(np.asarray(loss), (scores,), bw)
