"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Tensors are thin wrappers around ``np.ndarray``. While a :class:`Tape` is
active (``with Tape() as tape:``) every operation is appended to it, and
``tape.backward(root)`` replays the recorded operations in reverse.

Elementwise operations never broadcast: operands must have equal shapes and
any expansion is explicit (:func:`expand`). ``matmul`` accepts leading batch
axes on at most one operand, which covers both ``X @ W`` (weights shared over
a batch) and ``L @ X`` (a graph operator shared over a batch).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "AutodiffError",
    "DimensionError",
    "DomainError",
    "Tensor",
    "Tape",
    "active_tape",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "reshape",
    "flatten",
    "transpose",
    "concat",
    "stack",
    "expand",
    "mask_mul",
    "pad",
    "softmax",
    "cross_entropy",
    "conv2d",
    "backward",
    "grad_of_intermediate",
]


class AutodiffError(RuntimeError):
    """Misuse of the tape (non-scalar root, tensor not recorded, ...)."""


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _all_finite(a: np.ndarray) -> bool:
    # a finite sum implies finite entries; only fall back to the elementwise test on overflow
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(a.sum()):
            return True
    return bool(np.isfinite(a).all())


class Tensor:
    """Dense float64 array with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        data = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise DomainError("tensor values must be finite")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        if data.dtype != np.float64:
            data = data.astype(np.float64)
        if not _all_finite(data):
            raise DomainError("operation produced non-finite values")
        t.data = data
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


Backward = Callable[[np.ndarray, tuple], tuple]


@dataclass
class _Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Optional[Backward]


class Tape:
    """Ordered record of operations; replayed in reverse by :meth:`backward`.

    A tape belongs to the thread that entered it. Several tapes may be alive
    at once in different threads.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._pos: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise AutodiffError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def position(self, t: Tensor) -> int:
        try:
            return self._pos[id(t)]
        except KeyError:
            raise AutodiffError("tensor is not recorded on this tape") from None

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._pos

    def record(self, kind: str, inputs: tuple, output: Tensor, backward: Backward) -> None:
        for t in inputs:
            if id(t) not in self._pos:
                self._pos[id(t)] = len(self.nodes)
                self.nodes.append(_Node("leaf", (), t, None))
        self._pos[id(output)] = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, output, backward))

    def backward(self, root: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> dict:
        """Gradients of the scalar ``root``.

        Without ``wrt`` the result maps every ``requires_grad`` leaf recorded
        before ``root`` to its gradient array. With ``wrt`` only those tensors
        are returned and propagation is pruned to paths that reach them.
        """
        if root.size != 1:
            raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")
        root_pos = self.position(root)

        if wrt is None:
            def relevant(t: Tensor) -> bool:
                return t.requires_grad
            start = 0
        else:
            wanted = {id(t) for t in wrt}
            positions = [self.position(t) for t in wrt]
            start = min(positions)
            live = set(wanted)
            for node in self.nodes[start:root_pos + 1]:
                if node.inputs and any(id(i) in live for i in node.inputs):
                    live.add(id(node.output))

            def relevant(t: Tensor) -> bool:
                return id(t) in live

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for pos in range(root_pos, start - 1, -1):
            node = self.nodes[pos]
            if node.backward is None:
                continue
            g = grads.get(id(node.output))
            if g is None:
                continue
            needs = tuple(relevant(t) for t in node.inputs)
            if not any(needs):
                continue
            in_grads = node.backward(g, needs)
            for t, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            if wrt is None or id(node.output) not in wanted:
                del grads[id(node.output)]

        if wrt is not None:
            return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}
        out = {}
        for node in self.nodes[:root_pos]:
            if node.kind == "leaf" and node.output.requires_grad:
                t = node.output
                out[t] = grads.get(id(t), np.zeros_like(t.data))
        return out

    def grad_of_intermediate(self, root: Tensor, intermediate: Tensor) -> Tensor:
        """d(root)/d(intermediate) as a detached constant tensor."""
        if not self.contains(intermediate):
            raise AutodiffError("intermediate is not recorded on this tape")
        if self.position(intermediate) >= self.position(root):
            raise AutodiffError("intermediate was created after the output")
        g = self.backward(root, wrt=[intermediate])[intermediate]
        return Tensor._wrap(np.array(g), False)


def backward(root: Tensor, tape: Optional[Tape] = None) -> dict:
    tape = active_tape() if tape is None else tape
    if tape is None:
        raise AutodiffError("no active tape")
    return tape.backward(root)


def grad_of_intermediate(root: Tensor, intermediate: Tensor, tape: Optional[Tape] = None) -> Tensor:
    tape = active_tape() if tape is None else tape
    if tape is None:
        raise AutodiffError("no active tape")
    return tape.grad_of_intermediate(root, intermediate)


def _emit(kind: str, data: np.ndarray, inputs: tuple, bwd: Backward) -> Tensor:
    out = Tensor._wrap(data, any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None:
        tape.record(kind, inputs, out, bwd)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``a`` (..., m, k) @ ``b`` (k, n), or ``a`` (m, k) @ ``b`` (..., k, n).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2:
        raise DimensionError("matmul supports batch axes on one operand only")
    A, B = a.data, b.data

    if b.ndim == 2:
        out = A @ B

        def bwd(g, needs):
            ga = g @ B.T if needs[0] else None
            gb = None
            if needs[1]:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        out = np.matmul(A, B)
        batch = tuple(range(B.ndim - 2))

        def bwd(g, needs):
            ga = None
            if needs[0]:
                # sum over batch of g @ B^T
                ga = np.tensordot(g, B, axes=(batch + (g.ndim - 1,), batch + (B.ndim - 1,)))
            gb = np.matmul(A.T, g) if needs[1] else None
            return ga, gb

    return _emit("matmul", out, (a, b), bwd)


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g, n: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g, n: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g, n: (g * B if n[0] else None, g * A if n[1] else None))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    A, B = a.data, b.data
    if np.any(B == 0):
        raise DomainError("division by zero")
    out = A / B

    def bwd(g, needs):
        return (g / B if needs[0] else None, -g * out / B if needs[1] else None)

    return _emit("div", out, (a, b), bwd)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g, n: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g, n: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", a.data + float(c), (a,), lambda g, n: (g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _emit("relu", out, (a,), lambda g, n: (g * (out > 0),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):           # overflow surfaces as a DomainError below
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g, n: (g * out,))


def log(a: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log. With ``floor`` values below it are clamped (zero gradient there)."""
    A = a.data
    if floor is None:
        if np.any(A <= 0):
            raise DomainError("log of non-positive value")
        return _emit("log", np.log(A), (a,), lambda g, n: (g / A,))
    keep = A >= floor
    safe = np.where(keep, A, floor)
    return _emit("log", np.log(safe), (a,), lambda g, n: (np.where(keep, g / safe, 0.0),))


def mask_mul(a: Tensor, mask) -> Tensor:
    """Multiply by a constant array of the same shape; no gradient reaches the mask."""
    M = np.asarray(mask, dtype=np.float64)
    if M.shape != a.shape:
        raise DimensionError(f"mask shape {M.shape} does not match {a.shape}")
    return _emit("mask_mul", a.data * M, (a,), lambda g, n: (g * M,))


# --------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bwd(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, n: (g.reshape(src),))


def flatten(a: Tensor, start: int = 0) -> Tensor:
    """Merge all axes from ``start`` onwards (``start=0`` gives a vector)."""
    start %= max(a.ndim, 1)
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g, n: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis %= ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise DimensionError("concat shapes differ outside the concat axis")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bwd(g, needs):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _emit("stack", out, tensors, bwd)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (repeat) to ``shape``; backward sums the copies."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0:
        raise DimensionError("expand cannot drop axes")
    src = a.shape
    for s, t in zip(src, shape[lead:]):
        if s != t and s != 1:
            raise DimensionError(f"cannot expand {src} to {shape}")
    rep_axes = tuple(range(lead)) + tuple(
        lead + i for i, (s, t) in enumerate(zip(src, shape[lead:])) if s == 1 and t != 1
    )
    out = np.broadcast_to(a.data, shape).copy()

    def bwd(g, needs):
        g = g.sum(axis=rep_axes, keepdims=True) if rep_axes else g
        return (g.reshape(src),)

    return _emit("expand", out, (a,), bwd)


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise DimensionError("pad widths must cover every axis")
    out = np.pad(a.data, widths)
    index = tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, a.shape))
    return _emit("pad", out, (a,), lambda g, n: (g[index],))


# --------------------------------------------------------------------------
# probability


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, needs):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (a,), bwd)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("label out of range")
    return np.eye(n_classes)[labels]


def cross_entropy(p: Tensor, labels, floor: float = 1e-12) -> Tensor:
    """-log p[label], averaged over any leading (batch) axes."""
    labels = np.asarray(labels)
    if p.shape[:-1] != labels.shape:
        raise DimensionError(f"labels shape {labels.shape} does not match {p.shape[:-1]}")
    picked = sum(mask_mul(p, one_hot(labels, p.shape[-1])), axis=-1)
    return neg(mean(log(picked, floor=floor)))


# --------------------------------------------------------------------------
# convolution


def _block_width(width: int, cap: int = 8) -> int:
    return max(d for d in range(1, min(width, cap) + 1) if width % d == 0)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Same-padded 2-D cross-correlation in row layout.

    ``x`` is (..., H, Cin, W) and ``w`` is (Cout, Cin, kh, kw) with odd
    kernel extents; the result is (..., H, Cout, W). ``b`` (Cout,) is an
    optional per-channel bias.

    The W axis is cut into blocks of at most 8 columns plus a halo. Each
    (row, block) window of the padded input is one row of a patch matrix, and
    the whole kernel becomes a single banded matrix, so both passes are
    GEMMs. Rows are processed in cache-sized chunks and patches are rebuilt
    in the backward pass rather than kept.
    """
    if w.ndim != 4 or x.ndim < 3:
        raise DimensionError("conv2d expects x (..., H, Cin, W) and w (Cout, Cin, kh, kw)")
    cout, cin, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("kernel extents must be odd")
    if x.shape[-2] != cin:
        raise DimensionError(f"input has {x.shape[-2]} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},)")
    lead = x.shape[:-3]
    H, W = x.shape[-3], x.shape[-1]
    n = int(np.prod(lead)) if lead else 1
    ph, pw = kh // 2, kw // 2
    bw = _block_width(W)
    nb = W // bw
    span = bw + 2 * pw
    # S[j, u, v] = 1 when block input column u feeds output column v through tap j
    S = np.zeros((kw, span, bw))
    for j in range(kw):
        S[j, np.arange(bw) + j, np.arange(bw)] = 1.0

    band = np.einsum("ocij,juv->ciuov", w.data, S).reshape(cin * span * kh, cout * bw)
    X = x.data.reshape(n, H, cin, W)
    # rows per chunk, sized so one patch matrix stays around 1 MB
    step = max(1, (1 << 17) // (H * nb * cin * span * kh))

    def patches(lo, hi):
        m = hi - lo
        Xp = np.zeros((m, H + 2 * ph, cin, W + 2 * pw))
        Xp[:, ph:ph + H, :, pw:pw + W] = X[lo:hi]
        blocks = sliding_window_view(Xp, span, axis=-1)[..., ::bw, :]      # m, H+2ph, cin, nb, span
        P = np.empty((m, H, nb, cin, kh, span))
        P[...] = sliding_window_view(blocks, kh, axis=1).transpose(0, 1, 3, 2, 5, 4)
        return P.reshape(m * H * nb, cin * span * kh)

    out = np.empty(lead + (H, cout, W))
    view = out.reshape(n, H, cout, nb, bw)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        Y = (patches(lo, hi) @ band).reshape(hi - lo, H, nb, cout, bw).transpose(0, 1, 3, 2, 4)
        if b is None:
            view[lo:hi] = Y
        else:
            np.add(Y, b.data[:, None, None], out=view[lo:hi])
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g, needs):
        G = g.reshape(n, H, cout, nb, bw)
        gX = np.zeros((n, H, cin, W)) if needs[0] else None
        gband = np.zeros((cin * span * kh, cout * bw)) if needs[1] else None
        gb = np.zeros(cout * bw) if b is not None and needs[2] else None
        for lo in range(0, n, step):
            hi = min(n, lo + step)
            Gb = np.empty((hi - lo, H, nb, cout, bw))
            Gb[...] = G[lo:hi].transpose(0, 1, 3, 2, 4)
            Gb = Gb.reshape(-1, cout * bw)
            if gX is not None:
                gp = (Gb @ band.T).reshape(hi - lo, H, nb, cin, kh, span)
                dst = gX[lo:hi]
                # padded row r = h + i lands on data row r - ph; padded column k*bw + u on u + k*bw - pw
                for i in range(kh):
                    h0, h1 = max(0, ph - i), min(H, H + ph - i)
                    for k in range(nb):
                        u0 = max(0, pw - k * bw)
                        u1 = min(span, W + pw - k * bw)
                        dst[:, h0 + i - ph:h1 + i - ph, :, u0 + k * bw - pw:u1 + k * bw - pw] += \
                            gp[:, h0:h1, k, :, i, u0:u1]
            if gband is not None:
                gband += patches(lo, hi).T @ Gb
            if gb is not None:
                gb += np.ones(len(Gb)) @ Gb
        gx = gX.reshape(x.shape) if gX is not None else None
        gw = None
        if gband is not None:
            gw = np.einsum("ciuov,juv->ocij", gband.reshape(cin, kh, span, cout, bw), S)
        if gb is not None:
            gb = gb.reshape(cout, bw).sum(axis=1)
        return gx, gw, gb

    return _emit("conv2d", out, inputs, bwd)
