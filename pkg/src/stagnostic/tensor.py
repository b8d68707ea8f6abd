"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on tensors that require gradients records a node carrying a
monotonically increasing ``tape_id``.  :func:`backward` collects the nodes
reachable from a scalar loss, visits them once in reverse append order and
accumulates gradients into the leaves.  The graph is released afterwards, so
a second call on the same loss raises.

Broadcasting is deliberately not supported: apart from Python scalars, binary
operands must have identical shapes.  Bias terms go through explicit ops
(:func:`add_bias`, the ``bias`` argument of :func:`conv2d`).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached the loss."""


class GraphConsumedError(RuntimeError):
    """``backward`` was called on a graph that has already been released."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional link into the computation tape.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    name : str, optional
        Label used in error messages (parameter names, for instance).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "tape_id",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"all extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self.tape_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable,
                op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out.tape_id = next(_ids)
        out._consumed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: add(neg(self), other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __getitem__ = lambda self, key: getitem(self, key)  # noqa: E731

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise TypeError("division is only defined by a Python scalar")
        return mul(self, 1.0 / float(other))


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         f"(broadcasting is only supported for scalars)")


# --------------------------------------------------------------------------- tape


class Tape:
    """Nodes reachable from a loss, in the order they were appended."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            node = stack.pop()
            if node.tape_id in seen:
                continue
            seen[node.tape_id] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda n: n.tape_id))

    def first_nonfinite(self) -> Tensor | None:
        for node in self.nodes:
            if not np.isfinite(node.data).all():
                return node
        return None

    def release(self) -> None:
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    Raises
    ------
    ShapeError
        If ``loss`` is not a single-element tensor.
    GraphConsumedError
        If the graph was already released by a previous call.
    NonFiniteError
        If the loss is NaN or infinite; the message names the first node (in
        tape order) holding a non-finite value.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward was already called on this graph; "
                                 "run the forward pass again")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_loss(loss)
    if not np.isfinite(loss.data).all():
        bad = tape.first_nonfinite()
        label = bad.name or bad.op
        raise NonFiniteError(f"non-finite value first appears at node {bad.tape_id} ({label})")

    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.tape_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.tape_id)
            grads[parent.tape_id] = pg if prev is None else prev + pg
    tape.release()


# ------------------------------------------------------------------ elementwise


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor._result(a.data + float(b), (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor._result(a.data - float(b), (a,), lambda g: (g,), "sub_scalar")
    _check_same(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product, or scaling when ``b`` is a Python scalar."""
    if _is_scalar(b):
        s = float(b)
        return Tensor._result(a.data * s, (a,), lambda g: (g * s,), "scale")
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


hadamard = mul


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor._result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every trailing ``b.shape`` slice of ``x``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} is not a trailing shape of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return Tensor._result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


# ------------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = sum(a, axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)
    result = mul(out, 1.0 / count)
    result.op = "mean"
    return result


# -------------------------------------------------------------------- structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics; a 2-D operand is shared across the batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), bw, "matmul")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                          bw, "concat")


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing (integers, slices, ``...``, ``None``)."""
    items = key if isinstance(key, tuple) else (key,)
    for k in items:
        if not (k is None or k is Ellipsis or isinstance(k, (int, slice, np.integer))):
            raise TypeError("only basic slicing is supported; use take() for index arrays")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return Tensor._result(np.array(a.data[key]), (a,), bw, "slice")


def take(a: Tensor, indices: Sequence[int], axis: int) -> Tensor:
    """Gather along ``axis``; used to reorder spatial columns."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (full,)

    return Tensor._result(np.take(a.data, idx, axis=ax), (a,), bw, "take")


# ----------------------------------------------------------------- convolutions


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           padding: tuple[int, int, int, int] = (0, 0, 0, 0)) -> Tensor:
    """2-D cross-correlation with zero padding ``(top, bottom, left, right)``.

    ``x`` is ``(Cin, H, W)`` or batched ``(B, Cin, H, W)``; ``kernel`` is
    ``(Cout, Cin, k1, k2)`` and ``bias`` (optional) is ``(Cout,)``.  Returns
    ``(B, Cout, H + top + bottom - k1 + 1, W + left + right - k2 + 1)``.
    """
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be (Cin,H,W) or (B,Cin,H,W), got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (Cout,Cin,k1,k2), got {kernel.shape}")
    cout, cin, k1, k2 = kernel.shape
    if xd.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels {xd.shape[1]} != kernel in-channels {cin}")
    top, bottom, left, right = padding
    if min(padding) < 0:
        raise ShapeError(f"conv2d: negative padding {padding}")
    hp, wp = xd.shape[2] + top + bottom, xd.shape[3] + left + right
    if k1 > hp:
        raise ShapeError(f"conv2d: kernel height {k1} exceeds padded input height {hp}")
    if k2 > wp:
        raise ShapeError(f"conv2d: kernel width {k2} exceeds padded input width {wp}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    if any(padding):
        xp = np.pad(xd, ((0, 0), (0, 0), (top, bottom), (left, right)))
    else:
        xp = xd
    windows = sliding_window_view(xp, (k1, k2), axis=(2, 3))  # B,Cin,Ho,Wo,k1,k2
    kd = kernel.data
    out = np.tensordot(windows, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]
    in_shape = xd.shape

    def bw(g):
        gb = g[None] if unbatched else g
        gk = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            cols = np.tensordot(gb, kd, axes=([1], [0]))  # B,Ho,Wo,Cin,k1,k2
            gxp = np.zeros((in_shape[0], cin, hp, wp))
            for m in range(k1):
                for n in range(k2):
                    gxp[:, :, m:m + ho, n:n + wo] += cols[:, :, :, :, m, n].transpose(0, 3, 1, 2)
            gx = gxp[:, :, top:top + in_shape[2], left:left + in_shape[3]]
            if unbatched:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out[0] if unbatched else out, parents, bw, "conv2d")


def conv_transpose_row(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Expand each ``T x 1`` channel into ``T x S`` with a learned row per channel.

    ``out[..., c, t, s] = x[..., c, t, 0] * kernel[c, 0, s] + bias[c]``.
    """
    if x.ndim not in (3, 4) or x.shape[-1] != 1:
        raise ShapeError(f"conv_transpose_row needs input (...,C,T,1), got {x.shape}")
    c = x.shape[-3]
    if kernel.ndim != 3 or kernel.shape[:2] != (c, 1):
        raise ShapeError(f"conv_transpose_row kernel must be ({c},1,S), got {kernel.shape}")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"conv_transpose_row bias must be ({c},), got {bias.shape}")
    xd, kd = x.data, kernel.data
    out = xd * kd
    if bias is not None:
        out = out + bias.data[:, None, None]
    lead = tuple(range(x.ndim - 3))

    def bw(g):
        gx = (g * kd).sum(axis=-1, keepdims=True)
        gk = (g * xd).sum(axis=lead + (x.ndim - 2,))[:, None, :]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=lead + (x.ndim - 2, x.ndim - 1)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out, parents, bw, "conv_transpose_row")


# ---------------------------------------------------------------- fused kernels


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray | None = None,
               var: np.ndarray | None = None, eps: float = 1e-7) -> Tensor:
    """Per-channel normalization of ``(B, C, ...)`` over every axis but 1.

    With ``mean``/``var`` omitted the batch statistics are used (train mode);
    otherwise the supplied statistics are treated as constants (eval mode).
    """
    if x.ndim < 2:
        raise ShapeError(f"batch_norm needs (B,C,...) input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    train = mean is None
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes, keepdims=True)
        v = x.data.var(axis=axes, keepdims=True)
    else:
        mu = np.asarray(mean, dtype=np.float64).reshape(bshape)
        v = np.asarray(var, dtype=np.float64).reshape(bshape)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - mu) * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    m = x.size // c

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if train:
            dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return Tensor._result(out, (x, gamma, beta), bw, "batch_norm")


def lstm_cell(pre: Tensor, c_prev: Tensor, ungated_candidate: bool = False) -> Tensor:
    """LSTM pointwise update from stacked gate pre-activations.

    ``pre`` is ``(B, 4H, ...)`` holding input, forget, candidate and output
    pre-activations in that order; ``c_prev`` is ``(B, H, ...)``.  Returns
    ``(B, 2H, ...)`` with the new hidden state in the first ``H`` channels
    and the new cell state in the last ``H``.  ``ungated_candidate`` drops the
    input-gate factor from the cell update.
    """
    h4 = pre.shape[1]
    if h4 % 4:
        raise ShapeError(f"lstm_cell: gate channels {h4} not divisible by 4")
    hdim = h4 // 4
    expected = (pre.shape[0], hdim) + pre.shape[2:]
    if c_prev.shape != expected:
        raise ShapeError(f"lstm_cell: cell state shape {c_prev.shape} != {expected}")
    # one tanh pass for all gates: sigmoid(x) = (tanh(x / 2) + 1) / 2
    scale = np.full((1, h4) + (1,) * (pre.ndim - 2), 0.5)
    scale[:, 2 * hdim:3 * hdim] = 1.0
    act = np.tanh(pre.data * scale)
    gates = act * 0.5
    gates += 0.5
    i = gates[:, :hdim]
    f = gates[:, hdim:2 * hdim]
    gc = act[:, 2 * hdim:3 * hdim]
    o = gates[:, 3 * hdim:]
    cp = c_prev.data
    out = np.empty((pre.shape[0], 2 * hdim) + pre.shape[2:])
    h, c = out[:, :hdim], out[:, hdim:]
    np.multiply(f, cp, out=c)
    c += gc if ungated_candidate else i * gc
    tc = np.tanh(c)
    np.multiply(o, tc, out=h)

    def bw(g):
        gh, gcell = g[:, :hdim], g[:, hdim:]
        # d(activation)/d(pre): 0.25 (1 - a^2) for sigmoid gates, 1 - a^2 for tanh
        slope = act * act
        np.subtract(1.0, slope, out=slope)
        slope *= scale * scale
        dc = tc * tc
        np.subtract(1.0, dc, out=dc)
        dc *= o
        dc *= gh
        dc += gcell
        dpre = np.empty_like(act)
        if ungated_candidate:
            dpre[:, :hdim] = 0.0
            dpre[:, 2 * hdim:3 * hdim] = dc
        else:
            np.multiply(dc, gc, out=dpre[:, :hdim])
            np.multiply(dc, i, out=dpre[:, 2 * hdim:3 * hdim])
        np.multiply(dc, cp, out=dpre[:, hdim:2 * hdim])
        np.multiply(gh, tc, out=dpre[:, 3 * hdim:])
        dpre *= slope
        dc *= f
        return dpre, dc

    return Tensor._result(out, (pre, c_prev), bw, "lstm_cell")


# --------------------------------------------------------------- gradient check


def numerical_gradient(fn: Callable[[], Tensor], wrt: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``wrt``."""
    grad = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = fn().item()
            flat[idx] = orig - h
            down = fn().item()
            flat[idx] = orig
            gflat[idx] = (up - down) / (2.0 * h)
    return grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              rtol: float = 1e-4, atol: float = 1e-8) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    Returns the worst relative discrepancy; raises ``AssertionError`` naming
    the input and index when an entry differs by more than ``atol`` and more
    than ``rtol`` relative to the larger magnitude.
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    worst = 0.0
    for k, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_gradient(fn, t, h)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        bad = (diff > atol) & (diff > rtol * scale)
        if bad.any():
            pos = np.unravel_index(np.argmax(np.where(bad, diff, -1.0)), t.shape)
            raise AssertionError(
                f"gradient mismatch for input {t.name or k} at {pos}: "
                f"analytic={analytic[pos]!r} numeric={numeric[pos]!r}")
        rel = np.where(diff > atol, diff / np.maximum(scale, atol), 0.0)
        worst = max(worst, float(rel.max()))
    return worst
