"""Dense tensors with a reverse-mode differentiation tape.

A :class:`Tensor` wraps a numpy array. Tensors produced from at least one
taped input are recorded on that :class:`Tape`; everything else is a plain
constant and costs nothing beyond the numpy call. ``backward`` walks the tape
in reverse insertion order and returns a ``{node_id: gradient}`` map.

Arithmetic is float64 unless a :func:`precision` block selects float32
(used by the training loops; gradient checks stay in float64).

    tape = Tape()
    w = tape.watch(np.ones((3, 2)))
    loss = sum_(matmul(x, w))
    grads = backward(loss)
    grads[w.node]
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np

from . import kernels as K
from .errors import ContractError, DimensionError

DEBUG = bool(os.environ.get("XPTLAB_DEBUG"))

ArrayLike = Union["Tensor", np.ndarray, float, int]

_DTYPE = np.dtype(np.float64)


def compute_dtype() -> np.dtype:
    return _DTYPE


@contextmanager
def precision(dtype):
    """Run tensor arithmetic in ``dtype`` (float32 or float64) inside the block.

    Process-wide setting: do not mix precisions across threads.
    """
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ContractError(f"unsupported precision {dt}")
    prev, _DTYPE = _DTYPE, dt
    try:
        yield dt
    finally:
        _DTYPE = prev

class _Node(NamedTuple):
    kind: str
    inputs: tuple
    vjp: Callable | None


class Tape:
    """Append-only record of differentiable operations.

    Node ids are list positions, so every node's inputs precede it.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value: ArrayLike) -> "Tensor":
        """Register a leaf (a parameter to differentiate against)."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=_DTYPE)
        self.nodes.append(_Node("leaf", (), None))
        return Tensor(data, len(self.nodes) - 1, self)

    def _record(self, kind: str, data: np.ndarray, inputs: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(kind, ids, vjp))
        return Tensor(data, len(self.nodes) - 1, self)

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        if loss.tape is not self or loss.node is None:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for node_id in range(loss.node, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp is None or gi is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = gi if prev is None else prev + gi
        return grads


class Tensor:
    """An array in the current compute dtype, optionally tied to a tape node."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: int | None = None, tape: Tape | None = None):
        if type(data) is np.ndarray and data.dtype == _DTYPE:
            arr = data
        else:
            arr = np.asarray(data, dtype=_DTYPE)
        if DEBUG and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values produced")
        self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if type(x) is Tensor else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors from different tapes cannot be combined")
            tape = t.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every node it depends on."""
    if loss.tape is None:
        raise ContractError("loss is not on a tape")
    return loss.tape.backward(loss)


# --- elementwise ---------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if a.tape is None and b.tape is None:
        return Tensor(out)
    tape = _tape_of(a, b)
    sa, sb = a.shape, b.shape
    return tape._record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.tape is None:
        return Tensor(-a.data)
    return a.tape._record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    return tape._record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape) if a.tape else None,
                   _unbroadcast(g * ad, bd.shape) if b.tape else None),
    )


def gelu(x: ArrayLike) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    xd = np.ascontiguousarray(x.data).reshape(-1)
    out, t = K.gelu_fwd(xd)
    shape = x.shape
    out = out.reshape(shape)
    if x.tape is None:
        return Tensor(out)
    return x.tape._record(
        "gelu", out, (x,),
        lambda g: (K.gelu_bwd(np.ascontiguousarray(g).reshape(-1), xd, t).reshape(shape),),
    )


# --- shape ---------------------------------------------------------------


def reshape(x: ArrayLike, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    if x.tape is None:
        return Tensor(out)
    s = x.shape
    return x.tape._record("reshape", out, (x,), lambda g: (g.reshape(s),))


def transpose(x: ArrayLike, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    if x.tape is None:
        return Tensor(out)
    inv = None if axes is None else tuple(np.argsort(axes))
    return x.tape._record("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def broadcast_to(x: ArrayLike, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape)
    if x.tape is None:
        return Tensor(out)
    s = x.shape
    return x.tape._record("broadcast", out, (x,), lambda g: (_unbroadcast(g, s),))


def concat(xs: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    out = np.concatenate([t.data for t in ts], axis=axis)
    tape = _tape_of(*ts)
    if tape is None:
        return Tensor(out)
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return tape._record("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def prepend_prefix(prefix: ArrayLike, x: ArrayLike) -> Tensor:
    """Put a batch-shared ``[p, H, dh]`` block in front of ``x [B, H, S, dh]`` on axis 2."""
    pre, x = as_tensor(prefix), as_tensor(x)
    pd, xd = pre.data, x.data
    if pd.ndim != 3 or xd.ndim != 4 or pd.shape[1:] != (xd.shape[1], xd.shape[3]):
        raise DimensionError(f"prefix {pd.shape} does not fit {xd.shape}")
    B, H, S, dh = xd.shape
    p = pd.shape[0]
    out = np.empty((B, H, p + S, dh), dtype=np.result_type(pd, xd))
    out[:, :, :p] = pd.transpose(1, 0, 2)
    out[:, :, p:] = xd
    tape = _tape_of(pre, x)
    if tape is None:
        return Tensor(out)
    return tape._record(
        "prepend_prefix", out, (pre, x),
        lambda g: (g[:, :, :p].sum(axis=0).transpose(1, 0, 2) if pre.tape else None,
                   g[:, :, p:] if x.tape else None),
    )


def getitem(x: ArrayLike, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]
    if x.tape is None:
        return Tensor(out)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return x.tape._record("getitem", out, (x,), vjp)


def take_rows(weight: ArrayLike, ids) -> Tensor:
    """Embedding lookup: ``weight[ids]`` for an integer array of any shape."""
    w = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    out = w.data[ids]
    if w.tape is None:
        return Tensor(out)
    shape = w.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return w.tape._record("take_rows", out, (w,), vjp)


# --- reductions ----------------------------------------------------------


def sum_(x: ArrayLike, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)
    if x.tape is None:
        return Tensor(out)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._record("sum", out, (x,), vjp)


def mean(x: ArrayLike, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / n)


# --- linear algebra ------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be 2-D against a batched ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = ad @ bd
    if a.tape is None and b.tape is None:
        return Tensor(out)
    tape = _tape_of(a, b)

    def vjp(g):
        ga = gb = None
        if bd.ndim == 2:
            k, n = bd.shape
            if a.tape is not None:
                ga = (g.reshape(-1, n) @ bd.T).reshape(ad.shape)
            if b.tape is not None:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        if a.tape is not None:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.tape is not None:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return tape._record("matmul", out, (a, b), vjp)


# --- normalisations and losses ------------------------------------------


def _row_mask(mask: np.ndarray | None, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
    """Mask as ``[groups, T]`` uint8 plus how many consecutive rows share a group."""
    rows = int(np.prod(shape[:-1]))
    n = shape[-1]
    if mask is None:
        return np.ones((1, n), dtype=np.uint8), max(rows, 1)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == len(shape) and m.shape[-1] == n and all(k == 1 for k in m.shape[1:-1]):
        lead = m.shape[0]
        if lead == shape[0] or lead == 1:
            per = rows // shape[0] if lead == shape[0] else max(rows, 1)
            return np.ascontiguousarray(m.reshape(lead, n), dtype=np.uint8), per
    full = np.broadcast_to(m, shape).reshape(-1, n)
    return np.ascontiguousarray(full, dtype=np.uint8), 1


def softmax(x: ArrayLike, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max-subtraction. ``mask`` (broadcastable bool) marks kept entries;
    dropped entries are set to -inf before normalisation and come out exactly 0."""
    x = as_tensor(x)
    if axis not in (-1, x.ndim - 1):
        z = x.data
        if mask is not None:
            z = np.where(mask, z, -np.inf)
        z = z - np.max(z, axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / np.sum(e, axis=axis, keepdims=True)
        if x.tape is None:
            return Tensor(y)
        return x.tape._record(
            "softmax", y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)
        )
    shape = x.shape
    n = shape[-1]
    keep, per = _row_mask(mask, shape)
    y2 = K.softmax_rows(np.ascontiguousarray(x.data).reshape(-1, n), keep, per)
    y = y2.reshape(shape)
    if x.tape is None:
        return Tensor(y)
    return x.tape._record(
        "softmax", y, (x,),
        lambda g: (K.softmax_rows_bwd(np.ascontiguousarray(g).reshape(-1, n), y2).reshape(shape),),
    )


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape}, bias {bias.shape}")
    shape = x.shape
    gd = np.ascontiguousarray(gain.data)
    out, xhat, inv = K.layer_norm_fwd(
        np.ascontiguousarray(x.data).reshape(-1, d), gd, np.ascontiguousarray(bias.data), eps
    )
    out = out.reshape(shape)
    tape = _tape_of(x, gain, bias)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        gx, ggain, gbias = K.layer_norm_bwd(np.ascontiguousarray(g).reshape(-1, d), xhat, inv, gd)
        return (gx.reshape(shape) if x.tape is not None else None,
                ggain if gain.tape is not None else None,
                gbias if bias.tape is not None else None)

    return tape._record("layer_norm", out, (x, gain, bias), vjp)


def cross_entropy_logits(logits: ArrayLike, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch (fused, stable)."""
    z = as_tensor(logits)
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects [batch, C], got {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    zd = z.data
    m = zd.max(axis=1, keepdims=True)
    shifted = zd - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, labels])
    if z.tape is None:
        return Tensor(loss)

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return z.tape._record("cross_entropy", np.asarray(loss), (z,), vjp)


# --- gradient checking ---------------------------------------------------


def finite_diff_errors(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, float]:
    """Max relative error between tape and central-difference gradients, per input.

    ``f`` maps a dict of tensors to a scalar tensor and must be smooth around
    the point (kinks such as ReLU at 0 are outside the contract). The relative
    error of one entry is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not (0.0 < h <= 1e-2):
        raise ContractError(f"step h={h} outside (0, 1e-2]")
    with precision(np.float64):
        return _finite_diff_errors(f, inputs, h, names)


def _finite_diff_errors(f, inputs, h, names) -> dict[str, float]:
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    check = list(base) if names is None else list(names)
    tape = Tape()
    watched = {k: (tape.watch(v) if k in check else Tensor(v)) for k, v in base.items()}
    loss = f(watched)
    grads = backward(loss)
    consts = {k: Tensor(v) for k, v in base.items()}
    errors: dict[str, float] = {}
    for k in check:
        arr = base[k]
        tape_g = grads.get(watched[k].node, np.zeros_like(arr)).reshape(-1)
        flat = arr.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(consts).item()
            flat[i] = orig - h
            fm = f(consts).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = tape_g[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        errors[k] = worst
    return errors


def finite_diff_check(f: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-5) -> float:
    """Max relative error of the tape gradient of scalar ``f`` at ``x``."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return finite_diff_errors(lambda d: f(d["x"]), {"x": arr}, h)["x"]
