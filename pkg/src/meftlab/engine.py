"""Dense tensors with reverse-mode autodiff on an explicit, owner-tagged tape.

Every primitive recorded on the tape declares which buffers its backward rule
keeps alive. Those bytes are the engine's memory metric: ``live_bytes`` is the
running sum over nodes still on the tape and ``peak_retained_bytes`` its
maximum since the last reset.

Retention rule table (bytes of element buffers; parameter leaves are never
counted because they are resident regardless of training):

=========================  ==================================================
primitive                  buffers kept for backward
=========================  ==================================================
matmul                     ``a`` if ``b`` needs grad, ``b`` if ``a`` needs grad
add                        nothing
mul                        ``b`` if ``a`` needs grad, ``a`` if ``b`` needs grad
scale                      nothing
transpose / reshape        nothing
concat-rows                nothing
softmax-rows               output
layernorm                  normalized input if ``x`` or ``gamma`` needs grad;
                           per-row inverse std (and ``gamma``) if ``x`` does
relu                       sign mask, 1 byte per element
gelu                       input
sigmoid                    output
mean-over-axis             nothing
embedding-add              nothing
cross-entropy-with-logits  class probabilities
cosine-rows                both inputs plus the two per-row norms
l1-normalize-rows          input plus per-row L1 sums
frame-stack                nothing
=========================  ==================================================

Backward FLOPs are counted per visited node and per input that needs a
gradient: ``2*m*n*k`` for a matmul, a small constant times the element count
for everything else (see ``_FLOPS_PER_ELEMENT``).
"""

from __future__ import annotations

import contextlib
import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Owner",
    "Tensor",
    "TapeNode",
    "Engine",
    "EngineError",
    "ShapeError",
    "PRIMITIVES",
    "BackwardStats",
]


class EngineError(RuntimeError):
    pass


class ShapeError(EngineError, ValueError):
    pass


class Owner(str, enum.Enum):
    BACKBONE = "backbone"
    SIDE = "side"
    HEAD = "head"


PRECISIONS = {"f32": np.float32, "f64": np.float64}


class Tensor:
    """An n-d array plus its link to the tape.

    ``node_id`` is set only for tensors produced by a recorded primitive.
    Parameter leaves carry ``is_param=True``; trainable ones also carry
    ``requires_grad=True`` and a ``grad`` accumulator.
    """

    __slots__ = ("data", "node_id", "requires_grad", "is_param", "grad", "name")

    def __init__(self, data, *, node_id=None, requires_grad=False, is_param=False, grad=None, name=None):
        self.data = data
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.is_param = is_param
        self.grad = grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def on_grad_path(self) -> bool:
        return self.node_id is not None or self.requires_grad

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" node={self.node_id}" if self.node_id is not None else ""
        name = f" {self.name}" if self.name else ""
        return f"Tensor{name}(shape={self.shape}{tag})"


@dataclass(frozen=True)
class TapeNode:
    node_id: int
    op_kind: str
    input_ids: tuple[int | None, ...]
    retained_bytes: int
    owner: Owner
    label: str
    flops: int
    requires_grad_path: bool = True
    # not part of equality / repr
    inputs: tuple[Tensor, ...] = field(default=(), repr=False, compare=False)
    backward_fn: Callable | None = field(default=None, repr=False, compare=False)


@dataclass
class BackwardStats:
    visited: Counter = field(default_factory=Counter)
    visited_labels: dict[Owner, set[str]] = field(default_factory=dict)
    flops: int = 0

    def count(self, owner: Owner) -> int:
        return self.visited.get(owner, 0)

    def labels(self, owner: Owner) -> set[str]:
        return self.visited_labels.get(owner, set())


# ---------------------------------------------------------------- helpers


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {' and '.join(str(tuple(s)) for s in shapes)} do not broadcast") from None


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


_FLOPS_PER_ELEMENT = {
    "add": 1,
    "mul": 1,
    "scale": 1,
    "softmax-rows": 4,
    "layernorm": 8,
    "relu": 1,
    "gelu": 8,
    "sigmoid": 3,
    "mean-over-axis": 1,
    "embedding-add": 1,
    "cross-entropy-with-logits": 3,
    "cosine-rows": 6,
    "l1-normalize-rows": 5,
}


@dataclass
class _Result:
    out: np.ndarray
    saved_inputs: tuple[int, ...] = ()
    buffers: tuple[np.ndarray, ...] = ()
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
    flops: int = 0


# ---------------------------------------------------------------- primitives
#
# Each primitive gets the input arrays, a tuple of "needs grad" flags and its
# attributes. It returns the output plus (only when something needs a grad)
# the saved buffers and the backward closure.


def _p_matmul(xs, need, trans_b=False):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    bm = _swap(b) if trans_b else b
    if a.shape[-1] != bm.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {bm.shape}{' (b transposed)' if trans_b else ''}")
    _broadcast_shape("matmul", a.shape[:-2], bm.shape[:-2])
    out = a @ bm
    if not any(need):
        return _Result(out)

    def backward(g):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(g @ _swap(bm), a.shape)
        if need[1]:
            gbm = _swap(a) @ g
            gbm = _unbroadcast(gbm, bm.shape)
            gb = _swap(gbm) if trans_b else gbm
        return ga, gb

    saved = tuple(i for i, flag in ((1, need[0]), (0, need[1])) if flag)
    flops = 2 * out.size * a.shape[-1] * sum(need)
    return _Result(out, saved, (), backward, flops)


def _p_add(xs, need):
    a, b = xs
    _broadcast_shape("add", a.shape, b.shape)
    out = a + b
    if not any(need):
        return _Result(out)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        )

    return _Result(out, (), (), backward, _FLOPS_PER_ELEMENT["add"] * out.size * sum(need))


def _p_mul(xs, need):
    a, b = xs
    _broadcast_shape("mul", a.shape, b.shape)
    out = a * b
    if not any(need):
        return _Result(out)

    def backward(g):
        return (
            _unbroadcast(g * b, a.shape) if need[0] else None,
            _unbroadcast(g * a, b.shape) if need[1] else None,
        )

    saved = tuple(i for i, flag in ((1, need[0]), (0, need[1])) if flag)
    return _Result(out, saved, (), backward, _FLOPS_PER_ELEMENT["mul"] * out.size * sum(need))


def _p_scale(xs, need, factor=1.0):
    (a,) = xs
    out = a * a.dtype.type(factor)
    if not need[0]:
        return _Result(out)
    return _Result(out, (), (), lambda g: (g * a.dtype.type(factor),), _FLOPS_PER_ELEMENT["scale"] * out.size)


def _p_transpose(xs, need, axes=None):
    (a,) = xs
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = np.transpose(a, axes)
    if not need[0]:
        return _Result(out)
    inverse = tuple(np.argsort(axes))
    return _Result(out, (), (), lambda g: (np.transpose(g, inverse),), 0)


def _p_reshape(xs, need, shape=None):
    (a,) = xs
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    if not need[0]:
        return _Result(out)
    return _Result(out, (), (), lambda g: (g.reshape(a.shape),), 0)


def _p_concat_rows(xs, need):
    first = xs[0]
    for x in xs[1:]:
        if x.ndim != first.ndim or x.shape[:-2] != first.shape[:-2] or x.shape[-1] != first.shape[-1]:
            raise ShapeError(f"concat-rows: incompatible shapes {[tuple(x.shape) for x in xs]}")
    out = np.concatenate(xs, axis=-2)
    if not any(need):
        return _Result(out)
    bounds = np.cumsum([0] + [x.shape[-2] for x in xs])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :] if need[i] else None for i in range(len(xs)))

    return _Result(out, (), (), backward, 0)


def _p_softmax_rows(xs, need):
    (a,) = xs
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not need[0]:
        return _Result(out)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _Result(out, (), (out,), backward, _FLOPS_PER_ELEMENT["softmax-rows"] * out.size)


def _p_layernorm(xs, need, eps=1e-5):
    x, gamma, beta = xs
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias shapes {gamma.shape}, {beta.shape} do not match feature width {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma + beta
    if not any(need):
        return _Result(out)

    def backward(g):
        gx = gg = gb = None
        if need[2]:
            gb = g.reshape(-1, d).sum(axis=0)
        if need[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if need[0]:
            gh = g * gamma
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    buffers = []
    if need[0] or need[1]:
        buffers.append(xhat)
    if need[0]:
        buffers.append(rstd)
    saved = (1,) if need[0] else ()
    return _Result(out, saved, tuple(buffers), backward, _FLOPS_PER_ELEMENT["layernorm"] * out.size * sum(need))


def _p_relu(xs, need):
    (a,) = xs
    mask = a > 0
    out = np.where(mask, a, a.dtype.type(0))
    if not need[0]:
        return _Result(out)
    return _Result(out, (), (mask,), lambda g: (g * mask,), _FLOPS_PER_ELEMENT["relu"] * out.size)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _p_gelu(xs, need):
    (a,) = xs
    cdf = 0.5 * (1.0 + special.erf(a * a.dtype.type(_SQRT1_2)))
    out = (a * cdf).astype(a.dtype, copy=False)
    if not need[0]:
        return _Result(out)

    def backward(g):
        pdf = np.exp(-0.5 * a * a) * a.dtype.type(_INV_SQRT_2PI)
        return ((g * (cdf + a * pdf)).astype(a.dtype, copy=False),)

    return _Result(out, (0,), (), backward, _FLOPS_PER_ELEMENT["gelu"] * out.size)


def _p_sigmoid(xs, need):
    (a,) = xs
    out = special.expit(a).astype(a.dtype, copy=False)
    if not need[0]:
        return _Result(out)
    return _Result(out, (), (out,), lambda g: (g * out * (1 - out),), _FLOPS_PER_ELEMENT["sigmoid"] * out.size)


def _p_mean(xs, need, axis=-1):
    (a,) = xs
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean-over-axis: axis {axis} out of range for shape {a.shape}")
    out = np.asarray(a.mean(axis=axis))
    if not need[0]:
        return _Result(out)
    count = a.shape[axis]

    def backward(g):
        g = np.expand_dims(g, axis) / a.dtype.type(count)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _Result(out, (), (), backward, _FLOPS_PER_ELEMENT["mean-over-axis"] * a.size)


def _p_embedding_add(xs, need):
    x, table = xs
    if x.ndim < 2 or table.ndim != 2 or table.shape[1] != x.shape[-1] or table.shape[0] < x.shape[-2]:
        raise ShapeError(f"embedding-add: table {table.shape} cannot cover input {x.shape}")
    n = x.shape[-2]
    out = x + table[:n]
    if not any(need):
        return _Result(out)

    def backward(g):
        gt = None
        if need[1]:
            gt = np.zeros_like(table)
            gt[:n] = g.reshape(-1, n, table.shape[1]).sum(axis=0)
        return (g if need[0] else None), gt

    return _Result(out, (), (), backward, _FLOPS_PER_ELEMENT["embedding-add"] * out.size * sum(need))


def _p_cross_entropy(xs, need, labels=None):
    (logits,) = xs
    labels = np.asarray(labels, dtype=np.int64)
    z = logits if logits.ndim == 2 else logits[None, :]
    if labels.ndim == 0:
        labels = labels[None]
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"cross-entropy-with-logits: {labels.shape[0]} labels for logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ShapeError(f"cross-entropy-with-logits: labels outside [0, {z.shape[1]})")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)
    if not need[0]:
        return _Result(out)
    probs = np.exp(logp)

    def backward(g):
        grad = probs.copy()
        grad[rows, labels] -= 1
        grad *= g / z.shape[0]
        return (grad.reshape(logits.shape),)

    return _Result(out, (), (probs,), backward, _FLOPS_PER_ELEMENT["cross-entropy-with-logits"] * probs.size)


def _p_cosine_rows(xs, need):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"cosine-rows: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a * a).sum(axis=-1))
    nb = np.sqrt((b * b).sum(axis=-1))
    denom = na * nb
    ok = denom > 0
    safe = np.where(ok, denom, 1)
    out = np.where(ok, (a * b).sum(axis=-1) / safe, 0).astype(a.dtype, copy=False)
    if not any(need):
        return _Result(out)

    def backward(g):
        gg = np.where(ok, g, 0)[..., None]
        cos = out[..., None]
        na_ = np.where(na > 0, na, 1)[..., None]
        nb_ = np.where(nb > 0, nb, 1)[..., None]
        ga = gb = None
        if need[0]:
            ga = gg * (b / (na_ * nb_) - cos * a / (na_ * na_))
        if need[1]:
            gb = gg * (a / (na_ * nb_) - cos * b / (nb_ * nb_))
        return ga, gb

    return _Result(out, (0, 1), (na, nb), backward, _FLOPS_PER_ELEMENT["cosine-rows"] * a.size * sum(need))


def _p_l1_normalize_rows(xs, need):
    (a,) = xs
    s = np.abs(a).sum(axis=-1, keepdims=True)
    ok = s > 0
    safe = np.where(ok, s, 1)
    out = np.where(ok, a / safe, 0).astype(a.dtype, copy=False)
    if not need[0]:
        return _Result(out)

    def backward(g):
        dot = (g * a).sum(axis=-1, keepdims=True)
        grad = g / safe - np.sign(a) * dot / (safe * safe)
        return (np.where(ok, grad, 0),)

    return _Result(out, (0,), (s,), backward, _FLOPS_PER_ELEMENT["l1-normalize-rows"] * a.size)


def _p_frame_stack(xs, need, k=3):
    (a,) = xs
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"frame-stack: context width must be odd and positive, got {k}")
    if a.ndim < 2:
        raise ShapeError(f"frame-stack: need rows x features, got {a.shape}")
    n = a.shape[-2]
    half = k // 2
    pad = [(0, 0)] * (a.ndim - 2) + [(half, half), (0, 0)]
    padded = np.pad(a, pad)
    out = np.concatenate([padded[..., j:j + n, :] for j in range(k)], axis=-1)
    if not need[0]:
        return _Result(out)
    d = a.shape[-1]

    def backward(g):
        gp = np.zeros(padded.shape, dtype=g.dtype)
        for j in range(k):
            gp[..., j:j + n, :] += g[..., j * d:(j + 1) * d]
        return (gp[..., half:half + n, :],)

    return _Result(out, (), (), backward, 0)


PRIMITIVES: dict[str, Callable[..., _Result]] = {
    "matmul": _p_matmul,
    "add": _p_add,
    "mul": _p_mul,
    "scale": _p_scale,
    "transpose": _p_transpose,
    "reshape": _p_reshape,
    "concat-rows": _p_concat_rows,
    "softmax-rows": _p_softmax_rows,
    "layernorm": _p_layernorm,
    "relu": _p_relu,
    "gelu": _p_gelu,
    "sigmoid": _p_sigmoid,
    "mean-over-axis": _p_mean,
    "embedding-add": _p_embedding_add,
    "cross-entropy-with-logits": _p_cross_entropy,
    "cosine-rows": _p_cosine_rows,
    "l1-normalize-rows": _p_l1_normalize_rows,
    "frame-stack": _p_frame_stack,
}

_ARITY = {
    "matmul": 2, "add": 2, "mul": 2, "layernorm": 3, "embedding-add": 2, "cosine-rows": 2,
}


class Engine:
    """One tape, one precision, one set of memory counters.

    Instances are not thread-safe; run independent engines for parallel work.
    """

    def __init__(self, precision: str = "f64"):
        if precision not in PRECISIONS:
            raise EngineError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
        self.precision = precision
        self.dtype = np.dtype(PRECISIONS[precision])
        self.tape: list[TapeNode] = []
        self._detached = 0
        self._owner = Owner.BACKBONE
        self._label = ""
        self.live_bytes = 0
        self.peak_bytes = 0
        self.backward_flops = 0
        self.last_backward = BackwardStats()

    # -------------------------------------------------------------- scopes

    @property
    def retaining(self) -> bool:
        return self._detached == 0

    @contextlib.contextmanager
    def detached_scope(self) -> Iterator[None]:
        """Run primitives without recording nodes or keeping buffers."""
        self._detached += 1
        try:
            yield
        finally:
            self._detached -= 1

    @contextlib.contextmanager
    def owner(self, owner: Owner, label: str | None = None) -> Iterator[None]:
        prev = self._owner, self._label
        self._owner = Owner(owner)
        if label is not None:
            self._label = label
        try:
            yield
        finally:
            self._owner, self._label = prev

    @contextlib.contextmanager
    def label(self, label: str) -> Iterator[None]:
        prev = self._label
        self._label = label
        try:
            yield
        finally:
            self._label = prev

    # -------------------------------------------------------------- tensors

    def const(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype))

    def param(self, value, *, trainable: bool = True, name: str | None = None) -> Tensor:
        data = np.array(value, dtype=self.dtype)
        return Tensor(data, requires_grad=trainable, is_param=True,
                      grad=np.zeros_like(data) if trainable else None, name=name)

    # -------------------------------------------------------------- core

    def apply(self, kind: str, *inputs: Tensor, owner: Owner | None = None, **attrs) -> Tensor:
        fn = PRIMITIVES.get(kind)
        if fn is None:
            raise EngineError(f"unknown primitive {kind!r}")
        if not inputs:
            raise EngineError(f"{kind}: no inputs")
        arity = _ARITY.get(kind, None if kind == "concat-rows" else 1)
        if arity is not None and len(inputs) != arity:
            raise EngineError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
        for t in inputs:
            if not isinstance(t, Tensor):
                raise EngineError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
        record = self.retaining and any(t.on_grad_path for t in inputs)
        need = tuple(record and t.on_grad_path for t in inputs)
        res = fn(tuple(t.data for t in inputs), need, **attrs)
        if not record:
            return Tensor(res.out)

        retained = sum(b.nbytes for b in res.buffers)
        retained += sum(inputs[i].data.nbytes for i in res.saved_inputs if not inputs[i].is_param)
        node = TapeNode(
            node_id=len(self.tape),
            op_kind=kind,
            input_ids=tuple(t.node_id for t in inputs),
            retained_bytes=int(retained),
            owner=Owner(owner) if owner is not None else self._owner,
            label=self._label,
            flops=int(res.flops),
            inputs=inputs,
            backward_fn=res.backward,
        )
        self.tape.append(node)
        self.live_bytes += node.retained_bytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return Tensor(res.out, node_id=node.node_id)

    def backward(self, loss: Tensor) -> BackwardStats:
        """Accumulate d(loss)/d(param) into every trainable leaf, then drop the tape."""
        if loss.data.size != 1:
            raise EngineError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss.node_id is None:
            raise EngineError("backward: loss is not on the tape (nothing trainable upstream)")
        stats = BackwardStats()
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.tape[: loss.node_id + 1]):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            stats.visited[node.owner] += 1
            stats.visited_labels.setdefault(node.owner, set()).add(node.label)
            stats.flops += node.flops
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if t.node_id is not None:
                    prev = grads.get(t.node_id)
                    grads[t.node_id] = gi if prev is None else prev + gi
                elif t.requires_grad:
                    t.grad += gi
        self.backward_flops += stats.flops
        self.last_backward = stats
        self.clear_tape()
        return stats

    def clear_tape(self) -> None:
        self.tape.clear()
        self.live_bytes = 0

    def peak_retained_bytes(self) -> int:
        return self.peak_bytes

    def reset_accounting(self) -> None:
        self.peak_bytes = self.live_bytes
        self.backward_flops = 0
        self.last_backward = BackwardStats()

    # -------------------------------------------------------------- sugar

    def matmul(self, a, b, *, trans_b=False, **kw):
        return self.apply("matmul", a, b, trans_b=trans_b, **kw)

    def add(self, a, b, **kw):
        return self.apply("add", a, b, **kw)

    def mul(self, a, b, **kw):
        return self.apply("mul", a, b, **kw)

    def scale(self, a, factor, **kw):
        return self.apply("scale", a, factor=float(factor), **kw)

    def sub(self, a, b, **kw):
        return self.add(a, self.scale(b, -1.0, **kw), **kw)

    def transpose(self, a, axes=None, **kw):
        return self.apply("transpose", a, axes=axes, **kw)

    def reshape(self, a, shape, **kw):
        return self.apply("reshape", a, shape=tuple(shape), **kw)

    def concat_rows(self, tensors, **kw):
        return self.apply("concat-rows", *tensors, **kw)

    def softmax_rows(self, a, **kw):
        return self.apply("softmax-rows", a, **kw)

    def layernorm(self, x, gamma, beta, eps=1e-5, **kw):
        return self.apply("layernorm", x, gamma, beta, eps=eps, **kw)

    def relu(self, a, **kw):
        return self.apply("relu", a, **kw)

    def gelu(self, a, **kw):
        return self.apply("gelu", a, **kw)

    def sigmoid(self, a, **kw):
        return self.apply("sigmoid", a, **kw)

    def mean(self, a, axis=-1, **kw):
        return self.apply("mean-over-axis", a, axis=axis, **kw)

    def embedding_add(self, x, table, **kw):
        return self.apply("embedding-add", x, table, **kw)

    def cross_entropy(self, logits, labels, **kw):
        return self.apply("cross-entropy-with-logits", logits, labels=labels, **kw)

    def cosine_rows(self, a, b, **kw):
        return self.apply("cosine-rows", a, b, **kw)

    def l1_normalize_rows(self, a, **kw):
        return self.apply("l1-normalize-rows", a, **kw)

    def frame_stack(self, a, k=3, **kw):
        return self.apply("frame-stack", a, k=k, **kw)

    def total(self, a, **kw):
        """Sum of all elements as a scalar tensor (mean-over-axis chain then scale)."""
        count = a.data.size
        while a.data.ndim > 0:
            a = self.mean(a, axis=-1, **kw)
        return self.scale(a, count, **kw)
