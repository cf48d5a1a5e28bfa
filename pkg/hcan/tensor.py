#!/usr/bin/env python3
"""
Reverse-mode automatic differentiation on numpy arrays.

Every numeric operation of the model is one of the primitives below. When a
``Tape`` is active on the current thread, each primitive appends a node to it;
``backward`` and ``gradients`` replay those nodes in reverse record order and
look up the backward rule for each node in ``BACKWARD_RULES``.

Shapes never broadcast implicitly. A smaller tensor meets a larger one only
through ``expand``; python scalars only through ``scale``.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, NumericError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
FLOAT_DTYPES = (np.float32, np.float64)

_local = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the tape recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def suspend_tape():
    """Evaluate without recording, even inside an active tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """Dense array with an accumulated gradient; a node on a differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_index")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None,
                 dtype: Optional[Any] = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        self._init(arr, requires_grad, name)

    def _init(self, arr: np.ndarray, requires_grad: bool, name: Optional[str]):
        if arr.size == 0:
            raise DimensionError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out._init(arr, False, None)
        return out

    # Introspection
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Flat row-major copy of the values."""
        return self.data.reshape(-1).copy()

    @property
    def tape_id(self) -> Optional[int]:
        return None if self._tape is None else id(self._tape)

    @property
    def is_scalar(self) -> bool:
        return self.data.size == 1

    def item(self) -> float:
        if not self.is_scalar:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def parameter(data: Any, name: Optional[str] = None, dtype: Optional[Any] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def constant(data: Any, dtype: Optional[Any] = None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def uniform_parameter(rng: np.random.Generator, shape: Tuple[int, int], name: str,
                      dtype: Any = DEFAULT_DTYPE) -> Tensor:
    """Weight matrix drawn uniformly from +-1/sqrt(fan-in), fan-in = rows."""
    bound = 1.0 / np.sqrt(shape[0])
    return parameter(rng.uniform(-bound, bound, size=shape), name=name, dtype=dtype)


@dataclass
class Node:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    ctx: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered record of primitive operations, confined to one thread."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, ctx: Dict[str, Any]):
        output._tape = self
        output._index = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(kind, inputs, output, ctx))


def _emit(kind: str, inputs: Tuple[Tensor, ...], arr: np.ndarray, **ctx) -> Tensor:
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, ctx)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _two_d(op: str, x: Tensor):
    if x.data.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-D tensor, got shape {x.shape}")


# Primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _two_d("matmul", a)
    _two_d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")
    return _emit("matmul", (a, b), a.data @ b.data)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, c=c)


def tanh(a: Tensor) -> Tensor:
    return _emit("tanh", (a,), np.tanh(a.data))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form stays finite for any input and gives exactly 0.5 at 0
    return _emit("sigmoid", (a,), 0.5 * (1.0 + np.tanh(0.5 * a.data)))


def exp(a: Tensor) -> Tensor:
    return _emit("exp", (a,), np.exp(a.data))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log: input has non-positive entries (min {float(a.data.min())})")
    return _emit("log", (a,), np.log(a.data))


ELEMENTWISE_KINDS = ("add", "sub", "mul", "tanh", "sigmoid", "exp", "log", "scale")


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None, *, constant: Optional[float] = None) -> Tensor:
    """Dispatch one of ``ELEMENTWISE_KINDS`` by name."""
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise UsageError(f"{kind} needs two operands")
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    if kind == "scale":
        if constant is None:
            raise UsageError("scale needs a constant")
        return scale(a, constant)
    if kind in ("tanh", "sigmoid", "exp", "log"):
        return {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log}[kind](a)
    raise UsageError(f"unknown elementwise kind: {kind}")


def _softmax_last(data: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if mask is None:
        e = np.exp(data - data.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    masked = np.where(mask, data, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(np.where(mask, data - row_max, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; masked-out entries get weight 0."""
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != data.shape:
            raise DimensionError(f"softmax: mask shape {mask.shape} does not match {data.shape}")
    return _emit("softmax", (x,), _softmax_last(data, mask).astype(data.dtype, copy=False))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].data.ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.data.ndim != ndim or any(p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != ax):
            raise DimensionError(f"concat: shape {p.shape} incompatible with {parts[0].shape} along axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    return _emit("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=ax), axis=ax, sizes=sizes)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _emit("dropout", (x,), x.data * mask, mask=mask)


def transpose(x: Tensor) -> Tensor:
    _two_d("transpose", x)
    return _emit("transpose", (x,), np.ascontiguousarray(x.data.T))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _two_d("slice_cols", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_cols: [{start}, {stop}) outside width {x.shape[1]}")
    return _emit("slice_cols", (x,), x.data[:, start:stop].copy(), start=start, stop=stop)


def row(x: Tensor, i: int) -> Tensor:
    _two_d("row", x)
    if not 0 <= i < x.shape[0]:
        raise DimensionError(f"row: index {i} outside {x.shape[0]} rows")
    return _emit("row", (x,), x.data[i:i + 1].copy(), i=i)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    total = x.data.sum(keepdims=True)
    return _emit("sum", (x,), total)


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if x.data.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise DimensionError(f"expand: cannot expand {x.shape} to {shape}")
    if x.shape == shape:
        return x
    return _emit("expand", (x,), np.broadcast_to(x.data, shape).copy())


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    _same_shape("where", a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"where: mask shape {mask.shape} does not match {a.shape}")
    return _emit("where", (a, b), np.where(mask, a.data, b.data), mask=mask)


def log_softmax(x: Tensor) -> Tensor:
    """log(softmax(x)) over the last axis; finite where softmax itself underflows to 0."""
    data = x.data
    shifted = data - data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return _emit("log_softmax", (x,), y.astype(data.dtype, copy=False))


def lstm_scan(gates_x: Tensor, w_h: Tensor, reverse: bool = False) -> Tensor:
    """
    LSTM recurrence over the rows of precomputed input gates.

    Args:
        gates_x: n x 4d input projection plus bias, gate blocks ordered input, forget, output, candidate
        w_h: d x 4d recurrent weights
        reverse: Run from the last row to the first

    Returns:
        n x d hidden states aligned with the rows of ``gates_x``; the first step starts from zero state
    """
    _two_d("lstm_scan", gates_x)
    _two_d("lstm_scan", w_h)
    n = gates_x.shape[0]
    d = w_h.shape[0]
    if w_h.shape[1] != 4 * d or gates_x.shape[1] != 4 * d:
        raise DimensionError(f"lstm_scan: gates {gates_x.shape} and recurrent weights {w_h.shape} disagree")
    xs, wh = gates_x.data, w_h.data
    order = np.arange(n - 1, -1, -1) if reverse else np.arange(n)
    acts = np.empty_like(xs)
    cells = np.empty((n, d), dtype=xs.dtype)
    tanh_c = np.empty_like(cells)
    hidden = np.empty_like(cells)
    h: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    for t in order:
        z = xs[t] if h is None else xs[t] + h @ wh
        a = np.empty_like(z)
        a[:3 * d] = 0.5 * (1.0 + np.tanh(0.5 * z[:3 * d]))
        a[3 * d:] = np.tanh(z[3 * d:])
        i, f, o, g = a[:d], a[d:2 * d], a[2 * d:3 * d], a[3 * d:]
        c = i * g if c is None else f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        acts[t], cells[t], tanh_c[t], hidden[t] = a, c, tc, h
    return _emit("lstm_scan", (gates_x, w_h), hidden, order=order, acts=acts, cells=cells, tanh_c=tanh_c)


def _split_heads(arr: np.ndarray, heads: int) -> np.ndarray:
    n, width = arr.shape
    return arr.reshape(n, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(arr: np.ndarray) -> np.ndarray:
    heads, n, sub = arr.shape
    return arr.transpose(1, 0, 2).reshape(n, heads * sub)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, *, scale: float = 1.0,
              mask: Optional[np.ndarray] = None, alt_q: Optional[Tensor] = None,
              use_q: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Multi-head dot-product attention of the rows of ``q`` over the rows of ``k`` and ``v``.

    Head h uses column block h of each projection. With ``alt_q`` the logit
    for (i, j) comes from ``q`` where ``use_q[i, j]`` and from ``alt_q``
    elsewhere. Rows of ``mask`` with no allowed entry attend to nothing.
    Returns the n x width(v) output and a copy of the heads x n x m weights.
    """
    for t in (q, k, v):
        _two_d("attention", t)
    n, width = q.shape
    m = k.shape[0]
    if k.shape[1] != width or v.shape[0] != m:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape} and v {v.shape} disagree")
    if heads < 1 or width % heads or v.shape[1] % heads:
        raise ConfigError(f"attention widths {width} and {v.shape[1]} are not divisible by {heads} heads")
    if (alt_q is None) != (use_q is None):
        raise UsageError("attention: alt_q and use_q go together")
    for name, arr in (("mask", mask), ("use_q", use_q)):
        if arr is not None and np.shape(arr) != (n, m):
            raise DimensionError(f"attention: {name} shape {np.shape(arr)} is not {(n, m)}")

    k_t = _split_heads(k.data, heads).transpose(0, 2, 1)
    logits = _split_heads(q.data, heads) @ k_t
    inputs: Tuple[Tensor, ...] = (q, k, v)
    if alt_q is not None:
        _same_shape("attention", q, alt_q)
        use_q = np.asarray(use_q, dtype=bool)
        logits = np.where(use_q, logits, _split_heads(alt_q.data, heads) @ k_t)
        inputs = (q, k, v, alt_q)
    weights = _softmax_last(logits * scale, None if mask is None else np.asarray(mask, dtype=bool))
    weights = weights.astype(q.dtype, copy=False)
    out = _merge_heads(weights @ _split_heads(v.data, heads))
    result = _emit("attention", inputs, out, heads=heads, scale=scale, weights=weights, use_q=use_q)
    return result, weights.copy()


# Backward rules: rule(node, g, needs) -> one gradient (or None) per input

def _bw_matmul(node: Node, g, needs):
    a, b = node.inputs
    return (g @ b.data.T if needs[0] else None, a.data.T @ g if needs[1] else None)


def _bw_add(node: Node, g, needs):
    return (g, g)


def _bw_sub(node: Node, g, needs):
    return (g, -g if needs[1] else None)


def _bw_mul(node: Node, g, needs):
    a, b = node.inputs
    return (g * b.data if needs[0] else None, g * a.data if needs[1] else None)


def _bw_scale(node: Node, g, needs):
    return (g * node.ctx["c"],)


def _bw_tanh(node: Node, g, needs):
    y = node.output.data
    return (g * (1.0 - y * y),)


def _bw_sigmoid(node: Node, g, needs):
    y = node.output.data
    return (g * y * (1.0 - y),)


def _bw_exp(node: Node, g, needs):
    return (g * node.output.data,)


def _bw_log(node: Node, g, needs):
    return (g / node.inputs[0].data,)


def _bw_softmax(node: Node, g, needs):
    y = node.output.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _bw_concat(node: Node, g, needs):
    cuts = np.cumsum(node.ctx["sizes"])[:-1]
    return tuple(np.split(g, cuts, axis=node.ctx["axis"]))


def _bw_dropout(node: Node, g, needs):
    return (g * node.ctx["mask"],)


def _bw_transpose(node: Node, g, needs):
    return (np.ascontiguousarray(g.T),)


def _bw_slice_cols(node: Node, g, needs):
    out = np.zeros_like(node.inputs[0].data)
    out[:, node.ctx["start"]:node.ctx["stop"]] = g
    return (out,)


def _bw_row(node: Node, g, needs):
    out = np.zeros_like(node.inputs[0].data)
    i = node.ctx["i"]
    out[i:i + 1] = g
    return (out,)


def _bw_sum(node: Node, g, needs):
    return (np.broadcast_to(g, node.inputs[0].shape).copy(),)


def _bw_expand(node: Node, g, needs):
    in_shape = node.inputs[0].shape
    axes = tuple(d for d, (s, t) in enumerate(zip(in_shape, g.shape)) if s == 1 and t != 1)
    return (g.sum(axis=axes, keepdims=True),)


def _bw_where(node: Node, g, needs):
    mask = node.ctx["mask"]
    zero = np.zeros_like(g)
    return (np.where(mask, g, zero) if needs[0] else None, np.where(mask, zero, g) if needs[1] else None)


def _bw_log_softmax(node: Node, g, needs):
    p = np.exp(node.output.data)
    return (g - p * g.sum(axis=-1, keepdims=True),)


def _bw_lstm_scan(node: Node, g, needs):
    gates_x, w_h = node.inputs
    order, acts, cells, tanh_c = (node.ctx[key] for key in ("order", "acts", "cells", "tanh_c"))
    hidden = node.output.data
    d = w_h.shape[0]
    wh = w_h.data
    d_gates = np.zeros_like(gates_x.data)
    d_wh = np.zeros_like(wh)
    dh_next = np.zeros(d, dtype=hidden.dtype)
    dc_next = np.zeros(d, dtype=hidden.dtype)
    for step in range(len(order) - 1, -1, -1):
        t = order[step]
        a = acts[t]
        i, f, o, cand = a[:d], a[d:2 * d], a[2 * d:3 * d], a[3 * d:]
        tc = tanh_c[t]
        dh = g[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = d_gates[t]
        dz[:d] = dc * cand * i * (1.0 - i)
        if step > 0:
            dz[d:2 * d] = dc * cells[order[step - 1]] * f * (1.0 - f)
        dz[2 * d:3 * d] = dh * tc * o * (1.0 - o)
        dz[3 * d:] = dc * i * (1.0 - cand * cand)
        dc_next = dc * f
        if step > 0:
            d_wh += np.outer(hidden[order[step - 1]], dz)
            dh_next = dz @ wh.T
    return (d_gates if needs[0] else None, d_wh if needs[1] else None)


def _bw_attention(node: Node, g, needs):
    heads, c, w, use_q = (node.ctx[key] for key in ("heads", "scale", "weights", "use_q"))
    q, k, v = node.inputs[:3]
    qh, kh, vh = (_split_heads(t.data, heads) for t in (q, k, v))
    gh = _split_heads(g, heads)
    d_w = gh @ vh.transpose(0, 2, 1)
    d_logits = w * (d_w - (d_w * w).sum(axis=-1, keepdims=True)) * c
    d_v = w.transpose(0, 2, 1) @ gh
    if use_q is None:
        grads = (d_logits @ kh, d_logits.transpose(0, 2, 1) @ qh, d_v)
    else:
        zero = np.zeros_like(d_logits)
        d_main = np.where(use_q, d_logits, zero)
        d_alt = np.where(use_q, zero, d_logits)
        alt_h = _split_heads(node.inputs[3].data, heads)
        d_k = d_main.transpose(0, 2, 1) @ qh + d_alt.transpose(0, 2, 1) @ alt_h
        grads = (d_main @ kh, d_k, d_v, d_alt @ kh)
    return tuple(_merge_heads(x) if need else None for x, need in zip(grads, needs))


BACKWARD_RULES: Dict[str, Callable[[Node, np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "tanh": _bw_tanh,
    "sigmoid": _bw_sigmoid,
    "exp": _bw_exp,
    "log": _bw_log,
    "softmax": _bw_softmax,
    "concat": _bw_concat,
    "dropout": _bw_dropout,
    "transpose": _bw_transpose,
    "slice_cols": _bw_slice_cols,
    "row": _bw_row,
    "sum": _bw_sum,
    "expand": _bw_expand,
    "where": _bw_where,
    "log_softmax": _bw_log_softmax,
    "lstm_scan": _bw_lstm_scan,
    "attention": _bw_attention,
}


# Reverse passes

def _check_root(root: Tensor):
    if not root.is_scalar:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None:
        raise UsageError("backward root was not recorded on a tape")


def _reverse_pass(root: Tensor, relevant: Optional[set] = None) -> Dict[int, Tuple[Tensor, np.ndarray]]:
    """One fresh reverse sweep from ``root``; returns id -> (tensor, gradient)."""
    tape = root._tape
    grads: Dict[int, Tuple[Tensor, np.ndarray]] = {id(root): (root, np.ones_like(root.data))}
    for node in reversed(tape.nodes[:root._index + 1]):
        entry = grads.get(id(node.output))
        if entry is None:
            continue
        needs = tuple(
            inp.requires_grad and (relevant is None or id(inp) in relevant) for inp in node.inputs
        )
        if not any(needs):
            continue
        input_grads = BACKWARD_RULES[node.kind](node, entry[1], needs)
        for inp, need, ig in zip(node.inputs, needs, input_grads):
            if not need or ig is None:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = (inp, ig if prev is None else prev[1] + ig)
    return grads


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor, intermediates included."""
    _check_root(root)
    for tensor, g in _reverse_pass(root).values():
        tensor.grad += g


def gradients(root: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``root`` w.r.t. ``wrt`` without touching any ``.grad``."""
    _check_root(root)
    relevant = {id(t) for t in wrt}
    for node in root._tape.nodes[:root._index + 1]:
        if any(id(inp) in relevant for inp in node.inputs):
            relevant.add(id(node.output))
    grads = _reverse_pass(root, relevant)
    return [grads[id(t)][1] if id(t) in grads else np.zeros_like(t.data) for t in wrt]


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad[...] = 0


# Finite-difference self-check

def _evaluate(f: Callable[[], Tensor]) -> float:
    with suspend_tape():
        value = f().item()
    if not np.isfinite(value):
        raise NumericError(f"objective evaluated to a non-finite value ({value})")
    return value


@dataclass
class FiniteDiffReport:
    worst: float
    checked: int
    below_floor: int


def finite_diff_report(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, *,
                       floor: float = 1e-8, max_coords: Optional[int] = None,
                       rng: Optional[np.random.Generator] = None) -> FiniteDiffReport:
    """
    Compare tape gradients of ``f`` against central differences.

    Args:
        f: Zero-argument callable building a scalar from the current values of ``params``
        params: Tensors to perturb (perturbed in place, restored afterwards)
        step: Central-difference half step
        floor: Smallest denominator of the relative error; coordinates whose analytic and
            numeric gradients are both below it are compared in absolute terms
        max_coords: Optional cap on checked coordinates per tensor (sampled with ``rng``)

    Returns:
        Worst relative error |a - n| / max(|a|, |n|, floor), the number of checked
        coordinates and how many of them fell below ``floor``
    """
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    if floor <= 0:
        raise ConfigError(f"finite-difference floor must be positive, got {floor}")
    with Tape():
        out = f()
        if not out.is_scalar:
            raise UsageError(f"objective must be scalar, got shape {out.shape}")
        if not np.isfinite(out.item()):
            raise NumericError(f"objective evaluated to a non-finite value ({out.item()})")
        analytic = gradients(out, params) if out._tape is not None else [np.zeros_like(p.data) for p in params]

    worst = 0.0
    checked = below = 0
    for p, a in zip(params, analytic):
        coords = np.arange(p.data.size)
        if max_coords is not None and p.data.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(p.data.size, max_coords, replace=False))
        for k in coords:
            idx = np.unravel_index(int(k), p.shape)
            orig = p.data[idx]
            try:
                p.data[idx] = orig + step
                f_plus = _evaluate(f)
                p.data[idx] = orig - step
                f_minus = _evaluate(f)
            finally:
                p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = float(a[idx])
            magnitude = max(abs(exact), abs(numeric))
            below += magnitude < floor
            checked += 1
            worst = max(worst, abs(exact - numeric) / max(magnitude, floor))
    logger.debug(f"finite-difference check over {checked} coordinates: worst relative error {worst:.3e}, "
                 f"{below} below floor {floor:.0e}")
    return FiniteDiffReport(worst=worst, checked=checked, below_floor=int(below))


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, *,
                      floor: float = 1e-8, max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error of ``finite_diff_report``."""
    return finite_diff_report(f, params, step, floor=floor, max_coords=max_coords, rng=rng).worst
