"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient::

    w = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = backward(tape, loss)      # {w: array([6.])}

Broadcasting is limited to a *leading batch* rule: the smaller operand's shape
must equal the trailing dimensions of the larger one (scalars broadcast
everywhere). Gradients are reduced over the broadcast leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class GraphError(TensorError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, name or "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _result(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        out = cls.__new__(cls)
        _check_finite(arr, op)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications; use as a context manager."""

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


class no_grad:
    """Suspend recording on all tapes inside the block."""

    def __enter__(self):
        self._saved = Tape._stack[:]
        Tape._stack.clear()

    def __exit__(self, *exc):
        Tape._stack[:] = self._saved


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._result(arr, needs, op)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(Node(op, inputs, out, bwd))
    return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` starting from scalar ``loss``.

    Returns a map from each requires-grad leaf (or each tensor in ``wrt``) to
    its gradient; leaves also get ``.grad`` set. Leaves the loss does not
    depend on receive zeros. Intermediate gradients are dropped as soon as
    their node has been processed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    is_leaf_loss = loss.requires_grad and not tape.produced(loss)
    if not tape.produced(loss) and not is_leaf_loss:
        raise GraphError("backward: loss was not produced on this tape (detached graph)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if is_leaf_loss:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not tape.produced(t):
                leaves[key] = t

    result: dict[Tensor, np.ndarray] = {}
    targets = list(wrt) if wrt is not None else list(leaves.values())
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# broadcasting helpers


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-batch broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NonFiniteError("div: division by zero")
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _emit("add_scalar", a.data + float(c), (a,), lambda g: (g,))


def pow_scalar(a, p: float) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    p = float(p)
    return _emit("pow_scalar", x ** p, (a,), lambda g: (g * p * x ** (p - 1.0),))


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)`` or ``(..., n, k) @ (..., k, m)`` with equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bwd)


# ---------------------------------------------------------------------------
# elementwise unary


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _emit("gelu", out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient flows only strictly inside the interval."""
    a = _as_tensor(a)
    x = a.data
    inside = (x > lo) & (x < hi)
    return _emit("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _emit("sum", a.data.sum(axis=ax), (a,), bwd)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# softmax family and normalization


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", out, (a,), bwd)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (a,), bwd)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bwd(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _emit("layernorm", out, (x, gamma, beta), bwd)


def embedding(table, indices) -> Tensor:
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding: indices must be integers, got {idx.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    tshape = table.shape

    def bwd(g):
        gt = np.zeros(tshape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, tshape[1]))
        return (gt,)

    return _emit("embedding", table.data[idx], (table,), bwd)


# ---------------------------------------------------------------------------
# losses and norms


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(N, C)`` logits against integer labels."""
    logits = _as_tensor(logits)
    y = np.asarray(labels)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    n, c = logits.shape
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ShapeError(f"cross_entropy: label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, y]).mean()
    p = np.exp(z - lse[:, None])

    def bwd(g):
        gl = p.copy()
        gl[rows, y] -= 1.0
        return (gl * (g / n),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), bwd)


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    return _emit("mse", np.asarray((diff * diff).mean()), (pred, target),
                 lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


def l1_norm(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _emit("l1_norm", np.asarray(np.abs(a.data).sum()), (a,), lambda g: (g * s,))


def l2_norm(a) -> Tensor:
    a = _as_tensor(a)
    nrm = float(np.sqrt((a.data * a.data).sum()))
    x = a.data
    return _emit("l2_norm", np.asarray(nrm), (a,),
                 lambda g: (g * x / nrm if nrm > 0 else np.zeros_like(x),))


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[Mapping[str, np.ndarray]], float],
                     w: Mapping[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences ``(f(w + h e_i) - f(w - h e_i)) / 2h`` for every coordinate.

    ``w`` maps names to arrays; it is perturbed on private copies, never in place.
    """
    if not h > 0:
        raise ValueError(f"finite_diff_grad: step must be positive, got {h}")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in w.items()}
    out: dict[str, np.ndarray] = {}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"finite_diff_grad: non-finite f probing {name}[{i}]")
            g[i] = (fp - fm) / (2.0 * h)
        out[name] = g.reshape(arr.shape)
    return out


__all__ = [
    "Tensor", "Tape", "Node", "backward", "no_grad", "active_tape", "finite_diff_grad",
    "TensorError", "ShapeError", "NonFiniteError", "GraphError",
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar", "pow_scalar", "matmul",
    "relu", "gelu", "tanh", "sigmoid", "exp", "log", "abs_", "clamp",
    "reshape", "transpose", "sum_", "mean", "softmax", "log_softmax", "layernorm",
    "embedding", "cross_entropy", "mse", "l1_norm", "l2_norm",
]
