"""Small reverse-mode differentiation core over numpy arrays.

Tensors hold rank <= 3 float32 arrays. Operations executed inside an active
:class:`Graph` are recorded in construction order; ``Graph.backward`` walks
that record in exact reverse. Outside a graph the same functions run as plain
forward code, which is what inference paths use.

Matrix products are accumulated in float64 and rounded back to the working
dtype. The working dtype can be switched to float64 with :func:`precision`,
which the finite-difference checker relies on.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "LabelError",
    "Tensor",
    "Graph",
    "precision",
    "custom_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "gelu",
    "tanh",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "embedding",
    "split_heads",
    "merge_heads",
    "select_position",
    "gather_positions",
    "transpose_last",
    "mean_pool",
    "reduce_sum",
    "gradient_check",
    "GradCheckReport",
]

MAX_RANK = 3
_GELU_C = math.sqrt(2.0 / math.pi)
_MASK_FILL = -1e9


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class LabelError(ValueError):
    pass


_state = {"dtype": np.float32, "graphs": []}


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the working dtype of newly created tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    # cheap sum first; only a non-finite total needs the elementwise scan
    if arr.size and not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_state["dtype"])
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        _check_finite(arr, name or "tensor constructor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered tape of recorded operations.

    Use as a context manager; operations whose inputs require gradients are
    appended while the graph is active.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _state["graphs"].append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state["graphs"].remove(self)

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if output.data.size != 1:
                raise DimensionError("backward without a seed gradient needs a scalar output")
            grad = np.ones_like(output.data)
        grad = np.asarray(grad, dtype=output.data.dtype)
        if grad.shape != output.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {output.shape}")
        output.grad = grad if output.grad is None else output.grad + grad
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                _check_finite(gi, f"backward of {node.op}")
                gi = gi.astype(inp.data.dtype, copy=False)
                inp.grad = gi if inp.grad is None else inp.grad + gi


def _active_graph() -> Graph | None:
    graphs = _state["graphs"]
    return graphs[-1] if graphs else None


def custom_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap a forward result and register its backward rule on the active graph.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data, name=op)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph = _active_graph()
        if graph is not None:
            graph.nodes.append(_Node(op, tuple(inputs), out, backward))
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(_state["dtype"])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: (m,k)@(k,n), (B,m,k)@(k,n) and (B,m,k)@(B,k,n).
    """
    A, Bm = a.data, b.data
    if A.ndim not in (2, 3) or Bm.ndim not in (2, 3) or (A.ndim == 2 and Bm.ndim == 3):
        raise DimensionError(f"unsupported matmul ranks {A.shape} @ {Bm.shape}")
    if A.shape[-1] != Bm.shape[-2] or (Bm.ndim == 3 and A.shape[0] != Bm.shape[0]):
        raise DimensionError(f"matmul shape mismatch {A.shape} @ {Bm.shape}")
    out = _mm(A, Bm)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _mm(g, np.swapaxes(Bm, -1, -2))
        if not b.requires_grad:
            pass
        elif Bm.ndim == 2 and A.ndim == 3:
            gb = _mm(A.reshape(-1, A.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        else:
            gb = _mm(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return custom_op("matmul", out, (a, b), backward)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return custom_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return custom_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return custom_op("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = _state["dtype"](c)
    return custom_op("scale", x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis (the only broadcast supported)."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias shape {bias.shape} does not match {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return custom_op("add_bias", x.data + bias.data, (x, bias),
                     lambda g: (g, g.sum(axis=lead) if bias.requires_grad else None))


def gelu(x: Tensor) -> Tensor:
    X = x.data
    t = np.tanh(_GELU_C * (X + 0.044715 * (X * X * X)))
    out = 0.5 * X * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * (X * X))
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return custom_op("gelu", out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return custom_op("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def softmax(x: Tensor, axis: int = -1, key_mask: np.ndarray | None = None, heads: int = 1) -> Tensor:
    """Numerically stable softmax.

    ``key_mask`` (batch x keys, truthy = keep) masks the last axis of a
    (batch*heads, queries, keys) score tensor; masked keys get a large
    negative fill so that fully masked rows come out uniform, not NaN.
    """
    X = x.data
    if not -X.ndim <= axis < X.ndim:
        raise DimensionError(f"axis {axis} invalid for rank {X.ndim}")
    if key_mask is not None:
        keep = np.repeat(np.asarray(key_mask, dtype=bool), heads, axis=0)[:, None, :]
        X = np.where(keep, X, _state["dtype"](_MASK_FILL))
    z = X - X.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    X = x.data
    d = X.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _state["dtype"](eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(X.ndim - 1))

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        if not gamma.requires_grad and not beta.requires_grad:
            return gx, None, None
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op("layer_norm", out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes; returns a scalar."""
    Z = logits.data
    if Z.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes), got {Z.shape}")
    y = np.asarray(labels, dtype=np.int64)
    b, C = Z.shape
    if y.shape != (b,):
        raise DimensionError(f"labels shape {y.shape} != ({b},)")
    if b and (y.min() < 0 or y.max() >= C):
        raise LabelError(f"labels must lie in [0, {C})")
    z = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), y].mean()
    probs = np.exp(logp)

    def backward(g):
        grad = probs.copy()
        grad[np.arange(b), y] -= 1.0
        return (grad * (g / b),)

    return custom_op("cross_entropy", np.asarray(loss), (logits,), backward)


def embedding(table: Tensor, pos: Tensor, ids, grad_ids=None) -> Tensor:
    """Token lookup plus positional rows: out[i, j] = table[ids[i, j]] + pos[j].

    ``grad_ids`` routes the table gradient to different rows than the ones
    read in the forward pass (straight-through over a token remap).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise DimensionError(f"ids must be (batch, seq), got {ids.shape}")
    n = ids.shape[1]
    if n > pos.shape[0]:
        raise DimensionError(f"sequence length {n} exceeds positional table {pos.shape[0]}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("token id outside embedding table")
    route = ids if grad_ids is None else np.asarray(grad_ids, dtype=np.int64)
    out = table.data[ids] + pos.data[:n]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, route.reshape(-1), g.reshape(-1, g.shape[-1]))
        gp = np.zeros_like(pos.data)
        gp[:n] = g.sum(axis=0)
        return gt, gp

    return custom_op("embedding", out, (table, pos), backward)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(b, n, d) -> (b*heads, n, d/heads)."""
    b, n, d = x.shape
    dh = d // heads
    out = x.data.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(b * heads, n, dh)

    def backward(g):
        return (g.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, d),)

    return custom_op("split_heads", out, (x,), backward)


def merge_heads(x: Tensor, heads: int) -> Tensor:
    """(b*heads, n, dh) -> (b, n, heads*dh)."""
    bh, n, dh = x.shape
    b = bh // heads
    out = x.data.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, heads * dh)

    def backward(g):
        return (g.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(bh, n, dh),)

    return custom_op("merge_heads", out, (x,), backward)


def transpose_last(x: Tensor) -> Tensor:
    return custom_op("transpose_last", np.swapaxes(x.data, -1, -2), (x,),
                     lambda g: (np.swapaxes(g, -1, -2),))


def select_position(x: Tensor, j: int) -> Tensor:
    """(b, n, d) -> (b, d) taking sequence position j."""
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, j, :] = g
        return (gx,)

    return custom_op("select_position", x.data[:, j, :].copy(), (x,), backward)


def gather_positions(x: Tensor, rows, cols) -> Tensor:
    """(b, n, d) -> (m, d) picking x[rows[i], cols[i]]."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return custom_op("gather_positions", x.data[rows, cols], (x,), backward)


def mean_pool(x: Tensor, mask) -> Tensor:
    """Masked mean over the sequence axis: (b, n, d) -> (b, d)."""
    m = np.asarray(mask, dtype=x.data.dtype)[:, :, None]
    cnt = np.maximum(m.sum(axis=1), 1.0)
    out = (x.data * m).sum(axis=1) / cnt
    return custom_op("mean_pool", out, (x,), lambda g: ((g / cnt)[:, None, :] * m,))


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return custom_op("reduce_sum", np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype),
                     (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    per_input: list[float]
    tolerance: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g})"


def gradient_check(op: Callable[..., Tensor], inputs: Sequence, tolerance: float = 1e-4,
                   h: float = 1e-3, seed: int = 0) -> GradCheckReport:
    """Compare the analytic backward of ``op`` with central differences.

    Runs in float64. Non-scalar outputs are reduced with a fixed random
    projection. The error for each input is max|analytic - numeric| scaled by
    max|numeric|.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        with Graph() as g:
            leaves = [Tensor(a, requires_grad=True) for a in arrays]
            out = op(*leaves)
            proj = rng.standard_normal(out.shape) if out.data.size != 1 else None
            loss = out if proj is None else reduce_sum(mul(out, Tensor(proj)))
            g.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

        def f(args):
            val = op(*[Tensor(a) for a in args]).data
            v = float(val.sum()) if proj is None else float((val * proj).sum())
            if not math.isfinite(v):
                raise NumericError("non-finite value during finite differences")
            return v

        errors = []
        for i, a in enumerate(arrays):
            numeric = np.zeros_like(a)
            flat = a.reshape(-1)
            nflat = numeric.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = f(arrays)
                flat[k] = orig - h
                fm = f(arrays)
                flat[k] = orig
                nflat[k] = (fp - fm) / (2 * h)
            denom = max(float(np.abs(numeric).max(initial=0.0)), 1e-12)
            errors.append(float(np.abs(analytic[i] - numeric).max(initial=0.0)) / denom)
    worst = max(errors, default=0.0)
    return GradCheckReport(worst <= tolerance, worst, errors, tolerance)
