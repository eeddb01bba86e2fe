"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Tensors wrap float64 numpy arrays (row-major). A computation graph is built
per forward pass and freed after backward(); tensors that are not attached
to a graph are immutable-by-convention and safe to share between threads.

There is no general broadcasting: every operation states its shape contract
and raises ShapeError otherwise. Scalar results use shape (1, 1).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "smul",
    "add_bias",
    "matmul",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "gather_rows",
    "gather_cols_one_per_row",
    "take_diag",
    "sum_all",
    "mean_all",
    "mean_axis0",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "sigmoid",
    "softplus",
    "gelu",
    "layer_norm",
    "normalize_rows",
    "embedding",
    "tree_sum",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D float64 array, optionally a node in a reverse-mode graph.

    ``parents``/``backward_fn`` are set by the op constructors; ``backward_fn``
    maps the incoming gradient to a tuple of per-parent gradient arrays.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor initialized with non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named trainable tensor belonging to exactly one optimizer group."""

    GROUPS = ("SLM", "LLM", "projection", "heads", "vision")

    def __init__(self, name: str, data, group: str):
        if group not in self.GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        self.name = name
        self.group = group
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, group={self.group!r})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def smul(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast addition: x is (n, d), b is (1, d)."""
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: x {x.shape} needs bias (1, {x.shape[1]}), got {b.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# structure


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of empty sequence")
    width = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != width:
            raise ShapeError(f"concat_rows: widths differ ({p.shape[1]} vs {width})")
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(chunk) for chunk in np.split(g, splits, axis=0))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of empty sequence")
    height = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != height:
            raise ShapeError(f"concat_cols: heights differ ({p.shape[0]} vs {height})")
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(chunk) for chunk in np.split(g, splits, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo <= hi <= a.shape[0]):
        raise ShapeError(f"slice_rows [{lo}:{hi}] out of bounds for {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        return (full,)

    return _make(a.data[lo:hi].copy(), (a,), bwd)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo <= hi <= a.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] out of bounds for {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return _make(a.data[:, lo:hi].copy(), (a,), bwd)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("gather_rows with no indices")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise ShapeError(f"gather_rows: index out of bounds for {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx].copy(), (a,), bwd)


def gather_cols_one_per_row(a: Tensor, cols: Sequence[int]) -> Tensor:
    """Pick one element per row: out[i, 0] = a[i, cols[i]]."""
    idx = np.asarray(cols, dtype=np.int64)
    if idx.size != a.shape[0]:
        raise ShapeError(f"need one column index per row ({a.shape[0]}), got {idx.size}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError(f"column index out of bounds for {a.shape}")
    rows = np.arange(a.shape[0])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g.reshape(-1)
        return (full,)

    return _make(a.data[rows, idx].reshape(-1, 1).copy(), (a,), bwd)


def take_diag(a: Tensor) -> Tensor:
    n, m = a.shape
    if n != m:
        raise ShapeError(f"take_diag on non-square tensor {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        np.fill_diagonal(full, g.reshape(-1))
        return (full,)

    return _make(np.diag(a.data).reshape(n, 1).copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    return _make(
        np.array([[a.data.sum()]]),
        (a,),
        lambda g: (np.full_like(a.data, g[0, 0]),),
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(
        np.array([[a.data.mean()]]),
        (a,),
        lambda g: (np.full_like(a.data, g[0, 0] / n),),
    )


def mean_axis0(a: Tensor) -> Tensor:
    n = a.shape[0]
    return _make(
        a.data.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, n, axis=0) / n,),
    )


def flatten_rows(a: Tensor) -> Tensor:
    """Reshape (r, c) to a single row (1, r*c), row-major."""
    r, c = a.shape
    return _make(
        a.data.reshape(1, r * c),
        (a,),
        lambda g: (g.reshape(r, c),),
    )


def logsumexp_axis0(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp, reducing (n, c) to (1, c); a smooth maximum."""
    m = a.data.max(axis=0, keepdims=True)
    out = m + np.log(np.exp(a.data - m).sum(axis=0, keepdims=True))

    def bwd(g):
        return (g * np.exp(a.data - out),)

    return _make(out, (a,), bwd)


def tree_sum(parts: Sequence[Tensor]) -> Tensor:
    """Pairwise (tree) summation of same-shaped tensors.

    Bounds floating-point drift for long galleries compared to a left fold.
    """
    if not parts:
        raise ShapeError("tree_sum of empty sequence")
    layer = list(parts)
    while len(layer) > 1:
        nxt = []
        for i in range(0, len(layer) - 1, 2):
            nxt.append(add(layer[i], layer[i + 1]))
        if len(layer) % 2:
            nxt.append(layer[-1])
        layer = nxt
    return layer[0]


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError(f"softmax axis must be 0 or 1, got {axis}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd)


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError(f"log_softmax axis must be 0 or 1, got {axis}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed stably for large |x|
    y = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return _make(y, (a,), lambda g: (g * sig,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        return (g * dy,)

    return _make(y, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise normalization to mean 0 / variance 1, then affine."""
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeError(f"layer_norm: gain/bias must be (1, {d})")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (x.data - mu) / s
    y = xhat * gain.data + bias.data

    def bwd(g):
        gxh = g * gain.data
        gx = (gxh - gxh.mean(axis=1, keepdims=True)
              - xhat * (gxh * xhat).mean(axis=1, keepdims=True)) / s
        return (
            gx,
            (g * xhat).sum(axis=0, keepdims=True),
            g.sum(axis=0, keepdims=True),
        )

    return _make(y, (x, gain, bias), bwd)


def normalize_rows(x: Tensor) -> Tensor:
    """L2-normalize each row; raises on a zero row (degenerate embedding)."""
    norms = np.sqrt((x.data**2).sum(axis=1, keepdims=True))
    if np.any(norms < 1e-300):
        raise ContractError("cannot normalize a zero vector")
    y = x.data / norms

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _make(y, (x,), bwd)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Look up rows of an embedding table by id; gradients scatter-add."""
    return gather_rows(table, ids)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Populates ``.grad`` on every reachable tensor with ``requires_grad``,
    then frees the graph (parent links and closures) so memory stays bounded.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        for parent, pg in zip(node._parents, node._backward(node.grad)):
            if not parent.requires_grad and parent._backward is None:
                continue
            if parent.grad is None:
                parent.grad = pg.copy()
            else:
                parent.grad += pg

    # free the tape; leaf gradients survive on their tensors
    for node in topo:
        is_leaf = node._backward is None
        node._parents = ()
        node._backward = None
        if not is_leaf and node is not root:
            node.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    epsilon: float = 1e-5,
    max_coords_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    Returns the max over sampled coordinates of |a - n| / max(|a|, |n|, 1e-8).
    ``loss_fn`` must be deterministic; this is verified by evaluating it twice.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ContractError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params = list(params)

    v1 = loss_fn().item()
    v2 = loss_fn().item()
    if v1 != v2:
        raise ContractError("loss_fn is not deterministic")

    for p in params:
        p.zero_grad()
    root = loss_fn()
    backward(root)
    analytic = {p.name: (p.tensor.grad.copy() if p.tensor.grad is not None
                         else np.zeros_like(p.data)) for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords_per_param, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            up = loss_fn().item()
            flat[c] = orig - epsilon
            down = loss_fn().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic[p.name].reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
