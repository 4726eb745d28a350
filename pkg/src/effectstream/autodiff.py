"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything is float64. A Tensor wraps an ndarray and remembers how it was
produced; calling :func:`backward` on a scalar Tensor walks the recorded
graph in reverse and accumulates gradients into every reachable Tensor
with ``requires_grad=True``. Only the operations needed by the training
objectives are implemented.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import OracleFailureError

NORM_EPS = 1e-12  # below this a vector counts as zero for cosine purposes


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @staticmethod
    def _node(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Create an op-output Tensor; the tape is pruned where no gradient flows."""
        out = Tensor(data)
        tracked = tuple(p for p in parents if p.requires_grad or p._parents)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return scale(self, 1.0 / float(scalar))

    def __pow__(self, exponent):
        return power(self, exponent)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dp into ``p.grad`` for every Tensor reachable from loss.

    ``loss`` must be scalar. Grad buffers are allocated lazily and summed
    into, so callers reset them between steps via :func:`zero_grads`.
    """
    if loss.data.size != 1:
        raise ValueError("backward() expects a scalar loss")

    # iterative topological order (graphs can be long chains)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    # copy: closures may hand the same buffer to several parents
                    grads[id(parent)] = np.array(pg, dtype=np.float64)
                else:
                    acc += pg
        else:
            # leaf parameter
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return Tensor._node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return Tensor._node(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return ((a, g * s),)

    return Tensor._node(a.data * s, (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)

    def bwd(g):
        return ((a, g * e * np.power(a.data, e - 1.0)),)

    return Tensor._node(np.power(a.data, e), (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return Tensor._node(a.data @ b.data, (a, b), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        return ((a, np.broadcast_to(g, a.data.shape).copy()),)

    return Tensor._node(a.data.sum(), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        return ((a, np.broadcast_to(g / n, a.data.shape).copy()),)

    return Tensor._node(a.data.mean(), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        return ((a, g.reshape(old)),)

    return Tensor._node(a.data.reshape(shape), (a,), bwd)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.intp)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return ((a, ga),)

    return Tensor._node(a.data[index], (a,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple((p, g[offsets[i]:offsets[i + 1]]) for i, p in enumerate(parts))

    return Tensor._node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


# activations ----------------------------------------------------------------

def elu(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x > 0, x, np.expm1(x))

    def bwd(g):
        return ((a, g * np.where(x > 0, 1.0, out + 1.0)),)

    return Tensor._node(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    x = a.data

    def bwd(g):
        return ((a, g * (x > 0)),)

    return Tensor._node(np.maximum(x, 0.0), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return ((a, g * (1.0 - out * out)),)

    return Tensor._node(out, (a,), bwd)


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "elu": elu,
    "relu": relu,
    "tanh": tanh,
    "identity": identity,
}


# fused operations -----------------------------------------------------------

def cosine_similarity(h: Tensor, w: Tensor) -> Tensor:
    """Row-vs-column cosine: out[i, j] = cos(h_i, w[:, j]), zero where a norm vanishes."""
    hn = np.linalg.norm(h.data, axis=1)
    wn = np.linalg.norm(w.data, axis=0)
    hs = np.maximum(hn, NORM_EPS)
    ws = np.maximum(wn, NORM_EPS)
    cos = (h.data @ w.data) / (hs[:, None] * ws[None, :])
    dead = (hn < NORM_EPS)[:, None] | (wn < NORM_EPS)[None, :]
    if dead.any():
        cos = np.where(dead, 0.0, cos)

    def bwd(g):
        g = np.where(dead, 0.0, g) if dead.any() else g
        gn = g / (hs[:, None] * ws[None, :])
        gh = gn @ w.data.T - ((g * cos).sum(axis=1) / hs**2)[:, None] * h.data
        gw = h.data.T @ gn - w.data * ((g * cos).sum(axis=0) / ws**2)[None, :]
        return ((h, gh), (w, gw))

    return Tensor._node(cos, (h, w), bwd)


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Per-row cosine similarity of two equally shaped matrices."""
    an = np.linalg.norm(a.data, axis=1)
    bn = np.linalg.norm(b.data, axis=1)
    asafe = np.maximum(an, NORM_EPS)
    bsafe = np.maximum(bn, NORM_EPS)
    dot = (a.data * b.data).sum(axis=1)
    cos = dot / (asafe * bsafe)
    dead = (an < NORM_EPS) | (bn < NORM_EPS)
    if dead.any():
        cos = np.where(dead, 0.0, cos)

    def bwd(g):
        g = np.where(dead, 0.0, g) if dead.any() else g
        gn = (g / (asafe * bsafe))[:, None]
        ga = gn * b.data - ((g * cos) / asafe**2)[:, None] * a.data
        gb = gn * a.data - ((g * cos) / bsafe**2)[:, None] * b.data
        return ((a, ga), (b, gb))

    return Tensor._node(cos, (a, b), bwd)


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between rows of a (n,d) and rows of b (m,d)."""
    d = (
        (a.data * a.data).sum(axis=1)[:, None]
        + (b.data * b.data).sum(axis=1)[None, :]
        - 2.0 * a.data @ b.data.T
    )
    np.maximum(d, 0.0, out=d)

    def bwd(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data)
        gb = 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return ((a, ga), (b, gb))

    return Tensor._node(d, (a, b), bwd)


def elastic_net(w: Tensor) -> Tensor:
    """Squared L2 plus L1 of a weight matrix, with subgradient 0 at exact zeros."""
    val = (w.data * w.data).sum() + np.abs(w.data).sum()

    def bwd(g):
        return ((w, g * (2.0 * w.data + np.sign(w.data))),)

    return Tensor._node(val, (w,), bwd)


# gradient utilities ---------------------------------------------------------

def grad_report(params: Sequence[tuple[str, Tensor]]) -> tuple[dict[str, np.ndarray], list[str]]:
    """Collect gradients after backward(); names with no graph connection come back zero."""
    grads: dict[str, np.ndarray] = {}
    disconnected: list[str] = []
    for name, p in params:
        if p.grad is None:
            grads[name] = np.zeros_like(p.data)
            disconnected.append(name)
        else:
            grads[name] = p.grad.copy()
    return grads, disconnected


def finite_diff_grad(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle; perturbs parameters in place.

    ``loss_fn`` must be deterministic for fixed parameter values.
    """
    grads: dict[str, np.ndarray] = {}
    for name, p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_fn().data)
            flat[i] = orig - step
            lo = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise OracleFailureError(
                    f"non-finite loss while perturbing {name}[{i}]"
                )
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def relative_gradient_error(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """Max over parameters of |analytic - central difference| / max(|both|, floor)."""
    zero_grads(p for _, p in params)
    loss = loss_fn()
    backward(loss)
    analytic, _ = grad_report(params)
    numeric = finite_diff_grad(loss_fn, params, step=step)
    worst = 0.0
    for name, _ in params:
        a, f = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst
