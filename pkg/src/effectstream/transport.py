"""Wasserstein-type balance term between treated and control representations.

The distributional distance is computed as entropic-regularized optimal
transport between the two empirical point clouds (uniform weights, squared
Euclidean ground cost). The returned value is the transport cost under the
entropic plan, differentiable with respect to both point sets: the backward
pass replays the executed scaling iterations in reverse, so gradients match
finite differences of the value actually computed, converged or not.

``exact_ot_small`` enumerates assignments and serves as the test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .autodiff import Tensor, pairwise_sqdist
from .errors import DimensionMismatchError, GroupImbalanceError


@dataclass
class IPMConfig:
    """Entropic OT settings.

    ``epsilon`` is multiplied by the median ground cost when
    ``relative_epsilon`` is set (the default); the median is treated as a
    constant under differentiation.
    """

    epsilon: float = 0.05
    relative_epsilon: bool = True
    max_iterations: int = 200
    tolerance: float = 1e-6
    check_interval: int = 5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class TransportResult:
    cost: Tensor
    converged: bool
    iterations: int
    plan: np.ndarray
    epsilon: float


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    mx = m.max(axis=axis, keepdims=True)
    out = np.log(np.exp(m - mx).sum(axis=axis)) + np.squeeze(mx, axis=axis)
    return out


def sinkhorn_cost(
    cost_matrix: Tensor,
    epsilon: float,
    max_iterations: int = 200,
    tolerance: float = 1e-6,
    check_interval: int = 5,
) -> tuple[Tensor, bool, int, np.ndarray]:
    """Entropic OT between uniform marginals over the rows/columns of ``cost_matrix``.

    Runs the matrix-scaling iteration on K = exp(-C/eps); if the scaling
    factors leave double range (tiny eps) the solve restarts in the log
    domain. Both paths execute the same mathematical updates, so the
    backward sweep below differentiates either. Returns (cost tensor,
    converged flag, iterations used, transport plan).
    """
    c = cost_matrix.data
    n, m = c.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    inv_eps = 1.0 / epsilon

    converged = False
    iterations = 0
    kernel = np.exp(-c * inv_eps)
    stable = bool(kernel.sum(axis=1).all() and kernel.sum(axis=0).all())

    if stable:
        # scaling form: u_t = exp(f_t/eps), v_t = exp(g_t/eps); overflow is
        # caught by the finite check and routed to the log-domain rerun
        u_hist: list[np.ndarray] = []
        v_hist: list[np.ndarray] = [np.ones(m)]
        v = v_hist[0]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for t in range(1, max_iterations + 1):
                u = a / (kernel @ v)
                v = b / (kernel.T @ u)
                if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                    stable = False
                    break
                u_hist.append(u)
                v_hist.append(v)
                iterations = t
                if t % check_interval == 0 or t == max_iterations:
                    err = np.abs(u * (kernel @ v) - a).sum()
                    if err < tolerance:
                        converged = True
                        break
    if stable:
        plan = u_hist[-1][:, None] * kernel * v_hist[-1][None, :]

        def softmaxes(t):
            ut, vt_prev, vt = u_hist[t - 1], v_hist[t - 1], v_hist[t]
            s = ut[:, None] * kernel * (vt * m)[None, :]
            r = (ut * n)[:, None] * kernel * vt_prev[None, :]
            return s, r

    else:
        # tiny eps: rerun in the log domain (same mathematical updates)
        f_hist: list[np.ndarray] = []
        g_hist: list[np.ndarray] = [np.zeros(m)]
        loga, logb = np.log(a), np.log(b)
        g = g_hist[0]
        converged = False
        for t in range(1, max_iterations + 1):
            f = epsilon * (loga - _logsumexp((g[None, :] - c) * inv_eps, axis=1))
            g = epsilon * (logb - _logsumexp((f[:, None] - c) * inv_eps, axis=0))
            f_hist.append(f)
            g_hist.append(g)
            iterations = t
            if t % check_interval == 0 or t == max_iterations:
                err = np.abs(
                    np.exp((f[:, None] + g[None, :] - c) * inv_eps).sum(axis=1) - a
                ).sum()
                if err < tolerance:
                    converged = True
                    break
        plan = np.exp((f_hist[-1][:, None] + g_hist[-1][None, :] - c) * inv_eps)

        def softmaxes(t):
            ft, gt_prev, gt = f_hist[t - 1], g_hist[t - 1], g_hist[t]
            s = np.exp((ft[:, None] + gt[None, :] - c) * inv_eps) * m
            r = np.exp((ft[:, None] + gt_prev[None, :] - c) * inv_eps) * n
            return s, r

    value = float((plan * c).sum())
    n_iters = iterations

    def bwd(gout):
        # reverse sweep over the executed iterations; each update's softmax
        # matrix is rebuilt from the stored duals
        gs = float(gout)
        pc = plan * c
        gf_value = pc.sum(axis=1) * (inv_eps * gs)
        gg = pc.sum(axis=0) * (inv_eps * gs)
        gc = gs * (plan - pc * inv_eps)
        for t in range(n_iters, 0, -1):
            s, r = softmaxes(t)
            # g_t update: column softmax s_ij = P_t,ij / b_j
            gf = -(s @ gg)
            if t == n_iters:
                gf += gf_value
            gc += s * gg[None, :]
            # f_t update: row softmax r_ij = P'_t,ij / a_i
            gg = -(r.T @ gf)
            gc += r * gf[:, None]
        return ((cost_matrix, gc),)

    out = Tensor._node(np.float64(value), (cost_matrix,), bwd)
    return out, converged, iterations, plan


def wasserstein_ipm(
    treated, control, cfg: IPMConfig | None = None
) -> TransportResult:
    """Balance term between treated and control representation clouds."""
    cfg = cfg or IPMConfig()
    tr = treated if isinstance(treated, Tensor) else Tensor(treated)
    co = control if isinstance(control, Tensor) else Tensor(control)
    if tr.data.ndim != 2 or co.data.ndim != 2:
        raise DimensionMismatchError("representation sets must be 2-D")
    if tr.data.shape[0] == 0:
        raise GroupImbalanceError("treated group is empty")
    if co.data.shape[0] == 0:
        raise GroupImbalanceError("control group is empty")
    if tr.data.shape[1] != co.data.shape[1]:
        raise DimensionMismatchError(
            f"column counts differ: {tr.data.shape[1]} vs {co.data.shape[1]}"
        )
    cost_matrix = pairwise_sqdist(tr, co)
    if cfg.relative_epsilon:
        scale = float(np.median(cost_matrix.data))
        if scale <= 0.0:
            scale = float(np.mean(cost_matrix.data))
        if scale <= 0.0:
            # all points coincide: cost is identically zero under any plan
            zero = Tensor._node(
                np.float64(0.0),
                (cost_matrix,),
                lambda g: ((cost_matrix, np.zeros_like(cost_matrix.data)),),
            )
            n, m = cost_matrix.data.shape
            return TransportResult(zero, True, 0, np.full((n, m), 1.0 / (n * m)), 0.0)
        epsilon = cfg.epsilon * scale
    else:
        epsilon = cfg.epsilon
    value, converged, iterations, plan = sinkhorn_cost(
        cost_matrix,
        epsilon,
        max_iterations=cfg.max_iterations,
        tolerance=cfg.tolerance,
        check_interval=cfg.check_interval,
    )
    return TransportResult(value, converged, iterations, plan, epsilon)


def exact_ot_small(treated: np.ndarray, control: np.ndarray) -> float:
    """Exact OT cost between equal-size point sets by assignment enumeration.

    With uniform weights the balanced problem reduces to a minimum-cost
    perfect matching; feasible only for n <= 8.
    """
    a = np.asarray(treated, dtype=np.float64)
    b = np.asarray(control, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionMismatchError("point sets must be 2-D with equal column counts")
    n = a.shape[0]
    if n != b.shape[0]:
        raise ValueError("exact_ot_small requires equal set sizes")
    if not 1 <= n <= 8:
        raise ValueError("exact_ot_small handles 1 <= n <= 8 points")
    cost = (
        (a * a).sum(axis=1)[:, None]
        + (b * b).sum(axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    np.maximum(cost, 0.0, out=cost)
    perms = np.array(list(permutations(range(n))), dtype=np.intp)
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    return float(totals.min() / n)
