"""Entropic optimal transport between online and target instance features."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import kernels
from .tensor import EPS, NumericError, Tensor, as_tensor, l2_normalize, matmul, stopgrad, transpose


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def cost_matrix(O, T) -> Tensor:
    """``c[m, n] = 1 - cos(o_m, t_n)`` for K online rows O and K target rows T."""
    O, T = as_tensor(O), as_tensor(T)
    if O.ndim != 2 or T.ndim != 2 or O.shape[1] != T.shape[1]:
        raise ValueError(f"cost_matrix needs (K, d) inputs, got {O.shape} and {T.shape}")
    for name, x in (("O", O), ("T", T)):
        if np.any(np.linalg.norm(x.data, axis=1) <= EPS):
            raise NumericError(f"zero-norm feature vector in {name}")
    sim = matmul(l2_normalize(O), transpose(l2_normalize(T)))
    return 1.0 - sim


@dataclass
class Marginals:
    b: np.ndarray  # suppliers (online instances, rows)
    a: np.ndarray  # demanders (target instances, columns)
    raw_b: np.ndarray = field(repr=False, default=None)
    raw_a: np.ndarray = field(repr=False, default=None)


def _normalize_weights(w):
    total = w.sum()
    if total <= 0:
        return np.full(w.shape, 1.0 / w.size)
    return w / total


def marginal_weights(O, T, f_o1, f_o2, f_t1, f_t2) -> Marginals:
    """Clamped dot products with the mean scene feature of the other branch.

    ``b_m = max(o_m . (f_t1 + f_t2) / 2, 0)``, ``a_n = max(t_n . (f_o1 + f_o2) / 2, 0)``,
    each then rescaled to sum to one (uniform when all are zero). Returned as
    plain arrays: no gradient flows through the weights.
    """
    O, T = _data(O), _data(T)
    t_mean = (_data(f_t1) + _data(f_t2)) / 2.0
    o_mean = (_data(f_o1) + _data(f_o2)) / 2.0
    raw_b = np.maximum(O @ t_mean, 0.0)
    raw_a = np.maximum(T @ o_mean, 0.0)
    return Marginals(_normalize_weights(raw_b), _normalize_weights(raw_a), raw_b, raw_a)


@dataclass
class TransportPlan:
    plan: np.ndarray
    converged: bool
    iterations: int
    dual: np.ndarray = field(repr=False, default=None)  # dual objective per iteration
    newton_steps: int = 0

    def cost(self, C):
        return float(np.sum(self.plan * _data(C)))


def sinkhorn(C, a, b, epsilon=0.05, max_iter=200, tol=1e-6, newton_steps=50) -> TransportPlan:
    """Entropic OT plan with row sums ``b`` and column sums ``a`` (log-domain Sinkhorn).

    If ``max_iter`` scaling sweeps do not reach ``tol``, up to ``newton_steps``
    Newton steps on the same dual finish from where Sinkhorn stopped.
    """
    C = np.asarray(_data(C), dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if C.shape != (b.size, a.size):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({b.size}, {a.size})")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("marginals must be non-negative")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise ValueError(f"marginal totals differ: sum(a)={a.sum()!r}, sum(b)={b.sum()!r}")
    f, g, iters, converged, dual = kernels.sinkhorn_log(C, a, b, epsilon, max_iter, tol)
    steps = 0
    if not converged and newton_steps > 0:
        f, g, steps, converged, more = kernels.newton_polish(C, a, b, epsilon, g, tol, newton_steps)
        dual = np.concatenate([dual, more])
    plan = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    # judge the plan actually returned, not the solver's last internal check
    converged = bool(converged) and marginal_violation(plan, a, b) < tol
    return TransportPlan(plan, converged, int(iters), np.asarray(dual), int(steps))


def marginal_violation(plan, a, b):
    plan = plan.plan if isinstance(plan, TransportPlan) else plan
    return max(np.max(np.abs(plan.sum(axis=1) - b)), np.max(np.abs(plan.sum(axis=0) - a)))


def best_permutation_cost(C):
    """Exhaustive minimum of ``sum_m C[m, perm(m)] / K`` over all K! permutations."""
    C = _data(C)
    K = C.shape[0]
    rows = np.arange(K)
    return min(C[rows, list(p)].sum() for p in permutations(range(K))) / K


def instance_loss(O, T, plan) -> Tensor:
    """``-sum_mn cos(o_m, t_n) * plan_mn``; gradients reach O only."""
    plan = plan.plan if isinstance(plan, TransportPlan) else _data(plan)
    O = as_tensor(O)
    sim = 1.0 - cost_matrix(O, stopgrad(as_tensor(T)))
    return -(sim * Tensor(plan.astype(O.dtype, copy=False))).sum()
