"""Distances between sample sets: entropic OT, an exact small-instance oracle,
multi-scale MMD and the perturbation-signature error.

All sets carry uniform weights. The entropic problem is

    W_eps(X, Y) = min_P <P, C> - eps * H(P),   H(P) = -sum P_ij (log P_ij - 1)

with ``C_ij = ||x_i - y_j||^2``; it is solved by log-domain Sinkhorn.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import EmptySet, NotConverged, TooFewSamples, TooLarge

MMD_SCALES = (2.0, 1.0, 0.5, 0.1, 0.01, 0.005)
SINKHORN_TOL = 1e-6
SINKHORN_MAX_ITERS = 5000
ORACLE_MAX_N = 8
# warm-start schedule (halving eps from max(C)) used when max(C) / eps exceeds this ratio
_ANNEAL_RATIO = 50.0
_ANNEAL_SWEEPS = 10
# Newton fallback for stalled small problems
_NEWTON_AFTER = 200
_NEWTON_MAX_M = 512
_NEWTON_STEPS = 50


def _samples(X, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-D sample matrix")
    return X


def sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, computed from differences (no cancellation)."""
    diff = X[:, None, :] - Y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass
class CouplingResult:
    P: np.ndarray
    cost: float
    iterations: int
    marginal_err: float
    converged: bool = True
    transport_cost: float = 0.0  # <P, C> alone
    entropy: float = 0.0  # H(P)
    f: np.ndarray | None = None
    g: np.ndarray | None = None
    cost_history: list[float] = field(default_factory=list)


def _plan_terms(f, g, C, eps):
    logP = (f[:, None] + g[None, :] - C) / eps
    P = np.exp(logP)
    transport = float(np.sum(P * C))
    entropy = float(-np.sum(P * (logP - 1.0)))
    return P, transport, entropy


def _sinkhorn_sweep(f, g, C, eps, log_a, log_b):
    f = eps * log_a - eps * logsumexp((g[None, :] - C) / eps, axis=1)
    g = eps * log_b - eps * logsumexp((f[:, None] - C) / eps, axis=0)
    return f, g


def _semi_dual(g, C, eps, log_a, m):
    f = eps * log_a - eps * logsumexp((g[None, :] - C) / eps, axis=1)
    return f, float(f.mean() + g.sum() / m)


def _newton_polish(g, C, eps, log_a, tol, steps):
    """Damped Newton ascent on the semi-dual in ``g``; used when sweeps stall."""
    n, m = C.shape
    f, val = _semi_dual(g, C, eps, log_a, m)
    used = 0
    for used in range(1, steps + 1):
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        col = P.sum(axis=0)
        grad = 1.0 / m - col
        if np.sum(np.abs(grad)) <= tol:
            break
        # negative Hessian; constant shifts of g are a null direction, pinned by the rank-one term
        H = (np.diag(col) - n * (P.T @ P)) / eps + np.full((m, m), 1.0 / m)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-10:
            f_new, val_new = _semi_dual(g + t * step, C, eps, log_a, m)
            if val_new >= val + 1e-4 * t * float(grad @ step):
                break
            t *= 0.5
        g, f, val = g + t * step, f_new, val_new
    return f, g, used


def sinkhorn(X, Y, eps: float = 0.1, *, tol: float = SINKHORN_TOL, max_iters: int = SINKHORN_MAX_ITERS,
             track_history: bool = False, C: np.ndarray | None = None) -> CouplingResult:
    """Entropic OT between the uniform empirical measures on ``X`` and ``Y``.

    Alternates exact log-domain updates of the two dual potentials; each
    iteration ends with the column marginal exact, and convergence is declared
    when the row-marginal L1 error drops to ``tol``.

    When ``eps`` is small against the cost scale the potentials are first
    warm-started along a geometric schedule ``eps_k = max(C) 2^-k`` down to
    ``eps`` (a few sweeps per stage). If plain sweeps at the target ``eps``
    stall on a small problem, damped Newton steps on the semi-dual finish the
    job. Every sweep and Newton step counts toward ``max_iters``.
    ``cost_history`` (when tracked) holds, after each sweep at the target
    ``eps``, the dual objective ``<a, f> + <b, g> - eps * sum(P)``; it equals
    the entropic cost once the marginals are met.
    """
    X, Y = _samples(X, "X"), _samples(Y, "Y")
    n, m = X.shape[0], Y.shape[0]
    if n < 1 or m < 1:
        raise EmptySet("sinkhorn needs at least one point on each side")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if C is None:
        if X.shape[1] != Y.shape[1]:
            raise ValueError("X and Y must have the same number of features")
        C = sq_dists(X, Y)
    log_a, log_b = -math.log(n), -math.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    it = 0
    stage_eps = float(C.max()) if C.size else eps
    if stage_eps > _ANNEAL_RATIO * eps:
        while stage_eps > eps and it < max_iters // 2:
            for _ in range(min(_ANNEAL_SWEEPS, max_iters // 2 - it)):
                f, g = _sinkhorn_sweep(f, g, C, stage_eps, log_a, log_b)
                it += 1
            stage_eps *= 0.5
    history: list[float] = []
    err = math.inf
    final_sweeps = 0
    polished = False
    while it < max_iters:
        f, g = _sinkhorn_sweep(f, g, C, eps, log_a, log_b)
        it += 1
        final_sweeps += 1
        row = np.exp(logsumexp((f[:, None] + g[None, :] - C) / eps, axis=1))
        err = float(np.sum(np.abs(row - 1.0 / n)))
        if track_history:
            history.append(float(f.sum() / n + g.sum() / m - eps * row.sum()))
        if err <= tol:
            break
        if not polished and final_sweeps >= _NEWTON_AFTER and m <= _NEWTON_MAX_M:
            polished = True
            f, g, used = _newton_polish(g, C, eps, log_a, 0.1 * tol, min(_NEWTON_STEPS, max_iters - it))
            it += used
    P, transport, entropy = _plan_terms(f, g, C, eps)
    res = CouplingResult(P, transport - eps * entropy, it, err, err <= tol, transport, entropy, f, g, history)
    if not res.converged:
        raise NotConverged(res, max_iters)
    return res


def sinkhorn_cost(X, Y, eps: float = 0.1, **kw) -> float:
    """``W_eps`` value; a non-converged run still returns its last iterate's cost."""
    try:
        return sinkhorn(X, Y, eps, **kw).cost
    except NotConverged as exc:
        return exc.result.cost


def sinkhorn_divergence(X, Y, eps: float = 0.1) -> float:
    """Debiased ``W_eps(X,Y) - (W_eps(X,X) + W_eps(Y,Y)) / 2``; zero for identical sets."""
    return sinkhorn_cost(X, Y, eps) - 0.5 * (sinkhorn_cost(X, X, eps) + sinkhorn_cost(Y, Y, eps))


def exact_ot_oracle(X, Y) -> tuple[float, tuple[int, ...]]:
    """Exact OT between equal-size uniform sets by enumerating permutations."""
    X, Y = _samples(X, "X"), _samples(Y, "Y")
    n = X.shape[0]
    if n != Y.shape[0]:
        raise ValueError("exact_ot_oracle needs sets of equal size")
    if n > ORACLE_MAX_N:
        raise TooLarge(f"exhaustive search limited to n <= {ORACLE_MAX_N}, got {n}")
    if n == 0:
        raise EmptySet("empty sample sets")
    C = sq_dists(X, Y)
    best, best_perm = math.inf, tuple(range(n))
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        cost = float(C[rows, perm].sum())
        if cost < best:
            best, best_perm = cost, perm
    return best / n, best_perm


def mmd(X, Y, scales=MMD_SCALES) -> float:
    """Squared MMD with RBF kernels ``exp(-gamma d^2)``, averaged over ``scales``.

    Within-set sums skip the diagonal; the cross term uses all pairs.
    """
    X, Y = _samples(X, "X"), _samples(Y, "Y")
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise TooFewSamples("mmd needs at least two samples per set")
    dxx, dyy, dxy = sq_dists(X, X), sq_dists(Y, Y), sq_dists(X, Y)
    vals = []
    for gamma in scales:
        kxx, kyy, kxy = np.exp(-gamma * dxx), np.exp(-gamma * dyy), np.exp(-gamma * dxy)
        xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        vals.append(xx + yy - 2.0 * kxy.mean())
    return float(np.mean(vals))


def perturbation_signature(tgt, src) -> np.ndarray:
    return _samples(tgt, "tgt").mean(axis=0) - _samples(src, "src").mean(axis=0)


def perturbation_signature_l2(src, tgt_obs, tgt_pred) -> float:
    """``|| PS(obs, src) - PS(pred, src) ||_2``."""
    src, obs, pred = (_samples(a, n) for a, n in ((src, "src"), (tgt_obs, "tgt_obs"), (tgt_pred, "tgt_pred")))
    if min(src.shape[0], obs.shape[0], pred.shape[0]) == 0:
        raise EmptySet("perturbation signature needs nonempty sets")
    return float(np.linalg.norm(perturbation_signature(obs, src) - perturbation_signature(pred, src)))
