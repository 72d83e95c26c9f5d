"""Closed-form optimal transport between Gaussians.

The Brenier potential from N(m1, S1) to N(m2, S2) is written in factored
form ``0.5 * ||A (x - omega)||^2`` with

    A     = (S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2})^{1/2}
    b     = m2 - A^T A m1
    omega = m1 - (A^T A)^{-1} m2

so its gradient is the affine Monge map ``x -> A^T A x + b`` and its minimum
value is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import GaussianMoments, spd_inv_sqrt, spd_solve, spd_sqrt


@dataclass(frozen=True)
class AffineMongeMap:
    A: np.ndarray
    b: np.ndarray
    omega: np.ndarray
    t: float

    @property
    def dim(self) -> int:
        return self.b.size

    @property
    def linear(self) -> np.ndarray:
        """Curvature ``A^T A`` of the potential (the map's linear part)."""
        return self.A.T @ self.A

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.linear.T + self.b

    @classmethod
    def identity(cls, d: int) -> "AffineMongeMap":
        return cls(np.eye(d), np.zeros(d), np.zeros(d), 0.0)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist(), "omega": self.omega.tolist(), "t": self.t}

    @classmethod
    def from_dict(cls, data: dict) -> "AffineMongeMap":
        return cls(np.asarray(data["A"], dtype=np.float64), np.asarray(data["b"], dtype=np.float64),
                   np.asarray(data["omega"], dtype=np.float64), float(data["t"]))


@dataclass(frozen=True)
class QuadLayer:
    """``q(x) = 0.5 * ||M (x - m)||^2``."""

    M: np.ndarray
    m: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "QuadLayer":
        return cls(np.eye(d), np.zeros(d))

    @classmethod
    def from_map(cls, T: AffineMongeMap) -> "QuadLayer":
        return cls(T.A.copy(), T.omega.copy())


def gaussian_monge_map(src: GaussianMoments, dst: GaussianMoments) -> AffineMongeMap:
    if src.dim != dst.dim:
        raise ValueError(f"dimension mismatch: {src.dim} vs {dst.dim}")
    s1 = spd_sqrt(src.cov)
    s1_inv = spd_inv_sqrt(src.cov)
    middle = spd_sqrt(s1 @ dst.cov @ s1)
    AtA = s1_inv @ middle @ s1_inv
    AtA = 0.5 * (AtA + AtA.T)
    A = spd_sqrt(AtA)
    AtA = A.T @ A
    b = dst.mean - AtA @ src.mean
    omega = src.mean - spd_solve(AtA, dst.mean)
    t = 0.5 * float(b @ spd_solve(AtA, b))
    return AffineMongeMap(A, b, omega, t)


def brenier_potential(T: AffineMongeMap, x) -> np.ndarray | float:
    """``0.5 * ||A (x - omega)||^2`` for a point or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    r = (x - T.omega) @ T.A.T
    out = 0.5 * np.sum(r * r, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def quad_layer_eval(q: QuadLayer, x) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    r = q.M @ (x - q.m)
    return 0.5 * float(r @ r), q.M.T @ r


def gelbrich_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    sa = spd_sqrt(a.cov)
    cross = spd_sqrt(sa @ b.cov @ sa)
    dm = a.mean - b.mean
    val = float(dm @ dm + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(val, 0.0)
