"""Dense float64 linear algebra, Gaussian moments and sampling.

All samplers use numpy's ``PCG64`` bit generator seeded directly with the
caller's integer seed (``numpy.random.Generator(PCG64(seed))``); normals come
from ``Generator.standard_normal``. That pairing is the package's versioned
PRNG contract (``PRNG_NAME``).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NotSPD, TooFewSamples

PRNG_NAME = "numpy-PCG64/standard_normal/v1"

_SYM_TOL = 1e-10
_PSD_TOL = 1e-10


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def _as_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return M


def eig_floor(M: np.ndarray) -> float:
    """Clamp level for near-singular SPD inputs: 1e-10 * trace / d."""
    d = M.shape[0]
    return max(1e-10 * float(np.trace(M)) / d, 0.0)


def _clamped_eigh(M) -> tuple[np.ndarray, np.ndarray]:
    M = _as_matrix(M)
    S = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(S)
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    if w.size and w[0] < -1e-8 * scale:
        raise NotSPD(w[0])
    w = np.maximum(w, eig_floor(S))
    return w, V


def spd_sqrt(M) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    w, V = _clamped_eigh(M)
    S = (V * np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def spd_inv_sqrt(M) -> np.ndarray:
    w, V = _clamped_eigh(M)
    if np.any(w <= 0):
        raise NotSPD(float(w.min()), "matrix is singular; inverse square root undefined")
    S = (V / np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def spd_solve(M, b) -> np.ndarray:
    """Solve ``M x = b`` for SPD ``M`` (eigenvalues clamped at the floor)."""
    w, V = _clamped_eigh(M)
    if np.any(w <= 0):
        raise NotSPD(float(w.min()), "matrix is singular")
    b = np.asarray(b, dtype=np.float64)
    x = V @ ((V.T @ b) / (w if b.ndim == 1 else w[:, None]))
    # one step of iterative refinement keeps the residual at round-off level
    r = b - _as_matrix(M) @ x
    x = x + V @ ((V.T @ r) / (w if b.ndim == 1 else w[:, None]))
    return x


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        if not np.allclose(cov, cov.T, atol=_SYM_TOL * scale, rtol=0):
            raise ValueError("covariance is not symmetric")
        w = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if w.size and w[0] < -_PSD_TOL * scale:
            raise NotSPD(w[0])
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMoments":
        return cls(np.asarray(data["mean"]), np.asarray(data["cov"]))


def sample_gaussian(moments: GaussianMoments, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` rows from N(mean, cov) with the package PRNG.

    The factor is the Cholesky factor of the clamped covariance; covariances
    that stay singular after clamping (e.g. all zeros) use the symmetric root.
    """
    w, V = _clamped_eigh(moments.cov)
    clamped = (V * w) @ V.T
    clamped = 0.5 * (clamped + clamped.T)
    try:
        L = np.linalg.cholesky(clamped)
    except np.linalg.LinAlgError:
        L = (V * np.sqrt(w)) @ V.T
    Z = rng_from_seed(seed).standard_normal((int(n), moments.dim))
    return moments.mean[None, :] + Z @ L.T


def empirical_moments(X) -> GaussianMoments:
    """Mean and unbiased covariance of the rows of ``X``.

    Rows are put in lexicographic order first so the result is bit-identical
    under any row permutation.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise TooFewSamples(f"need at least 2 rows, got shape {X.shape}")
    order = np.lexsort(X.T[::-1])
    X = X[order]
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    return GaussianMoments(mean, 0.5 * (cov + cov.T))


def write_csv(path, X, header: list[str] | None = None) -> None:
    """Write a matrix with full round-trip precision (17 significant digits)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    buf = io.StringIO()
    if header is not None:
        buf.write(",".join(header) + "\n")
    for row in X:
        buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="ascii")


def read_csv(path) -> np.ndarray:
    """Read a numeric CSV; a non-numeric first row is treated as a header."""
    text = Path(path).read_text(encoding="ascii")
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if rows:
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ValueError(f"{path}: row {i} has {len(r)} columns, expected {width}")
    return np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
