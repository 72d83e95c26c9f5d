"""Context embedding and combination.

A raw context is a scalar, a categorical label or a set of action labels.
``ContextEncoder`` turns it into the real vector fed to a PICNN:

* scalars pass through (z-normalised with training statistics),
* labels use a trainable table initialised to one-hot rows or to a
  mode-of-action (MDS) embedding,
* action sets embed each member and merge them with a permutation-invariant
  combinator (multi-hot sum or a small deep set).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE
from .errors import ConfigError, EmptySet, LengthMismatch, TooFewLabels, UnknownLabel
from .metrics import sinkhorn_divergence
from .tensor_core import rng_from_seed

# -- raw contexts ------------------------------------------------------------


@dataclass(frozen=True)
class ScalarContext:
    t: float

    kind = "scalar"

    def to_dict(self) -> dict:
        return {"kind": "scalar", "t": float(self.t)}


@dataclass(frozen=True)
class CategoricalContext:
    label: str
    vocab: tuple[str, ...]

    kind = "categorical"

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if self.label not in self.vocab:
            raise UnknownLabel(self.label)

    def to_dict(self) -> dict:
        return {"kind": "categorical", "label": self.label, "vocab": list(self.vocab)}


@dataclass(frozen=True)
class ActionSetContext:
    labels: tuple[str, ...]

    kind = "actions"

    def __post_init__(self):
        labels = tuple(sorted(self.labels))
        if not labels:
            raise EmptySet("an action set needs at least one action")
        object.__setattr__(self, "labels", labels)

    def to_dict(self) -> dict:
        return {"kind": "actions", "labels": list(self.labels)}


Context = Union[ScalarContext, CategoricalContext, ActionSetContext]


def context_from_dict(d: Mapping) -> Context:
    kind = d.get("kind")
    if kind == "scalar":
        return ScalarContext(float(d["t"]))
    if kind == "categorical":
        return CategoricalContext(str(d["label"]), tuple(d["vocab"]))
    if kind == "actions":
        return ActionSetContext(tuple(d["labels"]))
    raise ConfigError(f"unknown context kind {kind!r}")


# -- one-hot and multi-hot ------------------------------------------------------


def embed_onehot(c: CategoricalContext) -> np.ndarray:
    if c.label not in c.vocab:
        raise UnknownLabel(c.label)
    v = np.zeros(len(c.vocab))
    v[c.vocab.index(c.label)] = 1.0
    return v


def _canonical_order(parts: np.ndarray) -> np.ndarray:
    return np.lexsort(parts.T[::-1]) if parts.shape[0] > 1 else np.arange(parts.shape[0])


def combine_multihot(parts: Sequence) -> np.ndarray:
    """Elementwise sum, accumulated in a canonical order (order-invariant bitwise)."""
    if len(parts) == 0:
        raise EmptySet("nothing to combine")
    lengths = {len(p) for p in parts}
    if len(lengths) != 1:
        raise LengthMismatch(f"parts have different lengths: {sorted(lengths)}")
    arr = np.asarray(parts, dtype=np.float64)
    out = np.zeros(arr.shape[1])
    for i in _canonical_order(arr):
        out = out + arr[i]
    return out


# -- deep-set combinator ----------------------------------------------------------


class DeepSet(nn.Module):
    """``rho(sum_i phi(e_i))``; phi and rho each have two layers of ``hidden`` units.

    Members are sorted lexicographically before pooling, so the pooled sum is
    accumulated in the same order for every permutation of the input.

    The initialisation starts the network as ``sigmoid(P s)`` of the member
    sum ``s``, with ``P`` a random orthogonal projection: ``phi`` is a small
    orthonormal embedding kept in the linear range of tanh and ``rho`` undoes
    its scale. Distinct sets therefore start at distinct, well-separated
    outputs, and a pair ``{a, b}`` starts equidistant from ``{a}`` and ``{b}``.
    A default random initialisation instead maps every set to nearly the same
    point (squared gaps of order 1e-5), which leaves downstream anchor
    selection arbitrary.
    """

    INIT_SCALE = 0.1

    def __init__(self, dim: int, hidden: int = 8, seed: int = 0):
        super().__init__()
        self.dim, self.hidden = int(dim), int(hidden)
        gen = torch.Generator().manual_seed(int(seed))
        G = torch.randn((max(dim, hidden), min(dim, hidden)), generator=gen, dtype=DTYPE)
        Q, _ = torch.linalg.qr(G)
        embed = Q if hidden >= dim else Q.T  # (hidden, dim), orthonormal columns or rows
        a = self.INIT_SCALE
        weights = {"enc0": a * embed, "enc1": torch.eye(hidden, dtype=DTYPE), "dec0": torch.eye(hidden, dtype=DTYPE),
                   "dec1": embed.T / a}
        for name, W in weights.items():
            self.register_parameter(f"{name}_W", nn.Parameter(W.contiguous()))
            self.register_parameter(f"{name}_b", nn.Parameter(torch.zeros(W.shape[0], dtype=DTYPE)))

    def _layer(self, name: str, h: torch.Tensor) -> torch.Tensor:
        return h @ getattr(self, f"{name}_W").T + getattr(self, f"{name}_b")

    def forward(self, parts: torch.Tensor) -> torch.Tensor:
        if parts.ndim != 2 or parts.shape[0] == 0:
            raise EmptySet("deep set needs a nonempty (k, dim) array of members")
        if parts.shape[1] != self.dim:
            raise LengthMismatch(f"members have dim {parts.shape[1]}, combinator expects {self.dim}")
        order = torch.as_tensor(_canonical_order(parts.detach().cpu().numpy()))
        h = torch.tanh(self._layer("enc0", parts[order]))
        h = torch.tanh(self._layer("enc1", h))
        pooled = h[0]
        for i in range(1, h.shape[0]):
            pooled = pooled + h[i]
        r = torch.tanh(self._layer("dec0", pooled))
        return torch.sigmoid(self._layer("dec1", r))


def combine_deepset(net: DeepSet, parts) -> torch.Tensor:
    if len(parts) == 0:
        raise EmptySet("nothing to combine")
    lengths = {len(p) for p in parts}
    if len(lengths) != 1:
        raise LengthMismatch(f"parts have different lengths: {sorted(lengths)}")
    t = parts if isinstance(parts, torch.Tensor) else torch.stack(
        [p if isinstance(p, torch.Tensor) else torch.as_tensor(np.asarray(p, dtype=np.float64)) for p in parts])
    return net(t.to(DTYPE))


# -- mode-of-action embedding via SMACOF ----------------------------------------------

SMACOF_MAX_ITER = 300
SMACOF_TOL = 1e-6
SMACOF_RESTARTS = 4
MOA_MAX_SAMPLES = 512


def stress(X: np.ndarray, D: np.ndarray) -> float:
    """Raw stress ``sum_{i<j} (||x_i - x_j|| - D_ij)^2``."""
    E = np.sqrt(np.maximum(np.sum((X[:, None] - X[None]) ** 2, axis=-1), 0.0))
    iu = np.triu_indices(D.shape[0], 1)
    return float(np.sum((E[iu] - D[iu]) ** 2))


def classical_mds(D: np.ndarray, dim: int) -> np.ndarray:
    n = D.shape[0]
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ (D ** 2) @ J
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    idx = np.argsort(w)[::-1][:dim]
    X = V[:, idx] * np.sqrt(np.maximum(w[idx], 0.0))
    if X.shape[1] < dim:
        X = np.hstack([X, np.zeros((n, dim - X.shape[1]))])
    return X


def smacof(D: np.ndarray, X0: np.ndarray, max_iter: int = SMACOF_MAX_ITER,
           tol: float = SMACOF_TOL) -> tuple[np.ndarray, list[float]]:
    """Stress majorisation with unit weights (Guttman transform).

    Returns the final configuration and the stress after every iterate,
    starting with the stress of ``X0``; the sequence is non-increasing.
    """
    n = D.shape[0]
    X = np.array(X0, dtype=np.float64)
    history = [stress(X, D)]
    for _ in range(max_iter):
        E = np.sqrt(np.sum((X[:, None] - X[None]) ** 2, axis=-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(E > 0, D / E, 0.0)
        B = -ratio
        np.fill_diagonal(B, 0.0)
        np.fill_diagonal(B, -B.sum(axis=1))
        X = B @ X / n
        history.append(stress(X, D))
        prev, cur = history[-2], history[-1]
        if prev <= 0 or (prev - cur) / prev < tol:
            break
    return X, history


def _duplicate_groups(D: np.ndarray, atol: float = 1e-12) -> list[int]:
    """Representative index per row: rows at distance ~0 with equal distance rows share one."""
    n = D.shape[0]
    rep = list(range(n))
    for i in range(n):
        for j in range(i):
            if rep[j] == j and D[i, j] <= atol and np.allclose(D[i], D[j], atol=atol, rtol=0):
                rep[i] = j
                break
    return rep


@dataclass
class MoaEmbedding:
    labels: list[str]
    vectors: np.ndarray
    stress: float
    distance_matrix: np.ndarray
    epsilon: float = 0.1
    stress_history: list[float] = field(default_factory=list)

    @property
    def table(self) -> dict[str, np.ndarray]:
        return {lab: self.vectors[i] for i, lab in enumerate(self.labels)}

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "vectors": self.vectors.tolist(), "stress": self.stress,
                "epsilon": self.epsilon, "distance_matrix": self.distance_matrix.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MoaEmbedding":
        dm = np.asarray(d.get("distance_matrix", np.zeros((len(d["labels"]),) * 2)), dtype=np.float64)
        return cls(list(d["labels"]), np.asarray(d["vectors"], dtype=np.float64), float(d["stress"]), dm,
                   float(d.get("epsilon", 0.1)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MoaEmbedding":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def embed_distances(labels: Sequence[str], D: np.ndarray, dim: int = 10, seed: int = 0,
                    restarts: int = SMACOF_RESTARTS, epsilon: float = 0.1) -> MoaEmbedding:
    """SMACOF embedding of a given dissimilarity matrix; best of ``restarts`` runs.

    Restart 0 starts from classical MDS, the rest from seeded random points;
    labels with identical distance rows start (and so stay) at the same point.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if n < 2 or len(labels) != n:
        raise TooFewLabels("need at least two labels with a square distance matrix")
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    rep = _duplicate_groups(D)
    rng = rng_from_seed(seed)
    scale = float(np.sqrt(np.mean(D ** 2))) or 1.0
    best = None
    for r in range(max(1, restarts)):
        if r == 0:
            X0 = classical_mds(D, dim)
        else:
            X0 = rng.standard_normal((n, dim)) * scale
        X0 = X0[rep]
        X, hist = smacof(D, X0)
        if best is None or hist[-1] < best[1][-1]:
            best = (X, hist)
    X, hist = best
    return MoaEmbedding(list(labels), X, hist[-1], D, epsilon, hist)


def moa_distance_matrix(targets: Mapping[str, np.ndarray], eps: float = 0.1, seed: int = 0,
                        max_samples: int = MOA_MAX_SAMPLES) -> tuple[list[str], np.ndarray]:
    """Pairwise ``sqrt(max(S_eps, 0))`` with ``S_eps`` the debiased entropic OT cost."""
    labels = sorted(targets)
    rng = rng_from_seed(seed)
    sets = []
    for lab in labels:
        Y = np.asarray(targets[lab], dtype=np.float64)
        if Y.ndim != 2 or Y.shape[0] < 2:
            raise TooFewLabels(f"population {lab!r} needs at least two samples")
        if Y.shape[0] > max_samples:
            Y = Y[np.sort(rng.choice(Y.shape[0], max_samples, replace=False))]
        sets.append(Y)
    n = len(labels)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = math.sqrt(max(sinkhorn_divergence(sets[i], sets[j], eps), 0.0))
    return labels, D


def build_moa_embedding(targets: Mapping[str, np.ndarray], dim: int = 10, seed: int = 0,
                        eps: float = 0.1) -> MoaEmbedding:
    if len(targets) < 2:
        raise TooFewLabels("a mode-of-action embedding needs at least two labels")
    labels, D = moa_distance_matrix(targets, eps, seed)
    return embed_distances(labels, D, dim, seed, epsilon=eps)


# -- full encoder ------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderSpec:
    kind: str  # scalar | categorical | actions
    vocab: tuple[str, ...] = ()
    embedding: str = "onehot"  # onehot | moa   (labels only)
    combinator: str = "multihot"  # multihot | deepset  (action sets only)
    deepset_hidden: int = 8
    scalar_mean: float = 0.0
    scalar_std: float = 1.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "vocab": list(self.vocab), "embedding": self.embedding,
                "combinator": self.combinator, "deepset_hidden": self.deepset_hidden,
                "scalar_mean": self.scalar_mean, "scalar_std": self.scalar_std}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderSpec":
        d = dict(d)
        d["vocab"] = tuple(d.get("vocab", ()))
        return cls(**d)


class ContextEncoder(nn.Module):
    """Embedding table (phi) plus optional deep-set combinator (Phi)."""

    def __init__(self, spec: EncoderSpec, table: np.ndarray | None = None, seed: int = 0):
        super().__init__()
        self.spec = spec
        if spec.kind not in ("scalar", "categorical", "actions"):
            raise ConfigError(f"unknown context kind {spec.kind!r}")
        if spec.kind == "scalar":
            self.out_dim = 1
            return
        if not spec.vocab:
            raise ConfigError("label contexts need a vocabulary")
        if table is None:
            table = np.eye(len(spec.vocab))
        table = np.asarray(table, dtype=np.float64)
        if table.shape[0] != len(spec.vocab):
            raise ConfigError("embedding table needs one row per vocabulary label")
        self.table = nn.Parameter(torch.as_tensor(table, dtype=DTYPE))
        self.deepset = None
        if spec.kind == "actions" and spec.combinator == "deepset":
            self.deepset = DeepSet(table.shape[1], spec.deepset_hidden, seed)
        elif spec.kind == "actions" and spec.combinator != "multihot":
            raise ConfigError(f"unknown combinator {spec.combinator!r}")
        self.out_dim = table.shape[1]

    @classmethod
    def for_contexts(cls, contexts: Sequence[Context], embedding: str = "onehot", combinator: str = "multihot",
                     moa: MoaEmbedding | None = None, seed: int = 0) -> "ContextEncoder":
        """Encoder fitted to training contexts (vocabulary, scalar statistics)."""
        kinds = {c.kind for c in contexts}
        if len(kinds) != 1:
            raise ConfigError(f"contexts must be homogeneous, got kinds {sorted(kinds)}")
        kind = kinds.pop()
        if kind == "scalar":
            ts = np.array([c.t for c in contexts])
            std = float(ts.std())
            return cls(EncoderSpec("scalar", scalar_mean=float(ts.mean()), scalar_std=std if std > 0 else 1.0))
        if kind == "categorical":
            vocab = tuple(contexts[0].vocab)
        else:
            vocab = tuple(sorted({lab for c in contexts for lab in c.labels}))
        table = None
        if embedding == "moa":
            if moa is None:
                raise ConfigError("moa embedding requested but none supplied")
            lookup = moa.table
            missing = [v for v in vocab if v not in lookup]
            if missing:
                raise UnknownLabel(missing[0])
            table = np.stack([lookup[v] for v in vocab])
        elif embedding != "onehot":
            raise ConfigError(f"unknown embedding {embedding!r}")
        spec = EncoderSpec(kind, vocab, embedding, combinator)
        return cls(spec, table, seed)

    def index(self, label: str) -> int:
        try:
            return self.spec.vocab.index(label)
        except ValueError:
            raise UnknownLabel(label) from None

    def forward(self, c: Context) -> torch.Tensor:
        if c.kind != self.spec.kind:
            raise ConfigError(f"encoder expects {self.spec.kind} contexts, got {c.kind}")
        if c.kind == "scalar":
            return torch.tensor([(c.t - self.spec.scalar_mean) / self.spec.scalar_std], dtype=DTYPE)
        if c.kind == "categorical":
            return self.table[self.index(c.label)]
        rows = self.table[torch.as_tensor([self.index(a) for a in c.labels])]
        if self.deepset is not None:
            return self.deepset(rows)
        order = torch.as_tensor(_canonical_order(rows.detach().cpu().numpy()))
        rows = rows[order]
        out = rows[0]
        for i in range(1, rows.shape[0]):
            out = out + rows[i]
        return out

    def encode_numpy(self, c: Context) -> np.ndarray:
        with torch.no_grad():
            return self(c).cpu().numpy().copy()
