"""Synthetic conditional transport tasks, dataset files, splits and PCA.

Every simulated pair carries its ground-truth map, an affine map
``x -> L x + b`` with ``L`` symmetric positive definite. Such a map is the
gradient of a convex quadratic, hence the optimal transport map from the
source to its image whatever the source distribution.

On-disk layout::

    <dir>/manifest.json
    <dir>/pairs/<id>_source.csv
    <dir>/pairs/<id>_target.csv

The manifest (format ``condot.dataset``, version 1) lists ``name``,
``feature_dim``, ``context_kind`` and ``pairs``; each pair holds ``id``,
``context``, ``source``, ``target`` (paths relative to the manifest) and an
optional ``oracle`` ``{"linear": [[...]], "offset": [...]}``. An optional
``split`` holds ``{"level", "train", "test"}`` pair ids.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .context import ActionSetContext, CategoricalContext, Context, ScalarContext, context_from_dict
from .errors import ConfigError, ManifestError, NotActionTask, RankDeficient, TooManyCombos
from .gaussian_ot import AffineMongeMap, gaussian_monge_map
from .tensor_core import GaussianMoments, read_csv, rng_from_seed, sample_gaussian, write_csv

MANIFEST_FORMAT = "condot.dataset"
MANIFEST_VERSION = 1
DEFAULT_LADDER_WEIGHTS = (55, 42, 29, 16, 4)
LADDER_POOL = 84


@dataclass(frozen=True)
class OracleMap:
    """Ground-truth affine map ``x -> x L^T + b``."""

    linear: np.ndarray
    offset: np.ndarray

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.linear.T + self.offset

    @classmethod
    def identity(cls, d: int) -> "OracleMap":
        return cls(np.eye(d), np.zeros(d))

    @classmethod
    def from_affine(cls, T: AffineMongeMap) -> "OracleMap":
        return cls(T.linear, T.b.copy())

    def to_dict(self) -> dict:
        return {"linear": self.linear.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, d) -> "OracleMap":
        return cls(np.asarray(d["linear"], dtype=np.float64), np.asarray(d["offset"], dtype=np.float64))


@dataclass
class LabeledPair:
    id: str
    context: Context
    source: np.ndarray
    target: np.ndarray
    oracle: OracleMap | None = None


@dataclass
class SplitPlan:
    level: int
    train: list[str]
    test: list[str]

    def to_dict(self) -> dict:
        return {"level": self.level, "train": list(self.train), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d) -> "SplitPlan":
        return cls(int(d["level"]), list(d["train"]), list(d["test"]))


@dataclass
class Dataset:
    name: str
    feature_dim: int
    context_kind: str
    pairs: list[LabeledPair]
    split: SplitPlan | None = None
    generator: dict = field(default_factory=dict)

    def pair(self, pair_id: str) -> LabeledPair:
        for p in self.pairs:
            if p.id == pair_id:
                return p
        raise KeyError(pair_id)

    def subset(self, ids: Sequence[str]) -> list[LabeledPair]:
        return [self.pair(i) for i in ids]

    def manifest(self) -> dict:
        out = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "name": self.name,
            "feature_dim": self.feature_dim,
            "context_kind": self.context_kind,
            "generator": self.generator,
            "pairs": [
                {
                    "id": p.id,
                    "context": p.context.to_dict(),
                    "source": f"pairs/{p.id}_source.csv",
                    "target": f"pairs/{p.id}_target.csv",
                    "oracle": None if p.oracle is None else p.oracle.to_dict(),
                }
                for p in self.pairs
            ],
        }
        if self.split is not None:
            out["split"] = self.split.to_dict()
        return out

    def save(self, out_dir) -> Path:
        """Write manifest and CSVs; returns the manifest path."""
        out = Path(out_dir)
        (out / "pairs").mkdir(parents=True, exist_ok=True)
        header = [f"x{i}" for i in range(self.feature_dim)]
        for p in self.pairs:
            write_csv(out / "pairs" / f"{p.id}_source.csv", p.source, header)
            write_csv(out / "pairs" / f"{p.id}_target.csv", p.target, header)
        path = out / "manifest.json"
        path.write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


# -- random building blocks ----------------------------------------------------------


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in rng_from_seed(seed).integers(0, 2**62, size=n)]


def random_spd(rng: np.random.Generator, d: int, lo: float, hi: float) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    w = rng.uniform(lo, hi, size=d)
    S = (Q * w) @ Q.T
    return 0.5 * (S + S.T)


def random_gaussian_map(rng: np.random.Generator, src: GaussianMoments, mean_scale: float = 2.0,
                        eig_range=(0.25, 4.0)) -> AffineMongeMap:
    d = src.dim
    dst = GaussianMoments(src.mean + mean_scale * rng.standard_normal(d), random_spd(rng, d, *eig_range))
    return gaussian_monge_map(src, dst)


def standard_source(d: int) -> GaussianMoments:
    return GaussianMoments(np.zeros(d), np.eye(d))


def _sample_pair(src: GaussianMoments, oracle: OracleMap, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    s_src, s_tgt = _seeds(seed, 2)
    X = sample_gaussian(src, n, s_src)
    Y = oracle(sample_gaussian(src, n, s_tgt))
    return X, Y


# -- simulators ----------------------------------------------------------------------


def mccann_map(base: OracleMap, t: float) -> OracleMap:
    """Displacement interpolation ``(1 - t) Id + t T`` of an affine map."""
    d = base.offset.size
    return OracleMap((1 - t) * np.eye(d) + t * base.linear, t * base.offset)


def simulate_scalar_task(d: int, n_per_pair: int, t_values: Sequence[float], seed: int,
                         base_map: OracleMap | None = None, source: GaussianMoments | None = None,
                         name: str = "scalar") -> Dataset:
    """Pairs ``(mu, ((1-t) Id + t grad psi)#mu)`` for each ``t``; ``mu`` Gaussian."""
    if any(not 0.0 <= t <= 1.0 for t in t_values):
        raise ConfigError("t_values must lie in [0, 1]")
    rng = rng_from_seed(seed)
    src = source if source is not None else standard_source(d)
    if base_map is None:
        base_map = OracleMap.from_affine(random_gaussian_map(rng, src))
    pair_seeds = _seeds(seed + 1, len(t_values))
    pairs = []
    for i, (t, s) in enumerate(zip(t_values, pair_seeds)):
        oracle = mccann_map(base_map, float(t))
        X, Y = _sample_pair(src, oracle, n_per_pair, s)
        pairs.append(LabeledPair(f"p{i:03d}", ScalarContext(float(t)), X, Y, oracle))
    gen = {"task": "scalar", "d": d, "n_per_pair": n_per_pair, "t_values": [float(t) for t in t_values],
           "seed": seed, "base_map": base_map.to_dict()}
    return Dataset(name, d, "scalar", pairs, generator=gen)


def _mixture_samples(means: np.ndarray, scale: float, n: int, seed: int) -> np.ndarray:
    rng = rng_from_seed(seed)
    k, d = means.shape
    comp = rng.integers(0, k, size=n)
    return means[comp] + scale * rng.standard_normal((n, d))


def simulate_covariate_task(d: int, n_per_pair: int, n_classes: int, seed: int, n_components: int = 2,
                            shared_map: bool = False, name: str = "covariate") -> Dataset:
    """Per-class Gaussian-mixture sources pushed through per-class affine maps."""
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    rng = rng_from_seed(seed)
    vocab = tuple(f"class{j}" for j in range(n_classes))
    shared = OracleMap.from_affine(random_gaussian_map(rng, standard_source(d))) if shared_map else None
    pair_seeds = _seeds(seed + 1, n_classes)
    pairs = []
    for j, s in enumerate(pair_seeds):
        means = 1.5 * rng.standard_normal((n_components, d))
        oracle = shared if shared is not None else OracleMap.from_affine(random_gaussian_map(rng, standard_source(d)))
        s_src, s_tgt = _seeds(s, 2)
        X = _mixture_samples(means, 0.5, n_per_pair, s_src)
        Y = oracle(_mixture_samples(means, 0.5, n_per_pair, s_tgt))
        pairs.append(LabeledPair(f"p{j:03d}", CategoricalContext(vocab[j], vocab), X, Y, oracle))
    gen = {"task": "covariate", "d": d, "n_per_pair": n_per_pair, "n_classes": n_classes, "seed": seed,
           "n_components": n_components, "shared_map": shared_map}
    return Dataset(name, d, "categorical", pairs, generator=gen)


def action_maps(d: int, n_actions: int, seed: int, perturb: float = 0.4, offset: float = 2.0) -> dict[str, OracleMap]:
    """Single-action maps ``x -> (I + E_k) x + b_k`` with ``||E_k||_2 <= perturb``."""
    rng = rng_from_seed(seed)
    maps = {}
    for k in range(n_actions):
        E = rng.standard_normal((d, d))
        E = 0.5 * (E + E.T)
        E *= perturb / max(np.max(np.abs(np.linalg.eigvalsh(E))), 1e-12)
        b = rng.standard_normal(d)
        b *= offset / np.linalg.norm(b)
        maps[f"a{k}"] = OracleMap(np.eye(d) + E, b)
    return maps


def compose_additive(maps: Sequence[OracleMap]) -> OracleMap:
    """``Id + sum_k (T_k - Id)``: displacement fields add."""
    d = maps[0].offset.size
    L = np.eye(d) + sum(m.linear - np.eye(d) for m in maps)
    return OracleMap(L, sum(m.offset for m in maps))


def simulate_action_task(d: int, n_per_pair: int, n_actions: int, n_combos: int,
                         composition: str = "additive-displacement", seed: int = 0,
                         identity_action: bool = False, perturb: float = 0.4, offset: float = 2.0,
                         name: str = "actions") -> Dataset:
    """Single actions plus ``n_combos`` two-action combinations on a shared source."""
    if composition != "additive-displacement":
        raise ConfigError(f"unknown composition {composition!r}")
    if n_actions < 2:
        raise ConfigError("n_actions must be >= 2")
    # pairwise displacements add, so keep every two-action combination invertible
    if perturb >= 0.5:
        raise ConfigError("perturb must be < 0.5 so combined maps stay positive definite")
    total = math.comb(n_actions, 2)
    if n_combos > total:
        raise TooManyCombos(f"{n_combos} combinations requested, only {total} exist")
    maps = action_maps(d, n_actions, seed, perturb, offset)
    if identity_action:
        maps["identity"] = OracleMap.identity(d)
    rng = rng_from_seed(seed + 2)
    all_combos = list(itertools.combinations(sorted(k for k in maps if k != "identity"), 2))
    chosen = sorted(all_combos[i] for i in rng.choice(len(all_combos), size=n_combos, replace=False))
    sets = [(k,) for k in sorted(maps)] + chosen
    src = standard_source(d)
    pair_seeds = _seeds(seed + 1, len(sets))
    pairs = []
    for i, (labels, s) in enumerate(zip(sets, pair_seeds)):
        oracle = compose_additive([maps[k] for k in labels])
        X, Y = _sample_pair(src, oracle, n_per_pair, s)
        pairs.append(LabeledPair(f"p{i:03d}", ActionSetContext(labels), X, Y, oracle))
    gen = {"task": "actions", "d": d, "n_per_pair": n_per_pair, "n_actions": n_actions, "n_combos": n_combos,
           "seed": seed, "composition": composition, "identity_action": identity_action,
           "perturb": perturb, "offset": offset}
    return Dataset(name, d, "actions", pairs, generator=gen)


# -- splits --------------------------------------------------------------------------


def default_ladder(n_combos: int) -> list[int]:
    """Train-combination counts per level, proportional to 55/42/29/16/4 of 84."""
    counts = [int(round(n_combos * w / LADDER_POOL)) for w in DEFAULT_LADDER_WEIGHTS]
    for i in range(1, len(counts)):
        counts[i] = min(counts[i], counts[i - 1])
    return [min(c, n_combos) for c in counts]


def make_splits(ds: Dataset, level: int, ladder: Sequence[int] | None = None, seed: int = 0) -> SplitPlan:
    if ds.context_kind != "actions":
        raise NotActionTask("splits need an action task")
    combos = [p.id for p in ds.pairs if len(p.context.labels) > 1]
    singles = [p.id for p in ds.pairs if len(p.context.labels) == 1]
    if not combos:
        raise NotActionTask("the task has no combinations to hold out")
    ladder = list(ladder) if ladder is not None else default_ladder(len(combos))
    if not 1 <= level <= len(ladder):
        raise ConfigError(f"level must be in 1..{len(ladder)}")
    if any(b > a for a, b in zip(ladder, ladder[1:])) or max(ladder) > len(combos) or min(ladder) < 0:
        raise ConfigError("ladder counts must be non-increasing and within the combination pool")
    order = [combos[i] for i in rng_from_seed(seed).permutation(len(combos))]
    train_combos = set(order[:ladder[level - 1]])
    train = singles + [c for c in combos if c in train_combos]
    test = [c for c in combos if c not in train_combos]
    return SplitPlan(level, train, test)


# -- PCA -----------------------------------------------------------------------------


@dataclass
class PCA:
    mean: np.ndarray
    basis: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray

    def project(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.basis.T

    def inverse_project(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.basis + self.mean


def pca_project(X, k: int = 50) -> tuple[np.ndarray, PCA]:
    """Mean-centred projection on the top ``k`` right singular vectors."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    limit = min(n - 1, d)
    if k > limit:
        warnings.warn(RankDeficient(f"k={k} exceeds min(rows-1, cols)={limit}; using k={limit}"), stacklevel=2)
        k = limit
    mean = X.mean(axis=0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    pca = PCA(mean, Vt[:k].copy(), (s[:k] ** 2) / max(n - 1, 1))
    return pca.project(X), pca


# -- loading -------------------------------------------------------------------------


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ManifestError("missing field", f"{where}.{key}" if where else key)
    return d[key]


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}", "manifest") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON ({exc})", "manifest") from None
    if data.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
        raise ManifestError(f"unexpected format {data.get('format')!r}", "format")
    if data.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ManifestError(f"unsupported version {data.get('version')!r}", "version")
    name = str(_require(data, "name", ""))
    dim = _require(data, "feature_dim", "")
    if not isinstance(dim, int) or dim < 1:
        raise ManifestError("must be a positive integer", "feature_dim")
    kind = _require(data, "context_kind", "")
    raw_pairs = _require(data, "pairs", "")
    if not isinstance(raw_pairs, list) or not raw_pairs:
        raise ManifestError("must be a nonempty list", "pairs")
    pairs, seen = [], set()
    for i, rp in enumerate(raw_pairs):
        where = f"pairs[{i}]"
        pid = str(_require(rp, "id", where))
        if pid in seen:
            raise ManifestError(f"duplicate pair id {pid!r}", f"{where}.id")
        seen.add(pid)
        try:
            ctx = context_from_dict(_require(rp, "context", where))
        except (KeyError, ValueError, TypeError) as exc:
            raise ManifestError(f"invalid context ({exc})", f"{where}.context") from None
        if ctx.kind != kind:
            raise ManifestError(f"context kind {ctx.kind!r} differs from dataset kind {kind!r}", f"{where}.context")
        arrays = []
        for side in ("source", "target"):
            rel = _require(rp, side, where)
            fpath = path.parent / rel
            if not fpath.is_file():
                raise ManifestError(f"file not found: {fpath}", f"{where}.{side}")
            try:
                arr = read_csv(fpath)
            except ValueError as exc:
                raise ManifestError(f"unreadable CSV {fpath}: {exc}", f"{where}.{side}") from None
            if arr.ndim != 2 or arr.shape[1] != dim:
                raise ManifestError(f"pair {pid!r}: {fpath.name} has {arr.shape[1] if arr.ndim == 2 else 0} "
                                    f"columns, expected feature_dim={dim}", f"{where}.{side}")
            arrays.append(arr)
        oracle = None
        if rp.get("oracle") is not None:
            oracle = OracleMap.from_dict(rp["oracle"])
            if oracle.linear.shape != (dim, dim) or oracle.offset.shape != (dim,):
                raise ManifestError("oracle shape does not match feature_dim", f"{where}.oracle")
        pairs.append(LabeledPair(pid, ctx, arrays[0], arrays[1], oracle))
    split = None
    if data.get("split") is not None:
        split = SplitPlan.from_dict(data["split"])
        unknown = [i for i in split.train + split.test if i not in seen]
        if unknown:
            raise ManifestError(f"unknown pair id {unknown[0]!r}", "split")
        if set(split.train) & set(split.test):
            raise ManifestError("train and test overlap", "split")
    return Dataset(name, dim, kind, pairs, split, data.get("generator", {}))
