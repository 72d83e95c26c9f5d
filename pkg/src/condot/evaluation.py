"""Per-pair evaluation of a transport model against held-out targets."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datasets import LabeledPair
from .metrics import mmd, perturbation_signature_l2, sinkhorn_cost

METRICS = ("sinkhorn", "mmd", "ps_l2", "map_mse")

# (source samples, context) -> predicted target samples
MapFn = Callable[[np.ndarray, object], np.ndarray]


def identity_model(X, context) -> np.ndarray:
    return np.asarray(X, dtype=np.float64).copy()


def oracle_model(pairs: Sequence[LabeledPair]) -> MapFn:
    table = {p.context: p.oracle for p in pairs}

    def apply(X, context):
        oracle = table.get(context)
        if oracle is None:
            raise KeyError(f"no ground-truth map for context {context}")
        return oracle(X)

    return apply


def map_error(pred: np.ndarray, truth: np.ndarray, X: np.ndarray) -> float:
    """``E||T(x) - T*(x)||^2 / E||x||^2``."""
    return float(np.mean(np.sum((pred - truth) ** 2, axis=1)) / np.mean(np.sum(X ** 2, axis=1)))


@dataclass
class PairMetrics:
    pair_id: str
    split: str
    values: dict[str, float]


def evaluate_pairs(model: MapFn, pairs: Sequence[LabeledPair], metrics: Sequence[str] = METRICS,
                   eps: float = 0.1, split: str = "all", max_samples: int | None = 1024,
                   seed: int = 0) -> list[PairMetrics]:
    """Compare ``model(source)`` with each pair's target on the requested metrics.

    ``map_mse`` (mean squared distance to the ground-truth map image) is only
    reported for pairs that carry an oracle. Sets larger than ``max_samples``
    are evaluated on a seeded subsample.
    """
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metric {unknown[0]!r}; choose from {METRICS}")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for p in pairs:
        X, Y = p.source, p.target
        if max_samples is not None and X.shape[0] > max_samples:
            X = X[np.sort(rng.choice(X.shape[0], max_samples, replace=False))]
        if max_samples is not None and Y.shape[0] > max_samples:
            Y = Y[np.sort(rng.choice(Y.shape[0], max_samples, replace=False))]
        pred = np.asarray(model(X, p.context), dtype=np.float64)
        vals = {}
        for m in metrics:
            if m == "sinkhorn":
                vals[m] = sinkhorn_cost(pred, Y, eps)
            elif m == "mmd":
                vals[m] = mmd(pred, Y)
            elif m == "ps_l2":
                vals[m] = perturbation_signature_l2(X, Y, pred)
            elif m == "map_mse" and p.oracle is not None:
                vals[m] = float(np.mean(np.sum((pred - p.oracle(X)) ** 2, axis=1)))
        out.append(PairMetrics(p.id, split, vals))
    return out


def aggregate(rows: Sequence[PairMetrics]) -> dict[str, dict[str, float]]:
    """Mean of every metric per split."""
    result: dict[str, dict[str, float]] = {}
    for split in dict.fromkeys(r.split for r in rows):
        sel = [r for r in rows if r.split == split]
        names = list(dict.fromkeys(k for r in sel for k in r.values))
        result[split] = {k: float(np.mean([r.values[k] for r in sel if k in r.values])) for k in names}
    return result


def metrics_csv(rows: Sequence[PairMetrics], metrics: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair_id", "split", *metrics])
    for r in rows:
        w.writerow([r.pair_id, r.split, *("" if m not in r.values else f"{r.values[m]:.17g}" for m in metrics)])
    return buf.getvalue()
