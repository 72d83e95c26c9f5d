"""Command line interface.

    condot {simulate|train|eval|embed-moa|report} --config <path> [--out <dir>] [--seed <int>]

Exit codes: 0 success, 2 invalid config, 3 I/O or dataset error, 4 non-finite
loss (the last good state is kept), 5 checkpoint/dataset dimension mismatch,
6 unreadable run directory. ``CONDOT_THREADS`` caps torch's intra-op threads.
Timestamps go to ``metadata.json`` only, so every other output is
byte-identical across reruns with the same config and seed.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .context import ActionSetContext, CategoricalContext, MoaEmbedding, build_moa_embedding
from .datasets import Dataset, load_dataset, make_splits, simulate_action_task, simulate_covariate_task, \
    simulate_scalar_task
from .errors import CheckpointError, ConfigError, ManifestError, NonFiniteLoss, ShapeMismatch, UnknownLabel
from .evaluation import METRICS, aggregate, evaluate_pairs, identity_model, metrics_csv, oracle_model
from .report import loss_curve_svg, scatter_svg, summary_markdown
from .training import TrainConfig, TrainState, history_csv, read_history_csv, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_DIM, EXIT_RUNDIR = 0, 2, 3, 4, 5, 6


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScalarTaskConfig(_Strict):
    task: Literal["scalar"]
    d: int = Field(ge=1)
    n_per_pair: int = Field(ge=2)
    t_values: list[float] = Field(min_length=1)
    seed: int = Field(0, ge=0)
    name: str = "scalar"


class CovariateTaskConfig(_Strict):
    task: Literal["covariate"]
    d: int = Field(ge=1)
    n_per_pair: int = Field(ge=2)
    n_classes: int = Field(ge=2)
    seed: int = Field(0, ge=0)
    name: str = "covariate"


class ActionTaskConfig(_Strict):
    task: Literal["actions"]
    d: int = Field(ge=1)
    n_per_pair: int = Field(ge=2)
    n_actions: int = Field(ge=2)
    n_combos: int = Field(ge=0)
    seed: int = Field(0, ge=0)
    split_level: Optional[int] = Field(None, ge=1, le=5)
    ladder: Optional[list[int]] = None
    name: str = "actions"


class SimulateConfig(_Strict):
    dataset: Union[ScalarTaskConfig, CovariateTaskConfig, ActionTaskConfig] = Field(discriminator="task")


class TrainRunConfig(_Strict):
    dataset: str
    train: TrainConfig = Field(default_factory=TrainConfig)
    use_split: bool = True
    moa: Optional[str] = None


class EvalConfig(_Strict):
    dataset: str
    model: Literal["checkpoint", "identity", "oracle"] = "checkpoint"
    run: Optional[str] = None
    metrics: list[str] = Field(default_factory=lambda: list(METRICS))
    eps: float = Field(0.1, gt=0)
    max_samples: int = Field(1024, ge=2)
    seed: int = Field(0, ge=0)


class MoaConfig(_Strict):
    dataset: str
    dim: int = Field(10, ge=1)
    eps: float = Field(0.1, gt=0)
    seed: int = Field(0, ge=0)


class ReportConfig(_Strict):
    runs: list[str] = Field(min_length=1)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _read_config(path: str, model):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config {path} is not valid JSON: {exc}") from None
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        raise CliError(EXIT_CONFIG, f"invalid config {path}:\n{exc}") from None


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else (base / q)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _metadata(out: Path, command: str, extra: dict | None = None) -> None:
    meta = {"command": command, "version": __version__,
            "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    meta.update(extra or {})
    _write(out / "metadata.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _load_dataset(path: Path) -> Dataset:
    try:
        return load_dataset(path)
    except ManifestError as exc:
        raise CliError(EXIT_IO, f"dataset error: {exc}") from None


# -- commands ----------------------------------------------------------------------


def cmd_simulate(cfg_path: str, out: Path, seed: int | None) -> int:
    cfg = _read_config(cfg_path, SimulateConfig).dataset
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    try:
        if cfg.task == "scalar":
            ds = simulate_scalar_task(cfg.d, cfg.n_per_pair, cfg.t_values, cfg.seed, name=cfg.name)
        elif cfg.task == "covariate":
            ds = simulate_covariate_task(cfg.d, cfg.n_per_pair, cfg.n_classes, cfg.seed, name=cfg.name)
        else:
            ds = simulate_action_task(cfg.d, cfg.n_per_pair, cfg.n_actions, cfg.n_combos, seed=cfg.seed,
                                      name=cfg.name)
            if cfg.split_level is not None:
                ds.split = make_splits(ds, cfg.split_level, cfg.ladder, cfg.seed)
    except (ConfigError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    try:
        path = ds.save(out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from None
    _metadata(out, "simulate")
    print(path)
    return EXIT_OK


def _train_pairs(ds: Dataset, use_split: bool):
    if use_split and ds.split is not None:
        return ds.subset(ds.split.train)
    return list(ds.pairs)


def cmd_train(cfg_path: str, out: Path, seed: int | None, resume: bool) -> int:
    base = Path(cfg_path).parent
    cfg = _read_config(cfg_path, TrainRunConfig)
    if seed is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": seed})})
    # the run snapshot records absolute paths so the run directory is self-contained
    cfg = cfg.model_copy(update={"dataset": str(_resolve(base, cfg.dataset).resolve()),
                                 "moa": None if cfg.moa is None else str(_resolve(base, cfg.moa).resolve())})
    ds = _load_dataset(Path(cfg.dataset))
    pairs = _train_pairs(ds, cfg.use_split)
    moa = None
    if cfg.moa is not None:
        try:
            moa = MoaEmbedding.load(cfg.moa)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(EXIT_IO, f"cannot read embedding: {exc}") from None
    state = None
    if resume:
        try:
            state = TrainState.load(out / "state.json")
        except CheckpointError as exc:
            raise CliError(EXIT_RUNDIR, str(exc)) from None
        state.config = state.config.model_copy(update={"steps": cfg.train.steps})
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "config.json", cfg.model_dump_json(indent=1) + "\n")
        state = train(pairs, cfg.train, state=state, moa=moa, checkpoint_dir=out)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, UnknownLabel) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except ShapeMismatch as exc:
        raise CliError(EXIT_DIM, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    _write(out / "history.csv", history_csv(state.history))
    _metadata(out, "train", {"steps": state.step})
    print(out / "state.json")
    return EXIT_OK


def cmd_eval(cfg_path: str, out: Path, seed: int | None) -> int:
    base = Path(cfg_path).parent
    cfg = _read_config(cfg_path, EvalConfig)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    unknown = [m for m in cfg.metrics if m not in METRICS]
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown metric {unknown[0]!r}; choose from {list(METRICS)}")
    ds = _load_dataset(_resolve(base, cfg.dataset))
    train_ids: set[str] = set(ds.split.train) if ds.split is not None else set()
    if cfg.model == "checkpoint":
        if cfg.run is None:
            raise CliError(EXIT_CONFIG, "model 'checkpoint' needs a run directory")
        try:
            state = TrainState.load(_resolve(base, cfg.run) / "state.json")
        except CheckpointError as exc:
            raise CliError(EXIT_RUNDIR, str(exc)) from None
        if state.g.spec.input_dim != ds.feature_dim:
            raise CliError(EXIT_DIM, f"checkpoint expects dimension {state.g.spec.input_dim}, "
                                     f"dataset has {ds.feature_dim}")
        model = state.transport
        train_ids = set(state.pair_ids)
    elif cfg.model == "identity":
        model = identity_model
    else:
        if any(p.oracle is None for p in ds.pairs):
            raise CliError(EXIT_CONFIG, "the dataset lacks ground-truth maps")
        model = oracle_model(ds.pairs)
    rows = []
    try:
        for split, sel in (("in_sample", [p for p in ds.pairs if p.id in train_ids]),
                           ("out_of_sample", [p for p in ds.pairs if p.id not in train_ids])):
            if sel:
                rows += evaluate_pairs(model, sel, cfg.metrics, cfg.eps, split, cfg.max_samples, cfg.seed)
    except ShapeMismatch as exc:
        raise CliError(EXIT_DIM, str(exc)) from None
    except UnknownLabel as exc:
        raise CliError(EXIT_CONFIG, f"context label unknown to the model: {exc}") from None
    report = {"metrics": list(cfg.metrics), "aggregate": aggregate(rows),
              "pairs": [{"pair_id": r.pair_id, "split": r.split, **r.values} for r in rows]}
    _write(out / "metrics.csv", metrics_csv(rows, cfg.metrics))
    _write(out / "metrics.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    _metadata(out, "eval")
    print(json.dumps(report["aggregate"], sort_keys=True))
    return EXIT_OK


def moa_targets(ds: Dataset) -> dict[str, np.ndarray]:
    """Target populations per label (single-action pairs for action tasks)."""
    targets: dict[str, list[np.ndarray]] = {}
    for p in ds.pairs:
        if isinstance(p.context, CategoricalContext):
            targets.setdefault(p.context.label, []).append(p.target)
        elif isinstance(p.context, ActionSetContext) and len(p.context.labels) == 1:
            targets.setdefault(p.context.labels[0], []).append(p.target)
    return {k: np.vstack(v) for k, v in targets.items()}


def cmd_embed_moa(cfg_path: str, out: Path, seed: int | None) -> int:
    base = Path(cfg_path).parent
    cfg = _read_config(cfg_path, MoaConfig)
    ds = _load_dataset(_resolve(base, cfg.dataset))
    targets = moa_targets(ds)
    try:
        emb = build_moa_embedding(targets, cfg.dim, cfg.seed if seed is None else seed, cfg.eps)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    emb.save(out / "moa.json")
    _metadata(out, "embed-moa")
    print(out / "moa.json")
    return EXIT_OK


def cmd_report(cfg_path: str, out: Path) -> int:
    base = Path(cfg_path).parent
    cfg = _read_config(cfg_path, ReportConfig)
    summary = []
    out.mkdir(parents=True, exist_ok=True)
    for i, run in enumerate(cfg.runs):
        run_dir = _resolve(base, run)
        label = f"run{i}_{Path(run).name}"
        try:
            history = read_history_csv(run_dir / "history.csv")
            state = TrainState.load(run_dir / "state.json")
            run_cfg = TrainRunConfig.model_validate_json((run_dir / "config.json").read_text(encoding="utf-8"))
        except (OSError, CheckpointError, ValueError, IndexError) as exc:
            raise CliError(EXIT_RUNDIR, f"unreadable run directory {run_dir}: {exc}") from None
        _write(out / f"{label}_losses.svg", loss_curve_svg(history, f"{label} losses"))
        row = {"run": label, "steps": state.step}
        for name in sorted({h[2] for h in history}):
            vals = [h[3] for h in history if h[2] == name][-50:]
            row[f"final_{name}"] = float(np.median(vals))
        note = ""
        try:
            ds = load_dataset(_resolve(run_dir, run_cfg.dataset))
        except ManifestError:
            ds = None
            note = "dataset unavailable; scatter skipped"
        if ds is not None and ds.feature_dim == 2:
            p = ds.pairs[0]
            X = p.source[:300]
            _write(out / f"{label}_scatter.svg",
                   scatter_svg({"source": X, "target": p.target[:300], "predicted": state.transport(X, p.context)},
                               f"{label} pair {p.id}"))
        elif ds is not None:
            note = f"d = {ds.feature_dim} > 2; scatter skipped"
        row["note"] = note
        summary.append(row)
    _write(out / "summary.md", summary_markdown(summary))
    _metadata(out, "report")
    print(out / "summary.md")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condot", description="Conditional Monge maps with convex potentials.")
    parser.add_argument("--version", action="version", version=f"condot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "eval", "embed-moa", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out>/state.json")
    return parser


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("CONDOT_THREADS")
    if threads:
        import torch

        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: CONDOT_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_CONFIG
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, out, args.seed)
        if args.command == "train":
            return cmd_train(args.config, out, args.seed, args.resume)
        if args.command == "eval":
            return cmd_eval(args.config, out, args.seed)
        if args.command == "embed-moa":
            return cmd_embed_moa(args.config, out, args.seed)
        return cmd_report(args.config, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
