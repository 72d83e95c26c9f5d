"""Joint training of conditional transport maps, embeddings and combinators.

Dual mode trains two PICNN potentials sharing one context encoder. ``g``
carries the map (``grad_x g(., c)`` pushes the source onto the target) and
``f`` approximates its convex conjugate:

    loss_f = E_nu[f(y, c)] - E_mu[f(grad g(x, c), c)]
    loss_g = -E_mu[<x, grad g(x, c)> - f(grad g(x, c), c)] + lam * R(g)

Step ``i`` (counted from 0) updates ``f`` when ``i % train_freq_f == 0`` and
``g`` otherwise; the encoder moves with whichever loss is active. ``f`` keeps
non-negative latent weights by clamping after each of its updates, ``g`` is
pushed there by the penalty ``R``. Primal mode trains ``g`` alone on the
entropic OT cost between ``grad g # mu`` and ``nu``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .autodiff import DTYPE
from .context import ContextEncoder, EncoderSpec, MoaEmbedding
from .datasets import LabeledPair
from .errors import CheckpointError, ConfigError, NonFiniteLoss, ShapeMismatch
from .metrics import sinkhorn
from .networks import (AnchorSet, ConvexNet, NetSpec, convexity_penalty, decode_array, encode_array,
                       init_icnn, init_picnn, project_convex, transport)
from .tensor_core import GaussianMoments, empirical_moments, rng_from_seed
from .gaussian_ot import gaussian_monge_map

STATE_FORMAT = "condot.trainstate"
STATE_VERSION = 1


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["dual", "primal"] = "dual"
    model: Literal["condot", "icnn"] = "condot"
    steps: int = Field(1000, ge=0)
    lr_theta: float = Field(1e-4, gt=0)
    lr_phi: float = Field(1e-4, gt=0)
    lr_Phi: float = Field(1e-4, gt=0)
    betas: tuple[float, float] = (0.5, 0.9)
    lam: float = Field(1.0, ge=0)
    train_freq_f: int = Field(10, ge=1)
    batch_size: int = Field(256, ge=1)
    seed: int = Field(0, ge=0)
    eps: float = Field(0.1, gt=0)
    checkpoint_every: int = Field(0, ge=0)
    hidden: list[int] = Field(default_factory=lambda: [64, 64, 64, 64])
    activation: Literal["softplus", "relu", "leaky_relu"] = "softplus"
    init: Literal["gaussian", "identity", "vanilla"] = "gaussian"
    embedding: Literal["onehot", "moa"] = "onehot"
    combinator: Literal["multihot", "deepset"] = "multihot"
    f_constraint: Literal["clamp", "penalty", "reparam"] = "clamp"
    g_constraint: Literal["clamp", "penalty", "reparam"] = "penalty"

    @field_validator("hidden")
    @classmethod
    def _widths(cls, v):
        if not v or any(h < 1 for h in v):
            raise ValueError("hidden widths must be >= 1")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.init == "vanilla" and self.model != "icnn":
            raise ValueError("vanilla initialisation is only defined for the context-blind ICNN")
        return self


# -- losses ------------------------------------------------------------------------


def _t(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)


def _ctx(net: ConvexNet, c):
    if net.kind == "icnn":
        return None
    if c is None:
        raise ShapeMismatch("a PICNN needs a context vector")
    return _t(c)


def _pot(net: ConvexNet, x: torch.Tensor, c) -> torch.Tensor:
    return net(x, _ctx(net, c))


def f_loss(f: ConvexNet, g: ConvexNet, X, Y, c=None) -> torch.Tensor:
    """``E_nu[f(y)] - E_mu[f(grad g(x))]``; ``g`` is held fixed."""
    X, Y = _t(X), _t(Y)
    Tx = transport(g, X, _ctx(g, c), create_graph=False).detach()
    return _pot(f, Y, c).mean() - _pot(f, Tx, c).mean()


def g_loss(f: ConvexNet, g: ConvexNet, X, Y, c=None, lam: float = 1.0) -> torch.Tensor:
    """``-E_mu[<x, grad g(x)> - f(grad g(x))] + lam * R(g)``."""
    X = _t(X)
    Tx = transport(g, X, _ctx(g, c), create_graph=True)
    inner = (X * Tx).sum(dim=1) - _pot(f, Tx, c)
    return -inner.mean() + convexity_penalty(g, lam)


def dual_losses(f: ConvexNet, g: ConvexNet, X, Y, c=None, lam: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    X, Y = _t(X), _t(Y)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    if X.shape[1] != Y.shape[1]:
        raise ShapeMismatch("source and target batches differ in dimension")
    return f_loss(f, g, X, Y, c), g_loss(f, g, X, Y, c, lam)


def primal_loss(net: ConvexNet, X, Y, c=None, eps: float = 0.1) -> torch.Tensor:
    """``W_eps(grad net # X, Y)`` with the optimal plan held fixed (envelope gradient)."""
    X, Y = _t(X), _t(Y)
    T = transport(net, X, _ctx(net, c), create_graph=True)
    res = sinkhorn(T.detach().numpy(), Y.numpy(), eps)
    P = torch.as_tensor(res.P, dtype=DTYPE)
    diff = T.unsqueeze(1) - Y.unsqueeze(0)
    cost = (P * (diff * diff).sum(-1)).sum()
    return cost - eps * res.entropy


# -- state -------------------------------------------------------------------------


def gaussian_pair_map(X: np.ndarray, Y: np.ndarray):
    return gaussian_monge_map(empirical_moments(X), empirical_moments(Y))


@dataclass
class TrainState:
    config: TrainConfig
    g: ConvexNet
    f: ConvexNet | None
    encoder: ContextEncoder
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    pair_ids: list[str]
    step: int = 0
    history: list[tuple[int, str, str, float]] = field(default_factory=list)

    # -- inference ---------------------------------------------------------------

    def embed(self, context) -> torch.Tensor | None:
        if self.g.kind == "icnn":
            return None
        return self.encoder(context)

    def transport(self, X, context) -> np.ndarray:
        with torch.no_grad():
            c = self.embed(context)
        c = None if c is None else c.detach()
        return transport(self.g, _t(X), c).detach().numpy()

    # -- serialization -------------------------------------------------------------

    def _param_groups(self):
        return [self.g, self.f, self.encoder]

    def to_checkpoint(self) -> dict:
        opt_state = []
        params = [p for group in self.optimizer.param_groups for p in group["params"]]
        for p in params:
            st = self.optimizer.state.get(p)
            if not st:
                opt_state.append(None)
                continue
            opt_state.append({"step": int(st["step"]), "exp_avg": encode_array(st["exp_avg"].numpy().ravel()),
                              "exp_avg_sq": encode_array(st["exp_avg_sq"].numpy().ravel())})
        enc_named = list(self.encoder.named_parameters())
        return {
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "config": json.loads(self.config.model_dump_json()),
            "step": self.step,
            "pair_ids": list(self.pair_ids),
            "g": self.g.to_checkpoint(),
            "f": None if self.f is None else self.f.to_checkpoint(),
            "encoder": {
                "spec": self.encoder.spec.to_dict(),
                "layout": [[n, list(p.shape)] for n, p in enc_named],
                "payload": encode_array(np.concatenate([p.detach().numpy().ravel() for _, p in enc_named])
                                        if enc_named else np.zeros(0)),
            },
            "optimizer": opt_state,
            "rng": self.rng.bit_generator.state,
            "history": [list(h) for h in self.history],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_checkpoint(), sort_keys=True), encoding="utf-8")

    @classmethod
    def from_checkpoint(cls, data: dict) -> "TrainState":
        if data.get("format") != STATE_FORMAT or data.get("version") != STATE_VERSION:
            raise CheckpointError("not a training-state checkpoint of a supported version")
        cfg = TrainConfig(**data["config"])
        g = ConvexNet.from_checkpoint(data["g"])
        f = None if data["f"] is None else ConvexNet.from_checkpoint(data["f"])
        enc = _encoder_from_checkpoint(data["encoder"])
        opt = _make_optimizer(cfg, g, f, enc)
        params = [p for group in opt.param_groups for p in group["params"]]
        if len(params) != len(data["optimizer"]):
            raise CheckpointError("optimizer state does not match the parameters")
        for p, st in zip(params, data["optimizer"]):
            if st is None:
                continue
            shape = p.shape
            opt.state[p] = {
                "step": torch.tensor(float(st["step"]), dtype=torch.float32),
                "exp_avg": torch.as_tensor(decode_array(st["exp_avg"], p.numel()).reshape(shape), dtype=DTYPE),
                "exp_avg_sq": torch.as_tensor(decode_array(st["exp_avg_sq"], p.numel()).reshape(shape), dtype=DTYPE),
            }
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = data["rng"]
        history = [(int(s), str(pid), str(name), float(v)) for s, pid, name, v in data["history"]]
        return cls(cfg, g, f, enc, opt, rng, list(data["pair_ids"]), int(data["step"]), history)

    @classmethod
    def load(cls, path) -> "TrainState":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        return cls.from_checkpoint(data)


def _encoder_from_checkpoint(d: dict) -> ContextEncoder:
    spec = EncoderSpec.from_dict(d["spec"])
    shapes = {n: tuple(s) for n, s in d["layout"]}
    table = np.zeros(shapes["table"]) if "table" in shapes else None
    enc = ContextEncoder(spec, table)
    named = list(enc.named_parameters())
    if [[n, list(p.shape)] for n, p in named] != d["layout"]:
        raise CheckpointError("encoder layout mismatch")
    values = decode_array(d["payload"], sum(p.numel() for _, p in named))
    offset = 0
    with torch.no_grad():
        for _, p in named:
            p.copy_(torch.as_tensor(values[offset:offset + p.numel()].reshape(p.shape), dtype=DTYPE))
            offset += p.numel()
    return enc


def _make_optimizer(cfg: TrainConfig, g: ConvexNet, f: ConvexNet | None, enc: ContextEncoder) -> torch.optim.Adam:
    groups = [{"params": list(g.parameters()), "lr": cfg.lr_theta}]
    if f is not None:
        groups.append({"params": list(f.parameters()), "lr": cfg.lr_theta})
    if cfg.model == "condot":
        table = [p for n, p in enc.named_parameters() if n == "table"]
        combinator = [p for n, p in enc.named_parameters() if n != "table"]
        if table:
            groups.append({"params": table, "lr": cfg.lr_phi})
        if combinator:
            groups.append({"params": combinator, "lr": cfg.lr_Phi})
    return torch.optim.Adam(groups, lr=cfg.lr_theta, betas=tuple(cfg.betas))


# -- construction ----------------------------------------------------------------------


def build_state(pairs: Sequence[LabeledPair], cfg: TrainConfig, moa: MoaEmbedding | None = None) -> TrainState:
    """Networks, encoder and optimiser initialised from the training pairs."""
    if not pairs:
        raise ConfigError("training needs at least one pair")
    kinds = {p.context.kind for p in pairs}
    if len(kinds) != 1:
        raise ConfigError(f"contexts must be homogeneous, got kinds {sorted(kinds)}")
    dims = {p.source.shape[1] for p in pairs} | {p.target.shape[1] for p in pairs}
    if len(dims) != 1:
        raise ShapeMismatch(f"pairs disagree on feature dimension: {sorted(dims)}")
    d = dims.pop()
    torch.manual_seed(cfg.seed)
    encoder = ContextEncoder.for_contexts([p.context for p in pairs], cfg.embedding, cfg.combinator, moa, cfg.seed)
    hidden = tuple(cfg.hidden)
    if cfg.model == "icnn":
        X = np.vstack([p.source for p in pairs])
        Y = np.vstack([p.target for p in pairs])
        g_spec = NetSpec("icnn", d, 0, hidden, cfg.activation, constraint_mode=cfg.g_constraint)
        f_spec = NetSpec("icnn", d, 0, hidden, cfg.activation, constraint_mode=cfg.f_constraint)
        if cfg.init == "gaussian":
            mu, nu = empirical_moments(X), empirical_moments(Y)
            g = init_icnn(g_spec, "gaussian", (mu, nu), seed=cfg.seed)
            f = init_icnn(f_spec, "gaussian", (nu, mu), seed=cfg.seed + 1)
        else:
            g = init_icnn(g_spec, cfg.init, seed=cfg.seed)
            f = init_icnn(f_spec, cfg.init, seed=cfg.seed + 1)
    else:
        with torch.no_grad():
            C = np.stack([encoder(p.context).numpy() for p in pairs])
        dc = C.shape[1]
        g_anchor = AnchorSet(C, [gaussian_pair_map(p.source, p.target) for p in pairs])
        f_anchor = AnchorSet(C, [gaussian_pair_map(p.target, p.source) for p in pairs])
        g_spec = NetSpec("picnn", d, dc, hidden, cfg.activation, constraint_mode=cfg.g_constraint)
        f_spec = NetSpec("picnn", d, dc, hidden, cfg.activation, constraint_mode=cfg.f_constraint)
        g = init_picnn(g_spec, g_anchor, cfg.init, seed=cfg.seed)
        f = init_picnn(f_spec, f_anchor, cfg.init, seed=cfg.seed + 1)
    if cfg.f_constraint == "clamp":
        project_convex(f)
    if cfg.mode == "primal":
        f = None
    opt = _make_optimizer(cfg, g, f, encoder)
    return TrainState(cfg, g, f, encoder, opt, rng_from_seed(cfg.seed), [p.id for p in pairs])


# -- training loop ---------------------------------------------------------------------


def _active_params(state: TrainState, net: ConvexNet) -> list[torch.Tensor]:
    params = list(net.parameters())
    if state.config.model == "condot":
        params += list(state.encoder.parameters())
    return params


def train_step(state: TrainState, pairs: Sequence[LabeledPair]) -> tuple[str, str, float]:
    cfg = state.config
    i = state.step
    pair = pairs[int(state.rng.integers(len(pairs)))]
    X = pair.source[state.rng.integers(pair.source.shape[0], size=cfg.batch_size)]
    Y = pair.target[state.rng.integers(pair.target.shape[0], size=cfg.batch_size)]
    c = state.embed(pair.context)
    if cfg.mode == "primal":
        name, net = "primal", state.g
        loss = primal_loss(net, X, Y, c, cfg.eps) + convexity_penalty(net, cfg.lam)
    elif i % cfg.train_freq_f == 0:
        name, net = "f", state.f
        loss = f_loss(state.f, state.g, X, Y, c)
    else:
        name, net = "g", state.g
        loss = g_loss(state.f, state.g, X, Y, c, cfg.lam)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLoss(i + 1, name, value)
    state.optimizer.zero_grad(set_to_none=True)
    params = _active_params(state, net)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, gr in zip(params, grads):
        p.grad = gr
    state.optimizer.step()
    if name == "f" and net.spec.constraint_mode == "clamp":
        project_convex(net)
    state.step = i + 1
    state.history.append((state.step, pair.id, name, value))
    return pair.id, name, value


def train(pairs: Sequence[LabeledPair], cfg: TrainConfig | None = None, *, state: TrainState | None = None,
          moa: MoaEmbedding | None = None, checkpoint_dir=None,
          callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run ``cfg.steps`` update steps (continuing ``state`` when given).

    With ``checkpoint_dir``, the state is written to ``state.json`` every
    ``checkpoint_every`` steps and at the end; on a non-finite loss the last
    good state is written before ``NonFiniteLoss`` propagates.
    """
    if state is None:
        if cfg is None:
            raise ConfigError("need a config or a state")
        state = build_state(pairs, cfg, moa)
    cfg = state.config
    by_id = {p.id: p for p in pairs}
    missing = [pid for pid in state.pair_ids if pid not in by_id]
    if missing:
        raise ConfigError(f"pair {missing[0]!r} of the training state is not in the data")
    ordered = [by_id[pid] for pid in state.pair_ids]
    ckpt = None if checkpoint_dir is None else Path(checkpoint_dir)
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    last_good = state.to_checkpoint() if ckpt is not None else None
    while state.step < cfg.steps:
        try:
            train_step(state, ordered)
        except NonFiniteLoss:
            if ckpt is not None:
                (ckpt / "state.json").write_text(json.dumps(last_good, sort_keys=True), encoding="utf-8")
            raise
        if callback is not None:
            callback(state)
        if ckpt is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            last_good = state.to_checkpoint()
            (ckpt / "state.json").write_text(json.dumps(last_good, sort_keys=True), encoding="utf-8")
            (ckpt / f"state_{state.step:06d}.json").write_text(json.dumps(last_good, sort_keys=True),
                                                               encoding="utf-8")
    if ckpt is not None:
        state.save(ckpt / "state.json")
    return state


def history_csv(history: Sequence[tuple[int, str, str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "pair_id", "loss_name", "value"])
    for step, pid, name, value in history:
        w.writerow([step, pid, name, f"{value:.17g}"])
    return buf.getvalue()


def read_history_csv(path) -> list[tuple[int, str, str, float]]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8"))))
    return [(int(r[0]), r[1], r[2], float(r[3])) for r in rows[1:] if r]
